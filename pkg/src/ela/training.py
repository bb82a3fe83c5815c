"""Byte-level training harness: corpus loading, the Adam loop with per-step
loss records, the ablation cross product, and streaming text sampling.

A corpus is any file read as raw bytes, split 90/10 into contiguous train
and validation prefixes. Every training step appends one CSV row; the run
directory layout is fixed (config.echo, loss.csv, model.ckpt) so runs can
be diffed and resumed by tooling.

Determinism contract: one seed drives parameter init, batch order, and
sampling, so identical configs produce identical loss columns. Wall-clock
milliseconds are recorded for humans and are the only nondeterministic
column.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import FinitenessError, InputError, UsageError
from .model import (
    ModelConfig,
    ToyGPT,
    format_model_config,
    gpt_forward,
    load_checkpoint,
    save_checkpoint,
    stream_start,
    stream_step,
)
from .tensor import Tape, Tensor, add, cross_entropy_mean, mul

LOSS_HEADER = ("step", "train_loss", "val_loss", "grad_norm", "tokens_seen", "wall_ms")
UNIFORM_NATS = math.log(256.0)

DESK_PATTERN = bytes(range(32, 96))


def make_desk_corpus(path: str, n_bytes: int = 65536) -> str:
    """Writes the repetitive desk corpus: a fixed 64-byte cycle."""
    reps = n_bytes // len(DESK_PATTERN) + 1
    with open(path, "wb") as fh:
        fh.write((DESK_PATTERN * reps)[:n_bytes])
    return path


@dataclass(frozen=True)
class Corpus:
    tokens: np.ndarray  # uint8 ids, full file
    train: np.ndarray   # contiguous 90% prefix
    val: np.ndarray     # contiguous 10% suffix


def load_corpus(path: str, context_len: int | None = None) -> Corpus:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read corpus: {exc}") from None
    if len(raw) == 0:
        raise InputError(f"corpus {path!r} is empty")
    if context_len is not None and len(raw) < context_len + 1:
        raise InputError(f"corpus {path!r} has {len(raw)} bytes; "
                         f"need at least context_len+1 = {context_len + 1}")
    tokens = np.frombuffer(raw, dtype=np.uint8)
    cut = (len(tokens) * 9) // 10
    return Corpus(tokens, tokens[:cut], tokens[cut:])


@dataclass(frozen=True)
class TrainConfig:
    corpus_path: str
    run_dir: str
    context_len: int = 128
    batch_size: int = 8
    steps: int = 200
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "f32"
    stop_at_loss: float | None = None
    # model switches, mirrored so one flat config names a whole experiment
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    n_experts: int = 4
    top_k: int = 2
    bias_mode: str = "inner"
    kernel: str = "hadamard-exp"
    hyper_link: bool = True
    memory_lobe: str = "on"
    final_norm: bool = False

    def validate(self) -> "TrainConfig":
        if self.context_len < 2:
            raise UsageError(f"context_len must be >= 2, got {self.context_len}")
        if self.batch_size < 1 or self.steps < 0:
            raise UsageError("batch_size must be >= 1 and steps >= 0")
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be positive")
        self.model_config().validate()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_layers=self.n_layers, d_model=self.d_model,
                           n_heads=self.n_heads, n_experts=self.n_experts,
                           top_k=self.top_k, bias_mode=self.bias_mode,
                           kernel=self.kernel, hyper_link=self.hyper_link,
                           memory_lobe=self.memory_lobe,
                           final_norm=self.final_norm, seed=self.seed)

    def echo(self) -> str:
        enc = lambda v: ("on" if v else "off") if isinstance(v, bool) else str(v)
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={'' if v is None else enc(v)}\n")
        return "".join(out)


@dataclass
class LossRecord:
    step: int
    train_loss: float
    val_loss: float
    grad_norm: float
    tokens_seen: int
    wall_ms: float

    def row(self):
        num = lambda x: f"{x:.12g}"
        return (str(self.step), num(self.train_loss), num(self.val_loss),
                num(self.grad_norm), str(self.tokens_seen), f"{self.wall_ms:.3f}")


@dataclass
class TrainResult:
    run_dir: str
    records: list
    param_count: int

    @property
    def final_train_loss(self) -> float:
        return self.records[-1].train_loss if self.records else float("nan")

    @property
    def final_val_loss(self) -> float:
        return self.records[-1].val_loss if self.records else float("nan")

    def steps_to(self, threshold: float):
        for rec in self.records:
            if rec.train_loss <= threshold:
                return rec.step
        return None


class Adam:
    """Adaptive moments, kept in f64 regardless of parameter precision."""

    def __init__(self, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, model: ToyGPT, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, param in model.named_params().items():
            g = grads[name].astype(np.float64)
            m = self.m.get(name)
            if m is None:
                m = np.zeros(param.shape)
                self.m[name] = m
                self.v[name] = np.zeros(param.shape)
            v = self.v[name]
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = param.data.astype(np.float64) - update
            # non-finite parameters surface as a non-finite loss next step,
            # which the loop reports; do not crash inside the update
            model.set_param(name, Tensor(new.astype(param.data.dtype),
                                         check_finite=False))


def _batch(tokens: np.ndarray, starts: np.ndarray, context: int):
    x = np.stack([tokens[s: s + context] for s in starts]).astype(np.int64)
    y = np.stack([tokens[s + 1: s + 1 + context] for s in starts]).astype(np.int64)
    return x, y


def _loss_tensors(model, x, y):
    logits, aux = gpt_forward(x, model)
    ce = cross_entropy_mean(logits, y)
    return add(ce, mul(aux, 0.01)), ce


def train(cfg: TrainConfig) -> TrainResult:
    cfg.validate()
    corpus = load_corpus(cfg.corpus_path, cfg.context_len)
    if len(corpus.train) < cfg.context_len + 1:
        raise InputError("train split shorter than one context window")
    if len(corpus.val) < cfg.context_len + 1:
        raise InputError("val split shorter than one context window")

    os.makedirs(cfg.run_dir, exist_ok=True)
    with open(os.path.join(cfg.run_dir, "config.echo"), "w") as fh:
        fh.write(cfg.echo())

    model = ToyGPT(cfg.model_config(), precision=cfg.precision)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)

    # one fixed validation batch; val_loss is a smooth per-step probe, not
    # an epoch sweep
    val_n = min(2, (len(corpus.val) - 1) // cfg.context_len) or 1
    val_starts = np.arange(val_n) * cfg.context_len
    val_starts = np.minimum(val_starts, len(corpus.val) - cfg.context_len - 1)
    vx, vy = _batch(corpus.val, val_starts, cfg.context_len)

    records = []
    start_ns = time.perf_counter_ns()
    csv_path = os.path.join(cfg.run_dir, "loss.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_HEADER)
        for step in range(1, cfg.steps + 1):
            starts = rng.integers(0, len(corpus.train) - cfg.context_len - 1,
                                  size=cfg.batch_size)
            x, y = _batch(corpus.train, starts, cfg.context_len)
            with np.errstate(all="ignore"):
                # a blown-up forward can trip the substrate's finiteness check
                # before the loss is even a number; the diagnostic row must be
                # written either way
                try:
                    tape = Tape()
                    with tape:
                        loss, _ = _loss_tensors(model, x, y)
                    train_loss = float(loss.data.reshape(-1)[0])

                    tape.backward(loss)
                    grads = {name: tape.grad(t).data
                             for name, t in model.named_params().items()}
                    sq = sum(float((g.astype(np.float64) ** 2).sum())
                             for g in grads.values())
                    grad_norm = math.sqrt(sq) if math.isfinite(sq) else float("nan")

                    val_loss, _ = _loss_tensors(model, vx, vy)
                    val_loss = float(val_loss.data.reshape(-1)[0])
                except FinitenessError:
                    train_loss = float("nan")
                    val_loss = float("nan")
                    grad_norm = float("nan")

            wall_ms = (time.perf_counter_ns() - start_ns) / 1e6
            rec = LossRecord(step, train_loss, val_loss, grad_norm,
                             step * cfg.batch_size * cfg.context_len, wall_ms)
            records.append(rec)
            writer.writerow(rec.row())

            if not (math.isfinite(train_loss) and math.isfinite(grad_norm)):
                fh.flush()
                raise FinitenessError(
                    f"non-finite loss or gradient at step {step} "
                    f"(train_loss={train_loss}, grad_norm={grad_norm}); "
                    f"diagnostic row recorded in {csv_path}")

            opt.step(model, grads)
            if cfg.stop_at_loss is not None and train_loss <= cfg.stop_at_loss:
                break

    save_checkpoint(os.path.join(cfg.run_dir, "model.ckpt"), model)
    return TrainResult(cfg.run_dir, records, model.param_count())


# --- ablation cross product ---------------------------------------------------

HYPER_AXIS = (True, False)
MEMORY_AXIS = ("on", "off", "causal")
BIAS_AXIS = ("inner", "outer", "none")
KERNEL_AXIS = ("sum-sq", "hadamard-exp", "full-oracle")


def variant_name(hyper, memory, bias, kernel):
    return f"hl-{'on' if hyper else 'off'}_mem-{memory}_bias-{bias}_k-{kernel}"


@dataclass
class AblationRow:
    name: str
    hyper_link: bool
    memory_lobe: str
    bias_mode: str
    kernel: str
    status: str          # "ok" or "skipped: <reason>"
    steps_run: int
    steps_to_threshold: int | None
    final_train_loss: float
    final_val_loss: float
    param_count: int


def ablation_suite(base: TrainConfig, out_dir: str, threshold: float = 2.0,
                   hyper_axis=HYPER_AXIS, memory_axis=MEMORY_AXIS,
                   bias_axis=BIAS_AXIS, kernel_axis=KERNEL_AXIS,
                   stop_at_threshold: bool = False):
    """Trains every valid combination of the four switches at one seed.

    Invalid combinations (a lobe without the combined residual) are recorded
    as skipped rows rather than silently dropped, so the summary always has
    the full cross product. Returns the list of AblationRow.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for hyper in hyper_axis:
        for memory in memory_axis:
            for bias in bias_axis:
                for kernel in kernel_axis:
                    name = variant_name(hyper, memory, bias, kernel)
                    if not hyper and memory != "off":
                        rows.append(AblationRow(
                            name, hyper, memory, bias, kernel,
                            "skipped: memory lobe requires the combined residual",
                            0, None, float("nan"), float("nan"), 0))
                        continue
                    cfg = replace(base, run_dir=os.path.join(out_dir, name),
                                  hyper_link=hyper, memory_lobe=memory,
                                  bias_mode=bias, kernel=kernel,
                                  stop_at_loss=threshold if stop_at_threshold
                                  else base.stop_at_loss)
                    result = train(cfg)
                    rows.append(AblationRow(
                        name, hyper, memory, bias, kernel, "ok",
                        len(result.records), result.steps_to(threshold),
                        result.final_train_loss, result.final_val_loss,
                        result.param_count))
    summary = os.path.join(out_dir, "summary.csv")
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("variant", "hyper_link", "memory_lobe", "bias_mode",
                         "kernel", "status", "steps_run", "steps_to_threshold",
                         "final_train_loss", "final_val_loss", "param_count"))
        for r in rows:
            writer.writerow((r.name, "on" if r.hyper_link else "off",
                             r.memory_lobe, r.bias_mode, r.kernel, r.status,
                             str(r.steps_run),
                             "" if r.steps_to_threshold is None else str(r.steps_to_threshold),
                             f"{r.final_train_loss:.12g}",
                             f"{r.final_val_loss:.12g}", str(r.param_count)))
    return rows


# --- sampling ------------------------------------------------------------------


def _pick(logits: np.ndarray, temperature: float, rng) -> int:
    if temperature == 0.0:
        return int(np.argmax(logits))
    z = logits / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def sample(ckpt_path: str, prompt: bytes, n: int, temperature: float = 0.0,
           seed: int = 0) -> bytes:
    """Streaming autoregressive generation with constant-size state.

    An empty prompt is primed with byte 0, which is not emitted.
    """
    if n < 0:
        raise UsageError(f"n must be >= 0, got {n}")
    if temperature < 0:
        raise UsageError(f"temperature must be >= 0, got {temperature}")
    model = load_checkpoint(ckpt_path)
    if n == 0:
        return prompt
    stream = stream_start(model)
    logits = None
    for b in prompt if prompt else b"\x00":
        logits = stream_step(model, stream, b)
    rng = np.random.default_rng(seed)
    out = bytearray()
    for _ in range(n):
        nxt = _pick(logits, temperature, rng)
        out.append(nxt)
        logits = stream_step(model, stream, nxt)
    return bytes(prompt) + bytes(out)


def sample_full_recompute(ckpt_path: str, prompt: bytes, n: int,
                          temperature: float = 0.0, seed: int = 0) -> bytes:
    """Reference twin of sample(): re-runs the whole forward per token."""
    if n < 0:
        raise UsageError(f"n must be >= 0, got {n}")
    model = load_checkpoint(ckpt_path)
    if n == 0:
        return prompt
    seq = list(prompt if prompt else b"\x00")
    emitted = bytearray()
    rng = np.random.default_rng(seed)
    for _ in range(n):
        ids = np.array([seq], dtype=np.int64)
        logits, _ = gpt_forward(ids, model, generation=True)
        nxt = _pick(logits.data[0, -1].astype(np.float64), temperature, rng)
        emitted.append(nxt)
        seq.append(nxt)
    return bytes(prompt) + bytes(emitted)
