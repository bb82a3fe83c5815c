"""Byte-level decoder stack: RMS norm, mixture-of-experts with per-expert
label vectors, a memory lobe attending over the transformation flow, and
the single-residual layer combination.

Layer dataflow with the combined residual (hyper_link on):

    x_norm  = rms_norm(x)
    attn    = causal_attention(x_norm, x_norm, x_norm)
    ffn_out = moe(attn)
    lob_out = lobe(ffn_out)          # bidirectional over the flow
    y       = x + ffn_out + lob_out

With hyper_link off the layer falls back to the standard pre-norm wiring
(x + attn residual, then + ffn residual) and the lobe is unavailable: its
input is the flow ffn_out = y - x - lob_out, a quantity that only equals
the layer's transformation when the attention residual is absent.

Attention here is parameter-free: queries, keys and values are all the
normed stream itself, so the kernel feature maps are the only mixing.
The lobe is the exception, with three learned D-by-D maps.

All parameters live in per-module dicts keyed by short names; the model
walks them as dotted paths ("layers.0.moe.router"). Tensors are immutable,
so an optimizer step rebinds fresh Tensors via set_param.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, DecodeState, attention, attention_quadratic, decode_step, start_decode
from .errors import ConfigError, FormatError, InputError, ShapeError, UsageError
from .kernels import KERNEL_IDS
from .tensor import (
    PRECISIONS,
    Tensor,
    add,
    div,
    embedding,
    linear,
    mul,
    rsqrt,
    sigmoid,
    softmax,
    stop_gradient,
    take_along,
    tmean,
    tsum,
)

VOCAB = 256
RMS_EPS = 1e-6

BIAS_MODES = ("inner", "outer", "none")
MEMORY_MODES = ("on", "off", "causal")
MODEL_KERNELS = KERNEL_IDS + ("full-oracle",)

# the reference route runs the quadratic path over this kernel
ORACLE_BASE_KERNEL = "hadamard-exp"


@dataclass(frozen=True)
class ModelConfig:
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
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.n_layers < 1 or self.d_model < 1:
            raise ConfigError(f"n_layers/d_model must be >= 1, got {self.n_layers}/{self.d_model}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.top_k < 1 or self.top_k > self.n_experts:
            raise ConfigError(f"top_k {self.top_k} outside [1, {self.n_experts}]")
        if self.bias_mode not in BIAS_MODES:
            raise ConfigError(f"bias_mode must be one of {BIAS_MODES}, got {self.bias_mode!r}")
        if self.memory_lobe not in MEMORY_MODES:
            raise ConfigError(f"memory_lobe must be one of {MEMORY_MODES}, got {self.memory_lobe!r}")
        if self.kernel not in MODEL_KERNELS:
            raise ConfigError(f"kernel must be one of {MODEL_KERNELS}, got {self.kernel!r}")
        if not self.hyper_link and self.memory_lobe != "off":
            raise ConfigError("memory_lobe requires hyper_link: the lobe reads the "
                              "transformation flow, which only exists without an "
                              "attention residual")
        kid = self.attention_kernel_id()
        if kid == "asym-example" and self.d_model // self.n_heads != 2:
            raise ConfigError("asym-example needs head dim 2; set n_heads = d_model / 2")
        return self

    def attention_kernel_id(self) -> str:
        return ORACLE_BASE_KERNEL if self.kernel == "full-oracle" else self.kernel

    def oracle_route(self) -> bool:
        return self.kernel == "full-oracle"

    @property
    def ffn_width(self) -> int:
        return 2 * self.d_model


# full-size reference dims, kept for parameter-count verification only
FULLSIZE = ModelConfig(n_layers=4, d_model=256, n_heads=4, n_experts=4)


_BOOL_WORDS = {"on": True, "true": True, "1": True, "yes": True,
               "off": False, "false": False, "0": False, "no": False}

_INT_KEYS = ("n_layers", "d_model", "n_heads", "n_experts", "top_k", "seed")
_BOOL_KEYS = ("hyper_link", "final_norm")
_STR_KEYS = ("bias_mode", "kernel", "memory_lobe")


def parse_model_config(text: str) -> ModelConfig:
    """Flat key=value lines; '#' starts a comment; unknown keys rejected."""
    values = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in _INT_KEYS:
            try:
                values[key] = int(val)
            except ValueError:
                raise ConfigError(f"line {ln}: {key} needs an integer, got {val!r}") from None
        elif key in _BOOL_KEYS:
            if val.lower() not in _BOOL_WORDS:
                raise ConfigError(f"line {ln}: {key} needs on/off, got {val!r}")
            values[key] = _BOOL_WORDS[val.lower()]
        elif key in _STR_KEYS:
            values[key] = val
        else:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
    return ModelConfig(**values).validate()


def format_model_config(cfg: ModelConfig) -> str:
    enc = lambda v: ("on" if v else "off") if isinstance(v, bool) else str(v)
    ordered = ("n_layers", "d_model", "n_heads", "n_experts", "top_k", "bias_mode",
               "kernel", "hyper_link", "memory_lobe", "final_norm", "seed")
    return "".join(f"{k}={enc(getattr(cfg, k))}\n" for k in ordered)


# --- parameter containers ----------------------------------------------------


def _init(rng, shape, std, precision):
    return Tensor((rng.standard_normal(shape) * std), precision=precision)


def _zeros(shape, precision):
    return Tensor(np.zeros(shape), precision=precision)


def _ones(shape, precision):
    return Tensor(np.ones(shape), precision=precision)


class MoELayer:
    """Dense-compute top-k mixture with per-expert label vectors."""

    def __init__(self, cfg: ModelConfig, rng, precision):
        d, f, e = cfg.d_model, cfg.ffn_width, cfg.n_experts
        self.n_experts = e
        self.top_k = cfg.top_k
        self.bias_mode = cfg.bias_mode
        self.p = {"router": _init(rng, (d, e), 0.02, precision)}
        for i in range(e):
            self.p[f"expert{i}.wg"] = _init(rng, (d, f), 0.02, precision)
            self.p[f"expert{i}.wv"] = _init(rng, (d, f), 0.02, precision)
            self.p[f"expert{i}.wo"] = _init(rng, (f, d), 0.02, precision)
        for i in range(e):
            # zero labels: bias variants start out identical to bias-free
            self.p[f"label{i}"] = _zeros((d,), precision)

    def named_params(self):
        return dict(self.p)


class MemoryLobe:
    """Three D-by-D maps feeding bidirectional attention over the flow."""

    def __init__(self, cfg: ModelConfig, rng, precision):
        d = cfg.d_model
        self.p = {
            "q": _init(rng, (d, d), 0.02, precision),
            "k": _init(rng, (d, d), 0.02, precision),
            "v": _init(rng, (d, d), 0.02, precision),
        }

    def named_params(self):
        return dict(self.p)


class DecoderLayer:
    def __init__(self, cfg: ModelConfig, rng, precision):
        d = cfg.d_model
        self.hyper_link = cfg.hyper_link
        self.memory_mode = cfg.memory_lobe
        self.p = {"attn_norm": _ones((d,), precision)}
        if not cfg.hyper_link:
            self.p["ffn_norm"] = _ones((d,), precision)
        self.moe = MoELayer(cfg, rng, precision)
        self.lobe = MemoryLobe(cfg, rng, precision) if cfg.memory_lobe != "off" else None

    def named_params(self):
        out = dict(self.p)
        for k, t in self.moe.named_params().items():
            out[f"moe.{k}"] = t
        if self.lobe is not None:
            for k, t in self.lobe.named_params().items():
                out[f"lobe.{k}"] = t
        return out


class ToyGPT:
    """Embedding, stacked decoder layers, optional final norm, projection."""

    def __init__(self, cfg: ModelConfig, precision: str = "f32"):
        if precision not in PRECISIONS:
            raise UsageError(f"unknown precision {precision!r}")
        cfg.validate()
        self.cfg = cfg
        self.precision = precision
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.p = {"embed": _init(rng, (VOCAB, d), 0.02, precision)}
        self.layers = [DecoderLayer(cfg, rng, precision) for _ in range(cfg.n_layers)]
        if cfg.final_norm:
            self.p["final_norm"] = _ones((d,), precision)
        self.p["out"] = _init(rng, (d, VOCAB), 0.02, precision)
        self.attn_cfg = AttentionConfig(cfg.attention_kernel_id(),
                                        n_heads=cfg.n_heads, causal=True)
        self.lobe_cfg = AttentionConfig(cfg.attention_kernel_id(),
                                        n_heads=cfg.n_heads,
                                        causal=cfg.memory_lobe == "causal")
        self._attn = attention_quadratic if cfg.oracle_route() else attention

    def named_params(self):
        out = dict(self.p)
        for i, layer in enumerate(self.layers):
            for k, t in layer.named_params().items():
                out[f"layers.{i}.{k}"] = t
        return out

    def set_param(self, name: str, value: Tensor):
        parts = name.split(".")
        if parts[0] == "layers":
            layer = self.layers[int(parts[1])]
            rest = parts[2:]
            if rest[0] == "moe":
                layer.moe.p[".".join(rest[1:])] = value
            elif rest[0] == "lobe":
                layer.lobe.p[".".join(rest[1:])] = value
            else:
                layer.p[".".join(rest)] = value
        else:
            self.p[name] = value

    def param_count(self) -> int:
        return sum(t.size for t in self.named_params().values())


# --- forward pieces ----------------------------------------------------------


def rms_norm(x: Tensor, gain: Tensor) -> Tensor:
    """x / sqrt(mean(x^2, last axis) + 1e-6), scaled by gain."""
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    return mul(mul(x, rsqrt(add(ms, RMS_EPS))), gain)


def _expert_ffn(x: Tensor, wg: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    # gated two-layer net: value path modulated by a sigmoid gate
    return linear(mul(linear(x, wv), sigmoid(linear(x, wg))), wo)


def moe_forward(x: Tensor, layer: MoELayer):
    """Returns (mixture output, load-balance aux loss)."""
    e, k = layer.n_experts, layer.top_k
    if k > e:
        raise ConfigError(f"top_k {k} exceeds expert count {e}")
    probs = softmax(linear(x, layer.p["router"]), axis=-1)  # [B, L, E]

    # selection is data-dependent but treated as a constant of the forward
    order = np.argsort(-probs.data, axis=-1, kind="stable")
    mask = np.zeros_like(probs.data)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)

    masked = mul(probs, mask)
    scores = div(masked, tsum(masked, axis=-1, keepdims=True))  # renormalized

    parts = []
    bias_parts = []
    for i in range(e):
        ffn_i = _expert_ffn(x, layer.p[f"expert{i}.wg"], layer.p[f"expert{i}.wv"],
                            layer.p[f"expert{i}.wo"])
        idx = np.full(x.shape[:-1] + (1,), i, dtype=np.int64)
        s_i = take_along(scores, idx)  # [B, L, 1]
        label = layer.p[f"label{i}"]
        if layer.bias_mode == "inner":
            parts.append(mul(add(ffn_i, label), s_i))
        else:
            parts.append(mul(ffn_i, s_i))
            if layer.bias_mode == "outer":
                # bias enters once per selected expert, weighted by the
                # selection score but not feeding gradient back into it
                bias_parts.append(mul(label, stop_gradient(s_i)))
    y = parts[0]
    for part in parts[1:]:
        y = add(y, part)
    for part in bias_parts:
        y = add(y, part)

    # load balance: expert fraction routed (constant) x mean router prob
    frac = mask.mean(axis=(0, 1))
    p_mean = tmean(tmean(probs, axis=0), axis=0)
    aux = mul(tsum(mul(p_mean, frac)), float(e))
    return y, aux


def memory_lobe(flow: Tensor, lobe: MemoryLobe, cfg: AttentionConfig,
                attn_fn=attention) -> Tensor:
    q = linear(flow, lobe.p["q"])
    k = linear(flow, lobe.p["k"])
    v = linear(flow, lobe.p["v"])
    return attn_fn(q, k, v, cfg)


def decoder_layer_forward(x: Tensor, layer: DecoderLayer, attn_cfg: AttentionConfig,
                          lobe_cfg: AttentionConfig | None = None,
                          attn_fn=attention, return_parts: bool = False):
    """One decoder layer; returns (y, aux_loss) or (y, aux_loss, parts)."""
    if layer.hyper_link:
        x_norm = rms_norm(x, layer.p["attn_norm"])
        attn_out = attn_fn(x_norm, x_norm, x_norm, attn_cfg)
        ffn_out, aux = moe_forward(attn_out, layer.moe)
        if layer.lobe is not None:
            lob_out = memory_lobe(ffn_out, layer.lobe, lobe_cfg, attn_fn)
        else:
            lob_out = None
        y = add(x, ffn_out) if lob_out is None else add(add(x, ffn_out), lob_out)
        if return_parts:
            return y, aux, (x, ffn_out, lob_out)
        return y, aux
    # baseline pre-norm wiring with the attention residual restored
    x_norm = rms_norm(x, layer.p["attn_norm"])
    h = add(x, attn_fn(x_norm, x_norm, x_norm, attn_cfg))
    ffn_out, aux = moe_forward(rms_norm(h, layer.p["ffn_norm"]), layer.moe)
    y = add(h, ffn_out)
    if return_parts:
        return y, aux, (h, ffn_out, None)
    return y, aux


def gpt_forward(tokens: np.ndarray, model: ToyGPT, generation: bool = False):
    """Full teacher-forced forward: returns (logits [B, L, 256], total_aux).

    With generation=True a bidirectional lobe is evaluated causally over the
    prefix instead. At the newest position the two agree exactly (the prefix
    is the whole visible sequence), so this is the autoregressive reading of
    the model; it is what streaming decode computes, and revising earlier
    positions as the prefix grows is not expressible with constant state.
    """
    ids = np.asarray(tokens)
    if ids.ndim != 2:
        raise ShapeError(f"tokens must be [B, L], got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"tokens must be integers, got dtype {ids.dtype}")
    if ids.min() < 0 or ids.max() >= VOCAB:
        raise InputError(f"token ids out of range [0, {VOCAB}): "
                         f"min {ids.min()}, max {ids.max()}")
    lobe_cfg = model.lobe_cfg
    if generation and not lobe_cfg.causal:
        lobe_cfg = AttentionConfig(lobe_cfg.kernel_id, n_heads=lobe_cfg.n_heads,
                                   causal=True)
    x = embedding(model.p["embed"], ids)
    total_aux = None
    for layer in model.layers:
        x, aux = decoder_layer_forward(x, layer, model.attn_cfg, lobe_cfg,
                                       model._attn)
        total_aux = aux if total_aux is None else add(total_aux, aux)
    if model.cfg.final_norm:
        x = rms_norm(x, model.p["final_norm"])
    logits = linear(x, model.p["out"])
    return logits, total_aux


# --- streaming inference (numpy, constant memory) ----------------------------


def _np_softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _np_rms(x, gain):
    return x / np.sqrt((x * x).mean() + RMS_EPS) * gain


def _np_moe(x, layer: MoELayer):
    p = {k: t.data.astype(np.float64) for k, t in layer.p.items()}
    probs = _np_softmax(x @ p["router"])
    order = np.argsort(-probs, kind="stable")[: layer.top_k]
    scores = probs[order] / probs[order].sum()
    y = np.zeros_like(x)
    for s, i in zip(scores, order):
        h = (x @ p[f"expert{i}.wv"]) * _np_sigmoid(x @ p[f"expert{i}.wg"])
        out = h @ p[f"expert{i}.wo"]
        if layer.bias_mode != "none":
            out = out + p[f"label{i}"]
        y += s * out
    return y


@dataclass
class LayerStream:
    attn: DecodeState
    lobe: DecodeState | None


@dataclass
class ModelStream:
    """Per-layer constant-size decode accumulators."""

    layers: list
    position: int = 0

    @property
    def nbytes(self) -> int:
        total = 0
        for ls in self.layers:
            total += ls.attn.nbytes
            if ls.lobe is not None:
                total += ls.lobe.nbytes
        return total


def stream_start(model: ToyGPT) -> ModelStream:
    d = model.cfg.d_model
    layers = []
    for layer in model.layers:
        attn_state = start_decode(model.attn_cfg, d, d)
        lobe_state = start_decode(model.lobe_cfg, d, d) if layer.lobe is not None else None
        layers.append(LayerStream(attn_state, lobe_state))
    return ModelStream(layers)


def stream_step(model: ToyGPT, stream: ModelStream, token: int) -> np.ndarray:
    """Feed one token; returns next-token logits [256]. O(1) in position.

    The lobe's bidirectional attention restricted to the tokens seen so far
    is exactly causal attention evaluated at the newest position, so the
    same running sums serve both attention instances.
    """
    if not 0 <= token < VOCAB:
        raise InputError(f"token id {token} out of range [0, {VOCAB})")
    x = model.p["embed"].data[token].astype(np.float64)
    for layer, ls in zip(model.layers, stream.layers):
        pp = {k: t.data.astype(np.float64) for k, t in layer.p.items()}
        if layer.hyper_link:
            xn = _np_rms(x, pp["attn_norm"])
            attn_out, ls.attn = decode_step(ls.attn, xn, xn, xn, model.attn_cfg)
            ffn_out = _np_moe(attn_out, layer.moe)
            if layer.lobe is not None:
                lp = {k: t.data.astype(np.float64) for k, t in layer.lobe.p.items()}
                ql, kl, vl = ffn_out @ lp["q"], ffn_out @ lp["k"], ffn_out @ lp["v"]
                lob_out, ls.lobe = decode_step(ls.lobe, ql, kl, vl, model.lobe_cfg)
                x = x + ffn_out + lob_out
            else:
                x = x + ffn_out
        else:
            xn = _np_rms(x, pp["attn_norm"])
            attn_out, ls.attn = decode_step(ls.attn, xn, xn, xn, model.attn_cfg)
            h = x + attn_out
            x = h + _np_moe(_np_rms(h, pp["ffn_norm"]), layer.moe)
    if model.cfg.final_norm:
        x = _np_rms(x, model.p["final_norm"].data.astype(np.float64))
    stream.position += 1
    return x @ model.p["out"].data.astype(np.float64)


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"ELA1"
CKPT_VERSION = 1


def save_checkpoint(path: str, model: ToyGPT) -> None:
    params = model.named_params()
    header = {
        "format_version": CKPT_VERSION,
        "precision": model.precision,
        "config": {k: getattr(model.cfg, k) for k in (
            "n_layers", "d_model", "n_heads", "n_experts", "top_k", "bias_mode",
            "kernel", "hyper_link", "memory_lobe", "final_norm", "seed")},
        "params": [{"name": k, "shape": list(t.shape), "dtype": t.precision}
                   for k, t in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data).tobytes())


def load_checkpoint(path: str) -> ToyGPT:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint: {exc}") from None
    if len(raw) < 8 or raw[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    if header.get("format_version") != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')}")
    cfg = ModelConfig(**header["config"])
    model = ToyGPT(cfg, precision=header["precision"])
    offset = 8 + hlen
    names = model.named_params()
    if [p["name"] for p in header["params"]] != list(names):
        raise FormatError("checkpoint parameter list does not match its config")
    for spec_entry in header["params"]:
        shape = tuple(spec_entry["shape"])
        dtype = PRECISIONS[spec_entry["dtype"]]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype().itemsize
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"truncated checkpoint data at {spec_entry['name']}")
        arr = np.frombuffer(chunk, dtype=dtype).reshape(shape)
        model.set_param(spec_entry["name"], Tensor(arr.copy(), check_finite=False))
        offset += nbytes
    if offset != len(raw):
        raise FormatError("trailing bytes after checkpoint data")
    return model
