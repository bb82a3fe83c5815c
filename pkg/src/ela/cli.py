"""Command-line entry point.

    ela kernels validate   feature-map decomposition checks
    ela attn check         linear vs quadratic agreement and causality sweep
    ela bench scaling      wall-time scaling of both implementations
    ela train              one training run
    ela ablate             the ablation cross product, with charts
    ela sample             autoregressive generation from a checkpoint

Exit codes: 0 pass, 1 check or runtime failure, 2 usage error. The env var
ELA_PRECISION (f32 or f64) overrides the default precision: f64 for checks,
f32 for training.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import fields

import numpy as np

from . import bench as benchmod
from .attention import AttentionConfig, linear_bidirectional, linear_causal, quadratic_oracle
from .errors import ConfigError, ElaError, UsageError
from .kernels import KERNEL_IDS, feature_map_pair, set_defect_negated_psi_input, validate_kernel
from .svgplot import line_chart
from .tensor import Tensor
from .training import (
    BIAS_AXIS,
    HYPER_AXIS,
    KERNEL_AXIS,
    MEMORY_AXIS,
    TrainConfig,
    ablation_suite,
    sample,
    train,
)

EXACTNESS_TOL = {"f64": 1e-10, "f32": 1e-5}


def _precision(default: str) -> str:
    value = os.environ.get("ELA_PRECISION", default)
    if value not in ("f32", "f64"):
        raise UsageError(f"ELA_PRECISION must be f32 or f64, got {value!r}")
    return value


# --- kernels validate ----------------------------------------------------------


def cmd_kernels_validate(args) -> int:
    if args.samples < 1:
        raise UsageError(f"--samples must be >= 1, got {args.samples}")
    ids = list(KERNEL_IDS) if args.all or not args.kernel else args.kernel
    rows = []
    failed = False
    for kid in ids:
        dim = 2 if kid == "asym-example" else args.dim
        pair = feature_map_pair(kid, dim)  # unknown id raises UsageError
        report = validate_kernel(pair, args.samples, args.seed)
        ok = report.max_decomposition_error <= 1e-10
        if pair.nonneg_guaranteed and report.min_kernel_value < 0:
            ok = False
        failed = failed or not ok
        rows.append((kid, report.samples, report.max_decomposition_error,
                     report.min_kernel_value, report.discriminability,
                     "pass" if ok else "FAIL"))
    print(f"{'kernel':<14} {'samples':>8} {'max_decomp_err':>15} "
          f"{'min_value':>12} {'discrimin.':>10} status")
    for kid, n, err, mn, disc, status in rows:
        print(f"{kid:<14} {n:>8} {err:>15.3e} {mn:>12.4g} {disc:>10.4f} {status}")
    return 1 if failed else 0


# --- attn check ------------------------------------------------------------------


ATTN_GRID_L = (1, 2, 3, 17, 64)
ATTN_GRID_D = (4, 16)
ATTN_GRID_H = (1, 4)


def _check_inputs(rng, kid, b, l, d, precision):
    # Exactness is compared at an absolute tolerance, which is only
    # meaningful while every normalizing row sum stays well away from zero;
    # on near-cancelling rows no two correct fp evaluations agree tightly.
    # Each kernel gets a draw that bounds its rows below: positive entries
    # keep sum-sq (a+b), mag-dir (same orthant) and the asymmetric example
    # away from cancellation, and an opposite-sign draw does it for sub-sq.
    if kid == "sub-sq":
        q = rng.uniform(0.5, 2.5, (b, l, d))
        k = -rng.uniform(0.5, 2.5, (b, l, d))
    elif kid == "hadamard-exp":
        q = rng.standard_normal((b, l, d))
        k = rng.standard_normal((b, l, d))
    else:
        q = rng.uniform(0.5, 2.5, (b, l, d))
        k = rng.uniform(0.5, 2.5, (b, l, d))
    v = rng.standard_normal((b, l, d))
    return (Tensor(q, precision=precision), Tensor(k, precision=precision),
            Tensor(v, precision=precision))


def _head_counts(kid, d, wanted):
    if kid == "asym-example":
        return (d // 2,)
    return tuple(h for h in wanted if d % h == 0)


def cmd_attn_check(args) -> int:
    precision = _precision("f64")
    tol = EXACTNESS_TOL[precision]
    ids = args.kernel or list(KERNEL_IDS)
    if args.defect_negated_psi_input:
        set_defect_negated_psi_input(True)
    rows = []
    failed = False
    try:
        for kid in ids:
            if kid not in KERNEL_IDS:
                raise UsageError(f"unknown kernel id {kid!r}")
            for causal in (False, True):
                linear_fn = linear_causal if causal else linear_bidirectional
                for l in ATTN_GRID_L:
                    for d in ATTN_GRID_D:
                        for h in _head_counts(kid, d, ATTN_GRID_H):
                            cfg = AttentionConfig(kid, n_heads=h, causal=causal)
                            worst = 0.0
                            for seed in range(args.seeds):
                                rng = np.random.default_rng(seed)
                                q, k, v = _check_inputs(rng, kid, 2, l, d, precision)
                                ref = quadratic_oracle(q, k, v, cfg).data
                                got = linear_fn(q, k, v, cfg).data
                                worst = max(worst, float(np.abs(got - ref).max()))
                            ok = worst <= tol
                            failed = failed or not ok
                            rows.append(("exactness", kid, causal, l, d, h,
                                         args.seeds, worst, tol,
                                         "pass" if ok else "FAIL"))
            # causality: earlier outputs may not move when a later key does
            cfg = AttentionConfig(kid, n_heads=1, causal=True)
            rng = np.random.default_rng(0)
            l, d, j = 24, 4 if kid != "asym-example" else 2, 12
            q, k, v = _check_inputs(rng, kid, 1, l, d, precision)
            base = linear_causal(q, k, v, cfg).data
            bent_k = k.data.copy()
            bent_k[0, j] += 1.0
            bent = linear_causal(q, Tensor(bent_k, precision=precision), v, cfg).data
            exact = bool(np.array_equal(base[:, :j], bent[:, :j]))
            failed = failed or not exact
            rows.append(("causality", kid, True, l, d, 1, 1,
                         0.0 if exact else float("nan"), 0.0,
                         "pass" if exact else "FAIL"))
    finally:
        if args.defect_negated_psi_input:
            set_defect_negated_psi_input(False)

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("check", "kernel", "causal", "L", "D", "H", "seeds",
                         "max_abs_err", "threshold", "status"))
        for row in rows:
            writer.writerow([str(x) for x in row])
    n_fail = sum(1 for r in rows if r[-1] == "FAIL")
    print(f"attn check: {len(rows)} rows, {n_fail} failures "
          f"({precision}, tol {tol:g}); detail in {args.out}")
    return 1 if failed else 0


# --- bench scaling ---------------------------------------------------------------


def cmd_bench_scaling(args) -> int:
    l_values = [int(s) for s in args.L.split(",") if s]
    if not l_values or any(l < 1 for l in l_values):
        raise UsageError("--L needs a comma-separated list of lengths >= 1")
    if args.kernel not in KERNEL_IDS:
        raise UsageError(f"unknown kernel id {args.kernel!r}")
    os.makedirs(args.out_dir, exist_ok=True)
    records = benchmod.bench_attention(
        args.kernel, l_values, args.D, args.H, reps=args.reps,
        causal=args.causal, seed=args.seed, batch=args.batch,
        decode_probe_steps=args.decode_probe)

    csv_path = os.path.join(args.out_dir, "bench.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("impl", "kernel", "L", "D", "H", "wall_ns",
                         "peak_state_bytes", "reps"))
        for r in records:
            writer.writerow((r.impl, r.kernel_id, r.L, r.D, r.H, r.wall_ns,
                             r.peak_state_bytes, r.reps))

    svg_path = os.path.join(args.out_dir, "scaling.svg")
    series = []
    for impl in ("linear", "quadratic"):
        pts = sorted((r.L, r.wall_ns) for r in records if r.impl == impl)
        series.append((impl, [p[0] for p in pts], [p[1] for p in pts]))
    line_chart(svg_path, f"attention wall time, kernel {args.kernel}",
               "sequence length L", "median wall time (ns)", series,
               log_x=True, log_y=True)

    fmt = lambda s: "" if s is None else f"{s:.3f}"
    lin = benchmod.fit_loglog_slope(records, "linear")
    quad = benchmod.fit_loglog_slope(records, "quadratic")
    print(f"linear slope={fmt(lin)} quadratic slope={fmt(quad)}")
    top = max(l_values)
    speedup = benchmod.speedup_at(records, top)
    if speedup is not None:
        print(f"quadratic/linear wall-time ratio at L={top}: {speedup:.2f}x")
    print(f"wrote {csv_path} and {svg_path}")
    return 0


# --- train -----------------------------------------------------------------------

_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_BOOLISH = {"on": True, "true": True, "1": True, "yes": True,
            "off": False, "false": False, "0": False, "no": False}


def _coerce(name: str, raw: str):
    kind = _TRAIN_FIELDS[name].type
    if name in ("hyper_link", "final_norm"):
        if raw.lower() not in _BOOLISH:
            raise ConfigError(f"{name} needs on/off, got {raw!r}")
        return _BOOLISH[raw.lower()]
    if name == "stop_at_loss":
        return None if raw == "" else float(raw)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        with open(args.config) as fh:
            for ln, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{args.config}:{ln}: expected key=value")
                key, val = (s.strip() for s in line.split("=", 1))
                if key not in _TRAIN_FIELDS:
                    raise ConfigError(f"{args.config}:{ln}: unknown key {key!r}")
                try:
                    values[key] = _coerce(key, val)
                except (ValueError, TypeError):
                    raise ConfigError(f"{args.config}:{ln}: bad value for {key}") from None
    for key in ("corpus_path", "run_dir", "context_len", "batch_size", "steps",
                "learning_rate", "seed", "stop_at_loss", "n_layers", "d_model",
                "n_heads", "n_experts", "top_k", "bias_mode", "kernel",
                "memory_lobe", "final_norm", "hyper_link"):
        flag = getattr(args, key, None)
        if flag is not None:
            if key in ("hyper_link", "final_norm"):
                flag = _BOOLISH[flag]
            values[key] = flag
    if "corpus_path" not in values or "run_dir" not in values:
        raise UsageError("--corpus and --run-dir are required (flag or config file)")
    values.setdefault("precision", _precision("f32"))
    return TrainConfig(**values).validate()


def cmd_train(args) -> int:
    cfg = _train_config(args)
    result = train(cfg)
    if result.records:
        last = result.records[-1]
        print(f"trained {last.step} steps: train_loss {last.train_loss:.4f}, "
              f"val_loss {last.val_loss:.4f}, {result.param_count} params")
    else:
        print(f"0 steps: wrote init checkpoint, {result.param_count} params")
    print(f"run directory: {result.run_dir}")
    return 0


# --- ablate ----------------------------------------------------------------------

FIGURE_GROUPS = {
    # each group varies one switch with the others pinned
    "bias": dict(hyper_axis=(True,), memory_axis=("on",),
                 bias_axis=BIAS_AXIS, kernel_axis=("hadamard-exp",)),
    "memory": dict(hyper_axis=(True,), memory_axis=MEMORY_AXIS,
                   bias_axis=("inner",), kernel_axis=("hadamard-exp",)),
    "hyper_link": dict(hyper_axis=HYPER_AXIS, memory_axis=("off",),
                       bias_axis=("inner",), kernel_axis=("hadamard-exp",)),
    "kernel": dict(hyper_axis=(True,), memory_axis=("on",),
                   bias_axis=("inner",), kernel_axis=KERNEL_AXIS),
}


def _loss_series(out_dir, rows):
    series = []
    for row in rows:
        if row.status != "ok":
            continue
        path = os.path.join(out_dir, row.name, "loss.csv")
        steps, losses = [], []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                steps.append(int(rec["step"]))
                losses.append(float(rec["train_loss"]))
        if steps:
            series.append((row.name, steps, losses))
    return series


def _axis_list(raw, allowed, name):
    if raw is None:
        return None
    values = tuple(s for s in raw.split(",") if s)
    for v in values:
        if v not in allowed:
            raise UsageError(f"--{name}: unknown value {v!r} (allowed: {allowed})")
    if not values:
        raise UsageError(f"--{name} needs at least one value")
    return values


def cmd_ablate(args) -> int:
    base = TrainConfig(
        corpus_path=args.corpus, run_dir="unused", steps=args.steps,
        batch_size=args.batch_size, context_len=args.context_len,
        learning_rate=args.learning_rate, seed=args.seed,
        precision=_precision("f32"))
    os.makedirs(args.out_dir, exist_ok=True)

    if args.preset == "figures":
        for group, axes in FIGURE_GROUPS.items():
            group_dir = os.path.join(args.out_dir, group)
            rows = ablation_suite(base, group_dir, threshold=args.threshold,
                                  stop_at_threshold=args.stop_at_threshold,
                                  **axes)
            series = _loss_series(group_dir, rows)
            line_chart(os.path.join(group_dir, "loss_comparison.svg"),
                       f"training loss by {group}", "step",
                       "train loss (nats/token)", series)
            print(f"group {group}: {sum(r.status == 'ok' for r in rows)} variants, "
                  f"artifacts in {group_dir}")
        return 0

    hyper = args.hyper and tuple(_BOOLISH[v] for v in
                                 _axis_list(args.hyper, ("on", "off"), "hyper"))
    axes = dict(
        hyper_axis=hyper or HYPER_AXIS,
        memory_axis=_axis_list(args.memory, MEMORY_AXIS, "memory") or MEMORY_AXIS,
        bias_axis=_axis_list(args.bias, BIAS_AXIS, "bias") or BIAS_AXIS,
        kernel_axis=_axis_list(args.kernels, KERNEL_AXIS, "kernels") or KERNEL_AXIS,
    )
    rows = ablation_suite(base, args.out_dir, threshold=args.threshold,
                          stop_at_threshold=args.stop_at_threshold, **axes)
    series = _loss_series(args.out_dir, rows)
    line_chart(os.path.join(args.out_dir, "loss_comparison.svg"),
               "training loss by variant", "step", "train loss (nats/token)",
               series)
    ok = sum(r.status == "ok" for r in rows)
    print(f"{ok} variants trained, {len(rows) - ok} skipped; "
          f"summary in {os.path.join(args.out_dir, 'summary.csv')}")
    return 0


# --- sample ----------------------------------------------------------------------


def cmd_sample(args) -> int:
    if args.prompt_hex is not None:
        try:
            prompt = bytes.fromhex(args.prompt_hex)
        except ValueError:
            raise UsageError(f"--prompt-hex is not valid hex: {args.prompt_hex!r}") from None
    else:
        prompt = args.prompt.encode("utf-8")
    out = sample(args.ckpt, prompt, args.n, temperature=args.temp, seed=args.seed)
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(out)
        print(f"wrote {len(out)} bytes to {args.out}")
    else:
        sys.stdout.buffer.write(out)
        sys.stdout.buffer.flush()
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ela", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    kern = sub.add_parser("kernels", help="kernel feature-map checks")
    ksub = kern.add_subparsers(dest="subcommand", required=True)
    kv = ksub.add_parser("validate", help="decomposition and sign checks")
    kv.add_argument("--all", action="store_true", help="validate every kernel")
    kv.add_argument("--kernel", action="append", help="kernel id (repeatable)")
    kv.add_argument("--samples", type=int, default=1000)
    kv.add_argument("--seed", type=int, default=7)
    kv.add_argument("--dim", type=int, default=8, help="input dimension")
    kv.set_defaults(fn=cmd_kernels_validate)

    attn = sub.add_parser("attn", help="attention equivalence checks")
    asub = attn.add_subparsers(dest="subcommand", required=True)
    ac = asub.add_parser("check", help="linear vs quadratic sweep")
    ac.add_argument("--kernel", action="append", help="kernel id (repeatable)")
    ac.add_argument("--seeds", type=int, default=3)
    ac.add_argument("--out", default="attn_check.csv")
    ac.add_argument("--defect-negated-psi-input", action="store_true",
                    help=argparse.SUPPRESS)  # forced-bug negative control
    ac.set_defaults(fn=cmd_attn_check)

    bench = sub.add_parser("bench", help="scaling benchmarks")
    bsub = bench.add_subparsers(dest="subcommand", required=True)
    bs = bsub.add_parser("scaling", help="wall time vs sequence length")
    bs.add_argument("--L", default="256,512,1024,2048,4096,8192")
    bs.add_argument("--D", type=int, default=64)
    bs.add_argument("--H", type=int, default=1)
    bs.add_argument("--kernel", default="sum-sq")
    bs.add_argument("--reps", type=int, default=5)
    bs.add_argument("--seed", type=int, default=0)
    bs.add_argument("--causal", action="store_true")
    bs.add_argument("--batch", type=int, default=1,
                    help="batch-parallel width; slopes should use 1")
    bs.add_argument("--decode-probe", type=int, default=None,
                    help="cap decode steps used for the state-size probe")
    bs.add_argument("--out-dir", default="bench_out")
    bs.set_defaults(fn=cmd_bench_scaling)

    tr = sub.add_parser("train", help="one training run")
    tr.add_argument("--config", help="flat key=value config file")
    tr.add_argument("--corpus", dest="corpus_path")
    tr.add_argument("--run-dir", dest="run_dir")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--context", dest="context_len", type=int)
    tr.add_argument("--lr", dest="learning_rate", type=float)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--stop-at-loss", dest="stop_at_loss", type=float)
    tr.add_argument("--layers", dest="n_layers", type=int)
    tr.add_argument("--dmodel", dest="d_model", type=int)
    tr.add_argument("--heads", dest="n_heads", type=int)
    tr.add_argument("--experts", dest="n_experts", type=int)
    tr.add_argument("--topk", dest="top_k", type=int)
    tr.add_argument("--bias", dest="bias_mode", choices=BIAS_AXIS)
    tr.add_argument("--kernel")
    tr.add_argument("--memory", dest="memory_lobe", choices=MEMORY_AXIS)
    tr.add_argument("--hyper", dest="hyper_link", choices=("on", "off"))
    tr.add_argument("--final-norm", dest="final_norm", choices=("on", "off"))
    tr.set_defaults(fn=cmd_train)

    ab = sub.add_parser("ablate", help="ablation cross product")
    ab.add_argument("--corpus", required=True)
    ab.add_argument("--out-dir", required=True)
    ab.add_argument("--preset", choices=("full", "figures"), default="full")
    ab.add_argument("--steps", type=int, default=500)
    ab.add_argument("--batch-size", type=int, default=8)
    ab.add_argument("--context-len", type=int, default=128)
    ab.add_argument("--learning-rate", type=float, default=3e-4)
    ab.add_argument("--seed", type=int, default=0)
    ab.add_argument("--threshold", type=float, default=2.0)
    ab.add_argument("--stop-at-threshold", action="store_true")
    ab.add_argument("--hyper", help="comma list from on,off")
    ab.add_argument("--memory", help="comma list from on,off,causal")
    ab.add_argument("--bias", help="comma list from inner,outer,none")
    ab.add_argument("--kernels", help="comma list from sum-sq,hadamard-exp,full-oracle")
    ab.set_defaults(fn=cmd_ablate)

    sm = sub.add_parser("sample", help="generate bytes from a checkpoint")
    sm.add_argument("--ckpt", required=True)
    sm.add_argument("--prompt", default="")
    sm.add_argument("--prompt-hex", default=None)
    sm.add_argument("--n", type=int, default=64)
    sm.add_argument("--temp", type=float, default=0.0)
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--out", default=None)
    sm.set_defaults(fn=cmd_sample)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ElaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
