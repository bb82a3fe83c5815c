"""Row-normalized kernel attention, twice: a quadratic reference that
materializes every pairwise kernel value, and the linear reformulation
that accumulates feature-map sums instead.

The two implementations share nothing beyond the feature-map bundle and
the denominator guard, so agreement between them is evidence, not
tautology. The guard replaces a denominator d with d + eps*sign(d) only
when |d| < eps (sign(0) taken as +1); everywhere else division is by the
raw value, which keeps the linear path exact and makes the quadratic and
linear paths comparable at tight tolerances even near zero denominators.

Internals run in float64 regardless of input precision and cast back on
exit; accumulation order is blocked along the sequence (BLOCK positions
at a time) for cache locality in the causal pass.

The backward pass is analytic and linear-time: with u_i = g_i / d_i and
w_i = -(g_i . y_i) / d_i, the adjoints of the feature maps are

    dphi_i = S_i u_i + w_i C_i
    dpsi_j = P_j + Q_j v_j,   dv_j = Q_j^T psi_j

where P_j, Q_j are suffix sums of w_i phi_i and phi_i u_i^T over queries
i >= j (global sums in the bidirectional case). Chaining through the
feature-map Jacobians gives dq, dk. Stabilization shifts are treated as
constants in backward; the normalized output is invariant to any shift
applied uniformly across a position's entries (bidirectional routes use
one global scalar per side, causal routes a per-position query shift),
so the derivative along the shift direction is zero and dropping it is
exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRowError, ShapeError, StalenessError, UsageError
from .kernels import FeatureMapPair, feature_map_pair
from .tensor import Tensor, record_op

EPSILON = {"f32": 1e-6, "f64": 1e-12}

# positions accumulated per block in the causal pass and the oracle
BLOCK = 64


@dataclass(frozen=True)
class AttentionConfig:
    """Shape-independent attention settings.

    epsilon=None picks the per-precision default at call time; stabilize=None
    enables the global-shift overflow guard exactly when the kernel is the
    exponential one (the only built-in map that can overflow).
    """

    kernel_id: str
    n_heads: int = 1
    causal: bool = False
    stabilize: bool | None = None
    epsilon: float | None = None

    def epsilon_for(self, precision: str) -> float:
        eps = EPSILON[precision] if self.epsilon is None else self.epsilon
        if eps <= 0:
            raise UsageError(f"epsilon must be positive, got {eps}")
        return eps

    def stabilized(self) -> bool:
        if self.stabilize is None:
            return self.kernel_id == "hadamard-exp"
        return bool(self.stabilize)


@dataclass
class AttentionContext:
    """Everything backward needs: shifted f64 inputs split into heads.

    Prefix sums are recomputed rather than cached, trading FLOPs for a
    context whose size matches the inputs.
    """

    cfg: AttentionConfig
    pair: FeatureMapPair
    eps: float
    qh: np.ndarray  # [B, H, L, d]
    kh: np.ndarray  # [B, H, L, d]
    vh: np.ndarray  # [B, H, L, d_v]
    out_dtype: np.dtype
    shift_q: float
    shift_k: float


def _guard(den: np.ndarray, eps: float) -> np.ndarray:
    # d + eps*sign(d) with sign(0) = +1, applied only where |d| < eps
    bumped = den + np.where(den >= 0.0, eps, -eps)
    return np.where(np.abs(den) < eps, bumped, den)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * d)


def _check_inputs(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig):
    for name, t in (("q", q), ("k", k), ("v", v)):
        if not isinstance(t, Tensor) or t.ndim != 3:
            raise ShapeError(f"{name} must be a rank-3 Tensor")
    if q.shape != k.shape:
        raise ShapeError(f"q {q.shape} and k {k.shape} must match")
    if v.shape[:2] != q.shape[:2]:
        raise ShapeError(f"v {v.shape} must share batch and length with q {q.shape}")
    if q.precision != k.precision or q.precision != v.precision:
        raise ShapeError("q, k, v must share one precision")
    h = cfg.n_heads
    if h < 1:
        raise ShapeError(f"n_heads must be >= 1, got {h}")
    if q.shape[2] % h != 0:
        raise ShapeError(f"model dim {q.shape[2]} not divisible by {h} heads")
    if v.shape[2] % h != 0:
        raise ShapeError(f"value dim {v.shape[2]} not divisible by {h} heads")


def _prepare(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig) -> AttentionContext:
    _check_inputs(q, k, v, cfg)
    q64 = q.data.astype(np.float64)
    k64 = k.data.astype(np.float64)
    v64 = v.data.astype(np.float64)
    shift_q = shift_k = 0.0
    if cfg.stabilized():
        if cfg.causal:
            # A whole-array max is off limits on the causal route: it lets a
            # future token change how earlier positions round, breaking the
            # bit-level prefix guarantee. Queries take a per-position shift,
            # which cancels inside each position's ratio; keys keep the
            # caller's scale, matching the streaming default. Callers with
            # extreme key magnitudes should pre-shift via stabilize_shift and
            # decode against the same scalar.
            q64 = q64 - q64.max(axis=-1, keepdims=True)
        else:
            shift_q = float(q64.max())
            shift_k = float(k64.max())
            q64 = q64 - shift_q
            k64 = k64 - shift_k
    pair = feature_map_pair(cfg.kernel_id, q.shape[2] // cfg.n_heads)
    return AttentionContext(
        cfg=cfg,
        pair=pair,
        eps=cfg.epsilon_for(q.precision),
        qh=_split_heads(q64, cfg.n_heads),
        kh=_split_heads(k64, cfg.n_heads),
        vh=_split_heads(v64, cfg.n_heads),
        out_dtype=q.data.dtype,
        shift_q=shift_q,
        shift_k=shift_k,
    )


# --- quadratic reference -----------------------------------------------------


def quadratic_oracle(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig,
                     return_weights: bool = False,
                     raise_on_degenerate: bool = True):
    """Direct O(L^2) evaluation: full score matrix, row normalization.

    Raises DegenerateRowError when any in-scope row sum has magnitude
    below epsilon: a reference value computed through a guarded denominator
    would silently stop being a reference. Callers using this path as a
    compute route rather than a referee (raise_on_degenerate=False) get the
    same epsilon guard the linear forms apply. With return_weights=True
    also returns the normalized weight matrix [B, H, L, L] (zeros at
    causally masked entries).
    """
    ctx = _prepare(q, k, v, cfg)
    qh, kh, vh = ctx.qh, ctx.kh, ctx.vh
    nb, nh, ln, _ = qh.shape
    dv = vh.shape[-1]
    y = np.empty((nb, nh, ln, dv))
    weights = np.empty((nb, nh, ln, ln)) if return_weights else None
    cols = np.arange(ln)[None, :]
    for b in range(nb):
        for h in range(nh):
            for i0 in range(0, ln, BLOCK):
                i1 = min(i0 + BLOCK, ln)
                scores = ctx.pair.direct(qh[b, h, i0:i1, None, :],
                                         kh[b, h, None, :, :])
                if cfg.causal:
                    rows = np.arange(i0, i1)[:, None]
                    scores = np.where(cols <= rows, scores, 0.0)
                den = scores.sum(axis=-1)
                if raise_on_degenerate:
                    small = np.abs(den) < ctx.eps
                    if small.any():
                        pos = i0 + int(np.argmax(small))
                        raise DegenerateRowError(b, pos, float(den[pos - i0]))
                gden = _guard(den, ctx.eps)
                y[b, h, i0:i1] = scores @ vh[b, h] / gden[:, None]
                if return_weights:
                    weights[b, h, i0:i1] = scores / gden[:, None]
    out = Tensor(_merge_heads(y).astype(ctx.out_dtype))
    return (out, weights) if return_weights else out


# --- linear forms ------------------------------------------------------------


def _forward_arrays(ctx: AttentionContext) -> np.ndarray:
    """Linear-time forward on the prepared context; returns y [B, H, L, d_v]."""
    pair = ctx.pair
    phi = pair.phi(ctx.qh)
    psi = pair.psi(ctx.kh)
    vh = ctx.vh
    if not ctx.cfg.causal:
        ctot = psi.sum(axis=2)
        stot = np.einsum("bhlm,bhlv->bhmv", psi, vh)
        num = np.einsum("bhlm,bhmv->bhlv", phi, stot)
        den = np.einsum("bhlm,bhm->bhl", phi, ctot)
        return num / _guard(den, ctx.eps)[..., None]

    nb, nh, ln, m = phi.shape
    dv = vh.shape[-1]
    y = np.empty((nb, nh, ln, dv))
    c_run = np.zeros((nb, nh, m))
    s_run = np.zeros((nb, nh, m, dv))
    for i0 in range(0, ln, BLOCK):
        sl = slice(i0, min(i0 + BLOCK, ln))
        phi_b, psi_b, v_b = phi[:, :, sl], psi[:, :, sl], vh[:, :, sl]
        c_pre = c_run[:, :, None] + np.cumsum(psi_b, axis=2)
        s_pre = s_run[:, :, None] + np.cumsum(psi_b[..., None] * v_b[..., None, :], axis=2)
        num = np.einsum("bhlm,bhlmv->bhlv", phi_b, s_pre)
        den = np.einsum("bhlm,bhlm->bhl", phi_b, c_pre)
        y[:, :, sl] = num / _guard(den, ctx.eps)[..., None]
        c_run = c_pre[:, :, -1]
        s_run = s_pre[:, :, -1]
    return y


def linear_bidirectional(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig) -> Tensor:
    """O(L) attention over the whole sequence; no score matrix exists."""
    if cfg.causal:
        raise UsageError("linear_bidirectional requires cfg.causal == False")
    ctx = _prepare(q, k, v, cfg)
    return Tensor(_merge_heads(_forward_arrays(ctx)).astype(ctx.out_dtype))


def linear_causal(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig) -> Tensor:
    """O(L) causal attention via running prefix sums."""
    if not cfg.causal:
        raise UsageError("linear_causal requires cfg.causal == True")
    ctx = _prepare(q, k, v, cfg)
    return Tensor(_merge_heads(_forward_arrays(ctx)).astype(ctx.out_dtype))


def linear_forward(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig):
    """Linear forward that also returns the context attention_backward needs."""
    ctx = _prepare(q, k, v, cfg)
    y = Tensor(_merge_heads(_forward_arrays(ctx)).astype(ctx.out_dtype))
    return y, ctx


# --- analytic backward -------------------------------------------------------


def _suffix_cumsum(x: np.ndarray) -> np.ndarray:
    return np.flip(np.cumsum(np.flip(x, 2), axis=2), 2)


def _backward_arrays(g: np.ndarray, ctx: AttentionContext):
    """Gradients w.r.t. the original (unshifted) q, k, v from upstream g."""
    pair = ctx.pair
    phi = pair.phi(ctx.qh)
    psi = pair.psi(ctx.kh)
    vh = ctx.vh
    gh = _split_heads(g.astype(np.float64), ctx.cfg.n_heads)
    nb, nh, ln, m = phi.shape
    dv = vh.shape[-1]

    if not ctx.cfg.causal:
        ctot = psi.sum(axis=2)
        stot = np.einsum("bhlm,bhlv->bhmv", psi, vh)
        den = _guard(np.einsum("bhlm,bhm->bhl", phi, ctot), ctx.eps)
        num = np.einsum("bhlm,bhmv->bhlv", phi, stot)
        u = gh / den[..., None]
        w = -(gh * num).sum(-1) / (den * den)
        dphi = np.einsum("bhmv,bhlv->bhlm", stot, u) + w[..., None] * ctot[:, :, None, :]
        p_tot = np.einsum("bhl,bhlm->bhm", w, phi)
        q_tot = np.einsum("bhlm,bhlv->bhmv", phi, u)
        dpsi = p_tot[:, :, None, :] + np.einsum("bhmv,bhlv->bhlm", q_tot, vh)
        dvh = np.einsum("bhmv,bhlm->bhlv", q_tot, psi)
    else:
        u = np.empty((nb, nh, ln, dv))
        w = np.empty((nb, nh, ln))
        dphi = np.empty((nb, nh, ln, m))
        c_run = np.zeros((nb, nh, m))
        s_run = np.zeros((nb, nh, m, dv))
        for i0 in range(0, ln, BLOCK):
            sl = slice(i0, min(i0 + BLOCK, ln))
            phi_b, psi_b, v_b = phi[:, :, sl], psi[:, :, sl], vh[:, :, sl]
            c_pre = c_run[:, :, None] + np.cumsum(psi_b, axis=2)
            s_pre = s_run[:, :, None] + np.cumsum(psi_b[..., None] * v_b[..., None, :], axis=2)
            den = _guard(np.einsum("bhlm,bhlm->bhl", phi_b, c_pre), ctx.eps)
            num = np.einsum("bhlm,bhlmv->bhlv", phi_b, s_pre)
            u[:, :, sl] = gh[:, :, sl] / den[..., None]
            w[:, :, sl] = -(gh[:, :, sl] * num).sum(-1) / (den * den)
            dphi[:, :, sl] = (np.einsum("bhlmv,bhlv->bhlm", s_pre, u[:, :, sl])
                              + w[:, :, sl, None] * c_pre)
            c_run = c_pre[:, :, -1]
            s_run = s_pre[:, :, -1]

        dpsi = np.empty((nb, nh, ln, m))
        dvh = np.empty((nb, nh, ln, dv))
        p_run = np.zeros((nb, nh, m))
        q_run = np.zeros((nb, nh, m, dv))
        starts = list(range(0, ln, BLOCK))
        for i0 in reversed(starts):
            sl = slice(i0, min(i0 + BLOCK, ln))
            phi_b, psi_b, v_b = phi[:, :, sl], psi[:, :, sl], vh[:, :, sl]
            u_b, w_b = u[:, :, sl], w[:, :, sl]
            p_suf = p_run[:, :, None] + _suffix_cumsum(w_b[..., None] * phi_b)
            q_suf = q_run[:, :, None] + _suffix_cumsum(phi_b[..., None] * u_b[..., None, :])
            dpsi[:, :, sl] = p_suf + np.einsum("bhlmv,bhlv->bhlm", q_suf, v_b)
            dvh[:, :, sl] = np.einsum("bhlmv,bhlm->bhlv", q_suf, psi_b)
            p_run = p_suf[:, :, 0]
            q_run = q_suf[:, :, 0]

    dqh = pair.phi_vjp(ctx.qh, dphi)
    dkh = pair.psi_vjp(ctx.kh, dpsi)
    dq = _merge_heads(dqh).astype(ctx.out_dtype)
    dk = _merge_heads(dkh).astype(ctx.out_dtype)
    dvm = _merge_heads(dvh).astype(ctx.out_dtype)
    return dq, dk, dvm


def attention_backward(upstream, ctx: AttentionContext, cfg: AttentionConfig | None = None):
    """Gradients (dq, dk, dv) of the linear forward held in ctx.

    upstream may be a Tensor or array shaped like the forward output.
    """
    if cfg is not None and cfg != ctx.cfg:
        raise UsageError("cfg does not match the saved forward context")
    g = upstream.data if isinstance(upstream, Tensor) else np.asarray(upstream)
    if g.shape != (ctx.vh.shape[0], ctx.vh.shape[2], ctx.vh.shape[1] * ctx.vh.shape[3]):
        raise ShapeError(f"upstream shape {g.shape} does not match forward output")
    return _backward_arrays(g, ctx)


# --- tape-bound entry points -------------------------------------------------


def attention(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig) -> Tensor:
    """Linear attention as a differentiable op (analytic custom gradient)."""
    y, ctx = linear_forward(q, k, v, cfg)

    def vjp(g):
        return _backward_arrays(np.asarray(g), ctx)

    return record_op(y, (q, k, v), vjp)


def attention_quadratic(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig) -> Tensor:
    """Reference-path attention as a differentiable op.

    Forward is the direct quadratic evaluation; backward differentiates the
    row-normalized score matrix densely (O(L^2) as well). Exists so training
    can swap attention routes without touching anything else. As a training
    route it must survive near-zero row sums the way the linear route does,
    so degenerate rows are guarded here, not raised.
    """
    y = quadratic_oracle(q, k, v, cfg, raise_on_degenerate=False)
    ctx = _prepare(q, k, v, cfg)

    def vjp(g):
        return _dense_backward(np.asarray(g), ctx)

    return record_op(y, (q, k, v), vjp)


def _dense_backward(g: np.ndarray, ctx: AttentionContext):
    pair = ctx.pair
    phi = pair.phi(ctx.qh)
    psi = pair.psi(ctx.kh)
    vh = ctx.vh
    gh = _split_heads(g.astype(np.float64), ctx.cfg.n_heads)
    ln = phi.shape[2]
    # scores via the decomposition: identical to the direct form as a function
    scores = np.einsum("bhim,bhjm->bhij", phi, psi)
    if ctx.cfg.causal:
        scores = np.where(np.arange(ln)[None, :] <= np.arange(ln)[:, None], scores, 0.0)
    den = _guard(scores.sum(-1), ctx.eps)
    num = np.einsum("bhij,bhjv->bhiv", scores, vh)
    u = gh / den[..., None]
    w = -(gh * num).sum(-1) / (den * den)
    dscore = np.einsum("bhiv,bhjv->bhij", u, vh) + w[..., None]
    if ctx.cfg.causal:
        dscore = np.where(np.arange(ln)[None, :] <= np.arange(ln)[:, None], dscore, 0.0)
    dphi = np.einsum("bhij,bhjm->bhim", dscore, psi)
    dpsi = np.einsum("bhij,bhim->bhjm", dscore, phi)
    dvh = np.einsum("bhij,bhiv->bhjv", scores, u)
    dq = _merge_heads(pair.phi_vjp(ctx.qh, dphi)).astype(ctx.out_dtype)
    dk = _merge_heads(pair.psi_vjp(ctx.kh, dpsi)).astype(ctx.out_dtype)
    dvm = _merge_heads(dvh).astype(ctx.out_dtype)
    return dq, dk, dvm


# --- stabilization -----------------------------------------------------------


def stabilize_shift(q: Tensor, k: Tensor):
    """Subtract the single global max entry from q and from k.

    The normalized output is invariant to these shifts; their only job is
    keeping exponentials representable. Returns (q', k', shift_q, shift_k).
    """
    shift_q = float(q.data.max())
    shift_k = float(k.data.max())
    qs = Tensor((q.data - np.asarray(shift_q, dtype=q.data.dtype)))
    ks = Tensor((k.data - np.asarray(shift_k, dtype=k.data.dtype)))
    return qs, ks, shift_q, shift_k


# --- streaming decode --------------------------------------------------------


@dataclass
class DecodeState:
    """Constant-size causal accumulators: one (C, S) pair per head.

    shift is the key-side stabilization scalar baked into s_acc/c_acc;
    mixing shifts across steps would corrupt the sums, hence the staleness
    check in decode_step.
    """

    c_acc: np.ndarray  # [H, M]
    s_acc: np.ndarray  # [H, M, d_v]
    position: int
    shift: float

    @property
    def nbytes(self) -> int:
        return self.c_acc.nbytes + self.s_acc.nbytes


def start_decode(cfg: AttentionConfig, d_model: int, value_dim: int,
                 shift: float = 0.0) -> DecodeState:
    if d_model % cfg.n_heads != 0 or value_dim % cfg.n_heads != 0:
        raise ShapeError(f"dims ({d_model}, {value_dim}) not divisible by {cfg.n_heads} heads")
    pair = feature_map_pair(cfg.kernel_id, d_model // cfg.n_heads)
    h, m, dv = cfg.n_heads, pair.feature_dim, value_dim // cfg.n_heads
    return DecodeState(
        c_acc=np.zeros((h, m)),
        s_acc=np.zeros((h, m, dv)),
        position=0,
        shift=shift,
    )


def decode_step(state: DecodeState, q_t: np.ndarray, k_t: np.ndarray,
                v_t: np.ndarray, cfg: AttentionConfig,
                shift: float | None = None):
    """Feed one token; returns (y_t, next_state). O(1) in sequence length."""
    if shift is not None and shift != state.shift:
        raise StalenessError(
            f"stabilization shift {shift} does not match state shift {state.shift}")
    q_t = np.asarray(q_t, dtype=np.float64).reshape(-1)
    k_t = np.asarray(k_t, dtype=np.float64).reshape(-1)
    v_t = np.asarray(v_t, dtype=np.float64).reshape(-1)
    h = cfg.n_heads
    if q_t.shape != k_t.shape or q_t.size % h != 0 or v_t.size % h != 0:
        raise ShapeError("decode_step expects flat q, k, v vectors divisible into heads")
    pair = feature_map_pair(cfg.kernel_id, q_t.size // h)
    eps = cfg.epsilon_for("f64")
    qh = q_t.reshape(h, -1)
    if cfg.stabilized():
        # per-query scale cancels between numerator and denominator, so a
        # fresh query shift each step is safe; the key shift must stay fixed
        qh = qh - qh.max()
    kh = k_t.reshape(h, -1) - state.shift
    vh = v_t.reshape(h, -1)
    psi = pair.psi(kh)  # [H, M]
    c_new = state.c_acc + psi
    s_new = state.s_acc + psi[..., None] * vh[:, None, :]
    phi = pair.phi(qh)
    den = _guard((phi * c_new).sum(-1), eps)
    y = np.einsum("hm,hmv->hv", phi, s_new) / den[:, None]
    next_state = DecodeState(c_acc=c_new, s_acc=s_new,
                             position=state.position + 1, shift=state.shift)
    return y.reshape(-1), next_state
