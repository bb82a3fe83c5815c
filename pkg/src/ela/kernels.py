"""Exactly decomposable kernels: each k(a, b) factors as <phi(a), psi(b)>
with finite feature maps, plus an empirical validator for the selection
criteria (exactness is checked against an independent direct evaluation,
non-negativity and discriminability are sampled).

The direct() form of every kernel is computed along a genuinely different
floating-point path than the feature-map inner product (e.g. ||a+b||^2 by
actually forming a+b), so the decomposition check is meaningful and not a
tautology.

All maps are batched: phi/psi apply over the last axis of any [..., D]
array, direct() broadcasts its two arguments. phi_vjp/psi_vjp are the
transposed-Jacobian products the attention backward pass chains through.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import FinitenessError, ShapeError, UsageError

KERNEL_IDS = ("sum-sq", "sub-sq", "hadamard-exp", "mag-dir", "asym-example")


@dataclass(frozen=True)
class FeatureMapPair:
    kernel_id: str
    input_dim: int
    feature_dim: int
    phi: Callable[[np.ndarray], np.ndarray]
    psi: Callable[[np.ndarray], np.ndarray]
    direct: Callable[[np.ndarray, np.ndarray], np.ndarray]
    nonneg_guaranteed: bool
    phi_vjp: Callable[[np.ndarray, np.ndarray], np.ndarray]
    psi_vjp: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class KernelReport:
    kernel_id: str
    max_decomposition_error: float  # normalized by max(1, |direct|)
    min_kernel_value: float
    discriminability: float  # std dev of row-normalized weights
    samples: int


def _sq_norm(x):
    return (x * x).sum(axis=-1, keepdims=True)


def _ones_like_lead(x):
    return np.ones(x.shape[:-1] + (1,), dtype=x.dtype)


# --- summation squared Euclidean distance: ||a + b||^2 ----------------------


def _sumsq_phi(a):
    return np.concatenate([a, _sq_norm(a), _ones_like_lead(a)], axis=-1)


def _sumsq_psi(b):
    return np.concatenate([2.0 * b, _ones_like_lead(b), _sq_norm(b)], axis=-1)


def _sumsq_direct(a, b):
    s = a + b
    return (s * s).sum(axis=-1)


def _sumsq_phi_vjp(a, g):
    d = a.shape[-1]
    return g[..., :d] + 2.0 * a * g[..., d : d + 1]


def _sumsq_psi_vjp(b, g):
    d = b.shape[-1]
    return 2.0 * g[..., :d] + 2.0 * b * g[..., d + 1 : d + 2]


# --- subtraction squared Euclidean distance: ||a - b||^2 --------------------


def _subsq_psi(b):
    return np.concatenate([-2.0 * b, _ones_like_lead(b), _sq_norm(b)], axis=-1)


def _subsq_direct(a, b):
    s = a - b
    return (s * s).sum(axis=-1)


def _subsq_psi_vjp(b, g):
    d = b.shape[-1]
    return -2.0 * g[..., :d] + 2.0 * b * g[..., d + 1 : d + 2]


# --- Hadamard exp: sum_d e^{a_d} e^{b_d} ------------------------------------


def _hadamard_map(x):
    return np.exp(x)


def _hadamard_direct(a, b):
    # exponentiate the sum: same value, different fp path than exp(a)*exp(b)
    with np.errstate(over="ignore"):
        return np.exp(a + b).sum(axis=-1)


def _hadamard_vjp(x, g):
    return np.exp(x) * g


# --- magnitude-direction: (a_dir . b_dir + 1)(||a||^2+1)(||b||^2+1) ---------


def _unit(x):
    n = np.sqrt(_sq_norm(x))
    out = np.divide(x, n, out=np.zeros_like(x), where=n > 0)
    return out


def _magdir_map(x):
    scale = _sq_norm(x) + 1.0
    return np.concatenate([scale * _unit(x), scale], axis=-1)


def _magdir_direct(a, b):
    cos = (_unit(a) * _unit(b)).sum(axis=-1)
    norm_a = (a * a).sum(axis=-1)
    norm_b = (b * b).sum(axis=-1)
    return (cos + 1.0) * (norm_a + 1.0) * (norm_b + 1.0)


def _magdir_vjp(x, g):
    # phi(x) = (s+1) * (x/r, 1) with s = ||x||^2, r = sqrt(s)
    d = x.shape[-1]
    g_vec = g[..., :d]
    g_last = g[..., d:]
    s = _sq_norm(x)
    r = np.sqrt(s)
    safe_r = np.where(r > 0, r, 1.0)
    coef = (s + 1.0) / safe_r
    curve = (s - 1.0) / (safe_r**3)
    dot = (x * g_vec).sum(axis=-1, keepdims=True)
    grad = coef * g_vec + curve * dot * x + 2.0 * g_last * x
    # direction of the zero vector is defined as zero; its vjp contributes nothing
    return np.where(r > 0, grad, 2.0 * g_last * x)


# --- asymmetric example: a1*b2 + 2*a2*b1 (dim 2 only) -----------------------


def _asym_phi(a):
    return np.stack([a[..., 0], 2.0 * a[..., 1]], axis=-1)


def _asym_psi(b):
    return np.stack([b[..., 1], b[..., 0]], axis=-1)


def _asym_direct(a, b):
    return a[..., 0] * b[..., 1] + 2.0 * a[..., 1] * b[..., 0]


def _asym_phi_vjp(a, g):
    return np.stack([g[..., 0], 2.0 * g[..., 1]], axis=-1)


def _asym_psi_vjp(b, g):
    return np.stack([g[..., 1], g[..., 0]], axis=-1)


_defect_negated_psi_input = False


def set_defect_negated_psi_input(enabled: bool) -> None:
    """Forced-bug hook for checker negative controls.

    While enabled, every pair built by feature_map_pair applies psi to the
    negated input. A plain sign flip of psi's OUTPUT would cancel between
    the weighted-value sum and the row normalizer and change nothing, so
    the seeded defect negates the input instead, which breaks the
    decomposition detectably for every kernel that is not odd-symmetric.
    Never enable outside a forced-bug run.
    """
    global _defect_negated_psi_input
    _defect_negated_psi_input = enabled


def _negated_psi_input(pair: FeatureMapPair) -> FeatureMapPair:
    psi, psi_vjp = pair.psi, pair.psi_vjp
    return replace(pair,
                   psi=lambda b: psi(-b),
                   psi_vjp=lambda b, g: -psi_vjp(-b, g))


def feature_map_pair(kernel_id: str, input_dim: int) -> FeatureMapPair:
    """Build the (phi, psi, direct) bundle for one of the built-in kernels."""
    if input_dim < 1:
        raise ShapeError(f"input_dim must be >= 1, got {input_dim}")
    pair = _build_pair(kernel_id, input_dim)
    if _defect_negated_psi_input:
        pair = _negated_psi_input(pair)
    return pair


def _build_pair(kernel_id: str, input_dim: int) -> FeatureMapPair:
    if kernel_id == "sum-sq":
        return FeatureMapPair(
            kernel_id, input_dim, input_dim + 2,
            _sumsq_phi, _sumsq_psi, _sumsq_direct, True,
            _sumsq_phi_vjp, _sumsq_psi_vjp,
        )
    if kernel_id == "sub-sq":
        return FeatureMapPair(
            kernel_id, input_dim, input_dim + 2,
            _sumsq_phi, _subsq_psi, _subsq_direct, True,
            _sumsq_phi_vjp, _subsq_psi_vjp,
        )
    if kernel_id == "hadamard-exp":
        return FeatureMapPair(
            kernel_id, input_dim, input_dim,
            _hadamard_map, _hadamard_map, _hadamard_direct, True,
            _hadamard_vjp, _hadamard_vjp,
        )
    if kernel_id == "mag-dir":
        return FeatureMapPair(
            kernel_id, input_dim, input_dim + 1,
            _magdir_map, _magdir_map, _magdir_direct, True,
            _magdir_vjp, _magdir_vjp,
        )
    if kernel_id == "asym-example":
        if input_dim != 2:
            raise ShapeError("asym-example kernel is defined for dimension 2 only")
        return FeatureMapPair(
            kernel_id, 2, 2,
            _asym_phi, _asym_psi, _asym_direct, False,
            _asym_phi_vjp, _asym_psi_vjp,
        )
    raise UsageError(f"unknown kernel id {kernel_id!r}; known: {', '.join(KERNEL_IDS)}")


def _pair_triple(kernel_id, a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"expected two vectors of equal length, got {a.shape}, {b.shape}")
    pair = feature_map_pair(kernel_id, a.shape[0])
    return float(pair.direct(a, b)), pair.phi(a), pair.psi(b)


def sum_sq_dist(a, b):
    """||a+b||^2 with its (phi, psi) decomposition."""
    return _pair_triple("sum-sq", a, b)


def sub_sq_dist(a, b):
    """||a-b||^2 with its (phi, psi) decomposition."""
    return _pair_triple("sub-sq", a, b)


def hadamard_exp(a, b):
    """sum_d e^{a_d} e^{b_d}; raises FinitenessError on overflow."""
    direct, phi, psi = _pair_triple("hadamard-exp", a, b)
    if not (np.isfinite(direct) and np.isfinite(phi).all() and np.isfinite(psi).all()):
        raise FinitenessError("hadamard-exp overflowed; stabilize inputs first")
    return direct, phi, psi


def magnitude_direction(a, b):
    """(a_dir . b_dir + 1)(||a||^2+1)(||b||^2+1) with its decomposition."""
    return _pair_triple("mag-dir", a, b)


def asymmetric_example(a, b):
    """a1*b2 + 2*a2*b1: exact decomposition without symmetry (dim 2)."""
    return _pair_triple("asym-example", a, b)


def validate_kernel(pair: FeatureMapPair, sample_count: int, seed: int) -> KernelReport:
    """Sample standard-normal pairs and report decomposition error,
    minimum kernel value, and weight-spread discriminability."""
    if sample_count < 1:
        raise UsageError(f"sample_count must be >= 1, got {sample_count}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((sample_count, pair.input_dim))
    b = rng.standard_normal((sample_count, pair.input_dim))
    dec = (pair.phi(a) * pair.psi(b)).sum(axis=-1)
    direct = pair.direct(a, b)
    bad = ~(np.isfinite(dec) & np.isfinite(direct))
    if bad.any():
        i = int(np.argmax(bad))
        raise FinitenessError(
            f"kernel {pair.kernel_id} produced a non-finite value at sample {i}: "
            f"a={a[i]!r}, b={b[i]!r}"
        )
    err = np.abs(dec - direct) / np.maximum(1.0, np.abs(direct))

    # discriminability: spread of row-normalized weights over 16x16 blocks
    n_blocks = max(1, sample_count // 16)
    weights = []
    for _ in range(n_blocks):
        q = rng.standard_normal((16, pair.input_dim))
        k = rng.standard_normal((16, pair.input_dim))
        scores = pair.direct(q[:, None, :], k[None, :, :])
        row = scores.sum(axis=-1, keepdims=True)
        row = row + np.where(row >= 0, 1e-12, -1e-12)
        weights.append(scores / row)
    disc = float(np.concatenate([w.ravel() for w in weights]).std())

    return KernelReport(
        kernel_id=pair.kernel_id,
        max_decomposition_error=float(err.max()),
        min_kernel_value=float(direct.min()),
        discriminability=disc,
        samples=sample_count,
    )
