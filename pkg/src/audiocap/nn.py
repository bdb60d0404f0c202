"""Dense numeric kernel: the differentiable layers the captioner needs.

Each layer ships a forward returning (output, cache) and an exact hand-derived
backward consuming that cache; the model composes them in reverse order
instead of relying on an autograd tape. `grad_check` is the finite-difference
harness that guards every backward.

GRU convention (gate order reset r, update z, candidate n; two bias vectors):

    r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - z) * n + z * h

All operations are pure functions of their inputs; parameters are only ever
mutated by the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class EmptySequence(ValueError):
    pass


class TargetOutOfRange(ValueError):
    pass


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; the two branches share it.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class GruCellParams:
    """Stacked gate weights: w_ih is (3H, I), w_hh is (3H, H), biases are 3H."""

    w_ih: np.ndarray
    w_hh: np.ndarray
    b_ih: np.ndarray
    b_hh: np.ndarray

    def __post_init__(self):
        three_h, i = self.w_ih.shape
        if three_h % 3 != 0:
            raise ShapeMismatch("w_ih first dimension must be 3*H")
        h = three_h // 3
        if self.w_hh.shape != (three_h, h) or self.b_ih.shape != (three_h,) \
                or self.b_hh.shape != (three_h,):
            raise ShapeMismatch("inconsistent GRU parameter shapes")

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]


@dataclass
class AffineParams:
    """y = w @ x + b with w of shape (out, in)."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ShapeMismatch("affine bias must match weight rows")


def init_gru(rng: np.random.Generator, input_size: int, hidden_size: int,
             dtype=np.float64) -> GruCellParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) init for all weights and biases."""
    bound = 1.0 / np.sqrt(hidden_size)
    shape3 = 3 * hidden_size
    return GruCellParams(
        w_ih=rng.uniform(-bound, bound, (shape3, input_size)).astype(dtype),
        w_hh=rng.uniform(-bound, bound, (shape3, hidden_size)).astype(dtype),
        b_ih=rng.uniform(-bound, bound, shape3).astype(dtype),
        b_hh=rng.uniform(-bound, bound, shape3).astype(dtype),
    )


def init_affine(rng: np.random.Generator, out_size: int, in_size: int,
                dtype=np.float64) -> AffineParams:
    bound = 1.0 / np.sqrt(in_size)
    return AffineParams(
        w=rng.uniform(-bound, bound, (out_size, in_size)).astype(dtype),
        b=rng.uniform(-bound, bound, out_size).astype(dtype),
    )


def gru_cell_forward(p: GruCellParams, x: np.ndarray, h: np.ndarray):
    """One GRU step. Returns (h_new, cache) with cache holding everything the
    backward pass needs: (x, h, r, z, n, hn_pre)."""
    hs = p.hidden_size
    if x.shape != (p.input_size,) or h.shape != (hs,):
        raise ShapeMismatch(f"x {x.shape} / h {h.shape} vs I={p.input_size}, H={hs}")
    gi = p.w_ih @ x + p.b_ih
    gh = p.w_hh @ h + p.b_hh
    rz = sigmoid(gi[:2 * hs] + gh[:2 * hs])
    r = rz[:hs]
    z = rz[hs:]
    hn_pre = gh[2 * hs:]
    n = np.tanh(gi[2 * hs:] + r * hn_pre)
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, r, z, n, hn_pre)


def gru_cell_backward(p: GruCellParams, cache, dh_new: np.ndarray):
    """Exact gradients of one GRU step.

    Returns (dx, dh, dp) where dp is a GruCellParams holding the parameter
    gradients for this step.
    """
    x, h, r, z, n, hn_pre = cache
    if dh_new.shape != h.shape:
        raise ShapeMismatch(f"dh_new {dh_new.shape} vs hidden {h.shape}")

    dz = dh_new * (h - n)
    dn = dh_new * (1.0 - z)
    dh = dh_new * z

    dn_pre = dn * (1.0 - n * n)
    dr = dn_pre * hn_pre
    dhn_pre = dn_pre * r
    dz_pre = dz * z * (1.0 - z)
    dr_pre = dr * r * (1.0 - r)

    dgi = np.concatenate([dr_pre, dz_pre, dn_pre])
    dgh = np.concatenate([dr_pre, dz_pre, dhn_pre])

    dp = GruCellParams(
        w_ih=np.outer(dgi, x),
        w_hh=np.outer(dgh, h),
        b_ih=dgi,
        b_hh=dgh,
    )
    dx = p.w_ih.T @ dgi
    dh = dh + p.w_hh.T @ dgh
    return dx, dh, dp


def affine_forward(p: AffineParams, x: np.ndarray):
    if x.shape != (p.w.shape[1],):
        raise ShapeMismatch(f"affine input {x.shape} vs weight {p.w.shape}")
    return p.w @ x + p.b, x


def affine_backward(p: AffineParams, cache, dy: np.ndarray):
    x = cache
    dw = np.outer(dy, x)
    db = dy
    dx = p.w.T @ dy
    return dx, AffineParams(w=dw, b=db)


def embedding_forward(table: np.ndarray, idx: int):
    if not 0 <= idx < table.shape[0]:
        raise TargetOutOfRange(f"embedding index {idx} out of range [0, {table.shape[0]})")
    return table[idx].copy(), idx


def embedding_backward(table_shape, cache, dvec: np.ndarray) -> np.ndarray:
    dtable = np.zeros(table_shape, dtype=dvec.dtype)
    dtable[cache] = dvec
    return dtable


def mean_pool_forward(rows: np.ndarray):
    """Mean over the first axis of a (T, H) stack."""
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise EmptySequence("mean pooling needs at least one row")
    return rows.mean(axis=0), rows.shape[0]


def mean_pool_backward(cache: int, dmean: np.ndarray) -> np.ndarray:
    t = cache
    return np.tile(dmean / t, (t, 1))


def softmax_ce_forward(logits: np.ndarray, target: int):
    """loss = -log softmax(logits)[target], max-subtracted for stability."""
    v = logits.shape[0]
    if not 0 <= target < v:
        raise TargetOutOfRange(f"target {target} out of range [0, {v})")
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    loss = -(shifted[target] - np.log(exp.sum()))
    return loss, (probs, target)


def softmax_ce_backward(cache, dloss: float = 1.0) -> np.ndarray:
    probs, target = cache
    dlogits = probs * dloss
    dlogits[target] -= dloss
    return dlogits


def cosine_dissim_forward(a: np.ndarray, b: np.ndarray, eps: float = 1e-8):
    """loss = 1 - (a.b) / max(||a|| ||b||, eps).

    Gradient flows into `a` only; `b` is a constant reference embedding.
    """
    if a.shape != b.shape:
        raise DimensionMismatch(f"cosine inputs {a.shape} vs {b.shape}")
    dot = float(a @ b)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    clamped = na * nb < eps
    denom = max(na * nb, eps)
    loss = 1.0 - dot / denom
    return loss, (a, b, dot, na, nb, denom, clamped)


def cosine_dissim_backward(cache, dloss: float = 1.0) -> np.ndarray:
    a, b, dot, na, nb, denom, clamped = cache
    if clamped:
        return (-b / denom) * dloss
    da = -b / denom + (dot / (na * na * denom)) * a
    return da * dloss


def grad_check(f: Callable[[], float], params: Sequence[np.ndarray],
               analytic: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Compare analytic gradients with central finite differences.

    Perturbs every coordinate of every array in `params` in place, re-evaluates
    `f`, and returns the maximum relative error
    |num - ana| / max(|num|, |ana|, 1e-8) over all coordinates.
    """
    max_rel = 0.0
    for p, g in zip(params, analytic):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {p.shape} vs gradient {g.shape}")
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            f_plus = f()
            flat_p[i] = orig - step
            f_minus = f()
            flat_p[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(numeric - flat_g[i]) / max(abs(numeric), abs(flat_g[i]), 1e-8)
            if rel > max_rel:
                max_rel = rel
    return max_rel
