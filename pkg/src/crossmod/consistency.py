"""Cross-modal consistency signals.

Three granularities: pairwise/global gated scores over pooled embeddings,
per-token consistency fields read off cross-attention rows, and a temporal
visual-audio mismatch score from per-timestep projected distances.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, astensor

PAIRS = ("tv", "ta", "va")

ROW_SUM_TOL = 1e-4


def pool_modality(H):
    """Mean-pool a token/frame sequence: (..., L, d) -> (..., d)."""
    H = astensor(H)
    if H.ndim < 2 or H.shape[-2] < 1:
        raise ShapeError(f"pool_modality: need a non-empty (..., L, d) sequence, got {H.shape}")
    return T.mean_pool(H)


def pairwise_consistency(h_i, h_j, w, b):
    """Gated pair score sigmoid(w^T [h_i; h_j] + b); inputs (d,) or (B, d)."""
    h_i, h_j = astensor(h_i), astensor(h_j)
    if h_i.shape != h_j.shape:
        raise ShapeError(f"pairwise_consistency: shapes {h_i.shape} vs {h_j.shape}")
    squeeze = h_i.ndim == 1
    if squeeze:
        h_i, h_j = T.reshape(h_i, (1, -1)), T.reshape(h_j, (1, -1))
    cat = T.concat([h_i, h_j], axis=-1)
    w = astensor(w)
    if cat.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"pairwise_consistency: concatenated dim {cat.shape[-1]} vs weight {w.shape}"
        )
    score = T.sigmoid(T.add(T.matmul(cat, w), b))
    score = T.reshape(score, (score.shape[0],))
    return T.reshape(score, ()) if squeeze else score


def _mlp(x, p, prefix):
    hidden = T.tanh(T.linear(x, p[f"{prefix}w1"], p[f"{prefix}b1"]))
    return T.linear(hidden, p[f"{prefix}w2"], p[f"{prefix}b2"])


def global_consistency(c_vec, mlp_params):
    """sigmoid(MLP(c)) over the 3-vector of pair scores; (3,) or (B, 3)."""
    c_vec = astensor(c_vec)
    squeeze = c_vec.ndim == 1
    if squeeze:
        c_vec = T.reshape(c_vec, (1, -1))
    if c_vec.shape[-1] != 3:
        raise ShapeError(f"global_consistency: expected 3 pair scores, got {c_vec.shape}")
    out = T.sigmoid(_mlp(c_vec, mlp_params, "g"))
    out = T.reshape(out, (out.shape[0],))
    return T.reshape(out, ()) if squeeze else out


def consistency_field(A):
    """Row-max of a row-stochastic attention matrix: (..., L_i, L_j) -> (..., L_i)."""
    A = astensor(A)
    if A.ndim < 2:
        raise ShapeError(f"consistency_field: need (..., L_i, L_j), got {A.shape}")
    sums = A.data.sum(axis=-1)
    if np.abs(sums - 1.0).max() > ROW_SUM_TOL:
        worst = float(np.abs(sums - 1.0).max())
        raise ValueError(
            f"consistency_field: rows are not stochastic (max |sum-1| = {worst:.2e})"
        )
    return T.max_reduce(A, axis=-1)


def field_alignment_loss(c_scores, fields):
    """Sum over pairs of (c_ij - mean(F_ij))^2, averaged over the batch.

    `c_scores` and `fields` map pair name -> Tensor of scores ((B,) or ())
    and fields ((B, L) or (L,)) respectively.
    """
    terms = []
    for pair in PAIRS:
        if pair not in c_scores or pair not in fields:
            raise KeyError(f"field_alignment_loss: missing pair {pair!r}")
        c = astensor(c_scores[pair])
        f_mean = T.mean_(astensor(fields[pair]), axis=-1)
        diff = T.sub(c, f_mean)
        terms.append(T.mul(diff, diff))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mean_(total) if total.ndim > 0 else total


def resample_matrix(t_in, t_out, dtype=np.float32):
    """Linear-interpolation operator (t_out, t_in) over [0, t_in - 1]."""
    if t_out < 2:
        raise ValueError(f"temporal_resample: target length must be >= 2, got {t_out}")
    if t_in < 2:
        raise ShapeError(f"temporal_resample: source length must be >= 2, got {t_in}")
    W = np.zeros((t_out, t_in), dtype=dtype)
    pos = np.linspace(0.0, t_in - 1.0, t_out)
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, t_in - 2)
    frac = pos - lo
    W[np.arange(t_out), lo] = 1.0 - frac
    W[np.arange(t_out), lo + 1] = frac
    return W


def temporal_resample(H, t_out):
    """Resample (..., T, d) to (..., t_out, d) by linear interpolation."""
    H = astensor(H)
    if H.ndim < 2:
        raise ShapeError(f"temporal_resample: need (..., T, d), got {H.shape}")
    W = resample_matrix(H.shape[-2], t_out, dtype=H.dtype)
    return T.matmul(Tensor(W, dtype=H.dtype), H)


def temporal_inconsistency(vis, aud, params):
    """Per-timestep projected distances and their 1 - sigmoid(MLP) summary.

    vis, aud: (..., T', d) already resampled to a common length.
    Returns (d_vec, s_temp, c_temp) with s_temp = [mean, population var, max].
    """
    vis, aud = astensor(vis), astensor(aud)
    if vis.shape[-2] != aud.shape[-2]:
        raise ShapeError(
            f"temporal_inconsistency: lengths differ: {vis.shape} vs {aud.shape}"
        )
    squeeze = vis.ndim == 2
    if squeeze:
        vis = T.reshape(vis, (1, *vis.shape))
        aud = T.reshape(aud, (1, *aud.shape))
    proj = T.matmul(aud, params["proj"])
    if proj.shape != vis.shape:
        raise ShapeError(
            f"temporal_inconsistency: projected audio {proj.shape} vs visual {vis.shape}"
        )
    d_vec = T.l2_norm(T.sub(vis, proj), axis=-1)  # (..., T')
    mean_d = T.mean_(d_vec, axis=-1, keepdims=True)
    centered = T.sub(d_vec, mean_d)
    var_d = T.mean_(T.mul(centered, centered), axis=-1, keepdims=True)
    max_d = T.max_reduce(d_vec, axis=-1, keepdims=True)
    s_temp = T.concat([mean_d, var_d, max_d], axis=-1)
    c_temp = T.sub(1.0, T.sigmoid(_mlp(s_temp, params, "t")))
    c_temp = T.reshape(c_temp, c_temp.shape[:-1])
    if squeeze:
        d_vec = T.reshape(d_vec, d_vec.shape[1:])
        s_temp = T.reshape(s_temp, s_temp.shape[1:])
        c_temp = T.reshape(c_temp, ())
    return d_vec, s_temp, c_temp
