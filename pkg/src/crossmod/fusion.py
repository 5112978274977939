"""Style-robust rewrite fusion and the three-stage multimodal transformer.

Rewrite fusion produces a convex combination of the original pooled text and
projected rewrite views, with a floor on the original's weight. The fusion
transformer refines each modality with self-attention, exchanges messages via
directed cross-attention weighted by the pair-consistency vector, and pools
everything through a learned CLS slot.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, astensor


# ---------------------------------------------------------------------------
# rewrite fusion
# ---------------------------------------------------------------------------

def rewrite_quality(h_orig, h_rew, params):
    """sigmoid(MLP_q([h_orig; h_rew])): quality of one rewrite view, (B,)."""
    h_orig, h_rew = astensor(h_orig), astensor(h_rew)
    if h_orig.shape != h_rew.shape:
        raise ShapeError(f"rewrite_quality: shapes {h_orig.shape} vs {h_rew.shape}")
    squeeze = h_orig.ndim == 1
    if squeeze:
        h_orig = T.reshape(h_orig, (1, -1))
        h_rew = T.reshape(h_rew, (1, -1))
    cat = T.concat([h_orig, h_rew], axis=-1)
    hidden = T.tanh(T.linear(cat, params["qw1"], params["qb1"]))
    q = T.sigmoid(T.linear(hidden, params["qw2"], params["qb2"]))
    q = T.reshape(q, (q.shape[0],))
    return T.reshape(q, ()) if squeeze else q


def renormalize_weights(alpha_soft, alpha_min):
    """Clamp the original's weight to >= alpha_min, rescale the rest.

    alpha_soft: (B, V+1) softmax output. Returns (B, V+1) summing to 1 with
    column 0 >= alpha_min.
    """
    if not (0.0 < alpha_min < 1.0):
        raise ValueError(f"alpha_min must be in (0, 1), got {alpha_min}")
    alpha_soft = astensor(alpha_soft)
    a0 = T.clip(alpha_soft[:, 0:1], alpha_min, 1.0)
    rest = alpha_soft[:, 1:]
    denom = T.clip(T.sum_(rest, axis=-1, keepdims=True), 1e-12, np.inf)
    scaled = T.mul(T.sub(1.0, a0), T.div(rest, denom))
    return T.concat([a0, scaled], axis=-1)


def rewrite_fusion(h_orig, h_rews, params, alpha_min=0.5):
    """Fuse the original text vector with V projected rewrite views.

    h_orig: (B, d); h_rews: list of V tensors (B, d).
    Returns (h_fuse (B, d), alpha (B, V+1), q (B, V)).
    """
    h_orig = astensor(h_orig)
    if h_orig.ndim != 2:
        raise ShapeError(f"rewrite_fusion: expected (B, d) input, got {h_orig.shape}")
    if len(h_rews) < 1:
        raise ValueError("rewrite_fusion: need at least one rewrite view")
    h_rews = [astensor(h) for h in h_rews]

    qs = [rewrite_quality(h_orig, h, params) for h in h_rews]
    q = T.concat([T.reshape(x, (-1, 1)) for x in qs], axis=-1)
    gate_in = T.concat([h_orig, *h_rews, q], axis=-1)
    hidden = T.tanh(T.linear(gate_in, params["gw1"], params["gb1"]))
    logits = T.linear(hidden, params["gw2"], params["gb2"])
    alpha = renormalize_weights(T.softmax(logits, axis=-1), alpha_min)

    h_fuse = T.mul(alpha[:, 0:1], h_orig)
    for v, h in enumerate(h_rews):
        projected = T.matmul(h, params[f"proj{v}"])
        h_fuse = T.add(h_fuse, T.mul(alpha[:, v + 1 : v + 2], projected))
    return h_fuse, alpha, q


# ---------------------------------------------------------------------------
# transformer blocks
# ---------------------------------------------------------------------------

def _block_params(p, prefix):
    return {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}


def intra_modal_refine(H, params, n_heads):
    """Pre-norm self-attention encoder block: (..., L, D) -> same shape."""
    H = astensor(H)
    normed = T.layernorm(H, params["ln1g"], params["ln1b"])
    attn_out, _ = T.multi_head_attention(
        normed, normed, params["wq"], params["wk"], params["wv"], params["wo"], n_heads
    )
    x = T.add(H, attn_out)
    normed2 = T.layernorm(x, params["ln2g"], params["ln2b"])
    ff = T.linear(T.tanh(T.linear(normed2, params["fw1"], params["fb1"])), params["fw2"], params["fb2"])
    return T.add(x, ff)


def cross_modal_attend(H_q, H_kv, params, n_heads):
    """Directed cross-attention message with residual.

    Returns (messages (..., L_q, D), attn (..., L_q, L_kv)); the attention
    matrix is head-averaged and row-stochastic, ready for field extraction.
    """
    H_q, H_kv = astensor(H_q), astensor(H_kv)
    if H_q.shape[-1] != H_kv.shape[-1]:
        raise ShapeError(f"cross_modal_attend: dims {H_q.shape} vs {H_kv.shape}")
    nq = T.layernorm(H_q, params["lnqg"], params["lnqb"])
    nk = T.layernorm(H_kv, params["lnkg"], params["lnkb"])
    attn_out, attn = T.multi_head_attention(
        nq, nk, params["wq"], params["wk"], params["wv"], params["wo"], n_heads
    )
    return T.add(H_q, attn_out), attn


def consistency_weighted_aggregate(messages, c_vec, params):
    """Convex combination of two partner messages with weights from c.

    messages: sequence of two tensors (B, L, D) for this modality's partners,
    c_vec: (B, 3). Returns (H_B, beta (B, 2)).
    """
    if len(messages) != 2:
        raise ValueError(f"expected exactly two partner messages, got {len(messages)}")
    c_vec = astensor(c_vec)
    hidden = T.tanh(T.linear(c_vec, params["bw1"], params["bb1"]))
    beta = T.softmax(T.linear(hidden, params["bw2"], params["bb2"]), axis=-1)
    m0, m1 = astensor(messages[0]), astensor(messages[1])
    b0 = T.reshape(beta[:, 0], (-1, 1, 1))
    b1 = T.reshape(beta[:, 1], (-1, 1, 1))
    return T.add(T.mul(b0, m0), T.mul(b1, m1)), beta


def global_aggregate(slots, params, n_heads):
    """Stack pooled modality vectors behind a learned CLS slot and encode.

    slots: sequence of four (B, D) vectors. Returns h_global (B, D).
    """
    slots = [astensor(s) for s in slots]
    if len(slots) != 4:
        raise ValueError(f"global_aggregate: expected 4 slot vectors, got {len(slots)}")
    B, D = slots[0].shape
    cls = T.reshape(params["cls"], (1, 1, D))
    cls = T.mul(cls, Tensor(np.ones((B, 1, 1), dtype=np.float32)))
    stacked = T.concat([cls] + [T.reshape(s, (B, 1, D)) for s in slots], axis=-2)
    Z = T.add(stacked, params["pos"])
    out = intra_modal_refine(Z, _block_params(params, "g_"), n_heads)
    return out[:, 0, :]
