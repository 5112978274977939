"""The assembled detector head.

Wires pooled-feature consistency gates, temporal mismatch, rewrite fusion and
the hierarchical fusion transformer into a classifier that emits a fake
probability plus confidence/entropy/learned-uncertainty signals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import consistency as cons
from . import fusion
from . import tensor as T
from .tensor import Tensor, astensor

LN2 = math.log(2.0)

MODALITIES = ("text", "vis", "aud")
# directed cross-attention: query modality <- key/value modality
DIRECTIONS = [(m, j) for m in MODALITIES for j in MODALITIES if j != m]
# pair label for each direction, for field bookkeeping
PAIR_OF = {
    ("text", "vis"): "tv", ("vis", "text"): "tv",
    ("text", "aud"): "ta", ("aud", "text"): "ta",
    ("vis", "aud"): "va", ("aud", "vis"): "va",
}


@dataclass
class DetectorConfig:
    feat_dim: int = 32
    hidden_dim: int = 256
    n_heads: int = 8
    ffn_dim: int = 256
    mlp_hidden: int = 16
    gate_hidden: int = 32
    cls_hidden: int = 256
    unc_hidden: int = 64
    n_views: int = 3
    alpha_min: float = 0.5
    resample_len: int = 16
    dropout: float = 0.3
    # scale of the identity component in cross-attention query/key maps;
    # starts attention as a feature-similarity kernel so the consistency
    # fields separate aligned from unaligned pairs from step 0
    qk_gain: float = 1.5

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def init_params(cfg: DetectorConfig, seed: int):
    """Build the full parameter tree, grouped by module."""
    rng = np.random.default_rng(seed)
    d, D = cfg.feat_dim, cfg.hidden_dim
    mh, gh = cfg.mlp_hidden, cfg.gate_hidden
    V = cfg.n_views

    def P(*shape, scale=None):
        if scale is None:
            scale = 1.0 / math.sqrt(shape[0])
        return T.parameter(rng.normal(0.0, scale, shape).astype(np.float32))

    def zeros(*shape):
        return T.parameter(np.zeros(shape, dtype=np.float32))

    def ident(n, gain=1.0, noise=0.0):
        m = gain * np.eye(n, dtype=np.float32)
        if noise:
            m = m + rng.normal(0.0, noise, (n, n)).astype(np.float32)
        return T.parameter(m)

    params = {}

    # pair gates start flat (c = 0.5); the field regularizer orients them.
    # The global MLP starts as a smooth monotone function of mean(c) so the
    # global score inherits the pair scores' orientation.
    cmcg = {}
    for pair in cons.PAIRS:
        cmcg[f"w_{pair}"] = zeros(2 * d, 1)
        cmcg[f"b_{pair}"] = zeros(1)
    cmcg["gw1"] = T.parameter(np.full((3, mh), 2.0 / 3.0, dtype=np.float32))
    cmcg["gb1"] = T.parameter(np.full((mh,), -1.0, dtype=np.float32))
    cmcg["gw2"] = T.parameter(np.full((mh, 1), 1.0 / mh, dtype=np.float32))
    cmcg["gb2"] = zeros(1)
    params["cmcg"] = cmcg

    params["tcmi"] = {
        "proj": ident(d, noise=0.02),
        "tw1": P(3, mh, scale=0.2),
        "tb1": zeros(mh),
        "tw2": P(mh, 1, scale=0.2),
        "tb2": zeros(1),
    }

    aarf = {
        "qw1": P(2 * d, mh),
        "qb1": zeros(mh),
        "qw2": P(mh, 1, scale=0.2),
        "qb2": zeros(1),
        "gw1": P((V + 1) * d + V, gh),
        "gb1": zeros(gh),
        "gw2": P(gh, V + 1, scale=0.1),
        "gb2": zeros(V + 1),
    }
    for v in range(V):
        aarf[f"proj{v}"] = ident(d, noise=0.02)
    params["aarf"] = aarf

    hmt = {}
    # shared input projection at init: approximately inner-product preserving,
    # so feature-space geometry survives into the fusion stack
    in_proj = rng.normal(0.0, 1.0 / math.sqrt(D), (d, D)).astype(np.float32)
    for m in MODALITIES:
        hmt[f"{m}_in_w"] = T.parameter(in_proj.copy())
        hmt[f"{m}_in_b"] = zeros(D)
        hmt[f"{m}_ln1g"] = T.parameter(np.ones(D, dtype=np.float32))
        hmt[f"{m}_ln1b"] = zeros(D)
        hmt[f"{m}_wq"] = P(D, D, scale=0.05)
        hmt[f"{m}_wk"] = P(D, D, scale=0.05)
        hmt[f"{m}_wv"] = ident(D, noise=0.02)
        hmt[f"{m}_wo"] = P(D, D, scale=0.02)
        hmt[f"{m}_ln2g"] = T.parameter(np.ones(D, dtype=np.float32))
        hmt[f"{m}_ln2b"] = zeros(D)
        hmt[f"{m}_fw1"] = P(D, cfg.ffn_dim)
        hmt[f"{m}_fb1"] = zeros(cfg.ffn_dim)
        hmt[f"{m}_fw2"] = P(cfg.ffn_dim, D, scale=0.02)
        hmt[f"{m}_fb2"] = zeros(D)
        hmt[f"{m}_bw1"] = P(3, mh, scale=0.3)
        hmt[f"{m}_bb1"] = zeros(mh)
        hmt[f"{m}_bw2"] = P(mh, 2, scale=0.3)
        hmt[f"{m}_bb2"] = zeros(2)
    for q, kv in DIRECTIONS:
        pfx = f"x_{q}_{kv}_"
        hmt[pfx + "lnqg"] = T.parameter(np.ones(D, dtype=np.float32))
        hmt[pfx + "lnqb"] = zeros(D)
        hmt[pfx + "lnkg"] = T.parameter(np.ones(D, dtype=np.float32))
        hmt[pfx + "lnkb"] = zeros(D)
        hmt[pfx + "wq"] = ident(D, gain=cfg.qk_gain, noise=0.02)
        hmt[pfx + "wk"] = ident(D, gain=cfg.qk_gain, noise=0.02)
        hmt[pfx + "wv"] = ident(D, noise=0.02)
        hmt[pfx + "wo"] = P(D, D, scale=0.02)
    hmt["fuse_w"] = P(d, D)
    hmt["fuse_b"] = zeros(D)
    hmt["cls"] = P(D, scale=0.05)
    hmt["pos"] = T.parameter(rng.normal(0.0, 0.1, (5, D)).astype(np.float32))
    hmt["g_ln1g"] = T.parameter(np.ones(D, dtype=np.float32))
    hmt["g_ln1b"] = zeros(D)
    hmt["g_wq"] = P(D, D, scale=0.05)
    hmt["g_wk"] = P(D, D, scale=0.05)
    hmt["g_wv"] = ident(D, noise=0.02)
    hmt["g_wo"] = P(D, D, scale=0.05)
    hmt["g_ln2g"] = T.parameter(np.ones(D, dtype=np.float32))
    hmt["g_ln2b"] = zeros(D)
    hmt["g_fw1"] = P(D, cfg.ffn_dim)
    hmt["g_fb1"] = zeros(cfg.ffn_dim)
    hmt["g_fw2"] = P(cfg.ffn_dim, D, scale=0.02)
    hmt["g_fb2"] = zeros(D)
    params["hmt"] = hmt

    # classifier first-layer columns that read the five consistency scalars
    # start at zero: the scores earn their way into the decision only after
    # the field regularizer has oriented them
    w1 = rng.normal(0.0, 1.0 / math.sqrt(D + 5), (D + 5, cfg.cls_hidden)).astype(np.float32)
    w1[D:, :] = 0.0
    uw1 = rng.normal(0.0, 1.0 / math.sqrt(D + 5), (D + 5, cfg.unc_hidden)).astype(np.float32)
    params["classifier"] = {
        "w1": T.parameter(w1),
        "b1": zeros(cfg.cls_hidden),
        "w2": P(cfg.cls_hidden, 2, scale=0.05),
        "b2": zeros(2),
        "uw1": T.parameter(uw1),
        "ub1": zeros(cfg.unc_hidden),
        "uw2": P(cfg.unc_hidden, 1, scale=0.05),
        "ub2": zeros(1),
    }

    params["contrast"] = {
        "style_w": ident(d, noise=0.05),
        "cross_u": P(d, d),
        "cross_v": P(D, d),
    }
    return params


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

def records_to_batch(records):
    """Stack records with identical shapes into contiguous arrays."""
    shapes = {
        (r.text_tokens.shape, r.visual_frames.shape, r.audio_frames.shape)
        for r in records
    }
    if len(shapes) != 1:
        raise ValueError(f"records_to_batch: mixed shapes in batch: {sorted(map(str, shapes))}")
    return {
        "ids": [r.id for r in records],
        "labels": np.asarray([r.label for r in records], dtype=np.int64),
        "text": np.stack([r.text_tokens for r in records]),
        "rewrites": np.stack([np.stack(r.rewrite_tokens) for r in records]),  # (B, V, L, d)
        "vis": np.stack([r.visual_frames for r in records]),
        "aud": np.stack([r.audio_frames for r in records]),
    }


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def classifier_head(params, feat, train=False, seed=0, dropout=0.3):
    """Two-logit softmax head over the fused representation."""
    p = params["classifier"]
    hidden = T.tanh(T.linear(feat, p["w1"], p["b1"]))
    hidden = T.dropout(hidden, dropout, seed=seed, train=train)
    logits = T.linear(hidden, p["w2"], p["b2"])
    return T.softmax(logits, axis=-1)


def uncertainty_head(params, feat):
    p = params["classifier"]
    hidden = T.tanh(T.linear(feat, p["uw1"], p["ub1"]))
    u = T.sigmoid(T.linear(hidden, p["uw2"], p["ub2"]))
    return T.reshape(u, (u.shape[0],))


def detector_forward(params, batch, cfg: DetectorConfig, train=False, seed=0,
                     ablate=frozenset(), text_override=None):
    """Run the full head on a stacked batch.

    Returns a dict of tape-connected tensors: pair/global/temporal scores,
    fields per direction, fusion weights, pooled raw embeddings, h_global,
    class probabilities and the learned uncertainty.

    `text_override`: optional (B, L, d) array replacing the text tokens
    (used to score rewrite views through the same parameters).
    `ablate`: subset of {"cmcg_inputs", "aarf"}.
    """
    d, D = cfg.feat_dim, cfg.hidden_dim
    text = astensor(batch["text"] if text_override is None else text_override)
    vis = astensor(batch["vis"])
    aud = astensor(batch["aud"])
    B = text.shape[0]

    # pooled raw embeddings and pair gates
    h_text = cons.pool_modality(text)
    h_vis = cons.pool_modality(vis)
    h_aud = cons.pool_modality(aud)
    cm = params["cmcg"]
    c_tv = cons.pairwise_consistency(h_text, h_vis, cm["w_tv"], cm["b_tv"])
    c_ta = cons.pairwise_consistency(h_text, h_aud, cm["w_ta"], cm["b_ta"])
    c_va = cons.pairwise_consistency(h_vis, h_aud, cm["w_va"], cm["b_va"])
    c_vec = T.concat([T.reshape(c, (B, 1)) for c in (c_tv, c_ta, c_va)], axis=-1)
    c_global = cons.global_consistency(c_vec, cm)

    # temporal mismatch on resampled streams
    vis_rs = cons.temporal_resample(vis, cfg.resample_len)
    aud_rs = cons.temporal_resample(aud, cfg.resample_len)
    d_vec, s_temp, c_temp = cons.temporal_inconsistency(vis_rs, aud_rs, params["tcmi"])

    # rewrite fusion on pooled views
    rewrites = astensor(batch["rewrites"])  # (B, V, L, d)
    h_rews = [cons.pool_modality(rewrites[:, v]) for v in range(cfg.n_views)]
    if "aarf" in ablate:
        h_fuse = h_text
        alpha = Tensor(np.concatenate(
            [np.ones((B, 1), dtype=np.float32), np.zeros((B, cfg.n_views), dtype=np.float32)],
            axis=1,
        ))
        q = Tensor(np.zeros((B, cfg.n_views), dtype=np.float32))
    else:
        h_fuse, alpha, q = fusion.rewrite_fusion(h_text, h_rews, params["aarf"], cfg.alpha_min)

    # fusion transformer: intra-modal refinement
    hmt = params["hmt"]
    seqs = {"text": text, "vis": vis, "aud": aud}
    refined = {}
    for m in MODALITIES:
        x = T.linear(seqs[m], hmt[f"{m}_in_w"], hmt[f"{m}_in_b"])
        refined[m] = fusion.intra_modal_refine(
            x, {k[len(m) + 1:]: v for k, v in hmt.items() if k.startswith(m + "_")},
            cfg.n_heads,
        )

    # directed cross-attention, fields, and consistency-weighted aggregation
    messages = {}
    fields = {}
    attn_mats = {}
    for qm, kv in DIRECTIONS:
        pfx = f"x_{qm}_{kv}_"
        blk = {k[len(pfx):]: v for k, v in hmt.items() if k.startswith(pfx)}
        msg, attn = fusion.cross_modal_attend(refined[qm], refined[kv], blk, cfg.n_heads)
        messages[(qm, kv)] = msg
        attn_mats[(qm, kv)] = attn
        fields[(qm, kv)] = cons.consistency_field(attn)

    pooled = {}
    betas = {}
    for m in MODALITIES:
        partners = [j for j in MODALITIES if j != m]
        blk = {k[len(m) + 1:]: v for k, v in hmt.items() if k.startswith(m + "_b")}
        agg, beta = fusion.consistency_weighted_aggregate(
            [messages[(m, j)] for j in partners], c_vec, blk
        )
        pooled[m] = cons.pool_modality(agg)
        betas[m] = beta

    fuse_slot = T.linear(h_fuse, hmt["fuse_w"], hmt["fuse_b"])
    h_global = fusion.global_aggregate(
        [pooled["text"], pooled["vis"], pooled["aud"], fuse_slot], hmt, cfg.n_heads
    )

    # classifier input: fused representation plus the five consistency scalars
    if "cmcg_inputs" in ablate:
        scalars = Tensor(np.full((B, 5), 0.5, dtype=np.float32))
    else:
        scalars = T.concat(
            [c_vec, T.reshape(c_global, (B, 1)), T.reshape(c_temp, (B, 1))], axis=-1
        )
    feat = T.concat([h_global, scalars], axis=-1)
    probs = classifier_head(params, feat, train=train, seed=seed, dropout=cfg.dropout)
    u_hat = uncertainty_head(params, feat)

    return {
        "h_text": h_text, "h_vis": h_vis, "h_aud": h_aud,
        "c_tv": c_tv, "c_ta": c_ta, "c_va": c_va,
        "c_vec": c_vec, "c_global": c_global, "c_temp": c_temp,
        "d_vec": d_vec, "s_temp": s_temp,
        "h_fuse": h_fuse, "alpha": alpha, "q": q, "h_rews": h_rews,
        "fields": fields, "attn": attn_mats, "betas": betas,
        "pooled": pooled, "h_global": h_global, "feat": feat,
        "probs": probs, "p_fake": probs[:, 1], "u_hat": u_hat,
        "fuse_slot": fuse_slot,
    }


# ---------------------------------------------------------------------------
# prediction outputs
# ---------------------------------------------------------------------------

@dataclass
class PredictionOutput:
    """Per-sample signals from the classifier (vectorized over the batch)."""

    p_fake: np.ndarray
    conf: np.ndarray
    u_ent: np.ndarray
    u_hat: np.ndarray
    u_comp: np.ndarray


def predictive_entropy(p_fake):
    """-sum_c p_c ln p_c for the two-class distribution, in nats."""
    p = np.clip(np.asarray(p_fake, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    return -(p * np.log(p) + (1.0 - p) * np.log(1.0 - p))


def composite_uncertainty(u_ent, u_hat):
    """Normalized entropy plus the learned scalar; monotone in both."""
    return np.asarray(u_ent, dtype=np.float64) / LN2 + np.asarray(u_hat, dtype=np.float64)


def prediction_output(p_fake, u_hat):
    p_fake = np.asarray(p_fake, dtype=np.float64)
    u_hat = np.asarray(u_hat, dtype=np.float64)
    u_ent = predictive_entropy(p_fake)
    return PredictionOutput(
        p_fake=p_fake,
        conf=np.maximum(p_fake, 1.0 - p_fake),
        u_ent=u_ent,
        u_hat=u_hat,
        u_comp=composite_uncertainty(u_ent, u_hat),
    )


def predict(h_global, c_bundle, params, dropout=0.0):
    """Head-only prediction from a fused representation and score bundle.

    h_global: (B, D); c_bundle: (B, 5) scalars [c_tv, c_ta, c_va, c_global,
    c_temp]. Inference-mode (no dropout) unless a rate is given.
    """
    with T.no_grad():
        feat = T.concat([astensor(h_global), astensor(c_bundle)], axis=-1)
        probs = classifier_head(params, feat, train=False, dropout=dropout)
        u_hat = uncertainty_head(params, feat)
    return prediction_output(probs.data[:, 1], u_hat.data)


def uncertainty_target_loss(u_hat, p_fake, y, target=None):
    """Squared error of u_hat against the stop-gradient margin |y - p_fake|.

    The margin is always a constant w.r.t. the tape; `target` overrides it.
    """
    u_hat = astensor(u_hat)
    if target is None:
        target = np.abs(
            np.asarray(y, dtype=np.float64)
            - np.asarray(p_fake.data if isinstance(p_fake, Tensor) else p_fake, dtype=np.float64)
        )
    diff = T.sub(u_hat, Tensor(np.asarray(target), dtype=u_hat.dtype))
    return T.mean_(T.mul(diff, diff))


# ---------------------------------------------------------------------------
# batched inference
# ---------------------------------------------------------------------------

def run_detector(params, records, cfg: DetectorConfig, batch_size=256, ablate=frozenset()):
    """Inference over records (grouped by shape). Returns per-sample dict lists.

    Output order follows the input record order.
    """
    groups = {}
    for idx, r in enumerate(records):
        key = (r.text_tokens.shape, r.visual_frames.shape, r.audio_frames.shape)
        groups.setdefault(key, []).append(idx)

    results = [None] * len(records)
    for idxs in groups.values():
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo : lo + batch_size]
            batch = records_to_batch([records[i] for i in chunk])
            with T.no_grad():
                out = detector_forward(params, batch, cfg, train=False, ablate=ablate)
            pred = prediction_output(out["p_fake"].data, out["u_hat"].data)
            for row, i in enumerate(chunk):
                results[i] = {
                    "id": batch["ids"][row],
                    "label": int(batch["labels"][row]),
                    "p_fake": float(pred.p_fake[row]),
                    "conf": float(pred.conf[row]),
                    "u_ent": float(pred.u_ent[row]),
                    "u_hat": float(pred.u_hat[row]),
                    "u_comp": float(pred.u_comp[row]),
                    "c_tv": float(out["c_tv"].data[row]),
                    "c_ta": float(out["c_ta"].data[row]),
                    "c_va": float(out["c_va"].data[row]),
                    "c_global": float(out["c_global"].data[row]),
                    "c_temp": float(out["c_temp"].data[row]),
                }
    return results
