"""Training loop: AdamW, linear warmup + cosine decay, early stopping on
validation macro-F1, full per-epoch loss/metric history."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import consistency as cons
from . import fusion
from . import losses as L
from . import model as M
from . import tensor as T
from .checkpoint import flatten_params
from .metrics import classification_metrics
from .tensor import Tensor


class NumericalError(RuntimeError):
    """A loss component went non-finite during training."""


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 32
    epochs: int = 50
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    noise_scale: float = 0.01
    patience: int = 10
    seed: int = 7

    def validate(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ValueError(f"batch size must be >= 2 for contrastive terms, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not (0.0 <= self.warmup_ratio < 1.0):
            raise ValueError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def lr_at_step(step, total_steps, base_lr, warmup_ratio):
    """Linear warmup to base_lr over the first warmup fraction, then cosine to 0."""
    warmup_steps = int(round(total_steps * warmup_ratio))
    if step < warmup_steps:
        return base_lr * step / max(warmup_steps, 1)
    remaining = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / remaining
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def batch_losses(params, batch, cfg, weights: L.LossWeights, train_cfg: TrainConfig,
                 step_seed, train=True, ablate=frozenset(),
                 disabled=frozenset(), adv_delta=None, unc_target=None):
    """Forward pass plus every loss component on one stacked batch.

    `disabled` names loss parts forced to zero weight (their computation is
    skipped entirely so disabling one cannot perturb another). `adv_delta`
    and `unc_target` pin the perturbation / regression target (both are
    constants w.r.t. the tape either way; pinning makes the whole composite
    a fixed differentiable function for gradient checking).
    Returns (parts dict of scalar Tensors, forward-output dict).
    """
    out = M.detector_forward(
        params, batch, cfg, train=train, seed=step_seed, ablate=ablate
    )
    y = batch["labels"]
    parts = {"ce": L.loss_ce(out["p_fake"], y)}

    def enabled(name, weight):
        return name not in disabled and weight > 0

    if enabled("intra", weights.intra):
        term = T.add(
            L.loss_infonce(out["h_fuse"], out["h_vis"], weights.tau),
            L.loss_infonce(out["h_fuse"], out["h_aud"], weights.tau),
        )
        rew_terms = [
            L.loss_infonce(out["h_text"], h_rew, weights.tau) for h_rew in out["h_rews"]
        ]
        rew_sum = rew_terms[0]
        for t in rew_terms[1:]:
            rew_sum = T.add(rew_sum, t)
        parts["intra"] = T.add(term, T.mul(rew_sum, 1.0 / len(rew_terms)))

    if enabled("cross", weights.cross):
        cp = params["contrast"]
        zu = T.matmul(out["h_fuse"], cp["cross_u"])
        zv = T.matmul(out["h_global"], cp["cross_v"])
        parts["cross"] = L.loss_infonce(zu, zv, weights.tau)

    if enabled("adv", weights.adv):
        head = lambda f: M.classifier_head(
            params, f, train=train, seed=step_seed, dropout=cfg.dropout
        )
        parts["adv"] = L.loss_adv(
            head, out["feat"], train_cfg.noise_scale, step_seed + 1, delta=adv_delta
        )

    if enabled("sem", weights.sem):
        # rerun the global stage with the original text vector in the fuse slot
        fuse_slot_orig = T.linear(out["h_text"], params["hmt"]["fuse_w"], params["hmt"]["fuse_b"])
        h_global_orig = fusion.global_aggregate(
            [out["pooled"]["text"], out["pooled"]["vis"], out["pooled"]["aud"], fuse_slot_orig],
            params["hmt"], cfg.n_heads,
        )
        scalars = out["feat"][:, cfg.hidden_dim:]
        feat_orig = T.concat([h_global_orig, scalars], axis=-1)
        p_orig = M.classifier_head(params, feat_orig, train=train, seed=step_seed, dropout=cfg.dropout)
        parts["sem"] = L.loss_sem(p_orig, out["probs"])

    if enabled("style", weights.style):
        sp = params["contrast"]["style_w"]
        views = [T.matmul(out["h_text"], sp)] + [T.matmul(h, sp) for h in out["h_rews"]]
        stacked = T.concat([T.reshape(v, (v.shape[0], 1, v.shape[1])) for v in views], axis=-2)
        parts["style"] = L.loss_style(stacked, weights.tau)

    if enabled("reg", weights.reg):
        c_scores = {"tv": out["c_tv"], "ta": out["c_ta"], "va": out["c_va"]}
        fields = {
            "tv": out["fields"][("text", "vis")],
            "ta": out["fields"][("text", "aud")],
            "va": out["fields"][("vis", "aud")],
        }
        parts["reg"] = cons.field_alignment_loss(c_scores, fields)

    if enabled("unc", weights.unc):
        parts["unc"] = M.uncertainty_target_loss(out["u_hat"], out["p_fake"], y, target=unc_target)

    return parts, out


def evaluate(params, records, cfg, batch_size=256):
    """Accuracy / macro-F1 of argmax predictions over a record list."""
    preds = M.run_detector(params, records, cfg, batch_size=batch_size)
    y_true = [p["label"] for p in preds]
    y_pred = [1 if p["p_fake"] > 0.5 else 0 for p in preds]
    return classification_metrics(y_pred, y_true)


def _clone_params(params):
    return {
        mod: {name: Tensor(t.data.copy(), requires_grad=True) for name, t in group.items()}
        for mod, group in params.items()
    }


def train(train_records, val_records, cfg: M.DetectorConfig, train_cfg: TrainConfig,
          weights: L.LossWeights, params=None, ablate=frozenset(), disabled=frozenset(),
          quiet=True, log_fn=None):
    """Train the detector head; returns (best_params, history).

    history: per-epoch dicts with every loss component (epoch means), the lr
    at the end of the epoch, and validation accuracy / macro-F1. Keeps the
    checkpoint with the best validation macro-F1.
    """
    train_cfg.validate()
    weights.validate()
    if not train_records or not val_records:
        raise ValueError("train: train and validation sets must be non-empty")

    if params is None:
        params = M.init_params(cfg, seed=train_cfg.seed)
    flat = flatten_params(params)
    opt = T.AdamW(flat, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)

    n = len(train_records)
    steps_per_epoch = max(n // train_cfg.batch_size, 1)
    total_steps = steps_per_epoch * train_cfg.epochs
    rng = np.random.default_rng(train_cfg.seed)

    history = []
    best = {"macro_f1": -1.0, "epoch": -1, "params": None}
    step = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        sums = dict.fromkeys(L.PART_NAMES, 0.0)
        sums["total"] = 0.0
        counted = dict.fromkeys(L.PART_NAMES, 0)
        for b in range(steps_per_epoch):
            idxs = order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
            batch = M.records_to_batch([train_records[i] for i in idxs])
            step_seed = train_cfg.seed * 1_000_003 + step
            parts, _ = batch_losses(
                params, batch, cfg, weights, train_cfg, step_seed,
                train=True, ablate=ablate, disabled=disabled,
            )
            for name, tensor_val in parts.items():
                val = float(tensor_val.data)
                if not math.isfinite(val):
                    raise NumericalError(
                        f"loss component {name!r} became non-finite at step {step}"
                    )
                sums[name] += val
                counted[name] += 1
            total = L.total_loss(parts, weights)
            sums["total"] += float(total.data)

            opt.zero_grad()
            T.backward(total)
            lr = lr_at_step(step, total_steps, train_cfg.lr, train_cfg.warmup_ratio)
            if lr > 0:
                opt.step(lr=lr)
            step += 1

        val_metrics = evaluate(params, val_records, cfg)
        row = {"epoch": epoch, "lr": lr_at_step(step, total_steps, train_cfg.lr, train_cfg.warmup_ratio)}
        for name in L.PART_NAMES:
            if counted[name]:
                row[f"loss_{name}"] = sums[name] / counted[name]
        row["loss_total"] = sums["total"] / steps_per_epoch
        row["val_accuracy"] = val_metrics["accuracy"]
        row["val_macro_f1"] = val_metrics["macro_f1"]
        history.append(row)
        if log_fn is not None:
            log_fn(row)
        elif not quiet:
            print(
                f"epoch {epoch}: loss {row['loss_total']:.4f} "
                f"val acc {row['val_accuracy']:.4f} val mf1 {row['val_macro_f1']:.4f}"
            )

        if val_metrics["macro_f1"] > best["macro_f1"]:
            best = {
                "macro_f1": val_metrics["macro_f1"],
                "epoch": epoch,
                "params": _clone_params(params),
            }
        elif epoch - best["epoch"] >= train_cfg.patience:
            break

    return best["params"], history
