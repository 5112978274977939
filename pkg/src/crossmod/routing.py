"""Two-stage inference: escalate the hardest fraction of samples to a
pluggable stage-2 verdict provider and evaluate the combined system."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .metrics import classification_metrics

STRATEGIES = ("entropy", "difficulty")


@dataclass
class RoutingDecision:
    id: str
    strategy: str
    score: float
    routed: bool
    final_label_source: str  # "stage1" | "stage2"


@dataclass
class NormRanges:
    """Min-max ranges fit on validation scores, frozen for test-time use."""

    u_ent: tuple
    c_global: tuple
    conf: tuple

    @classmethod
    def fit(cls, preds):
        def rng(key):
            vals = [p[key] for p in preds]
            return (min(vals), max(vals))

        return cls(u_ent=rng("u_ent"), c_global=rng("c_global"), conf=rng("conf"))

    def to_dict(self):
        return {"u_ent": list(self.u_ent), "c_global": list(self.c_global), "conf": list(self.conf)}

    @classmethod
    def from_dict(cls, d):
        return cls(u_ent=tuple(d["u_ent"]), c_global=tuple(d["c_global"]), conf=tuple(d["conf"]))


def _norm(value, lo_hi):
    lo, hi = lo_hi
    if hi - lo < 1e-9:
        return 0.0
    return float(np.clip((value - lo) / (hi - lo), 0.0, 1.0))


def difficulty_score(pred, norms: NormRanges):
    """Normalized entropy + inverted consistency + inverted confidence, in [0, 3]."""
    return (
        _norm(pred["u_ent"], norms.u_ent)
        + (1.0 - _norm(pred["c_global"], norms.c_global))
        + (1.0 - _norm(pred["conf"], norms.conf))
    )


def strategy_scores(preds, strategy, norms=None):
    if strategy == "entropy":
        return [float(p["u_ent"]) for p in preds]
    if strategy == "difficulty":
        if norms is None:
            raise ValueError("difficulty strategy needs validation-fit norm ranges")
        return [difficulty_score(p, norms) for p in preds]
    raise ValueError(f"unknown routing strategy {strategy!r}; expected one of {STRATEGIES}")


def tune_threshold(val_scores, target_ratio):
    """(1 - target_ratio) quantile of validation scores.

    Samples scoring strictly above the threshold get routed, so applying the
    threshold back to the validation set routes ~target_ratio of it.
    """
    if len(val_scores) == 0:
        raise ValueError("tune_threshold: empty score list")
    if not (0.0 < target_ratio < 1.0):
        raise ValueError(f"tune_threshold: ratio must be in (0, 1), got {target_ratio}")
    s = np.sort(np.asarray(val_scores, dtype=np.float64))
    k = math.ceil((1.0 - target_ratio) * s.size)
    k = min(max(k, 1), s.size)
    return float(s[k - 1])


def route(preds, strategy, threshold, norms=None):
    """Routing decisions: routed iff score > threshold (ties stay local)."""
    scores = strategy_scores(preds, strategy, norms)
    return [
        RoutingDecision(
            id=p["id"],
            strategy=strategy,
            score=float(score),
            routed=bool(score > threshold),
            final_label_source="stage2" if score > threshold else "stage1",
        )
        for p, score in zip(preds, scores)
    ]


# ---------------------------------------------------------------------------
# stage-2 verdict providers
# ---------------------------------------------------------------------------

class SyntheticOracle:
    """Stand-in for an expensive stage-2 detector: correct with probability
    `accuracy`, decided per-id by a seeded hash so verdicts are stable across
    runs and independent of query order."""

    def __init__(self, accuracy, seed):
        if not (0.0 <= accuracy <= 1.0):
            raise ValueError(f"oracle accuracy must be in [0, 1], got {accuracy}")
        self.accuracy = accuracy
        self.seed = seed

    def _uniform(self, sample_id):
        digest = hashlib.sha256(f"{self.seed}:{sample_id}".encode()).digest()
        return int.from_bytes(digest[:8], "big") / 2**64

    def verdict(self, sample_id, true_label):
        correct = self._uniform(sample_id) < self.accuracy
        return int(true_label) if correct else 1 - int(true_label)


class ReplayProvider:
    """Verdicts replayed from a JSON-lines file of {id, verdict}."""

    def __init__(self, path):
        self.verdicts = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                self.verdicts[row["id"]] = int(row["verdict"])

    def verdict(self, sample_id, true_label):
        if sample_id not in self.verdicts:
            raise KeyError(f"replay provider has no verdict for routed id {sample_id!r}")
        return self.verdicts[sample_id]


def parse_provider(spec):
    """Provider spec: 'synthetic:<accuracy>:<seed>' or 'replay:<path>'."""
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        acc_s, _, seed_s = rest.partition(":")
        if not acc_s or not seed_s:
            raise ValueError(f"synthetic provider spec needs accuracy and seed, got {spec!r}")
        return SyntheticOracle(float(acc_s), int(seed_s))
    if kind == "replay":
        if not rest:
            raise ValueError("replay provider spec needs a file path")
        return ReplayProvider(rest)
    raise ValueError(f"unknown provider kind {kind!r}; expected synthetic or replay")


# ---------------------------------------------------------------------------
# combined evaluation
# ---------------------------------------------------------------------------

def two_stage_eval(preds, decisions, provider):
    """Metrics for stage-1-only vs the two-stage system.

    Returns a dict with both metric sets, the routed fraction, and stage-1
    accuracy on the routed vs non-routed subsets.
    """
    by_id = {d.id: d for d in decisions}
    labels, stage1, final, routed_mask = [], [], [], []
    for p in preds:
        d = by_id[p["id"]]
        y = int(p["label"])
        s1 = 1 if p["p_fake"] > 0.5 else 0
        labels.append(y)
        stage1.append(s1)
        routed_mask.append(d.routed)
        final.append(provider.verdict(p["id"], y) if d.routed else s1)

    labels = np.asarray(labels)
    stage1 = np.asarray(stage1)
    final = np.asarray(final)
    routed_mask = np.asarray(routed_mask, dtype=bool)

    out = {
        "stage1": classification_metrics(stage1, labels),
        "two_stage": classification_metrics(final, labels),
        "routed_fraction": float(routed_mask.mean()),
        "n_routed": int(routed_mask.sum()),
    }
    if routed_mask.any():
        out["stage1_acc_routed"] = float((stage1[routed_mask] == labels[routed_mask]).mean())
        out["stage2_acc_routed"] = float((final[routed_mask] == labels[routed_mask]).mean())
    else:
        out["stage1_acc_routed"] = None
        out["stage2_acc_routed"] = None
    if (~routed_mask).any():
        out["stage1_acc_nonrouted"] = float((stage1[~routed_mask] == labels[~routed_mask]).mean())
    else:
        out["stage1_acc_nonrouted"] = None
    return out
