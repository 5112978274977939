"""Evaluation statistics: classification metrics, rank AUC, Welch tests,
correlation analyses, quantile fake rates, style-variance bootstrap, and
confidence calibration."""

from __future__ import annotations

import csv
import io
import warnings

import numpy as np
from scipy import stats as sps

from .ioutil import atomic_write_text

CONSISTENCY_SCORES = ("c_tv", "c_ta", "c_va", "c_global", "c_temp")


def classification_metrics(preds, labels):
    """Accuracy, macro-F1 and per-class precision/recall for binary labels.

    Zero-division precision/recall yields 0 with a warning; a single-class
    label set flags the macro-F1 as degenerate.
    """
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.size == 0:
        raise ValueError("classification_metrics: empty input")
    if preds.shape != labels.shape:
        raise ValueError(f"classification_metrics: {preds.shape} vs {labels.shape}")

    degenerate = len(np.unique(labels)) < 2
    if degenerate:
        warnings.warn("labels contain a single class; macro-F1 is degenerate", stacklevel=2)

    per_class = {}
    f1s = []
    for c in (0, 1):
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        if tp + fp == 0:
            warnings.warn(f"class {c}: no predictions, precision set to 0", stacklevel=2)
            prec = 0.0
        else:
            prec = tp / (tp + fp)
        if tp + fn == 0:
            warnings.warn(f"class {c}: no true samples, recall set to 0", stacklevel=2)
            rec = 0.0
        else:
            rec = tp / (tp + fn)
        f1 = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
        per_class[c] = {"precision": prec, "recall": rec, "f1": f1}
        f1s.append(f1)

    return {
        "accuracy": float((preds == labels).mean()),
        "macro_f1": float(np.mean(f1s)),
        "per_class": per_class,
        "degenerate": degenerate,
    }


def auc(scores, labels):
    """Rank-based (Mann-Whitney) AUC; ties contribute 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc: both classes must be present")
    ranks = sps.rankdata(scores)  # average ranks for ties
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def welch_ttest(a, b):
    """Welch's unequal-variance t-test; returns (t, two-sided p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("welch_ttest: each sample needs >= 2 values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = a.size, b.size
    denom_sq = va / na + vb / nb
    diff = a.mean() - b.mean()
    if denom_sq == 0.0:
        return (0.0, 1.0) if diff == 0.0 else (np.inf if diff > 0 else -np.inf, 0.0)
    t = diff / np.sqrt(denom_sq)
    df = denom_sq**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * sps.t.sf(abs(t), df)
    return float(t), float(p)


def _average_ranks(x):
    return sps.rankdata(np.asarray(x, dtype=np.float64))


def pearson_r(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        return None
    return float((xc * yc).sum() / denom)


def spearman_rho(x, y):
    """Spearman rank correlation via average-rank Pearson."""
    return pearson_r(_average_ranks(x), _average_ranks(y))


def correlation_analysis(c_global, p_fake):
    """Spearman rho, Pearson r and least-squares R^2 of p_fake on c_global.

    Reported on raw per-sample pairs and on decile-aggregated means (the
    aggregation smooths per-sample noise; both views are returned). Constant
    input yields {"defined": False}.
    """
    x = np.asarray(c_global, dtype=np.float64)
    y = np.asarray(p_fake, dtype=np.float64)
    if x.size < 3:
        raise ValueError(f"correlation_analysis: need >= 3 pairs, got {x.size}")

    def analyze(xv, yv):
        r = pearson_r(xv, yv)
        if r is None:
            return {"defined": False}
        rho = spearman_rho(xv, yv)
        slope, intercept = np.polyfit(xv, yv, 1)
        resid = yv - (slope * xv + intercept)
        ss_tot = ((yv - yv.mean()) ** 2).sum()
        r2 = 1.0 - float((resid**2).sum() / ss_tot) if ss_tot > 0 else 0.0
        return {"defined": True, "spearman_rho": rho, "pearson_r": r, "r2": r2}

    raw = analyze(x, y)
    order = np.argsort(x, kind="stable")
    out = {"raw": raw}
    if x.size >= 10:
        bins = np.array_split(order, 10)
        bx = np.array([x[b].mean() for b in bins])
        by = np.array([y[b].mean() for b in bins])
        out["decile_binned"] = analyze(bx, by)
    return out


def quantile_fake_rates(c_global, labels, k=5):
    """Fake rate per equal-count quantile bin, ordered by ascending c_global."""
    x = np.asarray(c_global, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if x.size < k:
        raise ValueError(f"quantile_fake_rates: need >= {k} samples, got {x.size}")
    order = np.argsort(x, kind="stable")
    return [float(labels[idx].mean()) for idx in np.array_split(order, k)]


def style_variance_report(view_scores, labels, n_boot=10_000, seed=0):
    """Cross-view score variance per class, with a one-sided bootstrap test.

    view_scores: {score_name: (N, n_views) array of per-view scores}.
    Tests fake-mean-variance > real-mean-variance via n_boot resamples.
    """
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    report = {}
    for name, mat in view_scores.items():
        mat = np.asarray(mat, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[1] < 2:
            raise ValueError(f"style_variance_report: {name} needs >= 2 views per sample")
        per_sample = mat.var(axis=1)  # population variance across views
        real = per_sample[labels == 0]
        fake = per_sample[labels == 1]
        entry = {
            "real_var": float(real.mean()) if real.size else None,
            "fake_var": float(fake.mean()) if fake.size else None,
        }
        if real.size and fake.size:
            observed = fake.mean() - real.mean()
            boots = np.empty(n_boot)
            for i in range(n_boot):
                rb = real[rng.integers(0, real.size, real.size)].mean()
                fb = fake[rng.integers(0, fake.size, fake.size)].mean()
                boots[i] = fb - rb
            entry["diff"] = float(observed)
            entry["p_fake_gt_real"] = float((1 + (boots <= 0.0).sum()) / (n_boot + 1))
        report[name] = entry
    return report


def calibration_bins(conf, correct, nbins=10):
    """Equal-width confidence bins over [0.5, 1] with expected calibration error."""
    conf = np.asarray(conf, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if conf.size and (conf.min() < 0.5 or conf.max() > 1.0):
        raise ValueError("calibration_bins: confidences must lie in [0.5, 1]")
    width = 0.5 / nbins
    idx = np.clip(((conf - 0.5) / width).astype(int), 0, nbins - 1)
    bins = []
    ece = 0.0
    n = conf.size
    for b in range(nbins):
        mask = idx == b
        count = int(mask.sum())
        mid = 0.5 + (b + 0.5) * width
        if count:
            acc = float(correct[mask].mean())
            avg_conf = float(conf[mask].mean())
            ece += count / n * abs(acc - avg_conf)
        else:
            acc = None
            avg_conf = None
        bins.append({"midpoint": mid, "accuracy": acc, "mean_conf": avg_conf, "count": count})
    return {"bins": bins, "ece": float(ece)}


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

def build_report(preds, view_scores=None, k_quantiles=5, nbins=10, seed=0):
    """Full evaluation report from per-sample prediction rows.

    preds: list of dicts with at least label, p_fake, conf and the
    consistency scores. Deterministic given inputs.
    """
    labels = np.asarray([p["label"] for p in preds], dtype=int)
    p_fake = np.asarray([p["p_fake"] for p in preds], dtype=np.float64)
    conf = np.asarray([p["conf"] for p in preds], dtype=np.float64)
    y_pred = (p_fake > 0.5).astype(int)

    report = {"n": len(preds)}
    report.update(classification_metrics(y_pred, labels))
    report["auc"] = auc(p_fake, labels) if len(np.unique(labels)) == 2 else None
    report["calibration"] = calibration_bins(np.minimum(conf, 1.0 - 1e-12), y_pred == labels, nbins)

    consistency = {}
    for name in CONSISTENCY_SCORES:
        if name not in preds[0]:
            continue
        vals = np.asarray([p[name] for p in preds], dtype=np.float64)
        real, fake = vals[labels == 0], vals[labels == 1]
        entry = {
            "real_mean": float(real.mean()) if real.size else None,
            "real_std": float(real.std()) if real.size else None,
            "fake_mean": float(fake.mean()) if fake.size else None,
            "fake_std": float(fake.std()) if fake.size else None,
        }
        if real.size >= 2 and fake.size >= 2:
            t, pv = welch_ttest(real, fake)
            entry["welch_t"] = t
            entry["welch_p"] = pv
        consistency[name] = entry
    report["consistency_by_class"] = consistency

    if "c_global" in preds[0]:
        c_global = np.asarray([p["c_global"] for p in preds], dtype=np.float64)
        report["correlation"] = correlation_analysis(c_global, p_fake)
        report["quantile_fake_rates"] = quantile_fake_rates(c_global, labels, k=k_quantiles)

    if view_scores is not None:
        report["style_variance"] = style_variance_report(view_scores, labels, seed=seed)
    return report


def _csv_text(rows, fieldnames):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def write_plot_data(preds, outdir, decisions=None):
    """CSV exports for external plotting: score distributions, the global
    consistency vs fake-probability scatter, and routed-subset splits."""
    import os

    rows = []
    for p in preds:
        row = {"id": p["id"], "label": p["label"]}
        for name in CONSISTENCY_SCORES:
            if name in p:
                row[name] = p[name]
        rows.append(row)
    fields = ["id", "label"] + [n for n in CONSISTENCY_SCORES if n in preds[0]]
    atomic_write_text(os.path.join(outdir, "score_distributions.csv"), _csv_text(rows, fields))

    rows = [
        {
            "id": p["id"],
            "c_global": p.get("c_global"),
            "p_fake": p["p_fake"],
            "u_ent": p["u_ent"],
            "correct": int((p["p_fake"] > 0.5) == bool(p["label"])),
        }
        for p in preds
    ]
    atomic_write_text(
        os.path.join(outdir, "consistency_scatter.csv"),
        _csv_text(rows, ["id", "c_global", "p_fake", "u_ent", "correct"]),
    )

    if decisions is not None:
        by_id = {p["id"]: p for p in preds}
        rows = []
        for d in decisions:
            p = by_id[d.id]
            rows.append(
                {
                    "id": d.id,
                    "strategy": d.strategy,
                    "score": d.score,
                    "routed": int(d.routed),
                    "stage1_correct": int((p["p_fake"] > 0.5) == bool(p["label"])),
                }
            )
        atomic_write_text(
            os.path.join(outdir, "routing_splits.csv"),
            _csv_text(rows, ["id", "strategy", "score", "routed", "stage1_correct"]),
        )
