"""Synthetic feature corpus with controllable cross-modal alignment.

The construction plants the class structure the detector is meant to find:

* the text embedding carries two orthogonal semantic components, one that
  visuals can agree with and one that audio can agree with;
* visual frames mix the text's visual component against an unrelated topic
  with a per-sample weight drawn from the class's target (mean, std), so a
  linear probe on the pooled visual embedding recovers the planted weight;
* audio frames do the same against the text's audio component (targets are
  flipped between classes, which is what makes the corpus asymmetric);
* visual and audio share a common rhythmic latent, so visual-audio alignment
  is high for both classes and carries no label signal;
* rewrite views shift the text along fixed style directions, with a larger
  shift magnitude for fake samples.

One salient "keyframe" per visual clip (and a few salient audio steps) carries
the semantic mix; the remaining frames are low-amplitude background, so
attention over frames has something to find.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .container import FeatureRecord, N_REWRITES


@dataclass
class SyntheticSpec:
    """Targets and sizes for one generated corpus."""

    # per-class (mean, std) targets for the planted alignment weights,
    # defaults shaped like the observed real/fake asymmetry
    real_tv: tuple = (0.82, 0.32)
    real_ta: tuple = (0.50, 0.20)
    real_va: tuple = (0.89, 0.02)
    fake_tv: tuple = (0.16, 0.27)
    fake_ta: tuple = (0.88, 0.13)
    fake_va: tuple = (0.89, 0.02)
    n_real: int = 1400
    n_fake: int = 1400
    d: int = 32
    text_len: int = 16
    n_frames: int = 8
    n_audio: int = 24
    seed: int = 7
    # style-rewrite offset scale per class; fake > real drives the
    # cross-view variance asymmetry
    style_spread_real: float = 0.25
    style_spread_fake: float = 0.60

    def validate(self):
        for name in ("real_tv", "real_ta", "real_va", "fake_tv", "fake_ta", "fake_va"):
            mean, std = getattr(self, name)
            if not (0.0 <= mean <= 1.0):
                raise ValueError(f"{name}: mean {mean} outside [0, 1]")
            if std <= 0:
                raise ValueError(f"{name}: std must be positive, got {std}")
        if self.n_real < 0 or self.n_fake < 0 or self.n_real + self.n_fake == 0:
            raise ValueError(f"need at least one sample, got n_real={self.n_real} n_fake={self.n_fake}")
        if self.d < 8:
            raise ValueError(f"feature dim must be >= 8 to host the planted directions, got {self.d}")
        if self.text_len < 1 or self.n_frames < 1 or self.n_audio < 2:
            raise ValueError(
                f"invalid sequence lengths L_t={self.text_len} K={self.n_frames} T={self.n_audio}"
            )

    def to_dict(self):
        return {
            k: list(v) if isinstance(v, tuple) else v
            for k, v in self.__dict__.items()
        }

    @classmethod
    def from_dict(cls, data):
        kwargs = dict(data)
        for k in ("real_tv", "real_ta", "real_va", "fake_tv", "fake_ta", "fake_va"):
            if k in kwargs:
                kwargs[k] = tuple(kwargs[k])
        return cls(**kwargs)


_AV_AMPLITUDE = 1.5
_KEY_SALIENCE = 3.0
_BG_SALIENCE = 0.3
_N_AUDIO_SALIENT = 3


def _noise(rng, shape, scale, d):
    return rng.standard_normal(shape) * (scale / np.sqrt(d))


def generate_synthetic(spec: SyntheticSpec):
    """Generate a corpus of FeatureRecords; deterministic given spec.seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d = spec.d

    # orthonormal planted directions
    basis, _ = np.linalg.qr(rng.standard_normal((d, 8)))
    u_vis, u_aud, o_vis, o_aud, g_av = (basis[:, i] for i in range(5))
    style_dirs = [basis[:, 5 + v] for v in range(N_REWRITES)]
    text_base = (u_vis + u_aud) / np.sqrt(2.0)

    n = spec.n_real + spec.n_fake
    labels = np.concatenate([np.zeros(spec.n_real, dtype=int), np.ones(spec.n_fake, dtype=int)])
    labels = labels[rng.permutation(n)]

    targets = {
        0: (spec.real_tv, spec.real_ta, spec.real_va),
        1: (spec.fake_tv, spec.fake_ta, spec.fake_va),
    }
    spreads = {0: spec.style_spread_real, 1: spec.style_spread_fake}

    clipped = 0
    records = []
    for i in range(n):
        y = int(labels[i])
        (m_tv, s_tv), (m_ta, s_ta), (m_va, s_va) = targets[y]
        raw = rng.normal([m_tv, m_ta, m_va], [s_tv, s_ta, s_va])
        mix = np.clip(raw, 0.0, 1.0)
        clipped += int((raw != mix).sum())

        jitter = _noise(rng, d, 0.15, d)
        text = text_base + jitter + _noise(rng, (spec.text_len, d), 0.25, d)

        theta = rng.uniform(0.0, 2.0 * np.pi)
        key = rng.integers(spec.n_frames)
        # unit-norm cores: keeps modality magnitudes label-free so only the
        # direction (the mixing weight) carries class signal
        core_v = mix[0] * u_vis + (1.0 - mix[0]) * o_vis
        core_v /= np.linalg.norm(core_v)
        sal_v = np.full(spec.n_frames, _BG_SALIENCE)
        sal_v[key] = _KEY_SALIENCE
        phase_v = 1.0 + 0.5 * np.sin(2.0 * np.pi * np.arange(spec.n_frames) / spec.n_frames + theta)
        visual = (
            sal_v[:, None] * core_v[None, :]
            + (_AV_AMPLITUDE * mix[2]) * phase_v[:, None] * g_av[None, :]
            + _noise(rng, (spec.n_frames, d), 0.3, d)
        )

        core_a = mix[1] * u_aud + (1.0 - mix[1]) * o_aud
        core_a /= np.linalg.norm(core_a)
        sal_a = np.full(spec.n_audio, _BG_SALIENCE)
        sal_a[rng.choice(spec.n_audio, _N_AUDIO_SALIENT, replace=False)] = _KEY_SALIENCE
        phase_a = 1.0 + 0.5 * np.sin(2.0 * np.pi * np.arange(spec.n_audio) / spec.n_audio + theta)
        audio = (
            sal_a[:, None] * core_a[None, :]
            + (_AV_AMPLITUDE * mix[2]) * phase_a[:, None] * g_av[None, :]
            + _noise(rng, (spec.n_audio, d), 0.3, d)
        )

        rewrites = []
        for v in range(N_REWRITES):
            delta = spreads[y] * (0.5 + abs(rng.standard_normal()))
            rewrites.append(
                (text + delta * style_dirs[v][None, :] + _noise(rng, (spec.text_len, d), 0.05, d))
                .astype(np.float32)
            )

        records.append(
            FeatureRecord(
                id=f"synth-{i:05d}",
                label=y,
                timestamp=i,
                text_tokens=text.astype(np.float32),
                rewrite_tokens=rewrites,
                visual_frames=visual.astype(np.float32),
                audio_frames=audio.astype(np.float32),
            )
        )

    frac = clipped / (3 * n)
    if frac > 0.20:
        warnings.warn(
            f"synthetic targets clipped {100 * frac:.1f}% of alignment draws to [0, 1]; "
            "requested means/stds are partly infeasible",
            stacklevel=2,
        )
    return records


def _cos(a, b):
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def alignment_proxies(records):
    """Cosine alignments of pooled modality embeddings, per record.

    Returns dict of arrays: labels, tv, ta, va. This is the measurement the
    generator's class structure is planted against (not a model output).
    """
    labels, tv, ta, va = [], [], [], []
    for r in records:
        ht = r.text_tokens.mean(axis=0)
        hv = r.visual_frames.mean(axis=0)
        ha = r.audio_frames.mean(axis=0)
        labels.append(r.label)
        tv.append(_cos(ht, hv))
        ta.append(_cos(ht, ha))
        va.append(_cos(hv, ha))
    return {
        "labels": np.asarray(labels),
        "tv": np.asarray(tv),
        "ta": np.asarray(ta),
        "va": np.asarray(va),
    }
