import numpy as np
import pytest
from scipy import stats

from crossmod.synthetic import SyntheticSpec, alignment_proxies, generate_synthetic


def small_spec(**kw):
    base = dict(n_real=250, n_fake=250, d=16, text_len=6, n_frames=4, n_audio=8, seed=11)
    base.update(kw)
    return SyntheticSpec(**base)


def test_proxy_ordering_matches_planted_asymmetry():
    recs = generate_synthetic(SyntheticSpec(n_real=1000, n_fake=1000, seed=3))
    prox = alignment_proxies(recs)
    real = prox["labels"] == 0
    assert prox["tv"][real].mean() > prox["tv"][~real].mean()
    assert prox["ta"][~real].mean() > prox["ta"][real].mean()


def test_welch_significance_pattern():
    recs = generate_synthetic(SyntheticSpec(n_real=500, n_fake=500, seed=5))
    prox = alignment_proxies(recs)
    real = prox["labels"] == 0
    p_tv = stats.ttest_ind(prox["tv"][real], prox["tv"][~real], equal_var=False).pvalue
    p_ta = stats.ttest_ind(prox["ta"][real], prox["ta"][~real], equal_var=False).pvalue
    p_va = stats.ttest_ind(prox["va"][real], prox["va"][~real], equal_var=False).pvalue
    assert p_tv < 0.01
    assert p_ta < 0.01
    assert p_va > 0.05


def test_all_real_when_no_fakes():
    recs = generate_synthetic(small_spec(n_fake=0))
    assert all(r.label == 0 for r in recs)


def test_same_seed_bitwise_identical():
    a = generate_synthetic(small_spec(seed=42))
    b = generate_synthetic(small_spec(seed=42))
    assert all(x == y for x, y in zip(a, b))
    c = generate_synthetic(small_spec(seed=43))
    assert any(not (x == y) for x, y in zip(a, c))


def test_timestamps_sequential_and_ids_unique():
    recs = generate_synthetic(small_spec())
    assert [r.timestamp for r in recs] == list(range(len(recs)))
    assert len({r.id for r in recs}) == len(recs)


def test_infeasible_targets_warn_and_clip():
    spec = small_spec(real_tv=(0.95, 0.5), fake_tv=(0.05, 0.5))
    with pytest.warns(UserWarning, match="clipped"):
        generate_synthetic(spec)


def test_rewrites_shift_fake_more_than_real():
    recs = generate_synthetic(small_spec(seed=8))
    shifts = {0: [], 1: []}
    for r in recs:
        base = r.text_tokens.mean(axis=0)
        for rw in r.rewrite_tokens:
            shifts[r.label].append(np.linalg.norm(rw.mean(axis=0) - base))
    assert np.mean(shifts[1]) > 1.5 * np.mean(shifts[0])


def test_invalid_specs_rejected():
    with pytest.raises(ValueError, match="mean"):
        SyntheticSpec(real_tv=(1.2, 0.1)).validate()
    with pytest.raises(ValueError, match="std"):
        SyntheticSpec(real_ta=(0.5, 0.0)).validate()
    with pytest.raises(ValueError, match="at least one sample"):
        SyntheticSpec(n_real=0, n_fake=0).validate()
    with pytest.raises(ValueError, match="feature dim"):
        SyntheticSpec(d=4).validate()


def test_spec_dict_roundtrip():
    spec = small_spec(seed=19)
    again = SyntheticSpec.from_dict(spec.to_dict())
    assert again == spec
