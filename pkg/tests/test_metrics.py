import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cinedx.metrics import (
    UndefinedMetricError, bland_altman, boundary_voxels, confusion_and_accuracy, dice_coef,
    ejection_fraction, hausdorff_mm, mean_sd, pearson, quantify, volume_ml,
)
from cinedx.volume_io import LabelMap


def boundary_oracle(mask):
    out = np.zeros_like(mask)
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[axis] += step
                if not 0 <= n[axis] < mask.shape[axis] or not mask[tuple(n)]:
                    out[idx] = True
    return out


def hausdorff_oracle(a, b, spacing):
    pa = np.argwhere(boundary_oracle(a)) * np.asarray(spacing)
    pb = np.argwhere(boundary_oracle(b)) * np.asarray(spacing)

    def directed(p, q):
        worst = 0.0
        for x in p:
            diff = q - x
            worst = max(worst, float(np.sqrt((diff * diff).sum(axis=1)).min()))
        return worst

    return max(directed(pa, pb), directed(pb, pa))


def random_mask(rng, shape=(5, 8, 8), p=0.3):
    m = rng.random(shape) < p
    if not m.any():
        m[0, 0, 0] = True
    return m


def test_dice_conventions():
    a = np.zeros((2, 2, 2), bool)
    assert dice_coef(a, a) == 1.0
    b = a.copy()
    b[0, 0, 0] = True
    assert dice_coef(a, b) == 0.0
    assert dice_coef(b, b) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = random_mask(rng), random_mask(rng)
    assert dice_coef(a, b) == dice_coef(b, a)
    assert 0 <= dice_coef(a, b) <= 1


def test_boundary_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = random_mask(rng, p=0.6)
        np.testing.assert_array_equal(boundary_voxels(m), boundary_oracle(m))


def test_hausdorff_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(30):
        a, b = random_mask(rng), random_mask(rng)
        sp = tuple(rng.uniform(0.5, 5, 3))
        assert hausdorff_mm(a, b, sp) == hausdorff_oracle(a, b, sp)


def test_hausdorff_identity_and_symmetry():
    rng = np.random.default_rng(2)
    a, b = random_mask(rng), random_mask(rng)
    assert hausdorff_mm(a, a, (1, 1, 1)) == 0.0
    assert hausdorff_mm(a, b, (2, 1, 1)) == hausdorff_mm(b, a, (2, 1, 1))


def test_hausdorff_known_shift():
    a = np.zeros((1, 10, 10), bool)
    a[0, 2:5, 2:5] = True
    b = np.roll(a, 3, axis=2)
    assert hausdorff_mm(a, b, (5, 1.5, 1.5)) == pytest.approx(4.5)


def test_hausdorff_empty_raises():
    a = np.zeros((2, 2, 2), bool)
    with pytest.raises(UndefinedMetricError):
        hausdorff_mm(a, a | True, (1, 1, 1))


def test_volume_exact():
    assert volume_ml(1000, (5, 1.4, 1.4)) == 9.8
    assert volume_ml(0, (5, 1.4, 1.4)) == 0.0


def test_ejection_fraction():
    assert ejection_fraction(100, 50) == 50.0
    with pytest.raises(UndefinedMetricError):
        ejection_fraction(0, 0)


def test_quantify_and_flags():
    ed = np.zeros((1, 10, 10), np.uint8)
    es = ed.copy()
    ed[0, :4, :5] = 3  # 20 LV voxels
    es[0, :2, :5] = 3  # 10
    ed[0, 5:, :2] = 1  # 10 RV
    es[0, 5:, :4] = 1  # 20 -> flagged
    ed[0, 8:, 8:] = 2
    q = quantify(LabelMap(ed, (10, 1, 1)), LabelMap(es, (10, 1, 1)))
    assert q.lv_edv == 0.2 and q.lv_ef == 50.0
    assert q.rv_ef == -100.0 and "rv_esv_exceeds_edv" in q.flags
    assert q.myo_mass_ed == q.myo_edv * 1.05


def test_bland_altman_and_pearson():
    pairs = [(1.0, 2.0), (2.0, 2.5), (3.0, 3.5)]
    ba = bland_altman(pairs)
    d = np.array([1.0, 0.5, 0.5])
    assert ba.bias == pytest.approx(d.mean())
    assert ba.loa_high - ba.bias == pytest.approx(1.96 * d.std(ddof=1))
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(UndefinedMetricError):
        pearson([1, 1, 1], [1, 2, 3])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=20))
def test_pearson_bounded(pairs):
    x, y = zip(*pairs)
    try:
        r = pearson(x, y)
    except UndefinedMetricError:
        return
    assert -1 <= r <= 1 and math.isfinite(r)


def test_confusion_and_mean_sd():
    cm, acc = confusion_and_accuracy(["a", "b", "b"], ["a", "a", "b"], ["a", "b"])
    np.testing.assert_array_equal(cm, [[1, 0], [1, 1]])
    assert acc == pytest.approx(2 / 3)
    assert mean_sd([1.0, 3.0]) == (2.0, pytest.approx(math.sqrt(2)))
