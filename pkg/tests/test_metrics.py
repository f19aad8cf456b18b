import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import boundary_oracle, flood_fill_oracle, hd95_oracle, random_blob, wilcoxon_enumeration_oracle

from mtseg.metrics import (
    MetricRecord,
    boundary,
    dice_score,
    evaluate_frame,
    fill_holes,
    hausdorff95,
    nearest_rank,
    postprocess,
    read_records,
    wilcoxon_signed_rank,
    write_records,
)

# -- hole filling ------------------------------------------------------------


def test_fill_single_hole():
    m = np.ones((5, 5), bool)
    m[2, 2] = False
    assert fill_holes(m).all()


def test_fill_without_holes_unchanged():
    m = np.zeros((6, 6), bool)
    m[1:4, 1:4] = True
    assert np.array_equal(fill_holes(m), m)


def test_channel_to_border_not_filled():
    m = np.ones((7, 7), bool)
    m[3, 3] = False
    m[3, 4:] = False  # gap reaching the right edge
    out = fill_holes(m)
    assert np.array_equal(out, m)
    assert np.array_equal(out, flood_fill_oracle(m))


def test_diagonal_gap_does_not_connect():
    # background touching only diagonally is enclosed under 4-connectivity
    m = np.ones((5, 5), bool)
    m[2, 2] = False
    m[1, 1] = m[0, 0] = False
    assert np.array_equal(fill_holes(m), flood_fill_oracle(m))
    assert fill_holes(m)[2, 2]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fill_matches_flood_fill_and_idempotent(seed):
    rng = np.random.default_rng(seed)
    m = rng.uniform(size=(rng.integers(3, 16), rng.integers(3, 16))) < rng.uniform(0.3, 0.8)
    out = fill_holes(m)
    assert np.array_equal(out, flood_fill_oracle(m))
    assert np.array_equal(fill_holes(out), out)


# -- post-processing ---------------------------------------------------------


def _probmap(fg):
    fg = np.asarray(fg, np.float64)
    return np.stack([1 - fg, fg], axis=-1)


def test_postprocess_background_and_size():
    out = postprocess(_probmap(np.zeros((16, 48))))
    assert out.shape == (540, 1660) and not out.any()


def test_postprocess_rectangle_is_solid():
    fg = np.zeros((16, 48))
    fg[4:12, 12:36] = 1
    out = postprocess(_probmap(fg), (480, 160))
    rows, cols = np.nonzero(out)
    # 10x upscale of rows 4:12, cols 12:36; bilinear only rounds the corners
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (40, 119, 120, 359)
    assert out[45:115, 125:355].all()
    assert np.array_equal(fill_holes(out), out)


def test_postprocess_ring_becomes_disk():
    yy, xx = np.mgrid[:32, :32]
    r = np.hypot(yy - 15.5, xx - 15.5)
    ring = ((r > 6) & (r < 11)).astype(float)
    assert ring[16, 16] == 0
    out = postprocess(_probmap(ring), (64, 64))
    assert np.array_equal(out, flood_fill_oracle(out))
    assert out[32, 32] and out[20:44, 20:44].all()


# -- Dice ---------------------------------------------------------------------


def test_dice_cases():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    b = np.zeros((4, 4), bool)
    b[0, :2] = True
    b[1, :2] = True
    assert dice_score(a, a) == 1.0
    assert dice_score(a, b) == 0.5
    assert dice_score(np.zeros_like(a), a) == 0.0
    assert dice_score(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(ValueError):
        dice_score(a, np.zeros((3, 4), bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 9, 9)) < 0.4
    d = dice_score(a, b)
    assert d == dice_score(b, a) and 0.0 <= d <= 1.0


# -- HD95 ---------------------------------------------------------------------


def test_hd95_simple_cases():
    a = np.zeros((8, 8), bool)
    b = np.zeros((8, 8), bool)
    a[0, 0] = True
    b[3, 4] = True
    assert hausdorff95(a, b) == 5.0
    assert hausdorff95(a, a) == 0.0
    assert hausdorff95(a, np.zeros_like(a)) is None
    with pytest.raises(ValueError):
        hausdorff95(a, np.zeros((8, 7), bool))


def test_nearest_rank():
    assert nearest_rank(np.arange(1, 21)) == 19
    assert nearest_rank(np.array([7.0])) == 7.0
    assert nearest_rank(np.arange(1, 101)) == 95


def test_boundary_matches_oracle(rng):
    for _ in range(20):
        m = random_blob(rng, int(rng.integers(2, 20)), int(rng.integers(2, 20)))
        got = sorted(zip(*np.nonzero(boundary(m))))
        assert got == sorted(boundary_oracle(m))


def test_hd95_matches_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        h, w = int(rng.integers(2, 33)), int(rng.integers(2, 33))
        a, b = random_blob(rng, h, w), random_blob(rng, h, w)
        assert hausdorff95(a, b) == hd95_oracle(a, b)
        assert hausdorff95(a, b) == hausdorff95(b, a)


def test_evaluate_frame_perfect(rng):
    gt = random_blob(rng, 32, 32)
    gt = fill_holes(gt)
    dice, hd = evaluate_frame(_probmap(gt), gt.astype(np.uint8))
    assert dice == 1.0 and hd == 0.0


# -- Wilcoxon -----------------------------------------------------------------


def test_wilcoxon_identities():
    a = np.arange(10.0)
    assert wilcoxon_signed_rank(a, a) == 1.0
    assert wilcoxon_signed_rank(np.arange(1.0, 7.0), np.zeros(6)) == pytest.approx(0.03125, abs=1e-15)


def test_wilcoxon_too_few_pairs():
    with pytest.raises(ValueError, match="at least 5"):
        wilcoxon_signed_rank([1, 2, 3, 0], [0, 0, 0, 0])


@pytest.mark.parametrize("seed", range(25))
def test_wilcoxon_exact_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 13))
    a = np.round(rng.normal(0.2, 1, n), 1)  # rounding creates ties and zeros
    b = np.round(rng.normal(0, 1, n), 1)
    if np.count_nonzero(a - b) < 5:
        pytest.skip("too few non-zero differences")
    assert wilcoxon_signed_rank(a, b) == pytest.approx(wilcoxon_enumeration_oracle(a, b), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_wilcoxon_normal_approximation_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    a = np.round(rng.normal(0.1, 1, 60), 2)
    b = np.round(rng.normal(0, 1, 60), 2)
    ref = stats.wilcoxon(a, b, zero_method="wilcox", correction=False, method="approx").pvalue
    assert wilcoxon_signed_rank(a, b) == pytest.approx(ref, rel=1e-9)


def test_wilcoxon_large_shift_significant(rng):
    a = rng.normal(0, 0.1, 100)
    assert wilcoxon_signed_rank(a + 1.0, a + rng.normal(0, 0.01, 100)) < 0.001


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(5, 40))
def test_wilcoxon_swap_invariant_and_in_range(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, n))
    p = wilcoxon_signed_rank(a, b)
    assert 0.0 < p <= 1.0
    assert p == pytest.approx(wilcoxon_signed_rank(b, a), abs=1e-15)


# -- records ------------------------------------------------------------------


def test_records_roundtrip(tmp_path):
    recs = [MetricRecord("r", 0, "g/1", 0.5, 3.25), MetricRecord("r", 1, "g/2", 0.0, None)]
    write_records(recs, tmp_path / "m.csv")
    assert read_records(tmp_path / "m.csv") == recs
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == "run_id,fold,frame,dice,hd95,hd95_defined"


def test_record_validation():
    with pytest.raises(ValueError):
        MetricRecord("r", 0, "g/1", 1.5, 0.0)
    with pytest.raises(ValueError):
        MetricRecord("r", 0, "g/1", 0.5, -1.0)
