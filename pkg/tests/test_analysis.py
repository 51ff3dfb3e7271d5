import math

import numpy as np
import pytest

from featprobe.analysis import (
    ENTROPY_CONVENTION,
    analysis_record,
    bias_analyze,
    spectrum_curves,
    svd_analyze,
    write_spectrum_csv,
)
from featprobe.tensorio import FeatureMap, Tensor


def fmap_batch(rng, n=3, c=4, grid=(2, 2)):
    return rng.standard_normal((n, c, *grid))


def test_identity_entropy_is_log_c():
    report = svd_analyze(np.eye(4))
    assert np.allclose(report.singular_values, 1.0)
    assert abs(report.spectral_entropy - math.log(4)) <= 1e-9
    assert abs(report.effective_rank - 4.0) <= 1e-6


def test_rank_one_entropy_is_zero(rng):
    u = rng.standard_normal(5)
    v = rng.standard_normal(5)
    report = svd_analyze(np.outer(u, v))
    assert report.spectral_entropy <= 1e-9
    assert abs(report.effective_rank - 1.0) <= 1e-6


def test_diag_3_1_hand_value():
    report = svd_analyze(np.diag([3.0, 1.0]))
    assert np.allclose(report.singular_values, [3.0, 1.0])
    assert np.allclose(report.energy, [0.75, 0.25])
    expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))  # 0.56233...
    assert abs(report.spectral_entropy - expected) <= 1e-12


def test_energy_sums_to_one_sorted_descending(rng):
    report = svd_analyze(rng.standard_normal((16, 16)))
    assert abs(report.energy.sum() - 1.0) <= 1e-9
    assert np.all(np.diff(report.singular_values) <= 0)
    assert np.all(report.singular_values >= 0)
    assert 0.0 <= report.spectral_entropy <= math.log(16) + 1e-12


def test_entropy_scale_invariance(rng):
    w = rng.standard_normal((8, 8))
    base = svd_analyze(w).spectral_entropy
    for c in (0.1, 10.0):
        assert abs(svd_analyze(c * w).spectral_entropy - base) <= 1e-9


def test_orthogonal_matrix_flat_spectrum(rng):
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    report = svd_analyze(q)
    assert np.max(np.abs(report.singular_values - 1.0)) <= 1e-6
    assert abs(report.spectral_entropy - math.log(6)) <= 1e-9


def test_svd_rejects_bad_input():
    with pytest.raises(ValueError):
        svd_analyze(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        svd_analyze(np.zeros((3, 3)))
    bad = np.eye(3)
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        svd_analyze(bad)


def test_bias_zero_bias(rng):
    w = rng.standard_normal((4, 4))
    report = bias_analyze(w, np.zeros(4), fmap_batch(rng))
    assert report.input_dominance_ratio == 1.0
    assert abs(report.directional_mdncs - 1.0) <= 1e-12
    assert report.bias_norm == 0.0
    assert report.skipped_count == 0


def test_bias_hand_ratio_99_to_1():
    # one location with ||Wx|| = 99 and ||b|| = 1
    w = np.eye(2) * 99.0
    b = np.array([1.0, 0.0])
    x = np.zeros((1, 2, 1, 1))
    x[0, 0, 0, 0] = 1.0  # Wx = (99, 0)
    report = bias_analyze(w, b, x)
    assert abs(report.input_dominance_ratio - 0.99) <= 1e-12


def test_bias_zero_weight_degenerate(rng):
    batch = fmap_batch(rng)
    report = bias_analyze(np.zeros((4, 4)), np.ones(4), batch)
    assert report.input_dominance_ratio == 0.0
    assert report.directional_mdncs is None
    assert report.skipped_count == batch.shape[0] * batch.shape[2] * batch.shape[3]


def test_bias_ratio_scale_covariant(rng):
    w = rng.standard_normal((4, 4))
    b = rng.standard_normal(4)
    batch = fmap_batch(rng)
    r1 = bias_analyze(w, b, batch).input_dominance_ratio
    r2 = bias_analyze(3.0 * w, b, batch).input_dominance_ratio
    assert r2 > r1


def test_bias_accepts_feature_maps(rng):
    maps = [FeatureMap(Tensor(rng.standard_normal((4, 2, 2)).astype(np.float32)),
                       "toy", "feat3") for _ in range(3)]
    report = bias_analyze(rng.standard_normal((4, 4)), rng.standard_normal(4), maps)
    assert 0.0 <= report.input_dominance_ratio <= 1.0
    assert -1.0 <= report.directional_mdncs <= 1.0


def test_bias_empty_batch(rng):
    with pytest.raises(ValueError):
        bias_analyze(np.eye(2), np.zeros(2), [])


def test_spectrum_identity_flat_curve():
    table = spectrum_curves([svd_analyze(np.eye(4))], labels=["identity"])
    assert table["rank"] == [1, 2, 3, 4]
    assert np.allclose(table["identity"], 0.25)


def test_spectrum_two_reports_equal_rows(rng):
    r1 = svd_analyze(rng.standard_normal((4, 4)))
    r2 = svd_analyze(np.diag([3.0, 1.0, 1.0, 1.0]))
    table = spectrum_curves([r1, r2], labels=["a", "b"])
    assert len(table["a"]) == len(table["b"]) == len(table["rank"]) == 4


def test_spectrum_diag_energy_column():
    table = spectrum_curves([svd_analyze(np.diag([3.0, 1.0]))], labels=["d"])
    assert np.allclose(table["d"], [0.75, 0.25])


def test_spectrum_csv(tmp_path, rng):
    table = spectrum_curves([svd_analyze(np.eye(2)), svd_analyze(np.diag([3.0, 1.0]))],
                            labels=["i", "d"])
    write_spectrum_csv(table, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().strip().splitlines()
    assert lines[0] == "rank,i,d"
    assert len(lines) == 3


def test_analysis_record_fields(rng):
    svd = svd_analyze(rng.standard_normal((8, 8)))
    bias = bias_analyze(rng.standard_normal((8, 8)), rng.standard_normal(8),
                        rng.standard_normal((2, 8, 2, 2)))
    record = analysis_record("m0", "feat3", "grayscale", svd, bias, truncate_to=4)
    assert record["entropy_convention"] == ENTROPY_CONVENTION
    assert len(record["singular_values"]) == 4
    assert record["singular_values_truncated"] is True
    full = analysis_record("m0", "feat3", "grayscale", svd, bias, truncate_to=None)
    assert len(full["singular_values"]) == 8
