import numpy as np
import pytest

from dualavse import metrics
from dualavse.metrics import MetricsRecord, aggregate, si_sdr, stoi

pystoi = pytest.importorskip("pystoi")

FS = 16000


def lstsq_si_sdr(ref, est):
    """Reference SI-SDR from the least-squares projection, uncapped."""
    alpha = np.linalg.lstsq(ref[:, None], est, rcond=None)[0][0]
    target = alpha * ref
    return 10 * np.log10(np.sum(target**2) / np.sum((est - target) ** 2))


def speechlike(rng, n=40800):
    t = np.arange(n) / FS
    env = np.maximum(0, np.sin(2 * np.pi * 3 * t)) ** 2
    return env * (np.sin(2 * np.pi * 140 * t) + 0.5 * np.sin(2 * np.pi * 280 * t)) + 1e-3 * rng.standard_normal(n)


def test_si_sdr_matches_least_squares(rng):
    ref = rng.standard_normal(5000)
    for noise in (0.01, 0.3, 1.0, 3.0):
        est = 0.7 * ref + noise * rng.standard_normal(5000)
        assert si_sdr(ref, est) == pytest.approx(lstsq_si_sdr(ref, est), abs=1e-9)


def test_si_sdr_scale_invariance(rng):
    ref = rng.standard_normal(4000)
    est = ref + 0.5 * rng.standard_normal(4000)
    base = si_sdr(ref, est)
    for a in (1e-3, 0.5, 7.0, -2.0):
        assert abs(si_sdr(ref, a * est) - base) <= 1e-6


def test_si_sdr_cap_and_errors(rng):
    x = rng.standard_normal(1000)
    assert si_sdr(x, x) == metrics.SI_SDR_CAP
    assert si_sdr(x, np.zeros(1000)) == -metrics.SI_SDR_CAP
    with pytest.raises(ValueError, match="length"):
        si_sdr(x, x[:-1])
    with pytest.raises(ValueError, match="zero power"):
        si_sdr(np.zeros(10), x[:10])


def test_stoi_identity(rng):
    x = speechlike(rng)
    assert abs(stoi(x, x) - 1.0) <= 1e-6


@pytest.mark.parametrize("noise", [0.05, 0.3, 1.0])
def test_stoi_matches_pystoi(rng, noise):
    x = speechlike(rng)
    y = x + noise * rng.standard_normal(len(x))
    assert stoi(x, y) == pytest.approx(pystoi.stoi(x, y, FS, extended=False), abs=1e-9)


def test_stoi_decreases_with_noise(rng):
    x = speechlike(rng)
    n = rng.standard_normal(len(x))
    vals = [stoi(x, x + g * n) for g in (0.01, 0.1, 0.5, 2.0)]
    assert vals == sorted(vals, reverse=True)


def test_stoi_errors(rng):
    with pytest.raises(ValueError, match="0.5 s"):
        stoi(np.ones(1000), np.ones(1000))
    with pytest.raises(ValueError, match="length"):
        stoi(np.ones(16000), np.ones(16001))
    silent = np.zeros(16000)
    silent[:300] = rng.standard_normal(300)
    with pytest.raises(ValueError, match="non-silent"):
        stoi(silent, silent)


def test_third_octave_bands_shape():
    obm = metrics.third_octave_bands()
    assert obm.shape == (15, 257)
    assert np.all(obm.sum(axis=1) > 0)
    assert np.all(obm.sum(axis=0) <= 1)  # bands do not overlap


def test_resample_length():
    x = np.ones(16000)
    assert len(metrics.resample(x, 16000, 10000)) == 10000


def _rec(v, snr, sdr, s=0.5, mode="none", clip="c"):
    return MetricsRecord(sdr, s, snr, v, mode, clip)


def test_aggregate_means_and_order():
    recs = [
        _rec("dual_full/face", 0, 4.0), _rec("dual_full/face", 0, 6.0),
        _rec("aose", -5, 1.0), _rec("noisy", 0, -1.0), _rec("aose", 0, 3.0),
        _rec("dual_full/face", 0, 2.0, mode="mask_whole"),
    ]
    rows = aggregate(recs)
    assert [(r.variant_id, r.corruption_mode, r.snr_db) for r in rows] == [
        ("noisy", "none", 0.0), ("aose", "none", -5.0), ("aose", "none", 0.0),
        ("dual_full/face", "none", 0.0), ("dual_full/face", "mask_whole", 0.0),
    ]
    assert rows[3].si_sdr_db == 5.0 and rows[3].n_clips == 2


def test_aggregate_independent_of_order(rng):
    recs = [_rec("aose", 0, float(v), float(s), clip=str(i))
            for i, (v, s) in enumerate(rng.standard_normal((50, 2)))]
    a = aggregate(recs)
    b = aggregate([recs[i] for i in rng.permutation(len(recs))])
    assert a == b


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate([])


def test_csv_and_text_agree():
    recs = [_rec(v, snr, snr + k, 0.1 * k + 0.3) for k, v in enumerate(["noisy", "aose"])
            for snr in (-15, -10, -5, 0)]
    rows = aggregate(recs)
    from_csv = metrics.read_report_csv(metrics.report_csv(rows))
    from_txt = metrics.parse_report_text(metrics.report_text(rows))
    assert len(from_csv) == 8
    for a, b in zip(from_csv, from_txt):
        assert (a.variant_id, a.corruption_mode, a.snr_db) == (b.variant_id, b.corruption_mode, b.snr_db)
        assert a.si_sdr_db == pytest.approx(b.si_sdr_db, abs=5e-5)
        assert a.stoi == pytest.approx(b.stoi, abs=5e-5)


def test_evaluate_clip(rng):
    x = speechlike(rng)
    r = metrics.evaluate_clip(x, x + 0.1 * rng.standard_normal(len(x)), -5, "aose", "none", "id")
    assert r.snr_condition == -5.0 and r.variant_id == "aose" and 0 < r.stoi < 1
