import json

import numpy as np
import pytest

from ponfault import baseline as B
from ponfault import dataset as D
from ponfault import otdr_sim as sim
from ponfault.otdr_sim import EventKind, EventParams

BANK = B.build_templates()


@pytest.fixture(scope="module")
def calibrated():
    ds = D.build_dataset(150, seed=21)
    th, ba = B.calibrate(ds.power_db, ds.class_index != 0, BANK)
    return th, ba


def test_template_invariants():
    for t in BANK.templates():
        assert abs(np.linalg.norm(t) - 1.0) <= 1e-12 and abs(t.mean()) <= 1e-12
    assert np.all(np.diff(BANK.nonreflective_template) <= 1e-15)
    inner = float(BANK.reflective_template @ BANK.nonreflective_template)
    assert inner == pytest.approx(-0.27702406832861776, abs=1e-12)
    assert abs(inner) < 0.5


def test_template_bank_validation():
    with pytest.raises(ValueError):
        B.TemplateBank(np.ones(30), BANK.nonreflective_template)
    with pytest.raises(ValueError):
        B.TemplateBank(BANK.reflective_template[:29], BANK.nonreflective_template)


def test_ncc_examples():
    t = BANK.reflective_template
    assert B.normalized_cross_correlation(3.0 * t + 7.0, t) == pytest.approx(1.0, abs=1e-12)
    assert B.normalized_cross_correlation(-t, t) == pytest.approx(-1.0, abs=1e-12)
    # Gram-Schmidt: strip the template component from a random vector
    v = np.random.default_rng(0).standard_normal(30)
    v -= v.mean()
    v -= (v @ t) * t
    assert abs(B.normalized_cross_correlation(v, t)) <= 1e-12
    assert B.normalized_cross_correlation(np.full(30, -70.0), t) == 0.0
    with pytest.raises(ValueError):
        B.normalized_cross_correlation(np.zeros(29), t)


def test_correlation_scale_offset_invariance():
    rng = np.random.default_rng(1)
    X = rng.normal(-70, 2, size=(50, 30))
    c1, g1, p1, a1 = B.features(X, BANK)
    c2, g2, p2, a2 = B.features(1.5 * X + 40.0, BANK)  # stays above the floor clamp
    assert np.allclose(c1, c2, atol=1e-12)
    assert np.array_equal(g1, g2) and np.array_equal(p1, p2)
    assert np.allclose(a2, 1.5 * a1)


def test_threshold_validation_and_json(tmp_path):
    for bad in ((0.0, 1.0), (1.0, 1.0), (0.5, 0.0)):
        with pytest.raises(ValueError):
            B.ThresholdConfig(*bad)
    th = B.ThresholdConfig(0.65, 1.25)
    assert set(json.loads(th.to_json())) == {"corr_threshold", "amplitude_threshold_db"}
    path = tmp_path / "t.json"
    th.save(path)
    assert B.ThresholdConfig.load(path) == th
    with pytest.raises(ValueError):
        B.ThresholdConfig.from_json('{"corr_threshold": 0.5}')


def test_detect_flat_sequence():
    d = B.detect(np.full(30, -73.0), BANK, B.ThresholdConfig(0.5, 0.5))
    assert not d.event and d.kind_group == "none" and d.position_index is None


def test_detect_clean_reflector():
    p = EventParams(EventKind.PcConnector, 0.3, -45.0, position_index=12)
    d = B.detect(-73.0 + sim.event_signature(p), BANK, B.ThresholdConfig(0.5, 0.5))
    assert d.event and d.kind_group == "reflective"
    assert abs(d.position_index - 12) <= 1


def test_detect_rejects_nan():
    with pytest.raises(ValueError):
        B.detect(np.r_[np.zeros(29), np.nan], BANK, B.ThresholdConfig(0.5, 0.5))


def _consistency(kind, n=300, seed=0):
    rng = np.random.default_rng(seed)
    th = B.ThresholdConfig(0.05, 0.25)
    hits = total = 0
    while total < n:
        p = sim.sample_event_params(kind, rng=rng)
        p = EventParams(p.kind, p.loss_db, p.reflectance_db, p.voa_atten_db, int(rng.integers(2, 28)))
        s = sim.event_signature(p)
        if kind in (EventKind.Tapping, EventKind.BadSplice, EventKind.Bending):
            if p.loss_db < 1.0:
                continue
        elif s.max() < 3.0:
            continue
        d = B.detect(-73.0 + s, BANK, th)
        total += 1
        hits += d.event and abs(d.position_index - p.position_index) <= 1
    return hits / n


# measured within-1 fractions on this simulator; see the decisions ledger
_POSITION_XFAIL = {
    EventKind.Tapping: 0.68, EventKind.BadSplice: 0.54, EventKind.Bending: 0.66,
    EventKind.DirtyConnector: 0.98, EventKind.BrokenFiber: 0.98,
    EventKind.Reflector: 0.72, EventKind.PcConnector: 0.97,
}


@pytest.mark.parametrize("kind", list(_POSITION_XFAIL), ids=lambda k: k.name)
def test_position_consistency_on_noiseless_signatures(kind, request):
    request.applymarker(pytest.mark.xfail(
        strict=True,
        reason=f"template baseline lands within 1 sample on about {_POSITION_XFAIL[kind]:.0%} "
               "of signatures; kind-specific shapes shift the best alignment"))
    assert _consistency(kind) == 1.0


def test_position_consistency_reflective_majority():
    # the part of the property the template baseline does meet
    for kind in (EventKind.DirtyConnector, EventKind.PcConnector, EventKind.BrokenFiber):
        assert _consistency(kind, n=200, seed=1) >= 0.95


def test_calibrate_separable_and_deterministic():
    rng = np.random.default_rng(2)
    flat = np.full((20, 30), -73.0) + rng.normal(0, 0.01, (20, 30))
    events = flat.copy()
    for i in range(20):
        p = EventParams(EventKind.PcConnector, 0.3, -45.0, position_index=5 + i % 20)
        events[i] += sim.event_signature(p)
    X = np.vstack([flat, events])
    y = np.r_[np.zeros(20, bool), np.ones(20, bool)]
    th, ba = B.calibrate(X, y, BANK)
    assert ba == 1.0
    assert B.calibrate(X, y, BANK) == (th, ba)
    # inverted labels: no grid point beats chance
    grid = B.grid_balanced_accuracy(X, ~y, BANK)
    assert grid.max() <= 0.5


def test_calibrate_errors():
    with pytest.raises(ValueError):
        B.calibrate(np.zeros((0, 30)), [], BANK)
    with pytest.raises(ValueError):
        B.calibrate(np.zeros((3, 30)), [True, False], BANK)


def test_balanced_accuracy_examples():
    assert B.balanced_accuracy([1, 1, 0, 0], [1, 0, 0, 0]) == 0.75
    assert B.balanced_accuracy([0, 0], [0, 1]) == 0.75


def test_pure_noise_false_alarm_rate(calibrated):
    # false alarms on noise at 0 dB SNR at the calibrated operating point
    th, _ = calibrated
    rng = np.random.default_rng(3)
    X = np.array([sim.synth_sequence(EventKind.NoEvent, 0.0, rng=rng).power_db for _ in range(10_000)])
    fa = np.mean([d.event for d in B.detect_batch(X, BANK, th)])
    assert fa == pytest.approx(_pure_noise_fa(th), abs=1e-12)
    assert fa < 0.5


def _pure_noise_fa(th):
    # independent recomputation from the raw features
    rng = np.random.default_rng(3)
    X = np.array([sim.synth_sequence(EventKind.NoEvent, 0.0, rng=rng).power_db for _ in range(10_000)])
    corr, _, _, amp = B.features(X, BANK)
    return float(np.mean((corr >= th.corr_threshold) & (amp >= th.amplitude_threshold_db)))


@pytest.mark.xfail(strict=True, reason="shallow bends and taps fall under the amplitude threshold "
                   "once noise no longer inflates the window deviation; the rate peaks near 20 dB")
def test_monotone_detection_in_snr(calibrated):
    th, _ = calibrated
    rates = []
    for snr in (0, 5, 10, 15, 20, 25, 30):
        rng = sim.derive_rng(4, snr)
        X = np.array([sim.synth_sequence(EventKind(1 + i % 7), float(snr), rng=rng).power_db
                      for i in range(2000)])
        rates.append(np.mean([d.event for d in B.detect_batch(X, BANK, th)]))
    assert all(b >= a - 0.01 for a, b in zip(rates, rates[1:])), rates
