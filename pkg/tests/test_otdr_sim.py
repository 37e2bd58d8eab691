import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ponfault import otdr_sim as sim
from ponfault.otdr_sim import EventKind, EventParams, LinkSpec, SimConfig

CFG = SimConfig()


def sample_params(kind, rng, position):
    p = sim.sample_event_params(kind, rng=rng)
    if kind == EventKind.NoEvent:
        return p
    return EventParams(p.kind, p.loss_db, p.reflectance_db, p.voa_atten_db, position)


# --- config and constants -------------------------------------------------


def test_meters_per_sample():
    # exact rational arithmetic: c * 1 ns / (2 * 1.468)
    from fractions import Fraction
    exact = Fraction(299_792_458) * Fraction(1, 10**9) / (2 * Fraction(1468, 1000))
    assert CFG.meters_per_sample == pytest.approx(float(exact), rel=1e-15)
    assert round(CFG.meters_per_sample, 4) == 0.1021
    assert CFG.pulse_samples == 10


@pytest.mark.parametrize("bad", [
    dict(pulse_width_ns=10.5), dict(group_index=2.5), dict(atten_db_per_km=-1.0),
    dict(peak_ceiling_db=0.0), dict(smoothing_sigma_samples=-0.1),
])
def test_simconfig_rejects_bad_values(bad):
    with pytest.raises(ValueError):
        SimConfig(**bad)


def test_simconfig_json_roundtrip(tmp_path):
    cfg = SimConfig(atten_db_per_km=0.3, peak_ceiling_db=25.0)
    path = tmp_path / "sim.json"
    import json
    path.write_text(json.dumps(cfg.to_dict()))
    assert SimConfig.from_json(path) == cfg
    with pytest.raises(ValueError, match="unknown"):
        SimConfig.from_dict({"not_a_field": 1})


# --- backscatter ----------------------------------------------------------


def test_backscatter_examples():
    assert sim.backscatter_level(0.0) == -73.0
    assert sim.backscatter_level(1000.0) == pytest.approx(-73.5, abs=1e-12)
    assert sim.backscatter_level(500.0, SimConfig(atten_db_per_km=0.0)) == -73.0


def test_backscatter_strictly_decreasing_and_domain():
    d = np.linspace(0, 20_000, 101)
    assert np.all(np.diff(sim.backscatter_level(d)) < 0)
    with pytest.raises(ValueError):
        sim.backscatter_level(-1.0)


# --- event parameters -----------------------------------------------------


def test_event_params_validation():
    with pytest.raises(ValueError):
        EventParams(EventKind.Reflector, 0.5, -20.0, voa_atten_db=31.0)
    with pytest.raises(ValueError):
        EventParams(EventKind.Tapping, loss_db=-0.1)
    with pytest.raises(ValueError):
        EventParams(EventKind.Tapping, 1.0, position_index=28).check()
    with pytest.raises(ValueError):
        EventParams(EventKind.Tapping, position_index=10).check()  # missing loss
    with pytest.raises(ValueError):
        EventParams(EventKind.Bending, 1.0, -40.0, position_index=10).check()
    with pytest.raises(ValueError):
        EventParams(EventKind.NoEvent, position_index=3).check()
    EventParams(EventKind.BrokenFiber, position_index=5).check()  # reflectance optional
    EventParams(EventKind.BrokenFiber, None, -40.0, position_index=5).check()


def test_effective_reflectance():
    assert EventParams(EventKind.Reflector, 0.5, -20.0, 10.0).effective_reflectance_db == -40.0


def test_sample_event_params_examples():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        p = sim.sample_event_params(EventKind.Tapping, rng=rng)
        assert 0.1 <= p.loss_db <= 2.0 and p.reflectance_db is None
    p = sim.sample_event_params(EventKind.NoEvent, shifted=True, rng=rng)
    assert (p.loss_db, p.reflectance_db, p.position_index) == (None, None, None)
    voa = [sim.sample_event_params(EventKind.Reflector, True, rng).voa_atten_db for _ in range(10_000)]
    assert min(voa) >= 5.0 and max(voa) <= 30.0


def test_sample_event_params_shifted_loss_range():
    rng = np.random.default_rng(1)
    losses = [sim.sample_event_params(EventKind.Bending, True, rng).loss_db for _ in range(5000)]
    lo, hi = sim.LOSS_RANGES[EventKind.Bending]
    w = hi - lo
    assert min(losses) >= lo + 0.25 * w and max(losses) <= hi + 0.25 * w
    assert max(losses) > hi  # part of the shifted range lies outside training


def test_broken_fiber_reflectance_present_about_half_the_time():
    rng = np.random.default_rng(2)
    present = [sim.sample_event_params(EventKind.BrokenFiber, rng=rng).reflectance_db is not None
               for _ in range(4000)]
    assert abs(np.mean(present) - 0.5) < 0.03


# --- signatures -----------------------------------------------------------


def test_signature_noevent_is_zero():
    assert np.array_equal(sim.event_signature(EventParams(EventKind.NoEvent)), np.zeros(30))


def test_signature_bad_splice_step():
    s = sim.event_signature(EventParams(EventKind.BadSplice, 1.0, position_index=10))
    assert np.all(s[:10] == 0.0)
    # the smoothed ramp settles at the loss depth one pulse (plus the kernel) later
    assert np.allclose(s[20:], -1.0, atol=0.01)
    assert np.all(s[23:] == pytest.approx(-1.0, abs=1e-12))
    # the splice bump is over after half a pulse plus the kernel length; from
    # there the ramp falls monotonically
    assert np.all(np.diff(s[10 + 5 + 4:]) <= 1e-12)


def test_signature_reflector_peak_clipped_at_ceiling():
    shown, raw = sim.peak_height_db(-40.0, CFG)
    assert shown == 30.0
    assert raw == pytest.approx(10 * math.log10(1 + 10 ** 3.3), abs=1e-12)
    s = sim.event_signature(EventParams(EventKind.Reflector, 0.0, -40.0, 0.0, 10))
    assert s.max() == pytest.approx(30.0, abs=1e-9)
    assert s.max() <= CFG.peak_ceiling_db + 1e-9


def test_peak_height_below_ceiling():
    shown, raw = sim.peak_height_db(-90.0, CFG)
    assert shown == raw == pytest.approx(10 * math.log10(1 + 10 ** -1.7), abs=1e-12)


def test_signature_rejects_bad_position():
    with pytest.raises(ValueError):
        sim.event_signature(EventParams(EventKind.Bending, 1.0, position_index=1))
    with pytest.raises(ValueError):
        sim.event_signature(EventParams(EventKind.Bending, 1.0, position_index=28))


def test_broken_fiber_goes_to_minus_infinity():
    s = sim.event_signature(EventParams(EventKind.BrokenFiber, position_index=5))
    assert np.all(np.isneginf(s[5 + 10 + 4:]))
    assert np.all(s[:5] == 0.0)


@settings(max_examples=200, deadline=None)
@given(kind=st.sampled_from(list(EventKind)[1:]), pos=st.integers(2, 27), seed=st.integers(0, 2**32 - 1))
def test_label_is_first_deviating_sample(kind, pos, seed):
    p = sample_params(kind, np.random.default_rng(seed), pos)
    s = sim.event_signature(p)
    dev = np.flatnonzero(np.abs(s) > 1e-6)
    assert dev[0] == pos


@settings(max_examples=100, deadline=None)
@given(kind=st.sampled_from([k for k in sim.LOSS_RANGES]), pos=st.integers(2, 27),
       seed=st.integers(0, 2**32 - 1), extra=st.floats(0.05, 3.0))
def test_loss_monotonicity(kind, pos, seed, extra):
    p = sample_params(kind, np.random.default_rng(seed), pos)
    q = EventParams(p.kind, p.loss_db + extra, p.reflectance_db, p.voa_atten_db, pos)
    a, b = sim.event_signature(p), sim.event_signature(q)
    start = pos
    assert np.all(b[start:] < a[start:])
    assert np.array_equal(a[:start], b[:start])


@settings(max_examples=100, deadline=None)
@given(kind=st.sampled_from(sorted(sim.REFLECTIVE)), pos=st.integers(2, 27),
       r=st.floats(-64.0, -46.0), extra=st.floats(0.1, 2.5))
def test_reflectance_monotonicity_below_ceiling(kind, pos, r, extra):
    # heights from 9 dB (clear of the dirty-connector top modulation) up to
    # just under the ceiling
    lo = EventParams(kind, 0.5, r, 0.0, pos)
    hi = EventParams(kind, 0.5, r + extra, 0.0, pos)
    assert sim.peak_height_db(r + extra, CFG)[1] < CFG.peak_ceiling_db
    start = pos
    assert sim.event_signature(hi)[start:].max() > sim.event_signature(lo)[start:].max()


def test_reflectance_monotone_non_decreasing_everywhere():
    heights = [sim.event_signature(EventParams(EventKind.PcConnector, 0.5, r, 0.0, 5)).max()
               for r in np.linspace(-100, -10, 91)]
    assert np.all(np.diff(heights) >= -1e-12)


# --- sequences ------------------------------------------------------------


def test_noevent_sequence_high_snr_is_flat_backscatter():
    rng = np.random.default_rng(3)
    for _ in range(200):
        s = sim.synth_sequence(EventKind.NoEvent, 30.0, rng=rng)
        dist = s.start_m + np.arange(30) * CFG.meters_per_sample
        assert np.all(np.abs(s.power_db - sim.backscatter_level(dist)) <= 0.05)
        assert s.params.kind == 0 and s.params.position_index is None


def test_reflector_sequence_has_visible_peak():
    hits = 0
    for i in range(1000):
        s = sim.synth_sequence(EventKind.Reflector, 15.0, rng=sim.derive_rng(11, i))
        hits += s.power_db.max() - np.median(s.power_db) >= 3.0
    assert hits >= 990


def test_sequence_determinism():
    a = sim.synth_sequence(EventKind.DirtyConnector, 12.0, rng=np.random.default_rng(5))
    b = sim.synth_sequence(EventKind.DirtyConnector, 12.0, rng=np.random.default_rng(5))
    assert np.array_equal(a.power_db, b.power_db) and a.params == b.params


def test_sequence_rejects_snr_out_of_range():
    with pytest.raises(ValueError):
        sim.synth_sequence(EventKind.Tapping, 31.0)
    with pytest.raises(ValueError):
        sim.synth_sequence(EventKind.Tapping, -0.5)


def test_sequence_sample_validation():
    with pytest.raises(ValueError):
        sim.SequenceSample(np.zeros(29), 10.0, EventParams(EventKind.NoEvent))
    with pytest.raises(ValueError):
        sim.SequenceSample(np.full(30, np.nan), 10.0, EventParams(EventKind.NoEvent))
    with pytest.raises(ValueError):
        sim.SequenceSample(np.zeros(30), 40.0, EventParams(EventKind.NoEvent))


def test_derive_rng_streams_differ_and_repeat():
    a = sim.derive_rng(1, 0).standard_normal(5)
    assert np.array_equal(a, sim.derive_rng(1, 0).standard_normal(5))
    assert not np.array_equal(a, sim.derive_rng(1, 1).standard_normal(5))
    assert not np.array_equal(a, sim.derive_rng(2, 0).standard_normal(5))


# --- traces ---------------------------------------------------------------


def test_event_free_trace_is_non_increasing_up_to_noise():
    link = LinkSpec(100.0, averaging_count=65000, single_shot_snr_db=10.0)
    dist, p, truth = sim.synth_trace(link, rng=np.random.default_rng(0))
    assert truth == []
    sigma_db = 10 / math.log(10) * 10 ** (-1.0) / math.sqrt(65000)
    assert np.all(np.diff(p) <= 8 * sigma_db)
    assert p[-1] < p[0]


def _noise_std(averaging, reps, seed):
    link = LinkSpec(50.0, averaging_count=averaging, single_shot_snr_db=0.0)
    stds = []
    for r in range(reps):
        _, p, _ = sim.synth_trace(link, rng=sim.derive_rng(seed, r))
        dist = np.arange(len(p)) * CFG.meters_per_sample
        lin = 10 ** (p / 10) - 10 ** (sim.backscatter_level(dist) / 10)
        stds.append(lin)
    return np.std(np.concatenate(stds))


def test_averaging_law_ratio():
    ratio = _noise_std(6400, 1000, 1) / _noise_std(64, 1000, 2)
    assert abs(ratio / 0.1 - 1) < 0.05


def test_broken_fiber_trace_reaches_noise_floor():
    ev = EventParams(EventKind.BrokenFiber)
    link = LinkSpec(100.0, [(50.0, ev)], averaging_count=1024, single_shot_snr_db=0.0)
    dist, p, truth = sim.synth_trace(link, rng=np.random.default_rng(4))
    onset = truth[0][0]
    sigma = 10 ** (-73 / 10) / math.sqrt(1024)
    after = 10 ** (p[onset + CFG.pulse_samples + 4:] / 10)
    # Gaussian noise: 3 sigma holds per sample with probability 0.9973
    assert np.mean(after <= 3 * sigma) >= 0.99
    assert np.all(after <= 5 * sigma)


def test_trace_ground_truth_alignment():
    ev = EventParams(EventKind.BadSplice, 1.0)
    link = LinkSpec(200.0, [(100.0, ev)], averaging_count=65000, single_shot_snr_db=20.0)
    dist, p, truth = sim.synth_trace(link, rng=np.random.default_rng(0))
    onset, lab = truth[0]
    assert onset == round(100.0 / CFG.meters_per_sample)
    assert lab.position_index == onset and lab.loss_db == 1.0
    base = sim.backscatter_level(dist)
    assert abs((p - base)[onset + 20] + 1.0) < 0.05


def test_link_validation():
    ev = EventParams(EventKind.Bending, 1.0)
    with pytest.raises(ValueError):
        LinkSpec(100.0, [(50.0, ev), (40.0, ev)])
    with pytest.raises(ValueError):
        LinkSpec(100.0, [(150.0, ev)])
    with pytest.raises(ValueError):
        LinkSpec(100.0, averaging_count=0)
    with pytest.raises(ValueError):
        LinkSpec(100.0, [(10.0, EventParams(EventKind.NoEvent))])
    with pytest.raises(ValueError, match="closer"):
        sim.synth_trace(LinkSpec(100.0, [(10.0, ev), (11.0, ev)]))


def test_trace_csv_roundtrip(tmp_path):
    dist, p, _ = sim.synth_trace(LinkSpec(30.0), rng=np.random.default_rng(0))
    path = tmp_path / "t.csv"
    sim.save_trace_csv(path, dist, p)
    d2, p2 = sim.load_trace_csv(path)
    assert np.array_equal(dist, d2) and np.array_equal(p, p2)


# --- SNR estimator --------------------------------------------------------


def test_snr_constant_sequence_clips_high():
    assert sim.estimate_snr(np.full(30, -73.0)) == 30.0


def _pure_noise_estimates(n, seed):
    rng = np.random.default_rng(seed)
    level = 10 ** (-7.3)
    return np.array([sim.estimate_snr(10 * np.log10(level * (1 + 0.1 * rng.standard_normal(30))))
                     for _ in range(n)])


@pytest.mark.xfail(strict=True, reason="a 30-sample MAD estimate has about 0.95 dB spread; "
                                       "about 85% of trials land within 1.5 dB, not 90%")
def test_snr_estimate_pure_noise_within_1p5_db():
    est = _pure_noise_estimates(10_000, 0)
    assert np.mean(np.abs(est - 10.0) <= 1.5) >= 0.90


def test_snr_estimate_pure_noise_unbiased():
    est = _pure_noise_estimates(10_000, 1)
    assert abs(np.mean(est) - 10.0) < 0.3


def test_snr_estimate_ignores_single_spike():
    rng = np.random.default_rng(7)
    diffs = []
    for _ in range(500):
        lin = 10 ** (-7.3) * (1 + 0.03 * rng.standard_normal(30))
        spiked = lin.copy()
        spiked[rng.integers(30)] *= 50.0
        diffs.append(sim.estimate_snr(10 * np.log10(spiked)) - sim.estimate_snr(10 * np.log10(lin)))
    # a spike removes two of 29 differences, which moves the MAD by a rank
    # in single trials; the Monte-Carlo mean shift is what stays small
    assert abs(np.mean(diffs)) <= 0.5
    assert np.median(np.abs(diffs)) <= 0.5


@pytest.mark.parametrize("snr", [5.0, 10.0, 20.0])
def test_snr_round_trip_bias(snr):
    est = [sim.estimate_snr(sim.synth_sequence(EventKind(i % 8), snr, rng=sim.derive_rng(21, i)).power_db)
           for i in range(1600)]
    assert abs(np.mean(est) - snr) <= 2.0
