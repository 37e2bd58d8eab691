"""Parametric OTDR simulator for PON fault signatures.

Traces are built in linear power relative to the launch level: a sloped
Rayleigh backscatter baseline multiplied by per-event transmission factors,
plus reflective peaks, plus white Gaussian receiver noise. Everything is
converted to dB at the end with a floor clamp.

Event morphology per kind (before receiver smoothing, ``k`` samples after
the onset, ``P`` = pulse width in samples):

=============== ============================================================
NoEvent         nothing
Tapping         loss step over ``P`` plus a short radiation notch at the clip
BadSplice       loss step over ``P`` with a short bump at its start
Bending         loss distributed over a bend zone of ``3 P``
DirtyConnector  reflective peak with a rising top, loss step
BrokenFiber     optional reflective peak with a falling top, then power falls
                to zero over ``P``
Reflector       VOA-attenuated peak on top of a short input-connector
                pedestal, insertion loss step
PcConnector     reflective peak, loss step
=============== ============================================================

Reflective peaks follow the pulse envelope (Gaussian rise, then a plateau)
and saturate at ``peak_ceiling_db`` above the local backscatter.
A saturating peak is followed by a receiver recovery tail whose length
grows with the excess over the ceiling.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, fields, replace

import numpy as np

SEQ_LEN = 30
POS_MIN = 2
POS_MAX = 27
SPEED_OF_LIGHT = 299_792_458.0
FLOOR_DB = -90.0

# Unlabeled morphology constants (dB or fractions of the pulse width).
TAP_NOTCH_DB = 4.0
SPLICE_BUMP_DB = 3.0
APC_PEAK_DB = 8.0
APC_SAMPLES = 3
BEND_ZONE_PULSES = 3
DIRTY_RISE_DB = 8.0
BREAK_FALL_DB = 8.0
SAT_TAIL_SAMPLES_PER_DB = 0.5
PULSE_EDGE_SAMPLES = 5  # Gaussian rise at the start of a reflected pulse
PULSE_EDGE_SIGMA = 1.0
# SNR estimator: clipped re-estimation of the noise std
SNR_CLIP_SIGMAS = 4.0
SNR_REFINE_PASSES = 2
SNR_MIN_PAIRS = 5


class EventKind(enum.IntEnum):
    NoEvent = 0
    Tapping = 1
    BadSplice = 2
    Bending = 3
    DirtyConnector = 4
    BrokenFiber = 5
    Reflector = 6
    PcConnector = 7

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    EventKind.NoEvent: "No event",
    EventKind.Tapping: "Tapping",
    EventKind.BadSplice: "Bad splice",
    EventKind.Bending: "Bending",
    EventKind.DirtyConnector: "Dirty connector",
    EventKind.BrokenFiber: "Broken fiber",
    EventKind.Reflector: "Reflector",
    EventKind.PcConnector: "PC connector",
}

N_CLASSES = len(EventKind)
REFLECTIVE = frozenset(
    {EventKind.DirtyConnector, EventKind.Reflector, EventKind.PcConnector}
)
# (loss present, reflectance present); BrokenFiber reflectance is optional.
APPLICABILITY = {
    EventKind.NoEvent: (False, False),
    EventKind.Tapping: (True, False),
    EventKind.BadSplice: (True, False),
    EventKind.Bending: (True, False),
    EventKind.DirtyConnector: (True, True),
    EventKind.BrokenFiber: (False, None),
    EventKind.Reflector: (True, True),
    EventKind.PcConnector: (True, True),
}

# Training ranges (dB). Reflector reflectance is before the VOA.
LOSS_RANGES = {
    EventKind.Tapping: (0.1, 2.0),
    EventKind.BadSplice: (0.2, 3.0),
    EventKind.Bending: (0.5, 8.0),
    EventKind.DirtyConnector: (0.3, 2.0),
    EventKind.Reflector: (0.1, 1.0),
    EventKind.PcConnector: (0.1, 1.0),
}
REFLECTANCE_RANGES = {
    EventKind.DirtyConnector: (-50.0, -30.0),
    EventKind.BrokenFiber: (-55.0, -35.0),
    EventKind.Reflector: (-30.0, -14.0),
    EventKind.PcConnector: (-45.0, -30.0),
}
VOA_RANGE = (0.0, 30.0)
SHIFTED_VOA_RANGE = (5.0, 30.0)
SHIFT_FRACTION = 0.25
# Averaging counts: training draws from the first set, shifted tests from the second.
AVERAGING_COUNTS = (64, 256, 1024, 4096, 16384, 65000)
SHIFTED_AVERAGING_COUNTS = (62, 128, 512, 2048, 8192, 32768)


@dataclass(frozen=True)
class SimConfig:
    pulse_width_ns: float = 10.0
    sample_interval_ns: float = 1.0
    wavelength_nm: float = 1650.0
    atten_db_per_km: float = 0.25
    group_index: float = 1.468
    backscatter_ref_db: float = -73.0
    peak_ceiling_db: float = 30.0
    smoothing_sigma_samples: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.pulse_width_ns <= 0 or self.sample_interval_ns <= 0:
            raise ValueError("pulse_width_ns and sample_interval_ns must be positive")
        ratio = self.pulse_width_ns / self.sample_interval_ns
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(
                "pulse_width_ns must be an integer multiple of sample_interval_ns"
            )
        if not 0 < self.group_index < 2:
            raise ValueError("group_index must lie in (0, 2)")
        if self.atten_db_per_km < 0:
            raise ValueError("atten_db_per_km must be nonnegative")
        if self.peak_ceiling_db <= 0:
            raise ValueError("peak_ceiling_db must be positive")
        if self.smoothing_sigma_samples < 0:
            raise ValueError("smoothing_sigma_samples must be nonnegative")

    @property
    def pulse_samples(self) -> int:
        return int(round(self.pulse_width_ns / self.sample_interval_ns))

    @property
    def meters_per_sample(self) -> float:
        return SPEED_OF_LIGHT * self.sample_interval_ns * 1e-9 / (2.0 * self.group_index)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> SimConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown SimConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> SimConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class EventParams:
    kind: EventKind
    loss_db: float | None = None
    reflectance_db: float | None = None
    voa_atten_db: float = 0.0
    position_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EventKind(self.kind))
        if not VOA_RANGE[0] <= self.voa_atten_db <= VOA_RANGE[1]:
            raise ValueError(f"voa_atten_db {self.voa_atten_db} outside [0, 30]")
        if self.loss_db is not None and self.loss_db < 0:
            raise ValueError("loss_db must be nonnegative")
        if self.reflectance_db is not None and self.reflectance_db > 0:
            raise ValueError("reflectance_db must be <= 0")

    @property
    def effective_reflectance_db(self) -> float | None:
        """Reflectance seen by the OTDR (the VOA acts twice, round trip)."""
        if self.reflectance_db is None:
            return None
        return self.reflectance_db - 2.0 * self.voa_atten_db

    def check(self, require_position: bool = True) -> None:
        """Validate against the applicability table."""
        loss_req, refl_req = APPLICABILITY[self.kind]
        if loss_req and self.loss_db is None:
            raise ValueError(f"{self.kind.name} requires loss_db")
        if not loss_req and self.loss_db is not None:
            raise ValueError(f"{self.kind.name} does not carry a loss")
        if refl_req and self.reflectance_db is None:
            raise ValueError(f"{self.kind.name} requires reflectance_db")
        if refl_req is False and self.reflectance_db is not None:
            raise ValueError(f"{self.kind.name} does not carry a reflectance")
        if self.kind == EventKind.NoEvent:
            if self.position_index is not None:
                raise ValueError("NoEvent has no position")
        elif require_position:
            if self.position_index is None:
                raise ValueError(f"{self.kind.name} requires position_index")
            if not POS_MIN <= self.position_index <= POS_MAX:
                raise ValueError(
                    f"position_index {self.position_index} outside [{POS_MIN}, {POS_MAX}]"
                )


@dataclass
class SequenceSample:
    power_db: np.ndarray
    true_snr_db: float
    params: EventParams
    # Absolute position of the sequence start, metres from the OTDR.
    start_m: float = 0.0

    def __post_init__(self):
        self.power_db = np.asarray(self.power_db, dtype=float)
        if self.power_db.shape != (SEQ_LEN,) or not np.all(np.isfinite(self.power_db)):
            raise ValueError("power_db must hold 30 finite samples")
        if not 0.0 <= self.true_snr_db <= 30.0:
            raise ValueError("true_snr_db must lie in [0, 30]")


@dataclass(frozen=True)
class LinkSpec:
    total_length_m: float
    events: tuple = ()  # (distance_m, EventParams) pairs
    launch_power_db: float = 0.0
    averaging_count: int = 1024
    single_shot_snr_db: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if self.total_length_m <= 0:
            raise ValueError("total_length_m must be positive")
        if self.averaging_count < 1:
            raise ValueError("averaging_count must be >= 1")
        last = -math.inf
        for dist, ev in self.events:
            if not 0 <= dist <= self.total_length_m:
                raise ValueError(f"event at {dist} m outside the link")
            if dist <= last:
                raise ValueError("event distances must be strictly increasing")
            if ev.kind == EventKind.NoEvent:
                raise ValueError("NoEvent cannot be placed on a link")
            last = dist


# ----------------------------------------------------------------------------
# random streams


def derive_rng(root_seed: int, counter: int) -> np.random.Generator:
    """Independent stream for work item ``counter`` under ``root_seed``.

    The pair is hashed by ``SeedSequence`` so neighbouring counters give
    unrelated streams and results do not depend on evaluation order.
    """
    return np.random.default_rng(np.random.SeedSequence([int(root_seed) & (2**64 - 1), int(counter)]))


# ----------------------------------------------------------------------------
# physics


def backscatter_level(distance_m, cfg: SimConfig = SimConfig()):
    """Rayleigh backscatter level (dB re launch) at ``distance_m``."""
    d = np.asarray(distance_m, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be nonnegative")
    out = cfg.backscatter_ref_db - 2.0 * cfg.atten_db_per_km * d / 1000.0
    return float(out) if out.ndim == 0 else out


def peak_height_db(effective_reflectance_db: float, cfg: SimConfig) -> tuple[float, float]:
    """Return (displayed peak height, unclipped height) above backscatter, dB."""
    x = effective_reflectance_db - cfg.backscatter_ref_db
    raw = 10.0 * math.log10(1.0 + 10.0 ** (x / 10.0)) if x < 300 else x
    return min(raw, cfg.peak_ceiling_db), raw


def receiver_kernel(sigma: float) -> np.ndarray:
    """Causal half-Gaussian impulse response, truncated at 4 sigma, unit sum."""
    if sigma <= 0:
        return np.ones(1)
    k = np.arange(int(math.ceil(4 * sigma)) + 1, dtype=float)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def _ramp(k: np.ndarray, width: float) -> np.ndarray:
    return np.clip((k + 1.0) / width, 0.0, 1.0)


def event_factor(params: EventParams, k: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """Unsmoothed linear power factor of an event, ``k`` samples after onset.

    Equals 1 for ``k < 0``. Multiplies the local backscatter level.
    """
    P = cfg.pulse_samples
    half = max(1, P // 2)
    kind = params.kind
    k = np.asarray(k, dtype=float)
    if kind == EventKind.NoEvent:
        return np.ones_like(k)

    loss = params.loss_db or 0.0
    if kind == EventKind.Bending:
        loss_db = loss * _ramp(k, BEND_ZONE_PULSES * P)
    else:
        loss_db = loss * _ramp(k, P)
    if kind == EventKind.Tapping:
        loss_db = loss_db + TAP_NOTCH_DB * ((k >= 0) & (k < half))

    if kind == EventKind.BrokenFiber:
        out = 1.0 - _ramp(k, P)
    else:
        out = 10.0 ** (-loss_db / 10.0)

    bump_db = {EventKind.BadSplice: SPLICE_BUMP_DB, EventKind.Reflector: APC_PEAK_DB}.get(kind)
    if bump_db is not None:
        width = APC_SAMPLES if kind == EventKind.Reflector else half
        out = out + (10.0 ** (bump_db / 10.0) - 1.0) * ((k >= 0) & (k < width))

    r_eff = params.effective_reflectance_db
    if r_eff is not None:
        out = out + _peak_linear(k, kind, r_eff, cfg)
    return np.where(k >= 0, out, 1.0)


def pulse_shape(k, cfg: SimConfig) -> np.ndarray:
    """Reflected pulse envelope (linear, peak 1) over its ``P`` samples.

    The first samples follow a Gaussian rise; a strong reflection therefore
    shows a leading edge whose level below the plateau is fixed, which keeps
    its height readable even when the plateau saturates.
    """
    P = cfg.pulse_samples
    k = np.asarray(k, dtype=float)
    edge = min(PULSE_EDGE_SAMPLES, P - 1)
    rise = np.exp(-0.5 * ((edge - k) / PULSE_EDGE_SIGMA) ** 2)
    g = np.where(k < edge, rise, 1.0)
    return np.where((k >= 0) & (k < P), g, 0.0)


def _peak_linear(kp, kind, r_eff, cfg: SimConfig) -> np.ndarray:
    """Linear excess power of a reflective peak, ``kp`` samples after it starts."""
    P = cfg.pulse_samples
    height, raw = peak_height_db(r_eff, cfg)
    edge = min(PULSE_EDGE_SAMPLES, P - 1)
    in_peak = (kp >= 0) & (kp < P)
    g = pulse_shape(kp, cfg)
    shown = 10.0 * np.log10(1.0 + (10.0 ** (raw / 10.0) - 1.0) * np.maximum(g, 1e-300))
    shown = np.minimum(shown, cfg.peak_ceiling_db)
    # the top of a dirty connector rises, the top before a break falls
    frac = np.clip((kp - edge) / max(P - 1 - edge, 1), 0.0, 1.0)
    on_top = kp >= edge
    if kind == EventKind.DirtyConnector:
        shown = shown - np.where(on_top, DIRTY_RISE_DB * (1.0 - frac), 0.0)
    elif kind == EventKind.BrokenFiber:
        shown = shown - np.where(on_top, BREAK_FALL_DB * frac, 0.0)
    out = np.where(in_peak, 10.0 ** (np.maximum(shown, 0.0) / 10.0) - 1.0, 0.0)
    if raw > cfg.peak_ceiling_db:
        # receiver recovery after saturation
        post = kp - P + 1.0
        tau = SAT_TAIL_SAMPLES_PER_DB * (raw - cfg.peak_ceiling_db)
        tail_db = height * np.exp(-np.maximum(post, 0.0) / tau)
        out = out + np.where(post >= 1.0, 10.0 ** (tail_db / 10.0) - 1.0, 0.0)
    return out


def _smooth_linear(factor: np.ndarray, cfg: SimConfig) -> np.ndarray:
    kern = receiver_kernel(cfg.smoothing_sigma_samples)
    pad = np.concatenate([np.ones(len(kern) - 1), factor])
    return np.convolve(pad, kern, mode="valid")


def event_signature(params: EventParams, cfg: SimConfig = SimConfig(), n: int = SEQ_LEN) -> np.ndarray:
    """Noiseless dB profile of one event relative to the local backscatter.

    Samples past a fiber break are ``-inf`` (replaced by noise at synthesis).
    """
    params.check()
    if params.kind == EventKind.NoEvent:
        return np.zeros(n)
    k = np.arange(n) - params.position_index
    lin = _smooth_linear(event_factor(params, k, cfg), cfg)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(np.maximum(lin, 0.0))
    out[np.abs(out) < 1e-12] = 0.0
    return out


def sample_event_params(kind: EventKind, shifted: bool = False, rng=None) -> EventParams:
    """Draw event parameters from the per-kind training (or shifted) ranges."""
    rng = np.random.default_rng() if rng is None else rng
    kind = EventKind(kind)
    if kind == EventKind.NoEvent:
        return EventParams(kind)
    loss = refl = None
    voa = 0.0
    if kind in LOSS_RANGES:
        lo, hi = LOSS_RANGES[kind]
        if shifted:
            lo, hi = lo + SHIFT_FRACTION * (hi - lo), hi + SHIFT_FRACTION * (hi - lo)
        loss = float(rng.uniform(lo, hi))
    if kind in REFLECTANCE_RANGES:
        lo, hi = REFLECTANCE_RANGES[kind]
        draw = float(rng.uniform(lo, hi))
        if kind == EventKind.BrokenFiber:
            refl = draw if rng.random() < 0.5 else None
        else:
            refl = draw
    if kind == EventKind.Reflector:
        voa = float(rng.uniform(*(SHIFTED_VOA_RANGE if shifted else VOA_RANGE)))
    return EventParams(kind, loss_db=loss, reflectance_db=refl, voa_atten_db=voa)


def _to_db(lin: np.ndarray) -> np.ndarray:
    floor = 10.0 ** (FLOOR_DB / 10.0)
    return 10.0 * np.log10(np.maximum(lin, floor))


def synth_sequence(
    kind: EventKind,
    snr_db: float,
    cfg: SimConfig = SimConfig(),
    rng=None,
    shifted: bool = False,
    max_start_m: float = 2_000.0,
) -> SequenceSample:
    """One labeled 30-sample sequence with white noise at ``snr_db``.

    Noise std in linear units is the local backscatter power divided by
    ``10**(snr_db/10)``.
    """
    if not 0.0 <= snr_db <= 30.0:
        raise ValueError(f"snr_db {snr_db} outside [0, 30]")
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    params = sample_event_params(kind, shifted, rng)
    if params.kind != EventKind.NoEvent:
        params = replace(params, position_index=int(rng.integers(POS_MIN, POS_MAX + 1)))
    start_m = float(rng.uniform(0.0, max_start_m))
    dist = start_m + np.arange(SEQ_LEN) * cfg.meters_per_sample
    base = 10.0 ** (backscatter_level(dist, cfg) / 10.0)
    sig = event_signature(params, cfg)
    clean = base * 10.0 ** (sig / 10.0)
    sigma = base[0] / 10.0 ** (snr_db / 10.0)
    noisy = clean + sigma * rng.standard_normal(SEQ_LEN)
    return SequenceSample(_to_db(noisy), float(snr_db), params, start_m)


def synth_trace(link: LinkSpec, cfg: SimConfig = SimConfig(), rng=None):
    """Full averaged trace along ``link``.

    Returns ``(distance_m, power_db, truth)`` where ``truth`` lists
    ``(onset_index, EventParams)`` with sample-aligned onsets. Single-shot
    noise std is ``P_launch_backscatter / 10**(single_shot_snr_db/10)``;
    averaging ``M`` traces divides it by ``sqrt(M)``.
    """
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    mps = cfg.meters_per_sample
    n = int(math.floor(link.total_length_m / mps)) + 1
    dist = np.arange(n) * mps
    onsets = [int(round(d / mps)) for d, _ in link.events]
    min_gap = 2 * cfg.pulse_samples
    for a, b in zip(onsets, onsets[1:]):
        if b - a < min_gap:
            raise ValueError("events closer than twice the pulse width")

    lin = 10.0 ** ((backscatter_level(dist, cfg) + link.launch_power_db) / 10.0)
    factor = np.ones(n)
    truth = []
    for onset, (_, ev) in zip(onsets, link.events):
        ev = replace(ev, position_index=onset)
        ev.check(require_position=False)
        factor = factor * event_factor(ev, np.arange(n) - onset, cfg)
        truth.append((onset, ev))
    factor = _smooth_linear(factor, cfg)
    clean = lin * factor
    p0 = 10.0 ** ((cfg.backscatter_ref_db + link.launch_power_db) / 10.0)
    sigma = p0 / 10.0 ** (link.single_shot_snr_db / 10.0) / math.sqrt(link.averaging_count)
    noisy = clean + sigma * rng.standard_normal(n)
    return dist, _to_db(noisy), truth


def estimate_snr(power_db) -> float:
    """Robust SNR estimate (dB) of one sequence, clipped to [0, 30].

    Noise std comes from the MAD of first differences of the linear samples,
    which ignores isolated spikes and steps. A reflective peak and its
    recovery tail can occupy half the window, so the MAD is then taken again
    over difference pairs whose samples both sit within ``SNR_CLIP_SIGMAS``
    noise stds of the median level (twice).
    """
    p = np.asarray(power_db, dtype=float)
    lin = 10.0 ** (p / 10.0)
    d = np.diff(lin)
    level = np.median(lin)
    sigma = _mad_sigma(d)
    for _ in range(SNR_REFINE_PASSES):
        keep = lin <= level + SNR_CLIP_SIGMAS * sigma
        pairs = keep[1:] & keep[:-1]
        if pairs.sum() < SNR_MIN_PAIRS:
            break
        sigma = _mad_sigma(d[pairs])
    if sigma <= 0 or level <= 0:
        return 30.0
    return float(np.clip(10.0 * math.log10(level / sigma), 0.0, 30.0))


def _mad_sigma(d: np.ndarray) -> float:
    return float(1.4826 * np.median(np.abs(d - np.median(d))) / math.sqrt(2.0))


def save_trace_csv(path, distance_m, power_db) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["distance_m", "power_db"])
        for d, p in zip(distance_m, power_db):
            w.writerow([repr(float(d)), repr(float(p))])


def load_trace_csv(path):
    dist, power = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["distance_m", "power_db"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            dist.append(float(row[0]))
            power.append(float(row[1]))
    return np.array(dist), np.array(power)
