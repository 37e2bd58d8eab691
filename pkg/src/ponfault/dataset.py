"""Sequence dataset: features, normalisation, targets, splits and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from . import otdr_sim as sim
from .otdr_sim import EventKind, EventParams, SimConfig, SEQ_LEN, POS_MIN, POS_MAX

SPLITS = ("train", "val", "test", "shifted_test")
POWER_COLUMNS = [f"p{i:02d}" for i in range(SEQ_LEN)]
CSV_COLUMNS = POWER_COLUMNS + [
    "delta_raw", "gamma_raw", "class_index", "position_index",
    "loss_db", "reflectance_db", "true_snr_db", "split_tag",
]


@dataclass(frozen=True)
class NormConstants:
    delta_min: float = -90.0
    delta_max: float = -40.0
    gamma_max: float = 30.0
    loss_scale: float = 10.0
    refl_offset: float = 80.0
    refl_scale: float = 70.0
    # per-sequence min-max power scaling; False uses the delta range instead
    per_sequence: bool = True


@dataclass(frozen=True)
class EventLabel:
    class_index: int
    position_norm: float | None = None
    reflectance_norm: float | None = None
    loss_norm: float | None = None

    def __post_init__(self):
        if not 0 <= self.class_index < sim.N_CLASSES:
            raise ValueError(f"class_index {self.class_index} outside [0, 7]")
        if self.class_index == 0 and any(self.mask):
            raise ValueError("NoEvent labels carry no targets")
        for v in (self.position_norm, self.reflectance_norm, self.loss_norm):
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError("normalised targets must lie in [0, 1]")

    @property
    def mask(self) -> tuple:
        return (self.position_norm is not None, self.reflectance_norm is not None,
                self.loss_norm is not None)

    def targets(self) -> np.ndarray:
        return np.array([v if v is not None else 0.0 for v in
                         (self.position_norm, self.reflectance_norm, self.loss_norm)])


def compute_delta(power_db) -> float:
    """Maximum raw sample amplitude (dB)."""
    return float(np.max(np.asarray(power_db, dtype=float)))


def normalize_sample(power_db, delta_raw, gamma_raw, norm: NormConstants = NormConstants()) -> np.ndarray:
    """(30, 3) model input: scaled power, delta and gamma broadcast per step."""
    p = np.asarray(power_db, dtype=float)
    if p.shape != (SEQ_LEN,):
        raise ValueError("power_db must have 30 samples")
    if not (np.all(np.isfinite(p)) and math.isfinite(delta_raw) and math.isfinite(gamma_raw)):
        raise ValueError("non-finite input")
    span = norm.delta_max - norm.delta_min
    if norm.per_sequence:
        lo, hi = p.min(), p.max()
        power = np.full(SEQ_LEN, 0.5) if hi == lo else (p - lo) / (hi - lo)
    else:
        power = np.clip((p - norm.delta_min) / span, 0.0, 1.0)
    d = min(max((delta_raw - norm.delta_min) / span, 0.0), 1.0)
    g = min(max(gamma_raw / norm.gamma_max, 0.0), 1.0)
    return np.stack([power, np.full(SEQ_LEN, d), np.full(SEQ_LEN, g)], axis=1)


def _clip01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def encode_targets(params: EventParams, norm: NormConstants = NormConstants()) -> EventLabel:
    """Normalised supervision targets; absent quantities are masked."""
    if params.kind == EventKind.NoEvent:
        return EventLabel(0)
    pos = params.position_index / (SEQ_LEN - 1) if params.position_index is not None else None
    loss = _clip01(params.loss_db / norm.loss_scale) if params.loss_db is not None else None
    r_eff = params.effective_reflectance_db
    refl = _clip01((r_eff + norm.refl_offset) / norm.refl_scale) if r_eff is not None else None
    return EventLabel(int(params.kind), pos, refl, loss)


def decode_targets(pred, norm: NormConstants = NormConstants(), cfg: SimConfig = SimConfig()):
    """(position_norm, reflectance_norm, loss_norm) -> (metres, dB, dB).

    Inputs are clipped to [0, 1] first. Accepts scalars or arrays.
    """
    pos, refl, loss = (np.clip(np.asarray(v, dtype=float), 0.0, 1.0) for v in pred)
    position_m = pos * (SEQ_LEN - 1) * cfg.meters_per_sample
    reflectance_db = refl * norm.refl_scale - norm.refl_offset
    loss_db = loss * norm.loss_scale
    out = (position_m, reflectance_db, loss_db)
    if all(np.ndim(v) == 0 for v in out):
        return tuple(float(v) for v in out)
    return out


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Column store of raw sequences with labels and split tags.

    ``reflectance_db`` is the effective reflectance seen by the OTDR (after
    any VOA); ``position_index`` is -1 and loss/reflectance NaN when absent.
    """

    power_db: np.ndarray  # (N, 30)
    delta_raw: np.ndarray
    gamma_raw: np.ndarray
    class_index: np.ndarray
    position_index: np.ndarray
    loss_db: np.ndarray
    reflectance_db: np.ndarray
    true_snr_db: np.ndarray
    split_tag: np.ndarray  # str objects

    def __post_init__(self):
        self.power_db = np.asarray(self.power_db, dtype=float).reshape(-1, SEQ_LEN)
        n = len(self.power_db)
        for name in ("delta_raw", "gamma_raw", "loss_db", "reflectance_db", "true_snr_db"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(n))
        self.class_index = np.asarray(self.class_index, dtype=np.int64).reshape(n)
        self.position_index = np.asarray(self.position_index, dtype=np.int64).reshape(n)
        self.split_tag = np.asarray(self.split_tag, dtype=object).reshape(n)

    def __len__(self):
        return len(self.power_db)

    @classmethod
    def empty(cls) -> Dataset:
        z = np.zeros(0)
        return cls(np.zeros((0, SEQ_LEN)), z, z, z, z, z, z, z, np.zeros(0, dtype=object))

    @classmethod
    def from_samples(cls, samples, splits, gamma_source: str = "estimate") -> Dataset:
        """Build from ``SequenceSample`` objects and matching split tags."""
        if gamma_source not in ("estimate", "true"):
            raise ValueError("gamma_source must be 'estimate' or 'true'")
        rows = []
        for s in samples:
            ev = s.params
            gamma = sim.estimate_snr(s.power_db) if gamma_source == "estimate" else s.true_snr_db
            r_eff = ev.effective_reflectance_db
            rows.append((
                s.power_db, compute_delta(s.power_db), gamma, int(ev.kind),
                -1 if ev.position_index is None else ev.position_index,
                math.nan if ev.loss_db is None else ev.loss_db,
                math.nan if r_eff is None else r_eff,
                s.true_snr_db,
            ))
        if not rows:
            return cls.empty()
        cols = list(zip(*rows))
        return cls(np.array(cols[0]), *(np.array(c) for c in cols[1:]), np.array(list(splits), dtype=object))

    def subset(self, selector) -> Dataset:
        if isinstance(selector, str):
            selector = self.split_tag == selector
        return Dataset(*(getattr(self, f)[selector] for f in self._fields()))

    @staticmethod
    def _fields():
        return ("power_db", "delta_raw", "gamma_raw", "class_index", "position_index",
                "loss_db", "reflectance_db", "true_snr_db", "split_tag")

    def event_params(self, i: int) -> EventParams:
        """Label of row ``i`` as EventParams (reflectance is the effective one)."""
        kind = EventKind(int(self.class_index[i]))
        pos = int(self.position_index[i])
        loss = float(self.loss_db[i])
        refl = float(self.reflectance_db[i])
        return EventParams(kind, None if math.isnan(loss) else loss,
                           None if math.isnan(refl) else refl, 0.0, None if pos < 0 else pos)

    def labels(self, i: int, norm: NormConstants = NormConstants()) -> EventLabel:
        return encode_targets(self.event_params(i), norm)

    def inputs(self, norm: NormConstants = NormConstants()) -> np.ndarray:
        out = np.empty((len(self), SEQ_LEN, 3))
        for i in range(len(self)):
            out[i] = normalize_sample(self.power_db[i], self.delta_raw[i], self.gamma_raw[i], norm)
        return out

    def targets(self, norm: NormConstants = NormConstants()):
        """(targets (N, 3), mask (N, 3)) in the order position, reflectance, loss."""
        mask = np.stack([self.position_index >= 0, ~np.isnan(self.reflectance_db),
                         ~np.isnan(self.loss_db)], axis=1)
        pos = np.where(mask[:, 0], self.position_index, 0) / (SEQ_LEN - 1)
        refl = np.clip((np.nan_to_num(self.reflectance_db) + norm.refl_offset) / norm.refl_scale, 0, 1)
        loss = np.clip(np.nan_to_num(self.loss_db) / norm.loss_scale, 0, 1)
        t = np.stack([pos, refl, loss], axis=1)
        return np.where(mask, t, 0.0), mask

    def arrays(self, split: str | None = None, norm: NormConstants = NormConstants()):
        """``(X, class_index, targets, mask)`` ready for training."""
        ds = self if split is None else self.subset(split)
        t, m = ds.targets(norm)
        return ds.inputs(norm), ds.class_index.copy(), t, m

    def __eq__(self, other):
        if not isinstance(other, Dataset) or len(self) != len(other):
            return False
        for f in self._fields():
            a, b = getattr(self, f), getattr(other, f)
            if a.dtype == object:
                if not np.array_equal(a, b):
                    return False
            elif not np.array_equal(a, b, equal_nan=True):
                return False
        return True


def split_counts(n: int) -> tuple:
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    return n_train, n_val, n - n_train - n_val


def build_dataset(n_per_class: int, cfg: SimConfig = SimConfig(), seed: int = 0,
                  snr_sampler=None, shifted: bool = False, gamma_source: str = "estimate") -> Dataset:
    """Balanced synthetic dataset with a stratified 60/20/20 split.

    Sample ``j`` of class ``k`` uses the random stream
    ``derive_rng(seed, k * n_per_class + j)``, so the result does not depend
    on generation order. ``snr_sampler(rng)`` defaults to U[0, 30] dB. With
    ``shifted=True`` every sample is drawn from the shifted ranges and tagged
    ``shifted_test``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if snr_sampler is None:
        snr_sampler = lambda rng: float(rng.uniform(0.0, 30.0))
    samples, splits = [], []
    split_rng = np.random.default_rng([seed, 0x5EED])
    for k in EventKind:
        tags = np.empty(n_per_class, dtype=object)
        if shifted:
            tags[:] = "shifted_test"
        else:
            n_train, n_val, _ = split_counts(n_per_class)
            order = split_rng.permutation(n_per_class)
            tags[order[:n_train]] = "train"
            tags[order[n_train:n_train + n_val]] = "val"
            tags[order[n_train + n_val:]] = "test"
        for j in range(n_per_class):
            rng = sim.derive_rng(seed, int(k) * n_per_class + j)
            snr = snr_sampler(rng)
            samples.append(sim.synth_sequence(k, snr, cfg, rng, shifted=shifted))
            splits.append(tags[j])
    return Dataset.from_samples(samples, splits, gamma_source)


def slice_trace(power_db, truth, stride: int = SEQ_LEN, start_index: int = 0):
    """Cut a trace into labelled 30-sample windows.

    ``truth`` lists ``(onset_index, EventParams)``. A window is labelled with
    the event whose onset lies at window offset 2..27; windows holding an
    onset at offsets 0, 1, 28, 29, or more than one onset, are dropped.
    Returns ``(window_start, power_db window, EventParams)`` triples.
    """
    p = np.asarray(power_db, dtype=float)
    if len(p) < SEQ_LEN:
        raise ValueError("trace shorter than 30 samples")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    onsets = sorted((int(o), ev) for o, ev in truth)
    out = []
    for s in range(start_index, len(p) - SEQ_LEN + 1, stride):
        inside = [(o - s, ev) for o, ev in onsets if s <= o < s + SEQ_LEN]
        if not inside:
            out.append((s, p[s: s + SEQ_LEN].copy(), EventParams(EventKind.NoEvent)))
        elif len(inside) == 1 and POS_MIN <= inside[0][0] <= POS_MAX:
            off, ev = inside[0]
            out.append((s, p[s: s + SEQ_LEN].copy(), replace(ev, position_index=off)))
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(path, ds: Dataset) -> None:
    """CSV with a header row; floats are written in shortest round-trip form."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for i in range(len(ds)):
            w.writerow([*(_fmt(v) for v in ds.power_db[i]), _fmt(ds.delta_raw[i]), _fmt(ds.gamma_raw[i]),
                        int(ds.class_index[i]), int(ds.position_index[i]), _fmt(ds.loss_db[i]),
                        _fmt(ds.reflectance_db[i]), _fmt(ds.true_snr_db[i]), ds.split_tag[i]])


def load_dataset(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: missing header row") from None
        if header != CSV_COLUMNS:
            raise DatasetFormatError(f"{path}: header does not match the dataset schema")
        rows = []
        for rowno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise DatasetFormatError(f"{path}: row {rowno} has {len(row)} fields, expected {len(CSV_COLUMNS)}")
            rows.append(_parse_row(path, rowno, row))
    if not rows:
        return Dataset.empty()
    cols = list(zip(*rows))
    return Dataset(np.array(cols[0]), *(np.array(c) for c in cols[1:-1]), np.array(cols[-1], dtype=object))


def _parse_row(path, rowno, row):
    def num(col):
        j = CSV_COLUMNS.index(col)
        try:
            return float(row[j])
        except ValueError:
            raise DatasetFormatError(f"{path}: row {rowno}, column {col}: not a number: {row[j]!r}") from None

    def integer(col):
        v = num(col)
        if v != int(v):
            raise DatasetFormatError(f"{path}: row {rowno}, column {col}: not an integer")
        return int(v)

    power = [num(c) for c in POWER_COLUMNS]
    for c, v in zip(POWER_COLUMNS, power):
        if not math.isfinite(v):
            raise DatasetFormatError(f"{path}: row {rowno}, column {c}: non-finite power")
    cls = integer("class_index")
    if not 0 <= cls < sim.N_CLASSES:
        raise DatasetFormatError(f"{path}: row {rowno}, column class_index: {cls} outside [0, 7]")
    pos = integer("position_index")
    if pos != -1 and not 0 <= pos < SEQ_LEN:
        raise DatasetFormatError(f"{path}: row {rowno}, column position_index: {pos} out of range")
    if (cls == 0) != (pos == -1):
        raise DatasetFormatError(f"{path}: row {rowno}, column position_index: inconsistent with class {cls}")
    tag = row[CSV_COLUMNS.index("split_tag")]
    if tag not in SPLITS:
        raise DatasetFormatError(f"{path}: row {rowno}, column split_tag: unknown split {tag!r}")
    return (power, num("delta_raw"), num("gamma_raw"), cls, pos, num("loss_db"),
            num("reflectance_db"), num("true_snr_db"), tag)
