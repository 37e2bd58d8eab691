"""Conventional detector: template correlation plus event thresholds.

Two canonical shapes are matched against the raw dB sequence: a reflective
peak one pulse wide and a non-reflective step, which after the pulse and
the receiver response looks like a ramp one pulse long. For every candidate
onset the template is aligned to that onset and compared on a 15-sample
sub-window that ends just after it, so the match is made on the pre-event
baseline and the leading edge (a later falling edge of a long reflection
would otherwise look like a loss step). The detector only says
whether an event is present and where; it does not name the fault.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .otdr_sim import FLOOR_DB, POS_MAX, POS_MIN, SEQ_LEN, SimConfig, pulse_shape, receiver_kernel

SUB_WINDOW = 15
LEAD = 13  # sub-window samples before the candidate onset
TEMPLATE_ONSET = 10
TEMPLATE_PEAK_DB = 20.0
GROUPS = ("reflective", "nonreflective")


def _standardize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    v = v - v.mean(axis=-1, keepdims=True)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


@dataclass(frozen=True)
class TemplateBank:
    reflective_template: np.ndarray
    nonreflective_template: np.ndarray
    onset_index: int = TEMPLATE_ONSET

    def __post_init__(self):
        for t in (self.reflective_template, self.nonreflective_template):
            if t.shape != (SEQ_LEN,):
                raise ValueError("templates must have 30 samples")
            if abs(np.linalg.norm(t) - 1.0) > 1e-12 or abs(t.mean()) > 1e-12:
                raise ValueError("templates must be zero-mean and unit-norm")

    def templates(self):
        return (self.reflective_template, self.nonreflective_template)


@dataclass(frozen=True)
class ThresholdConfig:
    corr_threshold: float
    amplitude_threshold_db: float

    def __post_init__(self):
        if not 0.0 < self.corr_threshold < 1.0:
            raise ValueError("corr_threshold must lie in (0, 1)")
        if not self.amplitude_threshold_db > 0.0:
            raise ValueError("amplitude_threshold_db must be positive")

    def to_json(self) -> str:
        return json.dumps({"corr_threshold": self.corr_threshold,
                           "amplitude_threshold_db": self.amplitude_threshold_db}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> ThresholdConfig:
        d = json.loads(text)
        if set(d) != {"corr_threshold", "amplitude_threshold_db"}:
            raise ValueError("threshold JSON must hold exactly corr_threshold and amplitude_threshold_db")
        return cls(float(d["corr_threshold"]), float(d["amplitude_threshold_db"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> ThresholdConfig:
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class Detection:
    event: bool
    kind_group: str  # "reflective" | "nonreflective" | "none"
    position_index: int | None
    correlation: float
    amplitude_db: float


def build_templates(cfg: SimConfig = SimConfig()) -> TemplateBank:
    """Canonical peak and step profiles, smoothed like the simulated traces.

    The peak is a reflected pulse of moderate height (``TEMPLATE_PEAK_DB``)
    in dB, so it carries the same rounded leading edge as real reflections.
    """
    P = cfg.pulse_samples
    onset = TEMPLATE_ONSET
    k = np.arange(SEQ_LEN)
    g = pulse_shape(k - onset, cfg)
    peak = 10.0 * np.log10(1.0 + (10.0 ** (TEMPLATE_PEAK_DB / 10.0) - 1.0) * g)
    step = -np.clip((k - onset + 1) / P, 0.0, 1.0)
    kern = receiver_kernel(cfg.smoothing_sigma_samples)

    def smooth(v):
        pad = np.concatenate([np.full(len(kern) - 1, v[0]), v])
        return np.convolve(pad, kern, mode="valid")

    return TemplateBank(_standardize(smooth(peak)), _standardize(smooth(step)), onset)


def normalized_cross_correlation(window, template) -> float:
    """Pearson-style correlation of ``window`` with a standardized template."""
    w = np.asarray(window, dtype=float)
    t = np.asarray(template, dtype=float)
    if w.shape != t.shape:
        raise ValueError("window and template lengths differ")
    w = w - w.mean()
    n = np.linalg.norm(w)
    if n == 0.0 or not math.isfinite(n):
        return 0.0
    return float(np.clip(np.dot(w / n, t), -1.0, 1.0))


def _alignments(bank: TemplateBank):
    """Candidate onsets, sub-window starts and aligned template crops (2, C, 15)."""
    positions = np.arange(POS_MIN, POS_MAX + 1)
    starts = np.clip(positions - LEAD, 0, SEQ_LEN - SUB_WINDOW)
    crops = np.empty((2, len(positions), SUB_WINDOW))
    for g, tmpl in enumerate(bank.templates()):
        for c, (pos, s) in enumerate(zip(positions, starts)):
            # shift the canonical profile so its onset lands on pos; edges extend
            idx = np.clip(np.arange(s, s + SUB_WINDOW) - pos + bank.onset_index, 0, SEQ_LEN - 1)
            crops[g, c] = tmpl[idx]
    return positions, starts, _standardize(crops)


def features(sequences, bank: TemplateBank):
    """Best correlation, its group and onset, and the amplitude feature.

    Returns arrays ``(corr, group, position, amplitude_db)`` for a batch of
    raw dB sequences (N, 30). Ties go to the earliest onset, then to the
    reflective template.
    """
    X = np.asarray(sequences, dtype=float)
    if X.ndim == 1:
        X = X[None]
    if X.shape[1] != SEQ_LEN:
        raise ValueError("sequences must have 30 samples")
    if np.isnan(X).any():
        raise ValueError("sequences contain NaN")
    X = np.maximum(X, FLOOR_DB)
    positions, starts, crops = _alignments(bank)
    idx = starts[:, None] + np.arange(SUB_WINDOW)  # (C, 15)
    W = _standardize(X[:, idx])  # (N, C, 15)
    corr = np.einsum("ncw,gcw->ngc", W, crops)
    flat = corr.reshape(len(X), -1)
    best = np.argmax(flat, axis=1)
    group, cand = np.divmod(best, len(positions))
    rows = np.arange(len(X))
    windows = X[:, idx][rows, cand]
    amp = np.max(np.abs(windows - np.median(windows, axis=1, keepdims=True)), axis=1)
    return np.clip(flat[rows, best], -1.0, 1.0), group, positions[cand], amp


def detect_batch(sequences, bank: TemplateBank, thresholds: ThresholdConfig) -> list:
    corr, group, pos, amp = features(sequences, bank)
    out = []
    for c, g, p, a in zip(corr, group, pos, amp):
        hit = bool(c >= thresholds.corr_threshold and a >= thresholds.amplitude_threshold_db)
        out.append(Detection(hit, GROUPS[g] if hit else "none", int(p) if hit else None, float(c), float(a)))
    return out


def detect(sequence, bank: TemplateBank, thresholds: ThresholdConfig) -> Detection:
    return detect_batch(np.asarray(sequence, dtype=float)[None], bank, thresholds)[0]


def balanced_accuracy(labels, decisions) -> float:
    """Mean of the true-positive and true-negative rates (a missing class counts as 1)."""
    y = np.asarray(labels, dtype=bool)
    d = np.asarray(decisions, dtype=bool)
    tpr = (d & y).sum() / y.sum() if y.any() else 1.0
    tnr = (~d & ~y).sum() / (~y).sum() if (~y).any() else 1.0
    return float(0.5 * (tpr + tnr))


DEFAULT_CORR_GRID = tuple(np.round(np.arange(0.05, 1.0, 0.05), 2))
DEFAULT_AMP_GRID = tuple(np.round(np.arange(0.25, 20.01, 0.25), 2))


def calibrate(sequences, labels, bank: TemplateBank | None = None,
              corr_grid=DEFAULT_CORR_GRID, amp_grid=DEFAULT_AMP_GRID):
    """Grid search maximizing binary balanced accuracy.

    Ties are broken toward the higher correlation threshold, then toward the
    lower amplitude threshold. Returns ``(ThresholdConfig, best balanced
    accuracy)``.
    """
    y = np.asarray(labels, dtype=bool)
    if len(y) == 0:
        raise ValueError("calibration set is empty")
    if bank is None:
        bank = build_templates()
    corr, _, _, amp = features(sequences, bank)
    if len(corr) != len(y):
        raise ValueError("sequences and labels differ in length")
    best = (-1.0, None)
    for tc in sorted(corr_grid, reverse=True):
        for ta in sorted(amp_grid):
            ba = balanced_accuracy(y, (corr >= tc) & (amp >= ta))
            if ba > best[0]:
                best = (ba, (tc, ta))
    tc, ta = best[1]
    return ThresholdConfig(float(tc), float(ta)), best[0]


def grid_balanced_accuracy(sequences, labels, bank: TemplateBank,
                           corr_grid=DEFAULT_CORR_GRID, amp_grid=DEFAULT_AMP_GRID) -> np.ndarray:
    """Balanced accuracy at every grid point, shape (len(corr_grid), len(amp_grid))."""
    y = np.asarray(labels, dtype=bool)
    corr, _, _, amp = features(sequences, bank)
    return np.array([[balanced_accuracy(y, (corr >= tc) & (amp >= ta)) for ta in amp_grid]
                     for tc in corr_grid])
