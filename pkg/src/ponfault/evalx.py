"""Evaluation metrics: confusion matrix, SNR-binned P_d / P_FA, RMSE, baseline comparison.

SNR bins are 5 dB wide and centred on 0, 5, ..., 30 dB; a sample with SNR
``s`` falls in bin ``floor((s + 2.5) / 5)`` (clipped to the grid). Metric
cells without any eligible samples are reported as ``None``, never 0.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .otdr_sim import N_CLASSES, SEQ_LEN, EventKind, SimConfig

BIN_CENTERS = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
BIN_WIDTH = 5.0
FAULT_CLASSES = tuple(range(1, N_CLASSES))


def snr_bin_index(snr, centers=BIN_CENTERS) -> np.ndarray:
    """Index of the bin each SNR value falls in."""
    s = np.asarray(snr, dtype=float)
    c0 = centers[0]
    idx = np.floor((s - c0 + BIN_WIDTH / 2) / BIN_WIDTH).astype(int)
    return np.clip(idx, 0, len(centers) - 1)


def _check_classes(true, pred):
    t = np.asarray(true, dtype=int)
    p = np.asarray(pred, dtype=int)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {len(t)} true vs {len(p)} predicted")
    if t.size and (t.min() < 0 or t.max() >= N_CLASSES or p.min() < 0 or p.max() >= N_CLASSES):
        raise ValueError("class indices must lie in [0, 7]")
    return t, p


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (8, 8), rows = true, columns = predicted

    @property
    def row_normalized(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, totals, out=np.zeros(self.counts.shape), where=totals > 0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else math.nan

    def recall(self, c: int):
        row = self.counts[c].sum()
        return None if row == 0 else float(self.counts[c, c] / row)

    def fallout(self, c: int):
        negatives = self.total - self.counts[c].sum()
        if negatives == 0:
            return None
        fp = self.counts[:, c].sum() - self.counts[c, c]
        return float(fp / negatives)


def confusion_matrix(true_classes, predicted_classes) -> ConfusionMatrix:
    t, p = _check_classes(true_classes, predicted_classes)
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def _in_bin(snr, bin_index, centers):
    return snr_bin_index(snr, centers) == bin_index


def detection_probability(true, pred, snr, c: int, bin_index: int, centers=BIN_CENTERS):
    """Recall of class ``c`` among samples in the bin; None when it has none."""
    t, p = _check_classes(true, pred)
    sel = _in_bin(snr, bin_index, centers) & (t == c)
    n = int(sel.sum())
    return None if n == 0 else float((p[sel] == c).sum() / n)


def false_alarm_rate(true, pred, snr, c: int, bin_index: int, centers=BIN_CENTERS):
    """Fall-out of class ``c``: FP / (FP + TN) within the bin; None without negatives."""
    t, p = _check_classes(true, pred)
    sel = _in_bin(snr, bin_index, centers) & (t != c)
    n = int(sel.sum())
    return None if n == 0 else float((p[sel] == c).sum() / n)


@dataclass
class SnrBinnedMetric:
    """``values[c][b]``: metric for class ``c`` in bin ``b`` (None if undefined)."""

    bin_centers: tuple
    values: dict
    counts: dict

    def to_dict(self):
        return {"bin_centers": list(self.bin_centers),
                "values": {str(c): v for c, v in self.values.items()},
                "counts": {str(c): v for c, v in self.counts.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["bin_centers"]), {int(c): list(v) for c, v in d["values"].items()},
                   {int(c): list(v) for c, v in d["counts"].items()})

    def mean_over(self, classes, b):
        vals = [self.values[c][b] for c in classes if self.values[c][b] is not None]
        return float(np.mean(vals)) if vals else None


def binned_rates(true, pred, snr, centers=BIN_CENTERS):
    """(P_d, P_FA) tables for every class and bin."""
    t, p = _check_classes(true, pred)
    bins = snr_bin_index(snr, centers)
    pd, pfa, npos, nneg = {}, {}, {}, {}
    for c in range(N_CLASSES):
        pd[c], pfa[c], npos[c], nneg[c] = [], [], [], []
        for b in range(len(centers)):
            cm = confusion_matrix(t[bins == b], p[bins == b])
            pd[c].append(cm.recall(c))
            pfa[c].append(cm.fallout(c))
            npos[c].append(int(cm.counts[c].sum()))
            nneg[c].append(cm.total - int(cm.counts[c].sum()))
    return SnrBinnedMetric(tuple(centers), pd, npos), SnrBinnedMetric(tuple(centers), pfa, nneg)


@dataclass
class BinnedRmse:
    overall: float | None
    per_bin: list
    counts: list
    bin_centers: tuple = BIN_CENTERS

    def to_dict(self):
        return {"overall": self.overall, "per_bin": self.per_bin, "counts": self.counts,
                "bin_centers": list(self.bin_centers)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["overall"], list(d["per_bin"]), list(d["counts"]), tuple(d["bin_centers"]))


def _rmse(err):
    return None if err.size == 0 else float(np.sqrt(np.mean(err * err)))


def regression_rmse(pred, target, mask, snr, centers=BIN_CENTERS) -> BinnedRmse:
    """RMSE over unmasked entries, overall and per SNR bin (units of the inputs)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not pred.shape == target.shape == mask.shape:
        raise ValueError("pred, target and mask must have the same shape")
    err = pred - target
    bins = snr_bin_index(snr, centers)
    per_bin, counts = [], []
    for b in range(len(centers)):
        sel = mask & (bins == b)
        per_bin.append(_rmse(err[sel]))
        counts.append(int(sel.sum()))
    return BinnedRmse(_rmse(err[mask]), per_bin, counts, tuple(centers))


def rmse_subset(rm: BinnedRmse, min_snr: float):
    """Pooled RMSE over bins whose centre is at least ``min_snr``."""
    sq, n = 0.0, 0
    for c, v, k in zip(rm.bin_centers, rm.per_bin, rm.counts):
        if c >= min_snr and v is not None:
            sq += v * v * k
            n += k
    return None if n == 0 else math.sqrt(sq / n)


@dataclass
class BaselineComparison:
    gruae_binary_accuracy: float
    baseline_binary_accuracy: float
    gruae_pos_rmse_m: float | None
    baseline_pos_rmse_m: float | None
    n_samples: int
    n_position_pairs: int

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def compare_with_baseline(gruae_classes, gruae_positions_m, baseline_events, baseline_positions_m,
                          true_classes, true_positions_m, split_tags=None,
                          expected_split: str = "shifted_test") -> BaselineComparison:
    """Binary event/no-event accuracy and position RMSE of both methods.

    Position RMSE uses only samples where ground truth has an event and both
    methods declared one, so the two numbers cover identical samples.
    """
    g = np.asarray(gruae_classes, dtype=int)
    b = np.asarray(baseline_events, dtype=bool)
    t = np.asarray(true_classes, dtype=int)
    gp = np.asarray(gruae_positions_m, dtype=float)
    bp = np.asarray(baseline_positions_m, dtype=float)
    tp = np.asarray(true_positions_m, dtype=float)
    n = len(t)
    if not all(len(a) == n for a in (g, b, gp, bp, tp)):
        raise ValueError("GRU-AE, baseline and ground truth must cover the same samples")
    if split_tags is not None:
        tags = set(np.asarray(split_tags, dtype=object).tolist())
        if tags != {expected_split}:
            raise ValueError(f"comparison requires the {expected_split} split, got {sorted(tags)}")
    truth = t != 0
    g_event = g != 0
    both = truth & g_event & b
    return BaselineComparison(
        float(np.mean(g_event == truth)) if n else math.nan,
        float(np.mean(b == truth)) if n else math.nan,
        _rmse(gp[both] - tp[both]),
        _rmse(bp[both] - tp[both]),
        int(n), int(both.sum()),
    )


REGRESSION_QUANTITIES = (("position", "m"), ("reflectance", "dB"), ("loss", "dB"))


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    accuracy: float
    pd: SnrBinnedMetric
    pfa: SnrBinnedMetric
    rmse_position_m: BinnedRmse
    rmse_reflectance_db: BinnedRmse
    rmse_loss_db: BinnedRmse
    baseline_comparison: BaselineComparison | None = None

    def to_dict(self):
        return {
            "confusion_counts": self.confusion.counts.tolist(),
            "accuracy": self.accuracy,
            "pd": self.pd.to_dict(),
            "pfa": self.pfa.to_dict(),
            "rmse_position_m": self.rmse_position_m.to_dict(),
            "rmse_reflectance_db": self.rmse_reflectance_db.to_dict(),
            "rmse_loss_db": self.rmse_loss_db.to_dict(),
            "baseline_comparison": None if self.baseline_comparison is None
            else self.baseline_comparison.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        bc = d.get("baseline_comparison")
        return cls(
            ConfusionMatrix(np.array(d["confusion_counts"], dtype=np.int64)),
            d["accuracy"],
            SnrBinnedMetric.from_dict(d["pd"]),
            SnrBinnedMetric.from_dict(d["pfa"]),
            BinnedRmse.from_dict(d["rmse_position_m"]),
            BinnedRmse.from_dict(d["rmse_reflectance_db"]),
            BinnedRmse.from_dict(d["rmse_loss_db"]),
            None if bc is None else BaselineComparison.from_dict(bc),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    def write_figure_csvs(self, outdir) -> list:
        """Plot-ready CSVs (fig3..fig6, plus fig7 when a comparison is present)."""
        os.makedirs(outdir, exist_ok=True)
        paths = []

        def write(name, header, rows):
            path = os.path.join(outdir, name)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)
            paths.append(path)

        norm = self.confusion.row_normalized
        write("fig3_confusion.csv", ["true_class", "true_label", "predicted_class", "predicted_label",
                                     "count", "row_fraction"],
              [[i, EventKind(i).label, j, EventKind(j).label, int(self.confusion.counts[i, j]),
                _fmt(norm[i, j])] for i in range(N_CLASSES) for j in range(N_CLASSES)])
        for name, metric, col in (("fig4_pd.csv", self.pd, "pd"), ("fig5_pfa.csv", self.pfa, "pfa")):
            n_col = "n_positives" if col == "pd" else "n_negatives"
            write(name, ["class_index", "class_label", "snr_center_db", col, n_col],
                  [[c, EventKind(c).label, _fmt(metric.bin_centers[b]), _fmt(metric.values[c][b]),
                    metric.counts[c][b]] for c in FAULT_CLASSES for b in range(len(metric.bin_centers))])
        rows = []
        for (q, unit), rm in zip(REGRESSION_QUANTITIES, (self.rmse_position_m, self.rmse_reflectance_db,
                                                           self.rmse_loss_db)):
            rows.append([q, unit, "all", _fmt(rm.overall), sum(rm.counts)])
            rows += [[q, unit, _fmt(c), _fmt(v), k] for c, v, k in zip(rm.bin_centers, rm.per_bin, rm.counts)]
        write("fig6_rmse.csv", ["quantity", "unit", "snr_center_db", "rmse", "n"], rows)
        if self.baseline_comparison is not None:
            paths.append(write_comparison_csv(os.path.join(outdir, "fig7_comparison.csv"),
                                              self.baseline_comparison))
        return paths


def _fmt(x):
    return "" if x is None else repr(float(x))


def write_comparison_csv(path, comp: BaselineComparison):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "binary_accuracy", "position_rmse_m", "n_samples", "n_position_pairs"])
        w.writerow(["gru_ae", _fmt(comp.gruae_binary_accuracy), _fmt(comp.gruae_pos_rmse_m),
                    comp.n_samples, comp.n_position_pairs])
        w.writerow(["baseline", _fmt(comp.baseline_binary_accuracy), _fmt(comp.baseline_pos_rmse_m),
                    comp.n_samples, comp.n_position_pairs])
    return path


def build_report(true_classes, pred_classes, snr, reg_pred, reg_true, reg_mask,
                 centers=BIN_CENTERS, baseline_comparison=None) -> EvalReport:
    """Assemble a report from physical-unit regressions (N, 3): position m, reflectance dB, loss dB."""
    cm = confusion_matrix(true_classes, pred_classes)
    pd, pfa = binned_rates(true_classes, pred_classes, snr, centers)
    reg_pred = np.asarray(reg_pred, dtype=float).reshape(-1, 3)
    reg_true = np.asarray(reg_true, dtype=float).reshape(-1, 3)
    reg_mask = np.asarray(reg_mask, dtype=bool).reshape(-1, 3)
    rms = [regression_rmse(reg_pred[:, j], reg_true[:, j], reg_mask[:, j], snr, centers) for j in range(3)]
    return EvalReport(cm, cm.accuracy, pd, pfa, *rms, baseline_comparison)


def position_m_from_norm(pos_norm, cfg: SimConfig = SimConfig()):
    return np.asarray(pos_norm, dtype=float) * (SEQ_LEN - 1) * cfg.meters_per_sample


def model_outputs(params, ds, norm=None, cfg: SimConfig = SimConfig()):
    """GRU-AE predictions on a dataset in physical units.

    Returns ``(pred_classes, reg_pred (N, 3), reg_true (N, 3), mask (N, 3))``
    with columns position (m), reflectance (dB), loss (dB).
    """
    from . import dataset as D
    from . import gru_ae as G

    norm = D.NormConstants() if norm is None else norm
    X = ds.inputs(norm)
    probs, regs = G.predict_arrays(X, params)
    targets, mask = ds.targets(norm)
    pred = np.stack(D.decode_targets((regs[:, 0], regs[:, 1], regs[:, 2]), norm, cfg), axis=1)
    # targets go through the same decoding, so values outside the encodable
    # range compare against their clipped label
    true = np.stack(D.decode_targets((targets[:, 0], targets[:, 1], targets[:, 2]), norm, cfg), axis=1)
    return np.argmax(probs, axis=1), pred, true, mask


def evaluate_model(params, ds, norm=None, cfg: SimConfig = SimConfig(), centers=BIN_CENTERS) -> EvalReport:
    cls, pred, true, mask = model_outputs(params, ds, norm, cfg)
    return build_report(ds.class_index, cls, ds.true_snr_db, pred, true, mask, centers)
