"""Command-line entry point: ``ponfault <command> [options]``.

Every command accepts ``--config FILE`` (a JSON object) and flags; a flag
beats the file, which beats the built-in default. The fully resolved
configuration is written as ``config.json`` next to the outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import baseline as BL
from . import dataset as D
from . import evalx as E
from . import gru_ae as G
from . import otdr_sim as sim

log = logging.getLogger("ponfault")

DEFAULTS = {
    "simulate": {
        "out": None, "seed": 0, "n_traces": 1, "length_m": 2000.0, "launch_power_db": 0.0,
        "averaging_count": 1024, "single_shot_snr_db": 0.0, "events": None,
    },
    "build-dataset": {
        "out": None, "seed": 0, "n_per_class": 3000, "shifted": False, "gamma_source": "estimate",
    },
    "train": {
        "out": None, "dataset": None, "seed": 0, "epochs": 100, "lr": 1e-3, "batch_size": 128,
        "patience": 10, "clip_norm": None, "task_weights": [1.0, 1.5, 1.0, 1.0],
        "train_split": "train", "val_split": "val",
    },
    "evaluate": {"out": None, "seed": 0, "model": None, "dataset": None, "split": "test"},
    "compare": {
        "out": None, "seed": 0, "model": None, "calibration_dataset": None, "shifted_dataset": None,
        "calibration_split": "train",
    },
    "gradcheck": {"seed": 0, "n_samples": 4, "tolerance": 1e-5, "n_coords": 50},
}
REQUIRED = {
    "simulate": ("out",),
    "build-dataset": ("out",),
    "train": ("out", "dataset"),
    "evaluate": ("out", "model", "dataset"),
    "compare": ("out", "model", "calibration_dataset", "shifted_dataset"),
    "gradcheck": (),
}
SIM_KEY = "sim"

# Example link used by ``simulate`` when no events are configured.
DEFAULT_EVENTS = [
    {"distance_m": 300.0, "kind": "PcConnector", "loss_db": 0.5, "reflectance_db": -40.0},
    {"distance_m": 800.0, "kind": "BadSplice", "loss_db": 1.0},
    {"distance_m": 1200.0, "kind": "Bending", "loss_db": 2.0},
    {"distance_m": 1700.0, "kind": "Reflector", "loss_db": 0.5, "reflectance_db": -20.0, "voa_atten_db": 5.0},
]


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ponfault", description="OTDR fault simulation, GRU-AE training and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command")

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--seed", type=int)
        return sp

    sp = add("simulate", "Simulate full averaged OTDR traces and write them as CSV.")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--n-traces", type=int, dest="n_traces")
    sp.add_argument("--length-m", type=float, dest="length_m")
    sp.add_argument("--launch-power-db", type=float, dest="launch_power_db")
    sp.add_argument("--averaging-count", type=int, dest="averaging_count")
    sp.add_argument("--single-shot-snr-db", type=float, dest="single_shot_snr_db")

    sp = add("build-dataset", "Generate a labelled 30-sample sequence dataset.")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--n-per-class", type=int, dest="n_per_class")
    sp.add_argument("--shifted", action=argparse.BooleanOptionalAction, default=None,
                    help="draw from the shifted ranges (tagged shifted_test)")
    sp.add_argument("--gamma-source", choices=("estimate", "true"), dest="gamma_source")

    sp = add("train", "Train the GRU-AE on a dataset CSV.")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--dataset", help="dataset CSV")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--patience", type=int)
    sp.add_argument("--clip-norm", type=float, dest="clip_norm")

    sp = add("evaluate", "Evaluate a trained model on one split of a dataset.")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--model", help="model file")
    sp.add_argument("--dataset", help="dataset CSV")
    sp.add_argument("--split")

    sp = add("compare", "Compare the GRU-AE with the calibrated template baseline on a shifted test set.")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--model", help="model file")
    sp.add_argument("--calibration-dataset", dest="calibration_dataset",
                    help="dataset CSV whose calibration split tunes the baseline thresholds")
    sp.add_argument("--shifted-dataset", dest="shifted_dataset", help="shifted test dataset CSV")
    sp.add_argument("--calibration-split", dest="calibration_split")

    sp = add("gradcheck", "Finite-difference check of the full GRU-AE gradient.")
    sp.add_argument("--n-samples", type=int, dest="n_samples")
    sp.add_argument("--tolerance", type=float)
    sp.add_argument("--n-coords", type=int, dest="n_coords")
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults < config file < flags."""
    cfg = dict(DEFAULTS[command])
    sim_over = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except OSError as e:
            raise UsageError(f"cannot read config file {args.config}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {args.config} is not valid JSON: {e}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        sim_over = file_cfg.pop(SIM_KEY, {}) or {}
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{command}: missing required option(s): " +
                         ", ".join("--" + k.replace("_", "-") for k in missing))
    sim_cfg = sim.SimConfig.from_dict({**sim.SimConfig().to_dict(), **sim_over})
    cfg[SIM_KEY] = sim_cfg.to_dict()
    return cfg


def _write_config(outdir, command, cfg):
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config.json"), "w") as fh:
        json.dump({"command": command, **cfg}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _need_file(path, what):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def cmd_simulate(cfg, simcfg):
    events = cfg["events"] if cfg["events"] is not None else DEFAULT_EVENTS
    parsed = []
    for ev in events:
        ev = dict(ev)
        dist = float(ev.pop("distance_m"))
        kind = sim.EventKind[ev.pop("kind")]
        parsed.append((dist, sim.EventParams(kind, ev.get("loss_db"), ev.get("reflectance_db"),
                                             float(ev.get("voa_atten_db", 0.0)))))
    link = sim.LinkSpec(cfg["length_m"], parsed, cfg["launch_power_db"], cfg["averaging_count"],
                        cfg["single_shot_snr_db"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    for i in range(cfg["n_traces"]):
        dist, power, truth = sim.synth_trace(link, simcfg, sim.derive_rng(cfg["seed"], i))
        sim.save_trace_csv(os.path.join(out, f"trace_{i:03d}.csv"), dist, power)
    with open(os.path.join(out, "events.json"), "w") as fh:
        json.dump([{"onset_index": o, "distance_m": o * simcfg.meters_per_sample, "kind": ev.kind.name,
                    "loss_db": ev.loss_db, "reflectance_db": ev.reflectance_db,
                    "voa_atten_db": ev.voa_atten_db} for o, ev in truth], fh, indent=2)
        fh.write("\n")
    print(f"wrote {cfg['n_traces']} trace(s) to {out}")
    return 0


def cmd_build_dataset(cfg, simcfg):
    ds = D.build_dataset(cfg["n_per_class"], simcfg, cfg["seed"], shifted=cfg["shifted"],
                         gamma_source=cfg["gamma_source"])
    path = os.path.join(cfg["out"], "dataset.csv")
    os.makedirs(cfg["out"], exist_ok=True)
    D.save_dataset(path, ds)
    print(f"wrote {len(ds)} sequences to {path}")
    return 0


def cmd_train(cfg, simcfg):
    _need_file(cfg["dataset"], "dataset")
    ds = D.load_dataset(cfg["dataset"])
    tc = G.TrainConfig(tuple(cfg["task_weights"]), cfg["lr"], cfg["batch_size"], cfg["epochs"],
                       cfg["seed"], cfg["patience"], cfg["clip_norm"])
    train, val = ds.arrays(cfg["train_split"]), ds.arrays(cfg["val_split"])
    if len(train[0]) == 0 or len(val[0]) == 0:
        raise ValueError(f"dataset has no {cfg['train_split']!r} or {cfg['val_split']!r} samples")
    t0 = time.perf_counter()
    params, history = G.fit(train, val, tc)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    G.save_model(os.path.join(out, "model.txt"), params)
    G.save_history(os.path.join(out, "history.csv"), history)
    best = min(history, key=lambda r: r["val_loss"])
    print(f"trained {len(history) - 1} epochs in {time.perf_counter() - t0:.0f} s; "
          f"best val loss {best['val_loss']:.5f} (epoch {best['epoch']}, accuracy {best['val_accuracy']:.4f})")
    return 0


def cmd_evaluate(cfg, simcfg):
    _need_file(cfg["model"], "model file")
    _need_file(cfg["dataset"], "dataset")
    params = G.load_model(cfg["model"])
    ds = D.load_dataset(cfg["dataset"]).subset(cfg["split"])
    if len(ds) == 0:
        raise ValueError(f"dataset has no {cfg['split']!r} samples")
    report = E.evaluate_model(params, ds, cfg=simcfg)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    report.save(os.path.join(out, "report.json"))
    report.write_figure_csvs(out)
    print(f"accuracy {report.accuracy:.4f}; position RMSE {report.rmse_position_m.overall:.3f} m; "
          f"reflectance RMSE {_num(report.rmse_reflectance_db.overall)} dB; "
          f"loss RMSE {_num(report.rmse_loss_db.overall)} dB")
    return 0


def _num(x):
    return "n/a" if x is None else f"{x:.3f}"


def run_comparison(params, calibration: D.Dataset, shifted: D.Dataset, simcfg: sim.SimConfig):
    """Calibrate the baseline, run both methods on the shifted set.

    Returns ``(BaselineComparison, ThresholdConfig)``.
    """
    bank = BL.build_templates(simcfg)
    thresholds, _ = BL.calibrate(calibration.power_db, calibration.class_index > 0, bank)
    dets = BL.detect_batch(shifted.power_db, bank, thresholds)
    cls, reg, true, mask = E.model_outputs(params, shifted, cfg=simcfg)
    mps = simcfg.meters_per_sample
    comp = E.compare_with_baseline(
        cls, reg[:, 0], [d.event for d in dets],
        [d.position_index * mps if d.event else np.nan for d in dets],
        shifted.class_index, true[:, 0], shifted.split_tag)
    return comp, thresholds


def cmd_compare(cfg, simcfg):
    for key, what in (("model", "model file"), ("calibration_dataset", "calibration dataset"),
                      ("shifted_dataset", "shifted dataset")):
        _need_file(cfg[key], what)
    params = G.load_model(cfg["model"])
    calib = D.load_dataset(cfg["calibration_dataset"]).subset(cfg["calibration_split"])
    shifted = D.load_dataset(cfg["shifted_dataset"])
    if len(calib) == 0:
        raise ValueError(f"calibration dataset has no {cfg['calibration_split']!r} samples")
    comp, thresholds = run_comparison(params, calib, shifted, simcfg)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    thresholds.save(os.path.join(out, "baseline_thresholds.json"))
    E.write_comparison_csv(os.path.join(out, "fig7_comparison.csv"), comp)
    print(f"binary accuracy: GRU-AE {comp.gruae_binary_accuracy:.4f}, baseline {comp.baseline_binary_accuracy:.4f}; "
          f"position RMSE: GRU-AE {_num(comp.gruae_pos_rmse_m)} m, baseline {_num(comp.baseline_pos_rmse_m)} m")
    return 0


def gradcheck_problem(seed: int = 0, n_samples: int = 4):
    """Random model and batch covering masked and unmasked labels of every kind."""
    rng = np.random.default_rng([seed, 17])
    params = G.GruAeParams.init(seed)
    for k, v in params.blocks.items():
        if k.rsplit(".", 1)[1].startswith("b"):
            v[:] = 0.1 * rng.standard_normal(v.shape)
    X = rng.uniform(size=(n_samples, G.SEQ_LEN, G.INPUT_DIM))
    kinds = [0, 3, 6, 5] + list(rng.integers(0, G.N_CLASSES, max(0, n_samples - 4)))
    cls = np.array(kinds[:n_samples])
    mask = np.array([sim.APPLICABILITY[sim.EventKind(c)] for c in cls], dtype=object)
    # position, reflectance, loss; optional reflectance counts as present
    mask = np.array([[c != 0, bool(m[1]) if m[1] is not None else True, bool(m[0])]
                     for c, m in zip(cls, mask)], dtype=bool)
    targets = np.where(mask, rng.uniform(size=(n_samples, 3)), 0.0)
    return X, cls, targets, mask, params


def cmd_gradcheck(cfg, simcfg):
    if cfg["n_samples"] < 1:
        raise ValueError("n_samples must be >= 1")
    X, cls, targets, mask, params = gradcheck_problem(cfg["seed"], cfg["n_samples"])
    t0 = time.perf_counter()
    rep = G.gradient_check(X, cls, targets, mask, params, cfg["tolerance"], cfg["n_coords"], seed=cfg["seed"])
    dt = time.perf_counter() - t0
    print(f"max relative error {rep.max_error:.3e} over {len(rep.errors)} blocks "
          f"(tolerance {cfg['tolerance']:.0e}, {dt:.1f} s)")
    if rep.failed:
        print("FAILED blocks: " + ", ".join(rep.failed))
        return 1
    print("PASSED")
    return 0


def _module_tag(exc: BaseException, default: str) -> str:
    """Name of the innermost package module the exception passed through."""
    tag = default
    tb = exc.__traceback__
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("ponfault.") and mod != __name__:
            tag = mod.rsplit(".", 1)[-1]
        tb = tb.tb_next
    return tag


COMMANDS = {
    "simulate": cmd_simulate,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help()
        return 0
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors with exit code 2
        return int(e.code or 0)
    if args.command is None:
        parser.print_help()
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
    except (UsageError, ValueError, TypeError) as e:
        print(f"ponfault {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    simcfg = sim.SimConfig.from_dict(cfg[SIM_KEY])
    if cfg.get("out"):
        _write_config(cfg["out"], args.command, cfg)
    try:
        return COMMANDS[args.command](cfg, simcfg)
    except Exception as e:  # noqa: BLE001 - report any module failure as exit 1
        print(f"ponfault {args.command}: {_module_tag(e, args.command)}: {e}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
