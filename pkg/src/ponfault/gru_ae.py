"""GRU autoencoder with one shared encoder and four task decoders.

Encoder: GRU(3->30), GRU(30->15); the last hidden state is the latent.
Each decoder repeats the latent over the 30 timesteps, runs GRU(15->15),
GRU(15->30), takes the last state, then dense 30->16 (tanh) and a head.
Heads, in order: diagnosis (8 logits), localization, reflectance, loss.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn

log = logging.getLogger(__name__)

SEQ_LEN = 30
INPUT_DIM = 3
ENC_DIMS = (30, 15)
DEC_DIMS = (15, 30)
DENSE_DIM = 16
LATENT_DIM = ENC_DIMS[-1]
N_CLASSES = 8
DECODERS = ("diagnosis", "localization", "reflectance", "loss")
HEAD_DIMS = (N_CLASSES, 1, 1, 1)
MAGIC = "GRUAE1"


def architecture() -> dict:
    """Layer table in the fixed parameter order used everywhere."""
    spec = {
        "enc1": ("gru", INPUT_DIM, ENC_DIMS[0]),
        "enc2": ("gru", ENC_DIMS[0], ENC_DIMS[1]),
    }
    for i, out in enumerate(HEAD_DIMS):
        spec[f"dec{i}.gru1"] = ("gru", LATENT_DIM, DEC_DIMS[0])
        spec[f"dec{i}.gru2"] = ("gru", DEC_DIMS[0], DEC_DIMS[1])
        spec[f"dec{i}.fc"] = ("dense", DEC_DIMS[1], DENSE_DIM, "tanh")
        spec[f"dec{i}.head"] = ("dense", DENSE_DIM, out, "identity")
    return spec


class GruAeParams:
    """All trainable blocks, stored flat as ``"layer.block" -> array``."""

    def __init__(self, blocks: dict):
        self.blocks = blocks
        self._check()

    def _check(self):
        expected = self.expected_shapes()
        if list(self.blocks) != list(expected):
            raise ValueError("parameter blocks do not match the GRU-AE layout")
        for name, shape in expected.items():
            if self.blocks[name].shape != shape:
                raise ValueError(f"{name}: shape {self.blocks[name].shape} != {shape}")

    @staticmethod
    def expected_shapes() -> dict:
        out = {}
        for layer, spec in architecture().items():
            if spec[0] == "gru":
                I, H = spec[1], spec[2]
                for b in nn.GRU_BLOCKS:
                    out[f"{layer}.{b}"] = (H, I) if b[0] == "W" else (H, H) if b[0] == "U" else (H,)
            else:
                I, O = spec[1], spec[2]
                out[f"{layer}.W"] = (O, I)
                out[f"{layer}.b"] = (O,)
        return out

    @classmethod
    def init(cls, seed: int = 0) -> GruAeParams:
        layers = nn.init_params(architecture(), seed)
        blocks = {}
        for layer, p in layers.items():
            for b, arr in p.blocks().items():
                blocks[f"{layer}.{b}"] = arr
        return cls(blocks)

    @classmethod
    def zeros(cls) -> GruAeParams:
        return cls({k: np.zeros(s) for k, s in cls.expected_shapes().items()})

    def gru(self, layer: str) -> nn.GruLayerParams:
        return nn.GruLayerParams(*(self.blocks[f"{layer}.{b}"] for b in nn.GRU_BLOCKS))

    def dense(self, layer: str) -> nn.DenseParams:
        act = architecture()[layer][3]
        return nn.DenseParams(self.blocks[f"{layer}.W"], self.blocks[f"{layer}.b"], act)

    def copy(self) -> GruAeParams:
        return GruAeParams({k: v.copy() for k, v in self.blocks.items()})

    def __eq__(self, other):
        return isinstance(other, GruAeParams) and all(
            np.array_equal(a, other.blocks[k]) for k, a in self.blocks.items()
        )


@dataclass
class TrainConfig:
    task_weights: tuple = (1.0, 1.5, 1.0, 1.0)
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    patience: int = 10
    clip_norm: float | None = None

    def __post_init__(self):
        self.task_weights = tuple(float(w) for w in self.task_weights)
        if len(self.task_weights) != 4 or any(w < 0 for w in self.task_weights):
            raise ValueError("task_weights must be four nonnegative numbers")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Prediction:
    class_probs: np.ndarray
    class_index: int
    position_norm: float
    reflectance_norm: float
    loss_norm: float


# ----------------------------------------------------------------------------
# forward / backward


def _as_batch(X):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.shape[1:] != (SEQ_LEN, INPUT_DIM):
        raise ValueError(f"input must be (30, 3) per sample, got {X.shape}")
    return X, single


def encode(X, params: GruAeParams, _cache=None):
    """Latent vector(s) of shape (15,) or (B, 15)."""
    X, single = _as_batch(X)
    H1, c1 = nn.gru_layer_forward(X, params.gru("enc1"))
    H2, c2 = nn.gru_layer_forward(H1, params.gru("enc2"))
    if _cache is not None:
        _cache.update(enc1=c1, enc2=c2)
    latent = H2[:, -1]
    return latent[0] if single else latent


def _decode_raw(latent, params: GruAeParams, caches=None):
    """Raw head outputs (logits and unclipped regressions) for latent (B, 15)."""
    B = latent.shape[0]
    rep = np.broadcast_to(latent[:, None, :], (B, SEQ_LEN, LATENT_DIM))
    outs = []
    for i in range(len(DECODERS)):
        G1, c1 = nn.gru_layer_forward(rep, params.gru(f"dec{i}.gru1"))
        G2, c2 = nn.gru_layer_forward(G1, params.gru(f"dec{i}.gru2"))
        f, cf = nn.dense_forward(G2[:, -1], params.dense(f"dec{i}.fc"))
        o, co = nn.dense_forward(f, params.dense(f"dec{i}.head"))
        outs.append(o)
        if caches is not None:
            caches.append((c1, c2, cf, co))
    return outs


def forward_raw(X, params: GruAeParams, caches=None):
    X, _ = _as_batch(X)
    latent = encode(X, params, caches)
    dec_caches = [] if caches is not None else None
    outs = _decode_raw(latent, params, dec_caches)
    if caches is not None:
        caches["dec"] = dec_caches
    return outs


def decode_all(latent, params: GruAeParams):
    """Predictions from latent vector(s); regressions clipped to [0, 1]."""
    latent = np.asarray(latent, dtype=float)
    single = latent.ndim == 1
    if latent.shape[-1] != LATENT_DIM:
        raise ValueError("latent must have length 15")
    outs = _decode_raw(latent[None] if single else latent, params)
    preds = _to_predictions(outs)
    return preds[0] if single else preds


def _to_predictions(outs):
    probs = nn.softmax(outs[0])
    regs = np.clip(np.concatenate(outs[1:], axis=1), 0.0, 1.0)
    return [
        Prediction(probs[i], int(np.argmax(probs[i])), float(regs[i, 0]), float(regs[i, 1]), float(regs[i, 2]))
        for i in range(len(probs))
    ]


def multi_task_loss(outs, cls, targets, mask, weights=(1.0, 1.5, 1.0, 1.0)):
    """Weighted multi-task loss, averaged over the batch.

    ``outs`` are the raw head outputs ``[logits (B,8), pos (B,1), refl (B,1),
    loss (B,1)]``; ``targets``/``mask`` are (B, 3) in the order position,
    reflectance, loss. Returns ``(loss, per-head gradients, per-term losses)``.
    """
    cls = np.atleast_1d(np.asarray(cls))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    B = len(cls)
    ce, d_logits = nn.softmax_cross_entropy(outs[0], cls)
    terms = [ce]
    grads = [weights[0] * d_logits]
    for j in range(3):
        pred = outs[j + 1][:, 0]
        # per-sample masked MSE on a scalar head is mask * diff**2
        diff = np.where(mask[:, j], pred - targets[:, j], 0.0)
        terms.append(float((diff * diff).sum() / B))
        grads.append((weights[j + 1] * 2.0 * diff / B)[:, None])
    total = float(sum(w * t for w, t in zip(weights, terms)))
    return total, grads, terms


def backward(head_grads, caches, params: GruAeParams) -> dict:
    """Gradients of all blocks given dLoss/d(head outputs)."""
    grads = {}
    B = head_grads[0].shape[0]
    d_latent = np.zeros((B, LATENT_DIM))
    for i, (c1, c2, cf, co) in enumerate(caches["dec"]):
        g = head_grads[i]
        d_f, gh = nn.dense_backward(g, co, params.dense(f"dec{i}.head"))
        d_last, gf = nn.dense_backward(d_f, cf, params.dense(f"dec{i}.fc"))
        dG2 = np.zeros((B, SEQ_LEN, DEC_DIMS[1]))
        dG2[:, -1] = d_last
        dG1, g2, _ = nn.gru_layer_backward(dG2, c2, params.gru(f"dec{i}.gru2"))
        dRep, g1, _ = nn.gru_layer_backward(dG1, c1, params.gru(f"dec{i}.gru1"))
        d_latent += dRep.sum(axis=1)
        for layer, gg in ((f"dec{i}.gru1", g1), (f"dec{i}.gru2", g2), (f"dec{i}.fc", gf), (f"dec{i}.head", gh)):
            for b, arr in gg.items():
                grads[f"{layer}.{b}"] = arr
    dH2 = np.zeros((B, SEQ_LEN, ENC_DIMS[1]))
    dH2[:, -1] = d_latent
    dH1, ge2, _ = nn.gru_layer_backward(dH2, caches["enc2"], params.gru("enc2"))
    _, ge1, _ = nn.gru_layer_backward(dH1, caches["enc1"], params.gru("enc1"))
    for layer, gg in (("enc1", ge1), ("enc2", ge2)):
        for b, arr in gg.items():
            grads[f"{layer}.{b}"] = arr
    return {k: grads[k] for k in params.blocks}


def loss_and_grads(X, cls, targets, mask, params: GruAeParams, weights=(1.0, 1.5, 1.0, 1.0)):
    caches = {}
    outs = forward_raw(X, params, caches)
    loss, head_grads, _ = multi_task_loss(outs, cls, targets, mask, weights)
    return loss, backward(head_grads, caches, params)


def loss_value(outs, cls, targets, mask, weights=(1.0, 1.5, 1.0, 1.0)):
    """Same total as :func:`multi_task_loss`, kept in the dtype of ``outs``."""
    logits = outs[0]
    y = np.atleast_1d(np.asarray(cls))
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    total = weights[0] * (lse - logits[np.arange(len(y)), y]).mean()
    targets = np.atleast_2d(targets)
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    for j in range(3):
        diff = np.where(mask[:, j], outs[j + 1][:, 0] - targets[:, j], 0.0)
        total = total + weights[j + 1] * (diff * diff).sum() / len(y)
    return total


def gradcheck_loss_fn(X, cls, targets, mask, params: GruAeParams, weights=(1.0, 1.5, 1.0, 1.0),
                      dtype=np.float64):
    """Loss-only closure for finite differences.

    Reads ``params.blocks`` on every call, so in-place perturbations are seen.
    Layer outputs are cached and only layers downstream of a changed block
    are recomputed. With ``dtype=np.longdouble`` the round-off in the loss
    stays far below the smallest gradients (decoder update-gate gradients
    are often ~1e-7).
    """
    Xe, _ = _as_batch(X)
    Xe = Xe.astype(dtype)
    targets = np.atleast_2d(np.asarray(targets, dtype=float)).astype(dtype)
    spec = architecture()
    layer_keys = {layer: [k for k in params.blocks if k.rsplit(".", 1)[0] == layer] for layer in spec}
    snap, ext, out = {}, {}, {}

    def changed(layer):
        keys = layer_keys[layer]
        if layer in snap and all(np.array_equal(params.blocks[k], snap[layer][k]) for k in keys):
            return False
        snap[layer] = {k: params.blocks[k].copy() for k in keys}
        blocks = [params.blocks[k].astype(dtype) for k in keys]
        ext[layer] = nn.GruLayerParams(*blocks) if spec[layer][0] == "gru" else \
            nn.DenseParams(*blocks, spec[layer][3])
        return True

    def run(layer, x):
        if spec[layer][0] == "gru":
            return nn.gru_layer_forward(x, ext[layer])[0]
        return nn.dense_forward(x, ext[layer])[0]

    def fn():
        dirty = False
        for layer in ("enc1", "enc2"):
            dirty = changed(layer) or dirty
            if dirty:
                out[layer] = run(layer, Xe if layer == "enc1" else out["enc1"])
        latent = out["enc2"][:, -1]
        rep = np.broadcast_to(latent[:, None, :], (latent.shape[0], SEQ_LEN, LATENT_DIM))
        heads = []
        for i in range(len(DECODERS)):
            d = dirty
            x = rep
            for part in ("gru1", "gru2", "fc", "head"):
                layer = f"dec{i}.{part}"
                d = changed(layer) or d
                if d:
                    out[layer] = run(layer, x)
                x = out[layer][:, -1] if part == "gru2" else out[layer]
            heads.append(out[f"dec{i}.head"])
        return loss_value(heads, cls, targets, mask, weights)

    return fn


def gradient_check(X, cls, targets, mask, params: GruAeParams, tolerance: float = 1e-5,
                   n_coords: int = 50, seed: int = 0, weights=(1.0, 1.5, 1.0, 1.0)):
    """Full-model finite-difference check of :func:`loss_and_grads`."""
    _, analytic = loss_and_grads(X, cls, targets, mask, params, weights)
    loss_fn = gradcheck_loss_fn(X, cls, targets, mask, params, weights)
    refine_fn = gradcheck_loss_fn(X, cls, targets, mask, params, weights, dtype=np.longdouble)
    return nn.grad_check(None, params.blocks, tolerance, n_coords, seed=seed,
                         analytic=analytic, loss_fn=loss_fn, refine_fn=refine_fn)


def predict(X, params: GruAeParams, batch_size: int = 512) -> list:
    """Order-preserving batched inference."""
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        return []
    X, _ = _as_batch(X)
    preds = []
    for i in range(0, len(X), batch_size):
        preds.extend(_to_predictions(forward_raw(X[i: i + batch_size], params)))
    return preds


def predict_arrays(X, params: GruAeParams, batch_size: int = 512):
    """Like :func:`predict` but returns (probs (N,8), regressions (N,3))."""
    X = np.asarray(X, dtype=float)
    probs = np.zeros((len(X), N_CLASSES))
    regs = np.zeros((len(X), 3))
    for i in range(0, len(X), batch_size):
        outs = forward_raw(X[i: i + batch_size], params)
        probs[i: i + batch_size] = nn.softmax(outs[0])
        regs[i: i + batch_size] = np.clip(np.concatenate(outs[1:], axis=1), 0.0, 1.0)
    return probs, regs


def evaluate_loss(X, cls, targets, mask, params, weights, batch_size: int = 512):
    """Mean multi-task loss and accuracy over a whole split."""
    total = 0.0
    correct = 0
    n = len(X)
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        outs = forward_raw(X[sl], params)
        loss, _, _ = multi_task_loss(outs, cls[sl], targets[sl], mask[sl], weights)
        total += loss * len(cls[sl])
        correct += int((np.argmax(outs[0], axis=1) == cls[sl]).sum())
    return total / n, correct / n


# ----------------------------------------------------------------------------
# training


class TrainingDiverged(FloatingPointError):
    pass


def fit(train, val, config: TrainConfig = TrainConfig(), params: GruAeParams | None = None,
        callback=None):
    """Mini-batch Adam training with best-validation selection.

    ``train`` and ``val`` are ``(X, cls, targets, mask)`` array tuples (see
    ``Dataset.arrays``). Returns ``(best_params, history)``; history rows are
    dicts with epoch, train_loss, val_loss, val_accuracy. Row 0 holds the
    untrained model.
    """
    Xtr, ytr, ttr, mtr = (np.asarray(a) for a in train)
    Xva, yva, tva, mva = (np.asarray(a) for a in val)
    if len(Xtr) == 0 or len(Xva) == 0:
        raise ValueError("fit needs nonempty train and validation splits")
    params = GruAeParams.init(config.seed) if params is None else params.copy()
    w = config.task_weights
    rng = np.random.default_rng(config.seed)
    state = nn.AdamState(lr=config.lr)

    tr_loss, _ = evaluate_loss(Xtr, ytr, ttr, mtr, params, w)
    va_loss, va_acc = evaluate_loss(Xva, yva, tva, mva, params, w)
    history = [dict(epoch=0, train_loss=tr_loss, val_loss=va_loss, val_accuracy=va_acc)]
    best = params.copy()
    best_val = va_loss
    since_best = 0
    n = len(Xtr)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        acc_loss = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start: start + config.batch_size]
            loss, grads = loss_and_grads(Xtr[idx], ytr[idx], ttr[idx], mtr[idx], params, w)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
            nn.adam_step(params.blocks, grads, state, config.clip_norm)
            acc_loss += loss * len(idx)
        va_loss, va_acc = evaluate_loss(Xva, yva, tva, mva, params, w)
        row = dict(epoch=epoch, train_loss=acc_loss / n, val_loss=va_loss, val_accuracy=va_acc)
        history.append(row)
        log.info("epoch %d train %.5f val %.5f acc %.4f", epoch, row["train_loss"], va_loss, va_acc)
        if callback is not None:
            callback(row)
        if va_loss < best_val:
            best_val = va_loss
            best = params.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    return best, history


def save_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["train_loss"])),
                        repr(float(row["val_loss"])), repr(float(row["val_accuracy"]))])


# ----------------------------------------------------------------------------
# persistence


def _header() -> str:
    return (f"input={INPUT_DIM} encoder={ENC_DIMS[0]},{ENC_DIMS[1]} "
            f"decoder={DEC_DIMS[0]},{DEC_DIMS[1]} dense={DENSE_DIM} "
            f"heads={','.join(map(str, HEAD_DIMS))} seq={SEQ_LEN}")


def save_model(path, params: GruAeParams) -> None:
    """Text container: magic, dimension header, then one block per two lines.

    Block lines are ``name dim...`` followed by the row-major values written
    with ``repr`` (shortest exact round-trip form of a double).
    """
    lines = [MAGIC, _header()]
    for name, arr in params.blocks.items():
        lines.append(" ".join([name, *map(str, arr.shape)]))
        lines.append(" ".join(repr(float(v)) for v in arr.reshape(-1)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


class ModelFormatError(ValueError):
    pass


def load_model(path) -> GruAeParams:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != MAGIC:
        raise ModelFormatError(f"{path}: not a {MAGIC} model file")
    if len(lines) < 2 or lines[1] != _header():
        raise ModelFormatError(f"{path}: dimension header {lines[1]!r} does not match {_header()!r}")
    expected = GruAeParams.expected_shapes()
    blocks = {}
    pos = 2
    for name, shape in expected.items():
        if pos + 1 >= len(lines):
            raise ModelFormatError(f"{path}: truncated before block {name}")
        head = lines[pos].split()
        if not head or head[0] != name or tuple(map(int, head[1:])) != shape:
            raise ModelFormatError(f"{path}: expected block {name} {shape}, found {lines[pos]!r}")
        vals = lines[pos + 1].split()
        if len(vals) != int(np.prod(shape)):
            raise ModelFormatError(f"{path}: block {name} has {len(vals)} values, expected {int(np.prod(shape))}")
        blocks[name] = np.array([float(v) for v in vals]).reshape(shape)
        pos += 2
    return GruAeParams(blocks)
