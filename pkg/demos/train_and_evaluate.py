"""
Training a small GRU-AE
=======================

Builds a reduced balanced dataset, trains the multi-task GRU autoencoder
for 40 epochs and prints the main evaluation numbers. The acceptance
run uses 3000 sequences per class instead of 200; this version
finishes in under a minute, so expect modest accuracy (about 0.67).
"""

import numpy as np

from ponfault import dataset as D
from ponfault import evalx as E
from ponfault import gru_ae as G

ds = D.build_dataset(200, seed=1)
print(f"{len(ds)} sequences; split sizes:",
      {s: int(np.sum(ds.split_tag == s)) for s in ("train", "val", "test")})

# %%
# Train with Adam on the weighted sum of the four task losses.
config = G.TrainConfig(lr=3e-3, epochs=40, seed=1, patience=40)
params, history = G.fit(ds.arrays("train"), ds.arrays("val"), config,
                        callback=lambda r: print(f"epoch {r['epoch']:2d}  val loss {r['val_loss']:.4f}  "
                                                 f"val accuracy {r['val_accuracy']:.3f}"))

# %%
# Evaluate on the held-out test split.
report = E.evaluate_model(params, ds.subset("test"))
print(f"\ntest accuracy {report.accuracy:.3f}")
print(f"position RMSE {report.rmse_position_m.overall:.3f} m")
print(f"reflectance RMSE {report.rmse_reflectance_db.overall:.2f} dB, loss RMSE {report.rmse_loss_db.overall:.2f} dB")
print("row-normalized confusion matrix (rows = true class):")
print(np.round(report.confusion.row_normalized, 2))

# %%
# A single prediction, decoded to physical units.
x = ds.subset("test").inputs()[:1]
pred = G.predict(x, params)[0]
pos_m, refl_db, loss_db = D.decode_targets((pred.position_norm, pred.reflectance_norm, pred.loss_norm))
print(f"\nfirst test sequence: class {pred.class_index} (p = {pred.class_probs.max():.2f}), "
      f"position {pos_m:.2f} m, loss {loss_db:.2f} dB")
