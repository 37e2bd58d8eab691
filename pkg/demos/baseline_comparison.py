"""
Template baseline on a shifted test set
=======================================

The conventional detector correlates the window with a peak template and
a step template and declares an event when both the correlation and the
amplitude clear calibrated thresholds. It finds events but cannot name
them. Here it is calibrated on training data and run, next to a briefly
trained GRU-AE, on sequences drawn from shifted parameter ranges.
"""

from ponfault import baseline as B
from ponfault import cli
from ponfault import dataset as D
from ponfault import gru_ae as G
from ponfault import otdr_sim as sim

bank = B.build_templates()
ds = D.build_dataset(150, seed=2)
train = ds.subset("train")
thresholds, ba = B.calibrate(train.power_db, train.class_index != 0, bank)
print(f"calibrated thresholds: correlation >= {thresholds.corr_threshold}, "
      f"amplitude >= {thresholds.amplitude_threshold_db} dB (balanced accuracy {ba:.3f})")

# %%
# One clean connector peak: detected as reflective, onset near sample 12.
p = sim.EventParams(sim.EventKind.PcConnector, 0.3, -45.0, position_index=12)
print(B.detect(-73.0 + sim.event_signature(p), bank, thresholds))

# %%
# Compare on the shifted set: binary accuracy and position RMSE. With this
# small training set the GRU-AE already wins on binary accuracy but still
# places events less precisely than the template; the full-size acceptance
# run reverses that (about 0.15 m against 0.34 m).
params, _ = G.fit(ds.arrays("train"), ds.arrays("val"), G.TrainConfig(lr=3e-3, epochs=30, seed=2, patience=30))
shifted = D.build_dataset(60, seed=3, shifted=True)
comp, _ = cli.run_comparison(params, train, shifted, sim.SimConfig())
print(f"binary accuracy  GRU-AE {comp.gruae_binary_accuracy:.3f}  baseline {comp.baseline_binary_accuracy:.3f}")
print(f"position RMSE    GRU-AE {comp.gruae_pos_rmse_m:.3f} m  baseline {comp.baseline_pos_rmse_m:.3f} m "
      f"({comp.n_position_pairs} sequences detected by both)")
