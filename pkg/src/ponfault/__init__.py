"""PON fault detection from OTDR sequences.

Modules:

- ``otdr_sim``: parametric OTDR trace and event simulator
- ``dataset``: labelled 30-sample sequences, normalisation and CSV I/O
- ``nn_core``: GRU and dense layers with exact gradients, Adam, gradient check
- ``gru_ae``: the multi-task GRU autoencoder and its training loop
- ``baseline``: template-correlation detector with calibrated thresholds
- ``evalx``: confusion matrix, SNR-binned rates, RMSE, comparisons
- ``cli``: the ``ponfault`` command
"""

__version__ = "0.1.0"
