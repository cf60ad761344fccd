"""Federated learning simulator for device-induced image heterogeneity.

Modules: ``tensor_nn`` (numpy CNN with manual backprop), ``isp`` (camera
pipeline transforms and device profiles), ``fed_data`` (datasets, sharding,
profile assignment), ``fl_core`` (FedAvg / FedProx / q-FedAvg / Scaffold and
the round driver), ``heteroswitch`` (loss-gated transform + weight averaging),
``report`` (fairness metrics and report files), ``cli``.
"""

__version__ = "0.1.0"
