"""Desk-scale federated learning simulator for image-to-report models."""

from fedsim.aggregation import (
    AggregationReport,
    AggregatorConfig,
    ClientUpdate,
    aggregate,
    aggregate_fedavg,
    aggregate_krum,
    aggregate_lfedavg,
    krum_scores,
    lfedavg_weights,
)
from fedsim.params import ParamVector, deserialize, linear_combine, serialize, sq_l2_distance

__version__ = "0.1.0"
