"""Server-side aggregation: FedAvg (uniform and data-weighted), Krum, L-FedAvg.

Every aggregator is a pure function returning the new global parameters and
an :class:`AggregationReport` with the coefficients or scores it used.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

from fedsim.errors import (
    ConfigError,
    EmptyInputError,
    IncompatibleShapesError,
    InsufficientClientsError,
)
from fedsim.params import ParamVector, linear_combine, sq_l2_distance

STRATEGIES = ("fedavg-uniform", "fedavg-weighted", "krum", "l-fedavg")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: ParamVector
    data_length: int
    validation_loss: float

    def __post_init__(self):
        if self.data_length < 1:
            raise ValueError(f"client {self.client_id}: data_length must be >= 1")
        if not math.isfinite(self.validation_loss) or self.validation_loss < 0:
            raise ValueError(f"client {self.client_id}: validation_loss must be finite and >= 0")


@dataclass(frozen=True)
class AggregatorConfig:
    strategy: str = "fedavg-weighted"
    alpha: float = 0.5
    fault_tolerance: int = 1
    loss_floor: float = 1e-8
    normalize_loss_weights_first: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.fault_tolerance < 0:
            raise ConfigError("fault_tolerance must be >= 0")
        if not self.loss_floor > 0:
            raise ConfigError("loss_floor must be positive")


@dataclass
class AggregationReport:
    strategy: str
    params_digest: str
    weights: dict[int, float] | None = None
    scores: dict[int, float] | None = None
    selected_client: int | None = None
    round: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"strategy": self.strategy, "round": self.round, "params_digest": self.params_digest}
        if self.weights is not None:
            out["weights"] = {str(k): v for k, v in sorted(self.weights.items())}
        if self.scores is not None:
            out["scores"] = {str(k): v for k, v in sorted(self.scores.items())}
        if self.strategy == "krum":
            out["selected_client"] = self.selected_client
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AggregationReport":
        known = {"strategy", "round", "params_digest", "weights", "scores", "selected_client"}
        return cls(
            strategy=d["strategy"],
            params_digest=d["params_digest"],
            weights={int(k): v for k, v in d["weights"].items()} if "weights" in d else None,
            scores={int(k): v for k, v in d["scores"].items()} if "scores" in d else None,
            selected_client=d.get("selected_client"),
            round=d.get("round"),
            extra={k: v for k, v in d.items() if k not in known},
        )


def _sorted_updates(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise EmptyInputError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in update set: {ids}")
    first = ordered[0].params.manifest
    for u in ordered[1:]:
        if u.params.manifest != first:
            raise IncompatibleShapesError(
                f"client {u.client_id} params do not match client {ordered[0].client_id}"
            )
    return ordered


def _normalize(raw: list[float]) -> list[float]:
    total = math.fsum(raw)
    if not total > 0 or not math.isfinite(total):
        raise ArithmeticError(f"cannot normalize weights with total {total}")
    return [w / total for w in raw]


def data_weights(data_lengths: Sequence[int]) -> list[float]:
    """Raw ``d_k / D`` shares, before the final normalization both users apply."""
    total = sum(data_lengths)
    return [d / total for d in data_lengths]


def _combine(ordered: list[ClientUpdate], coefs: list[float]) -> ParamVector:
    return linear_combine([(c, u.params) for c, u in zip(coefs, ordered)])


def aggregate_fedavg(updates: Sequence[ClientUpdate], weighted: bool = True):
    ordered = _sorted_updates(updates)
    if weighted:
        coefs = _normalize(data_weights([u.data_length for u in ordered]))
    else:
        coefs = [1.0 / len(ordered)] * len(ordered)
    pv = _combine(ordered, coefs)
    report = AggregationReport(
        strategy="fedavg-weighted" if weighted else "fedavg-uniform",
        params_digest=pv.digest(),
        weights={u.client_id: c for u, c in zip(ordered, coefs)},
    )
    return pv, report


def krum_scores(updates: Sequence[ClientUpdate], f: int) -> list[tuple[int, float]]:
    """Sum of the ``m - f - 2`` smallest squared distances from each client to its peers."""
    ordered = _sorted_updates(updates)
    m = len(ordered)
    keep = m - f - 2
    if f < 0 or keep < 1:
        raise InsufficientClientsError(f"Krum needs m >= f + 3 clients, got m={m}, f={f}")
    dist = [[0.0] * m for _ in range(m)]
    for i in range(m):
        for j in range(i + 1, m):
            dist[i][j] = dist[j][i] = sq_l2_distance(ordered[i].params, ordered[j].params)
    scores = []
    for i, u in enumerate(ordered):
        nearest = sorted(dist[i][j] for j in range(m) if j != i)[:keep]
        scores.append((u.client_id, math.fsum(nearest)))
    return scores


def aggregate_krum(updates: Sequence[ClientUpdate], f: int):
    ordered = _sorted_updates(updates)
    scores = krum_scores(ordered, f)
    # min() keeps the first of equal scores; scores are in ascending client_id order
    selected, _ = min(scores, key=lambda s: s[1])
    chosen = next(u for u in ordered if u.client_id == selected)
    pv = chosen.params
    report = AggregationReport(
        strategy="krum",
        params_digest=pv.digest(),
        scores=dict(scores),
        selected_client=selected,
        extra={"fault_tolerance": f},
    )
    return pv, report


def lfedavg_weights(
    metadata: Sequence[tuple[int, int, float]],
    alpha: float,
    loss_floor: float = 1e-8,
    normalize_loss_weights_first: bool = False,
) -> list[tuple[int, float]]:
    """Loss-aware weights from ``(client_id, data_length, validation_loss)`` triples.

    Each client gets ``alpha * d_k / D + (1 - alpha) / max(l_k, loss_floor)``;
    the blended weights are then normalized to sum to one. With
    ``normalize_loss_weights_first`` the inverse losses are normalized before
    blending so both terms live on the same scale.
    """
    if not metadata:
        raise EmptyInputError("no client metadata for L-FedAvg weights")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    meta = sorted(metadata, key=lambda m: m[0])
    for cid, d, l in meta:
        if d < 1:
            raise ValueError(f"client {cid}: data length must be >= 1")
        if not math.isfinite(l) or l < 0:
            raise ValueError(f"client {cid}: validation loss must be finite and >= 0")
    w_data = data_weights([d for _, d, _ in meta])
    w_loss = [1.0 / max(l, loss_floor) for _, _, l in meta]
    if normalize_loss_weights_first:
        w_loss = _normalize(w_loss)
    combined = [alpha * wd + (1.0 - alpha) * wl for wd, wl in zip(w_data, w_loss)]
    return list(zip([m[0] for m in meta], _normalize(combined)))


def aggregate_lfedavg(updates: Sequence[ClientUpdate], config: AggregatorConfig):
    ordered = _sorted_updates(updates)
    weights = lfedavg_weights(
        [(u.client_id, u.data_length, u.validation_loss) for u in ordered],
        config.alpha,
        config.loss_floor,
        config.normalize_loss_weights_first,
    )
    coefs = [w for _, w in weights]
    pv = _combine(ordered, coefs)
    report = AggregationReport(
        strategy="l-fedavg",
        params_digest=pv.digest(),
        weights=dict(weights),
        extra={"alpha": config.alpha},
    )
    return pv, report


def aggregate(updates: Sequence[ClientUpdate], config: AggregatorConfig):
    """Dispatch to the aggregator named by ``config.strategy``."""
    if config.strategy == "fedavg-uniform":
        return aggregate_fedavg(updates, weighted=False)
    if config.strategy == "fedavg-weighted":
        return aggregate_fedavg(updates, weighted=True)
    if config.strategy == "krum":
        return aggregate_krum(updates, config.fault_tolerance)
    return aggregate_lfedavg(updates, config)
