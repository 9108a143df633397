"""Simulated hospital clients: data partitioning, local training, adversaries."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from fedsim.aggregation import ClientUpdate
from fedsim.errors import DivergenceError, EmptyInputError, FedSimError, NonFiniteValueError
from fedsim.params import ParamVector

TRAIN_RATIOS = (1655, 1241, 828, 414)
VALIDATION_RATIOS = (237, 178, 117, 60)


@dataclass(frozen=True)
class PartitionSpec:
    ratios: tuple = TRAIN_RATIOS
    seed: int = 0
    shuffle: bool = True
    # 0 keeps shards IID in content; 1 sorts every sample by label before slicing
    class_skew: float = 0.0

    def __post_init__(self):
        if not self.ratios or any(not r > 0 for r in self.ratios):
            raise ValueError("partition ratios must be a non-empty list of positive numbers")
        if not 0.0 <= self.class_skew <= 1.0:
            raise ValueError("class_skew must lie in [0, 1]")


def largest_remainder_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Split ``n`` items proportionally to ``ratios``; leftover units go to the
    largest fractional parts, lower index first on ties. Every share gets >= 1."""
    k = len(ratios)
    if n < k:
        raise ValueError(f"cannot give {k} clients at least one of {n} samples")
    total = math.fsum(ratios)
    quotas = [n * r / total for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(k), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(k):
        while sizes[i] == 0:
            donor = max(range(k), key=lambda j: (sizes[j], -j))
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def partition(dataset, spec: PartitionSpec, labels=None) -> list:
    """Disjoint per-client shards of ``dataset`` sized by ``spec.ratios``.

    ``dataset`` is anything with ``len()`` and ``take(indices)``; plain
    sequences are sliced into lists.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyInputError("cannot partition an empty dataset")
    sizes = largest_remainder_sizes(n, spec.ratios)
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n) if spec.shuffle else np.arange(n)
    if spec.class_skew > 0:
        if labels is None:
            labels = getattr(dataset, "labels", None)
        if labels is None:
            raise ValueError("class_skew needs labels")
        labels = np.asarray(labels)
        chosen = np.sort(rng.choice(n, size=int(round(spec.class_skew * n)), replace=False))
        members = order[chosen]
        order = order.copy()
        order[chosen] = members[np.argsort(labels[members], kind="stable")]
    shards = []
    start = 0
    for size in sizes:
        idx = order[start:start + size]
        start += size
        if hasattr(dataset, "take"):
            shards.append(dataset.take(idx))
        else:
            shards.append([dataset[i] for i in idx])
    return shards


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs_per_round: int = 3
    batch_size: int = 8
    optimizer: str = "adamw"
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs_per_round < 1:
            raise ValueError("epochs_per_round must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def adamw_step(params, grads, moment1, moment2, step_index: int, cfg: LocalTrainConfig):
    """One AdamW update on flat float64 arrays.

    Weight decay is decoupled: params are first scaled by ``1 - lr * wd``,
    then moved by the bias-corrected adaptive step. Returns
    ``(params, moment1, moment2)`` as new arrays.
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    for arr in (params, grads, moment1, moment2):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError("adamw_step received non-finite input")
    lr, b1, b2 = cfg.learning_rate, cfg.beta1, cfg.beta2
    decayed = params * (1.0 - lr * cfg.weight_decay)
    m = b1 * moment1 + (1.0 - b1) * grads
    v = b2 * moment2 + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1 ** step_index)
    v_hat = v / (1.0 - b2 ** step_index)
    updated = decayed - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return updated, m, v


class LocalTrainResult(NamedTuple):
    params: ParamVector
    train_trace: list  # (step, epoch, loss) per optimizer step
    validation_loss: float
    val_trace: list  # (epoch, loss)


def local_train(model, params: ParamVector, data, cfg: LocalTrainConfig, val_data=None) -> LocalTrainResult:
    """Run ``cfg.epochs_per_round`` passes of minibatch training on one client.

    ``model`` must provide ``loss_and_gradient(params, batch)`` and
    ``forward_loss(params, batch)``. The shuffle order of epoch ``e`` depends
    only on ``(cfg.seed, e)``. Optimizer state starts fresh on every call.
    Validation loss is measured on ``val_data`` (or the training data when it
    is absent) after each epoch; the last one is returned.
    """
    n = len(data)
    if n == 0:
        raise EmptyInputError("client has no training data")
    eval_data = val_data if val_data is not None and len(val_data) > 0 else data
    w = params.values.copy()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    trace = []
    val_trace = []
    step = 0
    for epoch in range(1, cfg.epochs_per_round + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            step += 1
            batch = data.take(order[start:start + cfg.batch_size])
            try:
                loss, grad = model.loss_and_gradient(params.with_values(w), batch)
            except (FedSimError, FloatingPointError) as exc:
                raise DivergenceError(step) from exc
            if not math.isfinite(loss):
                raise DivergenceError(step)
            trace.append((step, epoch, loss))
            if cfg.optimizer == "adamw":
                w, m, v = adamw_step(w, grad.values, m, v, step, cfg)
            else:
                w = w * (1.0 - cfg.learning_rate * cfg.weight_decay) - cfg.learning_rate * grad.values
            if not np.all(np.isfinite(w)):
                raise DivergenceError(step, f"parameters became non-finite at step {step}")
        try:
            val_loss = model.forward_loss(params.with_values(w), eval_data)
        except FedSimError as exc:
            raise DivergenceError(step) from exc
        if not math.isfinite(val_loss):
            raise DivergenceError(step)
        val_trace.append((epoch, val_loss))
    return LocalTrainResult(params.with_values(w), trace, val_trace[-1][1], val_trace)


@dataclass(frozen=True)
class AdversaryMode:
    """``honest``, ``scale`` (uses factor), ``gaussian_noise`` (uses sigma) or ``sign_flip``."""

    mode: str = "honest"
    factor: float = 1.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.mode not in ("honest", "scale", "gaussian_noise", "sign_flip"):
            raise ValueError(f"unknown adversary mode {self.mode!r}")
        if not (math.isfinite(self.factor) and math.isfinite(self.sigma)):
            raise ValueError("adversary factor and sigma must be finite")

    @classmethod
    def parse(cls, text: str) -> "AdversaryMode":
        """Parse ``honest``, ``sign_flip``, ``scale(50)`` or ``gaussian_noise(0.1)``."""
        text = text.strip()
        if "(" not in text:
            return cls(text)
        name, _, arg = text.partition("(")
        value = float(arg.rstrip(")"))
        if name == "scale":
            return cls("scale", factor=value)
        if name == "gaussian_noise":
            return cls("gaussian_noise", sigma=value)
        raise ValueError(f"cannot parse adversary mode {text!r}")

    def __str__(self) -> str:
        if self.mode == "scale":
            return f"scale({self.factor:g})"
        if self.mode == "gaussian_noise":
            return f"gaussian_noise({self.sigma:g})"
        return self.mode


HONEST = AdversaryMode()


def apply_adversary(update: ClientUpdate, mode: AdversaryMode, seed: int = 0) -> ClientUpdate:
    if mode.mode == "honest":
        return update
    values = update.params.values
    if mode.mode == "scale":
        corrupted = values * mode.factor
    elif mode.mode == "sign_flip":
        corrupted = values * -1.0
    else:
        rng = np.random.default_rng(seed)
        corrupted = values + rng.normal(0.0, mode.sigma, size=values.shape)
    return ClientUpdate(
        update.client_id, update.params.with_values(corrupted), update.data_length, update.validation_loss
    )


def write_loss_csvs(round_dir, client_id: int, result: LocalTrainResult) -> None:
    round_dir = Path(round_dir)
    round_dir.mkdir(parents=True, exist_ok=True)
    with (round_dir / f"client_{client_id}.losses.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "train_loss"])
        for step, epoch, loss in result.train_trace:
            w.writerow([step, epoch, repr(loss)])
    with (round_dir / f"client_{client_id}.val_losses.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "val_loss"])
        for epoch, loss in result.val_trace:
            w.writerow([epoch, repr(loss)])


def read_loss_csv(path) -> list[tuple[int, int, float]]:
    with Path(path).open(newline="") as fh:
        return [(int(r["step"]), int(r["epoch"]), float(r["train_loss"])) for r in csv.DictReader(fh)]
