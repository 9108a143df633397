"""Desk-scale stand-in for an image-to-report model.

The synthetic task draws a class, emits a noisy "image embedding" around the
class centroid, and pairs it with that class's token template. The captioner
predicts every report position independently with a softmax-linear layer::

    logits_t = W_t @ x + b_t        for t = 1..L

so the loss and its gradient are closed-form and checkable by finite
differences. Token id 0 is reserved for PAD.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedsim.errors import NumericOverflowError
from fedsim.params import ParamVector

PAD = 0


@dataclass(frozen=True)
class SyntheticTaskSpec:
    feature_dim: int = 16
    vocab_size: int = 24
    report_length: int = 8
    num_classes: int = 4
    noise_sigma: float = 0.5
    swap_rate: float = 0.05
    # train and validation sizes match the totals of the four client shards
    samples_per_split: dict = field(
        default_factory=lambda: {"train": 4138, "validation": 592, "test": 200}
    )
    seed: int = 0

    def __post_init__(self):
        if self.report_length < 1:
            raise ValueError("report_length must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must leave room for PAD plus at least one token")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.noise_sigma < 0 or not 0.0 <= self.swap_rate <= 1.0:
            raise ValueError("noise_sigma must be >= 0 and swap_rate in [0, 1]")


@dataclass(frozen=True)
class Dataset:
    """Feature rows, reference token rows and class labels, aligned by index."""

    features: np.ndarray
    tokens: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.tokens[idx], self.labels[idx], self.sample_ids[idx])


def class_templates(spec: SyntheticTaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    return rng.integers(1, spec.vocab_size, size=(spec.num_classes, spec.report_length))


def class_centroids(spec: SyntheticTaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 1])
    return rng.normal(0.0, 1.0, size=(spec.num_classes, spec.feature_dim))


def synth_generate(spec: SyntheticTaskSpec) -> dict[str, Dataset]:
    """Generate every split named in ``spec.samples_per_split``."""
    templates = class_templates(spec)
    centroids = class_centroids(spec)
    out = {}
    next_id = 0
    for i, (split, n) in enumerate(sorted(spec.samples_per_split.items())):
        rng = np.random.default_rng([spec.seed, 2, i])
        labels = rng.integers(0, spec.num_classes, size=n)
        noise = rng.normal(0.0, 1.0, size=(n, spec.feature_dim))
        features = centroids[labels] + spec.noise_sigma * noise
        tokens = templates[labels].copy()
        swap = rng.random(size=tokens.shape) < spec.swap_rate
        replacement = rng.integers(1, spec.vocab_size, size=tokens.shape)
        tokens[swap] = replacement[swap]
        ids = np.arange(next_id, next_id + n)
        next_id += n
        out[split] = Dataset(features, tokens, labels, ids)
    return out


def export_samples_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    d = dataset.features.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "class"] + [f"feature_{i}" for i in range(d)] + ["ref_tokens"])
        for sid, label, x, toks in zip(dataset.sample_ids, dataset.labels, dataset.features, dataset.tokens):
            w.writerow([int(sid), int(label)] + [repr(float(v)) for v in x] + [" ".join(str(int(t)) for t in toks)])


def load_samples_csv(path) -> Dataset:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    d = sum(1 for k in rows[0] if k.startswith("feature_")) if rows else 0
    return Dataset(
        features=np.array([[float(r[f"feature_{i}"]) for i in range(d)] for r in rows]).reshape(len(rows), d),
        tokens=np.array([[int(t) for t in r["ref_tokens"].split()] for r in rows], dtype=np.int64),
        labels=np.array([int(r["class"]) for r in rows], dtype=np.int64),
        sample_ids=np.array([int(r["sample_id"]) for r in rows], dtype=np.int64),
    )


class ToyCaptioner:
    """Position-wise softmax-linear captioner over a fixed-length report.

    Parameters live in one :class:`ParamVector` with manifest entries
    ``W_1..W_L`` (each ``vocab x feature``) followed by ``b_1..b_L``.
    """

    def __init__(self, feature_dim: int, vocab_size: int, report_length: int):
        self.feature_dim = feature_dim
        self.vocab_size = vocab_size
        self.report_length = report_length
        L, V, F = report_length, vocab_size, feature_dim
        self.manifest = tuple(
            [(f"W_{t}", (V, F)) for t in range(1, L + 1)] + [(f"b_{t}", (V,)) for t in range(1, L + 1)]
        )
        self._n_weights = L * V * F

    @classmethod
    def for_task(cls, spec: SyntheticTaskSpec) -> "ToyCaptioner":
        return cls(spec.feature_dim, spec.vocab_size, spec.report_length)

    def init_params(self, seed: int, scale: float = 0.1) -> ParamVector:
        rng = np.random.default_rng(seed)
        n = self._n_weights + self.report_length * self.vocab_size
        return ParamVector(scale * rng.normal(size=n), self.manifest)

    def zero_params(self) -> ParamVector:
        return ParamVector(np.zeros(self._n_weights + self.report_length * self.vocab_size), self.manifest)

    def pack(self, W: np.ndarray, b: np.ndarray) -> ParamVector:
        """Build params from stacked ``W`` of shape (L, V, F) and ``b`` of shape (L, V)."""
        return ParamVector(np.concatenate([np.ravel(W), np.ravel(b)]), self.manifest)

    def unpack(self, params: ParamVector) -> tuple[np.ndarray, np.ndarray]:
        if params.manifest != self.manifest:
            raise ValueError("params do not match the captioner manifest")
        L, V, F = self.report_length, self.vocab_size, self.feature_dim
        v = params.values
        return v[: self._n_weights].reshape(L, V, F), v[self._n_weights:].reshape(L, V)

    def logits(self, params: ParamVector, features: np.ndarray) -> np.ndarray:
        W, b = self.unpack(params)
        return np.einsum("nf,tvf->ntv", features, W) + b[None, :, :]

    def _loss_terms(self, params, batch: Dataset):
        logits = self.logits(params, batch.features)
        shifted = logits - logits.max(axis=2, keepdims=True)
        expd = np.exp(shifted)
        sumexp = expd.sum(axis=2, keepdims=True)
        log_probs = shifted - np.log(sumexp)
        targets = batch.tokens
        mask = targets != PAD
        count = int(mask.sum())
        picked = np.take_along_axis(log_probs, targets[:, :, None], axis=2)[:, :, 0]
        return expd / sumexp, mask, count, picked

    def forward_loss(self, params: ParamVector, batch: Dataset) -> float:
        """Mean cross-entropy over all non-PAD (sample, position) pairs."""
        _, mask, count, picked = self._loss_terms(params, batch)
        if count == 0:
            return 0.0
        loss = float(-(picked * mask).sum() / count)
        if not np.isfinite(loss):
            raise NumericOverflowError("non-finite loss")
        return loss

    def loss_and_gradient(self, params: ParamVector, batch: Dataset) -> tuple[float, ParamVector]:
        probs, mask, count, picked = self._loss_terms(params, batch)
        if count == 0:
            return 0.0, self.zero_params()
        loss = float(-(picked * mask).sum() / count)
        dlogits = probs.copy()
        n, L = batch.tokens.shape
        dlogits[np.arange(n)[:, None], np.arange(L)[None, :], batch.tokens] -= 1.0
        dlogits *= mask[:, :, None] / count
        dW = np.einsum("ntv,nf->tvf", dlogits, batch.features)
        db = dlogits.sum(axis=0)
        grad = np.concatenate([dW.ravel(), db.ravel()])
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericOverflowError("non-finite loss or gradient")
        return loss, ParamVector(grad, self.manifest)

    def gradient(self, params: ParamVector, batch: Dataset) -> ParamVector:
        return self.loss_and_gradient(params, batch)[1]

    def greedy_decode(self, params: ParamVector, features: np.ndarray) -> np.ndarray:
        """Argmax token per position; ``np.argmax`` returns the lowest id on ties."""
        single = np.ndim(features) == 1
        logits = self.logits(params, np.atleast_2d(features))
        out = logits.argmax(axis=2)
        return out[0] if single else out


def token_strings(tokens) -> list[str]:
    """Detokenize ids to words, dropping PAD."""
    return [f"w{int(t)}" for t in tokens if int(t) != PAD]
