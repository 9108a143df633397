import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.aggregation import ClientUpdate, aggregate_krum
from fedsim.client import (
    TRAIN_RATIOS,
    VALIDATION_RATIOS,
    AdversaryMode,
    LocalTrainConfig,
    PartitionSpec,
    adamw_step,
    apply_adversary,
    largest_remainder_sizes,
    local_train,
    partition,
    read_loss_csv,
    write_loss_csvs,
)
from fedsim.errors import DivergenceError, EmptyInputError, NonFiniteValueError
from fedsim.params import ParamVector
from fedsim.toy_model import SyntheticTaskSpec, ToyCaptioner, synth_generate


class Rows:
    """Minimal dataset: rows of (x, y) for a least-squares model."""

    def __init__(self, X, y):
        self.X, self.y = np.asarray(X, float), np.asarray(y, float)

    def __len__(self):
        return len(self.y)

    def take(self, idx):
        return Rows(self.X[idx], self.y[idx])


class LeastSquares:
    def forward_loss(self, params, batch):
        r = batch.X @ params.values - batch.y
        return float(0.5 * np.mean(r * r))

    def loss_and_gradient(self, params, batch):
        r = batch.X @ params.values - batch.y
        grad = batch.X.T @ r / len(batch)
        return float(0.5 * np.mean(r * r)), params.with_values(grad)


class Exploding(LeastSquares):
    def loss_and_gradient(self, params, batch):
        return float("inf"), params


def vec(values):
    return ParamVector(values, [("w", (len(values),))])


def test_partition_table_sizes():
    assert [len(s) for s in partition(list(range(4138)), PartitionSpec(TRAIN_RATIOS))] == [1655, 1241, 828, 414]
    assert [len(s) for s in partition(list(range(592)), PartitionSpec(VALIDATION_RATIOS))] == [237, 178, 117, 60]


def test_partition_small_examples():
    assert [len(s) for s in partition(list(range(8)), PartitionSpec((1, 1)))] == [4, 4]
    assert [len(s) for s in partition(list(range(10)), PartitionSpec((4, 3, 2, 1)))] == [4, 3, 2, 1]


def test_largest_remainder_hand_case():
    # quotas 7*(1/3) = 2.333 each, one leftover goes to the lowest index
    assert largest_remainder_sizes(7, (1, 1, 1)) == [3, 2, 2]
    # quotas 5*(0.5,0.3,0.2) = 2.5,1.5,1.0 -> floors 2,1,1, leftover to index 0 (tie broken low)
    assert largest_remainder_sizes(5, (5, 3, 2)) == [3, 1, 1]


def test_partition_errors_and_minimum_share():
    with pytest.raises(EmptyInputError):
        partition([], PartitionSpec((1, 1)))
    with pytest.raises(ValueError):
        partition([1], PartitionSpec((1, 1)))
    assert min(largest_remainder_sizes(4, (1000, 1, 1, 1))) == 1


@settings(max_examples=100, deadline=None)
@given(
    st.integers(min_value=1, max_value=300),
    st.lists(st.floats(0.01, 100.0), min_size=1, max_size=6),
    st.integers(0, 2**31),
    st.floats(0.0, 1.0),
)
def test_partition_is_a_disjoint_cover(n, ratios, seed, skew):
    if n < len(ratios):
        return
    labels = [i % 3 for i in range(n)]
    shards = partition(list(range(n)), PartitionSpec(tuple(ratios), seed, True, skew), labels=labels)
    assert all(len(s) >= 1 for s in shards)
    assert Counter(x for s in shards for x in s) == Counter(range(n))
    again = partition(list(range(n)), PartitionSpec(tuple(ratios), seed, True, skew), labels=labels)
    assert shards == again


def test_class_skew_concentrates_labels():
    data = synth_generate(SyntheticTaskSpec(samples_per_split={"t": 400}, seed=1))["t"]
    iid = partition(data, PartitionSpec((1, 1, 1, 1), seed=3))
    skewed = partition(data, PartitionSpec((1, 1, 1, 1), seed=3, class_skew=1.0))

    def purity(shards):
        return np.mean([np.bincount(s.labels).max() / len(s) for s in shards])

    assert purity(skewed) > purity(iid) + 0.3


def scalar_adamw(p, g, m, v, t, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    p = p * (1 - lr * wd)
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1**t)
    vh = v / (1 - b2**t)
    return p - lr * mh / (math.sqrt(vh) + eps), m, v


def test_adamw_matches_scalar_reference():
    rng = np.random.default_rng(0)
    cfg = LocalTrainConfig(learning_rate=1e-2, weight_decay=0.1)
    p = rng.normal(size=30)
    m = np.zeros(30)
    v = np.zeros(30)
    ref = [(float(a), 0.0, 0.0) for a in p]
    for t in range(1, 6):
        g = rng.normal(size=30)
        p, m, v = adamw_step(p, g, m, v, t, cfg)
        ref = [scalar_adamw(rp, float(gi), rm, rv, t, 1e-2, 0.1) for (rp, rm, rv), gi in zip(ref, g)]
        np.testing.assert_allclose(p, [r[0] for r in ref], rtol=1e-12)
        np.testing.assert_allclose(m, [r[1] for r in ref], rtol=1e-12)
        np.testing.assert_allclose(v, [r[2] for r in ref], rtol=1e-12)


def test_adamw_zero_gradient_cases():
    p = np.array([1.0, -2.0])
    z = np.zeros(2)
    out, m, v = adamw_step(p, z, z, z, 1, LocalTrainConfig(weight_decay=0.0))
    assert out.tolist() == p.tolist() and m.tolist() == [0, 0] and v.tolist() == [0, 0]
    cfg = LocalTrainConfig(learning_rate=0.1, weight_decay=0.5)
    out = p
    for t in range(1, 4):
        out, _, _ = adamw_step(out, z, z, z, t, cfg)
    np.testing.assert_allclose(out, p * (1 - 0.05) ** 3, rtol=1e-15)


def test_adamw_without_moments_is_sign_scaled_sgd():
    rng = np.random.default_rng(1)
    cfg = LocalTrainConfig(learning_rate=0.01, weight_decay=0.0, beta1=0.0, beta2=0.0)
    p, g = rng.normal(size=50), rng.normal(size=50) * 1e-3
    out, _, _ = adamw_step(p, g, np.zeros(50), np.zeros(50), 3, cfg)
    np.testing.assert_allclose(out - p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=1e-18)


def test_adamw_rejects_nonfinite():
    with pytest.raises(NonFiniteValueError):
        adamw_step(np.array([np.inf]), np.zeros(1), np.zeros(1), np.zeros(1), 1, LocalTrainConfig())
    with pytest.raises(ValueError):
        adamw_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 0, LocalTrainConfig())


def test_sgd_single_step_matches_closed_form():
    x, y, w = np.array([0.5, -1.5, 2.0]), 0.75, np.array([0.2, 0.1, -0.3])
    cfg = LocalTrainConfig(epochs_per_round=1, batch_size=1, optimizer="sgd", learning_rate=0.1, weight_decay=0.0)
    out = local_train(LeastSquares(), vec(w), Rows([x], [y]), cfg)
    np.testing.assert_allclose(out.params.values, w - 0.1 * (x @ w - y) * x, rtol=1e-15)
    assert out.train_trace == [(1, 1, 0.5 * (x @ w - y) ** 2)]


def test_vanishing_learning_rate_keeps_params():
    rng = np.random.default_rng(2)
    data = Rows(rng.normal(size=(20, 3)), rng.normal(size=20))
    w = vec(rng.normal(size=3))
    for opt in ("sgd", "adamw"):
        out = local_train(LeastSquares(), w, data, LocalTrainConfig(learning_rate=1e-300, optimizer=opt, batch_size=20))
        assert out.params == w
        assert len({loss for _, _, loss in out.train_trace}) == 1


def test_trace_length_is_epochs_times_batches():
    data = Rows(np.ones((17, 2)), np.zeros(17))
    out = local_train(LeastSquares(), vec([0.1, 0.2]), data, LocalTrainConfig(epochs_per_round=3, batch_size=5))
    assert len(out.train_trace) == 3 * 4
    assert [e for _, e, _ in out.train_trace] == [1] * 4 + [2] * 4 + [3] * 4
    assert [s for s, _, _ in out.train_trace] == list(range(1, 13))
    assert [e for e, _ in out.val_trace] == [1, 2, 3]
    assert out.validation_loss == out.val_trace[-1][1]


def test_local_train_is_deterministic():
    spec = SyntheticTaskSpec(samples_per_split={"t": 50, "v": 10}, seed=5)
    splits = synth_generate(spec)
    m = ToyCaptioner.for_task(spec)
    cfg = LocalTrainConfig(seed=9, learning_rate=1e-2)
    a = local_train(m, m.init_params(1), splits["t"], cfg, splits["v"])
    b = local_train(m, m.init_params(1), splits["t"], cfg, splits["v"])
    assert a.params.values.tobytes() == b.params.values.tobytes()
    assert a.train_trace == b.train_trace and a.val_trace == b.val_trace
    c = local_train(m, m.init_params(1), splits["t"], LocalTrainConfig(seed=10, learning_rate=1e-2), splits["v"])
    assert c.train_trace != a.train_trace


def test_divergence_reports_step():
    with pytest.raises(DivergenceError) as info:
        local_train(Exploding(), vec([0.0]), Rows([[1.0]], [1.0]), LocalTrainConfig())
    assert info.value.step == 1


def test_training_on_noiseless_task_recovers_templates():
    spec = SyntheticTaskSpec(noise_sigma=0.0, swap_rate=0.0, samples_per_split={"train": 200, "test": 100}, seed=6)
    splits = synth_generate(spec)
    m = ToyCaptioner.for_task(spec)
    cfg = LocalTrainConfig(epochs_per_round=5, learning_rate=0.05, seed=1)
    out = local_train(m, m.init_params(0), splits["train"], cfg)
    decoded = m.greedy_decode(out.params, splits["test"].features)
    exact = np.all(decoded == splits["test"].tokens, axis=1).mean()
    assert exact >= 0.95


def test_adversary_modes():
    u = ClientUpdate(3, vec([1.0, -2.0]), 10, 0.4)
    assert apply_adversary(u, AdversaryMode()) is u
    scaled = apply_adversary(u, AdversaryMode("scale", factor=-1.0))
    flipped = apply_adversary(u, AdversaryMode("sign_flip"))
    assert scaled.params == flipped.params
    assert flipped.params.values.tolist() == [-1.0, 2.0]
    assert (flipped.data_length, flipped.validation_loss) == (10, 0.4)
    a = apply_adversary(u, AdversaryMode("gaussian_noise", sigma=1.0), seed=1)
    b = apply_adversary(u, AdversaryMode("gaussian_noise", sigma=1.0), seed=1)
    assert a.params == b.params and a.params != u.params


def test_adversary_parse_round_trip():
    for text in ("honest", "sign_flip", "scale(50)", "gaussian_noise(0.25)"):
        assert str(AdversaryMode.parse(text)) == text
    with pytest.raises(ValueError):
        AdversaryMode.parse("shuffle(2)")


def test_noisy_client_never_chosen_by_krum():
    rng = np.random.default_rng(12)
    for trial in range(200):
        m = int(rng.integers(4, 9))
        center = rng.normal(size=40)
        updates = [ClientUpdate(k, vec(center + 0.01 * rng.normal(size=40)), 5, 0.1) for k in range(1, m + 1)]
        bad = int(rng.integers(1, m + 1))
        updates[bad - 1] = apply_adversary(updates[bad - 1], AdversaryMode("gaussian_noise", sigma=10.0), seed=trial)
        assert aggregate_krum(updates, 1)[1].selected_client != bad


def test_loss_csv_files(tmp_path):
    data = Rows(np.ones((9, 2)), np.zeros(9))
    out = local_train(LeastSquares(), vec([0.1, 0.2]), data, LocalTrainConfig(batch_size=4))
    write_loss_csvs(tmp_path, 2, out)
    assert (tmp_path / "client_2.losses.csv").read_text().splitlines()[0] == "step,epoch,train_loss"
    assert (tmp_path / "client_2.val_losses.csv").read_text().splitlines()[0] == "epoch,val_loss"
    assert read_loss_csv(tmp_path / "client_2.losses.csv") == out.train_trace
