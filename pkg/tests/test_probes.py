import numpy as np
import pytest

from semaim.errors import ContractError
from semaim.probes import ProbeConfig, knn_probe, linear_probe, split_indices


def test_knn_one_hot_features_perfect():
    labels = np.repeat(np.arange(4), 5)
    assert knn_probe(np.eye(4)[labels], labels, k=4) == 1.0


def test_knn_random_features_near_chance():
    accs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(4), 50)
        accs.append(knn_probe(rng.normal(size=(200, 16)), labels, k=20))
    assert abs(np.mean(accs) - 0.25) < 0.05


def test_knn_k1_is_nearest_neighbour():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(30, 5)), rng.integers(0, 3, size=30)
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    sim = xn @ xn.T
    np.fill_diagonal(sim, -np.inf)
    expected = np.mean(y[sim.argmax(axis=1)] == y)
    assert knn_probe(x, y, k=1) == pytest.approx(expected)


def test_knn_temperature_weights_votes():
    # query 0 has one very close neighbour of its class and two farther ones of another
    x = np.array([[1.0, 0.0], [1.0, 0.01], [0.6, 0.8], [0.6, 0.8]])
    y = np.array([0, 0, 1, 1])
    assert knn_probe(x, y, k=3, temperature=0.07) >= 0.5
    votes_flat = knn_probe(x, y, k=3, temperature=1e6)  # near-uniform weights: majority wins
    assert votes_flat <= knn_probe(x, y, k=3, temperature=0.07)


@pytest.mark.parametrize("k", [0, 10])
def test_knn_k_out_of_range(k):
    with pytest.raises(ContractError):
        knn_probe(np.ones((10, 2)), np.zeros(10, dtype=int), k=k)


def test_linear_separable_is_perfect():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=120)
    x = np.eye(4)[labels] * 3 + 0.1 * rng.normal(size=(120, 4))
    assert linear_probe(x, labels) == 1.0


def test_linear_shuffled_labels_near_chance():
    accs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(4), 100)
        x = np.eye(4)[labels] + 0.1 * rng.normal(size=(400, 4))
        accs.append(linear_probe(x, rng.permutation(labels), ProbeConfig(seed=seed)))
    assert abs(np.mean(accs) - 0.25) < 0.05


def test_linear_deterministic():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(50, 6)), rng.integers(0, 3, size=50)
    assert linear_probe(x, y, ProbeConfig(seed=4)) == linear_probe(x, y, ProbeConfig(seed=4))


def test_split_is_partition():
    train, test = split_indices(20, 0.3, seed=0)
    assert len(test) == 6 and sorted(np.concatenate([train, test]).tolist()) == list(range(20))


def test_probe_config_validation():
    with pytest.raises(ContractError):
        ProbeConfig(test_fraction=1.0)
