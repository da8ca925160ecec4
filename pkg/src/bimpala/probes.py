"""Linear cheese-presence probes on named activations.

Positives are mazes with the cheese at a fixed cell; each negative is the same
maze rendered without cheese.  Features are per-sample activations flattened
channel-major (``[C, H, W] -> C*H*W``), so probe weights reshape to
``[C, H*W]`` without ambiguity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io
from . import maze as mz
from .linalg import make_rng
from .network import PolicyNetwork, network_forward
from .training import TRAIN_SEED_LIMIT


@dataclass
class ProbeDataset:
    layer_name: str
    features: np.ndarray  # [N, D]
    labels: np.ndarray  # {0, 1}^N
    activation_shape: tuple[int, int, int]
    train_idx: np.ndarray
    test_idx: np.ndarray
    maze_seeds: np.ndarray  # one per positive/negative pair


@dataclass
class ProbeWeights:
    weights: np.ndarray  # [C*H*W], channel-major
    bias: float
    layer_name: str
    activation_shape: tuple[int, int, int]

    def matrix(self) -> np.ndarray:
        c, h, w = self.activation_shape
        return self.weights.reshape(c, h * w)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.logits(features) > 0).astype(np.int64)


def _activation_shape(a: np.ndarray) -> tuple[int, int, int]:
    # a is batched: [B, C, H, W] or [B, D]
    return tuple(a.shape[1:]) if a.ndim == 4 else (a.shape[1], 1, 1)


def layer_features(net: PolicyNetwork, obs: np.ndarray, layer_name: str, chunk: int = 128):
    """Flattened activations of ``layer_name`` for a batch of observations."""
    valid = net.config.layer_names
    if layer_name not in valid:
        raise KeyError(f"unknown layer {layer_name!r}; valid names: {', '.join(valid)}")
    feats, shape = [], None
    for i in range(0, len(obs), chunk):
        _, _, cache = network_forward(net, obs[i : i + chunk])
        a = cache[layer_name]
        shape = _activation_shape(a)
        feats.append(a.reshape(a.shape[0], -1))
    return np.concatenate(feats), shape


def build_probe_dataset(
    net: PolicyNetwork,
    layer_name: str,
    n_per_class: int = 512,
    cheese_cell: tuple[int, int] = mz.DEFAULT_CHEESE,
    seed: int = 0,
    test_fraction: float = 0.2,
) -> ProbeDataset:
    """Paired cheese / no-cheese dataset; the train/test split is by maze."""
    if layer_name not in net.config.layer_names:
        raise KeyError(f"unknown layer {layer_name!r}; valid names: {', '.join(net.config.layer_names)}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    rng = make_rng(seed)
    seeds = rng.choice(TRAIN_SEED_LIMIT, size=n_per_class, replace=False)
    obs = np.empty((2 * n_per_class, 3, mz.OBS_SIZE, mz.OBS_SIZE))
    for i, s in enumerate(seeds):
        m = mz.generate_maze(int(s), cheese_cell)
        obs[2 * i] = mz.render_observation(m)
        obs[2 * i + 1] = mz.render_observation(m, with_cheese=False)
    labels = np.tile([1, 0], n_per_class).astype(np.int64)
    features, shape = layer_features(net, obs, layer_name)
    order = rng.permutation(n_per_class)
    n_test = int(round(test_fraction * n_per_class)) if n_per_class > 1 else 0
    test_m, train_m = np.sort(order[:n_test]), np.sort(order[n_test:])
    pair = lambda idx: np.sort(np.concatenate([2 * idx, 2 * idx + 1]))
    return ProbeDataset(layer_name, features, labels, shape, pair(train_m), pair(test_m), seeds)


def f1_score(preds, labels) -> float:
    preds = np.asarray(preds).astype(np.int64).ravel()
    labels = np.asarray(labels).astype(np.int64).ravel()
    if preds.size == 0:
        raise ValueError("f1_score of empty inputs")
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    if not (np.isin(preds, (0, 1)).all() and np.isin(labels, (0, 1)).all()):
        raise ValueError("f1_score expects binary inputs")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    if tp == 0:
        return 0.0
    precision = tp / int(np.sum(preds == 1))
    recall = tp / int(np.sum(labels == 1))
    return 2 * precision * recall / (precision + recall)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, l2: float) -> float:
    z = x @ w + b
    # log(1 + e^z) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w))


def _lipschitz(x: np.ndarray, iters: int = 50) -> float:
    """Upper estimate of the largest eigenvalue of [X 1]^T [X 1] / N by power iteration."""
    xa = np.hstack([x, np.ones((x.shape[0], 1))])
    v = np.ones(xa.shape[1]) / np.sqrt(xa.shape[1])
    lam = 0.0
    for _ in range(iters):
        v = xa.T @ (xa @ v)
        lam = float(np.linalg.norm(v))
        if lam == 0:
            return 0.0
        v /= lam
    return 1.05 * lam / x.shape[0]


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1e-4, epochs: int = 500, lr: float | None = None):
    """Full-batch gradient descent on the L2-penalised logistic loss.

    The default step is 1/L for the loss' gradient Lipschitz bound
    ``L = lambda_max(X^T X) / (4N) + l2``.  Returns ``(w, b, loss_history)``.
    """
    n, d = x.shape
    if lr is None:
        lr = 1.0 / (_lipschitz(x) / 4.0 + l2)
    w = np.zeros(d)
    b = 0.0
    history = [logistic_loss(w, b, x, y, l2)]
    for _ in range(epochs):
        r = _sigmoid(x @ w + b) - y
        w = w - lr * (x.T @ r / n + l2 * w)
        b = b - lr * float(np.mean(r))
        history.append(logistic_loss(w, b, x, y, l2))
    return w, b, history


def train_probe(dataset: ProbeDataset, l2: float = 1e-4, epochs: int = 500) -> tuple[ProbeWeights, float]:
    """Fit on the training split; F1 at threshold 0.5 on the held-out split."""
    y = dataset.labels[dataset.train_idx]
    if y.size == 0 or np.all(y == y[0]):
        raise ValueError("probe training data contains a single class")
    x = dataset.features[dataset.train_idx]
    w, b, _ = fit_logistic(x, y.astype(np.float64), l2, epochs)
    probe = ProbeWeights(w, b, dataset.layer_name, tuple(dataset.activation_shape))
    eval_idx = dataset.test_idx if dataset.test_idx.size else dataset.train_idx
    f1 = f1_score(probe.predict(dataset.features[eval_idx]), dataset.labels[eval_idx])
    return probe, f1


def probe_accuracy(probe: ProbeWeights, dataset: ProbeDataset) -> float:
    idx = dataset.test_idx if dataset.test_idx.size else dataset.train_idx
    return float(np.mean(probe.predict(dataset.features[idx]) == dataset.labels[idx]))


def save_probe(stem, probe: ProbeWeights, extra: dict | None = None):
    meta = {
        "layer_name": probe.layer_name,
        "activation_shape": list(probe.activation_shape),
        "bias": probe.bias,
        "layout": "channel-major [C, H, W]",
        **(extra or {}),
    }
    return io.save_bundle(stem, meta, {"weights": probe.weights})


def load_probe(stem) -> ProbeWeights:
    meta, tensors = io.load_bundle(stem)
    return ProbeWeights(tensors["weights"], float(meta["bias"]), meta["layer_name"], tuple(meta["activation_shape"]))
