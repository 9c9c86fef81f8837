"""Synthetic clustered learning tasks and tiny hand-written models.

Agents hold private shards drawn from one of K cluster distributions.  All
clusters share the same class-conditional Gaussian blobs in an informative
2-D plane, but cluster k's plane is rotated by 2*pi*k/K, so a single global
model cannot fit every cluster at once.  Remaining input dimensions are
pure noise.  Agent i belongs to cluster i mod K.

Models are multinomial logistic regression and a one-hidden-layer MLP with
explicit backprop; parameters travel as flat vectors so the consensus
machinery can treat them as points in R^d.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .errors import InvalidParameterError
from .objectives import DEFAULT_GRAD_BOUND, Objective, clamp_gradient


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(probs, labels):
    n = labels.shape[0]
    p = np.clip(probs[np.arange(n), labels], 1e-300, None)
    return float(-np.mean(np.log(p)))


class LogisticModel:
    """Multinomial logistic regression; params = [W.ravel(), b]."""

    def __init__(self, input_dim, n_classes):
        self.input_dim = input_dim
        self.n_classes = n_classes
        self.n_params = input_dim * n_classes + n_classes

    def init_params(self, rng, scale=None):
        if scale is None:
            scale = 0.1
        return scale * rng.standard_normal(self.n_params)

    def _unpack(self, theta):
        d, c = self.input_dim, self.n_classes
        w = theta[: d * c].reshape(d, c)
        b = theta[d * c:]
        return w, b

    def logits(self, theta, x):
        w, b = self._unpack(theta)
        return x @ w + b

    def loss(self, theta, x, y):
        return _cross_entropy(_softmax(self.logits(theta, x)), y)

    def loss_grad(self, theta, x, y):
        n = x.shape[0]
        probs = _softmax(self.logits(theta, x))
        loss = _cross_entropy(probs, y)
        delta = probs
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grad_w = x.T @ delta
        grad_b = delta.sum(axis=0)
        return loss, np.concatenate([grad_w.ravel(), grad_b])


class MlpModel:
    """One-hidden-layer MLP with hand-coded backprop.

    params = [W1.ravel(), b1, W2.ravel(), b2].  Activation is tanh by
    default; relu is available for parity with larger setups.
    """

    def __init__(self, input_dim, hidden, n_classes, activation="tanh"):
        if activation not in ("tanh", "relu"):
            raise InvalidParameterError(f"unknown activation {activation!r}")
        self.input_dim = input_dim
        self.hidden = hidden
        self.n_classes = n_classes
        self.activation = activation
        self.n_params = input_dim * hidden + hidden + hidden * n_classes + n_classes

    def init_params(self, rng, scale=None):
        d, h, c = self.input_dim, self.hidden, self.n_classes
        s1 = scale if scale is not None else 1.0 / np.sqrt(d)
        s2 = scale if scale is not None else 1.0 / np.sqrt(h)
        w1 = s1 * rng.standard_normal(d * h)
        b1 = np.zeros(h)
        w2 = s2 * rng.standard_normal(h * c)
        b2 = np.zeros(c)
        return np.concatenate([w1, b1, w2, b2])

    def _unpack(self, theta):
        d, h, c = self.input_dim, self.hidden, self.n_classes
        i = 0
        w1 = theta[i:i + d * h].reshape(d, h); i += d * h
        b1 = theta[i:i + h]; i += h
        w2 = theta[i:i + h * c].reshape(h, c); i += h * c
        b2 = theta[i:]
        return w1, b1, w2, b2

    def _forward(self, theta, x):
        w1, b1, w2, b2 = self._unpack(theta)
        pre = x @ w1 + b1
        hid = np.tanh(pre) if self.activation == "tanh" else np.maximum(pre, 0.0)
        return pre, hid, hid @ w2 + b2

    def logits(self, theta, x):
        return self._forward(theta, x)[2]

    def loss(self, theta, x, y):
        return _cross_entropy(_softmax(self.logits(theta, x)), y)

    def loss_grad(self, theta, x, y):
        w1, b1, w2, b2 = self._unpack(theta)
        n = x.shape[0]
        pre, hid, logits = self._forward(theta, x)
        probs = _softmax(logits)
        loss = _cross_entropy(probs, y)
        delta = probs
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grad_w2 = hid.T @ delta
        grad_b2 = delta.sum(axis=0)
        back = delta @ w2.T
        if self.activation == "tanh":
            back = back * (1.0 - hid * hid)
        else:
            back = back * (pre > 0.0)
        grad_w1 = x.T @ back
        grad_b1 = back.sum(axis=0)
        return loss, np.concatenate(
            [grad_w1.ravel(), grad_b1, grad_w2.ravel(), grad_b2]
        )


def make_model(kind, input_dim, n_classes, hidden=16, activation="tanh"):
    if kind == "logistic":
        return LogisticModel(input_dim, n_classes)
    if kind == "mlp":
        return MlpModel(input_dim, hidden, n_classes, activation=activation)
    raise InvalidParameterError(f"unknown model kind {kind!r}")


def predict(model, theta, x):
    return np.argmax(model.logits(theta, x), axis=1)


def accuracy(model, theta, x, y):
    return float(np.mean(predict(model, theta, x) == y))


def empirical_loss(model, x, y, grad_bound=DEFAULT_GRAD_BOUND):
    """Full-shard cross-entropy as an Objective (no minimizer metadata)."""

    def _eval(theta):
        return model.loss(np.asarray(theta, dtype=float), x, y)

    def _grad(theta):
        _, g = model.loss_grad(np.asarray(theta, dtype=float), x, y)
        return clamp_gradient(g, grad_bound)

    return Objective(
        dim=model.n_params,
        eval=_eval,
        grad=_grad,
        grad_bound=grad_bound,
        name="empirical-cross-entropy",
    )


def sgd_step(theta, model, x, y, rate, batch_size=None, rng=None,
             grad_bound=DEFAULT_GRAD_BOUND):
    """One SGD step.  The batch is sampled without replacement; a batch size
    of None or >= shard size means the full shard.  rate = 0 is a no-op."""
    theta = np.asarray(theta, dtype=float)
    n = x.shape[0]
    if batch_size is not None and batch_size < n:
        if rng is None:
            raise InvalidParameterError("mini-batching requires an rng stream")
        idx = rng.choice(n, size=batch_size, replace=False)
        x, y = x[idx], y[idx]
    _, g = model.loss_grad(theta, x, y)
    return theta - rate * clamp_gradient(g, grad_bound)


@dataclass
class ShardTask:
    """An agent's private data plus its local-training behavior.

    ``train`` runs the requested number of SGD steps with a momentum buffer
    local to the call; ``loss`` is the deterministic full-shard loss used
    for consensus weights and likelihood updates.
    """

    model: object
    x: np.ndarray
    y: np.ndarray
    batch_size: int = None
    momentum: float = 0.0
    grad_bound: float = DEFAULT_GRAD_BOUND

    def loss(self, theta):
        return self.model.loss(np.asarray(theta, dtype=float), self.x, self.y)

    def train(self, theta, steps, rate, rng):
        theta = np.asarray(theta, dtype=float).copy()
        n = self.x.shape[0]
        use_batch = self.batch_size is not None and self.batch_size < n
        velocity = np.zeros_like(theta)
        for _ in range(steps):
            if use_batch:
                idx = rng.choice(n, size=self.batch_size, replace=False)
                xb, yb = self.x[idx], self.y[idx]
            else:
                xb, yb = self.x, self.y
            _, g = self.model.loss_grad(theta, xb, yb)
            g = clamp_gradient(g, self.grad_bound)
            velocity = self.momentum * velocity + g
            theta = theta - rate * velocity
        return theta


@dataclass
class ClusteredDataset:
    """Shards for every agent plus per-cluster held-out test sets.

    ``agent_cluster`` is the hidden assignment; protocol code never sees it,
    only the harness and diagnostics do.
    """

    shards: list                 # per agent: (x, y)
    agent_cluster: np.ndarray    # (n_agents,)
    test_sets: list              # per cluster: (x, y)
    meta: dict = field(default_factory=dict)

    @property
    def n_agents(self):
        return len(self.shards)

    @property
    def n_clusters(self):
        return len(self.test_sets)

    @property
    def input_dim(self):
        return self.shards[0][0].shape[1]

    def cluster_sizes(self):
        return np.bincount(self.agent_cluster, minlength=self.n_clusters)


def rotation_matrix(angle, dim):
    """Planar rotation acting on coordinates (0, 1), identity elsewhere."""
    r = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    r[0, 0], r[0, 1] = c, -s
    r[1, 0], r[1, 1] = s, c
    return r


def _class_means(n_classes, radius):
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _sample_cluster(rng, n, cluster, n_classes, n_clusters, input_dim,
                    radius, blob_std, noise_std):
    angle = 2.0 * np.pi * cluster / n_clusters
    means = _class_means(n_classes, radius) @ rotation_matrix(angle, 2).T
    y = rng.integers(0, n_classes, size=n)
    x = np.empty((n, input_dim))
    x[:, :2] = means[y] + blob_std * rng.standard_normal((n, 2))
    if input_dim > 2:
        x[:, 2:] = noise_std * rng.standard_normal((n, input_dim - 2))
    return x, y


def generate_clustered_data(n_clusters, n_agents, n_per_agent, input_dim,
                            n_classes, seed, radius=2.0, blob_std=1.0,
                            noise_std=1.0, n_test=400):
    """Clustered blobs dataset; deterministic in ``seed``.

    Requires n_agents divisible by n_clusters and input_dim >= 2 (the
    rotation needs a plane).
    """
    if n_clusters < 1 or n_agents < 1 or n_per_agent < 1:
        raise InvalidParameterError("cluster/agent/sample counts must be >= 1")
    if n_agents % n_clusters != 0:
        raise InvalidParameterError(
            f"n_agents ({n_agents}) must be divisible by n_clusters ({n_clusters})"
        )
    if input_dim < 2:
        raise InvalidParameterError("input_dim must be >= 2")
    if n_classes < 2:
        raise InvalidParameterError("n_classes must be >= 2")

    agent_cluster = np.arange(n_agents) % n_clusters
    shards = []
    for i in range(n_agents):
        gen = rng_mod.stream(seed, rng_mod.DATA, i)
        shards.append(
            _sample_cluster(gen, n_per_agent, int(agent_cluster[i]), n_classes,
                            n_clusters, input_dim, radius, blob_std, noise_std)
        )
    test_sets = []
    for k in range(n_clusters):
        gen = rng_mod.stream(seed, rng_mod.DATA, n_agents + k)
        test_sets.append(
            _sample_cluster(gen, n_test, k, n_classes, n_clusters, input_dim,
                            radius, blob_std, noise_std)
        )
    meta = {
        "n_clusters": n_clusters,
        "n_agents": n_agents,
        "n_per_agent": n_per_agent,
        "input_dim": input_dim,
        "n_classes": n_classes,
        "seed": int(seed),
        "radius": radius,
        "blob_std": blob_std,
        "noise_std": noise_std,
        "n_test": n_test,
        "rotation_angles": [2.0 * np.pi * k / n_clusters for k in range(n_clusters)],
    }
    return ClusteredDataset(shards=shards, agent_cluster=agent_cluster,
                            test_sets=test_sets, meta=meta)


def save_dataset(dataset, out_dir):
    """Columnar npz plus a JSON manifest describing how it was generated."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_x = np.concatenate([x for x, _ in dataset.shards])
    train_y = np.concatenate([y for _, y in dataset.shards])
    train_agent = np.concatenate(
        [np.full(len(y), i) for i, (_, y) in enumerate(dataset.shards)]
    )
    test_x = np.concatenate([x for x, _ in dataset.test_sets])
    test_y = np.concatenate([y for _, y in dataset.test_sets])
    test_cluster = np.concatenate(
        [np.full(len(y), k) for k, (_, y) in enumerate(dataset.test_sets)]
    )
    np.savez(
        out_dir / "data.npz",
        train_x=train_x, train_y=train_y, train_agent=train_agent,
        test_x=test_x, test_y=test_y, test_cluster=test_cluster,
        agent_cluster=dataset.agent_cluster,
    )
    manifest = dict(dataset.meta)
    manifest["format"] = "clustered-npz-v1"
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out_dir


def load_dataset(in_dir):
    in_dir = Path(in_dir)
    with open(in_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "clustered-npz-v1":
        raise InvalidParameterError(
            f"unrecognized dataset format {manifest.get('format')!r}"
        )
    blob = np.load(in_dir / "data.npz")
    n_agents = int(manifest["n_agents"])
    n_clusters = int(manifest["n_clusters"])
    shards = []
    for i in range(n_agents):
        sel = blob["train_agent"] == i
        shards.append((blob["train_x"][sel], blob["train_y"][sel]))
    test_sets = []
    for k in range(n_clusters):
        sel = blob["test_cluster"] == k
        test_sets.append((blob["test_x"][sel], blob["test_y"][sel]))
    meta = {k: v for k, v in manifest.items() if k != "format"}
    return ClusteredDataset(shards=shards, agent_cluster=blob["agent_cluster"],
                            test_sets=test_sets, meta=meta)
