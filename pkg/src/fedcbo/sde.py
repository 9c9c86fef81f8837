"""Coupled multi-cluster particle dynamics.

Particles belong to hidden clusters, but every cluster's consensus point is
computed over the *whole* cloud: particles from other clusters simply get
negligible weight once alpha is large.  One Euler step per particle i in
cluster k:

    theta' = theta - l1*g*(theta - m_k) - l2*g*grad_k(theta)
             + s1*sqrt(g)*|theta - m_k|*z + s2*sqrt(g)*|grad_k(theta)|*z~

with z, z~ independent standard normal vectors drawn from the particle's own
stream (z first, then z~).  The noise amplitudes are scalar norms times an
isotropic Gaussian, so noise vanishes as the cloud reaches consensus.
"""

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import rng as rng_mod
from .consensus import consensus_point
from .errors import DivergenceError, InvalidParameterError


@dataclass(frozen=True)
class HyperParams:
    """Dynamics and protocol knobs shared by the simulator and the protocol.

    consensus_drift / grad_drift are the drift rates toward the consensus
    point and down the local gradient; consensus_noise / grad_noise scale
    the matching noise terms.  local_steps and download_budget only matter
    for the round-based protocol.
    """

    consensus_drift: float = 1.0
    grad_drift: float = 0.0
    consensus_noise: float = 0.0
    grad_noise: float = 0.0
    alpha: float = 10.0
    step_size: float = 0.1
    local_steps: int = 1
    download_budget: int = 0
    eps_start: float = 0.5
    eps_decay: float = 0.01
    eps_floor: float = 0.1
    momentum: float = 0.0
    batch_size: Optional[int] = None
    include_self: bool = True

    def __post_init__(self):
        problems = []
        for name in ("consensus_drift", "grad_drift", "consensus_noise", "grad_noise"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.alpha <= 0:
            problems.append("alpha must be > 0")
        if self.step_size <= 0:
            problems.append("step_size must be > 0")
        if self.local_steps < 0:
            problems.append("local_steps must be >= 0")
        if self.download_budget < 0:
            problems.append("download_budget must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            problems.append("momentum must be in [0, 1)")
        if problems:
            raise InvalidParameterError("; ".join(problems))

    def contraction_margin(self, grad_lipschitz, dim):
        """2*l1 - (2*l2*M + d*s1^2 + d*s2^2*M^2); positive means contraction."""
        m = float(grad_lipschitz)
        return (
            2.0 * self.consensus_drift
            - 2.0 * self.grad_drift * m
            - dim * self.consensus_noise**2
            - dim * self.grad_noise**2 * m * m
        )

    def theory_regime(self, grad_lipschitz, dim):
        return self.contraction_margin(grad_lipschitz, dim) > 0.0


def epsilon_for_round(hp, round_idx):
    """Exploration rate schedule: eps(n) = max(start - decay*n, floor)."""
    if round_idx < 0:
        raise InvalidParameterError(f"round index must be >= 0, got {round_idx}")
    return max(hp.eps_start - hp.eps_decay * round_idx, hp.eps_floor)


@dataclass(frozen=True)
class InitSpec:
    """Isotropic Gaussian initialization  N(mean, std^2 I)."""

    std: float = 1.0
    mean: float = 0.0

    def __post_init__(self):
        if self.std <= 0:
            raise InvalidParameterError(f"init std must be > 0, got {self.std}")


@dataclass
class ParticleCloud:
    """Positions plus hidden cluster labels and per-particle streams.

    Streams are stateful: stepping a cloud advances them.  Rebuild via
    ``make_cloud`` to restart a trajectory from scratch.
    """

    positions: np.ndarray
    labels: np.ndarray
    streams: list
    step_count: int = 0

    @property
    def n_particles(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]


def make_cloud(problem, n_per_cluster, init, seed):
    """Fresh cloud with n_per_cluster particles per cluster, all init draws
    taken from the per-particle streams."""
    if n_per_cluster < 1:
        raise InvalidParameterError("n_per_cluster must be >= 1")
    k = problem.n_clusters
    n = k * n_per_cluster
    labels = np.repeat(np.arange(k), n_per_cluster)
    streams = rng_mod.agent_streams(seed, n)
    positions = np.empty((n, problem.dim))
    for i in range(n):
        positions[i] = init.mean + init.std * streams[i].standard_normal(problem.dim)
    return ParticleCloud(positions=positions, labels=labels, streams=streams)


def cluster_consensus(positions, labels, problem, alpha, step=None):
    """Per-cluster consensus points, each over the whole cloud.

    Losses that overflow to non-finite values mean the trajectory has
    diverged even while positions are still representable, so that case
    raises DivergenceError rather than a validation error.
    """
    points = np.empty((problem.n_clusters, positions.shape[1]))
    for k, objective in enumerate(problem.objectives):
        losses = objective.losses(positions)
        bad = np.flatnonzero(~np.isfinite(losses))
        if bad.size:
            raise DivergenceError(
                f"loss of particle {bad[0]} became non-finite"
                + (f" at step {step}" if step is not None else ""),
                step=step, index=int(bad[0]),
            )
        points[k] = consensus_point(positions, losses, alpha).value
    return points


def _advance(positions, labels, problem, hp, noise, step=None):
    """Shared Euler update; ``noise`` is an (n, 2, dim) block or None.

    Overflow is handled by the explicit finiteness checks, so numpy's own
    overflow warnings are silenced here.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _advance_inner(positions, labels, problem, hp, noise, step)


def _advance_inner(positions, labels, problem, hp, noise, step):
    g = hp.step_size
    consensus = cluster_consensus(positions, labels, problem, hp.alpha, step=step)
    new = np.empty_like(positions)
    for k, objective in enumerate(problem.objectives):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            continue
        theta = positions[idx]
        to_consensus = theta - consensus[k]
        grads = objective.gradients(theta)
        drift = theta - hp.consensus_drift * g * to_consensus - hp.grad_drift * g * grads
        if noise is None:
            new[idx] = drift
            continue
        dist = np.linalg.norm(to_consensus, axis=1)
        gnorm = np.linalg.norm(grads, axis=1)
        z = noise[idx, 0]
        zt = noise[idx, 1]
        new[idx] = (
            drift
            + hp.consensus_noise * np.sqrt(g) * dist[:, None] * z
            + hp.grad_noise * np.sqrt(g) * gnorm[:, None] * zt
        )
    return new


def em_step(cloud, problem, hp):
    """One Euler-Maruyama step; returns a new cloud, streams advanced.

    Each particle always consumes one (2, dim) normal draw from its stream,
    so noiseless and noisy runs stay stream-aligned.
    """
    if cloud.dim != problem.dim:
        raise InvalidParameterError(
            f"cloud dim {cloud.dim} does not match problem dim {problem.dim}"
        )
    n = cloud.n_particles
    noise = np.empty((n, 2, cloud.dim))
    for i in range(n):
        noise[i] = cloud.streams[i].standard_normal((2, cloud.dim))
    new_positions = _advance(cloud.positions, cloud.labels, problem, hp, noise,
                             step=cloud.step_count + 1)
    _check_finite(new_positions, cloud.step_count + 1)
    return ParticleCloud(
        positions=new_positions,
        labels=cloud.labels,
        streams=cloud.streams,
        step_count=cloud.step_count + 1,
    )


def _check_finite(positions, step):
    if np.all(np.isfinite(positions)):
        return
    bad = np.flatnonzero(~np.isfinite(positions).all(axis=1))[0]
    raise DivergenceError(
        f"particle {bad} became non-finite at step {step}",
        step=step,
        index=int(bad),
    )


@dataclass
class SdeResult:
    """Recorded trajectory of a particle run."""

    steps: np.ndarray
    times: np.ndarray
    variances: np.ndarray        # (n_records, n_clusters), 0.5 * mean |theta - theta_k*|^2
    consensus_errors: np.ndarray  # (n_records, n_clusters), |m_k - theta_k*|
    final_positions: np.ndarray
    final_labels: np.ndarray
    checkpoints: dict            # step -> positions snapshot
    theory_regime: Optional[bool]
    hp: HyperParams = field(repr=False)

    @property
    def variance_sums(self):
        return self.variances.sum(axis=1)

    def records(self):
        """Per-record dicts, ready for JSONL."""
        for i in range(len(self.steps)):
            yield {
                "step": int(self.steps[i]),
                "time": float(self.times[i]),
                "v_per_cluster": [float(v) for v in self.variances[i]],
                "v_sum": float(self.variances[i].sum()),
                "consensus_err": [float(e) for e in self.consensus_errors[i]],
            }


def cluster_variances(positions, labels, minimizers):
    """V_k = 0.5 * mean over cluster-k particles of |theta - theta_k*|^2."""
    out = np.empty(minimizers.shape[0])
    for k in range(minimizers.shape[0]):
        idx = labels == k
        if not idx.any():
            out[k] = np.nan
            continue
        d = positions[idx] - minimizers[k]
        out[k] = 0.5 * float(np.mean(np.einsum("ij,ij->i", d, d)))
    return out


_NOISE_CHUNK = 256


def run_sde(problem, n_per_cluster, hp, t_steps, init=None, seed=0,
            record_every=1, checkpoint_steps=(), jsonl_path=None):
    """Integrate the coupled system for t_steps and record V and consensus error.

    Noise is pre-drawn from per-particle streams in step-major order, which
    reproduces exactly what repeated ``em_step`` calls would draw.  Snapshots
    of the positions are kept at ``checkpoint_steps``.
    """
    if t_steps < 0:
        raise InvalidParameterError("t_steps must be >= 0")
    init = init or InitSpec()
    cloud = make_cloud(problem, n_per_cluster, init, seed)
    minimizers = problem.minimizers
    lip = problem.max_grad_lipschitz
    regime = hp.theory_regime(lip, problem.dim) if lip is not None else None

    checkpoint_steps = sorted(set(int(s) for s in checkpoint_steps))
    checkpoints = {}
    rec_steps, rec_v, rec_err = [], [], []

    def record(step, positions):
        with np.errstate(over="ignore", invalid="ignore"):
            rec_steps.append(step)
            rec_v.append(cluster_variances(positions, cloud.labels, minimizers))
            points = cluster_consensus(positions, cloud.labels, problem, hp.alpha,
                                       step=step)
            rec_err.append(np.linalg.norm(points - minimizers, axis=1))

    record(0, cloud.positions)
    if 0 in checkpoint_steps:
        checkpoints[0] = cloud.positions.copy()

    positions = cloud.positions
    n = cloud.n_particles
    noisy = hp.consensus_noise > 0 or hp.grad_noise > 0
    step = 0
    while step < t_steps:
        block = min(_NOISE_CHUNK, t_steps - step)
        # Per-particle block draw: C-order (block, 2, dim) matches the
        # per-step draw order of em_step.
        chunk = np.empty((n, block, 2, cloud.dim))
        for i in range(n):
            chunk[i] = cloud.streams[i].standard_normal((block, 2, cloud.dim))
        for s in range(block):
            noise = chunk[:, s] if noisy else None
            positions = _advance(positions, cloud.labels, problem, hp, noise,
                                 step=step + 1)
            step += 1
            _check_finite(positions, step)
            if step % record_every == 0 or step == t_steps:
                record(step, positions)
            if step in checkpoint_steps:
                checkpoints[step] = positions.copy()

    result = SdeResult(
        steps=np.array(rec_steps),
        times=np.array(rec_steps, dtype=float) * hp.step_size,
        variances=np.array(rec_v),
        consensus_errors=np.array(rec_err),
        final_positions=positions,
        final_labels=cloud.labels.copy(),
        checkpoints=checkpoints,
        theory_regime=regime,
        hp=hp,
    )
    if jsonl_path is not None:
        with open(jsonl_path, "w") as fh:
            for rec in result.records():
                fh.write(json.dumps(rec) + "\n")
    return result


def decay_exponent_fit(v_values, times, window=None):
    """Least-squares decay rate of log(V) over ``times``.

    ``window`` is an optional (start, stop) index slice.  Nonpositive V
    entries are trimmed before fitting; an empty window after trimming is an
    error.  Returns the sign-flipped slope, positive for decay.
    """
    v = np.asarray(v_values, dtype=float)
    t = np.asarray(times, dtype=float)
    if v.shape != t.shape:
        raise InvalidParameterError("v_values and times must have the same shape")
    if window is not None:
        lo, hi = window
        v, t = v[lo:hi], t[lo:hi]
    keep = v > 0
    v, t = v[keep], t[keep]
    if len(v) < 2:
        raise InvalidParameterError("fit window has fewer than 2 positive samples")
    slope = np.polyfit(t, np.log(v), 1)[0]
    return float(-slope)
