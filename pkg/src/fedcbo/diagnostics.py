"""Measurement tools: variance decay, theoretical rates, cloud distances,
finite-size scans, and selection-quality curves.

These read simulation output; they never influence the dynamics.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import wasserstein_distance

from . import rng as rng_mod
from .errors import InvalidParameterError, UnsupportedDiagnosticError
from .protocol import oracle_sr, selection_ratio
from .sde import InitSpec, cluster_variances, run_sde

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VarianceReport:
    per_cluster: np.ndarray
    total: float


def variance_report(positions, labels, minimizers):
    """Per-cluster V_k = 0.5 * mean |theta - theta_k*|^2 and their sum."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    labels = np.asarray(labels)
    minimizers = np.atleast_2d(np.asarray(minimizers, dtype=float))
    if minimizers.shape[1] != positions.shape[1]:
        raise UnsupportedDiagnosticError(
            "minimizer dimension does not match particle dimension"
        )
    if labels.max(initial=-1) >= minimizers.shape[0]:
        raise UnsupportedDiagnosticError(
            "a cluster label has no matching minimizer"
        )
    per = cluster_variances(positions, labels, minimizers)
    return VarianceReport(per_cluster=per, total=float(np.nansum(per)))


def theoretical_rate(hp, grad_lipschitz, dim, tau_slack=0.5):
    """Guaranteed decay exponent (1 - tau_slack) * contraction margin.

    ``tau_slack`` is the slack fraction reserved by the decay estimate, not
    the number of local steps.  If the contraction condition fails the rate
    is nonpositive; a warning is logged and the signed value returned.
    """
    if not 0.0 <= tau_slack < 1.0:
        raise InvalidParameterError(f"tau_slack must be in [0, 1), got {tau_slack}")
    margin = hp.contraction_margin(grad_lipschitz, dim)
    if margin <= 0:
        log.warning("contraction condition violated (margin %.4g); "
                    "no decay guarantee applies", margin)
    return (1.0 - tau_slack) * margin


def sliced_w1(cloud_a, cloud_b, n_projections=64, rng=None, projections=None):
    """Sliced 1-Wasserstein distance between two point clouds.

    Both clouds are projected onto shared random unit directions; each 1-D
    distance is exact (sorted-coupling optimal transport) and the mean over
    directions is returned.  Pass ``projections`` to reuse directions across
    calls, which keeps per-direction triangle inequalities intact.
    """
    a = np.atleast_2d(np.asarray(cloud_a, dtype=float))
    b = np.atleast_2d(np.asarray(cloud_b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise InvalidParameterError(
            f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}"
        )
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InvalidParameterError("empty cloud")
    dim = a.shape[1]
    if projections is None:
        if dim == 1:
            projections = np.ones((1, 1))
        else:
            if rng is None:
                rng = rng_mod.stream(0, rng_mod.PROJECTION)
            raw = rng.standard_normal((n_projections, dim))
            projections = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    dists = [
        wasserstein_distance(a @ u, b @ u)
        for u in projections
    ]
    return float(np.mean(dists))


def make_projections(dim, n_projections, rng):
    raw = rng.standard_normal((n_projections, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


@dataclass
class MeanFieldScan:
    """Finite-size discrepancy against the largest-population reference."""

    sizes: list                  # per-cluster populations, ascending
    reference_size: int
    mean_discrepancy: np.ndarray  # aligned with sizes
    per_seed: np.ndarray          # (n_seeds, n_sizes)

    def stderr(self):
        n = self.per_seed.shape[0]
        return self.per_seed.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else \
            np.zeros(len(self.sizes))

    def monotone_violations(self):
        d = self.mean_discrepancy
        return int(np.sum(np.diff(d) > 0))


def meanfield_scan(problem, hp, n_list, seeds, t_steps, init=None,
                   n_projections=64, n_checkpoints=20, projection_seed=0):
    """Compare finite-population runs against the largest population.

    For each seed, every population size in ``n_list`` is integrated on a
    common time grid; the discrepancy of a run is the maximum over
    checkpoints of the cluster-averaged sliced-W1 distance to the reference
    run (largest size, same seed).  Projection directions are drawn once and
    reused for every comparison.
    """
    n_list = sorted(set(int(n) for n in n_list))
    if len(n_list) < 1:
        raise InvalidParameterError("n_list must be nonempty")
    if t_steps < 1:
        raise InvalidParameterError("t_steps must be >= 1")
    init = init or InitSpec()
    reference_size = n_list[-1]
    checkpoints = sorted(set(
        int(round(s)) for s in np.linspace(1, t_steps, min(n_checkpoints, t_steps))
    ))
    projections = make_projections(
        problem.dim, n_projections,
        rng_mod.stream(projection_seed, rng_mod.PROJECTION),
    )

    per_seed = np.zeros((len(seeds), len(n_list)))
    for si, seed in enumerate(seeds):
        results = {}
        for n in n_list:
            run_seed = int(np.random.SeedSequence(entropy=(int(seed), n))
                           .generate_state(1, np.uint64)[0] >> 1)
            results[n] = run_sde(problem, n, hp, t_steps, init=init,
                                 seed=run_seed, record_every=t_steps,
                                 checkpoint_steps=checkpoints)
        ref = results[reference_size]
        for ni, n in enumerate(n_list):
            run = results[n]
            worst = 0.0
            for step in checkpoints:
                vals = []
                for k in range(problem.n_clusters):
                    a = run.checkpoints[step][run.final_labels == k]
                    b = ref.checkpoints[step][ref.final_labels == k]
                    vals.append(sliced_w1(a, b, projections=projections))
                worst = max(worst, float(np.mean(vals)))
            per_seed[si, ni] = worst

    return MeanFieldScan(
        sizes=n_list,
        reference_size=reference_size,
        mean_discrepancy=per_seed.mean(axis=0),
        per_seed=per_seed,
    )


@dataclass
class SrCurve:
    rounds: np.ndarray
    sr: np.ndarray
    oracle: np.ndarray


def sr_curve(round_logs, agent_cluster, hp):
    """Selection ratio per round paired with the oracle value.

    The oracle assumes equal cluster sizes; with unequal clusters the mean
    cluster size is used.
    """
    agent_cluster = np.asarray(agent_cluster)
    n_agents = len(agent_cluster)
    cluster_size = n_agents / len(np.unique(agent_cluster))
    rounds, srs, oracles = [], [], []
    for entry in round_logs:
        rounds.append(entry.round_index)
        srs.append(selection_ratio(entry.selections, agent_cluster))
        oracles.append(oracle_sr(hp, entry.round_index, cluster_size, n_agents))
    return SrCurve(rounds=np.array(rounds), sr=np.array(srs),
                   oracle=np.array(oracles))


def write_csv(path, header, rows):
    """Small deterministic CSV writer used by the run harness."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path
