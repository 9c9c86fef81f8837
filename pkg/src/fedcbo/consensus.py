"""Gibbs-weighted consensus points.

The consensus point of a particle cloud is the average of positions weighted
by exp(-alpha * loss).  Exponentials are taken after subtracting the minimum
loss, which makes the computation invariant to constant loss shifts and safe
for large alpha.  Summation order is fixed (particle-index order), so a
given cloud always produces bit-identical output.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError


@dataclass(frozen=True)
class ConsensusPoint:
    """Weighted barycenter plus the weight mass that produced it.

    ``total_weight`` is the sum of the shifted weights exp(-alpha*(L - L_min)),
    so it always lies in [1, n].
    """

    value: np.ndarray
    total_weight: float
    alpha: float


def consensus_point(positions, losses, alpha):
    """Consensus of ``positions`` under Gibbs weights exp(-alpha * losses).

    alpha = 0 gives the plain mean.  Every coordinate of the result is
    clipped onto the coordinate range of the cloud, so convex-hull (box)
    membership holds exactly despite rounding.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    losses = np.asarray(losses, dtype=float).ravel()
    if positions.shape[0] == 0:
        raise InvalidParameterError("empty particle set")
    if losses.shape[0] != positions.shape[0]:
        raise InvalidParameterError(
            f"{positions.shape[0]} positions but {losses.shape[0]} losses"
        )
    if not np.isfinite(alpha) or alpha < 0:
        raise InvalidParameterError(f"alpha must be finite and >= 0, got {alpha}")
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise InvalidParameterError(f"non-finite loss at index {bad[0]}")
    if not np.all(np.isfinite(positions)):
        raise InvalidParameterError("non-finite particle position")

    shifted = losses - losses.min()
    weights = np.exp(-alpha * shifted)
    total = float(np.add.reduce(weights))
    value = np.add.reduce(positions * weights[:, None], axis=0) / total
    value = np.clip(value, positions.min(axis=0), positions.max(axis=0))
    return ConsensusPoint(value=value, total_weight=total, alpha=float(alpha))


def consensus_point_for_agent(own_id, own_model, downloads, evaluate, alpha,
                              include_self=True):
    """Consensus over downloaded models, weighted by the caller's own loss.

    ``downloads`` maps agent id -> model vector; ``evaluate`` is the caller's
    deterministic loss.  Models whose loss comes back non-finite are dropped
    rather than poisoning the weights.  Returns (point, losses, dropped)
    where ``losses`` records every evaluated peer loss for the likelihood
    update and ``dropped`` lists excluded ids.

    With no downloads and include_self, the consensus is the caller's own
    model (aggregation becomes a no-op).
    """
    losses = {}
    for agent_id in sorted(downloads):
        if agent_id == own_id:
            continue
        try:
            losses[agent_id] = float(evaluate(downloads[agent_id]))
        except Exception as exc:
            raise RuntimeError(f"loss evaluation failed for model of agent {agent_id}") from exc

    kept_ids = [i for i in sorted(losses) if np.isfinite(losses[i])]
    dropped = [i for i in sorted(losses) if not np.isfinite(losses[i])]

    stack = [downloads[i] for i in kept_ids]
    stack_losses = [losses[i] for i in kept_ids]
    if include_self:
        try:
            own_loss = float(evaluate(own_model))
        except Exception as exc:
            raise RuntimeError(f"loss evaluation failed for agent {own_id}'s own model") from exc
        if not np.isfinite(own_loss):
            raise InvalidParameterError(f"agent {own_id}: own loss is non-finite")
        stack.append(own_model)
        stack_losses.append(own_loss)
        losses[own_id] = own_loss
    if not stack:
        raise InvalidParameterError(
            f"agent {own_id}: no usable models for aggregation"
        )
    point = consensus_point(np.stack(stack), np.array(stack_losses), alpha)
    return point, losses, dropped


def stability_gap(positions_a, positions_b, objective, alpha):
    """Distance between the consensus points of two clouds under one loss."""
    positions_a = np.atleast_2d(np.asarray(positions_a, dtype=float))
    positions_b = np.atleast_2d(np.asarray(positions_b, dtype=float))
    if positions_a.shape[1] != positions_b.shape[1]:
        raise InvalidParameterError(
            f"dimension mismatch: {positions_a.shape[1]} vs {positions_b.shape[1]}"
        )
    point_a = consensus_point(positions_a, objective.losses(positions_a), alpha)
    point_b = consensus_point(positions_b, objective.losses(positions_b), alpha)
    return float(np.linalg.norm(point_a.value - point_b.value))
