"""The round-based collaborative protocol.

Each round has two phases.  Local update: every participating agent runs a
few SGD steps on its own shard.  Local aggregation: every agent samples a
model-download set with an epsilon-greedy rule driven by its likelihood
scores, pulls the sampled post-update models, weights them by their loss on
its own data, and contracts its model toward the resulting consensus point.

Nothing in this module sees cluster labels; selection quality is judged
afterwards by the harness, which is the only place that knows the hidden
assignment.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .consensus import consensus_point_for_agent
from .errors import DivergenceError, InvalidParameterError
from .sde import epsilon_for_round

log = logging.getLogger(__name__)


@dataclass
class ObjectiveTask:
    """Protocol-facing wrapper for an analytic objective.

    ``train`` is plain gradient descent; it never touches the rng, so runs
    over analytic tasks are deterministic given initial models.
    """

    objective: object
    momentum: float = 0.0

    def loss(self, theta):
        return self.objective.eval(np.asarray(theta, dtype=float))

    def train(self, theta, steps, rate, rng):
        theta = np.asarray(theta, dtype=float).copy()
        velocity = np.zeros_like(theta)
        for _ in range(steps):
            g = self.objective.grad(theta)
            velocity = self.momentum * velocity + g
            theta = theta - rate * velocity
        return theta


class LikelihoodMatrix:
    """Accumulated evidence that peer i shares agent j's distribution.

    Row j holds one score per peer i != j; the self entry does not exist.
    Scores start at zero and accumulate (own loss - peer loss) each time a
    peer's model is evaluated, so peers whose models do well on j's data
    rise in the ranking.
    """

    def __init__(self, n_agents):
        if n_agents < 1:
            raise InvalidParameterError("n_agents must be >= 1")
        self.n_agents = n_agents
        self._scores = np.zeros((n_agents, n_agents))

    def _check(self, j, i):
        if not (0 <= j < self.n_agents and 0 <= i < self.n_agents):
            raise InvalidParameterError(f"agent index out of range: ({j}, {i})")
        if j == i:
            raise InvalidParameterError(f"agent {j} has no likelihood entry for itself")

    def score(self, j, i):
        self._check(j, i)
        return float(self._scores[j, i])

    def add(self, j, i, delta):
        self._check(j, i)
        self._scores[j, i] += delta

    def row(self, j, candidates):
        """Scores of ``candidates`` in j's row, candidate order preserved."""
        return np.array([self.score(j, i) for i in candidates])

    def copy(self):
        out = LikelihoodMatrix(self.n_agents)
        out._scores = self._scores.copy()
        return out


def _round_half_up(x):
    return int(np.floor(x + 0.5))


# Budget-clamp situations already reported, to keep long runs quiet.
_clamp_warned = set()


def greedy_sample(scores, own_id, participants, budget, eps, rng):
    """Two-stage epsilon-greedy selection of ``budget`` peers.

    An exploration block of round-half-up(eps * budget) peers is drawn
    uniformly without replacement; the rest are the top-scoring remaining
    peers (``scores``: LikelihoodMatrix or row lookup), ties broken toward
    the lower agent id.  A budget larger than the available peers is clamped
    with a warning.  Returns a sorted id list.
    """
    if not 0.0 <= eps <= 1.0:
        raise InvalidParameterError(f"eps must be in [0, 1], got {eps}")
    if budget < 0:
        raise InvalidParameterError(f"budget must be >= 0, got {budget}")
    peers = sorted(p for p in participants if p != own_id)
    if budget > len(peers):
        key = (budget, len(peers))
        if key not in _clamp_warned:
            _clamp_warned.add(key)
            log.warning("download budget %d exceeds %d available peers; clamping",
                        budget, len(peers))
        budget = len(peers)
    if budget == 0:
        return []
    n_explore = min(budget, _round_half_up(eps * budget))
    explore = list(rng.choice(peers, size=n_explore, replace=False)) if n_explore else []
    explore = [int(i) for i in explore]
    remaining = [p for p in peers if p not in set(explore)]
    n_exploit = budget - n_explore
    if n_exploit:
        row = scores.row(own_id, remaining)
        order = sorted(range(len(remaining)), key=lambda t: (-row[t], remaining[t]))
        exploit = [remaining[t] for t in order[:n_exploit]]
    else:
        exploit = []
    return sorted(explore + exploit)


@dataclass
class AggregationResult:
    new_model: np.ndarray
    peer_losses: dict          # id -> loss of peer model on own data
    own_loss: float
    score_deltas: dict         # id -> own_loss - peer_loss
    dropped: list              # ids excluded for non-finite loss


def local_aggregation(own_id, own_model, downloads, loss_fn, hp):
    """Consensus contraction of one agent's model toward its download set.

    ``downloads`` maps peer id -> post-local-update model.  Peer models with
    non-finite loss are excluded from the consensus and from the score
    deltas, and reported in ``dropped``.
    """
    point, losses, dropped = consensus_point_for_agent(
        own_id, own_model, downloads, loss_fn, hp.alpha,
        include_self=hp.include_self,
    )
    if dropped:
        log.warning("agent %d: dropped models with non-finite loss: %s", own_id, dropped)
    own_loss = losses.get(own_id)
    if own_loss is None:
        own_loss = float(loss_fn(own_model))
    step = hp.consensus_drift * hp.step_size
    new_model = own_model - step * (own_model - point.value)
    if not np.all(np.isfinite(new_model)):
        raise DivergenceError(f"agent {own_id}: model became non-finite in aggregation",
                              index=own_id)
    deltas = {
        i: own_loss - losses[i]
        for i in losses
        if i != own_id and i not in dropped
    }
    return AggregationResult(new_model=new_model, peer_losses=losses,
                             own_loss=own_loss, score_deltas=deltas,
                             dropped=dropped)


@dataclass
class RoundLog:
    """What happened in one protocol round, for diagnostics."""

    round_index: int
    participants: list
    eps: float
    selections: dict           # agent id -> sorted list of downloaded peer ids
    own_losses: dict           # agent id -> post-update loss on own shard
    dropped: dict = field(default_factory=dict)

    @property
    def mean_local_loss(self):
        vals = list(self.own_losses.values())
        return float(np.mean(vals)) if vals else float("nan")


def fedcbo_round(models, tasks, scores, hp, round_index, streams,
                 participation=1.0, round_rng=None):
    """Advance every participating agent by one full round.

    ``models`` is the (n_agents, dim) array of current models; ``tasks``
    the per-agent ShardTask/ObjectiveTask list; ``scores`` the shared
    LikelihoodMatrix.  Per-agent randomness (mini-batches, selection) comes
    from ``streams``; ``round_rng`` only picks the participant set.

    Returns (new_models, new_scores, RoundLog).  The input state is never
    mutated: any per-agent failure aborts the round atomically.
    """
    n_agents = len(tasks)
    if models.shape[0] != n_agents:
        raise InvalidParameterError("models and tasks disagree on agent count")
    if not 0.0 < participation <= 1.0:
        raise InvalidParameterError(f"participation must be in (0, 1], got {participation}")

    if participation < 1.0:
        if round_rng is None:
            raise InvalidParameterError("partial participation requires round_rng")
        size = max(1, _round_half_up(participation * n_agents))
        participants = sorted(int(i) for i in
                              round_rng.choice(n_agents, size=size, replace=False))
    else:
        participants = list(range(n_agents))

    eps = epsilon_for_round(hp, round_index)
    rate = hp.grad_drift * hp.step_size

    # Phase 1: local updates, one agent at a time on its own stream.
    updated = models.copy()
    for j in participants:
        try:
            updated[j] = tasks[j].train(models[j], hp.local_steps, rate, streams[j])
        except Exception as exc:
            raise RuntimeError(f"local update failed for agent {j}") from exc
        if not np.all(np.isfinite(updated[j])):
            raise DivergenceError(f"agent {j}: model became non-finite in local update",
                                  index=j)

    # Phase 2: aggregation against a frozen snapshot of post-update models.
    snapshot = updated.copy()
    new_models = updated.copy()
    new_scores = scores.copy()
    selections, own_losses, dropped = {}, {}, {}
    for j in participants:
        selected = greedy_sample(scores, j, participants, hp.download_budget,
                                 eps, streams[j])
        downloads = {i: snapshot[i] for i in selected}
        try:
            result = local_aggregation(j, snapshot[j], downloads, tasks[j].loss, hp)
        except DivergenceError:
            raise
        except Exception as exc:
            raise RuntimeError(f"aggregation failed for agent {j}") from exc
        new_models[j] = result.new_model
        for i, delta in result.score_deltas.items():
            new_scores.add(j, i, delta)
        selections[j] = selected
        own_losses[j] = result.own_loss
        if result.dropped:
            dropped[j] = result.dropped

    log_entry = RoundLog(round_index=round_index, participants=participants,
                         eps=eps, selections=selections, own_losses=own_losses,
                         dropped=dropped)
    return new_models, new_scores, log_entry


def oracle_sr(hp, round_index, cluster_size, n_agents):
    """Expected selection ratio for an oracle whose exploitation picks are
    always same-cluster:  (1 - eps) + eps * (cluster_size - 1) / (n_agents - 1)."""
    if n_agents < 2:
        raise InvalidParameterError("need at least 2 agents")
    if not 1 <= cluster_size <= n_agents:
        raise InvalidParameterError("cluster_size must be in [1, n_agents]")
    eps = epsilon_for_round(hp, round_index)
    return (1.0 - eps) + eps * (cluster_size - 1) / (n_agents - 1)


def selection_ratio(selections, agent_cluster):
    """Mean over agents of the same-cluster fraction of their download set.

    Agents with empty selections are skipped; returns nan if every selection
    is empty.
    """
    ratios = []
    for j, picks in selections.items():
        if not picks:
            continue
        same = sum(1 for i in picks if agent_cluster[i] == agent_cluster[j])
        ratios.append(same / len(picks))
    return float(np.mean(ratios)) if ratios else float("nan")
