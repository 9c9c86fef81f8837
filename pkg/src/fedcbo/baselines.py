"""Reference protocols run under the same compute budget as the main one.

All three use the same local-training rule (tasks[j].train, local_steps
steps at rate grad_drift * step_size), so a comparison at equal rounds is a
comparison at equal gradient work.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, InvalidParameterError


def _check_finite(models, who):
    if not np.all(np.isfinite(models)):
        raise DivergenceError(f"{who}: model became non-finite")


def fedavg_round(global_model, tasks, hp, streams):
    """Every agent trains from the shared global model; uniform average."""
    rate = hp.grad_drift * hp.step_size
    locals_ = np.stack([
        tasks[j].train(global_model, hp.local_steps, rate, streams[j])
        for j in range(len(tasks))
    ])
    new_global = locals_.mean(axis=0)
    _check_finite(new_global, "fedavg")
    return new_global


@dataclass
class IfcaRound:
    models: np.ndarray       # (n_models, dim)
    assignments: np.ndarray  # (n_agents,) chosen model per agent
    mean_loss: float


def ifca_round(server_models, tasks, hp, streams):
    """Cluster-model alternation: assign by lowest loss, train, re-average.

    Ties go to the lower model id.  A model nobody adopted persists
    unchanged.  With a single server model this reduces exactly to fedavg.
    """
    server_models = np.asarray(server_models, dtype=float)
    if server_models.ndim != 2 or server_models.shape[0] < 1:
        raise InvalidParameterError("server_models must be (n_models, dim)")
    n_models = server_models.shape[0]
    rate = hp.grad_drift * hp.step_size

    assignments = np.empty(len(tasks), dtype=int)
    losses = np.empty(len(tasks))
    updates = []
    for j, task in enumerate(tasks):
        model_losses = [task.loss(server_models[m]) for m in range(n_models)]
        pick = int(np.argmin(model_losses))  # argmin takes the first = lowest id
        assignments[j] = pick
        losses[j] = model_losses[pick]
        updates.append(task.train(server_models[pick], hp.local_steps, rate, streams[j]))

    new_models = server_models.copy()
    for m in range(n_models):
        adopters = [updates[j] for j in range(len(tasks)) if assignments[j] == m]
        if adopters:
            new_models[m] = np.mean(adopters, axis=0)
    _check_finite(new_models, "ifca")
    return IfcaRound(models=new_models, assignments=assignments,
                     mean_loss=float(losses.mean()))


def local_only_round(models, tasks, hp, streams):
    """Every agent trains alone; no communication at all."""
    rate = hp.grad_drift * hp.step_size
    new_models = np.stack([
        tasks[j].train(models[j], hp.local_steps, rate, streams[j])
        for j in range(len(tasks))
    ])
    _check_finite(new_models, "local")
    return new_models
