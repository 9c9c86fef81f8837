"""Run harness: builds problems from configs, executes protocols seed by
seed, and writes metric files plus a manifest.

File layout of a completed run directory:

    metrics_seed<S>.jsonl   one record per round (or per recorded SDE step)
    summary.csv             final-round metrics, mean and std across seeds
    manifest.json           resolved config, hashes, timing; written last

The manifest is written only after every metric file is complete, so a
directory without one is detectably incomplete.  Metric files contain no
timing information and are byte-identical across repeated runs of the same
config and seed.
"""

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as rng_mod
from .baselines import fedavg_round, ifca_round, local_only_round
from .diagnostics import write_csv
from .errors import ConfigError
from .learners import ShardTask, accuracy, generate_clustered_data, make_model
from .objectives import make_centers_problem, make_well_problem
from .protocol import (LikelihoodMatrix, ObjectiveTask, fedcbo_round,
                       oracle_sr, selection_ratio)
from .sde import cluster_variances, decay_exponent_fit, run_sde
from .diagnostics import meanfield_scan, theoretical_rate

log = logging.getLogger(__name__)


@dataclass
class ProblemSetup:
    """Everything a protocol loop needs, plus hidden labels for scoring."""

    tasks: list
    initial_models: np.ndarray
    agent_cluster: np.ndarray
    n_clusters: int
    model_arch: object = None      # learner problems only
    dataset: object = None         # learner problems only
    benchmark: object = None       # benchmark problems only

    @property
    def n_agents(self):
        return len(self.tasks)


def build_benchmark(problem_cfg):
    if problem_cfg["centers"] is not None:
        return make_centers_problem(problem_cfg["objective"], problem_cfg["dim"],
                                    [np.asarray(c, dtype=float) for c in problem_cfg["centers"]],
                                    scale=problem_cfg["scale"])
    return make_well_problem(problem_cfg["objective"], problem_cfg["dim"],
                             offset=problem_cfg["offset"], scale=problem_cfg["scale"])


def build_setup(config, seed):
    """Instantiate tasks and initial models for one seed."""
    problem = config.problem
    hp = config.hp()
    if problem["kind"] == "benchmark":
        bench = build_benchmark(problem)
        n_agents = problem["n_per_cluster"] * bench.n_clusters
        labels = np.arange(n_agents) % bench.n_clusters
        tasks = [ObjectiveTask(bench.objectives[int(k)], momentum=hp.momentum)
                 for k in labels]
        models = np.empty((n_agents, bench.dim))
        for j in range(n_agents):
            gen = rng_mod.stream(seed, rng_mod.INIT, j)
            models[j] = problem["init_mean"] + problem["init_std"] * gen.standard_normal(bench.dim)
        return ProblemSetup(tasks=tasks, initial_models=models, agent_cluster=labels,
                            n_clusters=bench.n_clusters, benchmark=bench)

    data_seed = problem["data_seed"] if problem["data_seed"] is not None else seed
    dataset = generate_clustered_data(
        problem["n_clusters"], problem["n_agents"], problem["n_per_agent"],
        problem["input_dim"], problem["n_classes"], data_seed,
        radius=problem["radius"], blob_std=problem["blob_std"],
        noise_std=problem["noise_std"], n_test=problem["n_test"],
    )
    arch = make_model(problem["model"], problem["input_dim"], problem["n_classes"],
                      hidden=problem["hidden"], activation=problem["activation"])
    tasks = [
        ShardTask(arch, x, y, batch_size=hp.batch_size, momentum=hp.momentum)
        for (x, y) in dataset.shards
    ]
    models = np.stack([
        arch.init_params(rng_mod.stream(seed, rng_mod.INIT, j),
                         scale=problem["init_scale"])
        for j in range(problem["n_agents"])
    ])
    return ProblemSetup(tasks=tasks, initial_models=models,
                        agent_cluster=dataset.agent_cluster,
                        n_clusters=dataset.n_clusters,
                        model_arch=arch, dataset=dataset)


def _init_server_models(config, setup, seed, n_models):
    problem = config.problem
    if setup.benchmark is not None:
        models = np.empty((n_models, setup.benchmark.dim))
        for m in range(n_models):
            gen = rng_mod.stream(seed, rng_mod.SERVER, m)
            models[m] = problem["init_mean"] + problem["init_std"] * gen.standard_normal(
                setup.benchmark.dim)
        return models
    return np.stack([
        setup.model_arch.init_params(rng_mod.stream(seed, rng_mod.SERVER, m),
                                     scale=problem["init_scale"])
        for m in range(n_models)
    ])


def _per_agent_accuracy(setup, models):
    """Mean test accuracy of cluster-k agents' own models on cluster-k data."""
    per_cluster = []
    for k in range(setup.n_clusters):
        x, y = setup.dataset.test_sets[k]
        members = np.flatnonzero(setup.agent_cluster == k)
        accs = [accuracy(setup.model_arch, models[j], x, y) for j in members]
        per_cluster.append(float(np.mean(accs)))
    return per_cluster


def _best_loss_accuracy(setup, candidates):
    """For each cluster distribution, accuracy of the candidate model with
    the smallest test loss (the evaluation rule for global-model baselines)."""
    per_cluster = []
    for k in range(setup.n_clusters):
        x, y = setup.dataset.test_sets[k]
        losses = [setup.model_arch.loss(m, x, y) for m in candidates]
        best = int(np.argmin(losses))
        per_cluster.append(accuracy(setup.model_arch, candidates[best], x, y))
    return per_cluster


def _base_record(round_index, n_participants):
    return {
        "round": int(round_index),
        "participants": int(n_participants),
        "eps": None,
        "sr": None,
        "oracle_sr": None,
        "assignment_purity": None,
        "mean_local_loss": None,
        "acc_per_cluster": None,
        "acc_macro": None,
        "v_per_cluster": None,
        "v_sum": None,
    }


def _attach_accuracy(record, per_cluster):
    record["acc_per_cluster"] = [float(a) for a in per_cluster]
    record["acc_macro"] = float(np.mean(per_cluster))


def _attach_variance(record, setup, models):
    v = cluster_variances(models, setup.agent_cluster, setup.benchmark.minimizers)
    record["v_per_cluster"] = [float(x) for x in v]
    record["v_sum"] = float(np.nansum(v))


def _mean_own_loss(setup, model_for_agent):
    return float(np.mean([
        setup.tasks[j].loss(model_for_agent(j)) for j in range(setup.n_agents)
    ]))


def run_protocol(config, seed, keep_logs=False):
    """Run one protocol for one seed; returns (records, final_state)."""
    setup = build_setup(config, seed)
    hp = config.hp()
    rounds = config.schedule["rounds"]
    participation = config.schedule["participation"]
    streams = rng_mod.agent_streams(seed, setup.n_agents)
    round_rng = rng_mod.stream(seed, rng_mod.ROUND)
    protocol = config.protocol
    records, logs = [], []

    def finish_record(record, models_per_agent, candidates=None):
        if setup.dataset is not None:
            if candidates is None:
                _attach_accuracy(record, _per_agent_accuracy(setup, models_per_agent))
            else:
                _attach_accuracy(record, _best_loss_accuracy(setup, candidates))
        if setup.benchmark is not None:
            _attach_variance(record, setup, models_per_agent)

    if protocol == "fedcbo":
        models = setup.initial_models.copy()
        scores = LikelihoodMatrix(setup.n_agents)
        cluster_size = setup.n_agents / setup.n_clusters
        for n in range(rounds):
            models, scores, entry = fedcbo_round(
                models, setup.tasks, scores, hp, n, streams,
                participation=participation, round_rng=round_rng,
            )
            record = _base_record(n, len(entry.participants))
            record["eps"] = float(entry.eps)
            record["sr"] = selection_ratio(entry.selections, setup.agent_cluster)
            record["oracle_sr"] = oracle_sr(hp, n, cluster_size, setup.n_agents)
            record["mean_local_loss"] = entry.mean_local_loss
            finish_record(record, models)
            records.append(record)
            if keep_logs:
                logs.append(entry)
        final = {"models": models, "scores": scores, "logs": logs, "setup": setup}

    elif protocol == "local":
        models = setup.initial_models.copy()
        for n in range(rounds):
            models = local_only_round(models, setup.tasks, hp, streams)
            record = _base_record(n, setup.n_agents)
            record["mean_local_loss"] = _mean_own_loss(setup, lambda j: models[j])
            finish_record(record, models)
            records.append(record)
        final = {"models": models, "setup": setup}

    elif protocol == "fedavg":
        global_model = _init_server_models(config, setup, seed, 1)[0]
        for n in range(rounds):
            global_model = fedavg_round(global_model, setup.tasks, hp, streams)
            record = _base_record(n, setup.n_agents)
            record["mean_local_loss"] = _mean_own_loss(setup, lambda j: global_model)
            tiled = np.tile(global_model, (setup.n_agents, 1))
            finish_record(record, tiled, candidates=[global_model])
            records.append(record)
        final = {"models": global_model, "setup": setup}

    elif protocol == "ifca":
        server = _init_server_models(config, setup, seed, setup.n_clusters)
        assignments = None
        for n in range(rounds):
            result = ifca_round(server, setup.tasks, hp, streams)
            server, assignments = result.models, result.assignments
            record = _base_record(n, setup.n_agents)
            record["mean_local_loss"] = result.mean_loss
            record["assignment_purity"] = _assignment_purity(assignments,
                                                            setup.agent_cluster)
            assigned = np.stack([server[m] for m in assignments])
            finish_record(record, assigned, candidates=list(server))
            records.append(record)
        final = {"models": server, "assignments": assignments, "setup": setup}

    else:
        raise ConfigError([f"protocol: unknown protocol {protocol!r}"])

    return records, final


def _assignment_purity(assignments, agent_cluster):
    """Fraction of agents whose chosen model is their cluster's majority pick."""
    purity = []
    for k in np.unique(agent_cluster):
        members = assignments[agent_cluster == k]
        counts = np.bincount(members)
        purity.append(counts.max() / len(members))
    return float(np.mean(purity))


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _summary_rows(per_seed_finals):
    """Mean/std across seeds for every scalar metric in the final records."""
    rows = {}
    for record in per_seed_finals:
        if record is None:
            continue
        flat = {}
        for key, value in record.items():
            if key in ("round", "participants"):
                continue
            if isinstance(value, list):
                for k, v in enumerate(value):
                    flat[f"{key.replace('_per_cluster', '')}_c{k}"] = v
            elif isinstance(value, (int, float)) and value is not None:
                flat[key] = value
        for key, value in flat.items():
            rows.setdefault(key, []).append(float(value))
    out = []
    for key in sorted(rows):
        vals = np.array(rows[key])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append([key, f"{vals.mean():.10g}", f"{std:.10g}"])
    return out


class _OutputTracker:
    """Removes partial outputs if a run aborts before the manifest."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.created = []

    def path(self, name):
        p = self.out_dir / name
        self.created.append(p)
        return p

    def cleanup(self):
        for p in self.created:
            try:
                p.unlink(missing_ok=True)
            except OSError:
                pass


def _finalize(tracker, manifest):
    manifest_path = tracker.out_dir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest_path


def run_experiment(config, out_dir=None, keep_logs=False):
    """Execute the configured protocol for every seed and persist results.

    Returns the manifest dict.  On failure all partial outputs are removed
    and the exception propagates.
    """
    out_dir = Path(out_dir or config.output["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    tracker = _OutputTracker(out_dir)
    started = time.time()
    wall_times = {}
    finals = []
    all_logs = {}
    try:
        for seed in config.seeds:
            t0 = time.time()
            records, final = run_protocol(config, seed, keep_logs=keep_logs)
            wall_times[str(seed)] = round(time.time() - t0, 3)
            _write_jsonl(tracker.path(f"metrics_seed{seed}.jsonl"), records)
            finals.append(records[-1] if records else None)
            if keep_logs:
                all_logs[seed] = final
        write_csv(tracker.path("summary.csv"), ["metric", "mean", "std"],
                  _summary_rows(finals))
    except Exception:
        tracker.cleanup()
        raise

    manifest = {
        "kind": "run",
        "config": config.resolved(),
        "config_hash": config.hash(),
        "code_version": __version__,
        "protocol": config.protocol,
        "seeds": config.seeds,
        "metrics_files": [f"metrics_seed{s}.jsonl" for s in config.seeds],
        "summary_file": "summary.csv",
        "started_at": started,
        "finished_at": time.time(),
        "wall_time_s": wall_times,
    }
    _finalize(tracker, manifest)
    if keep_logs:
        manifest["_logs"] = all_logs
    return manifest


def is_complete(run_dir):
    """A run directory is complete iff its manifest exists and every file
    the manifest lists is present."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        return False
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return False
    names = list(manifest.get("metrics_files", []))
    if manifest.get("summary_file"):
        names.append(manifest["summary_file"])
    return all((run_dir / name).exists() for name in names)


def compare_protocols(config, protocols=None, out_dir=None):
    """Run several protocols on identical problems, seeds, and budgets.

    Every protocol reuses the same config (hence the same per-seed dataset,
    round count, and local-step budget), which is what makes the comparison
    equal-compute.  Writes comparison.csv and a manifest; returns a dict
    with the accuracy table and ordering flags.
    """
    protocols = list(protocols or ("fedcbo", "ifca", "fedavg", "local"))
    unknown = [p for p in protocols if p not in ("fedcbo", "ifca", "fedavg", "local")]
    if unknown:
        raise ConfigError([f"protocol: unknown protocol {p!r}" for p in unknown])
    if config.problem["kind"] != "learner":
        raise ConfigError(["problem.kind: protocol comparison needs a learner problem"])

    out_dir = Path(out_dir or config.output["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    tracker = _OutputTracker(out_dir)
    started = time.time()

    table = {}
    try:
        for protocol in protocols:
            cfg = ExperimentConfigView(config, protocol)
            macro, per_cluster = [], []
            for seed in config.seeds:
                records, _ = run_protocol(cfg, seed)
                if not records:
                    raise ConfigError(["schedule.rounds: comparison needs rounds >= 1"])
                last = records[-1]
                macro.append(last["acc_macro"])
                per_cluster.append(last["acc_per_cluster"])
            macro = np.array(macro)
            per_cluster = np.array(per_cluster)
            table[protocol] = {
                "acc_macro_mean": float(macro.mean()),
                "acc_macro_std": float(macro.std(ddof=1)) if len(macro) > 1 else 0.0,
                "acc_per_cluster_mean": [float(x) for x in per_cluster.mean(axis=0)],
            }

        flags = {}
        if "fedcbo" in table and "ifca" in table:
            flags["fedcbo_within_1pt_of_ifca"] = bool(
                table["fedcbo"]["acc_macro_mean"]
                >= table["ifca"]["acc_macro_mean"] - 0.01
            )
        if {"fedcbo", "ifca", "fedavg", "local"} <= set(table):
            clustered = min(table["fedcbo"]["acc_macro_mean"],
                            table["ifca"]["acc_macro_mean"])
            unclustered = max(table["fedavg"]["acc_macro_mean"],
                              table["local"]["acc_macro_mean"])
            flags["clustered_beat_unclustered_by_3pts"] = bool(
                clustered >= unclustered + 0.03
            )

        n_clusters = config.problem["n_clusters"]
        header = ["protocol", "acc_macro_mean", "acc_macro_std"] + [
            f"acc_c{k}_mean" for k in range(n_clusters)
        ]
        rows = []
        for protocol in protocols:
            entry = table[protocol]
            rows.append([protocol, f"{entry['acc_macro_mean']:.10g}",
                         f"{entry['acc_macro_std']:.10g}"] +
                        [f"{x:.10g}" for x in entry["acc_per_cluster_mean"]])
        write_csv(tracker.path("comparison.csv"), header, rows)
    except Exception:
        tracker.cleanup()
        raise

    manifest = {
        "kind": "compare",
        "config": config.resolved(),
        "config_hash": config.hash(),
        "code_version": __version__,
        "protocols": protocols,
        "seeds": config.seeds,
        "table": table,
        "flags": flags,
        "metrics_files": [],
        "summary_file": "comparison.csv",
        "started_at": started,
        "finished_at": time.time(),
    }
    _finalize(tracker, manifest)
    return {"table": table, "flags": flags, "out_dir": str(out_dir)}


class ExperimentConfigView:
    """A config with the protocol swapped out; everything else shared."""

    def __init__(self, base, protocol):
        self.problem = base.problem
        self.hyperparams = base.hyperparams
        self.schedule = base.schedule
        self.output = base.output
        self.seeds = base.seeds
        self.protocol = protocol

    def resolved(self):
        out = {
            "problem": self.problem,
            "hyperparams": self.hyperparams,
            "schedule": self.schedule,
            "output": self.output,
            "protocol": self.protocol,
            "seeds": self.seeds,
        }
        return out

    def hp(self):
        from .sde import HyperParams
        return HyperParams(**self.hyperparams)

    def init_spec(self):
        from .sde import InitSpec
        return InitSpec(std=self.problem["init_std"], mean=self.problem["init_mean"])


def run_sde_experiment(config, out_dir=None, seeds=None):
    """Integrate the benchmark particle system for each seed.

    Writes a trajectory JSONL per seed plus sde_summary.csv with the fitted
    decay rate (over the window until V falls to 1e-3 of its start) and the
    guaranteed rate for comparison.
    """
    if config.problem["kind"] != "benchmark":
        raise ConfigError(["problem.kind: the sde command needs a benchmark problem"])
    seeds = list(seeds or config.seeds)
    out_dir = Path(out_dir or config.output["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    tracker = _OutputTracker(out_dir)
    started = time.time()
    bench = build_benchmark(config.problem)
    hp = config.hp()
    t_steps = config.schedule["t_steps"]
    rate_bound = theoretical_rate(hp, bench.max_grad_lipschitz, bench.dim)

    rows = []
    try:
        for seed in seeds:
            result = run_sde(bench, config.problem["n_per_cluster"], hp, t_steps,
                             init=config.init_spec(), seed=seed,
                             record_every=config.schedule["record_every"],
                             jsonl_path=tracker.path(f"trajectory_seed{seed}.jsonl"))
            vsum = result.variance_sums
            below = np.flatnonzero(vsum <= 1e-3 * vsum[0])
            stop = int(below[0]) + 1 if below.size else len(vsum)
            fitted = decay_exponent_fit(vsum[:stop], result.times[:stop]) \
                if stop >= 2 else float("nan")
            rows.append([seed, f"{vsum[0]:.10g}", f"{vsum[-1]:.10g}",
                         f"{fitted:.10g}", f"{rate_bound:.10g}",
                         str(bool(result.theory_regime)).lower()])
        write_csv(tracker.path("sde_summary.csv"),
                  ["seed", "v_start", "v_end", "fitted_rate", "rate_bound",
                   "theory_regime"], rows)
    except Exception:
        tracker.cleanup()
        raise

    manifest = {
        "kind": "sde",
        "config": config.resolved(),
        "config_hash": config.hash(),
        "code_version": __version__,
        "seeds": seeds,
        "metrics_files": [f"trajectory_seed{s}.jsonl" for s in seeds],
        "summary_file": "sde_summary.csv",
        "started_at": started,
        "finished_at": time.time(),
    }
    _finalize(tracker, manifest)
    return manifest


def scan_meanfield_experiment(config, out_dir=None):
    """Finite-size scan toward the largest population in schedule.n_list."""
    if config.problem["kind"] != "benchmark":
        raise ConfigError(["problem.kind: scan-meanfield needs a benchmark problem"])
    out_dir = Path(out_dir or config.output["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    tracker = _OutputTracker(out_dir)
    started = time.time()
    bench = build_benchmark(config.problem)
    scan = meanfield_scan(
        bench, config.hp(), config.schedule["n_list"], config.seeds,
        config.schedule["t_steps"], init=config.init_spec(),
        n_projections=config.schedule["n_projections"],
        n_checkpoints=config.schedule["n_checkpoints"],
    )
    try:
        stderr = scan.stderr()
        rows = [
            [n, f"{scan.mean_discrepancy[i]:.10g}", f"{stderr[i]:.10g}"]
            for i, n in enumerate(scan.sizes)
        ]
        write_csv(tracker.path("meanfield.csv"),
                  ["n_per_cluster", "mean_discrepancy", "stderr"], rows)
    except Exception:
        tracker.cleanup()
        raise
    manifest = {
        "kind": "scan-meanfield",
        "config": config.resolved(),
        "config_hash": config.hash(),
        "code_version": __version__,
        "seeds": config.seeds,
        "reference_size": scan.reference_size,
        "monotone_violations": scan.monotone_violations(),
        "metrics_files": [],
        "summary_file": "meanfield.csv",
        "started_at": started,
        "finished_at": time.time(),
    }
    _finalize(tracker, manifest)
    return manifest


def export_plot_data(run_dir, out_path=None):
    """Flatten a run directory's JSONL metrics into one long-format CSV
    with columns (seed, index, metric, value)."""
    run_dir = Path(run_dir)
    if not is_complete(run_dir):
        raise ConfigError([f"output.dir: {run_dir} is not a completed run directory"])
    out_path = Path(out_path or (run_dir / "plot_data.csv"))
    rows = []
    for path in sorted(run_dir.glob("*seed*.jsonl")):
        name = path.stem
        seed = name.split("seed")[-1]
        with open(path) as fh:
            for line in fh:
                record = json.loads(line)
                index = record.get("round", record.get("step", 0))
                for key, value in sorted(record.items()):
                    if key in ("round", "step"):
                        continue
                    if isinstance(value, list):
                        for k, v in enumerate(value):
                            rows.append([seed, index,
                                         f"{key.replace('_per_cluster', '')}_c{k}",
                                         f"{float(v):.10g}"])
                    elif isinstance(value, (int, float)) and not isinstance(value, bool):
                        rows.append([seed, index, key, f"{float(value):.10g}"])
    seen = set()
    unique_rows = []
    for row in rows:
        key = tuple(row[:3])
        if key in seen:
            continue
        seen.add(key)
        unique_rows.append(row)
    unique_rows.sort(key=lambda r: (r[0], int(r[1]), r[2]))
    write_csv(out_path, ["seed", "index", "metric", "value"], unique_rows)
    return out_path
