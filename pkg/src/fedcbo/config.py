"""Experiment configuration: JSON in, fully-resolved dict out.

A config file has sections [problem], [hyperparams], [schedule], [output]
plus top-level "protocol" and "seeds".  Every omitted field is filled from
the defaults below and the resolved config is echoed into the run manifest,
so a manifest always shows the exact values that ran.  Validation collects
every violation instead of stopping at the first.
"""

import copy
import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigError
from .sde import HyperParams, InitSpec

PROTOCOLS = ("fedcbo", "fedavg", "ifca", "local")

DEFAULT_HYPERPARAMS = {
    "consensus_drift": 10.0,
    "grad_drift": 1.0,
    "consensus_noise": 0.0,
    "grad_noise": 0.0,
    "alpha": 10.0,
    "step_size": 0.1,
    "local_steps": 5,
    "download_budget": 10,
    "eps_start": 0.5,
    "eps_decay": 0.01,
    "eps_floor": 0.1,
    "momentum": 0.9,
    "batch_size": None,
    "include_self": True,
}

DEFAULT_LEARNER_PROBLEM = {
    "kind": "learner",
    "model": "mlp",
    "hidden": 16,
    "activation": "tanh",
    "n_clusters": 4,
    "n_agents": 40,
    "n_per_agent": 100,
    "input_dim": 16,
    "n_classes": 4,
    "radius": 2.0,
    "blob_std": 1.35,
    "noise_std": 1.0,
    "n_test": 400,
    "data_seed": None,
    "init_scale": None,
}

DEFAULT_BENCHMARK_PROBLEM = {
    "kind": "benchmark",
    "objective": "quadratic",
    "dim": 2,
    "offset": 2.0,
    "centers": None,
    "scale": 1.0,
    "n_per_cluster": 200,
    "init_std": 3.0,
    "init_mean": 0.0,
}

DEFAULT_SCHEDULE = {
    "rounds": 30,
    "t_steps": 200,
    "participation": 1.0,
    "record_every": 1,
    "n_list": [50, 100, 200, 400, 800],
    "n_projections": 64,
    "n_checkpoints": 20,
}

DEFAULT_OUTPUT = {"dir": "runs/out"}


def canonical_json(obj):
    """Stable serialization used for hashing and manifests."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(resolved):
    return hashlib.sha256(canonical_json(resolved).encode()).hexdigest()


@dataclass
class ExperimentConfig:
    """A validated, fully-resolved experiment description."""

    problem: dict
    hyperparams: dict
    schedule: dict
    output: dict
    protocol: str
    seeds: list

    def resolved(self):
        return {
            "problem": self.problem,
            "hyperparams": self.hyperparams,
            "schedule": self.schedule,
            "output": self.output,
            "protocol": self.protocol,
            "seeds": self.seeds,
        }

    def hash(self):
        return config_hash(self.resolved())

    def hp(self):
        return HyperParams(**self.hyperparams)

    def init_spec(self):
        return InitSpec(std=self.problem["init_std"], mean=self.problem["init_mean"])


def _merge_section(name, defaults, given, problems):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            problems.append(f"{name}.{key}: unknown field")
            continue
        out[key] = value
    return out


def _require_number(section, key, value, problems, minimum=None, strict=False,
                    integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        problems.append(f"{section}.{key}: expected a number, got {value!r}")
        return
    if integer and int(value) != value:
        problems.append(f"{section}.{key}: expected an integer, got {value!r}")
        return
    if minimum is not None:
        if strict and value <= minimum:
            problems.append(f"{section}.{key}: must be > {minimum}, got {value}")
        elif not strict and value < minimum:
            problems.append(f"{section}.{key}: must be >= {minimum}, got {value}")


def load_config(path):
    """Read and validate a JSON config file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"])
    return resolve_config(raw)


def resolve_config(raw):
    """Merge a raw config dict over the defaults and validate everything."""
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a JSON object"])

    known_top = {"problem", "hyperparams", "schedule", "output", "protocol", "seeds"}
    for key in raw:
        if key not in known_top:
            problems.append(f"{key}: unknown top-level section")

    raw_problem = raw.get("problem", {})
    if not isinstance(raw_problem, dict):
        problems.append("problem: expected an object")
        raw_problem = {}
    kind = raw_problem.get("kind", "learner")
    if kind not in ("learner", "benchmark"):
        problems.append(f"problem.kind: must be 'learner' or 'benchmark', got {kind!r}")
        kind = "learner"
    base = DEFAULT_LEARNER_PROBLEM if kind == "learner" else DEFAULT_BENCHMARK_PROBLEM
    problem = _merge_section("problem", base, raw_problem, problems)
    problem["kind"] = kind

    hyperparams = _merge_section(
        "hyperparams", DEFAULT_HYPERPARAMS, raw.get("hyperparams", {}) or {}, problems
    )
    schedule = _merge_section(
        "schedule", DEFAULT_SCHEDULE, raw.get("schedule", {}) or {}, problems
    )
    output = _merge_section("output", DEFAULT_OUTPUT, raw.get("output", {}) or {}, problems)

    protocol = raw.get("protocol", "fedcbo")
    if protocol not in PROTOCOLS:
        problems.append(f"protocol: must be one of {PROTOCOLS}, got {protocol!r}")

    seeds = raw.get("seeds", [0, 1, 2])
    if not isinstance(seeds, list) or not seeds:
        problems.append("seeds: expected a nonempty list of integers")
        seeds = [0]
    else:
        for s in seeds:
            if isinstance(s, bool) or not isinstance(s, int):
                problems.append(f"seeds: expected integers, got {s!r}")

    _validate_problem(problem, problems)
    _validate_hyperparams(hyperparams, problems)
    _validate_schedule(schedule, problems)
    if not isinstance(output.get("dir"), str) or not output["dir"]:
        problems.append("output.dir: expected a nonempty string")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(problem=problem, hyperparams=hyperparams,
                            schedule=schedule, output=output,
                            protocol=protocol, seeds=[int(s) for s in seeds])


def _validate_problem(problem, problems):
    if problem["kind"] == "learner":
        if problem["model"] not in ("mlp", "logistic"):
            problems.append(f"problem.model: must be 'mlp' or 'logistic', got {problem['model']!r}")
        for key in ("hidden", "n_clusters", "n_agents", "n_per_agent", "n_classes", "n_test"):
            _require_number("problem", key, problem[key], problems, minimum=1, integer=True)
        _require_number("problem", "input_dim", problem["input_dim"], problems,
                        minimum=2, integer=True)
        for key in ("radius", "blob_std"):
            _require_number("problem", key, problem[key], problems, minimum=0, strict=True)
        _require_number("problem", "noise_std", problem["noise_std"], problems, minimum=0)
        if isinstance(problem["n_agents"], int) and isinstance(problem["n_clusters"], int):
            if problem["n_clusters"] >= 1 and problem["n_agents"] % problem["n_clusters"]:
                problems.append("problem.n_agents: must be divisible by n_clusters")
    else:
        if problem["objective"] not in ("quadratic", "rastrigin"):
            problems.append(
                f"problem.objective: must be 'quadratic' or 'rastrigin', got {problem['objective']!r}"
            )
        _require_number("problem", "dim", problem["dim"], problems, minimum=1, integer=True)
        _require_number("problem", "n_per_cluster", problem["n_per_cluster"], problems,
                        minimum=1, integer=True)
        _require_number("problem", "scale", problem["scale"], problems, minimum=0, strict=True)
        _require_number("problem", "init_std", problem["init_std"], problems,
                        minimum=0, strict=True)
        if problem["centers"] is not None and not isinstance(problem["centers"], list):
            problems.append("problem.centers: expected a list of points or null")


def _validate_hyperparams(hp, problems):
    for key in ("consensus_drift", "grad_drift", "consensus_noise", "grad_noise"):
        _require_number("hyperparams", key, hp[key], problems, minimum=0)
    _require_number("hyperparams", "alpha", hp["alpha"], problems, minimum=0, strict=True)
    _require_number("hyperparams", "step_size", hp["step_size"], problems,
                    minimum=0, strict=True)
    for key in ("local_steps", "download_budget"):
        _require_number("hyperparams", key, hp[key], problems, minimum=0, integer=True)
    for key in ("eps_start", "eps_decay", "eps_floor"):
        _require_number("hyperparams", key, hp[key], problems, minimum=0)
    _require_number("hyperparams", "momentum", hp["momentum"], problems, minimum=0)
    if isinstance(hp["momentum"], (int, float)) and not isinstance(hp["momentum"], bool):
        if hp["momentum"] >= 1.0:
            problems.append("hyperparams.momentum: must be < 1")
    if hp["batch_size"] is not None:
        _require_number("hyperparams", "batch_size", hp["batch_size"], problems,
                        minimum=1, integer=True)


def _validate_schedule(schedule, problems):
    _require_number("schedule", "rounds", schedule["rounds"], problems,
                    minimum=0, integer=True)
    _require_number("schedule", "t_steps", schedule["t_steps"], problems,
                    minimum=1, integer=True)
    _require_number("schedule", "participation", schedule["participation"], problems,
                    minimum=0, strict=True)
    p = schedule["participation"]
    if isinstance(p, (int, float)) and not isinstance(p, bool) and p > 1:
        problems.append("schedule.participation: must be <= 1")
    _require_number("schedule", "record_every", schedule["record_every"], problems,
                    minimum=1, integer=True)
    if not isinstance(schedule["n_list"], list) or not schedule["n_list"]:
        problems.append("schedule.n_list: expected a nonempty list")
    else:
        for n in schedule["n_list"]:
            _require_number("schedule", "n_list", n, problems, minimum=1, integer=True)
    for key in ("n_projections", "n_checkpoints"):
        _require_number("schedule", key, schedule[key], problems, minimum=1, integer=True)
