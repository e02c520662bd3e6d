"""Seeded experiment orchestration: training runs, sweeps, metric persistence.

A plan names an algorithm set, an optional sweep axis, seeds and a desk- or
full-scale configuration. Running it produces one metrics CSV (training rows
per iteration plus one evaluation row per run), a manifest with config
hashes, and checkpoints for the learned algorithms. Outputs are
byte-reproducible for identical plans and seeds.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import __version__
from .baselines import ALGORITHMS, algorithm
from .config import DESK_FAMILIES, DESK_SERVICES_PER_MODEL, ConfigError, SystemConfig, desk_config
from .marl.trainer import TrainConfig, Trainer, desk_train_config, trainer_from_checkpoint
from .profiles import ModelProfile, save_catalog, synth_catalog

SWEEP_AXES = (
    "users",
    "servers",
    "services-per-model",
    "tau-bar",
    "user-compute",
    "server-compute",
    "server-storage",
    "weight-ratio",
)

METRIC_COLUMNS = [
    "run_id",
    "algorithm",
    "axis",
    "axis_value",
    "seed",
    "iteration",
    "is_eval",
    "mean_delay",
    "mean_energy",
    "mean_privacy",
    "cost_weighted",
    "cost_with_violations",
    "hit_rate",
    "deadline_rate",
    "lambda",
    "mean_user_reward",
    "status",
    "per_user_costs",
]


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    algorithm: str
    axis: str
    axis_value: str
    seed: int
    iteration: int
    is_eval: bool
    mean_delay: float
    mean_energy: float
    mean_privacy: float
    cost_weighted: float
    cost_with_violations: float
    hit_rate: float
    deadline_rate: float
    lam: float
    mean_user_reward: float
    status: str = "ok"
    per_user_costs: tuple[float, ...] = ()

    def validate(self) -> None:
        if self.mean_delay < 0:
            raise ValueError("mean delay must be non-negative")
        if not 0.0 <= self.hit_rate <= 1.0 or not 0.0 <= self.deadline_rate <= 1.0:
            raise ValueError("success rates must lie in [0, 1]")

    def as_csv(self) -> list[str]:
        return [
            self.run_id,
            self.algorithm,
            self.axis,
            self.axis_value,
            str(self.seed),
            str(self.iteration),
            str(int(self.is_eval)),
            repr(self.mean_delay),
            repr(self.mean_energy),
            repr(self.mean_privacy),
            repr(self.cost_weighted),
            repr(self.cost_with_violations),
            repr(self.hit_rate),
            repr(self.deadline_rate),
            repr(self.lam),
            repr(self.mean_user_reward),
            self.status,
            ";".join(repr(c) for c in self.per_user_costs),
        ]


@dataclass(frozen=True)
class ExperimentPlan:
    name: str
    config: SystemConfig
    train: TrainConfig
    algorithms: tuple[str, ...] = ("hc-mappo-l",)
    sweep_axis: str | None = None
    axis_values: tuple = ()
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_episodes: int = 5
    catalog_families: tuple[str, ...] = DESK_FAMILIES
    services_per_model: int = DESK_SERVICES_PER_MODEL
    catalog_seed: int = 7

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("plan needs at least one seed")
        if self.sweep_axis is not None:
            if self.sweep_axis not in SWEEP_AXES:
                raise ConfigError(f"unknown sweep axis {self.sweep_axis!r}")
            if not self.axis_values:
                raise ConfigError("sweep plans need axis values")
        for name in self.algorithms:
            if name not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {name!r}")
        self.config.validate()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config": self.config.to_dict(),
            "train": self.train.to_dict(),
            "algorithms": list(self.algorithms),
            "sweep_axis": self.sweep_axis,
            "axis_values": list(self.axis_values),
            "seeds": list(self.seeds),
            "eval_episodes": self.eval_episodes,
            "catalog_families": list(self.catalog_families),
            "services_per_model": self.services_per_model,
            "catalog_seed": self.catalog_seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        try:
            plan = cls(
                name=data["name"],
                config=SystemConfig.from_dict(data["config"]),
                train=TrainConfig.from_dict(data["train"]),
                algorithms=tuple(data.get("algorithms", ["hc-mappo-l"])),
                sweep_axis=data.get("sweep_axis"),
                axis_values=tuple(
                    tuple(v) if isinstance(v, list) else v for v in data.get("axis_values", [])
                ),
                seeds=tuple(data.get("seeds", [0, 1, 2])),
                eval_episodes=int(data.get("eval_episodes", 5)),
                catalog_families=tuple(data.get("catalog_families", DESK_FAMILIES)),
                services_per_model=int(data.get("services_per_model", DESK_SERVICES_PER_MODEL)),
                catalog_seed=int(data.get("catalog_seed", 7)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed plan: {exc}") from exc
        plan.validate()
        return plan

    @classmethod
    def from_json_file(cls, path: str) -> "ExperimentPlan":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse plan {path}: {exc}") from exc
        return cls.from_dict(data)


def apply_axis(
    plan: ExperimentPlan, value
) -> tuple[SystemConfig, tuple[str, ...], int]:
    """Specialize the plan's base config for one sweep-axis value.

    Returns the adjusted config plus the catalog recipe (families, services
    per model) for axes that resize the service pool.
    """
    config = plan.config
    families, spm = plan.catalog_families, plan.services_per_model
    axis = plan.sweep_axis
    if axis is None or value is None:
        return config, families, spm
    if axis == "users":
        config = config.replace(num_users=int(value))
    elif axis == "servers":
        config = config.replace(num_servers=int(value))
    elif axis == "services-per-model":
        spm = int(value)
        config = config.replace(num_models=len(families) * spm)
    elif axis == "tau-bar":
        weights = dataclasses.replace(
            config.weights, tau_bar=float(value), tau_fail=5.0 * float(value)
        )
        config = config.replace(weights=weights)
    elif axis == "user-compute":
        config = config.replace(user_flops_range=(float(value[0]), float(value[1])))
    elif axis == "server-compute":
        config = config.replace(server_flops_range=(float(value[0]), float(value[1])))
    elif axis == "server-storage":
        config = config.replace(server_storage_range_bytes=(int(value[0]), int(value[1])))
    elif axis == "weight-ratio":
        weights = dataclasses.replace(config.weights, mu2=config.weights.mu1 * float(value))
        config = config.replace(weights=weights)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    config.validate()
    return config, families, spm


def _axis_label(value) -> str:
    if value is None:
        return "base"
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    return str(value)


def run(plan: ExperimentPlan, outdir: str) -> str:
    """Execute every (algorithm, axis value, seed) cell of the plan.

    Writes ``metrics.csv``, ``manifest.json``, the generated catalog, and one
    checkpoint per trained run under ``outdir/<plan name>/``. Failed runs are
    recorded with an error status row instead of being dropped.
    """
    plan.validate()
    run_dir = os.path.join(outdir, plan.name)
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    rows: list[MetricsRow] = []
    manifest_runs = []

    axis_values = plan.axis_values if plan.sweep_axis is not None else (None,)
    for value in axis_values:
        config, families, spm = apply_axis(plan, value)
        catalog = synth_catalog(families, spm, plan.catalog_seed)
        if len(catalog) != config.num_models:
            raise ConfigError(
                f"catalog size {len(catalog)} does not match config.num_models {config.num_models}"
            )
        label = _axis_label(value)
        for name in plan.algorithms:
            for seed in plan.seeds:
                run_id = f"{name}-{label}-s{seed}"
                status = "ok"
                try:
                    new_rows, ckpt = _run_single(
                        plan, config, catalog, name, seed, label, run_id, run_dir
                    )
                    rows.extend(new_rows)
                except Exception as exc:  # record, keep sweeping
                    status = f"error:{type(exc).__name__}"
                    ckpt = None
                    rows.append(_status_row(run_id, name, plan, label, seed, status))
                manifest_runs.append(
                    {
                        "run_id": run_id,
                        "algorithm": name,
                        "axis_value": label,
                        "seed": seed,
                        "status": status,
                        "checkpoint": ckpt,
                        "config_hash": _config_hash(config),
                    }
                )
        save_catalog(os.path.join(run_dir, f"catalog_{label}.json"), catalog)

    _write_metrics(os.path.join(run_dir, "metrics.csv"), rows)
    manifest = {
        "plan": plan.to_dict(),
        "version": __version__,
        "plan_hash": _dict_hash(plan.to_dict()),
        "runs": manifest_runs,
    }
    with open(os.path.join(run_dir, "manifest.json"), "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return run_dir


def _run_single(plan, config, catalog, name, seed, label, run_id, run_dir):
    spec = algorithm(name)
    trainer = Trainer(config, catalog, spec, plan.train, run_seed=seed)
    rows = []
    axis = plan.sweep_axis or ""
    if spec.trains:
        for metrics in iter_training(trainer):
            rows.append(
                MetricsRow(
                    run_id, name, axis, label, seed, metrics["iteration"], False,
                    metrics["mean_delay"], metrics["mean_energy"], metrics["mean_privacy"],
                    metrics["cost_weighted"], metrics["cost_with_violations"],
                    metrics["hit_rate"], metrics["deadline_rate"], metrics["lambda"],
                    metrics["mean_user_reward"],
                )
            )
    final = trainer.evaluate(plan.eval_episodes, seed=seed)
    eval_row = MetricsRow(
        run_id, name, axis, label, seed, trainer.iteration, True,
        final["mean_delay"], final["mean_energy"], final["mean_privacy"],
        final["cost_weighted"], final["cost_with_violations"],
        final["hit_rate"], final["deadline_rate"], final["lambda"],
        final["mean_user_reward"], per_user_costs=tuple(final["per_user_costs"]),
    )
    eval_row.validate()
    rows.append(eval_row)
    ckpt = None
    if spec.trains:
        ckpt = os.path.join("checkpoints", f"{run_id}.npz")
        trainer.save_checkpoint(os.path.join(run_dir, ckpt))
    return rows, ckpt


def iter_training(trainer: Trainer):
    for _ in range(trainer.train_config.iterations):
        yield trainer.train_iteration()


def _status_row(run_id, name, plan, label, seed, status) -> MetricsRow:
    return MetricsRow(
        run_id, name, plan.sweep_axis or "", label, seed, 0, True,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, status=status,
    )


def evaluate_checkpoint(
    checkpoint: str, catalog: list[ModelProfile], episodes: int, seed: int = 0
) -> dict:
    """Greedy-mode evaluation of a stored checkpoint against its own config."""
    trainer = trainer_from_checkpoint(checkpoint, catalog)
    return trainer.evaluate(episodes, seed=seed)


def export_cost_heatmap(costs_by_algo: dict[str, list[float]], path: str) -> None:
    """Octile ranks (1 = cheapest band) of per-user costs, one row per cell.

    Ties share the lowest applicable band, so uniform costs all rank 1.
    """
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["algorithm", "user", "cost", "rank"])
        for name in sorted(costs_by_algo):
            costs = np.asarray(costs_by_algo[name], dtype=np.float64)
            n = costs.size
            below = (costs[None, :] < costs[:, None]).sum(axis=1)  # strictly-cheaper counts
            ranks = 1 + (8 * below) // n
            ranks = np.minimum(ranks, 8)
            for user in range(n):
                writer.writerow([name, user, repr(float(costs[user])), int(ranks[user])])


def heatmap_from_metrics(metrics_csv: str, out_path: str) -> None:
    """Build the rank table from the eval rows of a metrics file."""
    costs_by_algo: dict[str, list[float]] = {}
    with open(metrics_csv, "r", encoding="utf-8", newline="") as handle:
        for row in csv.DictReader(handle):
            if row["is_eval"] == "1" and row["per_user_costs"] and row["status"] == "ok":
                costs = [float(c) for c in row["per_user_costs"].split(";")]
                costs_by_algo.setdefault(row["algorithm"], costs)
    if not costs_by_algo:
        raise ConfigError(f"no evaluation rows with per-user costs in {metrics_csv}")
    export_cost_heatmap(costs_by_algo, out_path)


def _write_metrics(path: str, rows: list[MetricsRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv())


def _config_hash(config: SystemConfig) -> str:
    return _dict_hash(config.to_dict())


def _dict_hash(data: dict) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def desk_plan(name: str = "desk_default", **overrides) -> ExperimentPlan:
    """The laptop-scale default plan used by the acceptance experiments."""
    base = dict(
        name=name,
        config=desk_config(),
        train=desk_train_config(),
        algorithms=("hc-mappo-l",),
        seeds=(0, 1, 2),
        eval_episodes=5,
    )
    base.update(overrides)
    return ExperimentPlan(**base)
