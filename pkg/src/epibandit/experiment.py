"""Experiment configuration, multi-seed runner and CSV output."""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import environment as envs
from .epinet import EpinetConfig
from .errors import ConfigError
from .metrics import RegretTrace, aggregate, recompute_avg_regret, regret_cdf, selection_ratio, update_regret
from .model import ModelShape, RewardModel
from .policies import PolicyConfig, PolicyKind, RoundRecord, make_agent
from .training import TrainConfig

log = logging.getLogger(__name__)

ENV_TYPES = ("dataset", "synthetic_moderation", "synthetic_linear")


@dataclass(frozen=True)
class EnvSpec:
    type: str = "synthetic_moderation"
    path: Optional[str] = None
    format: str = "csv"
    # synthetic_moderation
    size: int = 10000
    dim: int = 16
    label_noise: float = 0.1
    toxic_fraction: float = 0.36
    data_seed: int = 0
    # synthetic_linear
    num_actions: int = 2
    noise: float = 0.0
    weight_seed: int = 0
    context_scale: float = 1.0
    rewards: dict = field(default_factory=lambda: {"not_publish": 0.5, "publish_nontoxic": 1.0, "publish_toxic": -0.5})

    def reward_table(self) -> dict:
        r = self.rewards
        return {
            (envs.NOT_PUBLISH, False): float(r["not_publish"]),
            (envs.NOT_PUBLISH, True): float(r["not_publish"]),
            (envs.PUBLISH, False): float(r["publish_nontoxic"]),
            (envs.PUBLISH, True): float(r["publish_toxic"]),
        }


@dataclass(frozen=True)
class ModelSpec:
    hidden_dims: tuple = (32,)
    input_dim: Optional[int] = None
    pretrained_seed: int = 0
    head_init: str = "random"


@dataclass(frozen=True)
class ExperimentConfig:
    policy: PolicyConfig
    name: Optional[str] = None
    environment: EnvSpec = field(default_factory=EnvSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    horizon: int = 100
    batch_size: int = 32
    seeds: tuple = tuple(range(1, 21))
    master_seed: int = 0
    output_dir: str = "results"
    parallelism: int = 1

    @property
    def label(self) -> str:
        return self.name or self.policy.kind.value

    def to_dict(self) -> dict:
        pol = self.policy
        return {
            "name": self.name,
            "policy": {
                "kind": pol.kind.value,
                "lam": pol.lam,
                "obs_var": pol.obs_var,
                "prior_var": pol.prior_var,
                "dropout_rate": pol.dropout_rate,
                "nonzero_gradient_correction": pol.nonzero_gradient_correction,
                "epinet": asdict(pol.epinet),
            },
            "environment": asdict(self.environment),
            "model": {**asdict(self.model), "hidden_dims": list(self.model.hidden_dims)},
            "train": {
                "epochs": self.train.epochs,
                "learning_rate": self.train.learning_rate,
                "freeze_body": self.train.freeze_body,
            },
            "horizon": self.horizon,
            "batch_size": self.batch_size,
            "seeds": list(self.seeds),
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
            "parallelism": self.parallelism,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        pol = dict(data.pop("policy", None) or {})
        if "kind" not in pol:
            raise ConfigError("policy.kind", "required")
        try:
            kind = PolicyKind(pol.pop("kind"))
        except ValueError:
            raise ConfigError("policy.kind", f"must be one of {[k.value for k in PolicyKind]}") from None
        epi = pol.pop("epinet", None) or {}
        try:
            policy = PolicyConfig.defaults(kind, epinet=EpinetConfig(**epi), **pol)
        except TypeError as exc:
            raise ConfigError("policy", str(exc)) from None
        except ValueError as exc:
            raise ConfigError("policy.epinet", str(exc)) from None
        kwargs = {"policy": policy}
        for key, typ in (("environment", EnvSpec), ("model", ModelSpec), ("train", TrainConfig)):
            sub = data.pop(key, None)
            if sub is None:
                continue
            if "hidden_dims" in sub:
                sub = {**sub, "hidden_dims": tuple(sub["hidden_dims"])}
            try:
                kwargs[key] = typ(**sub)
            except TypeError as exc:
                raise ConfigError(key, str(exc)) from None
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
        if "seeds" in data:
            data["seeds"] = tuple(int(s) for s in data["seeds"])
        kwargs.update(data)
        cfg = cls(**kwargs)
        _check_fields(cfg)
        return cfg


def _check_fields(cfg: ExperimentConfig) -> None:
    if cfg.horizon < 1:
        raise ConfigError("horizon", "must be positive")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size", "must be positive")
    if not cfg.seeds:
        raise ConfigError("seeds", "at least one seed is required")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds", "duplicate seeds")
    if cfg.parallelism < 0:
        raise ConfigError("parallelism", "must be nonnegative")
    if cfg.environment.type not in ENV_TYPES:
        raise ConfigError("environment.type", f"must be one of {ENV_TYPES}")
    if cfg.environment.type == "dataset" and not cfg.environment.path:
        raise ConfigError("environment.path", "required for dataset environments")
    if cfg.model.head_init not in ("random", "zero"):
        raise ConfigError("model.head_init", "must be 'random' or 'zero'")
    pol = cfg.policy
    if pol.obs_var <= 0 or pol.prior_var <= 0:
        raise ConfigError("policy", "obs_var and prior_var must be positive")
    if pol.lam < 0:
        raise ConfigError("policy.lam", "must be nonnegative")
    if not 0 <= pol.dropout_rate < 1:
        raise ConfigError("policy.dropout_rate", "must lie in [0, 1)")


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    cfg = ExperimentConfig.from_dict(data)
    env = cfg.environment
    if env.path and not os.path.isabs(env.path):
        # dataset paths are relative to the config file
        resolved = str(Path(path).resolve().parent / env.path)
        cfg = replace(cfg, environment=replace(env, path=resolved))
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# -- environments --------------------------------------------------------------


def load_dataset(spec: EnvSpec) -> Optional[envs.ModerationDataset]:
    if spec.type == "dataset":
        return envs.ingest(spec.path, spec.format)
    if spec.type == "synthetic_moderation":
        return envs.make_synthetic_moderation(spec.size, spec.dim, spec.label_noise, spec.toxic_fraction, spec.data_seed)
    return None


def linear_weights(spec: EnvSpec) -> np.ndarray:
    return np.random.default_rng(spec.weight_seed).standard_normal((spec.num_actions, spec.dim)) / np.sqrt(spec.dim)


def env_dims(cfg: ExperimentConfig, dataset) -> tuple[int, int]:
    """(input_dim, num_actions) implied by the environment."""
    if dataset is not None:
        return dataset.dim, 2
    return cfg.environment.dim, cfg.environment.num_actions


def validate(cfg: ExperimentConfig) -> list[str]:
    """Problems that would stop ``run`` from completing; nothing is executed."""
    findings = []
    env = cfg.environment
    need = cfg.horizon * cfg.batch_size
    if env.type == "dataset":
        if not env.path or not os.path.exists(env.path):
            findings.append(f"missing dataset file: {env.path}")
            return findings
        try:
            data = envs.ingest(env.path, env.format)
        except Exception as exc:  # report, do not raise
            findings.append(f"dataset does not parse: {exc}")
            return findings
        rows, dim = len(data), data.dim
    elif env.type == "synthetic_moderation":
        rows, dim = env.size, env.dim
    else:
        rows, dim = None, env.dim
    if cfg.model.input_dim is not None and cfg.model.input_dim != dim:
        findings.append(f"dimension mismatch: dataset d={dim}, model input_dim={cfg.model.input_dim}")
    if rows is not None and need > rows:
        findings.append(f"horizon overrun: T*B={need} exceeds {rows} dataset rows")
    return findings


# -- running -------------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    trace: RegretTrace
    actions: np.ndarray  # (T, B)
    num_actions: int

    def ratios(self) -> list[float]:
        return [selection_ratio(self.actions, a) for a in range(self.num_actions)]

    def publish_ratio_per_step(self) -> np.ndarray:
        return (self.actions == envs.PUBLISH).mean(axis=1)


def seed_streams(master_seed: int, seed: int, n: int = 4) -> list[np.random.Generator]:
    """Independent generators for one run, derived from ``(master_seed, seed)`` only."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(seed,))
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def run_seed(cfg: ExperimentConfig, seed: int, dataset=None) -> SeedResult:
    env_rng, head_rng, agent_rng, select_rng = seed_streams(cfg.master_seed, seed, 4)
    spec = cfg.environment
    if spec.type == "synthetic_linear":
        env = envs.SyntheticLinearEnv(
            linear_weights(spec), spec.noise, spec.context_scale, cfg.batch_size, seed=int(env_rng.integers(2**63))
        )
    else:
        if dataset is None:
            dataset = load_dataset(spec)
        env_cfg = envs.EnvConfig(cfg.batch_size, cfg.horizon, spec.reward_table(), int(env_rng.integers(2**63)))
        env = envs.ModerationEnv(dataset, env_cfg)
    input_dim, num_actions = env.dim, env.num_actions
    shape = ModelShape(input_dim, cfg.model.hidden_dims, num_actions)
    model = RewardModel.initialize(
        shape,
        np.random.default_rng(cfg.model.pretrained_seed),
        head_rng if cfg.model.head_init == "random" else None,
    )
    agent = make_agent(cfg.policy, model, cfg.train, agent_rng, cfg.batch_size)
    trace = RegretTrace()
    actions = np.zeros((cfg.horizon, cfg.batch_size), dtype=np.int64)
    for t in range(1, cfg.horizon + 1):
        examples = env.next_batch(t)
        records = []
        for b, ex in enumerate(examples):
            a = agent.select(ex.embedding, select_rng)
            r = env.reward(ex, a, env_rng)
            actions[t - 1, b] = a
            records.append(RoundRecord(ex.embedding, a, r))
        optimal = np.mean([env.optimal_reward(ex) for ex in examples])
        achieved = np.mean([rec.r for rec in records])
        update_regret(trace, optimal, achieved)
        agent.end_of_step(records)
    return SeedResult(seed, trace, actions, num_actions)


def _run_seed_job(args):
    cfg, seed, dataset = args
    return run_seed(cfg, seed, dataset)


def run_seeds(cfg: ExperimentConfig, dataset=None) -> list[SeedResult]:
    """Run every seed; results come back in config seed order regardless of parallelism."""
    if dataset is None:
        dataset = load_dataset(cfg.environment)
    jobs = [(cfg, s, dataset) for s in cfg.seeds]
    if cfg.parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallelism) as pool:
            return list(pool.map(_run_seed_job, jobs))
    return [_run_seed_job(j) for j in jobs]


# -- CSV output ------------------------------------------------------------------


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def trace_csv(result: SeedResult) -> str:
    steps = result.trace.step_regret
    publish = result.publish_ratio_per_step()
    rows = [
        (t + 1, fmt(steps[t]), fmt(result.trace.avg_regret[t]), fmt(publish[t]))
        for t in range(len(steps))
    ]
    return _csv(("t", "step_regret", "avg_regret", "ratio_publish"), rows)


def summary_csv(results: list[SeedResult]) -> str:
    K = results[0].num_actions
    header = ("seed", "final_avg_regret", *(f"s_T_{a}" for a in range(K)))
    rows = [(r.seed, fmt(r.trace.final), *(fmt(v) for v in r.ratios())) for r in results]
    return _csv(header, rows)


def aggregate_rows(label: str, results: list[SeedResult]) -> list[tuple]:
    curves = np.array([r.trace.avg_regret for r in results])
    rows = []
    for t in range(curves.shape[1]):
        if len(results) >= 2:
            mean, se = aggregate(curves[:, t])
        else:
            mean, se = float(curves[0, t]), 0.0
        rows.append((label, t + 1, fmt(mean), fmt(se)))
    return rows


def cdf_rows(label: str, results: list[SeedResult]) -> list[tuple]:
    return [(label, fmt(v), fmt(f)) for v, f in regret_cdf([r.trace.final for r in results])]


AGGREGATE_HEADER = ("policy", "t", "mean_avg_regret", "stderr_avg_regret")
CDF_HEADER = ("policy", "final_avg_regret", "cdf")


def write_outputs(cfg: ExperimentConfig, results: list[SeedResult], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        (out / f"trace_{r.seed}.csv").write_text(trace_csv(r))
    (out / "summary.csv").write_text(summary_csv(results))
    (out / "aggregate.csv").write_text(_csv(AGGREGATE_HEADER, aggregate_rows(cfg.label, results)))
    (out / "cdf.csv").write_text(_csv(CDF_HEADER, cdf_rows(cfg.label, results)))
    return out


def check_bookkeeping(results: list[SeedResult], tol: float = 1e-12) -> bool:
    """Recomputed running averages match the incremental ones."""
    for r in results:
        again = recompute_avg_regret(r.trace.optimal, r.trace.achieved)
        if np.max(np.abs(again - np.asarray(r.trace.avg_regret))) > tol:
            return False
    return True


def run(cfg: ExperimentConfig, out_dir=None) -> list[SeedResult]:
    results = run_seeds(cfg)
    write_outputs(cfg, results, out_dir or cfg.output_dir)
    return results


def compare(configs: list[ExperimentConfig], out_dir) -> dict[str, list[SeedResult]]:
    """Run several policies on a shared environment and write combined tables."""
    if not configs:
        raise ConfigError("configs", "at least one config is required")
    first = configs[0]
    for c in configs[1:]:
        if c.environment != first.environment:
            raise ConfigError("environment", f"{c.label} uses a different environment")
        if (c.horizon, c.batch_size, tuple(c.seeds)) != (first.horizon, first.batch_size, tuple(first.seeds)):
            raise ConfigError("horizon/batch_size/seeds", f"{c.label} differs from {first.label}")
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ConfigError("name", f"duplicate policy names {labels}")
    out = Path(out_dir)
    dataset = load_dataset(first.environment)
    agg, cdf, all_results = [], [], {}
    for c in configs:
        results = run_seeds(c, dataset)
        write_outputs(c, results, out / c.label)
        agg += aggregate_rows(c.label, results)
        cdf += cdf_rows(c.label, results)
        all_results[c.label] = results
    (out / "aggregate.csv").write_text(_csv(AGGREGATE_HEADER, agg))
    (out / "cdf.csv").write_text(_csv(CDF_HEADER, cdf))
    return all_results
