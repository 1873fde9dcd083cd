"""Config-driven experiment runner.

Parses a strict JSON config, builds synthetic or CSV task streams, executes
the requested regimes over seeds with shared pre-trained checkpoints, and
persists a long-format result table, a JSON manifest, and per-figure
aggregation files. Everything is deterministic given the config.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .continual import RunConfig, Task, TaskStream, run_stream
from .errors import ConfigError, FlowclError
from .losses import REGIMES, ScConfig
from .models import ProbModel, load_csv_task, make_model
from .networks import PosteriorNet
from .params import save_checkpoint
from .reference import PosteriorSamples, bias_report, cached_reference, mmd, mmd_ratio
from .utils import child_rng, stable_hash

log = logging.getLogger(__name__)

_LANE_STREAM = 10
_LANE_REF = 11
_LANE_EVAL = 12

PLOT_KINDS = ("mmd-ratio-by-task", "mean-bias-by-parameter", "std-bias-by-parameter")
_LAMBDA_SENSITIVE = ("sc-ewc", "sc-er-ewc")


@dataclass
class StreamSpec:
    kind: str = "synthetic"
    n_tasks: int = 3
    subsets_per_task: int = 10
    n_obs: int = 100
    include_task0: bool = True
    shifts: list | None = None
    csv_tasks: list = field(default_factory=list)


@dataclass
class ReplaySpec:
    capacity: int = 8
    sets_per_task: int = 1
    clustering: bool = True
    cluster_draws: int = 256


@dataclass
class TrainingSpec:
    sc_epochs: int = 30
    lr0: float = 1e-3
    pretrain_epochs: int = 20
    pretrain_batches: int = 32
    pretrain_batch_size: int = 16
    pretrain_lr0: float = 1e-3


@dataclass
class NetworkSpec:
    flow_layers: int = 6
    flow_hidden: int = 64
    dim_summary: int = 16
    summary_hidden: int = 64


@dataclass
class EvalSpec:
    eval_samples: int = 4000
    reference_samples: int = 4000
    mcmc_warmup: int = 1000
    mcmc_step_scale: float = 0.5
    mcmc_thin: int = 1
    reference: str = "auto"  # auto | analytic | mcmc


@dataclass
class ExperimentConfig:
    model: str
    regimes: list[str]
    model_options: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    stream: StreamSpec = field(default_factory=StreamSpec)
    sc: ScConfig = field(default_factory=ScConfig)
    lam: list[float] = field(default_factory=lambda: [1e3])
    replay: ReplaySpec = field(default_factory=ReplaySpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    evaluation: EvalSpec = field(default_factory=EvalSpec)
    output_dir: str = "results"
    cache_dir: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sc"] = {"n_draws": self.sc.n_draws, "clip": self.sc.clip}
        return d


def _take_section(raw: dict, key: str, cls, path: str):
    section = raw.pop(key, {})
    if not isinstance(section, dict):
        raise ConfigError(f"{path}{key}", "expected an object")
    fields = {f.name for f in cls.__dataclass_fields__.values()}
    unknown = set(section) - fields
    if unknown:
        raise ConfigError(f"{path}{key}.{sorted(unknown)[0]}", "unknown key")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}{key}", str(exc)) from None


def parse_config_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    if "model" not in raw:
        raise ConfigError("model", "required key missing")
    if "regimes" not in raw:
        raise ConfigError("regimes", "required key missing")
    model = raw.pop("model")
    regimes = raw.pop("regimes")
    if not isinstance(regimes, list) or not regimes:
        raise ConfigError("regimes", "must be a non-empty list")
    valid = set(REGIMES) | {"sb"}
    for r in regimes:
        if r not in valid:
            raise ConfigError("regimes", f"unknown regime '{r}' (have {sorted(valid)})")
    model_options = raw.pop("model_options", {})
    seeds = raw.pop("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds", "must be a list of integers")
    lam_raw = raw.pop("lambda", 1e3)
    lam = [float(v) for v in (lam_raw if isinstance(lam_raw, list) else [lam_raw])]
    if not lam or any(v < 0 for v in lam):
        raise ConfigError("lambda", "values must be >= 0")
    stream = _take_section(raw, "stream", StreamSpec, "")
    if stream.kind not in ("synthetic", "csv"):
        raise ConfigError("stream.kind", f"unknown kind '{stream.kind}'")
    sc_section = raw.pop("sc", {})
    unknown = set(sc_section) - {"n_draws", "clip"}
    if unknown:
        raise ConfigError(f"sc.{sorted(unknown)[0]}", "unknown key")
    try:
        sc = ScConfig(**sc_section)
    except ValueError as exc:
        raise ConfigError("sc", str(exc)) from None
    replay = _take_section(raw, "replay", ReplaySpec, "")
    if replay.capacity < 1:
        raise ConfigError("replay.capacity", "must be >= 1")
    training = _take_section(raw, "training", TrainingSpec, "")
    network = _take_section(raw, "network", NetworkSpec, "")
    evaluation = _take_section(raw, "evaluation", EvalSpec, "")
    if evaluation.reference not in ("auto", "analytic", "mcmc"):
        raise ConfigError("evaluation.reference",
                          f"unknown value '{evaluation.reference}'")
    output_dir = raw.pop("output_dir", "results")
    cache_dir = raw.pop("cache_dir", None)
    if raw:
        raise ConfigError(sorted(raw)[0], "unknown key")
    cfg = ExperimentConfig(model=model, regimes=regimes,
                           model_options=model_options, seeds=seeds,
                           stream=stream, sc=sc, lam=lam, replay=replay,
                           training=training, network=network,
                           evaluation=evaluation, output_dir=output_dir,
                           cache_dir=cache_dir)
    # fail fast on a bad model id or options
    make_model(cfg.model, cfg.model_options)
    if cfg.stream.kind == "csv":
        if not cfg.stream.csv_tasks:
            raise ConfigError("stream.csv_tasks", "csv stream needs at least one task")
        for i, entry in enumerate(cfg.stream.csv_tasks):
            if not isinstance(entry, dict) or "path" not in entry or "response" not in entry:
                raise ConfigError(f"stream.csv_tasks[{i}]",
                                  "each entry needs 'path' and 'response'")
            if not os.path.exists(entry["path"]):
                raise ConfigError(f"stream.csv_tasks[{i}].path",
                                  f"file not found: {entry['path']}")
    return cfg


def parse_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(path, "config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(path, f"invalid JSON: {exc}") from None
    return parse_config_dict(raw)


def default_shifts(n_tasks: int) -> list[dict]:
    """Covariate-scale ramp from 0.5 to 3 with heavy tails on even tasks."""
    scales = np.geomspace(0.5, 3.0, n_tasks) if n_tasks > 1 else np.array([2.0])
    return [{"cov_scale": float(scales[i]),
             "noise_df": 3.0 if (i + 1) % 2 == 0 else None}
            for i in range(n_tasks)]


def build_stream(config: ExperimentConfig, model: ProbModel, rng) -> TaskStream:
    """Materialize the task stream; synthetic tasks share one true theta."""
    spec = config.stream
    tasks: list[Task] = []
    if spec.kind == "synthetic":
        if spec.include_task0:
            sets = [model.simulate(rng, spec.n_obs)[1]
                    for _ in range(spec.subsets_per_task)]
            tasks.append(Task(0, sets, "synthetic",
                              {"cov_scale": 1.0, "noise_df": None, "prior_predictive": True}))
        shifts = spec.shifts if spec.shifts is not None else default_shifts(spec.n_tasks)
        if len(shifts) != spec.n_tasks:
            raise ConfigError("stream.shifts",
                              f"need {spec.n_tasks} entries, got {len(shifts)}")
        for t in range(1, spec.n_tasks + 1):
            shift = shifts[t - 1]
            theta_star = model.sample_prior(rng)
            sets = [model.simulate_given(theta_star, rng, spec.n_obs,
                                         cov_scale=shift.get("cov_scale", 1.0),
                                         noise_df=shift.get("noise_df"))
                    for _ in range(spec.subsets_per_task)]
            info = {"cov_scale": shift.get("cov_scale", 1.0),
                    "noise_df": shift.get("noise_df"),
                    "theta_star": theta_star.tolist()}
            tasks.append(Task(t, sets, "synthetic", info))
        return TaskStream(tasks)

    for t, entry in enumerate(spec.csv_tasks, start=1):
        data, info = load_csv_task(entry["path"], entry["response"])
        if data.shape[1] != model.dim_x:
            raise ConfigError(f"stream.csv_tasks[{t - 1}].path",
                              f"{entry['path']}: {data.shape[1]} columns after "
                              f"loading, model expects {model.dim_x}")
        sets = [data[rng.integers(0, data.shape[0], size=spec.n_obs)]
                for _ in range(spec.subsets_per_task)]
        tasks.append(Task(t, sets, "csv", info))
    return TaskStream(tasks)


def _reference_for(config: ExperimentConfig, model: ProbModel, x_set,
                   seed: int, task_id: int, subset: int,
                   cache_dir: str | None) -> PosteriorSamples:
    mode = config.evaluation.reference
    if mode == "auto":
        mode = "analytic" if model.has_analytic_posterior else "mcmc"
    if mode == "analytic":
        if not model.has_analytic_posterior:
            raise ConfigError("evaluation.reference",
                              f"model '{model.name}' has no analytic posterior")
        draws = model.posterior_sample(x_set, config.evaluation.reference_samples,
                                       child_rng(seed, _LANE_REF, task_id, subset))
        return PosteriorSamples(draws, "analytic")
    sub_seed = int(np.random.SeedSequence([seed, _LANE_REF, task_id, subset])
                   .generate_state(1)[0])
    sampler_cfg = {"n_samples": config.evaluation.reference_samples,
                   "warmup": config.evaluation.mcmc_warmup,
                   "step_scale": config.evaluation.mcmc_step_scale,
                   "thin": config.evaluation.mcmc_thin}
    return cached_reference(model, x_set, sampler_cfg, cache_dir, sub_seed)


def _metric_rows(regime: str, task_id: int, subset: int, seed: int,
                 model: ProbModel, flow_draws: np.ndarray,
                 sb_mmd: float, reference: PosteriorSamples,
                 ratio_override: float | None = None) -> list[tuple]:
    method = PosteriorSamples(flow_draws, "flow")
    m = mmd(method, reference)
    ratio = ratio_override if ratio_override is not None else \
        (m / sb_mmd if sb_mmd >= 1e-12 else m / 1e-12)
    mean_bias, std_bias = bias_report(method, reference)
    rows = [(regime, task_id, subset, seed, "mmd", m),
            (regime, task_id, subset, seed, "mmd_ratio", ratio)]
    for j, name in enumerate(model.param_names):
        rows.append((regime, task_id, subset, seed, f"mean_bias_{name}",
                     float(mean_bias[j])))
        rows.append((regime, task_id, subset, seed, f"std_bias_{name}",
                     float(std_bias[j])))
    return rows


def _cells(config: ExperimentConfig) -> list[tuple[str, str, float]]:
    """(cell name, regime, lambda) triples, expanding the lambda sweep."""
    cells = []
    for regime in config.regimes:
        if regime == "sb":
            continue
        if regime in _LAMBDA_SENSITIVE and len(config.lam) > 1:
            for lam in config.lam:
                cells.append((f"{regime}[lam={lam:g}]", regime, lam))
        else:
            cells.append((regime, regime, config.lam[0]))
    return cells


def run_experiment(config: ExperimentConfig):
    """Execute every regime x seed cell; returns (rows, manifest).

    Writes results.csv, manifest.json, checkpoints, and plot-data files
    under config.output_dir.
    """
    out_dir = config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    cache_dir = (config.cache_dir or os.environ.get("FLOWCL_CACHE_DIR")
                 or os.path.join(out_dir, "cache"))
    os.makedirs(cache_dir, exist_ok=True)
    model = make_model(config.model, config.model_options)
    net = PosteriorNet(model.dim_theta, model.dim_x,
                       dim_summary=config.network.dim_summary,
                       flow_layers=config.network.flow_layers,
                       flow_hidden=config.network.flow_hidden,
                       summary_hidden=config.network.summary_hidden)
    config_hash = stable_hash(config.to_dict())
    manifest = {"config": config.to_dict(), "config_hash": config_hash,
                "model": model.name, "cells": {}, "stream_info": {},
                "failures": []}
    rows: list[tuple] = []
    pretrain_key = stable_hash({
        "model": model.name, "options": config.model_options,
        "network": asdict(config.network),
        "pretrain": {k: getattr(config.training, k) for k in
                     ("pretrain_epochs", "pretrain_batches",
                      "pretrain_batch_size", "pretrain_lr0")},
        "n_obs": config.stream.n_obs})

    for seed in config.seeds:
        stream = build_stream(config, model, child_rng(seed, _LANE_STREAM))
        manifest["stream_info"][str(seed)] = [
            {"task": t.task_id, "source": t.source, "n_sets": len(t.sets),
             **{k: v for k, v in t.info.items() if k != "theta_star"}}
            for t in stream]
        run_cfg = RunConfig(
            seed=seed,
            pretrain_epochs=config.training.pretrain_epochs,
            pretrain_batches=config.training.pretrain_batches,
            pretrain_batch_size=config.training.pretrain_batch_size,
            pretrain_lr0=config.training.pretrain_lr0,
            pretrain_n_obs=config.stream.n_obs,
            sc_epochs=config.training.sc_epochs,
            lr0=config.training.lr0,
            buffer_capacity=config.replay.capacity,
            buffer_sets_per_task=config.replay.sets_per_task,
            buffer_clustering=config.replay.clustering,
            cluster_draws=config.replay.cluster_draws,
            sc=config.sc)
        pretrained = _pretrained_checkpoint(net, model, run_cfg, cache_dir,
                                            pretrain_key, seed)

        references: dict[tuple[int, int], PosteriorSamples] = {}
        sb_mmds: dict[tuple[int, int], float] = {}
        sb_draws: dict[tuple[int, int], np.ndarray] = {}
        for task in stream:
            for s, x_set in enumerate(task.sets):
                ref = _reference_for(config, model, x_set, seed, task.task_id,
                                     s, cache_dir)
                references[(task.task_id, s)] = ref
                draws = net.sample(pretrained, x_set, config.evaluation.eval_samples,
                                   child_rng(seed, _LANE_EVAL, task.task_id, s))
                sb_draws[(task.task_id, s)] = draws
                sb_mmds[(task.task_id, s)] = mmd(draws, ref)

        if "sb" in config.regimes:
            for task in stream:
                for s in range(len(task.sets)):
                    rows += _metric_rows("sb", task.task_id, s, seed, model,
                                         sb_draws[(task.task_id, s)],
                                         sb_mmds[(task.task_id, s)],
                                         references[(task.task_id, s)],
                                         ratio_override=1.0)

        for cell_name, regime, lam in _cells(config):
            cell_cfg = RunConfig(**{**asdict_runcfg(run_cfg), "lam": lam})
            cell_key = f"{cell_name}|seed={seed}"
            try:
                result = run_stream(regime, net, model, stream, cell_cfg,
                                    pretrained=pretrained)
            except Exception as exc:  # noqa: BLE001 - keep other cells alive
                log.exception("cell %s failed", cell_key)
                manifest["failures"].append({"cell": cell_key, "error": str(exc)})
                continue
            ckpt_dir = os.path.join(out_dir, "checkpoints", str(seed), cell_name)
            ckpts = {}
            for task_id, pv in result.per_task_params.items():
                path = os.path.join(ckpt_dir, f"task{task_id}.ckpt")
                save_checkpoint(pv, path)
                ckpts[str(task_id)] = os.path.relpath(path, out_dir)
            final_path = os.path.join(ckpt_dir, "final.ckpt")
            save_checkpoint(result.final_params, final_path)
            ckpts["final"] = os.path.relpath(final_path, out_dir)
            cell_manifest = dict(result.manifest)
            cell_manifest["checkpoints"] = ckpts
            cell_manifest["lambda"] = lam
            manifest["cells"][cell_key] = cell_manifest
            if result.manifest["failures"]:
                manifest["failures"].append(
                    {"cell": cell_key, "error": "task failures",
                     "tasks": [f["task"] for f in result.manifest["failures"]]})
            for task in stream:
                params_eval = (result.per_task_params[task.task_id]
                               if regime == "test-time-sc"
                               else result.final_params)
                for s, x_set in enumerate(task.sets):
                    draws = net.sample(params_eval, x_set,
                                       config.evaluation.eval_samples,
                                       child_rng(seed, _LANE_EVAL, task.task_id, s))
                    rows += _metric_rows(cell_name, task.task_id, s, seed, model,
                                         draws, sb_mmds[(task.task_id, s)],
                                         references[(task.task_id, s)])

    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4]))
    _write_results(rows, os.path.join(out_dir, "results.csv"))
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for kind in PLOT_KINDS:
        try:
            emit_plot_data(rows, kind, out_dir)
        except ValueError:
            pass  # e.g. bias rows absent because every cell failed
    return rows, manifest


def asdict_runcfg(cfg: RunConfig) -> dict:
    d = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    return d


def _pretrained_checkpoint(net, model, run_cfg: RunConfig, cache_dir: str,
                           pretrain_key: str, seed: int):
    """All regimes for one seed share this cached pre-trained checkpoint."""
    from .continual import pretrain_sb
    from .params import load_checkpoint

    path = os.path.join(cache_dir, f"pretrain-{pretrain_key}-s{seed}.ckpt")
    if os.path.exists(path):
        return load_checkpoint(path)
    params = net.init_params(child_rng(seed, 0))
    params, _ = pretrain_sb(net, model, params, run_cfg.pretrain_epochs,
                            run_cfg.pretrain_batches, run_cfg.pretrain_batch_size,
                            child_rng(seed, 1), lr0=run_cfg.pretrain_lr0,
                            n_obs=run_cfg.pretrain_n_obs)
    save_checkpoint(params, path)
    return params


def _write_results(rows: list[tuple], path: str):
    with open(path, "w", newline="") as fh:
        fh.write("regime,task,subset,seed,metric,value\n")
        for regime, task, subset, seed, metric, value in rows:
            fh.write(f"{regime},{task},{subset},{seed},{metric},{value!r}\n")


def read_results(path: str) -> list[tuple]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "regime,task,subset,seed,metric,value":
            raise FlowclError(f"{path}: unexpected header '{header}'")
        for line in fh:
            regime, task, subset, seed, metric, value = line.rstrip("\n").split(",")
            rows.append((regime, int(task), int(subset), int(seed), metric,
                         float(value)))
    return rows


def _quantiles(values: list[float]) -> tuple[float, float, float]:
    arr = np.asarray(values)
    return (float(np.percentile(arr, 50)), float(np.percentile(arr, 25)),
            float(np.percentile(arr, 75)))


def emit_plot_data(rows: list[tuple], kind: str, out_dir: str,
                   regimes: list[str] | None = None) -> str:
    """Aggregate the result table for one figure kind and write a CSV.

    The log-scale convention of the corresponding figure is recorded as
    metadata in a comment line; values themselves stay untransformed.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind '{kind}' (have {list(PLOT_KINDS)})")
    if regimes is not None and not regimes:
        raise ValueError("empty regime filter")
    selected = rows
    if regimes is not None:
        selected = [r for r in rows if r[0] in regimes]
    groups: dict[tuple, list[float]] = {}
    if kind == "mmd-ratio-by-task":
        log_scale = True
        header = "task,regime,median,q25,q75"
        for regime, task, subset, seed, metric, value in selected:
            if metric == "mmd_ratio":
                groups.setdefault((task, regime), []).append(value)
        keyfmt = lambda k: f"{k[0]},{k[1]}"
    else:
        log_scale = False
        header = "parameter,regime,median,q25,q75"
        prefix = "mean_bias_" if kind == "mean-bias-by-parameter" else "std_bias_"
        for regime, task, subset, seed, metric, value in selected:
            if metric.startswith(prefix):
                # figures report absolute biases
                groups.setdefault((metric[len(prefix):], regime), []).append(abs(value))
        keyfmt = lambda k: f"{k[0]},{k[1]}"
    if not groups:
        raise ValueError(f"no rows match plot kind '{kind}'")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"plot-{kind}.csv")
    with open(path, "w", newline="") as fh:
        fh.write(f"# kind={kind} log_scale={str(log_scale).lower()}\n")
        fh.write(header + "\n")
        for key in sorted(groups):
            med, q25, q75 = _quantiles(groups[key])
            fh.write(f"{keyfmt(key)},{med!r},{q25!r},{q75!r}\n")
    return path
