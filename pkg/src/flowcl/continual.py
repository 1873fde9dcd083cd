"""Sequential training across a task stream: replay buffer with K-medoids
budgeting, consolidation records, and the per-task training loops."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tape, backward
from .errors import NonFiniteValue
from .losses import (REGIMES, EwcRecord, FlowPosterior, ScConfig, composite_loss,
                     fisher_diag, sb_loss)
from .models import ProbModel
from .networks import PosteriorNet
from .optim import AdamState, adam_step, cosine_lr
from .params import ParamBinding, ParamVector
from .utils import as_generator, child_rng

log = logging.getLogger(__name__)

# rng tag lanes; task training must not depend on the regime, so all regimes
# derive the same per-task stream from (seed, lane, task)
_LANE_PRETRAIN = 1
_LANE_TASK = 2
_LANE_BUFFER = 3
_LANE_FISHER = 4


@dataclass
class Task:
    task_id: int
    sets: list[np.ndarray]
    source: str = "synthetic"
    info: dict = field(default_factory=dict)


@dataclass
class TaskStream:
    tasks: list[Task]

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)


@dataclass
class BufferEntry:
    task_id: int
    set_index: int
    x_set: np.ndarray
    theta_mean: np.ndarray


@dataclass
class ReplayBuffer:
    """Bounded store of past observation sets plus clustering embeddings."""

    capacity: int
    entries: list[BufferEntry] = field(default_factory=list)

    def sets(self) -> list[np.ndarray]:
        return [e.x_set for e in self.entries]

    def task_ids(self) -> list[int]:
        return [e.task_id for e in self.entries]


def _medoid_cost(dist: np.ndarray, medoids: Sequence[int]) -> float:
    return float(dist[:, list(medoids)].min(axis=1).sum())


def pam_kmedoids(points: np.ndarray, k: int) -> list[int]:
    """K-medoids on Euclidean distances; returns sorted medoid indices.

    Small instances are solved exactly by enumeration (ties broken toward
    the lexicographically first subset); larger ones fall back to PAM
    build-and-swap with lowest-index tie-breaking, so results stay
    deterministic either way.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        return list(range(n))
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))

    if math.comb(n, k) <= 20000:
        best, best_cost = None, np.inf
        for combo in itertools.combinations(range(n), k):
            cost = _medoid_cost(dist, combo)
            if cost < best_cost - 1e-15:
                best, best_cost = combo, cost
        return list(best)

    # PAM build phase: greedy additions, lowest index wins ties
    medoids = [int(np.argmin(dist.sum(axis=1)))]
    while len(medoids) < k:
        current = dist[:, medoids].min(axis=1)
        best_j, best_gain = None, -np.inf
        for j in range(n):
            if j in medoids:
                continue
            gain = np.maximum(current - dist[:, j], 0.0).sum()
            if gain > best_gain + 1e-15:
                best_j, best_gain = j, gain
        medoids.append(best_j)
    # swap phase: best-improvement until a local optimum
    cost = _medoid_cost(dist, medoids)
    improved = True
    while improved:
        improved = False
        best_swap, best_cost = None, cost
        for mi, m in enumerate(medoids):
            for j in range(n):
                if j in medoids:
                    continue
                trial = medoids[:mi] + [j] + medoids[mi + 1:]
                c = _medoid_cost(dist, trial)
                if c < best_cost - 1e-15:
                    best_swap, best_cost = (mi, j), c
        if best_swap is not None:
            medoids[best_swap[0]] = best_swap[1]
            cost = best_cost
            improved = True
    return sorted(medoids)


def kmedoid_update(buffer: ReplayBuffer, new_entry: BufferEntry,
                   k: Optional[int] = None) -> ReplayBuffer:
    """Insert an entry; cluster down to k medoids once capacity is exceeded."""
    k = buffer.capacity if k is None else int(k)
    if k < 1:
        raise ValueError("buffer capacity must be >= 1")
    entries = buffer.entries + [new_entry]
    if len(entries) <= k:
        return ReplayBuffer(capacity=k, entries=entries)
    points = np.stack([e.theta_mean for e in entries])
    keep = pam_kmedoids(points, k)
    return ReplayBuffer(capacity=k, entries=[entries[i] for i in keep])


@dataclass
class TrainSchedule:
    """Per-task optimization settings; one step consumes the full task data."""

    epochs: int = 30
    lr0: float = 1e-3
    lam: float = 1e3


def pretrain_sb(net: PosteriorNet, model: ProbModel, params: ParamVector,
                epochs: int, batches_per_epoch: int, batch_size: int, rng,
                lr0: float = 1e-3, n_obs: Optional[int] = None):
    """Online simulation-based pre-training; fresh simulations every step.

    Returns (params, loss_trace). On a non-finite loss the run aborts and
    the last finite-loss parameters are returned.
    """
    rng = as_generator(rng)
    total = epochs * batches_per_epoch
    state = AdamState.zeros(len(params))
    trace: list[float] = []
    last_good = params.copy()
    for step in range(total):
        thetas = np.empty((batch_size, model.dim_theta))
        sets = []
        for b in range(batch_size):
            th, x = model.simulate(rng, n_obs)
            thetas[b] = th
            sets.append(x)
        sets = np.stack(sets)
        with Tape() as tape:
            bind = ParamBinding(params, tape)
            try:
                loss = sb_loss(net, bind, thetas, sets)
            except NonFiniteValue:
                log.warning("pretrain diverged at step %d; restoring checkpoint", step)
                return last_good, trace
            grad = backward(tape, loss)
        value = loss.item()
        if not math.isfinite(value):
            log.warning("pretrain loss non-finite at step %d; restoring checkpoint", step)
            return last_good, trace
        trace.append(value)
        adam_step(params, grad, state, cosine_lr(step, total, lr0))
        last_good = params.copy()
    return params, trace


def train_task(regime: str, net: PosteriorNet, model: ProbModel,
               params: ParamVector, task_sets: Sequence[np.ndarray],
               buffer: ReplayBuffer, records: Sequence[EwcRecord],
               cfg: ScConfig, schedule: TrainSchedule, rng,
               task_index: Optional[int] = None):
    """Adapt parameters to one task with the regime's composite objective.

    Runs `schedule.epochs` full-data Adam steps under a cosine schedule.
    Five consecutive non-finite losses abort the task and return the
    parameters that achieved the lowest finite loss so far.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime '{regime}' (have {REGIMES})")
    rng = as_generator(rng)
    q = FlowPosterior(net)
    state = AdamState.zeros(len(params))
    trace: list[float] = []
    best = (math.inf, params.copy())
    bad_streak = 0
    buffer_sets = buffer.sets() if buffer is not None else []
    for step in range(schedule.epochs):
        with Tape() as tape:
            bind = ParamBinding(params, tape)
            try:
                loss = composite_loss(regime, q, bind, model, task_sets,
                                      buffer_sets, records, cfg, schedule.lam,
                                      rng, task_index=task_index)
                value = loss.item()
            except NonFiniteValue:
                value = math.nan
            if math.isfinite(value):
                grad = backward(tape, loss)
            else:
                grad = None
        if not math.isfinite(value):
            bad_streak += 1
            trace.append(math.nan)
            if bad_streak >= 5:
                log.warning("%s: aborting task after 5 non-finite losses; "
                            "restoring best checkpoint", regime)
                params.values[:] = best[1].values
                return params, trace
            continue
        bad_streak = 0
        trace.append(value)
        if value < best[0]:
            best = (value, params.copy())
        adam_step(params, grad, state, cosine_lr(step, schedule.epochs, schedule.lr0))
    return params, trace


def make_ewc_record(net: PosteriorNet, model: ProbModel, params: ParamVector,
                    task: Task, cfg: ScConfig, rng) -> EwcRecord:
    """Importance weights from the task's sets plus a parameter snapshot."""
    q = FlowPosterior(net)
    importance = fisher_diag(q, params, model, task.sets, cfg, rng)
    return EwcRecord(task_id=task.task_id, snapshot=params.copy(),
                     importance=importance)


@dataclass
class RunConfig:
    """Everything run_stream needs besides the stream itself."""

    seed: int = 0
    pretrain_epochs: int = 20
    pretrain_batches: int = 32
    pretrain_batch_size: int = 16
    pretrain_lr0: float = 1e-3
    pretrain_n_obs: Optional[int] = None
    sc_epochs: int = 30
    lr0: float = 1e-3
    lam: float = 1e3
    buffer_capacity: int = 8
    buffer_sets_per_task: int = 1
    buffer_clustering: bool = True
    cluster_draws: int = 256
    sc: ScConfig = field(default_factory=ScConfig)


@dataclass
class StreamResult:
    regime: str
    final_params: ParamVector
    pretrained: ParamVector
    per_task_params: dict
    records: list
    buffer: ReplayBuffer
    manifest: dict


def run_stream(regime: str, net: PosteriorNet, model: ProbModel,
               stream: TaskStream, cfg: RunConfig,
               pretrained: Optional[ParamVector] = None) -> StreamResult:
    """Pre-train once, then apply the regime across the stream in order.

    test-time-sc restarts every task from the pre-trained checkpoint; all
    other regimes carry parameters forward. Buffer and record maintenance
    happens after each task, matching the training-then-store ordering of
    the replay and consolidation procedures. A task that keeps failing is
    recorded in the manifest and the stream continues from the last good
    parameters.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime '{regime}' (have {REGIMES})")
    if pretrained is None:
        params = net.init_params(child_rng(cfg.seed, 0))
        pretrained, pre_trace = pretrain_sb(
            net, model, params, cfg.pretrain_epochs, cfg.pretrain_batches,
            cfg.pretrain_batch_size, child_rng(cfg.seed, _LANE_PRETRAIN),
            lr0=cfg.pretrain_lr0, n_obs=cfg.pretrain_n_obs)
    else:
        pre_trace = []
        pretrained = pretrained.copy()

    params = pretrained.copy()
    buffer = ReplayBuffer(capacity=cfg.buffer_capacity)
    records: list[EwcRecord] = []
    per_task: dict[int, ParamVector] = {}
    manifest = {
        "regime": regime,
        "seed": cfg.seed,
        "pretrain_trace": pre_trace,
        "task_traces": {},
        "failures": [],
        "buffer_task_ids": [],
    }
    schedule = TrainSchedule(epochs=cfg.sc_epochs, lr0=cfg.lr0, lam=cfg.lam)
    uses_buffer = regime in ("sc-er", "sc-er-ewc")
    uses_records = regime in ("sc-ewc", "sc-er-ewc")

    for position, task in enumerate(stream, start=1):
        task_rng = child_rng(cfg.seed, _LANE_TASK, task.task_id)
        start = pretrained.copy() if regime == "test-time-sc" else params
        try:
            trained, trace = train_task(regime, net, model, start, task.sets,
                                        buffer, records, cfg.sc, schedule,
                                        task_rng, task_index=position)
        except Exception as exc:  # noqa: BLE001 - stream must outlive one task
            log.exception("task %d failed under %s", task.task_id, regime)
            manifest["failures"].append({"task": task.task_id, "error": str(exc)})
            manifest["task_traces"][str(task.task_id)] = []
            per_task[task.task_id] = params.copy()
            continue
        manifest["task_traces"][str(task.task_id)] = trace
        if regime == "test-time-sc":
            per_task[task.task_id] = trained.copy()
        else:
            params = trained
            per_task[task.task_id] = params.copy()

        if uses_buffer:
            buf_rng = child_rng(cfg.seed, _LANE_BUFFER, task.task_id)
            source = per_task[task.task_id]
            for s in range(min(cfg.buffer_sets_per_task, len(task.sets))):
                x_set = task.sets[s]
                theta_bar = net.posterior_mean(source, x_set, cfg.cluster_draws,
                                               buf_rng)
                entry = BufferEntry(task.task_id, s, x_set, theta_bar)
                if cfg.buffer_clustering:
                    buffer = kmedoid_update(buffer, entry)
                elif len(buffer.entries) < buffer.capacity:
                    buffer = ReplayBuffer(buffer.capacity, buffer.entries + [entry])
        if uses_records:
            fisher_rng = child_rng(cfg.seed, _LANE_FISHER, task.task_id)
            records.append(make_ewc_record(net, model, per_task[task.task_id],
                                           task, cfg.sc, fisher_rng))

    manifest["buffer_task_ids"] = buffer.task_ids()
    final = pretrained.copy() if regime == "test-time-sc" else params
    return StreamResult(regime=regime, final_params=final, pretrained=pretrained,
                        per_task_params=per_task, records=records,
                        buffer=buffer, manifest=manifest)
