"""Training objectives: simulation-based loss, self-consistency variance
loss, the quadratic consolidation penalty, and their per-regime composites.

The self-consistency loss treats proposal draws as constants: gradients
flow only through the evaluated log density of the flow, not through the
sampling path. That stop-gradient choice is the single most consequential
estimator decision in this module and every oracle test relies on it.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .errors import NonFiniteValue, ShapeMismatch
from .models import ProbModel, norm_logpdf
from .networks import PosteriorNet
from .params import ParamBinding, ParamVector
from .utils import as_generator

log = logging.getLogger(__name__)

REGIMES = ("naive-sc", "test-time-sc", "sc-er", "sc-ewc", "sc-er-ewc")


@dataclass(frozen=True)
class ScConfig:
    """Knobs of the self-consistency estimator.

    n_draws is the number of posterior draws per datum entering the
    variance; the proposal is always the current posterior approximation.
    """

    n_draws: int = 16
    clip: float = 1e6

    def __post_init__(self):
        if self.n_draws < 2:
            raise ValueError("n_draws must be >= 2 for a variance estimate")
        if self.clip <= 0:
            raise ValueError("clip bound must be positive")


@dataclass
class EwcRecord:
    """Snapshot of parameters after one task plus diagonal importances."""

    task_id: int
    snapshot: ParamVector
    importance: ParamVector


class FlowPosterior:
    """The trained flow as both proposal and density for the SC loss."""

    def __init__(self, net: PosteriorNet):
        self.net = net

    def sample(self, params: ParamVector, x_set, n: int, rng) -> np.ndarray:
        return self.net.sample(params, x_set, n, rng)

    def log_prob(self, bind: ParamBinding, x_set, thetas) -> Tensor:
        return self.net.log_prob_set(bind, thetas, x_set)


class GaussianPosterior:
    """Fixed Gaussian substitute for q, keyed per observation set.

    `moments` maps an observation set to (mean, cov). Log densities are
    constants on the tape, which makes this the natural stand-in when an
    oracle wants the exact (or deliberately inflated) posterior.
    """

    def __init__(self, moments):
        self.moments = moments

    def sample(self, params, x_set, n: int, rng) -> np.ndarray:
        mean, cov = self.moments(x_set)
        chol = np.linalg.cholesky(cov)
        z = as_generator(rng).standard_normal((int(n), mean.size))
        return mean + z @ chol.T

    def log_prob(self, bind, x_set, thetas) -> Tensor:
        mean, cov = self.moments(x_set)
        diff = np.atleast_2d(thetas) - mean
        solve = np.linalg.solve(cov, diff.T).T
        _, logdet = np.linalg.slogdet(cov)
        lp = -0.5 * (diff * solve).sum(axis=1) - 0.5 * logdet \
            - 0.5 * mean.size * np.log(2.0 * np.pi)
        return ad.constant(lp)


def conjugate_posterior(model) -> GaussianPosterior:
    return GaussianPosterior(model.analytic_posterior)


def sb_loss(net: PosteriorNet, bind: ParamBinding, thetas, sets) -> Tensor:
    """Mean negative log density of true parameters under the flow."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if thetas.shape[0] == 0:
        raise ValueError("sb_loss: empty batch")
    lp = net.log_prob_batch(bind, thetas, sets)
    if not np.all(np.isfinite(lp.values)):
        bad = int(np.flatnonzero(~np.isfinite(lp.values))[0])
        raise NonFiniteValue(f"sb_loss: non-finite log density at batch index {bad}")
    return ad.mean(lp) * (-1.0)


def sc_loss(q, bind: ParamBinding, model: ProbModel, x_sets: Sequence,
            cfg: ScConfig, rng, draws: Optional[Sequence[np.ndarray]] = None) -> Tensor:
    """Mean per-set variance of the clipped log self-consistency ratio.

    For each set, draws come from the current posterior approximation (or
    are supplied explicitly, which pins them for finite-difference checks)
    and enter as constants; the ratio is
    log p(x | theta) + log p(theta) - log q(theta | x).
    """
    if not x_sets:
        raise ValueError("sc_loss: no observation sets")
    rng = as_generator(rng)
    terms = []
    for m, x_set in enumerate(x_sets):
        x_set = np.asarray(x_set, dtype=np.float64)
        if x_set.shape[0] == 0:
            raise ValueError(f"sc_loss: empty observation set at index {m}")
        th = draws[m] if draws is not None else q.sample(bind.params, x_set,
                                                         cfg.n_draws, rng)
        joint = np.array([model.joint_log_prob(x_set, t) for t in th])
        logq = q.log_prob(bind, x_set, th)
        ratio = ad.clip(ad.constant(joint) - logq, cfg.clip)
        if not np.all(np.isfinite(ratio.values)):
            raise NonFiniteValue(f"sc_loss: non-finite log ratio for set index {m}")
        terms.append(ad.variance(ratio))
    return ad.mean(ad.stack_scalars(terms))


def ewc_penalty(bind: ParamBinding, records: Sequence[EwcRecord],
                lam: float) -> Tensor:
    """(lam/2) * sum over records and parameters of W * (current - snapshot)^2."""
    total: Tensor | float = ad.constant(0.0)
    for rec in records:
        if not bind.params.same_layout(rec.snapshot):
            raise ShapeMismatch("ewc_penalty", (len(bind.params),),
                                (len(rec.snapshot),),
                                detail=f"record for task {rec.task_id}")
        for seg in bind.params.segments:
            diff = bind[seg.name] - rec.snapshot.view(seg.name)
            total = total + ad.sum_(rec.importance.view(seg.name) * diff * diff)
    return total * (lam / 2.0)


def fisher_diag(q, params: ParamVector, model: ProbModel, x_sets: Sequence,
                cfg: ScConfig, rng,
                draws: Optional[Sequence[np.ndarray]] = None) -> ParamVector:
    """Diagonal importance: mean squared SC-loss gradient over the sets."""
    if not x_sets:
        raise ValueError("fisher_diag: no observation sets")
    rng = as_generator(rng)
    acc = np.zeros(len(params))
    for k, x_set in enumerate(x_sets):
        with Tape() as tape:
            bind = ParamBinding(params, tape)
            loss = sc_loss(q, bind, model, [x_set], cfg, rng,
                           draws=None if draws is None else [draws[k]])
            grad = backward(tape, loss)
        if not np.all(np.isfinite(grad.values)):
            raise NonFiniteValue(f"fisher_diag: non-finite gradient for set {k}")
        acc += grad.values * grad.values
    acc /= len(x_sets)
    return ParamVector(acc, params.segments)


def composite_loss(regime: str, q, bind: ParamBinding, model: ProbModel,
                   current_sets: Sequence, buffer_sets: Sequence,
                   records: Sequence[EwcRecord], cfg: ScConfig, lam: float,
                   rng, draws=None, task_index: Optional[int] = None) -> Tensor:
    """Per-regime objective; see REGIMES for the valid regime names.

    Replay regimes take the plain union of current and buffer sets, so all
    sets are weighted equally; consolidation regimes add the quadratic
    penalty over every stored record. When `draws` is given it must align
    with the set list the regime actually uses.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime '{regime}' (have {REGIMES})")
    uses_buffer = regime in ("sc-er", "sc-er-ewc")
    uses_records = regime in ("sc-ewc", "sc-er-ewc")
    sets = list(current_sets)
    if uses_buffer:
        if not buffer_sets and task_index is not None and task_index > 1:
            warnings.warn(f"{regime}: empty replay buffer on task {task_index}; "
                          f"degrading to plain self-consistency", stacklevel=2)
        sets = sets + list(buffer_sets)
    loss = sc_loss(q, bind, model, sets, cfg, rng, draws=draws)
    if uses_records and records:
        loss = loss + ewc_penalty(bind, records, lam)
    return loss
