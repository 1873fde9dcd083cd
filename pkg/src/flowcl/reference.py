"""Gold-standard posteriors and evaluation metrics.

Random-walk Metropolis provides non-amortized reference samples for models
without an analytic posterior; kernel MMD, the MMD ratio against the
simulation-only baseline, and per-parameter moment biases quantify how far
any sampler sits from the reference.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .errors import SamplerError
from .models import ProbModel
from .utils import array_hash, as_generator, stable_hash

log = logging.getLogger(__name__)

_TARGET_ACCEPT = 0.234


@dataclass
class PosteriorSamples:
    """Sample matrix [S, dim] tagged with how it was produced."""

    samples: np.ndarray
    provenance: str  # flow | mcmc | analytic

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.shape[0] < 2:
            raise ValueError("need at least 2 posterior samples")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("posterior samples must be finite")
        if self.provenance not in ("flow", "mcmc", "analytic"):
            raise ValueError(f"unknown provenance '{self.provenance}'")


def rwm_sample(model: ProbModel, x_set, n_samples: int = 4000,
               warmup: int = 1000, step_scale: float = 0.5, rng=0,
               thin: int = 1) -> PosteriorSamples:
    """Random-walk Metropolis in unconstrained coordinates.

    Isotropic Gaussian proposals; the step scale adapts every 50 warmup
    steps toward the 0.234 acceptance target and is frozen afterwards.
    Raises SamplerError if post-warmup acceptance collapses below 1%.
    """
    rng = as_generator(rng)
    x_set = np.asarray(x_set, dtype=np.float64)
    dim = model.dim_theta
    theta = np.zeros(dim)
    logp = model.joint_log_prob(x_set, theta)
    scale = float(step_scale)
    draws = np.empty((n_samples, dim))
    accepted_post = 0
    window_accepts = 0
    kept = 0
    total = warmup + n_samples * thin
    for it in range(total):
        prop = theta + scale * rng.standard_normal(dim)
        logp_prop = model.joint_log_prob(x_set, prop)
        if np.log(rng.uniform()) < logp_prop - logp:
            theta, logp = prop, logp_prop
            window_accepts += 1
            if it >= warmup:
                accepted_post += 1
        if it < warmup and (it + 1) % 50 == 0:
            rate = window_accepts / 50.0
            scale *= float(np.exp(0.66 * (rate - _TARGET_ACCEPT)))
            window_accepts = 0
        if it >= warmup and (it - warmup) % thin == 0:
            draws[kept] = theta
            kept += 1
    post_rate = accepted_post / max(n_samples * thin, 1)
    if post_rate < 0.01:
        raise SamplerError(f"acceptance rate {post_rate:.4f} after warmup; "
                           f"try a smaller step_scale than {step_scale}")
    return PosteriorSamples(draws[:kept], "mcmc")


def median_bandwidth(pooled: np.ndarray) -> float:
    """Median pairwise Euclidean distance of the pooled sample."""
    d2 = _sq_dists(pooled, pooled)
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.sqrt(np.median(d2[iu])))
    return med if med > 1e-12 else 1.0


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    d2 = aa + bb - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def mmd2(a, b, bandwidth="median") -> float:
    """Unbiased U-statistic estimate of squared MMD with a Gaussian kernel.

    The bandwidth defaults to the median heuristic on the pooled sample,
    computed once per call.
    """
    a = _as_samples(a)
    b = _as_samples(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("mmd2 needs at least 2 samples per set")
    if bandwidth == "median":
        bw = median_bandwidth(np.vstack([a, b]))
    else:
        bw = float(bandwidth)
    m, n = a.shape[0], b.shape[0]
    gamma = 0.5 / (bw * bw)
    kaa = np.exp(-gamma * _sq_dists(a, a))
    kbb = np.exp(-gamma * _sq_dists(b, b))
    kab = np.exp(-gamma * _sq_dists(a, b))
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def mmd(a, b, bandwidth="median") -> float:
    """Reported MMD: sqrt of the squared estimate clamped at zero."""
    return float(np.sqrt(max(mmd2(a, b, bandwidth), 0.0)))


def mmd_ratio(method_samples, sb_samples, reference_samples,
              bandwidth="median") -> float:
    """MMD(method, reference) / MMD(baseline, reference), floor 1e-12."""
    num = mmd(method_samples, reference_samples, bandwidth)
    den = mmd(sb_samples, reference_samples, bandwidth)
    if den < 1e-12:
        log.warning("mmd_ratio: baseline MMD %.3e floored at 1e-12", den)
        den = 1e-12
    return num / den


def bias_report(method_samples, reference_samples):
    """Per-parameter (mean bias, sd bias), both method minus reference."""
    a = _as_samples(method_samples)
    b = _as_samples(reference_samples)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    mean_bias = a.mean(axis=0) - b.mean(axis=0)
    std_bias = a.std(axis=0, ddof=1) - b.std(axis=0, ddof=1)
    return mean_bias, std_bias


def _as_samples(s) -> np.ndarray:
    if isinstance(s, PosteriorSamples):
        return s.samples
    return np.atleast_2d(np.asarray(s, dtype=np.float64))


def cached_reference(model: ProbModel, x_set, sampler_cfg: dict,
                     cache_dir: str | None, seed: int) -> PosteriorSamples:
    """MCMC reference with an on-disk cache keyed by model, data, and config."""
    x_set = np.asarray(x_set, dtype=np.float64)
    if cache_dir:
        key = stable_hash({"model": model.name, "data": array_hash(x_set),
                           "sampler": sampler_cfg, "seed": seed})
        path = os.path.join(cache_dir, f"ref-{key}.npy")
        if os.path.exists(path):
            return PosteriorSamples(np.load(path), "mcmc")
    result = rwm_sample(model, x_set,
                        n_samples=sampler_cfg.get("n_samples", 4000),
                        warmup=sampler_cfg.get("warmup", 1000),
                        step_scale=sampler_cfg.get("step_scale", 0.5),
                        rng=seed,
                        thin=sampler_cfg.get("thin", 1))
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        tmp = path + ".tmp.npy"
        np.save(tmp, result.samples)
        os.replace(tmp, path)
    return result
