"""Probabilistic models with analytic priors, likelihoods, and simulators.

Every model works in unconstrained parameter coordinates (positive scales
enter as their logarithm), so prior densities include the transform
Jacobian and flow training never sees a constrained support. Observation
sets are dense matrices with one observation per row; the response is the
last column.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from .errors import ConfigError, NonFiniteValue
from .utils import as_generator

LOG_2PI = math.log(2.0 * math.pi)


def norm_logpdf(x, mu, sigma):
    z = (np.asarray(x) - mu) / sigma
    return -0.5 * z * z - np.log(sigma) - 0.5 * LOG_2PI


def _standardize(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    return (v - v.mean()) / (sd if sd > 1e-12 else 1.0)


def _noise(rng, size, df=None):
    """Unit-scale noise; Student-t with the given df when requested."""
    if df is None or not np.isfinite(df):
        return rng.standard_normal(size)
    return rng.standard_t(df, size=size)


class ProbModel:
    """Base class: analytic prior + likelihood + simulator."""

    name: str = "base"
    dim_theta: int
    dim_x: int
    param_names: list[str]
    default_n_obs: int
    has_analytic_posterior = False

    def prior_log_prob(self, theta) -> float:
        raise NotImplementedError

    def likelihood_log_prob(self, x_set, theta) -> float:
        raise NotImplementedError

    def simulate(self, rng, n_obs: int | None = None):
        """Draw theta from the prior, then one observation set given theta."""
        rng = as_generator(rng)
        theta = self.sample_prior(rng)
        return theta, self.simulate_given(theta, rng, n_obs)

    def sample_prior(self, rng) -> np.ndarray:
        raise NotImplementedError

    def simulate_given(self, theta, rng, n_obs=None, cov_scale=1.0, noise_df=None):
        raise NotImplementedError

    def constrain(self, theta) -> np.ndarray:
        """Map unconstrained coordinates to natural ones (identity by default)."""
        return np.asarray(theta, dtype=np.float64)

    def joint_log_prob(self, x_set, theta) -> float:
        return self.likelihood_log_prob(x_set, theta) + self.prior_log_prob(theta)


class ConjGaussModel(ProbModel):
    """Linear-Gaussian model with known noise; the posterior is analytic.

    theta = (alpha, beta_1..beta_p), all with independent N(0, 1) priors;
    y = alpha + x.beta + eps, eps ~ N(0, noise_scale^2). Rows are
    (x_1..x_p, y).
    """

    has_analytic_posterior = True

    def __init__(self, n_predictors: int = 1, noise_scale: float = 1.0,
                 n_obs: int = 50):
        self.p = int(n_predictors)
        self.noise_scale = float(noise_scale)
        self.dim_theta = 1 + self.p
        self.dim_x = self.p + 1
        self.default_n_obs = int(n_obs)
        self.param_names = ["alpha"] + [f"beta{i + 1}" for i in range(self.p)]
        self.name = f"conj-gauss-p{self.p}"

    def _design(self, x_set: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x_set = np.atleast_2d(np.asarray(x_set, dtype=np.float64))
        X = np.column_stack([np.ones(x_set.shape[0]), x_set[:, :self.p]])
        return X, x_set[:, self.p]

    def prior_log_prob(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return float(norm_logpdf(theta, 0.0, 1.0).sum())

    def likelihood_log_prob(self, x_set, theta) -> float:
        X, y = self._design(x_set)
        mu = X @ np.asarray(theta, dtype=np.float64)
        out = float(norm_logpdf(y, mu, self.noise_scale).sum())
        if not math.isfinite(out):
            raise NonFiniteValue("likelihood_log_prob: non-finite value")
        return out

    def sample_prior(self, rng) -> np.ndarray:
        return as_generator(rng).standard_normal(self.dim_theta)

    def simulate_given(self, theta, rng, n_obs=None, cov_scale=1.0, noise_df=None):
        rng = as_generator(rng)
        n = self.default_n_obs if n_obs is None else int(n_obs)
        theta = np.asarray(theta, dtype=np.float64)
        Z = cov_scale * rng.standard_normal((n, self.p))
        y = theta[0] + Z @ theta[1:] + self.noise_scale * _noise(rng, n, noise_df)
        return np.column_stack([Z, y])

    def analytic_posterior(self, x_set) -> tuple[np.ndarray, np.ndarray]:
        """Gaussian posterior (mean, cov); empty data returns the prior."""
        x_set = np.asarray(x_set, dtype=np.float64)
        if x_set.size == 0:
            return np.zeros(self.dim_theta), np.eye(self.dim_theta)
        X, y = self._design(x_set)
        s2 = self.noise_scale ** 2
        prec = np.eye(self.dim_theta) + X.T @ X / s2
        cov = np.linalg.inv(prec)
        mean = cov @ (X.T @ y / s2)
        return mean, cov

    def posterior_sample(self, x_set, n: int, rng) -> np.ndarray:
        mean, cov = self.analytic_posterior(x_set)
        chol = np.linalg.cholesky(cov)
        z = as_generator(rng).standard_normal((int(n), self.dim_theta))
        return mean + z @ chol.T


class LinRegModel(ProbModel):
    """Bayesian linear regression with unknown noise.

    theta = (alpha, beta_1..beta_p, log sigma). alpha and each beta have
    N(0, 1) priors; sigma has a HalfNormal(1) prior expressed on log sigma
    with its Jacobian. Rows are (x_1..x_p, y).
    """

    def __init__(self, n_predictors: int = 5, n_obs: int = 100):
        self.p = int(n_predictors)
        self.dim_theta = self.p + 2
        self.dim_x = self.p + 1
        self.default_n_obs = int(n_obs)
        self.param_names = (["alpha"] + [f"beta{i + 1}" for i in range(self.p)]
                            + ["log_sigma"])
        self.name = f"lin-reg-p{self.p}"

    def prior_log_prob(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        out = norm_logpdf(theta[:-1], 0.0, 1.0).sum()
        u = theta[-1]
        # HalfNormal(1) density of sigma = e^u times the Jacobian e^u
        out += 0.5 * math.log(2.0 / math.pi) - 0.5 * math.exp(2.0 * u) + u
        return float(out)

    def likelihood_log_prob(self, x_set, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        x_set = np.atleast_2d(np.asarray(x_set, dtype=np.float64))
        mu = theta[0] + x_set[:, :self.p] @ theta[1:self.p + 1]
        sigma = math.exp(theta[-1])
        out = float(norm_logpdf(x_set[:, self.p], mu, sigma).sum())
        if not math.isfinite(out):
            raise NonFiniteValue("likelihood_log_prob: non-finite value")
        return out

    def sample_prior(self, rng) -> np.ndarray:
        rng = as_generator(rng)
        coef = rng.standard_normal(self.p + 1)
        sigma = abs(rng.standard_normal())
        return np.append(coef, math.log(max(sigma, 1e-12)))

    def simulate_given(self, theta, rng, n_obs=None, cov_scale=1.0, noise_df=None):
        rng = as_generator(rng)
        n = self.default_n_obs if n_obs is None else int(n_obs)
        theta = np.asarray(theta, dtype=np.float64)
        Z = cov_scale * rng.standard_normal((n, self.p))
        sigma = math.exp(theta[-1])
        y = theta[0] + Z @ theta[1:self.p + 1] + sigma * _noise(rng, n, noise_df)
        return np.column_stack([Z, y])

    def constrain(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64).copy()
        theta[..., -1] = np.exp(theta[..., -1])
        return theta


class Ar1Model(ProbModel):
    """Order-1 autoregression with two exogenous covariates.

    theta = (alpha, beta, gamma, delta, log sigma) with independent normal
    priors; each row is (y_t, u_t, w_t, y_{t+1}) so the likelihood
    conditions on the first observation and factorizes over rows.
    """

    _PRIOR_MEAN = np.array([0.0, 0.0, 0.0, 0.0, -1.0])
    _PRIOR_SD = np.array([0.5, 0.2, 0.5, 0.5, 0.5])

    def __init__(self, series_len: int = 15):
        self.series_len = int(series_len)
        self.dim_theta = 5
        self.dim_x = 4
        self.default_n_obs = self.series_len
        self.param_names = ["alpha", "beta", "gamma", "delta", "log_sigma"]
        self.name = f"ar1-t{self.series_len}"

    def prior_log_prob(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return float(norm_logpdf(theta, self._PRIOR_MEAN, self._PRIOR_SD).sum())

    def likelihood_log_prob(self, x_set, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        x_set = np.atleast_2d(np.asarray(x_set, dtype=np.float64))
        mu = (theta[0] + theta[1] * x_set[:, 0] + theta[2] * x_set[:, 1]
              + theta[3] * x_set[:, 2])
        sigma = math.exp(theta[4])
        out = float(norm_logpdf(x_set[:, 3], mu, sigma).sum())
        if not math.isfinite(out):
            raise NonFiniteValue("likelihood_log_prob: non-finite value")
        return out

    def sample_prior(self, rng) -> np.ndarray:
        rng = as_generator(rng)
        return self._PRIOR_MEAN + self._PRIOR_SD * rng.standard_normal(5)

    def simulate_given(self, theta, rng, n_obs=None, cov_scale=1.0, noise_df=None):
        rng = as_generator(rng)
        n = self.default_n_obs if n_obs is None else int(n_obs)
        theta = np.asarray(theta, dtype=np.float64)
        # covariates follow standardized random walks, a rough stand-in for
        # slowly drifting macro indicators
        u = cov_scale * _standardize(np.cumsum(rng.standard_normal(n)))
        w = cov_scale * _standardize(np.cumsum(rng.standard_normal(n)))
        sigma = math.exp(theta[4])
        eps = _noise(rng, n, noise_df)
        y = np.empty(n + 1)
        y[0] = rng.standard_normal()
        for t in range(n):
            y[t + 1] = (theta[0] + theta[1] * y[t] + theta[2] * u[t]
                        + theta[3] * w[t] + sigma * eps[t])
        return np.column_stack([y[:-1], u, w, y[1:]])

    def constrain(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64).copy()
        theta[..., -1] = np.exp(theta[..., -1])
        return theta


def analytic_posterior(model: ProbModel, x_set) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian posterior of the conjugate model; errors for other models."""
    if not isinstance(model, ConjGaussModel):
        raise TypeError(f"analytic posterior requires the conjugate model, "
                        f"got {type(model).__name__}")
    return model.analytic_posterior(x_set)


MODEL_BUILDERS = {
    "conj-gauss": ConjGaussModel,
    "lin-reg": LinRegModel,
    "ar1": Ar1Model,
}


def make_model(model_id: str, options: dict | None = None) -> ProbModel:
    if model_id not in MODEL_BUILDERS:
        raise ConfigError("model", f"unknown model '{model_id}' "
                                   f"(have {sorted(MODEL_BUILDERS)})")
    try:
        return MODEL_BUILDERS[model_id](**(options or {}))
    except TypeError as exc:
        raise ConfigError("model_options", str(exc)) from None


def load_csv_task(path: str, response: str, standardize: bool = True):
    """Load one task from CSV: predictors then the response as last column.

    Returns (data, info) where info records column order and the applied
    per-column standardization so a run manifest can reproduce it.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(path, "empty CSV file") from None
        rows = list(reader)
    if response not in header:
        raise ConfigError(path, f"response column '{response}' not found "
                                f"(columns: {header})")
    predictors = [c for c in header if c != response]
    idx = [header.index(c) for c in predictors] + [header.index(response)]
    try:
        data = np.array([[float(r[i]) for i in idx] for r in rows], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise ConfigError(path, f"non-numeric or ragged row: {exc}") from None
    info = {"path": path, "predictors": predictors, "response": response,
            "n_rows": int(data.shape[0]), "standardized": bool(standardize)}
    if standardize and data.shape[0] > 1:
        means = data.mean(axis=0)
        sds = data.std(axis=0)
        sds[sds < 1e-12] = 1.0
        data = (data - means) / sds
        info["column_means"] = means.tolist()
        info["column_sds"] = sds.tolist()
    return data, info
