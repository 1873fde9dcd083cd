"""Conditional affine-coupling flow and permutation-invariant summary network.

The flow transforms parameters to a standard-normal latent space through
alternating binary masks, conditioner MLPs fed the masked input plus a
conditioning vector, and a fixed per-layer permutation. Scales go through a
shifted softplus with a 1e-3 floor so every layer is invertible for any
parameter values, and the final conditioner layer is zero-initialized so a
fresh flow evaluates exactly as a standard normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFiniteValue
from .params import ParamBinding, ParamVector
from .utils import as_generator, child_rng

SCALE_FLOOR = 1e-3
# shift such that a zero conditioner output yields scale exactly 1
_SCALE_SHIFT = math.log(math.expm1(1.0 - SCALE_FLOOR))
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FlowConfig:
    dim_theta: int
    dim_cond: int
    n_layers: int = 6
    hidden: int = 64


@dataclass(frozen=True)
class SummaryConfig:
    dim_x: int
    dim_summary: int = 16
    hidden: int = 64


class CouplingFlow:
    """Invertible conditional density q(theta | cond) with affine couplings."""

    def __init__(self, cfg: FlowConfig, prefix: str = "flow", perm_seed: int = 101):
        if cfg.dim_theta < 2:
            raise ValueError("coupling flows need dim_theta >= 2")
        self.cfg = cfg
        self.prefix = prefix
        d = cfg.dim_theta
        self.perms = [child_rng(perm_seed, i).permutation(d) for i in range(cfg.n_layers)]
        self.inv_perms = [np.argsort(p) for p in self.perms]
        # masks alternate per ORIGINAL coordinate, tracked through the composed
        # permutation; otherwise a permutation can keep handing the same
        # coordinate to the active slot and leave others untransformed
        self.masks = []
        composed = np.arange(d)
        for i in range(cfg.n_layers):
            self.masks.append(((i + composed) % 2 == 0).astype(np.float64))
            composed = composed[self.perms[i]]

    def segment_shapes(self) -> list[tuple[str, tuple]]:
        d, c, h = self.cfg.dim_theta, self.cfg.dim_cond, self.cfg.hidden
        shapes = []
        for i in range(self.cfg.n_layers):
            p = f"{self.prefix}.l{i}"
            shapes += [(f"{p}.w1", (d + c, h)), (f"{p}.b1", (h,)),
                       (f"{p}.w2", (h, h)), (f"{p}.b2", (h,)),
                       (f"{p}.w3", (h, 2 * d)), (f"{p}.b3", (2 * d,))]
        return shapes

    def init_arrays(self, rng) -> list[tuple[str, np.ndarray]]:
        """Seeded initialization; the last conditioner layer starts at zero."""
        rng = as_generator(rng)
        arrays = []
        for name, shape in self.segment_shapes():
            kind = name.rsplit(".", 1)[1]
            if kind in ("w1", "w2"):
                arrays.append((name, rng.standard_normal(shape) / math.sqrt(shape[0])))
            else:
                arrays.append((name, np.zeros(shape)))
        return arrays

    def init_params(self, rng) -> ParamVector:
        return ParamVector.build(self.init_arrays(rng))

    def _conditioner(self, bind: ParamBinding, i: int, x_masked: Tensor,
                     cond: Tensor) -> tuple[Tensor, Tensor]:
        p = f"{self.prefix}.l{i}"
        inp = ad.concat([x_masked, cond], axis=1)
        h = ad.tanh(ad.matmul(inp, bind[f"{p}.w1"]) + bind[f"{p}.b1"])
        h = ad.tanh(ad.matmul(h, bind[f"{p}.w2"]) + bind[f"{p}.b2"])
        raw = ad.matmul(h, bind[f"{p}.w3"]) + bind[f"{p}.b3"]
        d = self.cfg.dim_theta
        s_raw = ad.narrow(raw, 1, 0, d)
        shift = ad.narrow(raw, 1, d, d)
        scale = ad.softplus(s_raw + _SCALE_SHIFT) + SCALE_FLOOR
        return scale, shift

    def log_prob(self, bind: ParamBinding, theta, cond: Tensor) -> Tensor:
        """Per-row log density, shape [B]; theta rows are treated as constants."""
        x = theta if isinstance(theta, Tensor) else ad.constant(np.atleast_2d(theta))
        batch = x.values.shape[0]
        if cond.values.shape[0] == 1 and batch > 1:
            cond = ad.broadcast_to(cond, (batch, cond.values.shape[1]))
        d = self.cfg.dim_theta
        logdet = None
        for i in range(self.cfg.n_layers):
            mask = self.masks[i]
            x_masked = x * mask
            scale, shift = self._conditioner(bind, i, x_masked, cond)
            y = x_masked + (1.0 - mask) * (x * scale + shift)
            ld = ad.sum_((1.0 - mask) * ad.log(scale), axis=1)
            logdet = ld if logdet is None else logdet + ld
            x = ad.permute_cols(y, self.perms[i])
            if not np.all(np.isfinite(x.values)):
                raise NonFiniteValue(f"flow forward produced non-finite values at layer {i}")
        base = ad.sum_(x * x, axis=1) * (-0.5) + (-0.5 * d * LOG_2PI)
        return base + logdet

    # ---- plain-numpy twins used by the sampling path and consistency tests

    def _conditioner_np(self, params: ParamVector, i: int, x_masked: np.ndarray,
                        cond: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = f"{self.prefix}.l{i}"
        inp = np.concatenate([x_masked, cond], axis=1)
        h = np.tanh(inp @ params.view(f"{p}.w1") + params.view(f"{p}.b1"))
        h = np.tanh(h @ params.view(f"{p}.w2") + params.view(f"{p}.b2"))
        raw = h @ params.view(f"{p}.w3") + params.view(f"{p}.b3")
        d = self.cfg.dim_theta
        scale = np.logaddexp(0.0, raw[:, :d] + _SCALE_SHIFT) + SCALE_FLOOR
        return scale, raw[:, d:]

    def forward_np(self, params: ParamVector, theta: np.ndarray,
                   cond: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """theta -> latent z with the summed log |det Jacobian|."""
        x = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        cond = np.broadcast_to(np.atleast_2d(cond), (x.shape[0], self.cfg.dim_cond))
        logdet = np.zeros(x.shape[0])
        for i in range(self.cfg.n_layers):
            mask = self.masks[i]
            scale, shift = self._conditioner_np(params, i, x * mask, cond)
            y = mask * x + (1.0 - mask) * (x * scale + shift)
            logdet += ((1.0 - mask) * np.log(scale)).sum(axis=1)
            x = y[:, self.perms[i]]
        return x, logdet

    def inverse_np(self, params: ParamVector, z: np.ndarray,
                   cond: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(z, dtype=np.float64))
        cond = np.broadcast_to(np.atleast_2d(cond), (x.shape[0], self.cfg.dim_cond))
        for i in reversed(range(self.cfg.n_layers)):
            y = x[:, self.inv_perms[i]]
            mask = self.masks[i]
            scale, shift = self._conditioner_np(params, i, y * mask, cond)
            x = mask * y + (1.0 - mask) * (y - shift) / scale
        return x

    def log_prob_values(self, params: ParamVector, theta, cond) -> np.ndarray:
        z, logdet = self.forward_np(params, theta, cond)
        return -0.5 * (z * z).sum(axis=1) - 0.5 * self.cfg.dim_theta * LOG_2PI + logdet

    def sample(self, params: ParamVector, cond, n: int, rng) -> np.ndarray:
        """Draw n rows by inverting the flow on standard-normal latents."""
        rng = as_generator(rng)
        z = rng.standard_normal((n, self.cfg.dim_theta))
        return self.inverse_np(params, z, np.atleast_2d(cond))


class SummaryNet:
    """DeepSet-style encoder: per-row MLP, mean pooling, linear projection."""

    def __init__(self, cfg: SummaryConfig, prefix: str = "summary"):
        self.cfg = cfg
        self.prefix = prefix

    def segment_shapes(self) -> list[tuple[str, tuple]]:
        dx, s, h = self.cfg.dim_x, self.cfg.dim_summary, self.cfg.hidden
        p = self.prefix
        return [(f"{p}.enc1.w", (dx, h)), (f"{p}.enc1.b", (h,)),
                (f"{p}.enc2.w", (h, h)), (f"{p}.enc2.b", (h,)),
                (f"{p}.proj.w", (h, s)), (f"{p}.proj.b", (s,))]

    def init_arrays(self, rng) -> list[tuple[str, np.ndarray]]:
        rng = as_generator(rng)
        arrays = []
        for name, shape in self.segment_shapes():
            if name.endswith(".w"):
                arrays.append((name, rng.standard_normal(shape) / math.sqrt(shape[0])))
            else:
                arrays.append((name, np.zeros(shape)))
        return arrays

    def init_params(self, rng) -> ParamVector:
        return ParamVector.build(self.init_arrays(rng))

    def summarize(self, bind: ParamBinding, x) -> Tensor:
        """Embed one set [N, dx] or a batch [B, N, dx]; output rows [B, s]."""
        arr = np.asarray(x, dtype=np.float64)
        if np.isnan(arr).any():
            raise NonFiniteValue("summarize: NaN in observations")
        if arr.ndim == 2:
            arr = arr[None, :, :]
        b, n, dx = arr.shape
        p = self.prefix
        flat = ad.constant(arr.reshape(b * n, dx))
        h = ad.tanh(ad.matmul(flat, bind[f"{p}.enc1.w"]) + bind[f"{p}.enc1.b"])
        h = ad.tanh(ad.matmul(h, bind[f"{p}.enc2.w"]) + bind[f"{p}.enc2.b"])
        pooled = ad.mean(ad.reshape(h, (b, n, self.cfg.hidden)), axis=1)
        return ad.matmul(pooled, bind[f"{p}.proj.w"]) + bind[f"{p}.proj.b"]

    def summarize_np(self, params: ParamVector, x) -> np.ndarray:
        """Plain-numpy twin for the sampling path; returns [s] for one set."""
        arr = np.asarray(x, dtype=np.float64)
        if np.isnan(arr).any():
            raise NonFiniteValue("summarize: NaN in observations")
        p = self.prefix
        h = np.tanh(arr @ params.view(f"{p}.enc1.w") + params.view(f"{p}.enc1.b"))
        h = np.tanh(h @ params.view(f"{p}.enc2.w") + params.view(f"{p}.enc2.b"))
        return h.mean(axis=0) @ params.view(f"{p}.proj.w") + params.view(f"{p}.proj.b")


class PosteriorNet:
    """Flow conditioned on a learned set summary: q(theta | summary(x))."""

    def __init__(self, dim_theta: int, dim_x: int, dim_summary: int = 16,
                 flow_layers: int = 6, flow_hidden: int = 64,
                 summary_hidden: int = 64, perm_seed: int = 101):
        self.summary = SummaryNet(SummaryConfig(dim_x, dim_summary, summary_hidden))
        self.flow = CouplingFlow(
            FlowConfig(dim_theta, dim_summary, flow_layers, flow_hidden),
            perm_seed=perm_seed)
        self.dim_theta = dim_theta
        self.dim_x = dim_x

    def init_params(self, rng) -> ParamVector:
        rng = as_generator(rng)
        return ParamVector.build(self.summary.init_arrays(rng) + self.flow.init_arrays(rng))

    def log_prob_batch(self, bind: ParamBinding, thetas, sets) -> Tensor:
        """log q(theta_b | x_b) for aligned batches; shape [B]."""
        cond = self.summary.summarize(bind, sets)
        return self.flow.log_prob(bind, np.atleast_2d(thetas), cond)

    def log_prob_set(self, bind: ParamBinding, thetas, x_set) -> Tensor:
        """log q(theta_l | x) for many draws against one set; shape [L]."""
        cond = self.summary.summarize(bind, x_set)
        return self.flow.log_prob(bind, np.atleast_2d(thetas), cond)

    def sample(self, params: ParamVector, x_set, n: int, rng) -> np.ndarray:
        cond = self.summary.summarize_np(params, x_set)
        return self.flow.sample(params, cond, n, rng)

    def log_prob_values(self, params: ParamVector, thetas, x_set) -> np.ndarray:
        cond = self.summary.summarize_np(params, x_set)
        return self.flow.log_prob_values(params, thetas, cond)

    def posterior_mean(self, params: ParamVector, x_set, n: int, rng) -> np.ndarray:
        return self.sample(params, x_set, n, rng).mean(axis=0)


# spec-level operation aliases -------------------------------------------------

def summarize(net: SummaryNet, params: ParamVector, x) -> np.ndarray:
    return net.summarize_np(params, x)


def flow_log_prob(flow: CouplingFlow, params: ParamVector, theta, cond) -> np.ndarray:
    out = flow.log_prob_values(params, theta, cond)
    if not np.all(np.isfinite(out)):
        raise NonFiniteValue("flow_log_prob: non-finite log density")
    return out


def flow_sample(flow: CouplingFlow, params: ParamVector, cond, n: int, rng) -> np.ndarray:
    return flow.sample(params, cond, n, rng)


def init_flow(flow: CouplingFlow, rng) -> ParamVector:
    return flow.init_params(rng)
