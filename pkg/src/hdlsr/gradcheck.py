"""Finite-difference battery over every differentiable piece of the network.

Each check builds seeded float64 inputs, reduces the block output to a scalar
(a fixed random projection, or the loss itself) and hands the analytic
gradients to :func:`hdlsr.tensor.grad_check`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .model import (
    ModelConfig,
    ModelParams,
    Tape,
    hdl_backward,
    hdl_forward,
    hdl_forward_train,
    init_params,
    residual_block_backward,
    residual_block_forward,
    spectral_spatial_backward,
    spectral_spatial_forward,
    spectral_unmixing_backward,
    spectral_unmixing_forward,
)
from .tensor import (
    BatchNormState,
    ConvKernel,
    GradCheckReport,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    grad_check,
)


@dataclass(frozen=True)
class BatterySizes:
    batch: int = 1
    height: int = 6
    width: int = 6
    bands: int = 4
    features: int = 5
    blocks: int = 2
    seed: int = 0


def _projection(rng, shape) -> np.ndarray:
    # unit-norm readout keeps the scalar O(1), so float64 roundoff in the
    # differences stays far below the 1e-8 relative-error floor
    r = rng.standard_normal(shape)
    return r / np.linalg.norm(r)


def _randomized_params(cfg: ModelConfig, rng, head_scale: float = 1.0) -> ModelParams:
    # Weights at 3x the init bound keep the fixed step h small next to the
    # parameter scale (batch-norm curvature otherwise dominates the O(h^2)
    # truncation error); non-zero biases and affine terms exercise every path.
    p = init_params(cfg, np.float64)
    changes = {}
    for name, arr in p.tensors.items():
        if name.endswith(".weight"):
            changes[name] = arr * (head_scale if name == "head.out.weight" else 3.0)
        elif name.endswith((".bias", ".beta")):
            changes[name] = rng.uniform(-0.1, 0.1, arr.shape)
        elif name.endswith(".gamma"):
            changes[name] = rng.uniform(0.5, 1.5, arr.shape)
    return p.updated(changes)


def check_conv(s: BatterySizes, k: int, h: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    rng = np.random.default_rng(s.seed)
    x = rng.standard_normal((s.batch, s.height, s.width, s.bands))
    theta = {
        "x": x,
        "weight": rng.standard_normal((k, k, s.bands, s.features)) * 0.5,
        "bias": rng.standard_normal(s.features),
    }
    proj = _projection(rng, (s.batch, s.height, s.width, s.features))

    def f(t):
        return float(np.sum(conv2d(t["x"], ConvKernel(t["weight"], t["bias"])) * proj))

    dx, dw, db = conv2d_backward(proj, x, ConvKernel(theta["weight"], theta["bias"]))
    return grad_check(f, theta, {"x": dx, "weight": dw, "bias": db}, h, tol)


def check_batchnorm(s: BatterySizes, h: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    rng = np.random.default_rng(s.seed + 1)
    c = s.features
    theta = {
        "x": rng.standard_normal((s.batch, s.height, s.width, c)) * 2 + 0.5,
        "gamma": rng.uniform(0.5, 1.5, c),
        "beta": rng.uniform(-0.5, 0.5, c),
    }
    proj = _projection(rng, theta["x"].shape)

    def state(t):
        return BatchNormState(t["gamma"], t["beta"], np.zeros(c), np.ones(c))

    def f(t):
        return float(np.sum(batchnorm(t["x"], state(t), "train")[0] * proj))

    _, _, cache = batchnorm(theta["x"], state(theta), "train")
    dx, dgamma, dbeta = batchnorm_backward(proj, cache)
    return grad_check(f, theta, {"x": dx, "gamma": dgamma, "beta": dbeta}, h, tol)


def _check_block(
    s: BatterySizes,
    prefixes: tuple[str, ...],
    in_channels: int,
    forward: Callable,
    backward: Callable,
    out_channels: int,
    h: float,
    tol: float,
    seed_offset: int,
) -> GradCheckReport:
    rng = np.random.default_rng(s.seed + seed_offset)
    cfg = ModelConfig(bands=s.bands, width=s.features, num_residual_blocks=s.blocks, seed=s.seed)
    base = _randomized_params(cfg, rng)
    names = [n for n in base.tensors if n.startswith(prefixes) and not n.endswith(("running_mean", "running_var"))]
    theta = {"x": rng.standard_normal((s.batch, s.height, s.width, in_channels))}
    theta.update({n: base[n] for n in names})
    proj = _projection(rng, (s.batch, s.height, s.width, out_channels))

    def run(t):
        p = base.updated({n: t[n] for n in names})
        tape = Tape(p)
        return forward(t["x"], p, tape), tape

    def f(t):
        return float(np.sum(run(t)[0] * proj))

    def pattern(t):
        return run(t)[1].relu_pattern()

    _, tape = run(theta)
    dx = backward(tape, proj)
    grads = {"x": dx, **{n: tape.grads[n] for n in names}}
    return grad_check(f, theta, grads, h, tol, pattern=pattern)


def check_unmixing(s: BatterySizes, h=1e-3, tol=1e-4) -> GradCheckReport:
    return _check_block(s, ("unmix.",), s.bands, spectral_unmixing_forward, spectral_unmixing_backward,
                        s.features, h, tol, 2)


def check_spectral_spatial(s: BatterySizes, h=1e-3, tol=1e-4) -> GradCheckReport:
    return _check_block(s, ("ss.",), s.bands, spectral_spatial_forward, spectral_spatial_backward,
                        s.features, h, tol, 3)


def check_residual_block(s: BatterySizes, h=1e-3, tol=1e-4) -> GradCheckReport:
    return _check_block(
        s, ("res0.",), s.features,
        lambda x, p, tape: residual_block_forward(x, p, 0, "train", tape),
        lambda tape, dz: residual_block_backward(tape, dz, 0),
        s.features, h, tol, 4,
    )


def check_model(s: BatterySizes, h=1e-3, tol=1e-4, weights=losses.LossWeights()) -> GradCheckReport:
    """total_loss(hdl_forward(x)) against every trainable tensor and the input."""
    rng = np.random.default_rng(s.seed + 5)
    cfg = ModelConfig(bands=s.bands, width=s.features, num_residual_blocks=s.blocks, seed=s.seed)
    base = _randomized_params(cfg, rng, head_scale=0.1)
    names = list(base.trainable())
    x = rng.uniform(0, 1, (s.batch, s.height, s.width, s.bands))
    target = np.clip(x + 0.1 * rng.standard_normal(x.shape), 0, 1)
    theta = {"x": x, **{n: base[n] for n in names}}

    def run(t):
        return hdl_forward_train(t["x"], base.updated({n: t[n] for n in names}))

    def f(t):
        return losses.total_loss(target, run(t)[0], weights)[0].total

    def pattern(t):
        return run(t)[1].relu_pattern()

    out, tape = run(theta)
    _, d_out = losses.total_loss(target, out, weights)
    grads, dx = hdl_backward(tape, d_out)
    return grad_check(f, theta, {"x": dx, **grads}, h, tol, pattern=pattern)


def check_loss(s: BatterySizes, which: str, h=1e-3, tol=1e-4) -> GradCheckReport:
    rng = np.random.default_rng(s.seed + 6)
    shape = (s.batch, s.height, s.width, s.bands)
    z_true = rng.uniform(0, 1, shape)
    z_pred = rng.uniform(0, 1, shape)
    fn = {
        "mse": losses.mse_loss,
        "spatial": losses.spatial_gradient_loss,
        "spectral": losses.spectral_gradient_loss,
        "total": lambda a, b: (lambda lv, g: (lv.total, g))(*losses.total_loss(a, b)),
    }[which]

    def f(t):
        return float(fn(z_true, t["z_pred"])[0])

    return grad_check(f, {"z_pred": z_pred}, {"z_pred": fn(z_true, z_pred)[1]}, h, tol)


def run_battery(s: BatterySizes = BatterySizes(), h: float = 1e-3, tol: float = 1e-4) -> dict[str, GradCheckReport]:
    """Every check in a fixed order, keyed by a short label."""
    return {
        "conv1x1": check_conv(s, 1, h, tol),
        "conv3x3": check_conv(s, 3, h, tol),
        "batchnorm": check_batchnorm(s, h, tol),
        "unmixing": check_unmixing(s, h, tol),
        "spectral_spatial": check_spectral_spatial(s, h, tol),
        "residual_block": check_residual_block(s, h, tol),
        "model": check_model(s, h, tol),
        "loss.mse": check_loss(s, "mse", h, tol),
        "loss.spatial": check_loss(s, "spatial", h, tol),
        "loss.spectral": check_loss(s, "spectral", h, tol),
        "loss.total": check_loss(s, "total", h, tol),
    }
