"""Dense rank-4 kernels with hand-written backward passes.

Tensors are plain numpy arrays laid out as (batch, height, width, channels).
Every kernel preserves the dtype of its input, so float32 arrays stay float32
for training and float64 arrays are used for gradient checks.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


def as_tensor(data, dtype=None) -> np.ndarray:
    """Validate and return a contiguous rank-4 array.

    Raises ValueError for the wrong rank, an empty axis or non-finite values.
    """
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ValueError(f"expected a rank-4 (B, H, W, C) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"tensor axes must all be >= 1, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


@dataclass(frozen=True)
class ConvKernel:
    weight: np.ndarray  # (kh, kw, cin, cout)
    bias: np.ndarray | None = None  # (cout,)

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError(f"kernel weight must be (kh, kw, cin, cout), got {self.weight.shape}")
        kh, kw = self.weight.shape[:2]
        if kh not in (1, 3) or kw not in (1, 3):
            raise ValueError(f"kernel size must be 1 or 3, got {kh}x{kw}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[3],):
            raise ValueError("bias length must equal cout")

    @property
    def cin(self) -> int:
        return self.weight.shape[2]

    @property
    def cout(self) -> int:
        return self.weight.shape[3]


@dataclass(frozen=True)
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


# ---------------------------------------------------------------------------
# convolution


def _padding(kernel_shape, pad: str) -> tuple[int, int]:
    kh, kw = kernel_shape[:2]
    if pad == "same":
        return (kh - 1) // 2, (kw - 1) // 2
    if pad == "none":
        return 0, 0
    raise ValueError(f"pad must be 'same' or 'none', got {pad!r}")


def _correlate(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of a padded (B, H, W, Cin) input with (kh, kw, Cin, Cout)."""
    kh, kw, cin, cout = w.shape
    if kh == 1 and kw == 1:
        return xp @ w[0, 0]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (B, Ho, Wo, Cin, kh, kw)
    return np.tensordot(win, w.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))


def conv2d(x: np.ndarray, k: ConvKernel, pad: str = "same") -> np.ndarray:
    """Stride-1 cross-correlation with optional zero "same" padding and bias."""
    if x.shape[3] != k.cin:
        raise ValueError(f"channel mismatch: input has {x.shape[3]}, kernel expects {k.cin}")
    ph, pw = _padding(k.weight.shape, pad)
    kh, kw = k.weight.shape[:2]
    if pad == "none" and (x.shape[1] < kh or x.shape[2] < kw):
        raise ValueError("input smaller than kernel with pad='none'")
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x
    y = _correlate(xp, k.weight.astype(x.dtype, copy=False))
    if k.bias is not None:
        y = y + k.bias.astype(x.dtype, copy=False)
    return y


def conv2d_backward(dy: np.ndarray, x: np.ndarray, k: ConvKernel, pad: str = "same"):
    """Return (dx, dweight, dbias) for ``conv2d(x, k, pad)``."""
    w = k.weight.astype(x.dtype, copy=False)
    kh, kw, cin, cout = w.shape
    ph, pw = _padding(w.shape, pad)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x

    if kh == 1 and kw == 1:
        dw = np.tensordot(xp, dy, axes=([0, 1, 2], [0, 1, 2]))[None, None]
        dxp = dy @ w[0, 0].T
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (B, Ho, Wo, Cin, kh, kw)
        dw = np.tensordot(win, dy, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        # full correlation of dy with the flipped, channel-transposed kernel
        dyp = np.pad(dy, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        dxp = _correlate(dyp, w[::-1, ::-1].transpose(0, 1, 3, 2))

    dx = dxp[:, ph:ph + x.shape[1], pw:pw + x.shape[2], :]
    db = dy.sum(axis=(0, 1, 2)) if k.bias is not None else None
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# pointwise and structural ops


def activate(x: np.ndarray, kind: ActivationKind = ActivationKind.RELU) -> np.ndarray:
    if ActivationKind(kind) is ActivationKind.IDENTITY:
        return x
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def activate_backward(dy: np.ndarray, x: np.ndarray, kind: ActivationKind = ActivationKind.RELU):
    # subgradient at 0 is 0
    if ActivationKind(kind) is ActivationKind.IDENTITY:
        return dy
    return np.where(x > 0, dy, 0).astype(dy.dtype, copy=False)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[:3] != b.shape[:3]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape}: (B, H, W) differ")
    return np.concatenate([a, b], axis=3)


def split_channels(dy: np.ndarray, ca: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward of :func:`concat_channels` where ``a`` had ``ca`` channels."""
    return np.ascontiguousarray(dy[..., :ca]), np.ascontiguousarray(dy[..., ca:])


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"cannot add {a.shape} and {b.shape}")
    return a + b


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def batchnorm(x: np.ndarray, s: BatchNormState, mode: str = "train"):
    """Per-channel batch normalization.

    Returns ``(y, new_state, cache)``. In infer mode the state is returned
    unchanged and the cache is None.
    """
    if x.shape[3] != s.gamma.shape[0]:
        raise ValueError(f"channel mismatch: input has {x.shape[3]}, state has {s.gamma.shape[0]}")
    n = x.shape[0] * x.shape[1] * x.shape[2]
    if n == 0:
        raise ValueError("batchnorm needs at least one element per channel")
    dt = x.dtype
    gamma = s.gamma.astype(dt, copy=False)
    beta = s.beta.astype(dt, copy=False)
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(s.running_var.astype(dt) + dt.type(s.eps))
        y = (x - s.running_mean.astype(dt)) * inv_std * gamma + beta
        return y.astype(dt, copy=False), s, None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    mean = x.mean(axis=(0, 1, 2))
    var = ((x - mean) ** 2).mean(axis=(0, 1, 2))  # biased
    inv_std = (1.0 / np.sqrt(var + dt.type(s.eps))).astype(dt)
    xhat = (x - mean) * inv_std
    y = xhat * gamma + beta
    m = s.momentum
    sdt = s.running_mean.dtype
    new_state = replace(
        s,
        running_mean=((1 - m) * s.running_mean + m * mean).astype(sdt),
        running_var=((1 - m) * s.running_var + m * var).astype(sdt),
    )
    return y, new_state, BatchNormCache(xhat=xhat, inv_std=inv_std, gamma=gamma)


def batchnorm_backward(dy: np.ndarray, cache: BatchNormCache):
    """Full train-mode gradient through the batch mean and variance."""
    n = dy.shape[0] * dy.shape[1] * dy.shape[2]
    dbeta = dy.sum(axis=(0, 1, 2))
    dgamma = (dy * cache.xhat).sum(axis=(0, 1, 2))
    dxhat = dy * cache.gamma
    dx = (cache.inv_std / n) * (
        n * dxhat - dxhat.sum(axis=(0, 1, 2)) - cache.xhat * (dxhat * cache.xhat).sum(axis=(0, 1, 2))
    )
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# resampling (no backward)


def _resize_axis(x: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    if out == n:
        return x
    dst = np.arange(out, dtype=np.float64)
    src = np.clip((dst + 0.5) * (n / out) - 0.5, 0, n - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    shape = [1] * x.ndim
    shape[axis] = out
    t = (src - i0).astype(x.dtype).reshape(shape)
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i1, axis=axis)
    # a + t*(b - a) keeps equal neighbours exact; the clip guards the last ulp
    y = a + t * (b - a)
    return np.clip(y, np.minimum(a, b), np.maximum(a, b))


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel bilinear resampling with edge clamping."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    return _resize_axis(_resize_axis(x, out_h, 1), out_w, 2)


def _pairwise_sum(a: np.ndarray, axis: int) -> np.ndarray:
    # fixed tree order over a power-of-two axis: exact for constant blocks
    while a.shape[axis] > 1:
        n = a.shape[axis]
        a = np.take(a, range(0, n, 2), axis=axis) + np.take(a, range(1, n, 2), axis=axis)
    return np.squeeze(a, axis=axis)


def area_downsample(x: np.ndarray, s: int) -> np.ndarray:
    """Mean of each non-overlapping s x s block, per channel."""
    if s not in (2, 4, 8):
        raise ValueError(f"scale must be 2, 4 or 8, got {s}")
    b, h, w, c = x.shape
    if h % s or w % s:
        raise ValueError(f"spatial size {h}x{w} is not divisible by scale {s}")
    blocks = x.reshape(b, h // s, s, w // s, s, c)
    total = _pairwise_sum(_pairwise_sum(blocks, 4), 2)
    return total / x.dtype.type(s * s)


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class TensorCheck:
    name: str
    max_rel: float
    max_abs: float
    checked: int
    excluded: int
    refined: int = 0  # compared at a reduced step after a kink crossing at h


@dataclass
class GradCheckReport:
    tol: float
    rows: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel(self) -> float:
        return max((r.max_rel for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel < self.tol

    def failures(self) -> list[TensorCheck]:
        return sorted((r for r in self.rows if r.max_rel >= self.tol), key=lambda r: -r.max_rel)


def grad_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    h: float = 1e-3,
    tol: float = 1e-4,
    *,
    pattern: Callable[[Mapping[str, np.ndarray]], np.ndarray] | None = None,
    relu_inputs: tuple[str, ...] = (),
    max_full: int = 200,
    subset: int = 64,
    seed: int = 0,
    refine: int = 4,
) -> GradCheckReport:
    """Compare analytic ``grads`` of scalar ``f`` with central differences.

    Tensors with more than ``max_full`` elements are checked on a seeded
    random subset of ``subset`` elements. An element is excluded when it sits
    on a ReLU kink: either the tensor is named in ``relu_inputs`` and
    ``|x| < 10 h``, or ``pattern`` (an activation sign pattern of the forward
    pass) differs between a perturbed evaluation and the base point. In the
    second case the step is first divided by 4 up to ``refine`` times, and the
    element is compared at the first step that crosses no kink; only elements
    that still cross one at ``h / 4**refine`` are excluded.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    base = f(work)
    if f(work) != base:
        raise RuntimeError("f is not deterministic: two baseline evaluations differ")
    base_pattern = pattern(work) if pattern is not None else None
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)

    for name in grads:
        theta = work[name]
        flat = theta.reshape(-1)
        g = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        if g.size != flat.size:
            raise ValueError(f"gradient for {name!r} has the wrong size")
        idx = np.arange(flat.size)
        if flat.size > max_full:
            idx = np.sort(rng.choice(flat.size, size=subset, replace=False))
        max_rel = max_abs = 0.0
        checked = excluded = refined = 0
        for i in idx:
            if name in relu_inputs and abs(flat[i]) < 10 * h:
                excluded += 1
                continue
            orig = flat[i]
            step = h
            for attempt in range(refine + 1):
                flat[i] = orig + step
                fp = f(work)
                kink = pattern is not None and not np.array_equal(pattern(work), base_pattern)
                flat[i] = orig - step
                fm = f(work)
                kink = kink or (pattern is not None and not np.array_equal(pattern(work), base_pattern))
                flat[i] = orig
                if not kink:
                    break
                step /= 4
            if kink:
                excluded += 1
                continue
            refined += attempt > 0
            num = (fp - fm) / (2 * step)
            err = abs(num - g[i])
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(num), abs(g[i]), 1e-8))
            checked += 1
        report.rows.append(TensorCheck(name, max_rel, max_abs, checked, excluded, refined))
    return report
