"""Hybrid super-resolution network: SSUF front end, residual blocks, output head.

Data flow for a pre-upsampled cube ``x`` with C bands and feature width F::

    unmix   : relu(W2 * relu(W1 * x))                      1x1, 1x1      -> F
    ss      : relu(Qf * [relu(Qs * x) || relu(Ql * x)])    3x3 | 1x1, 1x1 -> F
    ssuf    : relu(conv3x3([unmix || ss]))                               -> F
    res{i}  : relu(bn(R2 * relu(R1 * h)) + h)              3x3, 3x3      -> F
    head    : conv3x3(h) (+ x when global_residual)                      -> C

Parameters live in a flat ``{name: array}`` map. Convolutions contribute
``<layer>.weight``/``<layer>.bias``; batch norms contribute ``gamma``, ``beta``
and the non-trainable ``running_mean``/``running_var``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .tensor import (
    ActivationKind,
    BatchNormState,
    ConvKernel,
    activate,
    activate_backward,
    batchnorm,
    batchnorm_backward,
    concat_channels,
    conv2d,
    conv2d_backward,
    split_channels,
)


@dataclass(frozen=True)
class ModelConfig:
    bands: int
    width: int = 56
    num_residual_blocks: int = 3
    global_residual: bool = True
    activation: ActivationKind = ActivationKind.RELU
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationKind(self.activation))
        if self.bands < 1 or self.width < 1 or self.num_residual_blocks < 1:
            raise ValueError("bands, width and num_residual_blocks must all be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["activation"] = self.activation.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


def conv_layout(cfg: ModelConfig) -> dict[str, tuple[int, int, int, int]]:
    """Kernel shape (kh, kw, cin, cout) of every convolution, in canonical order."""
    c, f = cfg.bands, cfg.width
    layout = {
        "unmix.w1": (1, 1, c, f),
        "unmix.w2": (1, 1, f, f),
        "ss.spatial": (3, 3, c, f),
        "ss.spectral": (1, 1, c, f),
        "ss.fuse": (1, 1, 2 * f, f),
        "ssuf.conv": (3, 3, 2 * f, f),
    }
    for i in range(cfg.num_residual_blocks):
        layout[f"res{i}.conv1"] = (3, 3, f, f)
        layout[f"res{i}.conv2"] = (3, 3, f, f)
    layout["head.out"] = (3, 3, f, c)
    return layout


BN_FIELDS = ("gamma", "beta", "running_mean", "running_var")
BN_BUFFERS = ("running_mean", "running_var")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named tensor and its shape, in canonical (serialization) order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for name, shp in conv_layout(cfg).items():
        shapes[f"{name}.weight"] = shp
        shapes[f"{name}.bias"] = (shp[3],)
        if name.endswith(".conv2"):
            block = name.split(".")[0]
            for fld in BN_FIELDS:
                shapes[f"{block}.bn.{fld}"] = (cfg.width,)
    return shapes


def trainable_names(cfg: ModelConfig) -> list[str]:
    return [n for n in param_shapes(cfg) if not n.endswith(tuple(f".{b}" for b in BN_BUFFERS))]


def param_count(cfg: ModelConfig) -> int:
    """Trainable parameter count in closed form (running statistics excluded)."""
    c, f, n = cfg.bands, cfg.width, cfg.num_residual_blocks
    unmix = (c * f + f) + (f * f + f)
    ss = (9 * c * f + f) + (c * f + f) + (2 * f * f + f)
    ssuf = 9 * 2 * f * f + f
    res = n * (2 * (9 * f * f + f) + 2 * f)
    head = 9 * f * c + c
    return unmix + ss + ssuf + res + head


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"parameter names do not match config (missing={missing}, extra={extra})")
        for name, shp in expected.items():
            if self.tensors[name].shape != shp:
                raise ValueError(f"{name}: expected shape {shp}, got {self.tensors[name].shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(param_shapes(self.config))

    def conv(self, layer: str) -> ConvKernel:
        return ConvKernel(self.tensors[f"{layer}.weight"], self.tensors[f"{layer}.bias"])

    def bn(self, block: int) -> BatchNormState:
        p = f"res{block}.bn."
        return BatchNormState(*(self.tensors[p + fld] for fld in BN_FIELDS))

    @property
    def dtype(self):
        return self.tensors["head.out.weight"].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def updated(self, changes: Mapping[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.config, {**self.tensors, **changes})

    def trainable(self) -> dict[str, np.ndarray]:
        return {n: self.tensors[n] for n in trainable_names(self.config)}

    def count(self) -> int:
        return sum(self.tensors[n].size for n in trainable_names(self.config))


def init_params(cfg: ModelConfig, dtype=np.float32) -> ModelParams:
    """Fan-in uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in)), from PCG64(seed).

    Kernels are drawn in canonical layer order, each as float64 and then cast,
    so a given seed yields the same weights regardless of ``dtype`` rounding.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    tensors: dict[str, np.ndarray] = {}
    for name, shp in param_shapes(cfg).items():
        if name.endswith(".weight"):
            fan_in = shp[0] * shp[1] * shp[2]
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shp).astype(dtype)
        elif name.endswith((".gamma", ".running_var")):
            tensors[name] = np.ones(shp, dtype)
        else:
            tensors[name] = np.zeros(shp, dtype)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# forward / backward
#
# Every block takes an optional Tape. With a tape the forward records conv
# inputs and pre-activations, and the matching ``*_backward`` replays them in
# reverse, accumulating parameter gradients into ``tape.grads``.


@dataclass
class Tape:
    """Intermediate values recorded during a forward pass.

    ``bn_states`` carries updated running statistics (train mode); the caller
    decides whether to commit them. One tape feeds exactly one backward pass.
    """

    params: ModelParams
    x: np.ndarray | None = None
    inputs: dict[str, np.ndarray] = field(default_factory=dict)
    acts: dict[str, np.ndarray] = field(default_factory=dict)
    bn_caches: dict[int, object] = field(default_factory=dict)
    bn_states: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    consumed: bool = False

    def relu_pattern(self) -> np.ndarray:
        return np.concatenate([(v > 0).ravel() for v in self.acts.values()])

    def consume(self):
        if self.consumed:
            raise RuntimeError("tape already consumed; run the forward pass again")
        self.consumed = True


def _conv(x, p: ModelParams, name: str, tape: Tape | None):
    if tape is not None:
        tape.inputs[name] = x
    return conv2d(x, p.conv(name))


def _relu(pre, p: ModelParams, key: str, tape: Tape | None):
    if tape is not None:
        tape.acts[key] = pre
    return activate(pre, p.config.activation)


def _conv_back(dy, tape: Tape, name: str):
    dx, dw, db = conv2d_backward(dy, tape.inputs[name], tape.params.conv(name))
    tape.grads[f"{name}.weight"] = dw
    tape.grads[f"{name}.bias"] = db
    return dx


def _relu_back(dy, tape: Tape, key: str):
    return activate_backward(dy, tape.acts[key], tape.params.config.activation)


def spectral_unmixing_forward(x: np.ndarray, p: ModelParams, tape: Tape | None = None) -> np.ndarray:
    a = _relu(_conv(x, p, "unmix.w1", tape), p, "unmix.a1", tape)
    return _relu(_conv(a, p, "unmix.w2", tape), p, "unmix.a2", tape)


def spectral_unmixing_backward(tape: Tape, du: np.ndarray) -> np.ndarray:
    da = _conv_back(_relu_back(du, tape, "unmix.a2"), tape, "unmix.w2")
    return _conv_back(_relu_back(da, tape, "unmix.a1"), tape, "unmix.w1")


def spectral_spatial_forward(x: np.ndarray, p: ModelParams, tape: Tape | None = None) -> np.ndarray:
    spatial = _relu(_conv(x, p, "ss.spatial", tape), p, "ss.a_spatial", tape)
    spectral = _relu(_conv(x, p, "ss.spectral", tape), p, "ss.a_spectral", tape)
    return _relu(_conv(concat_channels(spatial, spectral), p, "ss.fuse", tape), p, "ss.a_fuse", tape)


def spectral_spatial_backward(tape: Tape, dy: np.ndarray) -> np.ndarray:
    dcat = _conv_back(_relu_back(dy, tape, "ss.a_fuse"), tape, "ss.fuse")
    dsp, dse = split_channels(dcat, tape.params.config.width)
    dx = _conv_back(_relu_back(dsp, tape, "ss.a_spatial"), tape, "ss.spatial")
    return dx + _conv_back(_relu_back(dse, tape, "ss.a_spectral"), tape, "ss.spectral")


def ssuf_forward(x: np.ndarray, p: ModelParams, tape: Tape | None = None) -> np.ndarray:
    merged = concat_channels(spectral_unmixing_forward(x, p, tape), spectral_spatial_forward(x, p, tape))
    return _relu(_conv(merged, p, "ssuf.conv", tape), p, "ssuf.a", tape)


def ssuf_backward(tape: Tape, dh: np.ndarray) -> np.ndarray:
    dcat = _conv_back(_relu_back(dh, tape, "ssuf.a"), tape, "ssuf.conv")
    du, dy = split_channels(dcat, tape.params.config.width)
    return spectral_unmixing_backward(tape, du) + spectral_spatial_backward(tape, dy)


def residual_block_forward(
    x: np.ndarray, p: ModelParams, i: int, mode: str = "infer", tape: Tape | None = None
) -> np.ndarray:
    if x.shape[3] != p.config.width:
        raise ValueError(f"residual block expects {p.config.width} channels, got {x.shape[3]}")
    if tape is not None and mode != "train":
        raise ValueError("recording a tape requires train mode")
    r = _relu(_conv(x, p, f"res{i}.conv1", tape), p, f"res{i}.a1", tape)
    r = _conv(r, p, f"res{i}.conv2", tape)
    r, state, cache = batchnorm(r, p.bn(i), mode)
    if tape is not None:
        tape.bn_caches[i] = cache
        tape.bn_states[f"res{i}.bn.running_mean"] = state.running_mean
        tape.bn_states[f"res{i}.bn.running_var"] = state.running_var
    return _relu(r + x, p, f"res{i}.a2", tape)


def residual_block_backward(tape: Tape, dz: np.ndarray, i: int) -> np.ndarray:
    ds = _relu_back(dz, tape, f"res{i}.a2")
    dbn, dgamma, dbeta = batchnorm_backward(ds, tape.bn_caches[i])
    tape.grads[f"res{i}.bn.gamma"] = dgamma
    tape.grads[f"res{i}.bn.beta"] = dbeta
    dr = _conv_back(dbn, tape, f"res{i}.conv2")
    dr = _conv_back(_relu_back(dr, tape, f"res{i}.a1"), tape, f"res{i}.conv1")
    return ds + dr


def hdl_forward(x: np.ndarray, p: ModelParams, mode: str = "infer", tape: Tape | None = None) -> np.ndarray:
    """Network output at the resolution of the pre-upsampled input ``x``."""
    if x.ndim != 4 or x.shape[3] != p.config.bands:
        raise ValueError(f"expected (B, H, W, {p.config.bands}) input, got {x.shape}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if tape is not None:
        tape.x = x
    h = ssuf_forward(x, p, tape)
    for i in range(p.config.num_residual_blocks):
        h = residual_block_forward(h, p, i, mode, tape)
    out = _conv(h, p, "head.out", tape)
    return out + x if p.config.global_residual else out


def hdl_forward_train(x: np.ndarray, p: ModelParams) -> tuple[np.ndarray, Tape]:
    tape = Tape(p)
    return hdl_forward(x, p, "train", tape), tape


def hdl_backward(tape: Tape, d_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse pass over a train-mode tape.

    Returns ``(grads, dx)``; ``grads`` has one array per trainable parameter,
    in canonical order.
    """
    if tape.x is None:
        raise RuntimeError("tape holds no forward pass of the full network")
    if d_out.shape != tape.x.shape:
        raise ValueError(f"d_out shape {d_out.shape} does not match output {tape.x.shape}")
    tape.consume()
    cfg = tape.params.config
    dh = _conv_back(d_out, tape, "head.out")
    for i in reversed(range(cfg.num_residual_blocks)):
        dh = residual_block_backward(tape, dh, i)
    dx = ssuf_backward(tape, dh)
    if cfg.global_residual:
        dx = dx + d_out
    return {n: tape.grads[n] for n in trainable_names(cfg)}, dx
