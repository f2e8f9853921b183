"""Hyperspectral cube I/O, degradation pipeline and synthetic data.

Cubes are held in memory as (H, W, C) float32 arrays, band-interleaved by
pixel. ``Cube.tensor`` gives the (1, H, W, C) view the network consumes.
"""
from __future__ import annotations

import json
import math
import os
import re
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import area_downsample, bilinear_resize

HSC_MAGIC = b"HSC1"


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


@dataclass(frozen=True)
class CubeMeta:
    height: int
    width: int
    bands: int
    normalized: bool = False
    norm_scale: float = 1.0
    source: str = ""


@dataclass(frozen=True)
class Cube:
    data: np.ndarray
    meta: CubeMeta

    def __post_init__(self):
        d = self.data
        if d.ndim != 3:
            raise ValueError(f"cube data must be (H, W, C), got {d.shape}")
        if d.shape != (self.meta.height, self.meta.width, self.meta.bands):
            raise ValueError(f"cube data {d.shape} disagrees with metadata")
        if not np.all(np.isfinite(d)):
            raise ValueError("cube contains non-finite values")
        if self.meta.normalized and (self.meta.norm_scale <= 0 or d.min() < 0 or d.max() > 1):
            raise ValueError("normalized cube must lie in [0, 1] with positive norm_scale")

    @classmethod
    def from_array(cls, data, source: str = "", normalized: bool = False, norm_scale: float = 1.0) -> "Cube":
        arr = np.ascontiguousarray(data, dtype=np.float32)
        h, w, c = arr.shape
        return cls(arr, CubeMeta(h, w, c, normalized, float(norm_scale), source))

    @property
    def tensor(self) -> np.ndarray:
        return self.data[None]


# ---------------------------------------------------------------------------
# native HSC1 format


def write_hsc(path, cube: Cube) -> None:
    header = {
        "height": cube.meta.height,
        "width": cube.meta.width,
        "bands": cube.meta.bands,
        "dtype": "f32",
        "layout": "bip",
        "normalized": cube.meta.normalized,
        "norm_scale": cube.meta.norm_scale,
        "source": cube.meta.source,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    _atomic_write(path, HSC_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload)


def read_hsc(path) -> Cube:
    raw = Path(path).read_bytes()
    if raw[:4] != HSC_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {HSC_MAGIC!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("dtype") != "f32":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if header.get("layout") != "bip":
        raise FormatError(f"{path}: unsupported layout {header.get('layout')!r}")
    h, w, c = header["height"], header["width"], header["bands"]
    payload = raw[8 + hlen:]
    need = h * w * c * 4
    if len(payload) < need:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    if len(payload) > need:
        raise FormatError(f"{path}: payload longer than header dimensions")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)
    meta = CubeMeta(h, w, c, bool(header["normalized"]), float(header["norm_scale"]), header.get("source", ""))
    return Cube(data, meta)


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# ENVI import

_ENVI_DTYPES = {4: "<f4", 12: "<u2", 2: "<i2"}


def read_envi_header(path) -> dict[str, str]:
    text = Path(path).read_text(encoding="utf-8", errors="replace")
    # collapse brace-delimited multi-line values
    text = re.sub(r"\{[^}]*\}", lambda m: m.group(0).replace("\n", " "), text)
    out = {}
    for line in text.splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            out[key.strip().lower()] = value.strip()
    return out


def import_envi(header_path, data_path) -> Cube:
    """Read an ENVI cube (float32 / uint16 / int16, bsq/bil/bip, little-endian)."""
    hdr = read_envi_header(header_path)
    try:
        samples, lines, bands = (int(hdr[k]) for k in ("samples", "lines", "bands"))
        dtype_code = int(hdr["data type"])
        interleave = hdr.get("interleave", "bsq").lower()
        byte_order = int(hdr.get("byte order", "0"))
        offset = int(hdr.get("header offset", "0"))
    except KeyError as exc:
        raise FormatError(f"{header_path}: missing header field {exc}") from None
    if dtype_code not in _ENVI_DTYPES:
        raise FormatError(f"unsupported ENVI data type {dtype_code}")
    if interleave not in ("bsq", "bil", "bip"):
        raise FormatError(f"unsupported ENVI interleave {interleave!r}")
    if byte_order != 0:
        raise FormatError(f"unsupported ENVI byte order {byte_order} (only little-endian)")
    dt = np.dtype(_ENVI_DTYPES[dtype_code])
    raw = Path(data_path).read_bytes()[offset:]
    need = samples * lines * bands * dt.itemsize
    if len(raw) != need:
        raise FormatError(f"size mismatch: header implies {need} bytes, file has {len(raw)}")
    flat = np.frombuffer(raw, dtype=dt).astype(np.float32)
    if interleave == "bsq":
        data = flat.reshape(bands, lines, samples).transpose(1, 2, 0)
    elif interleave == "bil":
        data = flat.reshape(lines, bands, samples).transpose(0, 2, 1)
    else:
        data = flat.reshape(lines, samples, bands)
    return Cube.from_array(data, source=str(data_path))


# ---------------------------------------------------------------------------
# preprocessing


ENVI_DATA_SUFFIXES = ("", ".raw", ".img", ".dat", ".bsq")


def load_cube(path) -> Cube:
    """Read an HSC1 cube, or an ENVI cube given its ``.hdr`` (data file found next to it)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if path.suffix.lower() == ".hdr":
        for cand in (path.with_suffix(s) for s in ENVI_DATA_SUFFIXES):
            if cand.exists() and cand != path:
                return import_envi(path, cand)
        raise FileNotFoundError(f"no data file found next to ENVI header {path}")
    return read_hsc(path)


def normalize_cube(cube: Cube) -> Cube:
    """Divide by the global maximum so the cube spans [.., 1]."""
    if cube.meta.normalized:
        raise ValueError("cube is already normalized")
    peak = float(cube.data.max())
    if peak <= 0:
        raise ValueError("cannot normalize a cube whose maximum is <= 0")
    data = cube.data / np.float32(peak)
    if data.min() < 0:
        raise ValueError("cube has negative values; cannot map to [0, 1] by scaling")
    return Cube(data, replace(cube.meta, normalized=True, norm_scale=peak))


def center_crop(cube: Cube, size: int) -> Cube:
    h, w = cube.meta.height, cube.meta.width
    if size > min(h, w) or size < 1:
        raise ValueError(f"crop size {size} does not fit a {h}x{w} cube")
    r, c = (h - size) // 2, (w - size) // 2
    data = np.ascontiguousarray(cube.data[r:r + size, c:c + size])
    return Cube(data, replace(cube.meta, height=size, width=size))


def extract_patches(cube: Cube, size: int) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Non-overlapping P x P tiles in row-major order; remainders are dropped."""
    h, w = cube.meta.height, cube.meta.width
    if size > min(h, w) or size < 1:
        raise ValueError(f"patch size {size} does not fit a {h}x{w} cube")
    out = []
    for i in range(h // size):
        for j in range(w // size):
            r, c = i * size, j * size
            out.append((np.ascontiguousarray(cube.data[r:r + size, c:c + size]), (r, c)))
    return out


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Area downsample by ``scale``; (H, W, C) in, (H/s, W/s, C) out."""
    return area_downsample(hr[None], scale)[0]


def upsample(lr: np.ndarray, height: int, width: int) -> np.ndarray:
    return bilinear_resize(lr[None], height, width)[0]


@dataclass
class SamplePair:
    hr: np.ndarray
    lr_up: np.ndarray
    scale: int
    origin: tuple[int, int] = (0, 0)
    source: str = ""

    def verify(self) -> None:
        """Re-derive ``lr_up`` from ``hr`` and require a bitwise match."""
        expected = make_pair(self.hr, self.scale).lr_up
        if expected.shape != self.lr_up.shape or not np.array_equal(
            expected.view(np.uint32), np.ascontiguousarray(self.lr_up, np.float32).view(np.uint32)
        ):
            raise ValueError(f"pair integrity check failed ({self.source} @ {self.origin})")


def make_pair(hr: np.ndarray, scale: int, origin=(0, 0), source: str = "") -> SamplePair:
    h, w = hr.shape[:2]
    if h % scale or w % scale:
        raise ValueError(f"patch size {h}x{w} is not divisible by scale {scale}")
    lr = degrade(hr, scale)
    return SamplePair(hr=hr, lr_up=upsample(lr, h, w), scale=scale, origin=tuple(origin), source=source)


def split_dataset(pairs: list, val_fraction: float = 0.1, seed: int = 0):
    """Seeded shuffle, then the last ceil(val_fraction * n) items are validation."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    n = len(pairs)
    n_val = math.ceil(val_fraction * n)
    if n < 2 or n_val >= n:
        raise ValueError(f"too few pairs ({n}) to split with val_fraction={val_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [pairs[i] for i in order]
    return shuffled[: n - n_val], shuffled[n - n_val:]


# ---------------------------------------------------------------------------
# synthetic cubes from the linear mixing model


@dataclass(frozen=True)
class SynthSpec:
    height: int = 96
    width: int = 96
    bands: int = 16
    num_endmembers: int = 4
    noise_sigma: float = 0.01
    smoothness: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if min(self.height, self.width, self.bands, self.num_endmembers) < 1:
            raise ValueError("height, width, bands and num_endmembers must be >= 1")
        if self.noise_sigma < 0 or self.smoothness < 0:
            raise ValueError("noise_sigma and smoothness must be >= 0")


def _endmembers(rng: np.random.Generator, k: int, bands: int) -> np.ndarray:
    """k smooth spectra in [0.05, 0.95]: a sloped baseline plus a few Gaussian bumps."""
    wl = np.linspace(0.0, 1.0, bands)
    out = np.empty((k, bands))
    for i in range(k):
        s = rng.uniform(0.2, 0.6) + rng.uniform(-0.3, 0.3) * wl
        for _ in range(3):
            centre, width, amp = rng.uniform(0, 1), rng.uniform(0.05, 0.3), rng.uniform(-0.4, 0.4)
            s = s + amp * np.exp(-0.5 * ((wl - centre) / width) ** 2)
        out[i] = s
    lo, hi = out.min(), out.max()
    return 0.05 + 0.9 * (out - lo) / (hi - lo) if hi > lo else np.full_like(out, 0.5)


def synth_generate(spec: SynthSpec, return_components: bool = False):
    """Generate a normalized cube = abundances @ endmembers + noise, clipped to [0, 1].

    Abundance maps are Gaussian-smoothed white noise (standard deviation
    ``smoothness`` pixels), standardized, shifted by +0.5, clipped at zero and
    renormalized to sum to one per pixel. With ``return_components`` the
    endmember matrix (K, C) and abundances (H, W, K) are returned as well.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    em = _endmembers(rng, spec.num_endmembers, spec.bands)
    fields = rng.standard_normal((spec.height, spec.width, spec.num_endmembers))
    if spec.smoothness > 0:
        fields = gaussian_filter(fields, sigma=(spec.smoothness, spec.smoothness, 0), mode="wrap")
    fields = (fields - fields.mean(axis=(0, 1))) / np.maximum(fields.std(axis=(0, 1)), 1e-12)
    ab = np.clip(fields + 0.5, 0.0, None)
    total = ab.sum(axis=2, keepdims=True)
    ab = np.where(total > 0, ab / np.where(total > 0, total, 1.0), 1.0 / spec.num_endmembers)
    cube = ab @ em
    if spec.noise_sigma > 0:
        cube = cube + rng.normal(0.0, spec.noise_sigma, size=cube.shape)
    cube = np.clip(cube, 0.0, 1.0)
    out = Cube.from_array(cube, source=f"synth(seed={spec.seed})", normalized=True, norm_scale=1.0)
    return (out, em, ab) if return_components else out


def synth_cubes(spec: SynthSpec, count: int) -> list[Cube]:
    """``count`` independent cubes; cube i uses a seed derived from (spec.seed, i)."""
    out = []
    for i in range(count):
        seed = int(np.random.SeedSequence([spec.seed, i]).generate_state(1, np.uint64)[0])
        out.append(synth_generate(replace(spec, seed=seed)))
    return out


def prepare_pairs(cubes, patch: int, scale: int, crop: int | None = None) -> list[SamplePair]:
    """Normalize (unless already normalized), optionally center-crop, tile and degrade.

    ``cubes`` is an iterable of ``(name, Cube)``; pairs come out in cube order,
    then row-major patch order.
    """
    if patch % scale:
        raise ValueError(f"patch size {patch} is not divisible by scale {scale}")
    pairs = []
    for name, cube in cubes:
        if not cube.meta.normalized:
            cube = normalize_cube(cube)
        if crop is not None:
            cube = center_crop(cube, crop)
        for hr, origin in extract_patches(cube, patch):
            pairs.append(make_pair(hr, scale, origin, name))
    return pairs


# ---------------------------------------------------------------------------
# manifests


@dataclass
class PairEntry:
    hr: str
    lr_up: str
    scale: int
    origin: tuple[int, int]
    source: str
    split: str


@dataclass
class Manifest:
    """Dataset index stored as JSON next to the files it references.

    ``kind`` is ``"cubes"`` (raw cube list, from ``synth``) or ``"pairs"``
    (prepared LR/HR pairs with split tags, from ``prepare``). Relative paths
    resolve against the manifest's directory.
    """

    kind: str
    root: Path
    cubes: list[str] = field(default_factory=list)
    pairs: list[PairEntry] = field(default_factory=list)
    scale: int | None = None
    patch_size: int | None = None
    bands: int | None = None

    def to_json(self) -> str:
        doc = {"kind": self.kind, "version": 1}
        if self.kind == "cubes":
            doc["cubes"] = self.cubes
        else:
            doc.update(scale=self.scale, patch_size=self.patch_size, bands=self.bands)
            doc["pairs"] = [{**asdict(p), "origin": list(p.origin)} for p in self.pairs]
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path) -> None:
        _atomic_write(path, self.to_json().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        kind = doc.get("kind")
        if kind not in ("cubes", "pairs"):
            raise FormatError(f"{path}: unknown manifest kind {kind!r}")
        m = cls(kind=kind, root=path.parent)
        if kind == "cubes":
            m.cubes = list(doc["cubes"])
        else:
            m.scale, m.patch_size, m.bands = doc["scale"], doc["patch_size"], doc["bands"]
            m.pairs = [PairEntry(**{**p, "origin": tuple(p["origin"])}) for p in doc["pairs"]]
        return m

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_pairs(self, split: str | None = None, verify: bool = True) -> list[SamplePair]:
        if self.kind != "pairs":
            raise ValueError("manifest does not list sample pairs")
        out = []
        for e in self.pairs:
            if split is not None and e.split != split:
                continue
            pair = SamplePair(
                hr=read_hsc(self.resolve(e.hr)).data,
                lr_up=read_hsc(self.resolve(e.lr_up)).data,
                scale=e.scale,
                origin=e.origin,
                source=e.source,
            )
            if verify:
                pair.verify()
            out.append(pair)
        return out
