"""Command-line entry point: ``hdlsr <command> ...`` or ``python -m hdlsr``.

Exit codes: 0 success, 1 check or verification failure (including an aborted
training run), 2 usage or configuration error.

``HDLSR_THREADS`` caps the BLAS thread pool; it only takes effect when set
before numpy is first imported.
"""
from __future__ import annotations

import os

_threads = os.environ.get("HDLSR_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import data as D  # noqa: E402
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint  # noqa: E402
from .config import CliConfig, ConfigError  # noqa: E402
from .gradcheck import BatterySizes, run_battery  # noqa: E402
from .model import ModelConfig, hdl_forward, param_count, param_shapes, trainable_names  # noqa: E402
from .train import TrainingAborted, evaluate, format_history, train  # noqa: E402

log = logging.getLogger("hdlsr")

OK, FAILED, USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


def _write_text(path: Path, text: str) -> None:
    D._atomic_write(path, text.encode("utf-8"))


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _existing_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"output directory does not exist: {p}")
    return p


def _read_cube(path: Path) -> D.Cube:
    try:
        return D.load_cube(path)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_synth(a) -> int:
    out = _existing_dir(a.out)
    spec = D.SynthSpec(a.size, a.size, a.bands, a.endmembers, a.noise, a.smoothness, a.seed)
    names = []
    for i, cube in enumerate(D.synth_cubes(spec, a.cubes)):
        name = f"cube_{i:03d}.hsc"
        D.write_hsc(out / name, cube)
        names.append(name)
    D.Manifest("cubes", out, cubes=names).save(out / "manifest.json")
    print(f"wrote {len(names)} cubes and manifest.json to {out}")
    return OK


def _cube_paths(inputs: list[str]) -> list[Path]:
    paths = []
    for s in inputs:
        p = Path(s)
        if p.suffix == ".json":
            if not p.exists():
                raise UsageError(f"no such file: {p}")
            m = D.Manifest.load(p)
            if m.kind != "cubes":
                raise UsageError(f"{p}: expected a cube manifest, got kind {m.kind!r}")
            paths.extend(m.resolve(c) for c in m.cubes)
        else:
            paths.append(p)
    return paths


def cmd_prepare(a) -> int:
    if a.patch % a.scale:
        raise UsageError(f"patch size {a.patch} is not divisible by scale {a.scale}")
    if a.crop is not None and a.crop < a.patch:
        raise UsageError(f"crop size {a.crop} is smaller than patch size {a.patch}")
    paths = _cube_paths(a.inputs)
    cubes = [(p.name, _read_cube(p)) for p in paths]
    bands = {c.meta.bands for _, c in cubes}
    if len(bands) > 1:
        raise UsageError(f"input cubes disagree on band count: {sorted(bands)}")
    pairs = D.prepare_pairs(cubes, a.patch, a.scale, a.crop)
    if not pairs:
        raise UsageError("no input cubes")
    out = Path(a.out)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    train_pairs, val_pairs = D.split_dataset(pairs, a.val_fraction, a.seed)
    entries = []
    for split, group in (("train", train_pairs), ("val", val_pairs)):
        for p in group:
            k = len(entries)
            hr, lr = f"pairs/pair_{k:05d}_hr.hsc", f"pairs/pair_{k:05d}_lr.hsc"
            D.write_hsc(out / hr, D.Cube.from_array(p.hr, p.source, normalized=True))
            D.write_hsc(out / lr, D.Cube.from_array(p.lr_up, p.source, normalized=True))
            entries.append(D.PairEntry(hr, lr, a.scale, tuple(int(v) for v in p.origin), p.source, split))
    D.Manifest("pairs", out, pairs=entries, scale=a.scale, patch_size=a.patch, bands=bands.pop()).save(
        out / "manifest.json")
    print(f"wrote {len(entries)} pairs ({len(train_pairs)} train, {len(val_pairs)} val) to {out}")
    return OK


def cmd_train(a) -> int:
    cfg_path = Path(a.config)
    if not cfg_path.exists():
        raise UsageError(f"no such file: {cfg_path}")
    cfg = CliConfig.load(cfg_path)
    if cfg.model is None:
        raise ConfigError("model", "required for training")
    if cfg.data.manifest is None:
        raise ConfigError("data.manifest", "required for training")
    base = cfg_path.parent
    manifest_path = base / cfg.data.manifest
    if not manifest_path.exists():
        raise UsageError(f"no such file: {manifest_path}")
    manifest = D.Manifest.load(manifest_path)
    if manifest.bands != cfg.model.bands:
        raise UsageError(f"manifest has {manifest.bands} bands, model.bands is {cfg.model.bands}")
    out = base / cfg.data.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "config.json", cfg.to_json())
    try:
        result = train(cfg.model, cfg.train, manifest, checkpoint_dir=out)
    except TrainingAborted as exc:
        save_checkpoint(out / "aborted.ckpt", exc.checkpoint)
        print(f"training aborted: {exc}; last good state in {out / 'aborted.ckpt'}", file=sys.stderr)
        return FAILED
    best = result.checkpoint
    best.extra["scale"] = manifest.scale
    result.last.extra["scale"] = manifest.scale
    save_checkpoint(out / "best.ckpt", best)
    save_checkpoint(out / "last.ckpt", result.last)
    _write_text(out / "history.tsv", format_history(result.history))
    agg = evaluate(best, manifest, "val").aggregate
    summary = {
        "best_epoch": best.rng_state["epoch"],
        "epochs": len(result.history),
        "steps": result.last.step,
        "initial_loss": result.initial_loss,
        "final_loss": result.step_losses[-1],
        "param_count": param_count(cfg.model),
        "seed": cfg.train.seed,
        "model_seed": cfg.model.seed,
        "val_metrics": agg,
    }
    _write_text(out / "summary.json", _json(summary))
    print(f"best epoch {summary['best_epoch']}: val MPSNR {agg['mpsnr_db']:.3f} dB, SAM {agg['sam_deg']:.3f} deg")
    return OK


def cmd_eval(a) -> int:
    mpath = Path(a.manifest)
    if not mpath.exists():
        raise UsageError(f"no such file: {mpath}")
    manifest = D.Manifest.load(mpath)
    ckpt = None
    if a.checkpoint is not None:
        if not Path(a.checkpoint).exists():
            raise UsageError(f"no such file: {a.checkpoint}")
        ckpt = load_checkpoint(a.checkpoint)
        if manifest.bands != ckpt.config.bands:
            raise UsageError(f"manifest has {manifest.bands} bands, checkpoint expects {ckpt.config.bands}")
    result = evaluate(ckpt, manifest, None if a.split == "all" else a.split)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, rep in enumerate(result.reports):
        _write_text(out / f"report_{i:05d}.json", rep.to_json())
    _write_text(out / "aggregate.json", _json(result.aggregate))
    for k, v in result.aggregate.items():
        print(f"{k}\t{v!r}")
    return OK


def cmd_infer(a) -> int:
    if not Path(a.checkpoint).exists():
        raise UsageError(f"no such file: {a.checkpoint}")
    ckpt = load_checkpoint(a.checkpoint)
    cube = _read_cube(Path(a.input))
    if cube.meta.bands != ckpt.config.bands:
        raise UsageError(f"cube has {cube.meta.bands} bands, checkpoint expects {ckpt.config.bands}")
    scale = a.scale if a.scale is not None else ckpt.extra.get("scale")
    if scale is None:
        raise UsageError("checkpoint records no scale; pass --scale")
    h, w = cube.meta.height * scale, cube.meta.width * scale
    up = D.upsample(cube.data, h, w)
    out = hdl_forward(up[None], ckpt.params, "infer")[0]
    in_range = bool(out.min() >= 0 and out.max() <= 1)
    meta = replace(cube.meta, height=h, width=w, normalized=cube.meta.normalized and in_range,
                   source=f"infer({cube.meta.source})")
    D.write_hsc(a.output, D.Cube(np.ascontiguousarray(out, np.float32), meta))
    print(f"wrote {h}x{w}x{cube.meta.bands} cube to {a.output}")
    return OK


GRADCHECK_HEADER = ("check", "tensor", "checked", "excluded", "max_rel", "max_abs", "status")


def cmd_gradcheck(a) -> int:
    sizes = BatterySizes(a.batch, a.height, a.width, a.bands, a.features, a.blocks, a.seed)
    reports = run_battery(sizes, a.h, a.tol)
    print("\t".join(GRADCHECK_HEADER))
    worst = []
    for label, rep in reports.items():
        for row in rep.rows:
            ok = row.max_rel < rep.tol
            print(f"{label}\t{row.name}\t{row.checked}\t{row.excluded}\t{row.max_rel:.3e}\t{row.max_abs:.3e}\t"
                  f"{'ok' if ok else 'FAIL'}")
            if not ok:
                worst.append((row.max_rel, label, row.name))
    if worst:
        worst.sort(reverse=True)
        print(f"{len(worst)} tensor(s) above tolerance {a.tol:g}; worst:", file=sys.stderr)
        for rel, label, name in worst[:5]:
            print(f"  {label}/{name}: {rel:.3e}", file=sys.stderr)
        return FAILED
    print(f"all gradient checks passed at tolerance {a.tol:g}")
    return OK


def stretch_band(band: np.ndarray) -> np.ndarray:
    """2nd-98th percentile linear stretch to uint8; a flat band maps to 128."""
    lo, hi = np.percentile(band, [2.0, 98.0])
    if not hi > lo:
        return np.full(band.shape, 128, np.uint8)
    scaled = np.clip((band.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0) * 255.0
    return np.rint(scaled).astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, np.uint8).tobytes()


def cmd_render(a) -> int:
    cube = _read_cube(Path(a.input))
    for idx in a.bands:
        if not 0 <= idx < cube.meta.bands:
            raise UsageError(f"band index {idx} out of range for a {cube.meta.bands}-band cube")
    rgb = np.stack([stretch_band(cube.data[:, :, i]) for i in a.bands], axis=-1)
    D._atomic_write(a.out, encode_ppm(rgb))
    print(f"wrote {cube.meta.width}x{cube.meta.height} PPM to {a.out}")
    return OK


def cmd_params(a) -> int:
    if a.config is not None:
        cfg = CliConfig.load(a.config).model
        if cfg is None:
            raise ConfigError("model", "required")
    else:
        if a.bands is None:
            raise UsageError("pass --bands or --config")
        try:
            cfg = ModelConfig(bands=a.bands, width=a.width, num_residual_blocks=a.blocks)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    shapes = param_shapes(cfg)
    total = 0
    for name in trainable_names(cfg):
        n = int(np.prod(shapes[name]))
        total += n
        print(f"{name}\t{'x'.join(map(str, shapes[name]))}\t{n}")
    print(f"total\t\t{total}")
    return OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hdlsr", description="Hyperspectral super-resolution: data, training and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate seeded synthetic cubes")
    s.add_argument("--out", required=True, help="existing output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cubes", type=int, default=8)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--bands", type=int, default=16)
    s.add_argument("--endmembers", type=int, default=4)
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--smoothness", type=float, default=2.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="cut cubes into LR/HR training pairs")
    s.add_argument("inputs", nargs="+", help="HSC1 cubes, ENVI .hdr files or cube manifests")
    s.add_argument("--out", required=True)
    s.add_argument("--patch", type=int, required=True)
    s.add_argument("--scale", type=int, required=True, choices=(2, 4, 8))
    s.add_argument("--crop", type=int, default=None, help="center crop size before patching")
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train from a JSON experiment config")
    s.add_argument("config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics of a checkpoint (or the bilinear baseline) on a manifest")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--baseline", action="store_true", help="score the bilinear upsampled input")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="val", choices=("train", "val", "all"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="super-resolve one LR cube")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--scale", type=int, choices=(2, 4, 8), default=None)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    d = BatterySizes()
    s.add_argument("--batch", type=int, default=d.batch)
    s.add_argument("--height", type=int, default=d.height)
    s.add_argument("--width", type=int, default=d.width)
    s.add_argument("--bands", type=int, default=d.bands)
    s.add_argument("--features", type=int, default=d.features)
    s.add_argument("--blocks", type=int, default=d.blocks)
    s.add_argument("--seed", type=int, default=d.seed)
    s.add_argument("--h", type=float, default=1e-3)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("render", help="false-color PPM composite of three bands")
    s.add_argument("--input", required=True)
    s.add_argument("--bands", type=int, nargs=3, required=True, metavar=("R", "G", "B"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("params", help="per-tensor and total parameter counts")
    s.add_argument("--config")
    s.add_argument("--bands", type=int)
    s.add_argument("--width", type=int, default=56)
    s.add_argument("--blocks", type=int, default=3)
    s.set_defaults(func=cmd_params)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        if args.command == "eval" and args.baseline:
            args.checkpoint = None
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, D.FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
