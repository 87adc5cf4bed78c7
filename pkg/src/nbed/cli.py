"""Command-line entry points: train, infer, eval, flops and synth.

Configuration files are flat ``key = value`` text with dotted section
names (``model.decoder = hed``, ``train.loss.lam = 1.3``); ``--set`` applies
the same assignments on the command line after the file. The environment
variable ``NBED_SEED`` overrides both the model and the training seed.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .checkpoint import CheckpointError, load_checkpoint, load_edge_map, read_container, save_checkpoint, save_edge_map
from .config import ConfigError, EvalConfig, LossConfig, ModelConfig, ShapeError, TrainConfig
from .data import BIPED_PLAN, BSDS_PLAN, NYUD_PLAN, DataError, augment, load_listfile, save_sample, synth_dataset
from .evaluation import MS_SCALES, EvalResult, evaluate, multi_scale_infer
from .model import image_to_tensor
from .profile import count_parameters, flop_report
from .trainer import TrainingDivergence, model_from_checkpoint, train, write_log_csv

log = logging.getLogger("nbed")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
AUGMENT_PLANS = {"none": None, "bsds": BSDS_PLAN, "nyud": NYUD_PLAN, "biped": BIPED_PLAN}


@dataclass
class DataPaths:
    train: str = ""
    out: str = ""
    augment: str = "none"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataPaths = field(default_factory=DataPaths)


# --------------------------------------------------------------------------
# config files

def _leaf_fields(prefix: str, obj) -> dict[str, object]:
    """Flatten a dataclass tree into ``dotted.key -> default value``."""
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}.{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(_leaf_fields(key, value))
        else:
            out[key] = value
    return out


def _coerce(key: str, text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(like[0]) if like else str
            return tuple(kind(t) for t in items)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {text!r} as {type(like).__name__}") from None


def parse_assignments(lines, source: str = "<config>") -> dict[str, str]:
    """Read ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_run_config(assignments: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply dotted assignments to ``base`` (defaults if omitted); unknown keys are an error."""
    base = base or RunConfig()
    known = _leaf_fields("model", base.model)
    known.update(_leaf_fields("train", base.train))
    known.update(_leaf_fields("eval", base.eval))
    known.update(_leaf_fields("data", base.data))
    unknown = sorted(k for k in assignments if k not in known)
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}" + (f" (and {unknown[1:]})" if len(unknown) > 1 else ""))
    values = dict(known)
    for key, text in assignments.items():
        values[key] = _coerce(key, text, known[key])

    def section(prefix):
        return {k[len(prefix) + 1:]: v for k, v in values.items() if k.startswith(prefix + ".")}

    train_values = section("train")
    loss = LossConfig(**{k[len("loss."):]: v for k, v in train_values.items() if k.startswith("loss.")})
    train_values = {k: v for k, v in train_values.items() if not k.startswith("loss.")}
    run = RunConfig(model=ModelConfig(**section("model")), train=TrainConfig(loss=loss, **train_values),
                    eval=EvalConfig(**section("eval")), data=DataPaths(**section("data")))
    if run.data.augment not in AUGMENT_PLANS:
        raise ConfigError(f"data.augment must be one of {sorted(AUGMENT_PLANS)}")
    return run


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def dump_run_config(run: RunConfig) -> str:
    lines = []
    for prefix in ("model", "train", "eval", "data"):
        for key, value in _leaf_fields(prefix, getattr(run, prefix)).items():
            lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def load_run_config(config_path: str | None, overrides: list[str] | None) -> RunConfig:
    assignments = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        assignments.update(parse_assignments(path.read_text(encoding="utf-8").splitlines(), str(path)))
    assignments.update(parse_assignments(overrides or [], "--set"))
    seed = os.environ.get("NBED_SEED")
    if seed is not None and seed.strip():
        assignments["model.seed"] = assignments["train.seed"] = seed
    return build_run_config(assignments)


# --------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    run = load_run_config(args.config, args.set)
    data_path = args.data or run.data.train
    out = Path(args.out or run.data.out or ".")
    if not data_path:
        raise ConfigError("no training list: pass --data or set data.train")
    if not Path(data_path).is_file():
        raise ConfigError(f"training list not found: {data_path}")
    run = dataclasses.replace(run, data=dataclasses.replace(run.data, train=str(data_path), out=str(out)))
    samples = load_listfile(data_path)
    plan = AUGMENT_PLANS[run.data.augment]
    if plan is not None:
        samples = [a for k, s in enumerate(samples) for a in augment(s, plan, seed=run.train.seed * 7919 + k)]
    overlay = None
    if args.overlay:
        _, overlay = read_container(args.overlay)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_run_config(run), encoding="utf-8")
    log.info("training on %d samples for %d iterations", len(samples), run.train.max_iterations)

    def progress(it, value):
        if it % run.train.log_every == 0:
            log.info("iteration %d loss %.6f", it, value)

    ckpt, history = train(run.model, samples, run.train, callback=progress, overlay=overlay)
    save_checkpoint(ckpt, out / "ckpt.nbed")
    write_log_csv(history, out / "log.csv")
    print(f"wrote {out / 'ckpt.nbed'} and {out / 'log.csv'}")
    return EXIT_OK


def _image_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        if not files:
            raise DataError(f"no images found in {path}")
        return files
    if not path.is_file():
        raise DataError(f"input not found: {path}")
    return [path]


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def edge_to_png(edge: np.ndarray) -> Image.Image:
    return Image.fromarray(np.clip(np.round(edge * 255.0), 0, 255).astype(np.uint8))


def cmd_infer(args) -> int:
    ckpt_path = Path(args.ckpt)
    if not ckpt_path.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    model = model_from_checkpoint(load_checkpoint(ckpt_path)).eval()
    scales = tuple(float(s) for s in args.scales.split(",")) if args.scales else MS_SCALES
    files = _image_files(Path(args.input))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in files:
        x = image_to_tensor(_read_image(path))
        with torch.no_grad():
            edge = multi_scale_infer(model, x, scales) if args.ms else model(x)
        edge = edge[0, 0].numpy()
        edge_to_png(edge).save(out / f"{path.stem}.png")
        if args.raw:
            save_edge_map(out / f"{path.stem}.nbed", edge)
    print(f"wrote {len(files)} edge map(s) to {out}")
    return EXIT_OK


def _load_prediction(pred_dir: Path, sample_id: str) -> np.ndarray:
    raw, png = pred_dir / f"{sample_id}.nbed", pred_dir / f"{sample_id}.png"
    if raw.is_file():
        return load_edge_map(raw).astype(np.float64)
    if png.is_file():
        try:
            with Image.open(png) as im:
                return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        except (UnidentifiedImageError, OSError) as exc:
            raise DataError(f"cannot read prediction {png}: {exc}") from exc
    raise DataError(f"no prediction for sample {sample_id!r} in {pred_dir}")


def write_pr_csv(result: EvalResult, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,precision,recall,f\n")
        for t, p, r, f in zip(result.thresholds, result.precision, result.recall, result.f):
            fh.write(f"{t:.4f},{p:.6f},{r:.6f},{f:.6f}\n")


def write_pr_svg(result: EvalResult, path: Path, size: int = 400, margin: int = 50) -> None:
    """A recall/precision line plot with iso-F guides and the ODS point."""
    span = size - 2 * margin

    def xy(r, p):
        return margin + r * span, size - margin - p * span

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}" font-family="sans-serif" font-size="12">',
             f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>']
    for f in (0.2, 0.4, 0.6, 0.8):
        rs = np.linspace(f / (2 - f) + 1e-9, 1.0, 60)
        ps = f * rs / (2 * rs - f)
        pts = " ".join("%.1f,%.1f" % xy(r, p) for r, p in zip(rs, ps) if p <= 1.0)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#ccc" stroke-width="1"/>')
    x0, y0 = xy(0, 0)
    x1, y1 = xy(1, 1)
    parts.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" fill="none" stroke="black"/>')
    for v in (0.0, 0.5, 1.0):
        tx, _ = xy(v, 0)
        _, ty = xy(0, v)
        parts.append(f'<text x="{tx}" y="{y0 + 18}" text-anchor="middle">{v:.1f}</text>')
        parts.append(f'<text x="{x0 - 8}" y="{ty + 4}" text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{size / 2}" y="{size - 12}" text-anchor="middle">Recall</text>')
    parts.append(f'<text x="14" y="{size / 2}" text-anchor="middle" transform="rotate(-90 14 {size / 2})">'
                 'Precision</text>')
    valid = [(r, p) for r, p in zip(result.recall, result.precision) if r > 0 or p > 0]
    if valid:
        pts = " ".join("%.1f,%.1f" % xy(r, p) for r, p in valid)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#c0392b" stroke-width="2"/>')
    k = int(np.argmax(result.f))
    cx, cy = xy(result.recall[k], result.precision[k])
    parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="4" fill="#c0392b"/>')
    parts.append(f'<text x="{x0 + 8}" y="{y1 + 18}">ODS={result.ods:.4f} OIS={result.ois:.4f}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory not found: {pred_dir}")
    samples = load_listfile(args.list)
    preds = [_load_prediction(pred_dir, s.id) for s in samples]
    cfg = EvalConfig(tolerance_fraction=args.tol, thresholds=args.thresholds, use_nms=not args.no_nms)
    result = evaluate(preds, samples, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pr_csv(result, out / "pr.csv")
    write_pr_svg(result, out / "pr.svg")
    print(f"ODS={result.ods:.4f} OIS={result.ois:.4f}")
    return EXIT_OK


def cmd_flops(args) -> int:
    run = load_run_config(args.config, args.set)
    rep = flop_report(run.model, args.height, args.width)
    params = count_parameters(run.model)
    print(f"params={params} ({params / 1e6:.2f}M)")
    print(f"input={args.width}x{args.height} padded={rep.padded_size[1]}x{rep.padded_size[0]}")
    print(f"location={rep.location / 1e9:.3f}G semantic={rep.semantic / 1e9:.3f}G decoder={rep.decoder / 1e9:.3f}G")
    print(f"GFLOPs={rep.total / 1e9:.2f} GMACs={rep.macs / 1e9:.2f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    samples = synth_dataset(args.count, args.size, args.shapes, args.seed)
    lines = []
    for s in samples:
        img, gts = save_sample(s, out / "images", gt_directory=out / "gt")
        lines.append(" ".join(str(p.relative_to(out)) for p in [img, *gts]))
    (out / "train.lst").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(samples)} samples and {out / 'train.lst'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. train.max_iterations=0 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nbed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write ckpt.nbed, log.csv and config.cfg")
    _add_config_flags(p)
    p.add_argument("--data", help="training list file (overrides data.train)")
    p.add_argument("--out", help="output directory (overrides data.out)")
    p.add_argument("--overlay", help="container of semantic-encoder weights to load before training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write an edge-map PNG per input image")
    p.add_argument("--ckpt", required=True, help="checkpoint written by train")
    p.add_argument("--input", required=True, help="image file or directory of images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ms", action="store_true", help="average predictions over rescaled inputs")
    p.add_argument("--scales", help="comma-separated scales for --ms (default 0.5,1.0,1.5)")
    p.add_argument("--raw", action="store_true", help="also write float32 maps as .nbed containers")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions and write pr.csv and pr.svg")
    p.add_argument("--pred", required=True, help="directory of <id>.png or <id>.nbed predictions")
    p.add_argument("--list", required=True, help="list file of images and ground truths")
    p.add_argument("--tol", type=float, default=0.0075, help="match tolerance as a fraction of the diagonal")
    p.add_argument("--thresholds", type=int, default=99, help="number of thresholds k/(n+1)")
    p.add_argument("--no-nms", action="store_true", help="skip edge thinning")
    p.add_argument("--out", default=".", help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="print parameter and FLOP counts")
    _add_config_flags(p)
    p.add_argument("--height", type=int, default=321)
    p.add_argument("--width", type=int, default=481)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("synth", help="write a synthetic dataset and its list file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--shapes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, ShapeError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
