"""Command-line entry point: gen-data, train, eval, predict, ablate.

Every option can also come from ``--config FILE``, a ``key = value`` text
file whose keys are the long option names (``-`` or ``_`` both accepted).
Command-line flags override the file; unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pnm
from .ablation import run_ablation, write_ablation
from .episodes import Sample, generate_synthetic_dataset, load_dataset, write_dataset
from .errors import ConfigError, GuidedSegError, IngestionError
from .inference import EvalProtocol, average_fuse, cgm_fuse, evaluate, model_predictor
from .network import load_checkpoint, save_checkpoint
from .training import VARIANTS, TrainConfig, train

# (flag, type, default, help) per command; None defaults mean "required"
_DATA = [("data", str, None, "dataset directory")]
_OUT = [("out", str, None, "output directory")]
_TRAIN = [
    ("seed", int, 0, "seed for initialisation and episode sampling"),
    ("epochs", int, 40, "training epochs"),
    ("episodes-per-epoch", int, 200, "optimiser steps per epoch"),
    ("learning-rate", float, TrainConfig.learning_rate, "SGD learning rate"),
    ("momentum", float, 0.9, "SGD momentum"),
    ("weight-decay", float, 1e-4, "L2 weight decay"),
    ("d", int, 64, "feature width"),
    ("variant", str, "sgm", "baseline or sgm"),
]
_EVAL = [
    ("K", int, 1, "support images per episode"),
    ("episodes", int, 200, "episodes per seed"),
    ("seeds", str, "0,1,2", "comma-separated evaluation seeds"),
    ("fusion", str, "cgm", "avg or cgm"),
    ("side", str, "test", "split to evaluate"),
]
_JOBS = [("jobs", int, 1, "worker processes")]

OPTIONS = {
    "gen-data": _OUT + [
        ("seed", int, 0, "generator seed"),
        ("classes", int, 6, "number of classes"),
        ("test-classes", int, 0, "classes held out for testing (0: classes // 3)"),
        ("samples-per-class", int, 40, "samples per class"),
        ("image-size", int, 64, "image side in pixels"),
    ],
    "train": _DATA + _OUT + _TRAIN,
    "eval": _DATA + _OUT + [("checkpoint", str, None, "checkpoint file")] + _EVAL,
    "predict": _OUT + [
        ("checkpoint", str, None, "checkpoint file"),
        ("support", str, None, "comma-separated IMAGE.ppm:MASK.pgm pairs"),
        ("query", str, None, "comma-separated query PPM images"),
        ("fusion", str, "cgm", "avg or cgm (K > 1)"),
    ],
    "ablate": _DATA + _OUT + [("grid", str, "vectors", "vectors or losses")]
    + [o for o in _TRAIN if o[0] != "variant"] + _EVAL + _JOBS,
}

CHOICES = {"variant": ("baseline", "sgm"), "fusion": ("avg", "cgm"),
           "grid": ("vectors", "losses"), "side": ("train", "test")}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="guidedseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, options in OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="key = value defaults file")
        for flag, kind, _, text in options:
            p.add_argument(f"--{flag}", type=kind, default=None, help=text)
    return parser


def read_config(path) -> dict:
    """Parse a ``key = value`` file; blank lines and ``#`` comments are skipped."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("_", "-")] = value
    return values


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags into one dict keyed by option name."""
    options = OPTIONS[command]
    from_file = read_config(args.config) if args.config else {}
    known = {flag for flag, *_ in options}
    unknown = sorted(set(from_file) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    merged = {}
    for flag, kind, default, _ in options:
        value = getattr(args, flag.replace("-", "_"))
        if value is None and flag in from_file:
            try:
                value = kind(from_file[flag])
            except ValueError:
                raise ConfigError(f"config key {flag}: cannot parse {from_file[flag]!r}") from None
        if value is None:
            value = default
        if value is None:
            raise ConfigError(f"{command} needs --{flag}")
        if flag in CHOICES and value not in CHOICES[flag]:
            raise ConfigError(f"--{flag} must be one of {'|'.join(CHOICES[flag])}, got {value!r}")
        merged[flag] = value
    return merged


def _seeds(text: str) -> tuple:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def _existing_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} {path} is not a directory")
    return p


def _existing_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} {path} does not exist")
    return p


def _output_dir(path: str) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise ConfigError(f"output {path} exists and is not a directory")
    p.mkdir(parents=True, exist_ok=True)
    return p


def train_config(opts: dict, variant) -> TrainConfig:
    return TrainConfig(epochs=opts["epochs"], episodes_per_epoch=opts["episodes-per-epoch"],
                       learning_rate=opts["learning-rate"], momentum=opts["momentum"],
                       weight_decay=opts["weight-decay"], seed=opts["seed"], d=opts["d"],
                       variant=variant)


def eval_protocol(opts: dict) -> EvalProtocol:
    if opts["K"] < 1 or opts["episodes"] < 1:
        raise ConfigError("--K and --episodes must be >= 1")
    return EvalProtocol(side=opts["side"], K=opts["K"], N=1, episodes=opts["episodes"],
                        seeds=_seeds(opts["seeds"]))


def _write_resolved(out: Path, command: str, opts: dict) -> None:
    # the output directory is left out so the file is a reusable --config
    lines = [f"# guidedseg {command}"] + [f"{k} = {opts[k]}" for k in opts if k != "out"]
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def cmd_gen_data(opts: dict) -> int:
    out = _output_dir(opts["out"])
    dataset = generate_synthetic_dataset(
        classes=opts["classes"], samples_per_class=opts["samples-per-class"],
        image_size=opts["image-size"], seed=opts["seed"],
        test_classes=opts["test-classes"] or None)
    write_dataset(dataset, out)
    print(f"wrote {len(dataset.samples)} samples to {out} "
          f"(train classes {list(dataset.train_classes)}, test classes {list(dataset.test_classes)})")
    return 0


def cmd_train(opts: dict) -> int:
    data = _existing_dir(opts["data"], "dataset")
    config = train_config(opts, VARIANTS[opts["variant"]])
    out = _output_dir(opts["out"])
    dataset = load_dataset(data)
    model, records = train(dataset, config, log_path=out / "train_log.txt",
                           progress=lambda r: print(r.line(), flush=True))
    save_checkpoint(model, out / "checkpoint.bin")
    _write_resolved(out, "train", opts)
    print(f"saved {out / 'checkpoint.bin'} (final loss {records[-1].mean_loss:.6f})")
    return 0


def cmd_eval(opts: dict) -> int:
    data = _existing_dir(opts["data"], "dataset")
    ckpt = _existing_file(opts["checkpoint"], "checkpoint")
    protocol = eval_protocol(opts)
    out = _output_dir(opts["out"])
    model = load_checkpoint(ckpt)
    report = evaluate(model_predictor(model, opts["fusion"]), load_dataset(data), protocol)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    print(f"mIoU {report.mIoU:.4f}  FB-IoU {report.FB_IoU:.4f}  ({report.num_episodes} episodes)")
    return 0


def _read_image(path: Path) -> np.ndarray:
    pixels = pnm.read_pnm(path)
    if pixels.ndim != 3:
        raise IngestionError(path, "expected a P6 colour image")
    return pixels.astype(np.float64) / 255.0


def _read_mask(path: Path, shape) -> np.ndarray:
    pixels = pnm.read_pnm(path)
    if pixels.ndim != 2 or pixels.shape != tuple(shape):
        raise IngestionError(path, f"expected a P5 mask of size {shape[0]}x{shape[1]}")
    mask = (pixels >= 128).astype(np.uint8)
    if not mask.any():
        raise IngestionError(path, "mask has no foreground pixel")
    return mask


def overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend the mask in red over the image; returns uint8 H x W x 3."""
    out = image.astype(np.float64).copy()
    m = mask.astype(bool)
    out[m] = 0.5 * out[m] + 0.5 * np.array([1.0, 0.0, 0.0])
    return pnm.to_bytes(out)


def cmd_predict(opts: dict) -> int:
    ckpt = _existing_file(opts["checkpoint"], "checkpoint")
    pairs = []
    for item in opts["support"].split(","):
        if item.count(":") != 1:
            raise ConfigError(f"--support entries must be IMAGE:MASK, got {item!r}")
        image_path, mask_path = item.split(":")
        pairs.append((_existing_file(image_path, "support image"),
                      _existing_file(mask_path, "support mask")))
    queries = [_existing_file(q, "query image") for q in opts["query"].split(",")]
    out = _output_dir(opts["out"])
    model = load_checkpoint(ckpt)
    supports = []
    for k, (image_path, mask_path) in enumerate(pairs):
        image = _read_image(image_path)
        supports.append(Sample(image, _read_mask(mask_path, image.shape[:2]), -1, f"support{k}"))
    for path in queries:
        image = _read_image(path)
        if opts["fusion"] == "cgm":
            _, mask, _ = cgm_fuse(model, supports, image)
        else:
            _, mask = average_fuse(model, supports, image)
        pnm.write_pnm(out / f"{path.stem}_mask.pgm", (mask * 255).astype(np.uint8))
        pnm.write_pnm(out / f"{path.stem}_overlay.ppm", overlay(image, mask))
        print(f"{path.name}: {int(mask.sum())} foreground pixels")
    return 0


def cmd_ablate(opts: dict) -> int:
    data = _existing_dir(opts["data"], "dataset")
    config = train_config(opts, VARIANTS["sgm"])
    protocol = eval_protocol(opts)
    if opts["jobs"] < 1:
        raise ConfigError("--jobs must be >= 1")
    out = _output_dir(opts["out"])
    rows = run_ablation(load_dataset(data), opts["grid"], config, protocol,
                        fusion=opts["fusion"], out_dir=out, jobs=opts["jobs"])
    write_ablation(rows, out, opts["grid"])
    print((out / "ablation.txt").read_text(), end="")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](resolve(args.command, args))
    except (GuidedSegError, ValueError, OSError, json.JSONDecodeError) as exc:
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"guidedseg: error: {message}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("guidedseg: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
