"""Command-line interface: ``synth``, ``train``, ``render`` and ``eval``.

Settings come from an INI file with sections ``[synth]``, ``[training]``,
``[imaging]``, ``[loss]`` and ``[raster]``, overridable with
``--set section.key=value``. Unknown sections or keys are rejected. Each
command writes the fully resolved configuration next to its outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from .io import CONTAINER_VERSION

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _sections():
    from .datagen import SynthSpec
    from .imaging import ImagingConfig
    from .losses import LossWeights
    from .optimizer import TrainingConfig
    from .scene import RasterConfig
    return {"synth": SynthSpec, "training": TrainingConfig, "imaging": ImagingConfig, "loss": LossWeights,
            "raster": RasterConfig}


def _coerce(text: str, default, section: str, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("true", "1", "yes", "on")
        if default is None or (section == "raster" and key == "cull_sigma"):
            return None if text.lower() == "none" else float(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise CliError(f"invalid value {text!r} for {section}.{key}", EXIT_CONFIG) from None


class RunConfig:
    """Resolved settings for every section."""

    def __init__(self, values: dict[str, dict]):
        self.values = values

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        sections = _sections()
        raw: dict[str, dict[str, str]] = {name: {} for name in sections}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                with open(path, encoding="utf-8") as f:
                    parser.read_file(f)
            except OSError as exc:
                raise CliError(f"cannot read config {path}: {exc}", EXIT_CONFIG) from None
            except configparser.Error as exc:
                raise CliError(f"malformed config {path}: {exc}", EXIT_CONFIG) from None
            for name in parser.sections():
                if name not in sections:
                    raise CliError(f"unknown config section [{name}]", EXIT_CONFIG)
                raw[name].update(parser[name])
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise CliError(f"--set expects section.key=value, got {item!r}", EXIT_CONFIG)
            dotted, value = item.split("=", 1)
            name, key = dotted.split(".", 1)
            if name not in sections:
                raise CliError(f"unknown config section [{name}]", EXIT_CONFIG)
            raw[name][key] = value
        values = {}
        for name, klass in sections.items():
            defaults = {f.name: f.default for f in dataclasses.fields(klass)}
            resolved = dict(defaults)
            for key, text in raw[name].items():
                if key not in defaults:
                    raise CliError(f"unknown config key {name}.{key}", EXIT_CONFIG)
                resolved[key] = _coerce(text, defaults[key], name, key)
            values[name] = resolved
        return cls(values)

    def build(self, name: str):
        klass = _sections()[name]
        try:
            return klass(**self.values[name])
        except ValueError as exc:
            raise CliError(f"[{name}] {exc}", EXIT_CONFIG) from None

    def set(self, name: str, key: str, value) -> None:
        self.values[name][key] = value

    def to_text(self, names=None) -> str:
        lines = []
        for name in names or self.values:
            lines.append(f"[{name}]")
            for key, value in self.values[name].items():
                lines.append(f"{key} = {'none' if value is None else value}")
            lines.append("")
        return "\n".join(lines)

    def write(self, path, names=None) -> None:
        Path(path).write_text(self.to_text(names), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands

ABLATIONS = {"exposure": "optimize_exposure", "crf": "optimize_crf", "trajectory": "optimize_trajectory",
             "blur": "blur_model"}


def cmd_synth(args, config: RunConfig) -> int:
    from .datagen import generate
    out = Path(args.out)
    generate(config.build("synth"), out)
    config.write(out / "config.ini", ["synth"])
    print(f"dataset written to {out}")
    return 0


def cmd_train(args, config: RunConfig) -> int:
    from .datagen import load_dataset
    from .optimizer import load_checkpoint, save_checkpoint, train

    if args.exposure:
        config.set("training", "exposure_init", args.exposure)
    if args.iterations is not None:
        config.set("training", "iterations", args.iterations)
    for name in filter(None, (args.ablate or "").split(",")):
        if name.strip() not in ABLATIONS:
            raise CliError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}", EXIT_CONFIG)
        config.set("training", ABLATIONS[name.strip()], False)
    cfg = config.build("training")
    imaging, weights, raster = config.build("imaging"), config.build("loss"), config.build("raster")
    dataset = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.jsonl"
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
        state.config = cfg
    else:
        log_path.unlink(missing_ok=True)
    config.write(out / "config.ini", ["training", "imaging", "loss", "raster"])
    state, _ = train(dataset, cfg, imaging, weights, raster, state=state, log_path=log_path)
    save_checkpoint(state, out / "checkpoint.chs")
    print(f"checkpoint written to {out / 'checkpoint.chs'}")
    return 0


def _parse_sweep(text: str) -> list[float]:
    try:
        a, b, n = text.split(":")
        a, b, n = float(a), float(b), int(n)
    except ValueError:
        raise CliError("--dt-sweep expects a:b:n", EXIT_CONFIG) from None
    if a <= 0 or b <= 0 or n < 1:
        raise CliError("--dt-sweep needs positive bounds and n >= 1", EXIT_CONFIG)
    return np.geomspace(a, b, n).tolist() if n > 1 else [a]


def cmd_render(args, config: RunConfig) -> int:
    import torch

    from .imaging import render_hdr, retint
    from .io import write_pfm, write_png
    from .lie import Pose
    from .optimizer import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    k = args.frame
    if not 0 <= k < len(state.schedule):
        raise CliError(f"frame {k} out of range", EXIT_CONFIG)
    dt_frame = float(torch.exp(state.schedule.log_dt[k].detach()))
    if args.pose:
        pose = Pose.from_vector([float(v) for v in args.pose.split()])
    else:
        t = args.time if args.time is not None else float(state.schedule.t_b[k]) + dt_frame / 2
        pose = state.trajectory.pose_at(torch.tensor(t, dtype=torch.float64))
    with torch.no_grad():
        hdr = render_hdr(state.scene, pose.detach(), state.camera, state.raster)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.hdr:
        write_pfm(out, hdr.numpy())
        written = [out]
    else:
        dts = _parse_sweep(args.dt_sweep) if args.dt_sweep else [args.dt if args.dt is not None else dt_frame]
        written = []
        for i, dt in enumerate(dts):
            path = out if len(dts) == 1 else out.with_name(f"{out.stem}_{i:03d}{out.suffix}")
            with torch.no_grad():
                ldr = retint(hdr * dt_frame, state.crf, k, dt, dt_frame, state.imaging)
            write_png(path, ldr.numpy(), args.bits)
            written.append(path)
    config.write(out.parent / f"{out.stem}.config.ini", ["imaging", "raster"])
    for path in written:
        print(path)
    return 0


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def cmd_eval(args, config: RunConfig) -> int:
    from .datagen import load_dataset
    from .optimizer import evaluate, load_checkpoint

    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    report = evaluate(state, dataset)
    report["config"] = {"training": dataclasses.asdict(state.config), "imaging": dataclasses.asdict(state.imaging)}
    text = json.dumps(_json_safe(report), indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        config.write(out.parent / f"{out.stem}.config.ini", ["imaging", "raster"])
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdrsplat", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"container format CHS1 v{CONTAINER_VERSION}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--threads", type=int, default=1, help="worker threads (fixed for reproducibility)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="optimise a scene on a dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--exposure", choices=("random", "gt"))
    p.add_argument("--ablate", help="comma list of: " + ", ".join(sorted(ABLATIONS)))
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render a view from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    where = p.add_mutually_exclusive_group()
    where.add_argument("--time", type=float, help="trajectory timestamp in seconds")
    where.add_argument("--pose", help="'qw qx qy qz tx ty tz' camera-to-world")
    p.add_argument("--frame", type=int, default=0, help="frame whose white balance and exposure are used")
    p.add_argument("--dt", type=float, help="virtual exposure time in seconds")
    p.add_argument("--dt-sweep", help="geometric sweep of exposure times a:b:n")
    p.add_argument("--hdr", action="store_true", help="write linear irradiance as PFM")
    p.add_argument("--bits", type=int, default=8, choices=(8, 16))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint against a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def _set_threads(n: int) -> None:
    import numba
    import torch
    if n < 1:
        raise CliError("--threads must be >= 1", EXIT_CONFIG)
    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    from .datagen import DataError
    from .io import FormatError
    from .lie import AngleNearPi
    from .optimizer import ConfigError, NonFiniteLoss
    from .trajectory import DegenerateInput, OutOfDomain

    args = build_parser().parse_args(argv)
    try:
        _set_threads(args.threads)
        config = RunConfig.load(args.config, args.set)
        return args.func(args, config)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, DegenerateInput, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, AngleNearPi, OutOfDomain, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
