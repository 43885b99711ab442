"""``lapformer`` command line: train, eval, profile, report, viz.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CheckpointError, ConfigError, LAPFormerError, TrainingError

log = logging.getLogger("lapformer")

TRAIN_DATASETS = {"Kvasir": ("Kvasir", "kvasir"), "ClinicDB": ("CVC-ClinicDB", "ClinicDB", "clinicdb")}
TEST_DATASETS = {"ColonDB": ("CVC-ColonDB", "ColonDB"), "CVC-T": ("CVC-300", "CVC-T"),
                 "ETIS": ("ETIS-LaribPolypDB", "ETIS")}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common_model_args(p):
    p.add_argument("--variant", choices=["S", "M", "L"], default="S")
    p.add_argument("--config", type=Path, help="key-value config file")
    p.add_argument("--set", nargs=2, action="append", default=[], metavar=("K", "V"),
                   help="override one config key (repeatable)")
    p.add_argument("--ablation", help="decoder ablation preset, e.g. segformer, pff, pff_a")


def build_parser() -> Parser:
    parser = Parser(prog="lapformer", description="LAPFormer polyp segmentation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    p = sub.add_parser("train", help="train one or more runs")
    _common_model_args(p)
    p.add_argument("--data", type=Path, required=True,
                   help="root with Kvasir/ and CVC-ClinicDB/ dirs, or a single dataset dir")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--pretrained", type=Path, help="encoder weights (.npz or torch state dict)")
    p.add_argument("--keymap", type=Path, help="key translation file for --pretrained")
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("eval", help="evaluate a checkpoint on datasets")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, nargs="+",
                   help="dataset dirs (images/ + masks/)")
    p.add_argument("--out", type=Path)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("profile", help="parameter and FLOP counts")
    _common_model_args(p)
    p.add_argument("--size", type=int, default=352)
    p.add_argument("--convention", choices=["toolbox", "full"], default="toolbox")
    p.add_argument("--table", action="store_true",
                   help="print the ablation and variant complexity table instead")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("report", help="render markdown tables from metric files")
    p.add_argument("metrics", nargs="+", help="FILE or METHOD=FILE[,FILE...]")
    p.add_argument("--complexity", nargs="*", choices=["S", "M", "L"], default=[],
                   help="append a params/FLOPs table for these variants")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("viz", help="Grad-CAM and channel-mean heatmaps")
    _common_model_args(p)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--layers", nargs="+")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--colormap", default=None, help="matplotlib colormap name for RGB output")
    return parser


# ---------------------------------------------------------------------------

def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out: Path, command: str, argv, config_text: str = "", seed=None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command {command}", f"argv {' '.join(map(str, argv))}",
             f"code_version {_code_version()}"]
    if seed is not None:
        lines.append(f"seed {seed}")
    text = "\n".join(lines) + "\n"
    if config_text:
        text += "\n# config\n" + config_text
    path = out / "manifest.txt"
    path.write_text(text)
    return path


def _split_overrides(values: dict[str, str]):
    model_vals = {k: v for k, v in values.items() if not k.startswith("train.")}
    train_vals = {k[len("train."):]: v for k, v in values.items() if k.startswith("train.")}
    return model_vals, train_vals


def resolve_config(args):
    from .model import config_from_dict, parse_config_lines, variant_config

    values = {}
    if args.config:
        values.update(parse_config_lines(args.config.read_text()))
    values.update({k: v for k, v in args.set})
    model_vals, train_vals = _split_overrides(values)
    variant = model_vals.pop("variant", args.variant)
    base = variant_config(variant if variant != "custom" else args.variant, args.ablation)
    return config_from_dict(model_vals, base), train_vals


def train_config(train_vals: dict[str, str], args):
    from .model import _coerce
    from .trainer import TrainConfig

    defaults = TrainConfig()
    kwargs = {}
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    for k, v in train_vals.items():
        if k not in names or k == "checkpoint_dir":
            raise ConfigError(f"unknown config key 'train.{k}'")
        template = getattr(defaults, k)
        if template is None:
            kwargs[k] = None if v.lower() == "none" else float(v)
        else:
            kwargs[k] = _coerce(template, v, f"train.{k}")
    kwargs["seed"] = args.seed
    if args.runs is not None:
        kwargs["runs"] = args.runs
    try:
        return TrainConfig(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _find_dir(root: Path, names) -> Path | None:
    for n in names:
        if (root / n / "images").is_dir():
            return root / n
    return None


def cmd_train(args) -> int:
    from .data import build_split, scan_dataset, write_manifest as write_split
    from .metrics import evaluate_dataset
    from .model import build_model, config_to_text, load_pretrained_encoder
    from .trainer import train

    cfg, train_vals = resolve_config(args)
    tcfg = train_config(train_vals, args)
    tcfg.input_size = tuple(cfg.input_size)
    out = args.out
    text = config_to_text(cfg) + "".join(
        f"train.{f.name} {getattr(tcfg, f.name)}\n" for f in dataclasses.fields(tcfg)
        if f.name != "checkpoint_dir")
    write_manifest(out, "train", args.argv, text, tcfg.seed)

    if (args.data / "images").is_dir():
        train_set, tests = scan_dataset(args.data), {}
    else:
        kv, cl = (_find_dir(args.data, TRAIN_DATASETS[k]) for k in ("Kvasir", "ClinicDB"))
        if kv is None or cl is None:
            raise ConfigError(f"{args.data}: expected Kvasir/ and CVC-ClinicDB/ dataset dirs")
        train_set, test_kv, test_cl = build_split(kv, cl, tcfg.seed)
        tests = {"Kvasir": test_kv, "ClinicDB": test_cl}
        for name, names in TEST_DATASETS.items():
            d = _find_dir(args.data, names)
            if d is not None:
                tests[name] = scan_dataset(d, name)
        write_split(out / "split.tsv", {"train": train_set, **{f"test_{k}": v for k, v in tests.items()}})
    if not train_set:
        raise ConfigError(f"no image/mask pairs found under {args.data}")

    summary = []
    for run in range(tcfg.runs):
        run_cfg = dataclasses.replace(tcfg, seed=tcfg.seed + run, checkpoint_dir=out / f"run_{run}")
        model = build_model(cfg, seed=run_cfg.seed)
        if args.pretrained:
            load_pretrained_encoder(model, args.pretrained, args.keymap)
        run_cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        train(model, train_set, run_cfg, log_path=run_cfg.checkpoint_dir / "train.log")
        for name, records in tests.items():
            rep = evaluate_dataset(model, records, args.threshold, cfg.input_size, name)
            (out / f"run_{run}" / f"{name}.metrics.txt").write_text(rep.to_lines())
            summary.append((run, name, rep.mDice, rep.mIoU))
    if summary:
        lines = ["run dataset mDice mIoU"] + [f"{r} {n} {d:.6f} {j:.6f}" for r, n, d, j in summary]
        for name in tests:
            d = np.array([s[2] for s in summary if s[1] == name])
            j = np.array([s[3] for s in summary if s[1] == name])
            lines.append(f"mean {name} {d.mean():.6f} {j.mean():.6f}")
            lines.append(f"std {name} {d.std():.6f} {j.std():.6f}")
        (out / "summary.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    return 0


def cmd_eval(args) -> int:
    from .data import scan_dataset
    from .metrics import evaluate_dataset
    from .model import load_checkpoint

    model = load_checkpoint(args.ckpt)
    outputs = []
    for root in args.data:
        records = scan_dataset(root, root.name)
        if not records:
            raise ConfigError(f"no image/mask pairs under {root}")
        rep = evaluate_dataset(model, records, args.threshold, model.config.input_size, root.name)
        outputs.append(rep)
        sys.stdout.write(rep.to_lines())
        if rep.skipped:
            log.warning("%s: skipped %d unreadable samples", root.name, len(rep.skipped))
    if args.out:
        from .model import config_to_text

        write_manifest(args.out, "eval", args.argv, config_to_text(model.config))
        for rep in outputs:
            (args.out / f"{rep.dataset_name}.metrics.txt").write_text(rep.to_lines())
    return 0


def profile_lines(args) -> list[str]:
    from .decoder import ABLATIONS
    from .model import build_model, count_parameters, variant_config
    from .profile import estimate_flops, format_profile

    size = (args.size, args.size)
    if not args.table:
        cfg, _ = resolve_config(args)
        model = build_model(cfg)
        return [format_profile(count_parameters(model), estimate_flops(model, size, args.convention),
                               args.size)]
    lines = [f"{'config':<18} {'params(M)':>10} {'GFLOPs':>8}"]
    rows = [(name, variant_config("S", name)) for name in ABLATIONS]
    rows += [(f"LAPFormer-{v}", variant_config(v)) for v in ("S", "M", "L")]
    for name, cfg in rows:
        model = build_model(cfg)
        lines.append(f"{name:<18} {count_parameters(model) / 1e6:>10.2f} "
                     f"{estimate_flops(model, size, args.convention):>8.2f}")
    return lines


def cmd_profile(args) -> int:
    lines = profile_lines(args)
    print("\n".join(lines))
    if args.out:
        cfg, _ = resolve_config(args)
        from .model import config_to_text

        write_manifest(args.out, "profile", args.argv, config_to_text(cfg))
        (args.out / "profile.txt").write_text("\n".join(lines) + "\n")
    return 0


def cmd_report(args) -> int:
    from .metrics import MetricReport
    from .model import build_model, count_parameters, variant_config
    from .profile import estimate_flops
    from .report import render_report

    groups: dict[str, list] = {}
    for item in args.metrics:
        method, _, files = item.rpartition("=")
        method = method or "LAPFormer"
        for f in files.split(","):
            path = Path(f)
            if not path.exists():
                raise ConfigError(f"no metric file {path}")
            groups.setdefault(method, []).append(MetricReport.from_lines(path.read_text()))
    complexity = []
    for v in args.complexity:
        model = build_model(variant_config(v))
        complexity.append((f"LAPFormer-{v}", count_parameters(model), estimate_flops(model)))
    text = render_report(list(groups.items()), complexity)
    sys.stdout.write(text)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    return 0


def cmd_viz(args) -> int:
    import torch
    from PIL import Image

    from .data import Sample, resize_sample
    from .model import build_model, load_checkpoint
    from .viz import DEFAULT_LAYERS, grad_cam, layer_activation, mean_activation_map, save_heatmap

    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    else:
        cfg, _ = resolve_config(args)
        model = build_model(cfg, args.seed)
    with Image.open(args.image) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    img = torch.from_numpy(arr.transpose(2, 0, 1).copy())
    sample = resize_sample(Sample(img, torch.zeros(1, *img.shape[-2:]), args.image.stem),
                           model.config.input_size)
    layers = args.layers or list(DEFAULT_LAYERS)
    if not model.config.decoder.aggregate:
        layers = [l for l in layers if l != "decoder.fsm"]
    write_manifest(args.out, "viz", args.argv, seed=args.seed)
    for layer in layers:
        tag = layer.replace(".", "_")
        save_heatmap(grad_cam(model, sample.image, layer), args.out / f"gradcam_{tag}.png", args.colormap)
        act = layer_activation(model, sample.image, layer)
        save_heatmap(mean_activation_map(act, sample.image.shape[-2:]), args.out / f"mean_{tag}.png", args.colormap)
        print(f"wrote {layer}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "profile": cmd_profile, "report": cmd_report,
            "viz": cmd_viz}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        args.argv = argv
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("lapformer: error: a command is required")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (ConfigError, CheckpointError, ValueError, FileNotFoundError) as e:
        print(f"lapformer: error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, LAPFormerError, RuntimeError, OSError) as e:
        print(f"lapformer: failed: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
