"""
CLI Commands
One function per subcommand; each returns the process exit status
"""
import argparse
import sys
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from loguru import logger
from rich.console import Console
from rich.table import Table

from src.fiberseg.baselines import (
    ForestConfig,
    FrangiParams,
    best_dice_threshold,
    forest_predict,
    frangi_segment,
    load_forest,
    otsu_threshold,
    save_forest,
    train_forest,
)
from src.fiberseg.errors import VolumeFormatError
from src.fiberseg.filters import compute_feature_stack
from src.fiberseg.infer import normalize_then_predict
from src.fiberseg.metrics import DiceReport, evaluate, render_error_map
from src.fiberseg.model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from src.fiberseg.phantom import PhantomSpec, generate_pair, generate_phantom
from src.fiberseg.train import PATCH_SHAPES, TrainConfig, get_preset, train_loop
from src.fiberseg.volgrid import LabelVolume, Volume, binarize, load_volume, normalize, save_volume
from src.utils.config import settings


class UsageError(Exception):
    """Invalid flag combination; reported through argparse (exit status 2)"""


def _load_gray(path: str) -> Volume:
    v = load_volume(path)
    if not isinstance(v, Volume):
        raise VolumeFormatError(f"{path}: expected a gray (f32) volume, found labels")
    return v


def _load_label(path: str) -> LabelVolume:
    v = load_volume(path)
    if not isinstance(v, LabelVolume):
        raise VolumeFormatError(f"{path}: expected a label (u8) volume, found gray values")
    return v


def _stem_name(path: str) -> str:
    return Path(path).name.split(".")[0]


def _seed(args: argparse.Namespace) -> int:
    return settings.DEFAULT_SEED if args.seed is None else args.seed


# ============================================================================
# phantom
# ============================================================================


def _lr_spec(spec_mr: PhantomSpec, lr_pitch: float) -> PhantomSpec:
    """Same physical box at the LR pitch"""
    dims = tuple(max(1, int(round(n * spec_mr.voxel_size_um / lr_pitch))) for n in spec_mr.dims)
    return PhantomSpec(**{**spec_mr.model_dump(), "dims": dims, "voxel_size_um": lr_pitch})


def cmd_phantom(args: argparse.Namespace) -> int:
    spec = PhantomSpec.from_file(args.specfile)
    if args.seed is not None:
        spec = PhantomSpec(**{**spec.model_dump(), "seed": args.seed})

    if not args.lr_pair:
        gray, label = generate_phantom(spec)
        outputs = {"gray": gray, "label": label}
    else:
        (mr_gray, mr_label), (lr_gray, lr_label) = generate_pair(spec, _lr_spec(spec, args.lr_pitch), spec.seed)
        outputs = {"mr_gray": mr_gray, "mr_label": mr_label, "lr_gray": lr_gray, "lr_label": lr_label}

    for suffix, volume in outputs.items():
        path = f"{args.out_stem}_{suffix}.vxg"
        save_volume(volume, path)
        logger.info(f"Wrote {path}")
    return 0


# ============================================================================
# baseline
# ============================================================================


def _training_pair(args: argparse.Namespace) -> Tuple[Volume, LabelVolume]:
    if not (args.train_gray and args.train_label):
        raise UsageError(f"method {args.method} needs --train-gray and --train-label")
    return _load_gray(args.train_gray), _load_label(args.train_label)


def cmd_baseline(args: argparse.Namespace) -> int:
    gray = _load_gray(args.gray)
    label = _load_label(args.label)

    if args.method == "otsu":
        threshold = otsu_threshold(gray)
        seg = binarize(gray, threshold)
        logger.info(f"Otsu threshold {threshold:.6g}")
    elif args.method == "best":
        threshold, _ = best_dice_threshold(gray, label)
        seg = binarize(gray, threshold)
        print(f"threshold={threshold!r}")
    elif args.method == "frangi":
        train_gray, train_label = _training_pair(args)
        params = FrangiParams.for_resolution(args.resolution)
        seg, _ = frangi_segment(normalize(train_gray), train_label, normalize(gray), params)
    else:
        if args.load_forest:
            forest = load_forest(args.load_forest)
        else:
            train_gray, train_label = _training_pair(args)
            config = ForestConfig(n_trees=args.trees, seed=_seed(args))
            forest = train_forest(compute_feature_stack(normalize(train_gray)), train_label, config)
        if args.save_forest:
            save_forest(forest, args.save_forest)
        seg = forest_predict(forest, compute_feature_stack(normalize(gray)))

    if args.out:
        save_volume(seg, args.out)
    report = evaluate(label, seg, method=args.method, volume=args.name or _stem_name(args.gray))
    print(report.to_line())
    return 0


# ============================================================================
# train / predict
# ============================================================================


def _parse_shape(text: Optional[str]) -> Optional[Tuple[int, int, int]]:
    if text is None:
        return None
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise UsageError(f"expected a shape like 32,32,32, got {text!r}")
    try:
        return tuple(int(p) for p in parts)  # type: ignore[return-value]
    except ValueError as e:
        raise UsageError(f"expected integers in shape {text!r}") from e


def _train_setup(args: argparse.Namespace) -> Tuple[ModelConfig, TrainConfig]:
    overrides: Dict[str, object] = {"seed": _seed(args)}
    for flag, key in (
        ("iterations", "iterations"),
        ("batch_size", "batch_size"),
        ("lr", "lr"),
        ("fiber_prob", "fiber_biased_sampling_prob"),
        ("log_every", "log_every"),
    ):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    if args.no_augment:
        overrides["augment"] = False
    patch = _parse_shape(args.patch)

    if args.preset:
        preset = get_preset(args.preset)
        if patch is not None:
            overrides["patch_shape"] = patch
        return preset.model, preset.train_config(**overrides)

    if args.dim is None:
        raise UsageError("train needs --preset or --dim")
    model_cfg = ModelConfig(dimensionality=args.dim, variant=args.variant)
    overrides["patch_shape"] = patch or PATCH_SHAPES[(args.resolution, args.dim)]
    return model_cfg, TrainConfig(**overrides)


def cmd_train(args: argparse.Namespace) -> int:
    model_cfg, train_cfg = _train_setup(args)
    gray = normalize(_load_gray(args.gray))
    label = _load_label(args.label)

    model = build_model(model_cfg, seed=train_cfg.seed)
    model, record = train_loop(gray, label, model, train_cfg)
    save_checkpoint(model, args.out_checkpoint)
    record.checkpoint_path = str(args.out_checkpoint)

    if args.log:
        record.append_to(args.log)
    print(record.entries[-1].to_line())
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    prob, seg = normalize_then_predict(
        model,
        _load_gray(args.gray),
        patch_shape=_parse_shape(args.patch),
        stride=_parse_shape(args.stride),
    )
    save_volume(prob, f"{args.out_stem}_prob.vxg")
    save_volume(seg, f"{args.out_stem}_seg.vxg")
    logger.info(f"Wrote {args.out_stem}_prob.vxg and {args.out_stem}_seg.vxg")
    return 0


# ============================================================================
# eval / render / report
# ============================================================================


def cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate(
        _load_label(args.label),
        _load_label(args.pred),
        method=args.method or _stem_name(args.pred),
        volume=args.name or _stem_name(args.label),
    )
    print(report.to_line())
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    render_error_map(_load_label(args.label), _load_label(args.pred), args.z, args.out)
    logger.info(f"Wrote error map {args.out}")
    return 0


def _read_reports(paths: List[str]) -> List[DiceReport]:
    reports = []
    for path in paths:
        text = sys.stdin.read() if path == "-" else Path(path).read_text(encoding="utf-8")
        for line in text.splitlines():
            if line.startswith("method="):
                reports.append(DiceReport.from_line(line))
    return reports


def cmd_report(args: argparse.Namespace) -> int:
    """Volume x method table of Dice scores; later lines win for repeated pairs"""
    reports = _read_reports(args.files)
    if not reports:
        raise UsageError("no Dice report lines found")

    methods: "OrderedDict[str, None]" = OrderedDict()
    scores: "OrderedDict[str, Dict[str, float]]" = OrderedDict()
    for r in reports:
        methods[r.method] = None
        scores.setdefault(r.volume, {})[r.method] = r.dice

    table = Table(title="Dice by volume and method")
    table.add_column("Volume", style="cyan")
    for method in methods:
        table.add_column(method, justify="right")
    for volume, row in scores.items():
        table.add_row(volume, *(f"{row[m]:.3f}" if m in row else "-" for m in methods))

    Console(width=args.width).print(table)
    return 0
