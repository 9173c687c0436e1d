"""
Fiber Segmentation CLI
Command-line entry point: phantom generation, baselines, training, prediction and evaluation

Usage:
    python -m src.cli phantom tests/fixtures/phantom_small.spec out/small --lr-pair
    python -m src.cli baseline best out/small_lr_gray.vxg out/small_lr_label.vxg
    python -m src.cli train out/a_gray.vxg out/a_label.vxg out/model.ckpt --preset lr3d-shallow
"""
import argparse
import sys
from typing import List, Optional

from loguru import logger
from pydantic import ValidationError

from src.cli import commands
from src.fiberseg.errors import FiberSegError
from src.fiberseg.phantom import RESOLUTION_PITCH_UM
from src.fiberseg.train import PRESETS
from src.utils.config import settings
from src.utils.logging import setup_logging


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _add_seed(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help=f"Random seed (default: {settings.DEFAULT_SEED}, or the spec file's seed for phantom)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fiberseg",
        description="Segmentation of glass fibers in CT volumes of short-fiber reinforced polymers",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python -m src.cli phantom spec.txt out/a --seed 1
  python -m src.cli baseline otsu out/b_gray.vxg out/b_label.vxg
  python -m src.cli baseline rf out/b_gray.vxg out/b_label.vxg --train-gray out/a_gray.vxg --train-label out/a_label.vxg
  python -m src.cli train out/a_gray.vxg out/a_label.vxg out/m.ckpt --preset mr2d-shallow --iterations 2000
  python -m src.cli predict out/m.ckpt out/b_gray.vxg out/b_net
  python -m src.cli eval out/b_net_seg.vxg out/b_label.vxg
  python -m src.cli report results/*.txt
        """
    )
    parser.add_argument(
        "--log-level",
        default=None,
        help=f"Logging level (default: {settings.LOG_LEVEL})"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    # phantom
    p = sub.add_parser("phantom", help="Generate a synthetic gray/label volume pair")
    p.add_argument("specfile", help="Phantom spec file (key=value lines)")
    p.add_argument("out_stem", help="Output prefix; writes <stem>_gray.vxg and <stem>_label.vxg")
    p.add_argument("--lr-pair", action="store_true", help="Render the scene at MR and LR pitch")
    p.add_argument(
        "--lr-pitch",
        type=_positive_float,
        default=RESOLUTION_PITCH_UM["lr"],
        help=f"Voxel pitch of the LR render in µm (default: {RESOLUTION_PITCH_UM['lr']})"
    )
    _add_seed(p)
    p.set_defaults(handler=commands.cmd_phantom)

    # baseline
    p = sub.add_parser("baseline", help="Run a classical segmentation method and print its Dice report")
    p.add_argument("method", choices=["otsu", "best", "frangi", "rf"])
    p.add_argument("gray", help="Gray volume to segment")
    p.add_argument("label", help="Ground truth of the gray volume")
    p.add_argument("--train-gray", help="Training gray volume (frangi, rf)")
    p.add_argument("--train-label", help="Training labels (frangi, rf)")
    p.add_argument("--resolution", choices=["mr", "lr"], default="mr", help="Frangi scale set (default: mr)")
    p.add_argument("--trees", type=_positive_int, default=50, help="Random forest size (default: 50)")
    p.add_argument("--save-forest", help="Write the trained forest to this file")
    p.add_argument("--load-forest", help="Use a saved forest instead of training one")
    p.add_argument("--out", help="Write the segmentation to this VXG1 file")
    p.add_argument("--name", help="Volume label in the report (default: gray file stem)")
    _add_seed(p)
    p.set_defaults(handler=commands.cmd_baseline)

    # train
    p = sub.add_parser("train", help="Train a segmentation network")
    p.add_argument("gray", help="Training gray volume (normalized on load)")
    p.add_argument("label", help="Training labels")
    p.add_argument("out_checkpoint", help="Checkpoint file to write")
    p.add_argument("--preset", choices=sorted(PRESETS), help="Experiment preset")
    p.add_argument("--dim", type=int, choices=[2, 3], help="Network dimensionality (without --preset)")
    p.add_argument("--variant", choices=["shallow", "deep"], default="shallow")
    p.add_argument("--resolution", choices=["mr", "lr"], default="mr", help="Selects the default patch shape")
    p.add_argument("--iterations", type=int, help="Training iterations (default: 8000)")
    p.add_argument("--batch-size", type=int, help="Patches per step (default: 3)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default: 0.001)")
    p.add_argument("--patch", help="Patch shape z,y,x (2D patches use z=1)")
    p.add_argument("--fiber-prob", type=float, help="Probability of a fiber-centered patch (default: 0.5)")
    p.add_argument("--no-augment", action="store_true", help="Disable flips and rotations")
    p.add_argument("--log-every", type=int, help="Record / log every N iterations (default: 100)")
    p.add_argument("--log", help="Append iter=<n> loss=<f> secs=<f> lines to this file")
    _add_seed(p)
    p.set_defaults(handler=commands.cmd_train)

    # predict
    p = sub.add_parser("predict", help="Segment a volume with a trained network")
    p.add_argument("checkpoint")
    p.add_argument("gray", help="Raw gray volume (self-normalized)")
    p.add_argument("out_stem", help="Writes <stem>_prob.vxg and <stem>_seg.vxg")
    p.add_argument("--patch", help="3D tile shape z,y,x (default: 32 per axis, clipped to the volume)")
    p.add_argument("--stride", help="3D tile stride z,y,x (default: half the tile)")
    p.set_defaults(handler=commands.cmd_predict)

    # eval
    p = sub.add_parser("eval", help="Print the Dice report of a segmentation")
    p.add_argument("pred", help="Predicted labels")
    p.add_argument("label", help="Ground truth")
    p.add_argument("--method", help="Method label in the report (default: prediction file stem)")
    p.add_argument("--name", help="Volume label in the report (default: label file stem)")
    p.set_defaults(handler=commands.cmd_eval)

    # render
    p = sub.add_parser("render", help="Write a color-coded error map of one slice (P6 pixmap)")
    p.add_argument("pred")
    p.add_argument("label")
    p.add_argument("z", type=int, help="Slice index")
    p.add_argument("out", help="Output .ppm file")
    p.set_defaults(handler=commands.cmd_render)

    # report
    p = sub.add_parser("report", help="Tabulate Dice report lines by volume and method")
    p.add_argument("files", nargs="+", help="Files holding report lines ('-' for stdin)")
    p.add_argument("--width", type=_positive_int, default=None, help="Table width in characters")
    p.set_defaults(handler=commands.cmd_report)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments and run one subcommand

    Returns:
        0 on success, 1 on a runtime failure, 2 on a usage error
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(
        log_level=args.log_level or settings.LOG_LEVEL,
        log_format=settings.LOG_FORMAT,
        log_dir=settings.LOG_DIR or None,
    )

    try:
        return args.handler(args)
    except commands.UsageError as e:
        parser.error(str(e))
    except (FiberSegError, ValidationError, OSError) as e:
        logger.debug(f"{args.command} failed: {e!r}")
        print(f"error: {_one_line(e)}", file=sys.stderr)
        return 1
    return 2


def _one_line(e: Exception) -> str:
    if isinstance(e, ValidationError):
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        return f"{where}: {first['msg']}" if where else first["msg"]
    return " ".join(str(e).split())


if __name__ == "__main__":
    sys.exit(main())
