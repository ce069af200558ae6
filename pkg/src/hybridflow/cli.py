"""Command line entry point: ``hybridflow compute | eval | viz``.

Exit codes are 0 on success, 1 on usage errors, 2 on data errors (bad or
missing inputs, no surviving seeds, partially failed evaluation) and 3 when
an internal invariant is violated.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import cv2
import numpy as np
from skimage.segmentation import find_boundaries

from .errors import HybridFlowError, InvariantViolation
from .imagery import flow_to_color, read_flow, read_image, to_gray, write_flow, write_image
from .pipeline import PipelineConfig, compute, evaluate, rows_to_csv, rows_to_text, summarize

log = logging.getLogger("hybridflow")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INVARIANT = 3


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _key_value(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("compute", help="estimate flow between two images")
    c.add_argument("img1", type=Path)
    c.add_argument("img2", type=Path)
    c.add_argument("-o", "--output", type=Path, required=True, help=".flo or KITTI .png output")
    c.add_argument("--config", type=Path, help="key=value config file (default: $HYBRIDFLOW_CONFIG)")
    c.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[],
                   metavar="KEY=VALUE", help="override one config entry")
    c.add_argument("--seed", type=int, help="global RNG seed")
    c.add_argument("--jobs", type=int, help="worker processes for cluster pairs")
    c.add_argument("--viz", type=Path, metavar="DIR", help="write all debug rasters to DIR")
    c.add_argument("--labels", type=Path, metavar="PNG", help="16-bit label map of frame 1")
    c.add_argument("--seeds", type=Path, metavar="PNG", help="seed overlay on frame 1")
    c.add_argument("--no-report", action="store_true", help="skip the <output>.json run report")

    e = sub.add_parser("eval", help="score predicted flows against ground truth")
    e.add_argument("--pred", type=Path, required=True)
    e.add_argument("--gt", type=Path, required=True)
    e.add_argument("--metric", choices=("epe", "fi", "both"), default="both")
    e.add_argument("--csv", type=Path, help="also write the table as CSV")

    v = sub.add_parser("viz", help="color-code a flow file")
    v.add_argument("flow", type=Path)
    v.add_argument("-o", "--output", type=Path, required=True)
    v.add_argument("--max-mag", type=float, help="magnitude of full saturation")
    return parser


# ---------------------------------------------------------------------------
# rasters


def write_labels(path, labels: np.ndarray) -> None:
    """Indexed label map as a 16-bit PNG; negative labels become 65535."""
    lab = np.where(labels < 0, 65535, labels)
    if lab.max(initial=0) > 65535:
        raise InvariantViolation("label index does not fit in 16 bits")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), lab.astype(np.uint16)):
        raise OSError(f"cannot write {path}")


def seed_overlay(image: np.ndarray, seeds) -> np.ndarray:
    """Gray frame with one pure red pixel per seed."""
    gray = 0.25 + 0.5 * to_gray(image)
    out = np.repeat(gray[:, :, None], 3, axis=2)
    out[np.asarray(seeds.y1, dtype=np.int64), np.asarray(seeds.x1, dtype=np.int64)] = (1.0, 0.0, 0.0)
    return out


def boundary_overlay(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    out = np.array(image, dtype=np.float64)
    out[find_boundaries(labels, mode="inner") & (labels >= 0)] = (1.0, 1.0, 0.0)
    return out


def _save(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_image(path, image)


# ---------------------------------------------------------------------------
# commands


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    cfg = cfg.update(dict(args.overrides))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    return cfg.validate()


def cmd_compute(args) -> int:
    cfg = _config(args)
    img1 = read_image(args.img1)
    img2 = read_image(args.img2)
    result = compute(img1, img2, cfg)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    write_flow(result.flow, args.output)
    log.info("wrote %s (%d seeds, %.0f ms)", args.output, result.report.total_seeds,
             result.report.runtime_ms)
    if not args.no_report:
        args.output.with_suffix(".json").write_text(json.dumps(result.report.to_dict(), indent=2))
    labels, seeds = args.labels, args.seeds
    if args.viz is not None:
        labels = labels or args.viz / "labels.png"
        seeds = seeds or args.viz / "seeds.png"
        _save(args.viz / "flow.png", flow_to_color(result.flow))
        _save(args.viz / "superpixels.png", boundary_overlay(img1, result.superpixel_labels))
    if labels is not None:
        write_labels(labels, result.labels1)
    if seeds is not None:
        _save(seeds, seed_overlay(img1, result.seeds))
    return EXIT_OK


def cmd_eval(args) -> int:
    rows = evaluate(args.pred, args.gt, args.metric)
    if not rows:
        print(f"no flow files in {args.pred}", file=sys.stderr)
        return EXIT_DATA
    sys.stdout.write(rows_to_text(rows))
    if args.csv is not None:
        args.csv.write_text(rows_to_csv(rows))
    for r in rows:
        if r.error:
            print(f"{r.frame}: {r.error}", file=sys.stderr)
    return EXIT_DATA if summarize(rows)["failed"] else EXIT_OK


def cmd_viz(args) -> int:
    if args.max_mag is not None and args.max_mag <= 0:
        print("--max-mag must be positive", file=sys.stderr)
        return EXIT_USAGE
    _save(args.output, flow_to_color(read_flow(args.flow), args.max_mag))
    return EXIT_OK


COMMANDS = {"compute": cmd_compute, "eval": cmd_eval, "viz": cmd_viz}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except InvariantViolation as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (HybridFlowError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
