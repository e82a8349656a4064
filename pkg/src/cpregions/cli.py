"""Command line pipeline: simulate, calibrate, predict, evaluate, export.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 id
alignment error, 5 format error. Outputs are written atomically
(temporary file plus rename). Set ``CPREGIONS_LOG`` to a level name to
see progress logging.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import calibrate as cal_mod
from . import evaluate as eval_mod
from .errors import (
    AlignmentError,
    CPRegionsError,
    DegenerateGrid,
    DimMismatch,
    EmptyCalibrationSet,
    EmptyLedger,
    FormatError,
    GeometryMismatch,
    InvalidAlpha,
    InvalidConfig,
    InvariantViolation,
    IoError,
    LengthMismatch,
    MalformedHeader,
    MissingField,
    MissingTensor,
    NonSPDMatrix,
    OutOfDomain,
    ShapeMismatch,
    UnsupportedDType,
    UnsupportedNoise,
)
from .regions import Ellipsoid, GridMask, HyperRect, region_from_json, region_to_json
from .synthetic import ScenarioConfig, write_scenario
from .tensor_io import load_dataset

log = logging.getLogger("cpregions")

_CONFIG_ERRORS = (InvalidConfig, InvalidAlpha)
_DATA_ERRORS = (
    IoError, MalformedHeader, UnsupportedDType, ShapeMismatch, MissingTensor,
    InvariantViolation, DimMismatch, NonSPDMatrix, OutOfDomain, DegenerateGrid,
    GeometryMismatch, EmptyCalibrationSet, EmptyLedger, MissingField,
    LengthMismatch, UnsupportedNoise,
)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)
    os.replace(tmp, path)


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _read_json(path, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise IoError(f"{what} not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvariantViolation(f"{what} is not valid JSON: {exc}") from exc


def cmd_simulate(args) -> int:
    config = ScenarioConfig.load(args.config)
    manifest = write_scenario(config, args.out)
    log.info("simulate: wrote %d examples under %s", config.n_examples, args.out)
    print(manifest)
    return 0


def cmd_calibrate(args) -> int:
    manifest, examples = load_dataset(args.data)
    if manifest.split != "calibration":
        raise InvariantViolation(
            f"calibrate expects a calibration split, manifest says "
            f"{manifest.split!r}")
    config = _read_json(args.config, "method config") if args.config else None
    calibrator = cal_mod.fit(args.method, examples, config)
    calibrator.save(args.out)
    log.info("calibrate: %s fitted on %d examples -> %s",
             args.method, len(examples), args.out)
    return 0


def cmd_predict(args) -> int:
    calibrator = cal_mod.Calibrator.load(args.calibrator)
    manifest, examples = load_dataset(args.data)
    if manifest.split != "test":
        raise InvariantViolation(
            f"predict expects a test split, manifest says {manifest.split!r}")
    alpha = float(args.alpha)
    records = []
    for ex in examples:
        region, info = calibrator.predict_with_info(ex, alpha)
        record = {"id": ex.id, "region": region_to_json(region),
                  "measure": region.measure()}
        record.update(info)
        records.append(record)
    _write_json(args.out, {
        "method": calibrator.method,
        "alpha": alpha,
        "records": records,
    })
    log.info("predict: %s at alpha=%.4g on %d examples -> %s",
             calibrator.method, alpha, len(records), args.out)
    return 0


def cmd_evaluate(args) -> int:
    doc = _read_json(args.regions, "regions file")
    for key in ("method", "alpha", "records"):
        if key not in doc:
            raise InvariantViolation(f"regions file missing key {key!r}")
    manifest, examples = load_dataset(args.data)
    by_id = {}
    for record in doc["records"]:
        if "id" not in record or "region" not in record:
            raise InvariantViolation("region record missing 'id' or 'region'")
        by_id[record["id"]] = record
    example_ids = [ex.id for ex in examples]
    missing = [i for i in example_ids if i not in by_id]
    extra = [i for i in by_id if i not in set(example_ids)]
    if missing or extra:
        raise AlignmentError(
            f"regions/manifest id mismatch: {len(missing)} examples without "
            f"regions, {len(extra)} regions without examples")
    regions = [region_from_json(by_id[i]["region"]) for i in example_ids]
    reports = eval_mod.build_reports(regions, examples)
    out = Path(args.out)
    _write_json(out / "report.json", eval_mod.reports_to_json(
        reports, doc["method"], float(doc["alpha"])))
    _write_text(out / "report.txt",
                eval_mod.render_text(reports, doc["method"], float(doc["alpha"])))
    log.info("evaluate: %s on %d examples -> %s",
             doc["method"], len(examples), out)
    return 0


# --- region export ---

def _svg_rect(cx, cy, wx, wy, style: str) -> str:
    return (f'<rect x="{cx - wx}" y="{cy - wy}" width="{2 * wx}" '
            f'height="{2 * wy}" {style}/>')


def _svg_ellipse(center, shape2, radius, style: str) -> str:
    vals, vecs = np.linalg.eigh(shape2)
    vals = np.maximum(vals, 0.0)
    semi = radius * np.sqrt(vals)
    angle = math.degrees(math.atan2(vecs[1, 1], vecs[0, 1]))
    return (f'<ellipse cx="0" cy="0" rx="{semi[1]}" ry="{semi[0]}" '
            f'transform="translate({center[0]},{center[1]}) '
            f'rotate({angle})" {style}/>')


def _slice_region(region, axis: int, coord: float):
    """2-D section of a 3-D region at ``axis = coord`` (or None if void)."""
    keep = [a for a in range(3) if a != axis]
    if isinstance(region, HyperRect):
        if region.empty or abs(coord - region.center[axis]) > region.half_widths[axis]:
            return None
        return HyperRect(region.center[keep], region.half_widths[keep])
    if isinstance(region, Ellipsoid):
        if region.empty:
            return None
        S = region.shape_matrix
        skk = S[axis, axis]
        cross = S[np.ix_(keep, [axis])]
        schur = S[np.ix_(keep, keep)] - cross @ cross.T / skk
        delta = coord - region.center[axis]
        rem = region.radius ** 2 - delta ** 2 / skk
        if rem <= 0:
            return None
        center = region.center[keep] + (cross[:, 0] / skk) * delta
        return Ellipsoid(center, 0.5 * (schur + schur.T), math.sqrt(rem))
    if isinstance(region, GridMask):
        idx = (coord - region.origin[axis]) / region.spacing[axis] + 0.5
        if idx < 0 or idx > region.included.shape[axis]:
            return None
        layer = min(int(idx), region.included.shape[axis] - 1)
        mask = np.take(region.included, layer, axis=axis)
        if not mask.any():
            return None
        return GridMask(region.origin[keep], region.spacing[keep], mask)
    raise FormatError(f"cannot slice region of type {type(region).__name__}")


def _render_svg(region) -> str:
    """SVG drawing of a 2-D region in mm coordinates."""
    style = 'fill="#4878a8" fill-opacity="0.55" stroke="#1d3a57" stroke-width="0.1"'
    body: list[str] = []
    bounds = None
    if region is None:
        body = ["<!-- empty slice -->"]
    elif isinstance(region, HyperRect):
        if not region.empty and np.all(np.isfinite(region.half_widths)):
            c, h = region.center, region.half_widths
            body = [_svg_rect(c[0], c[1], h[0], h[1], style)]
            bounds = (c - h, c + h)
        elif not region.empty:
            raise FormatError("cannot render an unbounded region")
        else:
            body = ["<!-- empty region -->"]
    elif isinstance(region, Ellipsoid):
        if not region.empty and math.isfinite(region.radius):
            body = [_svg_ellipse(region.center, region.shape_matrix,
                                 region.radius, style)]
            ext = region.radius * np.sqrt(np.diag(region.shape_matrix))
            bounds = (region.center - ext, region.center + ext)
        elif not region.empty:
            raise FormatError("cannot render an unbounded region")
        else:
            body = ["<!-- empty region -->"]
    elif isinstance(region, GridMask):
        if region.empty:
            body = ["<!-- empty region -->"]
        else:
            half = 0.5 * region.spacing
            cells = np.argwhere(region.included)
            mids = region.origin + cells * region.spacing
            body = [_svg_rect(m[0], m[1], half[0], half[1], style) for m in mids]
            bounds = (mids.min(axis=0) - half, mids.max(axis=0) + half)
    else:
        raise FormatError(f"cannot render region of type {type(region).__name__}")

    if bounds is None:
        view = "-1 -1 2 2"
    else:
        lo, hi = bounds
        margin = 0.05 * float(max(hi - lo)) + 1e-6
        lo = lo - margin
        size = hi - lo + margin
        view = f"{lo[0]} {lo[1]} {size[0]} {size[1]}"
    return ('<svg xmlns="http://www.w3.org/2000/svg" '
            f'viewBox="{view}">\n' + "\n".join(body) + "\n</svg>\n")


def cmd_export_region(args) -> int:
    doc = _read_json(args.infile, "regions file")
    records = doc.get("records", [])
    if args.id is None:
        if len(records) != 1:
            raise AlignmentError(
                "--id is required when the regions file holds more than one record")
        record = records[0]
    else:
        matches = [r for r in records if r.get("id") == args.id]
        if not matches:
            raise AlignmentError(f"no record with id {args.id!r}")
        record = matches[0]
    region = region_from_json(record["region"])

    if args.format == "json":
        _write_json(args.out, record["region"])
    elif args.format == "svg-slice":
        if region_dims(region) == 3:
            if args.axis is None or args.index is None:
                raise FormatError("3-D regions need --axis and --index for svg-slice")
            if not 0 <= args.axis <= 2:
                raise FormatError("--axis must be 0, 1 or 2")
            region = _slice_region(region, args.axis, float(args.index))
        _write_text(args.out, _render_svg(region))
    else:
        raise FormatError(f"unknown export format {args.format!r}")
    log.info("export-region: %s -> %s", args.format, args.out)
    return 0


def region_dims(region) -> int:
    return region.dims


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpregions",
        description="Calibrated prediction regions for localization outputs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="scenario config JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit a region method on a calibration split")
    p.add_argument("--method", required=True, choices=cal_mod.METHODS)
    p.add_argument("--data", required=True, help="calibration manifest JSON")
    p.add_argument("--config", default=None, help="method config JSON file")
    p.add_argument("--out", required=True, help="calibrator JSON path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="emit regions for a test split")
    p.add_argument("--calibrator", required=True)
    p.add_argument("--data", required=True, help="test manifest JSON")
    p.add_argument("--alpha", required=True, type=float,
                   help="miscoverage level in (0, 1)")
    p.add_argument("--out", required=True, help="regions JSON path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score emitted regions against a manifest")
    p.add_argument("--regions", required=True)
    p.add_argument("--data", required=True, help="test manifest JSON")
    p.add_argument("--out", required=True,
                   help="output directory (report.json + report.txt)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-region", help="export one region as JSON or SVG")
    p.add_argument("--in", dest="infile", required=True,
                   help="regions JSON from predict")
    p.add_argument("--id", default=None)
    p.add_argument("--format", required=True)
    p.add_argument("--axis", type=int, default=None,
                   help="slice axis for 3-D regions")
    p.add_argument("--index", type=float, default=None,
                   help="slice coordinate in mm along --axis")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_region)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("CPREGIONS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except AlignmentError as exc:
        print(f"alignment error: {exc}", file=sys.stderr)
        return 4
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 5
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except CPRegionsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
