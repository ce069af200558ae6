"""End-to-end flow computation, configuration and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clusters import AREA_THRESHOLD, MIN_MATCH_PIXELS, Route, build_clusters, pair_clusters
from .densify import (InterpolationParams, RefinementParams, assemble_seeds, edge_cost, interpolate,
                      refine)
from .descriptors import DescriptorParams, classify_pixels, dense_descriptors
from .errors import ContractError, HybridFlowError, NoSeedsError
from .graph import build_graph
from .imagery import FlowField, check_image, flow_metrics, read_flow
from .matching import MatchParams, deformable_match, path_follow_match, unmatched_nodes
from .sparse import (ORIGIN_SMALL, SeedSet, affine_consistency, match_pixels, ransac_fundamental,
                     seeds_from_superpixel_matches)
from .superpixel import DEFAULT_SUPERPIXEL_SIZE, slic, target_count

log = logging.getLogger(__name__)

CONFIG_ENV = "HYBRIDFLOW_CONFIG"
FLOW_EXTENSIONS = (".flo", ".png")


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline as one flat record."""

    # descriptors
    patch_size: int = 16
    cells: int = 4
    bins: int = 8
    descriptor_sigma: float = 8.0
    # clusters and superpixels
    area_threshold: int = AREA_THRESHOLD
    min_match_pixels: int = MIN_MATCH_PIXELS
    superpixel_size: float = DEFAULT_SUPERPIXEL_SIZE
    compactness: float = 10.0
    slic_iters: int = 10
    # graph matching
    alpha_step: float = 0.01
    max_inner_iters: int = 30
    inner_tol: float = 1e-6
    sinkhorn_iters: int = 50
    sinkhorn_tol: float = 1e-6
    deformable: bool = True
    deformable_rounds: int = 4
    unmatched_tau: float = 0.0
    edge_alignment: str = "max"
    # pixel matching and RANSAC
    stride: int = 2
    ratio: float = 0.9
    exclusion_radius: float = 3.0
    ransac_iters: int = 2000
    ransac_thresh_px: float = 1.0
    affine_tol: float = 3.0
    # interpolation
    knn: int = 25
    geodesic_eps: float = 0.01
    sigma_fraction: float = 1.0 / 3.0
    # refinement
    refine_outer: int = 5
    refine_sor: int = 30
    refine_alpha: float = 10.0
    refine_gamma: float = 5.0
    refine_omega: float = 1.85
    # run
    seed: int = 0
    jobs: int = 1

    def validate(self) -> "PipelineConfig":
        positive = ("patch_size", "cells", "bins", "descriptor_sigma", "area_threshold",
                    "min_match_pixels", "superpixel_size", "compactness", "slic_iters", "alpha_step",
                    "max_inner_iters", "inner_tol", "sinkhorn_iters", "sinkhorn_tol",
                    "deformable_rounds", "stride", "ratio", "ransac_iters", "ransac_thresh_px",
                    "affine_tol", "knn", "geodesic_eps", "sigma_fraction", "refine_outer",
                    "refine_sor", "refine_alpha", "refine_gamma", "jobs")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ContractError(f"config value {name} must be positive, got {getattr(self, name)}")
        if not 0 < self.refine_omega < 2:
            raise ContractError("refine_omega must lie in (0, 2)")
        if self.unmatched_tau < 0:
            raise ContractError("unmatched_tau must be >= 0 (0 selects 1/N)")
        if self.edge_alignment not in ("max", "aligned"):
            raise ContractError("edge_alignment must be 'max' or 'aligned'")
        return self

    # -- conversion -----------------------------------------------------

    def descriptor_params(self) -> DescriptorParams:
        return DescriptorParams(self.patch_size, self.cells, self.bins, self.descriptor_sigma)

    def match_params(self) -> MatchParams:
        return MatchParams(alpha_step=self.alpha_step, max_inner_iters=self.max_inner_iters,
                           inner_tol=self.inner_tol, sinkhorn_iters=self.sinkhorn_iters,
                           sinkhorn_tol=self.sinkhorn_tol, deformable=self.deformable,
                           rounds=self.deformable_rounds,
                           tau=self.unmatched_tau or None, edge_alignment=self.edge_alignment)

    def interpolation_params(self) -> InterpolationParams:
        return InterpolationParams(k=self.knn, eps=self.geodesic_eps, sigma_fraction=self.sigma_fraction)

    def refinement_params(self) -> RefinementParams:
        return RefinementParams(outer_iters=self.refine_outer, sor_iters=self.refine_sor,
                                alpha=self.refine_alpha, gamma=self.refine_gamma,
                                omega=self.refine_omega)

    # -- text form ------------------------------------------------------

    def update(self, pairs: dict[str, str]) -> "PipelineConfig":
        """Copy with ``key -> string value`` overrides; unknown keys raise."""
        types = {f.name: f.type for f in dataclasses.fields(self)}
        values = {}
        for key, raw in pairs.items():
            if key not in types:
                raise ContractError(f"unknown config key {key!r}")
            values[key] = _convert(key, types[key], raw)
        return dataclasses.replace(self, **values).validate()

    @classmethod
    def parse(cls, text: str, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        """Read flat ``key = value`` lines; ``#`` starts a comment."""
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"config line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            pairs[key] = value
        return (base or cls()).update(pairs)

    @classmethod
    def load(cls, path=None) -> "PipelineConfig":
        """Config from ``path``, else from ``$HYBRIDFLOW_CONFIG``, else defaults."""
        path = path or os.environ.get(CONFIG_ENV)
        if not path:
            return cls().validate()
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def _convert(key, typ, raw: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ContractError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from None


# ---------------------------------------------------------------------------
# run report


@dataclass
class RunReport:
    """Timings and counts of one pipeline run."""

    timings_ms: dict = field(default_factory=dict)
    seeds_by_origin: dict = field(default_factory=dict)
    clusters: dict = field(default_factory=dict)
    superpixels: int = 0
    unmatched_nodes: int = 0
    ransac_models: dict = field(default_factory=dict)
    metrics: dict | None = None

    @property
    def total_seeds(self) -> int:
        return int(sum(self.seeds_by_origin.values()))

    @property
    def runtime_ms(self) -> float:
        return float(sum(self.timings_ms.values()))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["total_seeds"] = self.total_seeds
        d["runtime_ms"] = self.runtime_ms
        return d


class _Timer:
    def __init__(self, report: RunReport, stage: str):
        self.report, self.stage = report, stage

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        ms = 1000.0 * (time.perf_counter() - self.t0)
        self.report.timings_ms[self.stage] = self.report.timings_ms.get(self.stage, 0.0) + ms


@dataclass
class PipelineResult:
    flow: FlowField
    report: RunReport
    labels1: np.ndarray
    labels2: np.ndarray
    seeds: SeedSet
    interpolated: FlowField
    superpixel_labels: np.ndarray


# ---------------------------------------------------------------------------
# per-pair work

@dataclass
class FramePair:
    """Both frames and their descriptor fields."""

    img1: np.ndarray
    img2: np.ndarray
    field1: np.ndarray
    field2: np.ndarray


# frames handed to forked workers without pickling
_SHARED: dict = {}


@dataclass
class PairOutcome:
    """Seeds and bookkeeping of one cluster pair."""

    index: int
    seeds: SeedSet
    matched: int = 0
    superpixels: int = 0
    unmatched: int = 0
    models: dict = field(default_factory=dict)
    sp_labels: list = field(default_factory=list)


def _pixel_route(frames, ys1, xs1, ys2, xs2, cfg, region_id, origin, out: PairOutcome) -> SeedSet:
    m = match_pixels((ys1, xs1), (ys2, xs2), frames.field1, frames.field2, cfg.stride, cfg.ratio,
                     cfg.exclusion_radius, region_id=region_id, origin=origin)
    out.matched += len(m)
    if not len(m):
        return m
    res = ransac_fundamental(np.stack([m.x1, m.y1], 1), np.stack([m.x2, m.y2], 1),
                             cfg.ransac_thresh_px, cfg.ransac_iters, cfg.seed, region_id)
    out.models[res.model] = out.models.get(res.model, 0) + 1
    return m.take(np.flatnonzero(res.inliers))


def match_pair(index: int, route: Route, region1, region2, frames: FramePair,
               cfg: PipelineConfig) -> PairOutcome:
    """Seeds for one routed cluster pair.

    Small pairs are matched pixel to pixel. Large pairs are split into
    superpixels, matched as graphs, filtered by affine consistency and then
    matched pixel to pixel inside each surviving superpixel pair; mask
    pieces too small to hold a superpixel are matched directly.
    """
    (ys1, xs1), (ys2, xs2) = region1, region2
    out = PairOutcome(index, SeedSet.empty())
    base = (index + 1) * 1_000_000
    if route is Route.SMALL:
        out.seeds = _pixel_route(frames, ys1, xs1, ys2, xs2, cfg, base, ORIGIN_SMALL, out)
        return out
    img1, img2, f1, f2 = frames.img1, frames.img2, frames.field1, frames.field2
    shape = img1.shape[:2]
    mask1 = np.zeros(shape, dtype=bool)
    mask1[ys1, xs1] = True
    mask2 = np.zeros(shape, dtype=bool)
    mask2[ys2, xs2] = True
    s = cfg.superpixel_size
    min_comp = int(s // 4)
    spm1 = slic(img1, mask1, target_count(len(ys1), s), cfg.compactness, cfg.slic_iters, min_comp)
    spm2 = slic(img2, mask2, target_count(len(ys2), s), cfg.compactness, cfg.slic_iters, min_comp)
    parts = []
    residual1 = mask1
    if spm1.count and spm2.count:
        g1 = build_graph(spm1, f1, img1)
        g2 = build_graph(spm2, f2, img2)
        mp = cfg.match_params()
        corr = deformable_match(g1, g2, mp) if cfg.deformable else path_follow_match(g1, g2, mp)
        un1, _ = unmatched_nodes(corr, mp.tau)
        pairs = corr.pairs()
        pairs = pairs[~np.isin(pairs[:, 0], un1)]
        matched = np.zeros(g1.n_nodes, dtype=bool)
        matched[pairs[:, 0]] = True
        partner = np.zeros_like(g1.pos)
        partner[pairs[:, 0]] = g2.pos[pairs[:, 1]]
        keep = affine_consistency(g1.pos, partner, g1.neighbors(), matched, base_tol=cfg.affine_tol)
        pairs = pairs[keep[pairs[:, 0]]]
        out.superpixels = spm1.count + spm2.count
        out.unmatched = int(len(un1))
        m = seeds_from_superpixel_matches(pairs, spm1.members(), spm2.members(), f1, f2, cfg.stride,
                                          cfg.ratio, cfg.exclusion_radius, cfg.ransac_thresh_px,
                                          cfg.ransac_iters, cfg.seed, base)
        out.matched += len(m)
        parts.append(m)
        out.sp_labels.append(spm1.labels)
        residual1 = spm1.residual
    if residual1.any():
        ry, rx = np.nonzero(residual1)
        parts.append(_pixel_route(frames, ry, rx, ys2, xs2, cfg, base + 999_999, ORIGIN_SMALL, out))
    out.seeds = SeedSet.concat(parts)
    return out


def _worker(job) -> PairOutcome:
    index, route, region1, region2, cfg = job
    return match_pair(index, route, region1, region2, _SHARED["frames"], cfg)


def _run_pairs(jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_worker(j) for j in jobs]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(_worker, jobs))


# ---------------------------------------------------------------------------
# orchestration


def compute(img1: np.ndarray, img2: np.ndarray, cfg: PipelineConfig | None = None) -> PipelineResult:
    """Dense flow from ``img1`` to ``img2`` (float RGB in ``[0, 1]``).

    Raises
    ------
    ContractError
        If the images differ in size or are malformed.
    NoSeedsError
        If filtering leaves no seed; ``stage`` names where the last ones were lost.
    """
    cfg = (cfg or PipelineConfig()).validate()
    img1 = check_image(img1)
    img2 = check_image(img2)
    if img1.shape != img2.shape:
        raise ContractError(f"image sizes differ: {img1.shape} vs {img2.shape}")
    report = RunReport()
    dp = cfg.descriptor_params()
    with _Timer(report, "descriptors"):
        field1 = dense_descriptors(img1, dp)
        field2 = dense_descriptors(img2, dp)
    with _Timer(report, "clusters"):
        labels1 = classify_pixels(field1)
        labels2 = classify_pixels(field2)
        pairs = pair_clusters(build_clusters(labels1), build_clusters(labels2),
                              cfg.area_threshold, cfg.min_match_pixels)
    report.clusters = {r.value: sum(p.route is r for p in pairs) for r in Route}
    jobs = [(p.index, p.route, (p.first.ys, p.first.xs), (p.second.ys, p.second.xs), cfg)
            for p in pairs if p.route is not Route.SKIPPED]
    _SHARED["frames"] = FramePair(img1, img2, field1, field2)
    try:
        with _Timer(report, "matching"):
            outcomes = _run_pairs(jobs, cfg.jobs)
    finally:
        _SHARED.clear()
    outcomes.sort(key=lambda o: o.index)
    seeds = assemble_seeds([o.seeds for o in outcomes])
    report.seeds_by_origin = seeds.count_by_origin()
    report.superpixels = int(sum(o.superpixels for o in outcomes))
    report.unmatched_nodes = int(sum(o.unmatched for o in outcomes))
    for o in outcomes:
        for k, v in o.models.items():
            report.ransac_models[k] = report.ransac_models.get(k, 0) + v
    if not len(seeds):
        if not jobs:
            stage = "cluster pairing"
        elif sum(o.matched for o in outcomes) == 0:
            stage = "pixel matching"
        else:
            stage = "ransac"
        raise NoSeedsError(stage)
    with _Timer(report, "interpolation"):
        dense = interpolate(seeds, edge_cost(img1), cfg.interpolation_params())
    with _Timer(report, "refinement"):
        flow = refine(dense, img1, img2, cfg.refinement_params())
    sp = np.full(labels1.shape, -1, dtype=np.int64)
    offset = 0
    for o in outcomes:
        for lab in o.sp_labels:
            sel = lab >= 0
            sp[sel] = lab[sel] + offset
            offset += int(lab.max()) + 1
    return PipelineResult(flow, report, labels1, labels2, seeds, dense, sp)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    frame: str
    epe: float | None = None
    fi: float | None = None
    seeds: int | None = None
    runtime_ms: float | None = None
    error: str | None = None


def _find_gt(gt_dir: Path, stem: str):
    for ext in FLOW_EXTENSIONS:
        cand = gt_dir / (stem + ext)
        if cand.exists():
            return cand
    return None


def evaluate(pred_dir, gt_dir, metric: str = "both") -> list[EvalRow]:
    """Per-frame metrics for every prediction in ``pred_dir``.

    Predictions and ground truth are paired by file stem; each file's
    format follows its extension. A ``<stem>.json`` report next to a
    prediction supplies the seed count and runtime columns. Frames with a
    missing or unreadable file get an ``error`` and no metrics.
    """
    if metric not in ("epe", "fi", "both"):
        raise ContractError(f"unknown metric {metric!r}")
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise OSError(f"not a directory: {pred_dir if not pred_dir.is_dir() else gt_dir}")
    rows = []
    for path in sorted(p for p in pred_dir.iterdir() if p.suffix.lower() in FLOW_EXTENSIONS):
        row = EvalRow(path.stem)
        rows.append(row)
        gt_path = _find_gt(gt_dir, path.stem)
        if gt_path is None:
            row.error = "missing ground truth"
            continue
        try:
            m = flow_metrics(read_flow(path), read_flow(gt_path))
        except (HybridFlowError, OSError, ValueError) as exc:
            row.error = f"{type(exc).__name__}: {exc}"
            continue
        if metric in ("epe", "both"):
            row.epe = m.epe_all
        if metric in ("fi", "both"):
            row.fi = m.fi_rate
        side = path.with_suffix(".json")
        if side.exists():
            try:
                info = json.loads(side.read_text())
                row.seeds = info.get("total_seeds")
                row.runtime_ms = info.get("runtime_ms")
            except (OSError, ValueError):
                pass
    return rows


def summarize(rows: list[EvalRow]) -> dict:
    ok = [r for r in rows if r.error is None]
    out = {"frames": len(rows), "failed": len(rows) - len(ok)}
    for key in ("epe", "fi"):
        vals = [getattr(r, key) for r in ok if getattr(r, key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


def _fmt(value, spec):
    return "" if value is None else format(value, spec)


def rows_to_csv(rows: list[EvalRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame", "epe", "fi", "seeds", "runtime_ms"])
    for r in rows:
        writer.writerow([r.frame, _fmt(r.epe, ".6f"), _fmt(r.fi, ".6f"), _fmt(r.seeds, "d"),
                         _fmt(r.runtime_ms, ".1f")])
    return buf.getvalue()


def rows_to_text(rows: list[EvalRow]) -> str:
    table = [["frame", "epe", "fi", "seeds", "runtime_ms", "status"]]
    for r in rows:
        table.append([r.frame, _fmt(r.epe, ".4f"), _fmt(r.fi, ".4f"), _fmt(r.seeds, "d"),
                      _fmt(r.runtime_ms, ".1f"), r.error or "ok"])
    s = summarize(rows)
    table.append(["mean", _fmt(s["epe"], ".4f"), _fmt(s["fi"], ".4f"), "", "",
                  f"{s['failed']} failed" if s["failed"] else "ok"])
    widths = [max(len(row[c]) for row in table) for c in range(len(table[0]))]
    return "".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() + "\n"
                   for row in table)
