"""Exact interaction counts per attention method, and a wall-clock harness.

An *interaction* is one query-key score evaluation.  The value aggregation
touches the same pairs and is not counted again.
"""

from __future__ import annotations

import csv
import io
import os
import statistics
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .attention import (AttentionConfig, AttentionParams, ConfigError, block_origins,
                        contextual_field, crisscross_attention, global_self_attention,
                        stacked_attention)
from .tensor import backend

METHODS = ("global-sa", "dan", "psa", "cca", "blockwise")
CSV_COLUMNS = ["method", "C", "H", "W", "B", "s", "n", "interactions", "contextual_field",
               "median_s", "mad_s"]


@dataclass(frozen=True)
class Geometry:
    C: int
    H: int
    W: int
    B: Optional[int] = None
    s: Optional[int] = None
    n: Optional[int] = None

    def __post_init__(self):
        for name in ("C", "H", "W"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def config(self) -> AttentionConfig:
        if self.B is None or self.s is None or self.n is None:
            raise ConfigError("blockwise counts need block size B, stride s and layer count n")
        return AttentionConfig(self.B, self.s, layers=self.n)


@dataclass(frozen=True)
class OpCountReport:
    method: str
    pairwise_interactions: int
    formula_text: str


def blockwise_grid(g: Geometry) -> tuple[int, int, int, int]:
    """``(grid_h, grid_w, block_h, block_w)`` for the padded raster grid."""
    cfg = g.config()
    rows, bh, _ = block_origins(g.H, cfg.block_size, cfg.stride)
    cols, bw, _ = block_origins(g.W, cfg.block_size, cfg.stride)
    return len(rows), len(cols), bh, bw


def count_interactions(method: str, g: Geometry) -> OpCountReport:
    h, w = g.H, g.W
    if method == "global-sa":
        return OpCountReport(method, (h * w) ** 2, f"{h}×{w}×{h}×{w}")
    if method == "dan":
        # position branch plus channel branch, written as 2H x W x H x W
        return OpCountReport(method, 2 * (h * w) ** 2, f"{2 * h}×{w}×{h}×{w}")
    if method == "psa":
        return OpCountReport(method, h * w * (2 * h - 1) * (2 * w - 1),
                             f"{h}×{w}×{2 * h - 1}×{2 * w - 1}")
    if method == "cca":
        layers = g.n if g.n is not None else 2
        return OpCountReport(method, h * w * (h + w - 1) * layers, f"{h}×{w}×{h + w - 1}×{layers}")
    if method == "blockwise":
        gh, gw, bh, bw = blockwise_grid(g)
        count = (bh * bw) ** 2 * gh * gw * g.n
        if bh == bw:
            text = f"{bh}²×{bh}²×{gh}×{gw}×{g.n}"
        else:
            text = f"({bh}×{bw})²×{gh}×{gw}×{g.n}"
        return OpCountReport(method, count, text)
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


def _csv_row(report: OpCountReport, g: Geometry, field=None, median=None, mad=None) -> list:
    blockwise = report.method == "blockwise"
    return [report.method, g.C, g.H, g.W,
            g.B if blockwise else "", g.s if blockwise else "", g.n if (blockwise or report.method == "cca") and g.n else "",
            report.pairwise_interactions, "" if field is None else field,
            "" if median is None else f"{median:.6f}", "" if mad is None else f"{mad:.6f}"]


def to_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(rows)
    return buf.getvalue()


def table_rows(g: Geometry) -> list[list]:
    """One row per method at geometry ``g`` (the complexity column of a comparison table)."""
    rows = []
    for method in METHODS:
        if method == "blockwise" and g.B is None:
            continue
        geom = g if method in ("blockwise", "cca") else Geometry(g.C, g.H, g.W)
        report = count_interactions(method, geom)
        field = contextual_field(g.config()) if method == "blockwise" else None
        rows.append(_csv_row(report, geom, field))
    return rows


def sweep(geometries: list[Geometry], configs: list[AttentionConfig]) -> str:
    """Blockwise counts for every geometry x config pair, geometry-major order."""
    if not geometries or not configs:
        raise ValueError("sweep needs at least one geometry and one config")
    rows = []
    for g in geometries:
        for cfg in configs:
            geom = Geometry(g.C, g.H, g.W, cfg.block_size, cfg.stride, cfg.layers)
            rows.append(_csv_row(count_interactions("blockwise", geom), geom, contextual_field(cfg)))
    return to_csv(rows)


class BenchResult(NamedTuple):
    median_seconds: float
    mad_seconds: float
    samples: list


def bench_threads() -> int:
    return int(os.environ.get("BLOCKATTN_THREADS", "1"))


def bench_wallclock(kernel: Callable[[], object], reps: int, warmup: int = 2,
                    threads: Optional[int] = None) -> BenchResult:
    """Median and median absolute deviation of ``reps`` timed calls after ``warmup`` calls."""
    if reps < 5:
        raise ValueError("bench_wallclock needs reps >= 5")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads if threads is not None else bench_threads()):
        for _ in range(warmup):
            kernel()
        samples = []
        for _ in range(reps):
            start = time.perf_counter()
            kernel()
            samples.append(time.perf_counter() - start)
    median = statistics.median(samples)
    mad = statistics.median(abs(t - median) for t in samples)
    return BenchResult(median, mad, samples)


def make_kernel(method: str, g: Geometry, seed: int = 0) -> Callable[[], object]:
    """Forward pass of ``method`` on a random feature map of geometry ``g`` (BLAS backend)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((g.C, g.H, g.W))
    if method == "blockwise":
        cfg = g.config()
        params = [AttentionParams.init(g.C, cfg.embed_ratio, rng, out_init="uniform")
                  for _ in range(cfg.layers)]

        def run():
            with backend("blas"):
                return stacked_attention(x, cfg, params)
    elif method == "global-sa":
        p = AttentionParams.init(g.C, 0.5, rng, out_init="uniform")

        def run():
            with backend("blas"):
                return global_self_attention(x, p)
    elif method == "cca":
        p = AttentionParams.init(g.C, 0.5, rng, out_init="uniform")
        layers = g.n if g.n in (1, 2) else 2

        def run():
            with backend("blas"):
                return crisscross_attention(x, p, layers=layers)
    else:
        raise ConfigError(f"no executable kernel for {method!r}")
    return run


def bench(methods: list[str], g: Geometry, reps: int = 20, seed: int = 0) -> str:
    """Timing CSV for the executable kernels at geometry ``g``."""
    rows = []
    for method in methods:
        result = bench_wallclock(make_kernel(method, g, seed), reps)
        geom = g if method in ("blockwise", "cca") else Geometry(g.C, g.H, g.W)
        field = contextual_field(g.config()) if method == "blockwise" else None
        rows.append(_csv_row(count_interactions(method, geom), geom, field,
                             result.median_seconds, result.mad_seconds))
    return to_csv(rows)
