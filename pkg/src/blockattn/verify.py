"""Self-check suite behind ``blockattn verify``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from .attention import AttentionConfig, AttentionParams
from .gradcheck import GradReport, format_reports, run_gradchecks

EQUIV_TOL = 1e-10
ROW_SUM_TOL = 1e-10


@dataclass
class Check:
    name: str
    value: float
    limit: float
    passed: bool


def _random_case(rng, max_c=8, max_hw=24):
    c = int(rng.integers(2, max_c + 1))
    h, w = (int(v) for v in rng.integers(1, max_hw + 1, size=2))
    x = rng.standard_normal((c, h, w))
    return x, AttentionParams.init(c, 0.5, rng, out_init="uniform")


def check_single_block_equivalence(seed: int = 0, instances: int = 20) -> Check:
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    for _ in range(instances):
        x, p = _random_case(rng)
        _, h, w = x.shape
        mode = att.UPDATE_MODES[int(rng.integers(2))]
        cfg = AttentionConfig(max(h, w), max(h, w), update_mode=mode)
        a = att.blockwise_attention_layer(x, cfg, p).features
        b = att.global_self_attention(x, p).features
        worst = max(worst, float(np.max(np.abs(a - b))))
    return Check("blockwise single block == global", worst, EQUIV_TOL, worst < EQUIV_TOL)


def _all_variants(x, rng):
    c, h, w = x.shape
    block = int(rng.integers(2, max(3, min(h, w)) + 1))
    stride = int(rng.integers(max(1, block // 2), block + 1))
    for layers in (1, 2):
        for mode in att.UPDATE_MODES:
            cfg = AttentionConfig(block, stride, layers=layers, update_mode=mode)
            params = [AttentionParams.init(c, 0.5, rng, out_init="uniform") for _ in range(layers)]
            yield f"blockwise n={layers} {mode}", lambda ps, cfg=cfg: att.stacked_attention(x, cfg, ps, keep_beta=True), params
    p = [AttentionParams.init(c, 0.5, rng, out_init="uniform")]
    yield "global", lambda ps: att.global_self_attention(x, ps[0], keep_beta=True), p
    yield "criss-cross", lambda ps: att.crisscross_attention(x, ps[0], layers=2, keep_beta=True), p


def check_beta_rows(seed: int = 0, instances: int = 10) -> Check:
    rng = np.random.default_rng([seed, 2])
    worst = 0.0
    for _ in range(instances):
        x, _ = _random_case(rng, max_c=6, max_hw=12)
        for _, run, params in _all_variants(x, rng):
            for layer in run(params).beta:
                for b in layer:
                    if b.matrix.min() < 0:
                        worst = max(worst, 1.0)
                    worst = max(worst, float(np.max(np.abs(b.matrix.sum(axis=1) - 1.0))))
    return Check("beta rows are distributions", worst, ROW_SUM_TOL, worst < ROW_SUM_TOL)


def check_residual_identity(seed: int = 0, instances: int = 10) -> Check:
    rng = np.random.default_rng([seed, 3])
    worst = 0.0
    for _ in range(instances):
        x, _ = _random_case(rng, max_c=6, max_hw=12)
        for _, run, params in _all_variants(x, rng):
            y = run(att.zero_value_path(params)).features
            worst = max(worst, float(np.max(np.abs(y - x))))
    return Check("zero value path is identity", worst, 0.0, worst == 0.0)


def run_verify(seed: int = 0, instances: int = 20) -> tuple[list[Check], list[GradReport]]:
    checks = [
        check_single_block_equivalence(seed, instances),
        check_beta_rows(seed),
        check_residual_identity(seed),
    ]
    return checks, run_gradchecks(seed, instances)


def format_checks(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{'check':<{width}}  {'value':>12}  {'limit':>12}  result"]
    for c in checks:
        lines.append(f"{c.name:<{width}}  {c.value:12.3e}  {c.limit:12.3e}  {'PASS' if c.passed else 'FAIL'}")
    return "\n".join(lines)


def verify_text(checks, reports) -> str:
    return format_checks(checks) + "\n\n" + format_reports(reports)
