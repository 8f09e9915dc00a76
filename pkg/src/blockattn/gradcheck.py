"""Reverse-mode gradients of the attention kernels and their finite-difference check."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import attention as att
from .attention import AttentionConfig, AttentionParams

EPS = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7
MAX_PROBES = 512


@dataclass
class GradReport:
    op: str
    max_rel_err: float
    max_abs_err: float
    probe_count: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < REL_TOL or self.max_abs_err < ABS_TOL

    def merge(self, other: "GradReport") -> "GradReport":
        return GradReport(self.op, max(self.max_rel_err, other.max_rel_err),
                          max(self.max_abs_err, other.max_abs_err),
                          self.probe_count + other.probe_count)


def format_reports(reports: list[GradReport]) -> str:
    width = max([len(r.op) for r in reports] + [2])
    lines = [f"{'op':<{width}}  {'max_rel_err':>12}  {'max_abs_err':>12}  {'probes':>7}  result"]
    for r in reports:
        lines.append(f"{r.op:<{width}}  {r.max_rel_err:12.3e}  {r.max_abs_err:12.3e}  "
                     f"{r.probe_count:7d}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


def reports_csv(reports: list[GradReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["op", "max_rel_err", "max_abs_err", "probe_count", "pass"])
    for r in reports:
        writer.writerow([r.op, repr(r.max_rel_err), repr(r.max_abs_err), r.probe_count, int(r.passed)])
    return buf.getvalue()


def finite_difference(fn: Callable[[np.ndarray], float], x, eps: float = EPS,
                      coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)``.

    With ``coords`` (flat indices) only those coordinates are probed and a 1-D
    array in the same order is returned; otherwise the full gradient.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    probe = np.arange(flat.size) if coords is None else np.asarray(coords)
    out = np.empty(len(probe))
    for n, i in enumerate(probe):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(x)
        flat[i] = orig - eps
        f_minus = fn(x)
        flat[i] = orig
        out[n] = (f_plus - f_minus) / (2 * eps)
    return out.reshape(x.shape) if coords is None else out


def compare(op: str, analytic, numeric) -> GradReport:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    abs_err = float(np.max(np.abs(a - n))) if a.size else 0.0
    scale = max(float(np.max(np.abs(a))) if a.size else 0.0, float(np.max(np.abs(n))) if n.size else 0.0)
    rel_err = abs_err / scale if scale > 0 else 0.0
    return GradReport(op, rel_err, abs_err, int(a.size))


# ---------------------------------------------------------------------------
# public adjoints


def backward_global_attention(x, p: AttentionParams, upstream_grad):
    out = att.global_self_attention(x, p, record=True)
    _check_upstream(out.features, upstream_grad)
    gx, grads = att.backprop_tape(out.tape, [p], upstream_grad)
    return gx, grads[0]


def backward_blockwise_attention(x, cfg: AttentionConfig, params, upstream_grad):
    """Gradients through ``cfg.layers`` block-wise layers.

    Returns ``(grad_x, grads)`` with one gradient set per distinct parameter
    set (a single summed set when ``cfg.share_params``).
    """
    layer_params = att._layer_params(cfg, params)
    out = att.stacked_attention(x, cfg, layer_params, record=True)
    _check_upstream(out.features, upstream_grad)
    gx, grads = att.backprop_tape(out.tape, layer_params, upstream_grad)
    if cfg.share_params and cfg.layers > 1 and len(_as_list(params)) == 1:
        grads = [_sum_grads(grads)]
    return gx, grads


def backward_crisscross_attention(x, p: AttentionParams, layers: int, upstream_grad):
    out = att.crisscross_attention(x, p, layers=layers, record=True)
    _check_upstream(out.features, upstream_grad)
    gx, grads = att.backprop_tape(out.tape, [p] * layers, upstream_grad)
    return gx, _sum_grads(grads)


def _as_list(params):
    return [params] if isinstance(params, AttentionParams) else list(params)


def _sum_grads(grads: list[AttentionParams]) -> AttentionParams:
    total = grads[0].zeros_like()
    for g in grads:
        for name, value in g.as_dict().items():
            getattr(total, name)[...] += value
    return total


def _check_upstream(features, upstream):
    if np.shape(upstream) != features.shape:
        raise att.ShapeError(f"upstream gradient {np.shape(upstream)} does not match output {features.shape}")


# ---------------------------------------------------------------------------
# certification


def _probe_coords(size: int, rng, max_probes: int) -> Optional[np.ndarray]:
    if size <= max_probes:
        return None
    return np.sort(rng.choice(size, size=max_probes, replace=False))


def check_kernel(op: str, forward: Callable, backward: Callable, x, params: list[AttentionParams],
                 rng, eps: float = EPS, max_probes: int = MAX_PROBES) -> GradReport:
    """Compare the analytic gradient of ``sum(upstream * forward(x, params))`` with central differences.

    ``forward(x, params)`` returns the output map; ``backward(x, params, g)``
    returns ``(grad_x, [grad per parameter set])``.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = rng.standard_normal(forward(x, params).shape)
    gx, gparams = backward(x, params, upstream)

    coords = _probe_coords(x.size, rng, max_probes)
    numeric = [finite_difference(lambda xx: float(np.sum(upstream * forward(xx, params))), x, eps, coords)]
    analytic = [gx.ravel() if coords is None else gx.ravel()[coords]]

    for index, (p, gp) in enumerate(zip(params, gparams)):
        for name, value in p.as_dict().items():
            def loss(v, name=name, index=index):
                trial = [q.copy() for q in params]
                getattr(trial[index], name)[...] = v
                return float(np.sum(upstream * forward(x, trial)))
            pc = _probe_coords(value.size, rng, max_probes)
            numeric.append(finite_difference(loss, value, eps, pc))
            ga = getattr(gp, name).ravel()
            analytic.append(ga if pc is None else ga[pc])
    # normwise over the whole gradient: some entries (e.g. key bias) are exactly zero
    return compare(op, np.concatenate([a.ravel() for a in analytic]),
                   np.concatenate([n.ravel() for n in numeric]))


def _random_params(channels, rng, count):
    return [AttentionParams.init(channels, 0.5, rng, out_init="uniform") for _ in range(count)]


def variant_checks():
    """``(op name, forward, backward, layer count, config)`` for every certified kernel."""
    out = [(
        "backward_global_attention",
        lambda x, ps, cfg=None: att.global_self_attention(x, ps[0]).features,
        lambda x, ps, g, cfg=None: (lambda r: (r[0], [r[1]]))(backward_global_attention(x, ps[0], g)),
        1, None,
    )]
    for layers in (1, 2):
        for mode in att.UPDATE_MODES:
            out.append((
                f"backward_blockwise_attention[n={layers},{mode}]",
                lambda x, ps, cfg: att.stacked_attention(x, cfg, ps).features,
                lambda x, ps, g, cfg: backward_blockwise_attention(x, cfg, ps, g),
                layers, mode,
            ))
    out.append((
        "backward_crisscross_attention",
        lambda x, ps, cfg=None: att.crisscross_attention(x, ps[0], layers=2).features,
        lambda x, ps, g, cfg=None: (lambda r: (r[0], [r[1]]))(backward_crisscross_attention(x, ps[0], 2, g)),
        1, None,
    ))
    return out


def run_gradchecks(seed: int = 0, instances: int = 20) -> list[GradReport]:
    """Certify every kernel on ``instances`` random small problems each."""
    reports = []
    for op, fwd, bwd, layers, mode in variant_checks():
        rng = np.random.default_rng([seed, len(reports)])
        report = None
        for _ in range(instances):
            channels = int(rng.choice([2, 4]))
            h, w = (int(v) for v in rng.integers(3, 8, size=2))
            cfg = None
            if mode is not None:
                block = int(rng.integers(2, 6))
                stride = int(rng.integers(max(1, block // 2), block + 1))
                cfg = AttentionConfig(block, stride, layers=layers, update_mode=mode)
            x = rng.standard_normal((channels, h, w))
            params = _random_params(channels, rng, layers)
            r = check_kernel(op, lambda xx, ps: fwd(xx, ps, cfg), lambda xx, ps, g: bwd(xx, ps, g, cfg),
                             x, params, rng)
            report = r if report is None else report.merge(r)
        reports.append(report)
    return reports
