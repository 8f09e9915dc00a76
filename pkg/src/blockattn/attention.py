"""Global, block-wise and criss-cross self-attention on ``[C, H, W]`` feature maps.

All kernels share one per-position recipe.  With ``X`` the ``[N, C]`` matrix
of positions in a region::

    Q, K, V = X Wq^T + bq, X Wk^T + bk, X Wv^T + bv      # [N, C']
    beta    = softmax_rows(Q K^T)                          # row j: query j over keys i
    Y       = (beta V) Wo^T + bo + X                       # back to C channels, residual

No ``1/sqrt(C')`` temperature is applied.  The block-wise kernel applies the
recipe inside ``B x B`` windows visited in raster order with stride ``s``; the
map is zero padded on the right/bottom so the window grid covers it, and the
padding is cropped from the result.

Each forward can record a *tape* (the per-block intermediates) that the
adjoints in this module replay; :mod:`blockattn.gradcheck` wraps them into the
public ``backward_*`` functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .tensor import ShapeError, as_feature_map, matmul, softmax_rows

SEQUENTIAL = "sequential-raster"
PARALLEL = "parallel-average"
UPDATE_MODES = (SEQUENTIAL, PARALLEL)

DEFAULT_MAX_ELEMENTS = 2 ** 28
# query rows per chunk when the global kernel streams its score matrix
_CHUNK_ELEMENTS = 2 ** 22


class ConfigError(ValueError):
    pass


class MemoryBudgetError(RuntimeError):
    pass


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    block_size: int
    stride: int
    layers: int = 1
    embed_ratio: float = 0.5
    update_mode: str = SEQUENTIAL
    share_params: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("block_size", "stride", "layers"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.stride > self.block_size:
            raise ConfigError(f"stride {self.stride} exceeds block size {self.block_size}")
        if not 0 < self.embed_ratio <= 1:
            raise ConfigError(f"embed_ratio must lie in (0, 1], got {self.embed_ratio}")
        if self.update_mode not in UPDATE_MODES:
            raise ConfigError(f"update_mode must be one of {UPDATE_MODES}, got {self.update_mode!r}")

    @property
    def overlapping(self) -> bool:
        return self.stride < self.block_size

    def to_kv(self) -> dict:
        return {
            "block_size": self.block_size,
            "stride": self.stride,
            "layers": self.layers,
            "update_mode": self.update_mode,
            "embed_ratio": repr(float(self.embed_ratio)),
            "share_params": int(self.share_params),
            "seed": self.seed,
        }

    @classmethod
    def from_kv(cls, kv: dict) -> "AttentionConfig":
        try:
            return cls(
                block_size=int(kv["block_size"]),
                stride=int(kv["stride"]),
                layers=int(kv.get("layers", 1)),
                embed_ratio=float(kv.get("embed_ratio", 0.5)),
                update_mode=kv.get("update_mode", SEQUENTIAL),
                share_params=bool(int(kv.get("share_params", 0))),
                seed=int(kv.get("seed", 0)),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config key {exc.args[0]!r}") from None
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None


def embed_channels(channels: int, ratio: float = 0.5) -> int:
    c_emb = int(math.floor(channels * ratio + 1e-12))
    if c_emb < 1:
        raise ConfigError(f"embedding {channels} x {ratio} leaves no channels")
    return c_emb


@dataclass
class AttentionParams:
    """Projection weights of one attention layer (1x1 convolutions as matrices)."""

    query_w: np.ndarray
    query_b: np.ndarray
    key_w: np.ndarray
    key_b: np.ndarray
    value_w: np.ndarray
    value_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    def __post_init__(self):
        c_emb, c = np.shape(self.query_w)
        expected = {
            "query_w": (c_emb, c), "key_w": (c_emb, c), "value_w": (c_emb, c),
            "query_b": (c_emb,), "key_b": (c_emb,), "value_b": (c_emb,),
            "out_w": (c, c_emb), "out_b": (c,),
        }
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ShapeError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @property
    def channels(self) -> int:
        return self.query_w.shape[1]

    @property
    def embed(self) -> int:
        return self.query_w.shape[0]

    @classmethod
    def init(cls, channels: int, embed_ratio: float = 0.5, rng=None,
             out_init: str = "zeros") -> "AttentionParams":
        """Q/K/V weights uniform in +-1/sqrt(C), zero biases.

        ``out_init="zeros"`` makes the layer start as the identity map;
        ``"uniform"`` draws the output projection from +-1/sqrt(C').
        """
        rng = np.random.default_rng(rng)
        c_emb = embed_channels(channels, embed_ratio)
        bound = 1.0 / math.sqrt(channels)

        def proj():
            return rng.uniform(-bound, bound, size=(c_emb, channels))

        query_w, key_w, value_w = proj(), proj(), proj()
        if out_init == "zeros":
            out_w = np.zeros((channels, c_emb))
        elif out_init == "uniform":
            out_w = rng.uniform(-1 / math.sqrt(c_emb), 1 / math.sqrt(c_emb), size=(channels, c_emb))
        else:
            raise ValueError(f"unknown out_init {out_init!r}")
        return cls(query_w, np.zeros(c_emb), key_w, np.zeros(c_emb), value_w, np.zeros(c_emb),
                   out_w, np.zeros(channels))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def zeros_like(self) -> "AttentionParams":
        return AttentionParams(**{k: np.zeros_like(v, dtype=np.float64) for k, v in self.as_dict().items()})

    def copy(self) -> "AttentionParams":
        return AttentionParams(**{k: np.array(v, copy=True) for k, v in self.as_dict().items()})

    def with_value_path_zeroed(self) -> "AttentionParams":
        z = self.copy()
        for name in ("value_w", "value_b", "out_w", "out_b"):
            getattr(z, name)[...] = 0
        return z

    def count(self) -> int:
        return sum(int(v.size) for v in self.as_dict().values())


@dataclass
class BlockBeta:
    """Attention matrix of one window; ``origin``/``size`` are in padded-map pixels."""

    origin: tuple[int, int]
    size: tuple[int, int]
    matrix: np.ndarray


@dataclass
class AttentionOutput:
    features: np.ndarray
    beta: Optional[list[list[BlockBeta]]] = None
    interactions: int = 0
    tape: Optional[list] = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]


# ---------------------------------------------------------------------------
# per-region recipe and its adjoint


def _softmax_backward(beta, grad_beta):
    return beta * (grad_beta - (grad_beta * beta).sum(axis=-1, keepdims=True))


def _project(X, p):
    q = matmul(X, p.query_w.T) + p.query_b
    k = matmul(X, p.key_w.T) + p.key_b
    v = matmul(X, p.value_w.T) + p.value_b
    return q, k, v


def _project_backward(X, p, gq, gk, gv, grads):
    gx = np.zeros_like(X)
    for g, w, wname, bname in ((gq, p.query_w, "query_w", "query_b"),
                               (gk, p.key_w, "key_w", "key_b"),
                               (gv, p.value_w, "value_w", "value_b")):
        getattr(grads, wname)[...] += matmul(g.T, X)
        getattr(grads, bname)[...] += g.sum(axis=0)
        gx += matmul(g, w)
    return gx


def _attend(X, p, record: bool, keep_beta: bool):
    """Attention update of the ``[N, C]`` positions ``X`` without the residual.

    Returns ``(delta, beta, cache)``; the layer output is ``X + delta``.
    """
    n = X.shape[0]
    q, k, v = _project(X, p)
    chunk = max(1, _CHUNK_ELEMENTS // n)
    if record or keep_beta or chunk >= n:
        beta = softmax_rows(matmul(q, k.T))
        agg = matmul(beta, v)
    else:
        beta = None
        agg = np.empty((n, v.shape[1]), dtype=v.dtype)
        kt = k.T
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            agg[start:stop] = matmul(softmax_rows(matmul(q[start:stop], kt)), v)
    delta = matmul(agg, p.out_w.T) + p.out_b
    cache = (X, q, k, v, beta, agg) if record else None
    return delta, (beta if keep_beta else None), cache


def _attend_backward(cache, gy, p, grads, residual: bool = True):
    X, q, k, v, beta, agg = cache
    grads.out_w[...] += matmul(gy.T, agg)
    grads.out_b[...] += gy.sum(axis=0)
    gagg = matmul(gy, p.out_w)
    gbeta = matmul(gagg, v.T)
    gv = matmul(beta.T, gagg)
    gs = _softmax_backward(beta, gbeta)
    gq = matmul(gs, k)
    gk = matmul(gs.T, q)
    gx = _project_backward(X, p, gq, gk, gv, grads)
    return gx + gy if residual else gx


# ---------------------------------------------------------------------------
# block geometry


def block_origins(dim: int, block: int, stride: int) -> tuple[list[int], int, int]:
    """Raster origins along one axis.

    Returns ``(origins, extent, padded_dim)``.  A block longer than the axis is
    clipped to it.  Otherwise ``ceil((dim - (block - stride)) / stride)`` blocks
    are placed at multiples of ``stride`` and the axis is padded to end at the
    last block.
    """
    if dim < 1 or block < 1 or stride < 1:
        raise ConfigError(f"zero-area block geometry (dim={dim}, block={block}, stride={stride})")
    if stride > block:
        raise ConfigError(f"stride {stride} exceeds block size {block}")
    if block >= dim:
        return [0], dim, dim
    count = max(1, -(-(dim - (block - stride)) // stride))
    origins = [i * stride for i in range(count)]
    return origins, block, origins[-1] + block


def block_grid(height: int, width: int, cfg: AttentionConfig):
    rows, bh, hp = block_origins(height, cfg.block_size, cfg.stride)
    cols, bw, wp = block_origins(width, cfg.block_size, cfg.stride)
    blocks = [(r, c) for r in rows for c in cols]
    return blocks, (bh, bw), (hp, wp)


def coverage_counts(height: int, width: int, cfg: AttentionConfig) -> np.ndarray:
    """How many windows cover each pixel of the padded map."""
    blocks, (bh, bw), (hp, wp) = block_grid(height, width, cfg)
    count = np.zeros((hp, wp))
    for r, c in blocks:
        count[r:r + bh, c:c + bw] += 1
    return count


# ---------------------------------------------------------------------------
# kernels


def _check_params(x, p):
    if p.channels != x.shape[0]:
        raise ShapeError(f"params expect {p.channels} channels, feature map has {x.shape[0]}")


def global_self_attention(x, p: AttentionParams, keep_beta: bool = False,
                          max_elements: int = DEFAULT_MAX_ELEMENTS,
                          record: bool = False) -> AttentionOutput:
    """Every position attends to every position of the map."""
    x = as_feature_map(x)
    _check_params(x, p)
    c, h, w = x.shape
    n = h * w
    if n * n > max_elements:
        raise MemoryBudgetError(
            f"global attention needs a {n}x{n} matrix ({n * n} elements > budget {max_elements}); "
            "use the block-wise kernel")
    X = x.reshape(c, n).T.copy()
    delta, beta, cache = _attend(X, p, record, keep_beta)
    y = X + delta
    out = AttentionOutput(np.ascontiguousarray(y.T.reshape(c, h, w)), interactions=n * n)
    if keep_beta:
        out.beta = [[BlockBeta((0, 0), (h, w), beta)]]
    if record:
        out.tape = [("global", cache)]
    return out


def _layer_forward(x, cfg, p, keep_beta, record, stop_at=None):
    c, h, w = x.shape
    blocks, (bh, bw), (hp, wp) = block_grid(h, w, cfg)
    buf = np.zeros((c, hp, wp), dtype=x.dtype)
    buf[:, :h, :w] = x
    betas, caches = [], []
    parallel = cfg.update_mode == PARALLEL
    if parallel:
        acc = np.zeros_like(buf)
        count = np.zeros((hp, wp))
    for index, (r, col) in enumerate(blocks):
        region = (slice(None), slice(r, r + bh), slice(col, col + bw))
        X = buf[region].reshape(c, bh * bw).T.copy()
        delta, beta, cache = _attend(X, p, record, keep_beta)
        delta = delta.T.reshape(c, bh, bw)
        if index == stop_at:
            return buf[region] + delta
        if keep_beta:
            betas.append(BlockBeta((r, col), (bh, bw), beta))
        caches.append(cache)
        if parallel:
            acc[region] += delta
            count[r:r + bh, col:col + bw] += 1
        else:
            buf[region] += delta
    # the residual stays outside the average so a zeroed value path is an exact identity
    out = buf + acc / count if parallel else buf
    tape = {"shape": (c, h, w), "blocks": blocks, "size": (bh, bw), "padded": (hp, wp),
            "mode": cfg.update_mode, "caches": caches, "count": count if parallel else None}
    interactions = len(blocks) * (bh * bw) ** 2
    return np.ascontiguousarray(out[:, :h, :w]), betas, (tape if record else None), interactions


def _layer_backward(tape, g, p, grads):
    c, h, w = tape["shape"]
    bh, bw = tape["size"]
    hp, wp = tape["padded"]
    G = np.zeros((c, hp, wp), dtype=np.float64)
    G[:, :h, :w] = g
    blocks, caches = tape["blocks"], tape["caches"]
    if tape["mode"] == PARALLEL:
        gavg = G / tape["count"]
        gx = G.copy()
        for (r, col), cache in zip(blocks, caches):
            region = (slice(None), slice(r, r + bh), slice(col, col + bw))
            gy = gavg[region].reshape(c, bh * bw).T
            gx[region] += _attend_backward(cache, gy, p, grads, residual=False).T.reshape(c, bh, bw)
    else:
        for (r, col), cache in zip(reversed(blocks), reversed(caches)):
            region = (slice(None), slice(r, r + bh), slice(col, col + bw))
            gy = G[region].reshape(c, bh * bw).T
            G[region] = _attend_backward(cache, gy, p, grads).T.reshape(c, bh, bw)
        gx = G
    return np.ascontiguousarray(gx[:, :h, :w])


def blockwise_attention_layer(x, cfg: AttentionConfig, p: AttentionParams,
                              keep_beta: bool = False, record: bool = False) -> AttentionOutput:
    """One layer of windowed attention over the raster-ordered block grid.

    ``sequential-raster`` lets every window read what earlier windows wrote;
    ``parallel-average`` reads the layer input everywhere and averages
    overlapping window outputs by coverage count.
    """
    x = as_feature_map(x)
    _check_params(x, p)
    y, betas, tape, interactions = _layer_forward(x, cfg, p, keep_beta, record)
    out = AttentionOutput(y, interactions=interactions)
    if keep_beta:
        out.beta = [betas]
    if record:
        out.tape = [("block", tape)]
    return out


def _layer_params(cfg: AttentionConfig, params) -> list[AttentionParams]:
    if isinstance(params, AttentionParams):
        params = [params]
    params = list(params)
    if cfg.share_params and len(params) == 1:
        return params * cfg.layers
    if len(params) != cfg.layers:
        raise ConfigError(f"config has {cfg.layers} layers but {len(params)} parameter sets were given")
    return params


def stacked_attention(x, cfg: AttentionConfig, params, keep_beta: bool = False,
                      record: bool = False) -> AttentionOutput:
    """``cfg.layers`` block-wise layers in sequence (1 = SAB, 2 = DAB)."""
    x = as_feature_map(x)
    layer_params = _layer_params(cfg, params)
    betas, tape, total = [], [], 0
    for p in layer_params:
        _check_params(x, p)
        x, beta, layer_tape, interactions = _layer_forward(x, cfg, p, keep_beta, record)
        betas.append(beta)
        tape.append(("block", layer_tape))
        total += interactions
    return AttentionOutput(x, beta=betas if keep_beta else None, interactions=total,
                           tape=tape if record else None)


def contextual_field(cfg: AttentionConfig) -> int:
    """Side of the region that can reach one window after ``cfg.layers`` layers.

    One layer sees its ``B x B`` window; each further layer adds a neighbouring
    window on either side, ``B + 2 s (n - 1)``.  Beyond two layers this is an
    extrapolation, and it assumes ``B/2 <= s < B`` so only the adjacent windows
    overlap.
    """
    return cfg.block_size + 2 * cfg.stride * (cfg.layers - 1)


def _cca_forward(x, p, keep_beta, record):
    c, h, w = x.shape
    n = h * w
    X = x.reshape(c, n).T.copy()
    q, k, v = _project(X, p)
    ce = q.shape[1]
    q3, k3, v3 = (a.reshape(h, w, ce) for a in (q, k, v))
    e_row = np.einsum("hwc,hvc->hwv", q3, k3)
    e_col = np.einsum("hwc,uwc->hwu", q3, k3)
    # the pixel itself is counted once, in its row
    e_col[np.arange(h), :, np.arange(h)] = -np.inf
    energy = np.concatenate([e_row, e_col], axis=-1)
    prob = np.exp(energy - energy.max(axis=-1, keepdims=True))
    prob /= prob.sum(axis=-1, keepdims=True)
    a_row, a_col = prob[..., :w], prob[..., w:]
    agg = np.einsum("hwv,hvc->hwc", a_row, v3) + np.einsum("hwu,uwc->hwc", a_col, v3)
    agg = agg.reshape(n, ce)
    y = matmul(agg, p.out_w.T) + p.out_b + X
    beta = None
    if keep_beta:
        dense = np.zeros((h, w, h, w))
        hh, ww = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        for col in range(w):
            dense[hh, ww, hh, col] = a_row[..., col]
        for row in range(h):
            dense[hh, ww, row, ww] += a_col[..., row]
        beta = [BlockBeta((0, 0), (h, w), dense.reshape(n, n))]
    cache = (X, q, k, v, prob, agg, (h, w)) if record else None
    return np.ascontiguousarray(y.T.reshape(c, h, w)), beta, cache, n * (h + w - 1)


def _cca_backward(cache, gy, p, grads):
    X, q, k, v, prob, agg, (h, w) = cache
    n, ce = q.shape
    grads.out_w[...] += matmul(gy.T, agg)
    grads.out_b[...] += gy.sum(axis=0)
    gagg = matmul(gy, p.out_w).reshape(h, w, ce)
    q3, k3, v3 = (a.reshape(h, w, ce) for a in (q, k, v))
    a_row, a_col = prob[..., :w], prob[..., w:]
    gprob = np.concatenate([np.einsum("hwc,hvc->hwv", gagg, v3),
                            np.einsum("hwc,uwc->hwu", gagg, v3)], axis=-1)
    gv = np.einsum("hwv,hwc->hvc", a_row, gagg) + np.einsum("hwu,hwc->uwc", a_col, gagg)
    ge = _softmax_backward(prob, gprob)
    ge_row, ge_col = ge[..., :w], ge[..., w:]
    gq = np.einsum("hwv,hvc->hwc", ge_row, k3) + np.einsum("hwu,uwc->hwc", ge_col, k3)
    gk = np.einsum("hwv,hwc->hvc", ge_row, q3) + np.einsum("hwu,hwc->uwc", ge_col, q3)
    return gy + _project_backward(X, p, gq.reshape(n, ce), gk.reshape(n, ce), gv.reshape(n, ce), grads)


def crisscross_attention(x, p: AttentionParams, layers: int = 2, keep_beta: bool = False,
                         record: bool = False) -> AttentionOutput:
    """Each pixel attends to the ``H + W - 1`` pixels of its row and column.

    The same parameters are reused for every one of ``layers`` passes.
    """
    if layers not in (1, 2):
        raise ConfigError(f"criss-cross attention supports 1 or 2 layers, got {layers}")
    x = as_feature_map(x)
    _check_params(x, p)
    betas, tape, total = [], [], 0
    for _ in range(layers):
        x, beta, cache, interactions = _cca_forward(x, p, keep_beta, record)
        betas.append(beta)
        tape.append(("cca", cache))
        total += interactions
    return AttentionOutput(x, beta=betas if keep_beta else None, interactions=total,
                           tape=tape if record else None)


def backprop_tape(tape, layer_params: list[AttentionParams], grad_out):
    """Reverse a recorded forward; returns ``(grad_x, [grads per layer])``."""
    if len(tape) != len(layer_params):
        raise ConfigError("tape and parameter list lengths differ")
    grads = [p.zeros_like() for p in layer_params]
    g = np.asarray(grad_out, dtype=np.float64)
    for (kind, entry), p, gp in zip(reversed(tape), reversed(layer_params), reversed(grads)):
        if kind == "block":
            g = _layer_backward(entry, g, p, gp)
        else:
            c, h, w = g.shape
            gy = g.reshape(c, h * w).T
            back = _attend_backward if kind == "global" else _cca_backward
            g = np.ascontiguousarray(back(entry, gy, p, gp).T.reshape(c, h, w))
    return g, grads


# ---------------------------------------------------------------------------
# attention maps and probing


def _propagate(vec, entries, shape):
    """One step of attention rollout: ``vec @ A`` for a layer's averaged attention."""
    h, w = shape
    hp = max(max(e.origin[0] + e.size[0] for e in entries), h)
    wp = max(max(e.origin[1] + e.size[1] for e in entries), w)
    count = np.zeros((hp, wp))
    for e in entries:
        r, c = e.origin
        count[r:r + e.size[0], c:c + e.size[1]] += 1
    src = np.zeros((hp, wp))
    src[:h, :w] = vec
    out = np.zeros((hp, wp))
    for e in entries:
        (r, c), (bh, bw) = e.origin, e.size
        weights = (src[r:r + bh, c:c + bw] / count[r:r + bh, c:c + bw]).ravel()
        if weights.any():
            out[r:r + bh, c:c + bw] += (weights @ e.matrix).reshape(bh, bw)
    return out[:h, :w]


def extract_attention_map(out: AttentionOutput, pixel: tuple[int, int],
                          layer: Optional[int] = None) -> np.ndarray:
    """Heat map of where ``pixel`` draws its features from.

    ``layer=k`` scatters the pixel's attention rows from layer ``k`` (averaged
    over the windows containing it).  By default the layers are chained from
    last to first, so a two-layer map shows the grown contextual field.
    """
    if out.beta is None:
        raise StateError("attention matrices were not retained; rerun with keep_beta=True")
    h, w = out.shape
    r, c = pixel
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"pixel {pixel} outside {h}x{w} map")
    vec = np.zeros((h, w))
    vec[r, c] = 1.0
    layers = range(len(out.beta) - 1, -1, -1) if layer is None else [layer]
    for k in layers:
        vec = _propagate(vec, out.beta[k], (h, w))
    return vec


def block_output(x, cfg: AttentionConfig, params, block_index: int) -> np.ndarray:
    """Raw (pre-averaging) output of one window in the last layer of a stack."""
    x = as_feature_map(x)
    layer_params = _layer_params(cfg, params)
    for p in layer_params[:-1]:
        x = _layer_forward(x, cfg, p, False, False)[0]
    return _layer_forward(x, cfg, layer_params[-1], False, False, stop_at=block_index)


def measure_contextual_field(cfg: AttentionConfig, params, shape: tuple[int, int],
                             block: Optional[tuple[int, int]] = None, seed: int = 0):
    """Probe which input pixels influence one window's output.

    Perturbs every pixel on the row and the column through the window centre
    and records the extent over which the window's output changes.  Returns
    ``(height, width)`` of that extent.  ``block`` is a (row, col) index into
    the window grid; the centre window by default.
    """
    layer_params = _layer_params(cfg, params)
    c = layer_params[0].channels
    h, w = shape
    rows, bh, _ = block_origins(h, cfg.block_size, cfg.stride)
    cols, bw, _ = block_origins(w, cfg.block_size, cfg.stride)
    bi, bj = block if block is not None else (len(rows) // 2, len(cols) // 2)
    index = bi * len(cols) + bj
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, h, w))
    ref = block_output(x, cfg, layer_params, index)
    centre_r = min(rows[bi] + bh // 2, h - 1)
    centre_c = min(cols[bj] + bw // 2, w - 1)
    bump = rng.standard_normal(c)

    def influenced(r, col):
        xp = x.copy()
        xp[:, r, col] += bump
        return bool(np.any(block_output(xp, cfg, layer_params, index) != ref))

    hit_rows = [r for r in range(h) if influenced(r, centre_c)]
    hit_cols = [col for col in range(w) if influenced(centre_r, col)]
    height = hit_rows[-1] - hit_rows[0] + 1 if hit_rows else 0
    width = hit_cols[-1] - hit_cols[0] + 1 if hit_cols else 0
    return height, width


def zero_value_path(params):
    """Parameter list with value/output projections zeroed (attention becomes identity)."""
    if isinstance(params, AttentionParams):
        return params.with_value_path_zeroed()
    return [p.with_value_path_zeroed() for p in params]


def with_mode(cfg: AttentionConfig, mode: str) -> AttentionConfig:
    return replace(cfg, update_mode=mode)
