"""Trainable layers with hand-written backward passes for the toy U-net.

Every layer keeps its parameters in ``params`` and the matching gradients in
``grads`` (same keys).  ``forward`` caches what ``backward`` needs; a layer
handles one forward/backward pair at a time.
"""

from __future__ import annotations

import math

import numpy as np

from .. import tensor as T
from ..attention import AttentionConfig, AttentionParams, backprop_tape, stacked_attention


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0


class ConvBNReLU(Layer):
    """3x3 conv, batch norm, ReLU: one "layer" of the encoder/decoder."""

    def __init__(self, c_in: int, c_out: int, rng):
        super().__init__()
        std = math.sqrt(2.0 / (9 * c_in))
        self.params = {
            "conv.w": rng.normal(0.0, std, size=(c_out, c_in, 3, 3)),
            "conv.b": np.zeros(c_out),
            "bn.gamma": np.ones(c_out),
            "bn.beta": np.zeros(c_out),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.buffers = {"bn.running_mean": np.zeros(c_out), "bn.running_var": np.ones(c_out)}

    def forward(self, x, training: bool):
        p = self.params
        z, cols = T.conv3x3(x, p["conv.w"], p["conv.b"], return_cols=True)
        y, bn_cache = T.batchnorm2d(z, p["bn.gamma"], p["bn.beta"], self.buffers["bn.running_mean"],
                                    self.buffers["bn.running_var"], training=training)
        self._cache = (x.shape, cols, bn_cache, y)
        return T.relu(y)

    def backward(self, g):
        x_shape, cols, bn_cache, y = self._cache
        g = T.relu_backward(g, y)
        g, g_gamma, g_beta = T.batchnorm2d_backward(g, bn_cache)
        gx, gw, gb = T.conv3x3_backward(g, x_shape, self.params["conv.w"], cols)
        self.grads["conv.w"] += gw
        self.grads["conv.b"] += gb
        self.grads["bn.gamma"] += g_gamma
        self.grads["bn.beta"] += g_beta
        return gx


class Conv1x1(Layer):
    def __init__(self, c_in: int, c_out: int, rng):
        super().__init__()
        bound = 1.0 / math.sqrt(c_in)
        self.params = {"w": rng.uniform(-bound, bound, size=(c_out, c_in)), "b": np.zeros(c_out)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, training: bool):
        n, c, h, w = x.shape
        flat = x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
        self._cache = flat
        out = T.matmul(self.params["w"], flat) + self.params["b"][:, None]
        return out.reshape(-1, n, h, w).transpose(1, 0, 2, 3)

    def backward(self, g):
        flat = self._cache
        n, co, h, w = g.shape
        g2 = g.transpose(1, 0, 2, 3).reshape(co, n * h * w)
        self.grads["w"] += T.matmul(g2, flat.T)
        self.grads["b"] += g2.sum(axis=1)
        gx = T.matmul(self.params["w"].T, g2)
        return gx.reshape(-1, n, h, w).transpose(1, 0, 2, 3)


class BlockAttention(Layer):
    """Stacked block-wise attention applied to each sample of a batch."""

    FIELDS = ("query_w", "query_b", "key_w", "key_b", "value_w", "value_b", "out_w", "out_b")

    def __init__(self, channels: int, cfg: AttentionConfig, rng):
        super().__init__()
        self.cfg = cfg
        sets = 1 if cfg.share_params else cfg.layers
        for i in range(sets):
            p = AttentionParams.init(channels, cfg.embed_ratio, rng)
            for name, value in p.as_dict().items():
                self.params[f"{i}.{name}"] = value
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def layer_params(self) -> list[AttentionParams]:
        sets = 1 if self.cfg.share_params else self.cfg.layers
        ps = [AttentionParams(**{f: self.params[f"{i}.{f}"] for f in self.FIELDS}) for i in range(sets)]
        return ps * self.cfg.layers if self.cfg.share_params else ps

    def forward(self, x, training: bool, keep_beta: bool = False):
        ps = self.layer_params()
        outs, self._tapes, self.last_outputs = [], [], []
        self.last_inputs = list(x) if keep_beta else []
        for sample in x:
            out = stacked_attention(sample, self.cfg, ps, keep_beta=keep_beta, record=training)
            outs.append(out.features)
            self._tapes.append(out.tape)
            if keep_beta:
                self.last_outputs.append(out)
        return np.stack(outs)

    def backward(self, g):
        ps = self.layer_params()
        sets = 1 if self.cfg.share_params else self.cfg.layers
        gx = np.empty_like(g)
        for i, tape in enumerate(self._tapes):
            gx[i], grads = backprop_tape(tape, ps, g[i])
            for layer, gp in enumerate(grads):
                for name, value in gp.as_dict().items():
                    self.grads[f"{layer % sets}.{name}"] += value
        return gx
