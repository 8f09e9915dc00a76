"""Three-level U-net (16/32/64 channels) with optional block-wise attention.

Attention can sit after the penultimate conv-BN-ReLU layer (decoder output at
half resolution, 16 x 32 x 32) or after the last one (16 x 64 x 64).
"""

from __future__ import annotations

import os
from typing import Optional

import numpy as np

from .. import tensor as T
from ..attention import AttentionConfig
from ..formats import ensure_dir, read_btf, read_kv, write_btf, write_kv
from .layers import BlockAttention, Conv1x1, ConvBNReLU
from .scenes import NUM_CLASSES

PLACEMENTS = ("none", "penultimate", "last")
ATTN_CHANNELS = 16


class UNet:
    def __init__(self, placement: str = "none", cfg: Optional[AttentionConfig] = None,
                 seed: int = 0, in_channels: int = 1, num_classes: int = NUM_CLASSES):
        if placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
        if placement != "none" and cfg is None:
            raise ValueError(f"placement {placement!r} needs an AttentionConfig")
        self.placement = placement
        self.cfg = cfg if placement != "none" else None
        self.seed = seed
        # separate streams so the conv weights do not depend on the placement
        conv_seq, attn_seq = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(conv_seq)
        self.modules = {
            "enc1.0": ConvBNReLU(in_channels, 16, rng), "enc1.1": ConvBNReLU(16, 16, rng),
            "enc2.0": ConvBNReLU(16, 32, rng), "enc2.1": ConvBNReLU(32, 32, rng),
            "bott.0": ConvBNReLU(32, 64, rng), "bott.1": ConvBNReLU(64, 64, rng),
            "dec2.0": ConvBNReLU(64 + 32, 32, rng), "dec2.1": ConvBNReLU(32, ATTN_CHANNELS, rng),
            "dec1.0": ConvBNReLU(ATTN_CHANNELS + 16, 16, rng), "dec1.1": ConvBNReLU(16, ATTN_CHANNELS, rng),
            "head": Conv1x1(ATTN_CHANNELS, num_classes, rng),
        }
        if self.cfg is not None:
            self.modules["attn"] = BlockAttention(ATTN_CHANNELS, self.cfg, np.random.default_rng(attn_seq))

    # -- parameters -----------------------------------------------------

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{m}.{k}": v for m, mod in self.modules.items() for k, v in mod.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{m}.{k}": v for m, mod in self.modules.items() for k, v in mod.grads.items()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{m}.{k}": v for m, mod in self.modules.items() for k, v in mod.buffers.items()}

    def parameter_count(self, include_attention: bool = True) -> int:
        return sum(v.size for k, v in self.named_params().items()
                   if include_attention or not k.startswith("attn."))

    def zero_grad(self):
        for mod in self.modules.values():
            mod.zero_grad()

    # -- forward / backward ---------------------------------------------

    def forward(self, x, training: bool = False, keep_beta: bool = False):
        m = self.modules
        x = np.asarray(x, dtype=np.float64)
        e1 = m["enc1.1"].forward(m["enc1.0"].forward(x, training), training)
        e2 = m["enc2.1"].forward(m["enc2.0"].forward(T.maxpool2x2(e1), training), training)
        b = m["bott.1"].forward(m["bott.0"].forward(T.maxpool2x2(e2), training), training)
        d2 = m["dec2.0"].forward(np.concatenate([T.upsample2x(b), e2], axis=1), training)
        d2 = m["dec2.1"].forward(d2, training)
        if self.placement == "penultimate":
            d2 = m["attn"].forward(d2, training, keep_beta)
        d1 = m["dec1.0"].forward(np.concatenate([T.upsample2x(d2), e1], axis=1), training)
        d1 = m["dec1.1"].forward(d1, training)
        if self.placement == "last":
            d1 = m["attn"].forward(d1, training, keep_beta)
        self._cache = (e1, e2, b.shape[1])
        return m["head"].forward(d1, training)

    def backward(self, g_logits):
        m = self.modules
        e1, e2, c_b = self._cache
        g = m["head"].backward(g_logits)
        if self.placement == "last":
            g = m["attn"].backward(g)
        g = m["dec1.0"].backward(m["dec1.1"].backward(g))
        g_up, g_e1 = g[:, :ATTN_CHANNELS], g[:, ATTN_CHANNELS:]
        g = T.upsample2x_backward(g_up)
        if self.placement == "penultimate":
            g = m["attn"].backward(g)
        g = m["dec2.0"].backward(m["dec2.1"].backward(g))
        g_up, g_e2 = g[:, :c_b], g[:, c_b:]
        g = T.upsample2x_backward(g_up)
        g = m["bott.0"].backward(m["bott.1"].backward(g))
        g = T.maxpool2x2_backward(g, e2) + g_e2
        g = m["enc2.0"].backward(m["enc2.1"].backward(g))
        g = T.maxpool2x2_backward(g, e1) + g_e1
        return m["enc1.0"].backward(m["enc1.1"].backward(g))

    def predict(self, x) -> np.ndarray:
        return self.forward(x, training=False).argmax(axis=1)

    # -- checkpoints ----------------------------------------------------

    def save(self, path) -> None:
        ensure_dir(path)
        tensors = {**self.named_params(), **self.named_buffers()}
        for name, value in tensors.items():
            write_btf(os.path.join(path, f"{name}.btf"), value)
        manifest = {"placement": self.placement, "seed": self.seed}
        if self.cfg is not None:
            manifest.update({f"attention.{k}": v for k, v in self.cfg.to_kv().items()})
        manifest["tensors"] = ",".join(tensors)
        write_kv(os.path.join(path, "manifest.txt"), manifest)

    @classmethod
    def load(cls, path) -> "UNet":
        kv = read_kv(os.path.join(path, "manifest.txt"))
        cfg = None
        if kv["placement"] != "none":
            cfg = AttentionConfig.from_kv({k[len("attention."):]: v for k, v in kv.items()
                                           if k.startswith("attention.")})
        model = cls(kv["placement"], cfg, seed=int(kv.get("seed", 0)))
        targets = {**model.named_params(), **model.named_buffers()}
        names = [n for n in kv["tensors"].split(",") if n]
        if set(names) != set(targets):
            raise ValueError(f"{path}: checkpoint tensors do not match the model layout")
        for name in names:
            value = read_btf(os.path.join(path, f"{name}.btf"))
            if value.shape != targets[name].shape:
                raise ValueError(f"{path}: tensor {name} has shape {value.shape}, expected {targets[name].shape}")
            targets[name][...] = value
        return model


def build_unet(placement: str = "none", cfg: Optional[AttentionConfig] = None, seed: int = 0) -> UNet:
    return UNet(placement, cfg, seed)
