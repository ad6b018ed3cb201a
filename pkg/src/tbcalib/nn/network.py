"""The segmentation network: encoder with dense blocks and a dilated
convolution module, multi-scale/multi-mode pooling, decoder with transposed
convolutions and skip connections, and two deep-supervision heads.

Spatial ladder for a 48^3 input: 48 -> 24 -> 12 -> 24 -> 48.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (AvgPool3d, ConvBnRelu, Conv3d, ConvTranspose3d, Layer,
                     MaxPool3d, Sigmoid, named_layers)


@dataclass
class Tensor4:
    """(channels, depth, height, width) values with paired gradient storage."""

    values: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError(f"Tensor4 must be 4D, got shape {self.values.shape}")
        if self.grad is not None and self.grad.shape != self.values.shape:
            raise ValueError("grad shape must match values")

    @property
    def shape(self):
        return self.values.shape

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad


@dataclass
class NetworkConfig:
    stem_channels: int = 8        # C0
    growth: int = 8               # dense-block growth rate
    dense_layers: int = 4
    enc1_channels: int = 16       # C1, 48^3 level
    enc2_channels: int = 32       # C2, 24^3 level
    dcm_channels: int = 64        # C3, dilated-module output
    lambdas: tuple = (0.5, 0.25)  # deep-supervision weights, 12^3 then 24^3 head
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        for name in ("stem_channels", "growth", "dense_layers",
                     "enc1_channels", "enc2_channels", "dcm_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(not 0 <= l <= 1 for l in self.lambdas):
            raise ValueError("lambdas must lie in [0, 1]")


def _split(arr, sizes, axis=0):
    return np.split(arr, np.cumsum(sizes)[:-1], axis=axis)


class DenseBlock(Layer):
    """n layers of 3^3 conv + BN + ReLU, each concatenating its g output
    channels onto the running feature stack; a 1^3 conv reduces the stack
    to out_ch."""

    def __init__(self, in_ch, out_ch, rng, growth=8, n_layers=4, dtype=np.float32,
                 bn_eps=1e-5, bn_momentum=0.9):
        super().__init__()
        self.in_ch = in_ch
        self.growth = growth
        self.layers = []
        ch = in_ch
        for _ in range(n_layers):
            self.layers.append(ConvBnRelu(ch, growth, 3, rng, padding=1,
                                          bn_eps=bn_eps, bn_momentum=bn_momentum,
                                          dtype=dtype))
            ch += growth
        self.pre_reduction_channels = ch
        self.reduce = ConvBnRelu(ch, out_ch, 1, rng, bn_eps=bn_eps,
                                 bn_momentum=bn_momentum, dtype=dtype)

    def forward(self, x, training):
        feats = [x]
        for layer in self.layers:
            inp = np.concatenate(feats, axis=0)
            feats.append(layer.forward(inp, training))
        self._sizes = [f.shape[0] for f in feats]
        pre = np.concatenate(feats, axis=0)
        return self.reduce.forward(pre, training)

    def backward(self, gy):
        gpre = self.reduce.backward(gy)
        gfeats = _split(gpre, self._sizes)
        gfeats = [g.copy() for g in gfeats]
        for i in range(len(self.layers), 0, -1):
            gin = self.layers[i - 1].backward(gfeats[i])
            for j, gpart in enumerate(_split(gin, self._sizes[:i])):
                gfeats[j] += gpart
        return gfeats[0]

    def children(self):
        d = {f"layer{i}": l for i, l in enumerate(self.layers)}
        d["reduce"] = self.reduce
        return d


class DilatedConvModule(Layer):
    """Three parallel 3^3 convolutions with dilation (and padding) 1, 2, 3,
    each BN + ReLU; outputs concatenated then reduced by a 1^3 conv."""

    def __init__(self, in_ch, out_ch, rng, branch_ch=None, dtype=np.float32,
                 bn_eps=1e-5, bn_momentum=0.9):
        super().__init__()
        branch_ch = branch_ch if branch_ch is not None else in_ch
        self.branch_ch = branch_ch
        self.branches = [
            ConvBnRelu(in_ch, branch_ch, 3, rng, dilation=d, padding=d,
                       bn_eps=bn_eps, bn_momentum=bn_momentum, dtype=dtype)
            for d in (1, 2, 3)
        ]
        self.reduce = ConvBnRelu(3 * branch_ch, out_ch, 1, rng, bn_eps=bn_eps,
                                 bn_momentum=bn_momentum, dtype=dtype)

    def forward(self, x, training):
        outs = [b.forward(x, training) for b in self.branches]
        return self.reduce.forward(np.concatenate(outs, axis=0), training)

    def backward(self, gy):
        gcat = self.reduce.backward(gy)
        gx = None
        for branch, g in zip(self.branches, _split(gcat, [self.branch_ch] * 3)):
            gb = branch.backward(np.ascontiguousarray(g))
            gx = gb if gx is None else gx + gb
        return gx

    def children(self):
        d = {f"branch{i + 1}": b for i, b in enumerate(self.branches)}
        d["reduce"] = self.reduce
        return d


class MultiPoolModule(Layer):
    """Four stride-2 pooling branches (2^3 max, 2^3 avg, 3^3 max with
    padding 1, 3^3 avg with padding 1) concatenated and reduced back to the
    input channel count by a 1^3 conv.  Spatial dims halve (must be even)."""

    def __init__(self, channels, rng, dtype=np.float32, bn_eps=1e-5, bn_momentum=0.9):
        super().__init__()
        self.channels = channels
        self.pools = [
            MaxPool3d(2, 2, 0),
            AvgPool3d(2, 2, 0),
            MaxPool3d(3, 2, 1),
            AvgPool3d(3, 2, 1),
        ]
        self.reduce = ConvBnRelu(4 * channels, channels, 1, rng, bn_eps=bn_eps,
                                 bn_momentum=bn_momentum, dtype=dtype)

    @staticmethod
    def check_even(x):
        if any(n % 2 for n in x.shape[1:]):
            raise ValueError(f"multi-pool needs even spatial dims, got {x.shape[1:]}")

    def branch_outputs(self, x):
        """Pool branch outputs before concatenation (shared shape)."""
        self.check_even(x)
        return [p.forward(x) for p in self.pools]

    def forward(self, x, training):
        outs = self.branch_outputs(x)
        shapes = {o.shape for o in outs}
        assert len(shapes) == 1, f"branch shapes diverge: {shapes}"
        return self.reduce.forward(np.concatenate(outs, axis=0), training)

    def backward(self, gy):
        gcat = self.reduce.backward(gy)
        gx = None
        for pool, g in zip(self.pools, _split(gcat, [self.channels] * 4)):
            gb = pool.backward(np.ascontiguousarray(g))
            gx = gb if gx is None else gx + gb
        return gx

    def children(self):
        return {"reduce": self.reduce}


class MFFNet:
    """Encoder-decoder segmentation net with feature-fusion modules and two
    deep-supervision heads (from the 12^3 bottleneck and the 24^3 decoder
    stage), each upsampled to the input resolution."""

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0,
                 dtype=np.float32, in_channels: int = 1):
        self.config = config or NetworkConfig()
        self.dtype = dtype
        cfg = self.config
        rng = np.random.default_rng(seed)
        bn = dict(bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum, dtype=dtype)
        c0, c1, c2, c3 = (cfg.stem_channels, cfg.enc1_channels,
                          cfg.enc2_channels, cfg.dcm_channels)
        self.stem = ConvBnRelu(in_channels, c0, 3, rng, padding=1, **bn)
        self.db1 = DenseBlock(c0, c1, rng, cfg.growth, cfg.dense_layers, dtype,
                              cfg.bn_eps, cfg.bn_momentum)
        self.mp1 = MultiPoolModule(c1, rng, **bn)
        self.db2 = DenseBlock(c1, c2, rng, cfg.growth, cfg.dense_layers, dtype,
                              cfg.bn_eps, cfg.bn_momentum)
        self.mp2 = MultiPoolModule(c2, rng, **bn)
        self.dcm = DilatedConvModule(c2, c3, rng, **bn)
        self.up1 = ConvTranspose3d(c3, c2, rng, dtype=dtype)
        self.dec1 = ConvBnRelu(2 * c2, c2, 3, rng, padding=1, **bn)
        self.up2 = ConvTranspose3d(c2, c1, rng, dtype=dtype)
        self.dec2 = ConvBnRelu(2 * c1, c1, 3, rng, padding=1, **bn)
        self.out_conv = Conv3d(c1, 1, 1, rng, dtype=dtype)
        self.out_sig = Sigmoid()
        # Deep-supervision heads: 1^3 conv to one channel, transposed-conv
        # upsampling back to input resolution, sigmoid.
        self.head12_conv = Conv3d(c3, 1, 1, rng, dtype=dtype)
        self.head12_up1 = ConvTranspose3d(1, 1, rng, dtype=dtype)
        self.head12_up2 = ConvTranspose3d(1, 1, rng, dtype=dtype)
        self.head12_sig = Sigmoid()
        self.head24_conv = Conv3d(c2, 1, 1, rng, dtype=dtype)
        self.head24_up = ConvTranspose3d(1, 1, rng, dtype=dtype)
        self.head24_sig = Sigmoid()
        self._c1, self._c2 = c1, c2
        self._forward_done = False

    def children(self):
        return {name: getattr(self, name) for name in (
            "stem", "db1", "mp1", "db2", "mp2", "dcm",
            "up1", "dec1", "up2", "dec2", "out_conv",
            "head12_conv", "head12_up1", "head12_up2", "head24_conv", "head24_up",
        )}

    def named_params(self):
        for lname, layer in named_layers(self):
            for pname, p in layer.params.items():
                yield f"{lname}.{pname}", p

    def named_buffers(self):
        for lname, layer in named_layers(self):
            for bname, b in layer.buffers.items():
                yield f"{lname}.{bname}", b

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()

    def forward(self, x, training=False):
        """x: (1, D, H, W) normalized cuboid with spatial dims divisible by 4.

        Returns (main, [aux_12, aux_24]) probability maps at input resolution.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4:
            raise ValueError(f"input must be (C, D, H, W), got shape {x.shape}")
        if any(n % 4 for n in x.shape[1:]):
            raise ValueError(f"spatial dims must be divisible by 4, got {x.shape[1:]}")
        t = self.stem.forward(x, training)
        s1 = self.db1.forward(t, training)
        p1 = self.mp1.forward(s1, training)
        s2 = self.db2.forward(p1, training)
        p2 = self.mp2.forward(s2, training)
        m = self.dcm.forward(p2, training)
        u1 = self.up1.forward(m)
        d1 = self.dec1.forward(np.concatenate([u1, s2], axis=0), training)
        u2 = self.up2.forward(d1)
        d2 = self.dec2.forward(np.concatenate([u2, s1], axis=0), training)
        main = self.out_sig.forward(self.out_conv.forward(d2))
        aux12 = self.head12_sig.forward(
            self.head12_up2.forward(self.head12_up1.forward(self.head12_conv.forward(m))))
        aux24 = self.head24_sig.forward(self.head24_up.forward(self.head24_conv.forward(d1)))
        self._forward_done = True
        return main, [aux12, aux24]

    def backward(self, grad_main, grad_aux):
        """Accumulate parameter gradients; returns the input gradient.

        grad_aux holds the gradients for the 12^3-head and 24^3-head
        outputs, in that order.
        """
        if not self._forward_done:
            raise RuntimeError("backward called before forward")
        dt = self.dtype
        g12, g24 = (np.asarray(g, dtype=dt) for g in grad_aux)
        gm = self.head12_conv.backward(self.head12_up1.backward(
            self.head12_up2.backward(self.head12_sig.backward(g12))))
        gd1_aux = self.head24_conv.backward(self.head24_up.backward(
            self.head24_sig.backward(g24)))
        gd2 = self.out_conv.backward(self.out_sig.backward(np.asarray(grad_main, dtype=dt)))
        gc2 = self.dec2.backward(gd2)
        gu2, gs1 = gc2[:self._c1], np.ascontiguousarray(gc2[self._c1:])
        gd1 = self.up2.backward(np.ascontiguousarray(gu2)) + gd1_aux
        gc1 = self.dec1.backward(gd1)
        gu1, gs2 = gc1[:self._c2], np.ascontiguousarray(gc1[self._c2:])
        gm = gm + self.up1.backward(np.ascontiguousarray(gu1))
        gp2 = self.dcm.backward(gm)
        gs2 = gs2 + self.mp2.backward(gp2)
        gp1 = self.db2.backward(gs2)
        gs1 = gs1 + self.mp1.backward(gp1)
        gt = self.db1.backward(gs1)
        self._forward_done = False
        return self.stem.backward(gt)
