"""Network assembly: multi-scale maxout blocks, pooling stages, dense head.

A block runs parallel branches of stacked [conv3x3 + batchnorm] units (branch
b has b units, so effective receptive fields grow 3/5/7/...) and merges them
with an elementwise maximum. The full network stacks five blocks with 2x2 max
pooling after the first three, then flatten -> FC -> relu -> FC logits.

Activations flow channels-last between layers; `Network.forward` accepts the
public (batch, channel, height, width) layout and transposes once at entry.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .rings import FilterBank


class Param:
    """A learnable tensor with its gradient buffer.

    `decay` marks parameters subject to L2 weight decay (conv/FC weights only;
    biases and batchnorm affine parameters are exempt).
    """

    def __init__(self, name, data, decay=False):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data)
        self.decay = decay

    @property
    def shape(self):
        return self.data.shape


class Conv3x3:
    """Conv layer; `feeds_batchnorm` marks convs whose output goes straight
    into batchnorm, where the bias is cancelled exactly by the mean
    subtraction. The bias parameter still exists but the add (gradient
    exactly zero) is skipped."""

    def __init__(self, name, in_ch, out_ch, rng, dtype, feeds_batchnorm=False):
        if in_ch <= 0 or out_ch <= 0:
            raise ValueError("channel counts must be positive")
        std = np.sqrt(2.0 / (in_ch * 9))
        w = rng.normal(0.0, std, size=(out_ch, in_ch, 3, 3)).astype(dtype)
        self.w = Param(f"{name}.w", w, decay=True)
        self.b = Param(f"{name}.b", np.zeros(out_ch, dtype=dtype))
        self.feeds_batchnorm = feeds_batchnorm
        self._x = None
        self._cols = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        self._x = x
        out, self._cols = nn.conv2d_fwd_nhwc(
            x, self.w.data,
            bias=None if self.feeds_batchnorm else self.b.data,
            keep_cols=True,
        )
        return out

    def backward(self, upstream, need_input_grad=True):
        gx, gw, gb = nn.conv2d_bwd_nhwc(
            self._x, self.w.data, upstream, need_input_grad,
            need_bias_grad=not self.feeds_batchnorm, cols_tiles=self._cols,
        )
        self._cols = None
        self.w.grad += gw
        if gb is not None:
            self.b.grad += gb
        return gx


class BatchNorm:
    def __init__(self, name, channels, dtype):
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.state = nn.BatchNormState(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, mode):
        out, self._cache = nn.batchnorm_nhwc(
            x, self.gamma.data, self.beta.data, self.state, mode
        )
        return out

    def backward(self, upstream):
        gx, gg, gb = nn.batchnorm_backward_nhwc(self._cache, upstream)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx


class Linear:
    def __init__(self, name, in_dim, out_dim, rng, dtype):
        std = np.sqrt(2.0 / in_dim)
        w = rng.normal(0.0, std, size=(in_dim, out_dim)).astype(dtype)
        self.w = Param(f"{name}.w", w, decay=True)
        self.b = Param(f"{name}.b", np.zeros(out_dim, dtype=dtype))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        self._x = x
        return nn.fully_connected(x, self.w.data, self.b.data)

    def backward(self, upstream):
        gx, gw, gb = nn.fully_connected_backward(self._x, self.w.data, upstream)
        self.w.grad += gw
        self.b.grad += gb
        return gx


class MultiScaleBlock:
    """Parallel conv+BN branches of depth 1..max_depth merged by maxout.

    The first conv of every branch maps in_ch -> out_ch; the remaining convs
    of a branch stay at out_ch, so all branches emit the same shape.
    """

    def __init__(self, name, in_ch, out_ch, max_depth, rng, dtype):
        if max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if in_ch <= 0 or out_ch <= 0:
            raise ValueError("channel counts must be positive")
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.max_depth = max_depth
        self.branches = []
        for depth in range(1, max_depth + 1):
            units = []
            for u in range(depth):
                unit_name = f"{name}.b{depth}.u{u}"
                conv = Conv3x3(unit_name + ".conv", in_ch if u == 0 else out_ch,
                               out_ch, rng, dtype, feeds_batchnorm=True)
                bn = BatchNorm(unit_name + ".bn", out_ch, dtype)
                units.append((conv, bn))
            self.branches.append(units)
        self._arg = None

    def params(self):
        out = []
        for units in self.branches:
            for conv, bn in units:
                out.extend(conv.params())
                out.extend(bn.params())
        return out

    def conv_layers(self):
        return [conv for units in self.branches for conv, _ in units]

    def bn_layers(self):
        return [bn for units in self.branches for _, bn in units]

    def forward(self, x, mode):
        outs = []
        for units in self.branches:
            h = x
            for conv, bn in units:
                h = bn.forward(conv.forward(h), mode)
            outs.append(h)
        if len(outs) == 1:
            self._arg = None
            return outs[0]
        out, self._arg = nn.maxout(outs)
        return out

    def backward(self, upstream, need_input_grad=True):
        if len(self.branches) == 1:
            branch_grads = [upstream]
        else:
            branch_grads = nn.maxout_backward(self._arg, len(self.branches), upstream)
        gx = None
        for units, g in zip(self.branches, branch_grads):
            for i, (conv, bn) in enumerate(reversed(units)):
                g = bn.backward(g)
                last = i == len(units) - 1
                g = conv.backward(g, need_input_grad=need_input_grad or not last)
            if need_input_grad:
                gx = g if gx is None else gx + g
        return gx


class Network:
    """Five multi-scale blocks with pooling after the first three, dense head."""

    def __init__(self, channels, n_classes, input_channels=1, max_depth=3,
                 input_size=32, fc_dim=1024, seed=0, dtype=np.float32):
        channels = tuple(int(c) for c in channels)
        if len(channels) != 5:
            raise ValueError(f"need 5 block widths, got {len(channels)}")
        if any(c <= 0 for c in channels):
            raise ValueError("channel counts must be positive")
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        if input_size % 8 != 0:
            raise ValueError(f"input size must be divisible by 8, got {input_size}")
        self.channels = channels
        self.n_classes = int(n_classes)
        self.input_channels = int(input_channels)
        self.max_depth = int(max_depth)
        self.input_size = int(input_size)
        self.fc_dim = int(fc_dim)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)

        rng = np.random.default_rng(seed)
        self.blocks = []
        in_ch = input_channels
        for i, out_ch in enumerate(channels, start=1):
            self.blocks.append(
                MultiScaleBlock(f"block{i}", in_ch, out_ch, max_depth, rng, self.dtype)
            )
            in_ch = out_ch
        self.pool_after = (0, 1, 2)  # block indices followed by 2x2 pooling
        feat = input_size // 8
        self.flat_dim = feat * feat * channels[-1]
        self.fc1 = Linear("fc1", self.flat_dim, fc_dim, rng, self.dtype)
        self.fc2 = Linear("fc2", fc_dim, n_classes, rng, self.dtype)
        self._pool_caches = [None] * len(self.pool_after)
        self._relu_in = None
        self._conv_out_shape = None

    def config(self):
        return {
            "channels": list(self.channels),
            "n_classes": self.n_classes,
            "input_channels": self.input_channels,
            "max_depth": self.max_depth,
            "input_size": self.input_size,
            "fc_dim": self.fc_dim,
            "seed": self.seed,
            "dtype": self.dtype.name,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(
            cfg["channels"], cfg["n_classes"], cfg["input_channels"],
            cfg["max_depth"], cfg["input_size"], cfg["fc_dim"],
            cfg.get("seed", 0), np.dtype(cfg.get("dtype", "float32")),
        )

    def parameters(self):
        out = []
        for block in self.blocks:
            out.extend(block.params())
        out.extend(self.fc1.params())
        out.extend(self.fc2.params())
        return out

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0

    def forward(self, x, mode="train"):
        """Logits for a (N, C, H, W) batch. mode controls batchnorm."""
        if x.shape[1:] != (self.input_channels, self.input_size, self.input_size):
            raise nn.ShapeError(
                f"expected (N, {self.input_channels}, {self.input_size}, "
                f"{self.input_size}) input, got {x.shape}"
            )
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        pool_i = 0
        for i, block in enumerate(self.blocks):
            h = block.forward(h, mode)
            if i in self.pool_after:
                shape = h.shape
                h, arg = nn.maxpool2d_nhwc(h)
                self._pool_caches[pool_i] = (arg, shape)
                pool_i += 1
        self._conv_out_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        h = self.fc1.forward(h)
        self._relu_in = h
        h = nn.relu(h)
        return self.fc2.forward(h)

    def backward(self, grad_logits):
        """Accumulates gradients of all parameters; call zero_grad() first."""
        g = self.fc2.backward(grad_logits)
        g = nn.relu_backward(self._relu_in, g)
        g = self.fc1.backward(g)
        g = g.reshape(self._conv_out_shape)
        pool_i = len(self.pool_after) - 1
        for i in range(len(self.blocks) - 1, -1, -1):
            if i in self.pool_after:
                arg, shape = self._pool_caches[pool_i]
                g = nn.maxpool2d_backward_nhwc(arg, shape, g)
                pool_i -= 1
            g = self.blocks[i].backward(g, need_input_grad=i > 0)
        return [p.grad for p in self.parameters()]

    def argmax_signature(self):
        """Argmax maps of every maxout/pool from the most recent forward.

        Two forward passes whose signatures agree saw no tie flips, so the
        network behaved as one fixed linear-region selection between them.
        """
        sig = [b._arg for b in self.blocks if b._arg is not None]
        sig.extend(arg for arg, _ in self._pool_caches if arg is not None)
        sig.append(self._relu_in > 0)
        return sig

    def bn_states(self):
        out = []
        for block in self.blocks:
            out.extend((bn.gamma.name.rsplit(".", 1)[0], bn.state) for bn in block.bn_layers())
        return out


def build_block(in_ch, out_ch, max_depth=3, seed=0, dtype=np.float32):
    """Standalone multi-scale block (ablations use max_depth of 2, 3 or 4)."""
    if max_depth not in (1, 2, 3, 4):
        raise ValueError(f"max_depth must be in 1..4, got {max_depth}")
    rng = np.random.default_rng(seed)
    return MultiScaleBlock("block", in_ch, out_ch, max_depth, rng, dtype)


def build_network(channels, n_classes, input_channels=1, max_depth=3,
                  input_size=32, fc_dim=1024, seed=0, dtype=np.float32):
    return Network(channels, n_classes, input_channels, max_depth,
                   input_size, fc_dim, seed, dtype)


def collect_filter_bank(net):
    """Bank over every conv slice, ordered (block, branch, unit); live views."""
    entries = []
    for block in net.blocks:
        for conv in block.conv_layers():
            entries.append((conv.w.name.rsplit(".", 1)[0], conv.w.data))
    return FilterBank(entries)
