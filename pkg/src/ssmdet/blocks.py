"""Detector building blocks.

Modules own their parameters (taped tensors) and running buffers, take an
explicit numpy Generator for deterministic builds, and are immutable
after construction: concurrent forward calls are safe, training updates
are single-writer. Convolution weights initialize uniform in
+-sqrt(1/fan_in), norm gains to 1, shifts to 0.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from . import tensor as T
from .ssm import cross_merge, cross_scan, ssm_scan
from .tensor import ShapeError, Tensor

__all__ = [
    "BatchNorm",
    "Conv2dLayer",
    "ConvBnAct",
    "EcaConv",
    "EcaConvBlock",
    "EcaCsp",
    "Ffn",
    "LayerNorm",
    "Module",
    "ModuleList",
    "SimVss",
    "Stem",
    "Vss",
    "adaptive_kernel",
    "channel_map_phi",
    "conv_flops",
    "parameter",
    "strip_ratio",
]


def parameter(data, dtype=None) -> Tensor:
    t = Tensor(data, dtype=dtype)
    t.requires_grad = True
    return t


class Module:
    """Minimal parameter container with hierarchical naming."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array: np.ndarray) -> None:
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def num_params(self) -> int:
        return sum(int(p.data.size) for _, p in self.named_parameters())

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# ---- init + accounting helpers ---------------------------------------------

def _conv_weight(rng, c_out, c_in_per_group, kh, kw, dtype) -> Tensor:
    fan_in = c_in_per_group * kh * kw
    bound = math.sqrt(1.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, (c_out, c_in_per_group, kh, kw)), dtype)


def _out_hw(hw, kernel, stride):
    pad = kernel // 2
    return tuple((s + 2 * pad - kernel) // stride + 1 for s in hw)


def conv_flops(c_in, c_out, kernel, groups, out_hw) -> int:
    """Multiply-adds x2 for one convolution; norms/activations ignored."""
    ho, wo = out_hw
    return 2 * kernel * kernel * (c_in // groups) * c_out * ho * wo


# ---- elementary layers ------------------------------------------------------

class Conv2dLayer(Module):
    def __init__(self, rng, c_in, c_out, kernel=1, stride=1, groups=1, bias=True,
                 dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.groups = kernel, stride, groups
        self.pad = kernel // 2
        self.weight = _conv_weight(rng, c_out, c_in // groups, kernel, kernel, dtype)
        self.bias = parameter(np.zeros(c_out), dtype) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)

    def flops(self, hw):
        out = _out_hw(hw, self.kernel, self.stride)
        return conv_flops(self.c_in, self.c_out, self.kernel, self.groups, out), out


class BatchNorm(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.03, dtype=np.float32):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gain = parameter(np.ones(channels), dtype)
        self.shift = parameter(np.zeros(channels), dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return ops.batch_norm(x, self.gain, self.shift, self.running_mean,
                              self.running_var, self.training, self.eps, self.momentum)


class LayerNorm(Module):
    def __init__(self, channels, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gain = parameter(np.ones(channels), dtype)
        self.shift = parameter(np.zeros(channels), dtype)

    def forward(self, x):
        return ops.layer_norm(x, self.gain, self.shift, self.eps)


class ConvBnAct(Module):
    """Conv (no bias) -> batch norm -> SiLU, the detector's standard unit."""

    def __init__(self, rng, c_in, c_out, kernel=1, stride=1, groups=1, act=True,
                 dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.groups = kernel, stride, groups
        self.pad = kernel // 2
        self.act = act
        self.weight = _conv_weight(rng, c_out, c_in // groups, kernel, kernel, dtype)
        self.norm = BatchNorm(c_out, dtype=dtype)

    def forward(self, x):
        y = ops.conv2d(x, self.weight, None, self.stride, self.pad, self.groups)
        y = self.norm(y)
        return ops.silu(y) if self.act else y

    def flops(self, hw):
        out = _out_hw(hw, self.kernel, self.stride)
        return conv_flops(self.c_in, self.c_out, self.kernel, self.groups, out), out


# ---- channel attention ------------------------------------------------------

def strip_ratio(channels: int) -> float:
    """Fraction of post-conv channels routed through attention."""
    if channels < 1:
        raise ValueError(f"strip_ratio: channel count {channels} must be >= 1")
    return min(1.0, max(0.1, math.log2(channels) / 10.0))


def adaptive_kernel(c_hat: int, gamma: int = 2, b: int = 1) -> int:
    """1D attention kernel size mapped from the attended channel count.

    (log2(c_hat) + b) / gamma, rounded down to the nearest odd integer,
    minimum 1.
    """
    if c_hat < 1:
        raise ValueError(f"adaptive_kernel: c_hat {c_hat} must be >= 1")
    v = (math.log2(c_hat) + b) / gamma
    k = int(math.floor(v))
    if k % 2 == 0:
        k -= 1
    return max(k, 1)


def channel_map_phi(k: int, gamma: int = 2, b: int = 1) -> int:
    """Inverse mapping: kernel size k covers 2^(gamma*k - b) channels."""
    if k < 1:
        raise ValueError(f"channel_map_phi: k {k} must be >= 1")
    return 2 ** (gamma * k - b)


class EcaConv(Module):
    """Convolution with channel attention on a stripped subset.

    Pipeline: conv -> split off the first c_hat channels -> global average
    pool -> 1D conv across the channel axis -> sigmoid -> scale the
    attended half -> concat with the bypass half -> channel shuffle.
    c_hat = floor(sigma * c_out), clamped to >= 1; sigma and the 1D kernel
    default to the fixed 0.5 / 3 configuration, or derive from
    strip_ratio/adaptive_kernel when ``adaptive`` is set.
    """

    def __init__(self, rng, c_in, c_out, kernel=3, stride=1, sigma=0.5,
                 attn_kernel=3, adaptive=False, gamma=2, b=1, shuffle_groups=2,
                 bias=True, dtype=np.float32):
        super().__init__()
        if adaptive:
            sigma = strip_ratio(c_out)
            attn_kernel = None
        if not 0.0 < sigma <= 1.0:
            raise ValueError(f"EcaConv: sigma {sigma} must be in (0, 1]")
        self.sigma = sigma
        self.c_hat = max(1, int(sigma * c_out))
        if attn_kernel is None:
            attn_kernel = adaptive_kernel(self.c_hat, gamma, b)
        if attn_kernel % 2 == 0 or attn_kernel < 1:
            raise ShapeError(f"EcaConv: attention kernel {attn_kernel} must be odd and >= 1")
        if c_out % shuffle_groups:
            raise ShapeError(f"EcaConv: channels {c_out} not divisible by shuffle groups {shuffle_groups}")
        assert self.c_hat + (c_out - self.c_hat) == c_out
        self.attn_k = attn_kernel
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.pad = kernel, stride, kernel // 2
        self.shuffle_groups = shuffle_groups
        self.weight = _conv_weight(rng, c_out, c_in, kernel, kernel, dtype)
        self.bias = parameter(np.zeros(c_out), dtype) if bias else None
        self.attn_weight = parameter(
            rng.uniform(-1.0, 1.0, (1, 1, attn_kernel)) / math.sqrt(attn_kernel), dtype)

    def forward(self, x):
        y = ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)
        if self.c_hat == self.c_out:
            att, byp = y, None
        else:
            att, byp = ops.split_channels(y, [self.c_hat, self.c_out - self.c_hat])
        n = att.shape[0]
        pooled = ops.global_avg_pool(att).reshape(n, 1, self.c_hat)
        gates = ops.sigmoid(ops.conv1d(pooled, self.attn_weight)).reshape(n, self.c_hat, 1, 1)
        att = att * gates
        merged = att if byp is None else ops.concat_channels([att, byp])
        return ops.channel_shuffle(merged, self.shuffle_groups)

    def flops(self, hw):
        out = _out_hw(hw, self.kernel, self.stride)
        return conv_flops(self.c_in, self.c_out, self.kernel, 1, out) + 2 * self.attn_k * self.c_hat, out


class EcaConvBlock(Module):
    """EcaConv wrapped with the BN + SiLU convention used in the network."""

    def __init__(self, rng, c_in, c_out, kernel=3, stride=1, adaptive=False,
                 dtype=np.float32):
        super().__init__()
        self.eca = EcaConv(rng, c_in, c_out, kernel, stride,
                           adaptive=adaptive, bias=False, dtype=dtype)
        self.norm = BatchNorm(c_out, dtype=dtype)

    def forward(self, x):
        return ops.silu(self.norm(self.eca(x)))

    def flops(self, hw):
        return self.eca.flops(hw)


class EcaCsp(Module):
    """CSP-style block: stacked attention convs beside a depthwise shortcut.

    Main path adjusts width with a 1x1 conv then runs n units of two 3x3
    stride-1 EcaConv layers; the side path is a depthwise-separable conv
    of the input; the merge is concat -> channel shuffle -> 1x1 conv.
    """

    def __init__(self, rng, c_in, c_out, n=1, adaptive=False, dtype=np.float32):
        super().__init__()
        if c_out % 2:
            raise ShapeError(f"EcaCsp: output channels {c_out} must be even")
        c_mid = c_out // 2
        self.c_in, self.c_out, self.c_mid, self.n = c_in, c_out, c_mid, n
        self.pre = ConvBnAct(rng, c_in, c_mid, 1, dtype=dtype)
        self.units = ModuleList(
            EcaConvBlock(rng, c_mid, c_mid, 3, 1, adaptive=adaptive, dtype=dtype)
            for _ in range(2 * n))
        self.dw = ConvBnAct(rng, c_in, c_in, 3, groups=c_in, dtype=dtype)
        self.pw = ConvBnAct(rng, c_in, c_mid, 1, dtype=dtype)
        self.post = ConvBnAct(rng, 2 * c_mid, c_out, 1, dtype=dtype)

    def forward(self, x):
        m = self.pre(x)
        for unit in self.units:
            m = unit(m)
        s = self.pw(self.dw(x))
        y = ops.channel_shuffle(ops.concat_channels([m, s]), 2)
        return self.post(y)

    def flops(self, hw):
        total, _ = self.pre.flops(hw)
        for unit in self.units:
            f, _ = unit.flops(hw)
            total += f
        for m in (self.dw, self.pw, self.post):
            f, _ = m.flops(hw)
            total += f
        return total, hw


# ---- fusion blocks -----------------------------------------------------------

class Ffn(Module):
    """Two 1x1 convs with a SiLU in between."""

    def __init__(self, rng, channels, hidden_ratio=2.0, dtype=np.float32):
        super().__init__()
        hidden = max(1, int(channels * hidden_ratio))
        self.expand = Conv2dLayer(rng, channels, hidden, 1, dtype=dtype)
        self.project = Conv2dLayer(rng, hidden, channels, 1, dtype=dtype)

    def forward(self, x):
        return self.project(ops.silu(self.expand(x)))

    def flops(self, hw):
        total = self.expand.flops(hw)[0] + self.project.flops(hw)[0]
        return total, hw


class Vss(Module):
    """2D selective-scan mixer.

    1x1 expansion into a scan path and a gate, depthwise 3x3 + SiLU, a
    four-direction cross scan with one selective scan per direction,
    merge, layer norm, gating, and a 1x1 projection back to the input
    width. delta/B/P are per-position projections of the scanned
    sequence; A stays diagonal via A = -exp(A_log); delta positivity
    comes from softplus with a bias seeded so delta starts in
    [0.001, 0.1].
    """

    DIRECTIONS = 4

    def __init__(self, rng, channels, state_size=16, ssm_ratio=2.0, dt_rank=None,
                 dtype=np.float32):
        super().__init__()
        d_inner = max(1, int(round(channels * ssm_ratio)))
        self.channels, self.d_inner, self.state_size = channels, d_inner, state_size
        self.dt_rank = dt_rank if dt_rank is not None else max(1, d_inner // 16)
        r, n, k = self.dt_rank, state_size, self.DIRECTIONS

        self.in_proj = Conv2dLayer(rng, channels, 2 * d_inner, 1, dtype=dtype)
        self.dw_weight = _conv_weight(rng, d_inner, 1, 3, 3, dtype)
        self.dw_bias = parameter(np.zeros(d_inner), dtype)

        bound = math.sqrt(1.0 / d_inner)
        self.x_proj_w = parameter(rng.uniform(-bound, bound, (k, r + 2 * n, d_inner)), dtype)
        dt_bound = math.sqrt(1.0 / r)
        self.dt_w = parameter(rng.uniform(-dt_bound, dt_bound, (k, d_inner, r)), dtype)
        dt_init = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), (k, d_inner)))
        self.dt_b = parameter(np.log(np.expm1(dt_init)), dtype)
        a_row = np.log(np.arange(1, n + 1, dtype=np.float64))
        self.A_log = parameter(np.tile(a_row, (k, d_inner, 1)), dtype)
        self.skip = parameter(np.ones((k, d_inner)), dtype)

        self.ln = LayerNorm(d_inner, dtype=dtype)
        self.out_proj = Conv2dLayer(rng, d_inner, channels, 1, dtype=dtype)

    def forward(self, x):
        n_batch, _, h, w = x.shape
        u, z = ops.split_channels(self.in_proj(x), [self.d_inner, self.d_inner])
        u = ops.silu(ops.conv2d(u, self.dw_weight, self.dw_bias,
                                stride=1, padding=1, groups=self.d_inner))
        r, ns = self.dt_rank, self.state_size
        outs = []
        for k, seq in enumerate(cross_scan(u)):
            proj = ops.linear(seq, self.x_proj_w[k])
            dt_low = proj[..., :r]
            b_seq = proj[..., r:r + ns]
            p_seq = proj[..., r + ns:]
            delta = ops.softplus(ops.linear(dt_low, self.dt_w[k], self.dt_b[k]))
            a_diag = -T.exp(self.A_log[k])
            outs.append(ssm_scan(seq, delta, a_diag, b_seq, p_seq, self.skip[k]))
        y = cross_merge(outs, h, w)
        y = self.ln(y) * ops.silu(z)
        return self.out_proj(y)

    def flops(self, hw):
        h, w = hw
        length, d, n, r = h * w, self.d_inner, self.state_size, self.dt_rank
        total = self.in_proj.flops(hw)[0]
        total += conv_flops(d, d, 3, d, hw)
        per_dir = 2 * length * d * (r + 2 * n)      # x_proj
        per_dir += 2 * length * r * d               # dt projection
        per_dir += 3 * 2 * length * d * n           # state, input, output terms
        per_dir += 2 * length * d                   # skip term
        total += self.DIRECTIONS * per_dir
        total += self.out_proj.flops(hw)[0]
        return total, hw


class SimVss(Module):
    """Fusion block: 1x1 expand + split, scan mixer and FFN residuals, re-join.

    The post-projection split keeps a passthrough half that bypasses both
    residual stages and re-joins before the output projection, so zeroing
    the VSS and FFN output layers reduces the block to its two
    projections.
    """

    def __init__(self, rng, channels, state_size=16, ssm_ratio=2.0, ffn_ratio=2.0,
                 dtype=np.float32):
        super().__init__()
        if channels % 2:
            raise ShapeError(f"SimVss: channels {channels} must be even to split")
        self.channels = channels
        self.c_mid = channels // 2
        self.in_proj = ConvBnAct(rng, channels, channels, 1, dtype=dtype)
        self.ln = LayerNorm(self.c_mid, dtype=dtype)
        self.vss = Vss(rng, self.c_mid, state_size, ssm_ratio, dtype=dtype)
        self.bn = BatchNorm(self.c_mid, dtype=dtype)
        self.ffn = Ffn(rng, self.c_mid, ffn_ratio, dtype=dtype)
        self.out_proj = Conv2dLayer(rng, channels, channels, 1, dtype=dtype)

    def forward(self, x):
        t = self.in_proj(x)
        main, passthrough = ops.split_channels(t, [self.c_mid, self.c_mid])
        z = self.vss(self.ln(main)) + main
        z = z + self.ffn(self.bn(z))
        return self.out_proj(ops.concat_channels([z, passthrough]))

    def flops(self, hw):
        total = self.in_proj.flops(hw)[0]
        total += self.vss.flops(hw)[0]
        total += self.ffn.flops(hw)[0]
        total += self.out_proj.flops(hw)[0]
        return total, hw


class Stem(Module):
    """Two stride-2 conv+BN+SiLU units: [N,3,H,W] -> [N,c_out,H/4,W/4]."""

    def __init__(self, rng, c_in, c_hidden, c_out, dtype=np.float32):
        super().__init__()
        self.conv1 = ConvBnAct(rng, c_in, c_hidden, 3, stride=2, dtype=dtype)
        self.conv2 = ConvBnAct(rng, c_hidden, c_out, 3, stride=2, dtype=dtype)

    def forward(self, images):
        h, w = images.shape[2:]
        if h % 4 or w % 4:
            raise ShapeError(f"stem: input {h}x{w} must be divisible by 4")
        return self.conv2(self.conv1(images))

    def flops(self, hw):
        f1, hw1 = self.conv1.flops(hw)
        f2, hw2 = self.conv2.flops(hw1)
        return f1 + f2, hw2
