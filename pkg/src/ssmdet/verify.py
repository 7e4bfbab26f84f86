"""Registry of gradient checks for every differentiable operator and block.

Each entry builds a fresh 64-bit micro instance from a seed and runs the
central finite-difference comparison. The CLI `grad-check` subcommand and
the acceptance suite both drive this registry.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .blocks import EcaConv, EcaConvBlock, EcaCsp, Ffn, SimVss, Vss
from .gradcheck import GradCheckReport, grad_check
from .model import Head
from .ssm import ssm_scan
from .tensor import Tensor

__all__ = ["GRAD_CHECKS", "run_grad_suite"]

_F64 = np.float64


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype=_F64)


def _check_conv2d(seed, **kw):
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    return grad_check(lambda *a: ops.conv2d(a[0], a[1], a[2], stride=2, padding=1),
                      [x, w, b], **kw)


def _check_conv2d_depthwise(seed, **kw):
    rng = np.random.default_rng(seed)
    x, w = _t(rng, 2, 4, 5, 5), _t(rng, 4, 1, 3, 3)
    return grad_check(lambda *a: ops.conv2d(a[0], a[1], None, padding=1, groups=4),
                      [x, w], **kw)


def _check_conv1d(seed, **kw):
    rng = np.random.default_rng(seed)
    x, w = _t(rng, 2, 1, 12), _t(rng, 1, 1, 3)
    return grad_check(lambda *a: ops.conv1d(a[0], a[1]), [x, w], **kw)


def _check_batch_norm(seed, **kw):
    rng = np.random.default_rng(seed)
    x, gain, shift = _t(rng, 3, 4, 5, 5), _t(rng, 4), _t(rng, 4)
    rm, rv = np.zeros(4), np.ones(4)
    return grad_check(
        lambda *a: ops.batch_norm(a[0], a[1], a[2], rm, rv, training=True),
        [x, gain, shift], **kw)


def _check_layer_norm(seed, **kw):
    rng = np.random.default_rng(seed)
    x, gain, shift = _t(rng, 2, 6, 4, 4), _t(rng, 6), _t(rng, 6)
    return grad_check(lambda *a: ops.layer_norm(a[0], a[1], a[2]), [x, gain, shift], **kw)


def _check_activations(seed, **kw):
    rng = np.random.default_rng(seed)
    x = _t(rng, 4, 7)
    return grad_check(
        lambda a: ops.softplus(ops.silu(ops.sigmoid(a))), [x], **kw)


def _check_pool_upsample(seed, **kw):
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 3, 4, 4)
    return grad_check(
        lambda a: ops.global_avg_pool(ops.upsample_nearest(a)), [x], **kw)


def _check_shuffle_split(seed, **kw):
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 6, 3, 3)

    def closure(a):
        parts = ops.split_channels(ops.channel_shuffle(a, 3), [2, 4])
        return ops.concat_channels([parts[1] * 2.0, parts[0]])

    return grad_check(closure, [x], **kw)


def _check_linear(seed, **kw):
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng, 3, 5, 6), _t(rng, 4, 6), _t(rng, 4)
    return grad_check(lambda *a: ops.linear(a[0], a[1], a[2]), [x, w, b], **kw)


def _check_scan(seed, **kw):
    rng = np.random.default_rng(seed)
    bt, length, d, n = 2, 6, 3, 4
    x = _t(rng, bt, length, d)
    delta = Tensor(rng.uniform(0.05, 0.5, (bt, length, d)))
    a_diag = Tensor(rng.uniform(-2.0, -0.1, (d, n)))
    b_seq, p_seq = _t(rng, bt, length, n), _t(rng, bt, length, n)
    q = _t(rng, d)
    return grad_check(
        lambda *a: ssm_scan(a[0], a[1], a[2], a[3], a[4], a[5], block_len=3),
        [x, delta, a_diag, b_seq, p_seq, q], **kw)


def _block_inputs(module, x, names):
    tensors = dict(module.named_parameters())
    return [x] + [tensors[n] for n in names]


def _check_eca_conv(seed, **kw):
    rng = np.random.default_rng(seed)
    m = EcaConv(rng, 4, 8, dtype=_F64)
    x = _t(rng, 1, 4, 5, 5)
    return grad_check(lambda *a: m(a[0]),
                      _block_inputs(m, x, ["weight", "attn_weight", "bias"]), **kw)


def _check_eca_csp(seed, **kw):
    rng = np.random.default_rng(seed)
    m = EcaCsp(rng, 8, 8, n=1, dtype=_F64).train()
    x = _t(rng, 1, 8, 6, 6)
    return grad_check(lambda *a: m(a[0]),
                      _block_inputs(m, x, ["pre.weight", "units.0.eca.weight"]), **kw)


def _check_ffn(seed, **kw):
    rng = np.random.default_rng(seed)
    m = Ffn(rng, 6, dtype=_F64)
    x = _t(rng, 2, 6, 3, 3)
    return grad_check(lambda *a: m(a[0]),
                      _block_inputs(m, x, ["expand.weight", "project.weight"]), **kw)


def _check_vss(seed, **kw):
    rng = np.random.default_rng(seed)
    m = Vss(rng, 4, state_size=4, dtype=_F64)
    x = _t(rng, 1, 4, 4, 4)
    return grad_check(lambda *a: m(a[0]),
                      _block_inputs(m, x, ["A_log", "x_proj_w", "out_proj.weight"]), **kw)


def _check_simvss(seed, **kw):
    rng = np.random.default_rng(seed)
    m = SimVss(rng, 8, state_size=4, dtype=_F64).train()
    x = _t(rng, 1, 8, 4, 4)
    return grad_check(lambda *a: m(a[0]),
                      _block_inputs(m, x, ["vss.skip", "out_proj.weight"]), **kw)


def _check_head(seed, **kw):
    rng = np.random.default_rng(seed)
    m = Head(rng, 6, 6, num_classes=3, dtype=_F64).train()
    x = _t(rng, 1, 6, 4, 4)

    def closure(*a):
        cls_map, reg_map = m(a[0])
        return cls_map + reg_map.sum(axis=1, keepdims=True)

    return grad_check(closure, _block_inputs(m, x, ["cls_out.weight", "reg_out.weight"]), **kw)


def _check_eca_conv_block(seed, **kw):
    rng = np.random.default_rng(seed)
    m = EcaConvBlock(rng, 4, 6, stride=2, dtype=_F64).train()
    x = _t(rng, 2, 4, 6, 6)
    return grad_check(lambda *a: m(a[0]),
                      _block_inputs(m, x, ["eca.weight", "norm.gain"]), **kw)


GRAD_CHECKS = {
    "conv2d": _check_conv2d,
    "conv2d_depthwise": _check_conv2d_depthwise,
    "conv1d": _check_conv1d,
    "batch_norm": _check_batch_norm,
    "layer_norm": _check_layer_norm,
    "activations": _check_activations,
    "pool_upsample": _check_pool_upsample,
    "shuffle_split": _check_shuffle_split,
    "linear": _check_linear,
    "scan": _check_scan,
    "eca_conv": _check_eca_conv,
    "eca_conv_block": _check_eca_conv_block,
    "eca_csp": _check_eca_csp,
    "ffn": _check_ffn,
    "vss": _check_vss,
    "simvss": _check_simvss,
    "head": _check_head,
}


def run_grad_suite(blocks=None, seeds=range(10), tolerance: float = 1e-4,
                   max_elements: int = 32) -> dict[str, list[GradCheckReport]]:
    """Run the selected checks over the given seeds; returns reports per block."""
    names = list(GRAD_CHECKS) if blocks is None else list(blocks)
    results: dict[str, list[GradCheckReport]] = {}
    for name in names:
        fn = GRAD_CHECKS[name]
        results[name] = [fn(seed, tolerance=tolerance, max_elements=max_elements)
                         for seed in seeds]
    return results
