"""The finite-difference suite behind ``hylog gradcheck``.

Every case runs in float64 on tiny shapes. Composite cases perturb their
inputs exhaustively and a sample of coordinates from each parameter tensor.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .cfsm import CfsmParams, cfsm
from .gradcheck import GradcheckResult, gradcheck, weighted_sum
from .hylog import AblationBlock, HyLoGConfig, HyLoGParams, global_path, hylog_block, local_path
from .losses import edge_loss, hybrid_loss, l2_loss, ssim_loss
from .network import ModelConfig, build_network, forward
from .nn import Module
from .tensor import Tensor, concat
from .vit import ViTParams, mhsa, tokenize, vit_block

F64 = np.float64
Case = Tuple[str, Callable[[], GradcheckResult]]


def _rand(rng, *shape, lo=None, hi=None) -> Tensor:
    if lo is not None:
        data = rng.uniform(lo, hi, size=shape)
    else:
        data = rng.standard_normal(shape)
    return Tensor(data, requires_grad=True, dtype=F64)


def _params(m: Module, every: int = 1) -> List[Tensor]:
    ps = m.parameters()
    for p in ps:
        p.requires_grad = True
    return ps[::every]


def _check(name, fn, inputs, params=(), samples: int = 4, input_samples: Optional[int] = None) -> GradcheckResult:
    """Exhaustive over ``inputs`` (unless ``input_samples`` is set), ``samples``
    coordinates per tensor in ``params``."""
    res = gradcheck(fn, list(inputs), max_checks=input_samples, name=name)
    if not params:
        return res
    res_p = gradcheck(fn, list(params), max_checks=samples, name=name)
    return GradcheckResult(name, max(res.max_rel_err, res_p.max_rel_err), max(res.max_abs_err, res_p.max_abs_err),
                           res.checked + res_p.checked, res.passed and res_p.passed)


def _tensor_cases(rng) -> List[Case]:
    x = _rand(rng, 4, 6, 3)
    y = _rand(rng, 1, 1, 3, lo=0.5, hi=2.0)
    pos = _rand(rng, 4, 6, 3, lo=0.5, hi=2.0)
    a, b = _rand(rng, 2, 4, 5), _rand(rng, 5, 3)
    cases: List[Case] = [
        ("add", lambda: _check("add", lambda: weighted_sum(x + y), [x, y])),
        ("sub", lambda: _check("sub", lambda: weighted_sum(x - y), [x, y])),
        ("mul", lambda: _check("mul", lambda: weighted_sum(x * y), [x, y])),
        ("div", lambda: _check("div", lambda: weighted_sum(x / y), [x, y])),
        ("neg", lambda: _check("neg", lambda: weighted_sum(-x), [x])),
        ("power", lambda: _check("power", lambda: weighted_sum(pos ** 1.5), [pos])),
        ("exp", lambda: _check("exp", lambda: weighted_sum(x.exp()), [x])),
        ("log", lambda: _check("log", lambda: weighted_sum(pos.log()), [pos])),
        ("sqrt", lambda: _check("sqrt", lambda: weighted_sum(pos.sqrt()), [pos])),
        ("sum", lambda: _check("sum", lambda: weighted_sum(x.sum(axis=1)), [x])),
        ("mean", lambda: _check("mean", lambda: weighted_sum(x.mean(axis=(0, 2), keepdims=True)), [x])),
        ("reshape", lambda: _check("reshape", lambda: weighted_sum(x.reshape((6, 12))), [x])),
        ("transpose", lambda: _check("transpose", lambda: weighted_sum(x.transpose((2, 0, 1))), [x])),
        ("getitem", lambda: _check("getitem", lambda: weighted_sum(x[1:3, ::2, :]), [x])),
        ("concat", lambda: _check("concat", lambda: weighted_sum(concat([x, x * 2.0], axis=-1)), [x])),
        ("matmul", lambda: _check("matmul", lambda: weighted_sum(a @ b), [a, b])),
    ]
    return cases


def _op_cases(rng) -> List[Case]:
    x = _rand(rng, 4, 6, 3)
    g, be = _rand(rng, 3), _rand(rng, 3)
    xc = _rand(rng, 6, 6, 2)
    wc, bc = _rand(rng, 3, 3, 2, 3), _rand(rng, 3)
    xs = _rand(rng, 2, 8, 8, 2)
    ws = _rand(rng, 4, 4, 2, 3)
    yt, bt = _rand(rng, 2, 4, 4, 3), _rand(rng, 2)
    unary = {
        "relu": ops.relu, "sigmoid": ops.sigmoid, "gelu": ops.gelu,
        "softmax": lambda t: ops.softmax(t, -1),
        "avgpool2d": lambda t: ops.avgpool2d(t, 2),
        "global_avg_pool": ops.global_avg_pool, "global_max_pool": ops.global_max_pool,
        "upsample2d": lambda t: ops.upsample2d(t, 2),
        "spatial_diff_x": ops.spatial_diff_x, "spatial_diff_y": ops.spatial_diff_y,
        "l2norm": lambda t: ops.l2norm(t, axis=(0, 1)),
    }
    cases: List[Case] = [(n, (lambda n=n, f=f: _check(n, lambda: weighted_sum(f(x)), [x]))) for n, f in unary.items()]
    cases += [
        ("layernorm", lambda: _check("layernorm", lambda: weighted_sum(ops.layernorm(x, g, be)), [x, g, be])),
        ("conv2d", lambda: _check("conv2d", lambda: weighted_sum(ops.conv2d(xc, wc, bc, 1, 1)), [xc, wc, bc])),
        ("conv2d_stride2", lambda: _check("conv2d_stride2", lambda: weighted_sum(ops.conv2d(xs, ws, None, 2, 1)), [xs, ws])),
        ("conv_transpose2d", lambda: _check("conv_transpose2d",
                                            lambda: weighted_sum(ops.conv_transpose2d(yt, ws, bt, 2, 1)), [yt, ws, bt])),
    ]
    return cases


def _vit_cases(rng) -> List[Case]:
    t = _rand(rng, 6, 8)
    p = ViTParams(8, rng, heads=2, mlp_ratio=2, dtype=F64)
    pp = ViTParams(8, rng, heads=2, mlp_ratio=2, pos_length=6, dtype=F64)
    return [
        ("mhsa", lambda: _check("mhsa", lambda: weighted_sum(mhsa(tokenize(t.reshape((2, 3, 8))), p).tokens),
                                [t], _params(p))),
        ("vit_block", lambda: _check("vit_block", lambda: weighted_sum(vit_block(tokenize(t.reshape((2, 3, 8))), p).tokens),
                                     [t], _params(p))),
        ("vit_block_pos", lambda: _check("vit_block_pos",
                                         lambda: weighted_sum(vit_block(tokenize(t.reshape((2, 3, 8))), pp).tokens),
                                         [t], _params(pp))),
    ]


def _hylog_cases(rng) -> List[Case]:
    cfg = HyLoGConfig(4, 4, 4, window=2, global_downscale=2)
    x = _rand(rng, 4, 4, 4)
    p = HyLoGParams(cfg, rng, heads=2, mlp_ratio=2, dtype=F64)
    cases: List[Case] = [
        ("local_path", lambda: _check("local_path", lambda: weighted_sum(local_path(x, p, cfg)), [x])),
        ("global_path", lambda: _check("global_path", lambda: weighted_sum(global_path(x, p, cfg)), [x])),
        ("hylog_block", lambda: _check("hylog_block", lambda: weighted_sum(hylog_block(x, p, cfg)), [x], _params(p))),
    ]
    for kind in ("cnn", "vit", "sequential"):
        blk = AblationBlock(kind, cfg, rng, heads=2, mlp_ratio=2, dtype=F64)
        blk(Tensor(x.data))  # data-dependent init of any normalisation layers
        cases.append((f"block_{kind}", lambda blk=blk, kind=kind: _check(
            f"block_{kind}", lambda: weighted_sum(blk(x)), [x], _params(blk, 2))))
    return cases


def _cfsm_cases(rng) -> List[Case]:
    d, r, s = (_rand(rng, 2, 3, 3, 8) for _ in range(3))
    p = CfsmParams(8, rng, reduction=4, dtype=F64)
    return [("cfsm", lambda: _check("cfsm", lambda: weighted_sum(cfsm(d, r, s, p)), [d, r, s], _params(p)))]


def _net_cases(rng) -> List[Case]:
    cfg = ModelConfig(stages=1, base_channels=4, image_height=8, image_width=8, grid_per_side=2, heads=2, mlp_ratio=2)
    net = build_network(cfg, seed=0, dtype=F64)
    img = _rand(rng, 1, 8, 8, 3, lo=0.0, hi=1.0)
    net.train()
    forward(Tensor(img.data), net)
    e0, feats = net.encoder(Tensor(img.data))
    r_feats = [_rand(rng, *feats[0].shape)]
    s_feats = [_rand(rng, *feats[0].shape)]
    e_z = _rand(rng, *feats[0].shape)
    e0_t = _rand(rng, *e0.shape)

    def encoder_out():
        a, f = net.encoder(img)
        return weighted_sum(a) + weighted_sum(f[0], seed=2)

    def decoder_out():
        outs, image = net.dec_d(e_z, [], e0_t, r_feats, s_feats)
        return weighted_sum(image) + weighted_sum(outs[0], seed=2)

    # the SSIM window needs at least 11x11 images
    big_cfg = ModelConfig(stages=1, base_channels=4, image_height=12, image_width=12, grid_per_side=2,
                          heads=2, mlp_ratio=2)
    big = build_network(big_cfg, seed=1, dtype=F64)
    big_img = _rand(rng, 1, 12, 12, 3, lo=0.0, hi=1.0)
    big.train()
    forward(Tensor(big_img.data), big)
    tgt = [Tensor(rng.uniform(0, 1, size=big_img.shape)) for _ in range(3)]

    def full_loss():
        return hybrid_loss(forward(big_img, big), tgt).total

    return [
        ("encoder", lambda: _check("encoder", encoder_out, [img], _params(net.encoder, 2), samples=2)),
        ("decoder_d", lambda: _check("decoder_d", decoder_out, [e_z, e0_t, r_feats[0], s_feats[0]],
                                     _params(net.dec_d, 2), samples=2)),
        ("network_loss", lambda: _check("network_loss", full_loss, [big_img], _params(big, 4), samples=1,
                                        input_samples=48)),
    ]


def _loss_cases(rng) -> List[Case]:
    p = _rand(rng, 2, 12, 12, 3, lo=0.1, hi=0.9)
    q = Tensor(rng.uniform(0.1, 0.9, size=(2, 12, 12, 3)))
    return [
        ("l2_loss", lambda: _check("l2_loss", lambda: l2_loss(p, q), [p])),
        ("ssim_loss", lambda: _check("ssim_loss", lambda: ssim_loss(p, q), [p])),
        ("edge_loss", lambda: _check("edge_loss", lambda: edge_loss(p, q), [p])),
    ]


SUITES: Dict[str, Callable] = {
    "tensor-core": lambda rng: _tensor_cases(rng) + _op_cases(rng),
    "vit-block": _vit_cases,
    "hylog": _hylog_cases,
    "cfsm": _cfsm_cases,
    "dehaze-net": _net_cases,
    "losses-metrics": _loss_cases,
}


def gradcheck_suite(module: Optional[str] = None, seed: int = 0) -> List[GradcheckResult]:
    """Run every case (or those of one module) and return one result per case."""
    if module is not None and module not in SUITES:
        raise KeyError(f"unknown module {module!r}; expected one of {sorted(SUITES)}")
    names: Sequence[str] = [module] if module else list(SUITES)
    results = []
    for name in names:
        rng = np.random.default_rng(seed)
        for _, run in SUITES[name](rng):
            results.append(run())
    return results
