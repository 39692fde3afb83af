"""Gradient verification suites at op, block, and model granularity.

Check points are well-conditioned on purpose: scales bounded away from
zero and eval-mode normalization in composite sweeps, so that genuine
backward-rule bugs are separated from finite-difference noise on
structurally-zero gradient components.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import IauBlock
from .errors import ConfigurationError
from .gradcheck import finite_diff_check, weight_finite_diff_check
from .model import IauNet, ModelConfig, StageSpec
from .tensor import BatchNormStats, Tensor

SCOPES = ("op", "block", "model")


@dataclass
class CheckResult:
    name: str
    error: float


def _rand(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _const(rng, shape, lo=0.5, hi=1.5):
    signs = rng.choice([-1.0, 1.0], size=shape)
    return Tensor(rng.uniform(lo, hi, size=shape) * signs)


def _op_checks(rng: np.random.Generator):
    """(name, fn, input) triples covering every differentiable primitive."""
    c = _const(rng, (4, 6))
    c3 = _const(rng, (4, 6, 5))
    cv = _const(rng, 4)
    cw = _const(rng, 6)
    half = Tensor(np.float64(0.5))
    mask = rng.random((4, 6)) < 0.6
    mask[0, :3] = True  # keep every row nonempty somewhere
    checks = [
        ("add", lambda x: T.sum_(T.mul(T.add(x, c), c))),
        ("sub", lambda x: T.sum_(T.mul(T.sub(c, x), c))),
        ("mul", lambda x: T.sum_(T.mul(x, c))),
        ("div_num", lambda x: T.sum_(T.div(x, T.add(T.mul(c, c), half)))),
        ("div_den", lambda x: T.sum_(T.div(c, T.add(T.exp(T.mul(x, half)), half)))),
        ("neg", lambda x: T.sum_(T.mul(T.neg(x), c))),
        ("absolute", lambda x: T.sum_(T.mul(T.absolute(x), c))),
        ("exp", lambda x: T.sum_(T.mul(T.exp(T.mul(x, half)), c))),
        ("log", lambda x: T.sum_(T.mul(T.log(T.add(T.mul(x, x), half)), c))),
        ("sqrt", lambda x: T.sum_(T.mul(T.sqrt(T.add(T.mul(x, x), half)), c))),
        ("relu", lambda x: T.sum_(T.mul(T.relu(x), c))),
        ("sigmoid", lambda x: T.sum_(T.mul(T.sigmoid(x), c))),
        ("clip", lambda x: T.sum_(T.mul(T.clip(x, -0.9, 0.9), c))),
        ("reshape", lambda x: T.sum_(T.mul(T.reshape(x, (6, 4)), T.reshape(c, (6, 4))))),
        ("transpose", lambda x: T.sum_(T.mul(T.transpose(x, (1, 0)), T.transpose(c, (1, 0))))),
        ("broadcast_to", lambda x: T.sum_(T.mul(
            T.broadcast_to(T.reshape(x, (4, 6, 1)), (4, 6, 5)), c3))),
        ("concat", lambda x: T.sum_(T.mul(T.concat([x, c], axis=1),
                                          T.concat([c, c], axis=1)))),
        ("sum", lambda x: T.sum_(T.mul(T.sum_(x, axis=0), cw))),
        ("mean", lambda x: T.sum_(T.mul(T.mean_(x, axis=1), cv))),
        ("max", lambda x: T.sum_(T.mul(T.max_(x, axis=1), cv))),
        ("min", lambda x: T.sum_(T.mul(T.min_(x, axis=0), cw))),
        ("softmax", lambda x: T.sum_(T.mul(T.softmax(x, axis=1), c))),
        ("masked_softmax", lambda x: T.sum_(T.mul(T.masked_softmax(x, mask), c))),
        ("global_average_pool", lambda x: T.sum_(T.mul(
            T.global_average_pool(T.reshape(x, (2, 3, 4, 1))), Tensor(np.float64([1.3]))))),
        ("matmul_lhs", lambda x: T.sum_(T.mul(T.matmul(x, _const(rng, (6, 3))),
                                              _const(rng, (4, 3))))),
        ("matmul_rhs", lambda x: T.sum_(T.mul(
            T.matmul(_const(rng, (3, 4)), T.reshape(x, (4, 6))), _const(rng, (3, 6))))),
    ]
    return checks


def _run_op_scope(trials: int, seed: int):
    results = []
    for trial in range(trials):
        rng = np.random.default_rng(np.random.PCG64(seed + trial))
        for name, fn in _op_checks(rng):
            err = finite_diff_check(fn, _rand(rng, (4, 6)), h=1e-6)
            results.append(CheckResult(f"{name}[{trial}]", err))
        results.extend(_structured_op_checks(rng, trial))
    return results


def _structured_op_checks(rng, trial):
    out = []
    head = _const(rng, (2, 4, 3, 5))
    x = _rand(rng, (2, 4, 3, 4), 0.5)
    w = _rand(rng, (4, 5), 0.5)
    b = _rand(rng, 5, 0.5)
    fn = lambda t: T.sum_(T.mul(T.conv1x1(t, w, b), head))
    out.append(CheckResult(f"conv1x1_x[{trial}]", finite_diff_check(fn, x, 1e-6)))
    fn = lambda t: T.sum_(T.mul(T.conv1x1(x, t, b), head))
    out.append(CheckResult(f"conv1x1_w[{trial}]", finite_diff_check(fn, w, 1e-6)))
    fn = lambda t: T.sum_(T.mul(T.conv1x1(x, w, t), head))
    out.append(CheckResult(f"conv1x1_b[{trial}]", finite_diff_check(fn, b, 1e-6)))

    for stride in (1, 2):
        xc = _rand(rng, (2, 4, 4, 3), 0.5)
        wc = _rand(rng, (3, 3, 3, 4), 0.5)
        bc = _rand(rng, 4, 0.5)
        ho = (4 - 1) // stride + 1
        headc = _const(rng, (2, ho, ho, 4))
        fn = lambda t: T.sum_(T.mul(T.conv3x3(t, wc, bc, stride), headc))
        out.append(CheckResult(f"conv3x3_s{stride}_x[{trial}]",
                               finite_diff_check(fn, xc, 1e-6)))
        fn = lambda t: T.sum_(T.mul(T.conv3x3(xc, t, bc, stride), headc))
        out.append(CheckResult(f"conv3x3_s{stride}_w[{trial}]",
                               finite_diff_check(fn, wc, 1e-6)))

    for training in (True, False):
        xb = _rand(rng, (8, 4))
        gamma = _const(rng, 4)
        beta = _rand(rng, 4)
        stats = BatchNormStats(4, dtype=np.float64)
        stats.mean[:] = rng.standard_normal(4) * 0.3
        stats.var[:] = rng.uniform(0.5, 1.5, 4)
        headb = _const(rng, (8, 4))
        fn = lambda t: T.sum_(T.mul(T.batch_norm(t, gamma, beta, stats, training), headb))
        tag = "train" if training else "eval"
        out.append(CheckResult(f"batch_norm_{tag}_x[{trial}]",
                               finite_diff_check(fn, xb, 1e-6)))
        fn = lambda t: T.sum_(T.mul(T.batch_norm(xb, gamma, beta, stats, training), headb))
        # gamma and beta through the weight-style check
        out.append(CheckResult(
            f"batch_norm_{tag}_gamma[{trial}]",
            weight_finite_diff_check(lambda: T.sum_(T.mul(
                T.batch_norm(xb, gamma, beta, stats, training), headb)), gamma, 1e-6)))
    return out


def _open_block_gates(block: IauBlock, rng):
    for bn in (block.bn_s, block.bn_c):
        if bn is None:
            continue
        bn.gamma.data[:] = rng.uniform(0.5, 1.0, bn.gamma.shape) * \
            rng.choice([-1.0, 1.0], bn.gamma.shape)
        bn.stats.mean[:] = rng.standard_normal(bn.stats.mean.shape) * 0.1
        bn.stats.var[:] = rng.uniform(0.5, 1.5, bn.stats.var.shape)


def _run_block_scope(trials: int, seed: int):
    results = []
    for trial in range(trials):
        rng = np.random.default_rng(np.random.PCG64(seed + 100 + trial))
        f = Tensor(rng.standard_normal((2, 2, 3, 2, 4)) * 0.5)
        head = _const(rng, (2, 2, 3, 2, 4))

        for kind, arrangement in (("stiau", "ciau_stiau"), ("ciau", "ciau_stiau"),
                                  ("iau", "ciau_stiau"), ("iau", "stiau_ciau"),
                                  ("iau", "parallel")):
            block = IauBlock(4, 2, np.random.default_rng(seed + trial), kind=kind,
                             arrangement=arrangement, dtype=np.float64)
            _open_block_gates(block, rng)
            tag = kind if kind != "iau" else f"iau_{arrangement}"

            def forward():
                y, _ = block.forward(f, training=False)
                return T.sum_(T.mul(y, head))

            for name, w in block.named_params().items():
                err = weight_finite_diff_check(forward, w, h=1e-6)
                results.append(CheckResult(f"{tag}.{name}[{trial}]", err))
            x_in = Tensor(f.data.copy(), requires_grad=True)
            err = finite_diff_check(
                lambda t: T.sum_(T.mul(block.forward(t, False)[0], head)), x_in, 1e-6)
            results.append(CheckResult(f"{tag}.input[{trial}]", err))
    return results


def _tiny_model(seed: int) -> IauNet:
    cfg = ModelConfig(
        stages=[StageSpec(4, 1, 1, False), StageSpec(6, 2, 2, True)],
        parts=2, frames=2, embedding_dim=4, num_ids=3)
    return IauNet(cfg, seed=seed, dtype=np.float64)


def _run_model_scope(trials: int, seed: int):
    results = []
    for trial in range(trials):
        rng = np.random.default_rng(np.random.PCG64(seed + 200 + trial))
        model = _tiny_model(seed + trial)
        for block in model.iau_blocks().values():
            _open_block_gates(block, rng)
        for stage in model.stages:
            for unit in stage.units:
                unit.bn.stats.mean[:] = rng.standard_normal(unit.bn.stats.mean.shape) * 0.1
                unit.bn.stats.var[:] = rng.uniform(0.5, 1.5, unit.bn.stats.var.shape)
        batch = Tensor(rng.random((2, 2, 8, 4, 3)))
        head = _const(rng, (2, 3))

        def forward():
            logits, _, _ = model.forward(batch, training=False)
            return T.sum_(T.mul(logits, head))

        params = model.named_params()
        picked = [name for name in sorted(params)
                  if params[name].size <= 64][:14]
        picked += [n for n in sorted(params) if "iau" in n and params[n].size <= 300][:6]
        for name in sorted(set(picked)):
            err = weight_finite_diff_check(forward, params[name], h=1e-6)
            results.append(CheckResult(f"model.{name}[{trial}]", err))
        x_in = Tensor(batch.data.copy(), requires_grad=True)
        err = finite_diff_check(
            lambda t: T.sum_(T.mul(model.forward(t, False)[0], head)), x_in, 1e-6)
        results.append(CheckResult(f"model.input[{trial}]", err))
    return results


def gradcheck_suite(scope: str = "op", trials: int = 3, seed: int = 0):
    """Run the requested suite; returns a list of CheckResult."""
    if scope not in SCOPES:
        raise ConfigurationError(f"scope must be one of {SCOPES}, got {scope!r}")
    if trials < 1:
        raise ConfigurationError("trials must be at least 1")
    if scope == "op":
        return _run_op_scope(trials, seed)
    if scope == "block":
        return _run_block_scope(trials, seed)
    return _run_model_scope(trials, seed)
