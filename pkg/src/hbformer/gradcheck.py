"""Finite-difference verification of every backward rule, in float64.

Each check reduces an operation's output to a scalar with a fixed random
weighting, ``L = sum(out * R)``, and compares the autodiff gradient of ``L``
with central differences. Small inputs are checked element by element;
large tensors (module parameters) along two directions each, one aligned
with the analytic gradient and one random.

The relative error of a check is ``|a - n| / max(|a|, |n|, floor)`` in the
2-norm over all checked entries. The floor is ``NOISE_FLOOR * max(1, |L|)``:
a tensor whose true gradient vanishes (a conv bias feeding batch norm, say)
has a central difference made of pure roundoff, so it is compared on the
absolute scale of the loss instead of against itself.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .attention import EFFN, MWABlockPair, WindowAttention, WindowLayout, window_partition
from .config import micro_config
from .decoder import ChannelAttention, MedDSPP, SpatialAttention
from .encoder import PatchMerging
from .losses import bce_dice_loss, bce_loss, dice_loss, one_hot
from .model import HBFormer
from .module import Module
from .tensor import (
    Function,
    Tensor,
    add,
    concat,
    div,
    gather_rows,
    layer_norm,
    matmul,
    mean,
    mul,
    no_grad,
    permute,
    reshape,
    roll,
    slice_,
    softmax,
    sub,
    sum_,
)

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
EPS = 1e-6
NOISE_FLOOR = 1e-5
ELEMENTWISE_LIMIT = 96


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float
    kind: str
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error)) and self.rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = NOISE_FLOOR) -> float:
    a = np.asarray(analytic, np.float64).ravel()
    n = np.asarray(numeric, np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def _floor(loss: float) -> float:
    return NOISE_FLOOR * max(1.0, abs(loss))


def _weighted_sum(out: Tensor, weight: np.ndarray) -> float:
    return float((out.data.astype(np.float64) * weight).sum())


def check_function(fn: Callable[..., Tensor], inputs: list[np.ndarray], seed: int = 0,
                   eps: float = EPS) -> float:
    """Worst relative error over all inputs of ``fn`` (element-wise central differences)."""
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    weight = rng.standard_normal(out.shape)
    total = (out * Tensor(weight)).sum()
    floor = _floor(float(total.data))
    total.backward()

    def value() -> float:
        with no_grad():
            return _weighted_sum(fn(*[Tensor(a) for a in arrays]), weight)

    worst = 0.0
    for arr, leaf in zip(arrays, leaves):
        analytic = np.zeros_like(arr) if leaf.grad is None else leaf.grad
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst


def check_module(module: Module, loss_fn: Callable[[], Tensor], seed: int = 0,
                 eps: float = EPS, inputs: list[Tensor] = ()) -> float:
    """Worst relative error over the parameters of ``module`` and the given input leaves.

    ``loss_fn`` must rebuild the scalar from the current parameter values.
    Tensors up to ``ELEMENTWISE_LIMIT`` entries are checked element-wise,
    larger ones along their gradient direction and one random direction.
    """
    rng = np.random.default_rng(seed)
    leaves = list(module.parameters()) + list(inputs)
    for t in leaves:
        t.grad = None
    loss = loss_fn()
    floor = _floor(float(loss.data))
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]

    def value() -> float:
        with no_grad():
            return float(loss_fn().data)

    worst = 0.0
    for t, g in zip(leaves, analytic):
        flat = t.data.reshape(-1)
        if flat.size <= ELEMENTWISE_LIMIT:
            numeric = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = value()
                flat[i] = orig - eps
                down = value()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * eps)
            worst = max(worst, relative_error(g, numeric, floor))
            continue
        rand = rng.standard_normal(t.shape)
        gnorm = np.linalg.norm(g)
        directions = [rand / np.linalg.norm(rand)]
        if gnorm > 0:
            directions.insert(0, g / gnorm)
        a_vals, n_vals = [], []
        orig = t.data.copy()
        for d in directions:
            t.data[...] = orig + eps * d
            up = value()
            t.data[...] = orig - eps * d
            down = value()
            t.data[...] = orig
            a_vals.append(float((g * d).sum()))
            n_vals.append((up - down) / (2 * eps))
        worst = max(worst, relative_error(np.array(a_vals), np.array(n_vals), floor))
    return worst


# ---------------------------------------------------------------------------
# the suite


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _fractional_offsets(rng, shape):
    """Offsets whose sampling points stay clear of integer grid lines (bilinear kinks)."""
    frac = rng.uniform(0.2, 0.8, size=shape)
    return frac + rng.integers(-2, 2, size=shape)


def _bn_state(rng, c, training):
    st = ops.BatchNormState.create(c)
    st.gamma = Tensor(rng.uniform(0.5, 1.5, c))
    st.beta = Tensor(rng.standard_normal(c))
    st.running_mean = rng.standard_normal(c)
    st.running_var = rng.uniform(0.5, 2.0, c)
    st.training = training
    return st


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One gradient check per registered primitive, keyed by registry name."""
    n = rng.standard_normal
    idx = rng.integers(0, 5, size=(3, 2))
    bn_train = _bn_state(rng, 2, True)
    bn_eval = _bn_state(rng, 2, False)
    labels = rng.integers(0, 3, size=(2, 3, 3))
    return {
        "add": (add, [n((2, 3, 4)), n((3, 4))]),
        "sub": (sub, [n((2, 3, 4)), n((4,))]),
        "mul": (mul, [n((2, 3, 4)), n((3, 1))]),
        "div": (div, [n((2, 3)), rng.uniform(0.5, 2.0, (2, 3)) * rng.choice([-1, 1], (2, 3))]),
        "scale": (lambda a: a * 1.7, [n((3, 4))]),
        "add_scalar": (lambda a: a + 0.3, [n((3, 4))]),
        "neg": (lambda a: -a, [n((3, 4))]),
        "matmul": (matmul, [n((2, 3, 4)), n((2, 4, 5))]),
        "softmax": (lambda a: softmax(a, axis=-1), [n((3, 5))]),
        "layer_norm": (lambda x, g, b: layer_norm(x, g, b), [n((4, 6)), n((6,)), n((6,))]),
        "sum": (lambda a: sum_(a, axis=1, keepdims=True), [n((3, 4, 2))]),
        "mean": (lambda a: mean(a, axis=(0, 2)), [n((3, 4, 2))]),
        "reshape": (lambda a: reshape(a, (4, -1)), [n((2, 3, 4))]),
        "permute": (lambda a: permute(a, (2, 0, 1)), [n((2, 3, 4))]),
        "concat": (lambda a, b: concat([a, b], axis=1), [n((2, 3)), n((2, 2))]),
        "slice": (lambda a: slice_(a, (slice(None), slice(1, 3))), [n((3, 4))]),
        "roll": (lambda a: roll(a, (1, -2), (0, 1)), [n((3, 4))]),
        "gather_rows": (lambda t: gather_rows(t, idx), [n((5, 2))]),
        "conv2d": (
            lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1, dilation=1),
            [n((2, 2, 5, 5)), n((3, 2, 3, 3)), n((3,))],
        ),
        "conv2d_grouped_dilated": (
            lambda x, w: ops.conv2d(x, w, None, padding=2, dilation=2, groups=2),
            [n((1, 4, 5, 5)), n((4, 2, 3, 3))],
        ),
        "conv2d_depthwise": (
            lambda x, w, b: ops.depthwise_conv2d(x, w, b, padding=1),
            [n((2, 3, 4, 4)), n((3, 1, 3, 3)), n((3,))],
        ),
        "deform_conv2d": (
            lambda x, o, w, b: ops.deform_conv2d(x, o, w, b, padding=1),
            [n((1, 2, 4, 4)), _fractional_offsets(rng, (1, 18, 4, 4)), n((2, 2, 3, 3)), n((2,))],
        ),
        "batch_norm_train": (
            lambda x: ops.batch_norm(x, bn_train), [n((3, 2, 3, 3))],
        ),
        "batch_norm_eval": (
            lambda x: ops.batch_norm(x, bn_eval), [n((2, 2, 3, 3))],
        ),
        "gelu": (ops.gelu, [n((3, 4)) * 2]),
        "leaky_relu": (lambda a: ops.leaky_relu(a, 0.01), [_away_from_zero(rng, (3, 4))]),
        "sigmoid": (ops.sigmoid, [n((3, 4)) * 3]),
        "linear": (ops.linear, [n((2, 3, 4)), n((5, 4)), n((5,))]),
        "pad2d": (lambda a: ops.pad2d(a, (1, 0, 2, 1)), [n((1, 2, 3, 3))]),
        "pad2d_replicate": (
            lambda a: ops.pad2d(a, (2, 2, 2, 2), mode="replicate"), [n((1, 2, 3, 3))]
        ),
        "upsample_nearest2x": (ops.upsample_nearest2x, [n((1, 2, 3, 3))]),
        "bilinear_resize": (lambda a: ops.bilinear_resize(a, 6, 4), [n((1, 2, 3, 2))]),
        "bce_with_logits": (lambda z: bce_loss(z, labels), [n((2, 3, 3, 3)) * 2]),
    }


def _module_cases(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    """Composite blocks, checked over parameters and inputs."""
    n = rng.standard_normal
    cases = {}

    def windows_attention():
        attn = WindowAttention(4, 2, 2, rng)
        attn.to(np.float64)
        lay = WindowLayout(4, 4, 2, 1)
        x = Tensor(n((1, 4, 4, 4)), requires_grad=True)
        w = n((4, 4, 4))
        return check_module(attn, lambda: (attn(window_partition(x, lay), lay.mask)
                                           * Tensor(w)).sum(), inputs=[x])

    def block_pair():
        pair = MWABlockPair(4, 2, (4, 4), 2, rng, 2, True)
        pair.to(np.float64)
        x = Tensor(n((1, 16, 4)), requires_grad=True)
        w = n((1, 16, 4))
        return check_module(pair, lambda: (pair(x) * Tensor(w)).sum(), inputs=[x])

    def effn():
        block = EFFN(3, 2, rng)
        block.to(np.float64)
        x = Tensor(n((2, 9, 3)), requires_grad=True)
        w = n((2, 9, 3))
        return check_module(block, lambda: (block(x, (3, 3)) * Tensor(w)).sum(), inputs=[x])

    def med_dspp():
        block = MedDSPP(2, (1, 2), rng)
        block.to(np.float64)
        for branch in block.branches:
            branch.offset.weight.data[...] = rng.normal(0, 0.3, branch.offset.weight.shape)
        x = Tensor(n((2, 2, 4, 4)), requires_grad=True)
        w = n((2, 2, 4, 4))
        return check_module(block, lambda: (block(x) * Tensor(w)).sum(), inputs=[x])

    def gates():
        ca = ChannelAttention(4, rng)
        sa = SpatialAttention(4, rng)
        both = Module()
        both.ca, both.sa = ca, sa
        both.to(np.float64)
        x = Tensor(n((1, 4, 5, 5)), requires_grad=True)
        w = n((1, 4, 5, 5))
        return check_module(both, lambda: (sa(ca(x)) * Tensor(w)).sum(), inputs=[x])

    def patch_merging():
        pm = PatchMerging(2, rng)
        pm.to(np.float64)
        x = Tensor(n((1, 16, 2)), requires_grad=True)
        w = n((1, 4, 4))
        return check_module(pm, lambda: (pm(x, (4, 4)) * Tensor(w)).sum(), inputs=[x])

    def losses():
        z = Tensor(n((2, 3, 4, 4)) * 2, requires_grad=True)
        t = rng.integers(0, 3, size=(2, 4, 4))
        worst = 0.0
        for fn in (dice_loss, bce_dice_loss):
            worst = max(worst, check_function(lambda a: fn(a, t), [z.data]))
        return worst

    cases["window_attention"] = windows_attention
    cases["mwa_block_pair"] = block_pair
    cases["effn"] = effn
    cases["med_dspp"] = med_dspp
    cases["attention_gates"] = gates
    cases["patch_merging"] = patch_merging
    cases["dice_and_bce_dice_loss"] = losses
    return cases


def fractional_offsets(module: Module, rng: np.random.Generator) -> None:
    """Give every deformable offset predictor a bias in (0.25, 0.75) and tiny weights.

    Zero or near-zero offsets put sampling points on integer grid lines, where
    bilinear interpolation has a kink and central differences are meaningless.
    """
    for name, p in module.named_parameters():
        if ".offset.bias" in name or name.startswith("offset.bias"):
            p.data[...] = rng.uniform(0.25, 0.75, p.shape)
        elif ".offset.weight" in name or name.startswith("offset.weight"):
            p.data[...] = rng.normal(0, 0.005, p.shape)


def check_micro_model(seed: int = 0) -> float:
    """End-to-end check of the full network on the 32x32 micro configuration."""
    rng = np.random.default_rng(seed)
    model = HBFormer(micro_config(), rng)
    model.to(np.float64)
    fractional_offsets(model, rng)
    x = Tensor(rng.random((2, 3, 32, 32)))
    target = one_hot(rng.integers(0, 3, size=(2, 32, 32)), 3, np.float64)
    return check_module(model, lambda: bce_dice_loss(model(x), target), seed=seed)


def run_suite(seed: int = 0, include_model: bool = True, log=None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def record(name, kind, tol, thunk):
        t0 = time.perf_counter()
        try:
            err = thunk()
        except Exception as exc:  # a crashing backward is a failed check
            if log:
                log(f"{name}: raised {type(exc).__name__}: {exc}")
            err = float("inf")
        res = CheckResult(name, err, tol, kind, time.perf_counter() - t0)
        results.append(res)
        if log:
            log(format_result(res))

    for name, (fn, inputs) in op_cases(rng).items():
        record(name, "op", OP_TOLERANCE, lambda fn=fn, inputs=inputs: check_function(fn, inputs))
    for name, thunk in _module_cases(rng).items():
        record(name, "block", OP_TOLERANCE, thunk)
    if include_model:
        record("micro_model", "model", MODEL_TOLERANCE, lambda: check_micro_model(seed))
    return results


def format_result(res: CheckResult) -> str:
    status = "PASS" if res.passed else "FAIL"
    return f"{status} {res.kind:5s} {res.name:24s} rel_err={res.rel_error:.3e} tol={res.tolerance:.0e}"


def covered_ops(results: list[CheckResult]) -> set[str]:
    """Registered primitive names exercised by the suite's op checks."""
    names = {r.name for r in results if r.kind == "op"}
    return {op for op in Function.registry if any(n == op or n.startswith(op + "_") for n in names)}
