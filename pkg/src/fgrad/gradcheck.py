"""Oracle suites for the differentiation engines.

Every check returns a :class:`Check` with the measured error and its
tolerance. ``run_all`` is what ``fgrad gradcheck`` prints.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .autodiff import ActivityTangent, WeightTangents, forward_directional, reverse_gradient
from .estimators import EstimatorConfig, estimate_block
from .guesses import GuessSpec, TargetSpec, make_fixed_heads
from .layers import AdaptiveAvgPool2d, AvgPool2d, BatchNorm, Conv2d, Flatten, Layer, Linear, ReLU, cross_entropy
from .models import Block, attach_auxiliaries, build_backbone


@dataclass
class Check:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)

    def line(self) -> str:
        return f"{self.name:<44s} err={self.error:.3e} tol={self.tol:.1e} {'PASS' if self.passed else 'FAIL'}"


class _ResidualAdd(Layer):
    """Adapter exposing a skip block (body + 1x1 projection) through the layer interface."""

    kind = "residual_add"

    def __init__(self, rng, dtype):
        super().__init__()
        self.block = Block([Conv2d(3, 4, 3, padding=1, bias=False, rng=rng, dtype=dtype), BatchNorm(4, dtype=dtype)],
                           has_skip=True,
                           shortcut=[Conv2d(3, 4, 1, stride=1, bias=False, rng=rng, dtype=dtype)])
        self.params = self.block.parameters()

    def forward(self, x, mode="train", update_stats=True):
        self.block.set_parameters(self.params)
        return self.block.forward(x, mode, update_stats)

    def jvp(self, x, x_dot, param_tangents=None, mode="train"):
        self.block.set_parameters(self.params)
        return self.block.jvp(x, x_dot, param_tangents, mode)

    def vjp(self, x, cot, mode="train"):
        self.block.set_parameters(self.params)
        _, tape = self.block.forward(x, mode, update_stats=False, record=True)
        return self.block.vjp(tape, cot, mode)


def layer_cases(dtype=np.float64, seed=0):
    """``(name, layer, input, mode)`` for every layer kind (batchnorm in both modes)."""
    rng = np.random.default_rng(seed)

    def bn(c, mode):
        layer = BatchNorm(c, dtype=dtype)
        layer.params["weight"] = (1 + 0.3 * rng.standard_normal(c)).astype(dtype)
        layer.params["bias"] = (0.3 * rng.standard_normal(c)).astype(dtype)
        layer.buffers["running_mean"] = (0.2 * rng.standard_normal(c)).astype(dtype)
        layer.buffers["running_var"] = (0.5 + rng.random(c)).astype(dtype)
        return layer

    def img(*s):
        return rng.standard_normal(s).astype(dtype)

    def away_from_zero(*s):
        a = rng.uniform(0.2, 1.0, size=s) * rng.choice([-1.0, 1.0], size=s)
        return a.astype(dtype)

    return [
        ("conv2d k3 s1 p1", Conv2d(3, 4, 3, 1, 1, bias=True, rng=rng, dtype=dtype), img(2, 3, 6, 5), "train"),
        ("conv2d k3 s2 p1", Conv2d(3, 4, 3, 2, 1, bias=False, rng=rng, dtype=dtype), img(2, 3, 7, 6), "train"),
        ("conv2d k1 s2", Conv2d(3, 2, 1, 2, 0, bias=False, rng=rng, dtype=dtype), img(2, 3, 5, 5), "train"),
        ("linear", Linear(5, 3, rng=rng, dtype=dtype), img(4, 5), "train"),
        ("batchnorm2d train", bn(3, "train"), img(4, 3, 3, 2), "train"),
        ("batchnorm2d eval", bn(3, "eval"), img(4, 3, 3, 2), "eval"),
        ("batchnorm1d train", bn(5, "train"), img(6, 5), "train"),
        ("relu", ReLU(), away_from_zero(3, 2, 4, 4), "train"),
        ("avgpool2d", AvgPool2d(2), img(2, 3, 4, 6), "train"),
        ("adaptive_avgpool2d", AdaptiveAvgPool2d(2, 2), img(2, 3, 5, 7), "train"),
        ("flatten", Flatten(), img(2, 3, 2, 2), "train"),
        ("residual_add", _ResidualAdd(rng, dtype), img(2, 3, 4, 4), "train"),
    ]


def _random_direction(layer, x, rng):
    u_x = rng.standard_normal(x.shape).astype(x.dtype)
    u_p = {k: rng.standard_normal(v.shape).astype(v.dtype) for k, v in layer.params.items()}
    return u_x, u_p


def adjoint_error(layer, x, mode, rng) -> float:
    """Relative gap between <v, J u> and <J^T v, u> over inputs and parameters."""
    u_x, u_p = _random_direction(layer, x, rng)
    y, y_dot = layer.jvp(x, u_x, u_p, mode)
    v = rng.standard_normal(y.shape).astype(y.dtype)
    x_cot, p_cot = layer.vjp(x, v, mode)
    lhs = float(np.vdot(v, y_dot))
    rhs = float(np.vdot(x_cot, u_x)) + sum(float(np.vdot(p_cot[k], u_p[k])) for k in u_p)
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)


def fd_error(layer, x, mode, rng, step=1e-3) -> float:
    """Relative error of the JVP tangent against central differences of the forward map.

    The joint (input, parameter) direction is scaled to unit norm, so ``step``
    is the Euclidean length of the perturbation.
    """
    u_x, u_p = _random_direction(layer, x, rng)
    norm = np.sqrt(np.sum(u_x ** 2) + sum(np.sum(v ** 2) for v in u_p.values()))
    u_x = u_x / norm
    u_p = {k: v / norm for k, v in u_p.items()}
    _, y_dot = layer.jvp(x, u_x, u_p, mode)
    base = {k: v.copy() for k, v in layer.params.items()}

    def f(s):
        for k in base:
            layer.params[k] = base[k] + s * u_p[k]
        return layer.forward(x + s * u_x, mode, update_stats=False)

    fd = (f(step) - f(-step)) / (2 * step)
    for k in base:
        layer.params[k] = base[k]
    return float(np.linalg.norm(fd - y_dot) / max(np.linalg.norm(y_dot), 1e-300))


@contextlib.contextmanager
def flipped_vjp(kind: str):
    """Test hook: negate the input cotangent of every layer of ``kind``."""
    classes = {c.kind: c for c in (Conv2d, Linear, BatchNorm, ReLU, AvgPool2d, AdaptiveAvgPool2d, Flatten)}
    cls = classes[kind]
    orig = cls.vjp

    def bad(self, x, cot, mode="train"):
        dx, g = orig(self, x, cot, mode)
        return -dx, g

    cls.vjp = bad
    try:
        yield
    finally:
        cls.vjp = orig


def layer_checks(dtype=np.float64, seed=0) -> list:
    rng = np.random.default_rng(seed + 1)
    adj_tol = 1e-10 if dtype == np.float64 else 1e-4
    out = []
    for name, layer, x, mode in layer_cases(dtype, seed):
        out.append(Check(f"adjoint {name}", adjoint_error(layer, x, mode, rng), adj_tol))
        if dtype == np.float64:
            out.append(Check(f"finite-diff {name}", fd_error(layer, x, mode, rng), 1e-5))
    return out


def _tiny_net(seed, dtype="float64"):
    net = build_backbone("micro4", input_shape=(1, 8, 8), class_count=4, seed=seed, dtype=dtype)
    return attach_auxiliaries(net, "cnn", h_chan=3, n_depth=2, seed=seed)


def engine_checks(seed=0) -> list:
    """Forward-mode directional derivatives against reverse-mode gradients and finite differences."""
    rng = np.random.default_rng(seed)
    net = _tiny_net(seed)
    x = rng.standard_normal((5, 1, 8, 8))
    y = rng.integers(0, 4, 5)
    g = reverse_gradient(net, x, y)
    tangents = {j: {k: rng.standard_normal(v.shape) for k, v in b.parameters().items()} for j, b in enumerate(net.blocks)}
    _, dd = forward_directional(net, x, y, WeightTangents(tangents))
    ref = sum(float(np.vdot(g["blocks"][j][k], t)) for j, tj in tangents.items() for k, t in tj.items())
    out = [Check("cross-engine weight direction", abs(dd - ref) / abs(ref), 1e-10)]

    j = 1
    a = rng.standard_normal(g["activity"][j].shape)
    _, dd = forward_directional(net, x, y, ActivityTangent(j, a))
    ref = float(np.vdot(g["activity"][j], a)) / len(y)
    out.append(Check("cross-engine activity direction", abs(dd - ref) / abs(ref), 1e-10))

    # one-hot weight direction against central differences of the loss
    name = "body.0.weight"
    p = net.blocks[2].parameters()[name]
    e = np.zeros_like(p)
    e.flat[3] = 1.0
    _, dd = forward_directional(net, x, y, WeightTangents({2: {name: e}}))
    h = 1e-5

    def loss_at(s):
        p.flat[3] += s
        val = cross_entropy(net.forward(x, "train"), y)
        p.flat[3] -= s
        return val

    fd = (loss_at(h) - loss_at(-h)) / (2 * h)
    out.append(Check("forward_directional vs finite diff", abs(dd - fd) / max(abs(fd), 1e-12), 1e-5))
    return out


def estimator_checks(seed=0) -> list:
    """Forward-mode and two-backward-pass estimators agree for every (guess, target, space)."""
    rng = np.random.default_rng(seed)
    net = _tiny_net(seed)
    x = rng.standard_normal((4, 1, 8, 8))
    y = rng.integers(0, 4, 4)
    out = []
    for fam in ("gaussian", "rademacher", "ntk", "fixed_ntk", "local"):
        if fam == "fixed_ntk":
            make_fixed_heads(net, np.random.default_rng(seed + 3))
        for tgt in ("global", "local", "intermediate"):
            for space in ("weight", "activity"):
                err = 0.0
                for j in range(net.n_blocks):
                    ups = [estimate_block(net, j, x, y, EstimatorConfig(GuessSpec(fam), TargetSpec(tgt), space, path=p),
                                          np.random.default_rng(seed + 7)) for p in ("two_pass", "forward")]
                    num = np.sqrt(sum(np.sum((ups[0].grads[k] - ups[1].grads[k]) ** 2) for k in ups[0].grads))
                    den = np.sqrt(sum(np.sum(ups[0].grads[k] ** 2) for k in ups[0].grads))
                    err = max(err, num / den if den > 0 else num)
                out.append(Check(f"paths agree {fam}/{tgt}/{space}", float(err), 1e-5))
    return out


def run_all(dtype=np.float64, seed=0, estimators=True) -> list:
    checks = layer_checks(dtype, seed)
    if dtype == np.float64:
        checks += engine_checks(seed)
        if estimators:
            checks += estimator_checks(seed)
    return checks
