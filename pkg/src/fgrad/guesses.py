"""Gradient guesses and gradient targets for one block at either insertion space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import BatchContext, LossSpec, global_loss, intermediate_loss, local_loss
from .models import BlockNetwork, fresh_aux

GUESS_FAMILIES = ("gaussian", "rademacher", "ntk", "fixed_ntk", "local", "exact")
RANDOM_FAMILIES = ("gaussian", "rademacher")
AUX_FAMILIES = ("ntk", "fixed_ntk", "local")
TARGET_KINDS = ("global", "local", "intermediate")
SPACES = ("weight", "activity")
AUX_MODES = {"local": "trained", "ntk": "reinit_ntk", "fixed_ntk": "fixed_ntk"}


class ZeroGuessError(ArithmeticError):
    """The guess direction has zero norm (e.g. a dead auxiliary)."""


@dataclass(frozen=True)
class GuessSpec:
    """Guess family plus its normalization.

    ``exact`` is the degenerate guess equal to the normalized target; it turns
    the estimator into plain gradient descent on the target loss.
    """

    family: str
    aux_kind: str | None = None
    normalization: str | None = None
    per_tensor: bool = False

    def __post_init__(self):
        if self.family not in GUESS_FAMILIES:
            raise ValueError(f"guess family must be one of {GUESS_FAMILIES}, got {self.family!r}")
        expected = "raw" if self.family in RANDOM_FAMILIES else "unit_norm"
        norm = self.normalization or expected
        if norm != expected:
            raise ValueError(f"{self.family} guesses use {expected!r} normalization")
        object.__setattr__(self, "normalization", norm)


@dataclass(frozen=True)
class TargetSpec:
    kind: str = "global"

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"target kind must be one of {TARGET_KINDS}, got {self.kind!r}")


def check_space(space):
    if space not in SPACES:
        raise ValueError(f"space must be one of {SPACES}, got {space!r}")


def draw_random_guess(shape, family, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """I.i.d. zero-mean unit-variance entries: N(0, 1) or equiprobable +-1."""
    if family == "gaussian":
        return rng.standard_normal(shape).astype(dtype)
    if family == "rademacher":
        return (2.0 * rng.integers(0, 2, size=shape) - 1.0).astype(dtype)
    raise ValueError(f"random guess family must be gaussian or rademacher, got {family!r}")


def target_loss(net: BlockNetwork, j: int, target: TargetSpec) -> LossSpec:
    if target.kind == "global":
        return global_loss(net)
    if target.kind == "local":
        return local_loss(net, j)
    return intermediate_loss(net, j)


def make_fixed_heads(net: BlockNetwork, rng: np.random.Generator) -> list:
    """One random, never-trained auxiliary per block (the last block gets a random classifier)."""
    heads = [fresh_aux(net, j, rng) for j in range(net.n_blocks)]
    net.fixed_aux = heads
    return heads


def guess_loss(net: BlockNetwork, j: int, aux_mode: str, rng=None) -> LossSpec:
    if aux_mode == "trained":
        return local_loss(net, j)
    if aux_mode == "reinit_ntk":
        if rng is None:
            raise ValueError("reinit_ntk guesses need an rng")
        return local_loss(net, j, fresh_aux(net, j, rng))
    if aux_mode == "fixed_ntk":
        heads = getattr(net, "fixed_aux", None)
        if heads is None:
            raise ValueError("fixed_ntk guesses need make_fixed_heads(net, rng) first")
        return local_loss(net, j, heads[j])
    raise ValueError(f"unknown aux mode {aux_mode!r}")


def normalize_rows(a: np.ndarray):
    """Unit-normalize each sample; zero rows stay zero. Returns (normalized, zero_count)."""
    n = a.shape[0]
    flat = a.reshape(n, -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    out = np.divide(flat, norms[:, None], out=np.zeros_like(flat), where=norms[:, None] > 0)
    return out.reshape(a.shape).astype(a.dtype), int((norms == 0).sum())


def normalize_params(g: dict, per_tensor=False) -> dict:
    """Unit-normalize a parameter dict jointly (or tensor by tensor)."""
    if per_tensor:
        out = {}
        for k, v in g.items():
            nrm = float(np.linalg.norm(v.astype(np.float64)))
            if nrm == 0:
                raise ZeroGuessError(f"zero-norm guess for {k}")
            out[k] = (v / nrm).astype(v.dtype)
        return out
    nrm = float(np.sqrt(sum(np.vdot(v.astype(np.float64), v.astype(np.float64)) for v in g.values())))
    if nrm == 0:
        raise ZeroGuessError("zero-norm guess")
    return {k: (v / nrm).astype(v.dtype) for k, v in g.items()}


def _context(net, x, y, ctx):
    return ctx if ctx is not None else BatchContext(net, x, y)


def local_guess(net: BlockNetwork, j: int, x, y, space: str, aux_mode="trained", rng=None, ctx=None,
                per_tensor=False):
    """Normalized auxiliary-loss gradient at the insertion point of block ``j``.

    Activity space returns per-sample unit vectors shaped like the block
    output (zero rows where the gradient vanishes); weight space returns a
    parameter dict of unit joint norm and raises :class:`ZeroGuessError` if
    the gradient is zero.
    """
    check_space(space)
    ctx = _context(net, x, y, ctx)
    loss = guess_loss(net, j, aux_mode, rng)
    if space == "activity":
        guess, _ = normalize_rows(ctx.activity_grad(loss, j))
        return guess
    return normalize_params(ctx.weight_grad(loss, j), per_tensor)


def target_gradient(net: BlockNetwork, j: int, x, y, target: TargetSpec, space: str, ctx=None):
    """Unnormalized target: per-sample activation gradients or batch-mean weight gradients."""
    check_space(space)
    ctx = _context(net, x, y, ctx)
    loss = target_loss(net, j, target)
    if space == "activity":
        return ctx.activity_grad(loss, j)
    return ctx.weight_grad(loss, j)
