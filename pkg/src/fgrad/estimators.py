"""Forward-gradient estimators for a single block.

The weight-perturbation estimate with per-sample guesses ``G^i``,
``(1/n) <grad_B, (1/n) sum_i G^i> sum_i G^i``, equals ``<grad_B, Gbar> Gbar``
with ``Gbar`` the mean guess; that reduced form is what is computed here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    BatchContext,
    WeightTangents,
    flat_dot,
    forward_directional,
    per_sample_directional,
)
from .guesses import (
    AUX_MODES,
    RANDOM_FAMILIES,
    SPACES,
    GuessSpec,
    TargetSpec,
    ZeroGuessError,
    draw_random_guess,
    guess_loss,
    normalize_params,
    normalize_rows,
    target_loss,
)
from .models import BlockNetwork

PATHS = ("two_pass", "forward")


@dataclass(frozen=True)
class EstimatorConfig:
    guess: GuessSpec
    target: TargetSpec = TargetSpec("global")
    space: str = "weight"
    span_projection: bool = False
    ridge_eps: float = 1e-8
    path: str = "two_pass"

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"space must be one of {SPACES}, got {self.space!r}")
        if self.path not in PATHS:
            raise ValueError(f"path must be one of {PATHS}, got {self.path!r}")
        if self.span_projection:
            if self.guess.family != "local" or self.space != "activity":
                raise ValueError("span_projection requires guess=local and space=activity")
            if self.path != "two_pass":
                raise ValueError("span_projection is computed from reverse-mode quantities (path=two_pass)")
        if self.ridge_eps < 0:
            raise ValueError("ridge_eps must be non-negative")


@dataclass
class BlockUpdate:
    grads: dict
    cosine: float = float("nan")
    guess_norm: float = float("nan")
    target_norm: float = float("nan")
    zero_guesses: int = 0
    extras: dict = field(default_factory=dict)


def estimate_core(target: np.ndarray, guess: np.ndarray) -> np.ndarray:
    """``<target, guess> guess``."""
    target, guess = np.asarray(target), np.asarray(guess)
    if target.shape != guess.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {guess.shape}")
    return np.vdot(target, guess) * guess


def project_span(targets: np.ndarray, guesses: np.ndarray, ridge_eps: float = 1e-8) -> np.ndarray:
    """Least-squares projection of each target onto ``span(guesses)``.

    Solves ``(G G^T + eps I) c_i = G t_i`` for every target ``t_i``.
    """
    targets, guesses = np.asarray(targets), np.asarray(guesses)
    if targets.shape != guesses.shape:
        raise ValueError(f"shape mismatch: {targets.shape} vs {guesses.shape}")
    n = targets.shape[0]
    T = targets.reshape(n, -1).astype(np.float64)
    G = guesses.reshape(n, -1).astype(np.float64)
    gram = G @ G.T + ridge_eps * np.eye(n)
    coef = np.linalg.solve(gram, G @ T.T)  # column i holds the coefficients for target i
    return (coef.T @ G).reshape(targets.shape).astype(targets.dtype)


def cosine_similarity_batch(targets, guesses) -> float:
    """Mean per-sample cosine between targets and guesses; zero-norm samples are skipped.

    Dicts of parameter tensors are compared tensor by tensor and averaged.
    """
    if isinstance(targets, dict):
        vals = []
        for k in targets:
            t = targets[k].ravel().astype(np.float64)
            g = guesses[k].ravel().astype(np.float64)
            nt, ng = np.linalg.norm(t), np.linalg.norm(g)
            if nt > 0 and ng > 0:
                vals.append(np.dot(t, g) / (nt * ng))
        if not vals:
            raise ValueError("all parameter tensors have zero norm")
        return float(np.clip(np.mean(vals), -1.0, 1.0))
    targets, guesses = np.asarray(targets), np.asarray(guesses)
    if targets.shape != guesses.shape:
        raise ValueError(f"shape mismatch: {targets.shape} vs {guesses.shape}")
    n = targets.shape[0]
    T = targets.reshape(n, -1).astype(np.float64)
    G = guesses.reshape(n, -1).astype(np.float64)
    nt, ng = np.linalg.norm(T, axis=1), np.linalg.norm(G, axis=1)
    ok = (nt > 0) & (ng > 0)
    if not ok.any():
        raise ValueError("all samples have zero norm")
    cos = (T[ok] * G[ok]).sum(axis=1) / (nt[ok] * ng[ok])
    return float(np.clip(cos.mean(), -1.0, 1.0))


def _safe_cosine(t, g):
    try:
        return cosine_similarity_batch(t, g)
    except ValueError:
        return float("nan")


def _norm(a):
    if isinstance(a, dict):
        return float(np.sqrt(sum(np.vdot(v.astype(np.float64), v.astype(np.float64)) for v in a.values())))
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def _zeros_like(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _check(net, j, cfg, space):
    if cfg.space != space:
        raise ValueError(f"config space is {cfg.space!r}, expected {space!r}")
    if not 0 <= j < net.n_blocks:
        raise IndexError(f"block index {j} out of range")


def weight_guess(net, j, ctx, cfg, rng, target=None):
    """Block-parameter guess per the config (raw for random families)."""
    fam = cfg.guess.family
    params = net.blocks[j].parameters()
    if fam in RANDOM_FAMILIES:
        if rng is None:
            raise ValueError("random guesses need an rng")
        return {k: draw_random_guess(v.shape, fam, rng, v.dtype) for k, v in params.items()}
    if fam == "exact":
        return normalize_params(target if target is not None else ctx.weight_grad(target_loss(net, j, cfg.target), j),
                                cfg.guess.per_tensor)
    loss = guess_loss(net, j, AUX_MODES[fam], rng)
    return normalize_params(ctx.weight_grad(loss, j), cfg.guess.per_tensor)


def activity_guess(net, j, ctx, cfg, rng, target=None):
    """Per-sample output-space guesses and the count of zero-norm samples."""
    fam = cfg.guess.family
    if fam in RANDOM_FAMILIES:
        if rng is None:
            raise ValueError("random guesses need an rng")
        out = ctx.tape.block_output(j)
        return draw_random_guess(out.shape, fam, rng, out.dtype), 0
    if fam == "exact":
        t = target if target is not None else ctx.activity_grad(target_loss(net, j, cfg.target), j)
        return normalize_rows(t)
    loss = guess_loss(net, j, AUX_MODES[fam], rng)
    return normalize_rows(ctx.activity_grad(loss, j))


def estimate_weight(net: BlockNetwork, j: int, x, y, cfg: EstimatorConfig, rng=None, ctx: BatchContext | None = None,
                    diagnostics=True) -> BlockUpdate:
    """Weight-perturbation update ``<grad_B, G> G`` for block ``j``.

    ``cfg.path == "two_pass"`` forms the target gradient by reverse mode and
    projects it; ``"forward"`` obtains the scalar ``<grad_B, G>`` from a
    single JVP sweep seeded with ``G`` on block ``j``'s parameters.
    """
    _check(net, j, cfg, "weight")
    ctx = ctx if ctx is not None else BatchContext(net, x, y)
    tloss = target_loss(net, j, cfg.target)
    target = None
    if cfg.path == "two_pass" or cfg.guess.family == "exact" or diagnostics:
        target = ctx.weight_grad(tloss, j)
    try:
        guess = weight_guess(net, j, ctx, cfg, rng, target)
    except ZeroGuessError:
        return BlockUpdate(_zeros_like(net.blocks[j].parameters()), zero_guesses=1,
                           target_norm=_norm(target) if target is not None else float("nan"))
    if cfg.guess.per_tensor and cfg.guess.family not in RANDOM_FAMILIES:
        if cfg.path == "two_pass":
            grads = {k: (np.vdot(target[k].astype(np.float64), guess[k].astype(np.float64)) * guess[k]).astype(guess[k].dtype)
                     for k in guess}
        else:
            grads = {}
            for k in guess:
                _, c = forward_directional(net, ctx.x, ctx.y, WeightTangents({j: {k: guess[k]}}), tloss, ctx.mode)
                grads[k] = (c * guess[k]).astype(guess[k].dtype)
    else:
        if cfg.path == "two_pass":
            coef = flat_dot(target, guess)
        else:
            _, coef = forward_directional(net, ctx.x, ctx.y, WeightTangents({j: guess}), tloss, ctx.mode)
        grads = {k: (coef * g).astype(g.dtype) for k, g in guess.items()}
    upd = BlockUpdate(grads, guess_norm=_norm(guess))
    if target is not None:
        upd.target_norm = _norm(target)
        upd.cosine = _safe_cosine(target, guess)
    return upd


def estimate_activity(net: BlockNetwork, j: int, x, y, cfg: EstimatorConfig, rng=None,
                      ctx: BatchContext | None = None, diagnostics=True) -> BlockUpdate:
    """Activity-perturbation update for block ``j``.

    Each sample's target activation gradient is projected on its guess (or,
    with span projection, on the span of the batch of guesses) and the
    projected cotangent is pulled back through block ``j`` (batch mean).
    """
    _check(net, j, cfg, "activity")
    ctx = ctx if ctx is not None else BatchContext(net, x, y)
    n = ctx.n
    tloss = target_loss(net, j, cfg.target)
    target = None
    if cfg.path == "two_pass" or cfg.guess.family == "exact" or diagnostics:
        target = ctx.activity_grad(tloss, j)
    guess, zeros = activity_guess(net, j, ctx, cfg, rng, target)
    if cfg.span_projection:
        proj = project_span(target, guess, cfg.ridge_eps)
    else:
        if cfg.path == "two_pass":
            coef = (target.reshape(n, -1).astype(np.float64) * guess.reshape(n, -1).astype(np.float64)).sum(axis=1)
        else:
            coef = per_sample_directional(net, ctx.x, ctx.y, j, guess, tloss, ctx.mode)
        proj = (coef.reshape((n,) + (1,) * (guess.ndim - 1)) * guess).astype(guess.dtype)
    grads = ctx.block_vjp(j, (proj / n).astype(guess.dtype))
    upd = BlockUpdate(grads, guess_norm=_norm(guess), zero_guesses=zeros)
    if target is not None:
        upd.target_norm = _norm(target)
        upd.cosine = _safe_cosine(target, guess)
    return upd


def estimate_block(net, j, x, y, cfg: EstimatorConfig, rng=None, ctx=None, diagnostics=True) -> BlockUpdate:
    fn = estimate_weight if cfg.space == "weight" else estimate_activity
    return fn(net, j, x, y, cfg, rng, ctx, diagnostics)


def variance_reference(dim: int, family: str) -> float:
    """Analytic ``E||g - t||^2 / ||t||^2`` for ``g = <t, G> G``.

    With ``E[(G.t)^2 ||G||^2]`` equal to ``(d + 2)||t||^2`` for Gaussian and
    ``d ||t||^2`` for Rademacher entries, the ratio is ``d + 1`` and ``d - 1``.
    """
    if family == "gaussian":
        return dim + 1.0
    if family == "rademacher":
        return dim - 1.0
    raise ValueError(f"family must be gaussian or rademacher, got {family!r}")


def monte_carlo_stats(dim: int, family: str, draws: int, seed: int = 0, target=None) -> dict:
    """Empirical bias and relative second moment of the random-guess estimate."""
    if dim < 1 or draws < 1:
        raise ValueError("dim and draws must be >= 1")
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(dim) if target is None else np.asarray(target, dtype=np.float64)
    G = draw_random_guess((draws, dim), family, rng, np.float64)
    g = (G @ t)[:, None] * G
    tt = float(t @ t)
    mean = g.mean(axis=0)
    return {
        "dim": dim,
        "family": family,
        "draws": draws,
        "max_abs_bias": float(np.abs(mean - t).max()),
        "bias_bound": float(4 * np.sqrt(tt) * np.sqrt(dim / draws)),
        "ratio": float(((g - t) ** 2).sum(axis=1).mean() / tt),
        "reference": variance_reference(dim, family),
    }
