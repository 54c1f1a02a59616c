"""Whole-network forward-mode and reverse-mode differentiation.

Losses are addressed by :class:`LossSpec`: the cross-entropy of the head
attached after block ``block`` (an auxiliary head, or the classifier for the
last block). All losses are minibatch means.

Two realizations of a projected gradient exist. :func:`forward_directional`
produces ``<grad, direction>`` from one forward sweep with no retained
activations; :func:`two_pass_projection` computes target and guess gradients
with two backward passes and projects them explicitly. The latter is the
reference the forward-mode estimators are checked against.
"""
from __future__ import annotations

import gc
import weakref
from dataclasses import dataclass

import numpy as np

from .layers import NonFiniteError, ShapeError, cross_entropy, cross_entropy_grad, cross_entropy_jvp
from .models import BlockNetwork, Sequential

_LIVE_TAPES: "weakref.WeakSet[ReverseTape]" = weakref.WeakSet()


def live_activation_count(collect: bool = True) -> int:
    """Number of activation arrays currently held by live reverse tapes."""
    if collect:
        gc.collect()
    return sum(t.n_arrays() for t in list(_LIVE_TAPES))


@dataclass(frozen=True)
class LossSpec:
    """Cross-entropy at the output of ``block``, through ``head`` if given."""

    block: int
    head: Sequential | None = None

    def resolve(self, net: BlockNetwork) -> Sequential:
        return self.head if self.head is not None else net.local_head(self.block)


def global_loss(net: BlockNetwork) -> LossSpec:
    return LossSpec(net.n_blocks - 1)


def local_loss(net: BlockNetwork, j: int, head: Sequential | None = None) -> LossSpec:
    return LossSpec(j, head)


def intermediate_loss(net: BlockNetwork, j: int) -> LossSpec:
    """Loss of block ``j + 1``; the last block falls back to the global loss."""
    return LossSpec(min(j + 1, net.n_blocks - 1))


@dataclass
class WeightTangents:
    """Parameter-space direction: ``{block index: {param name: tangent}}``."""

    tangents: dict


@dataclass
class ActivityTangent:
    """Activation-space direction seeded at the output of ``block``."""

    block: int
    tangent: np.ndarray


class ReverseTape:
    """Recorded forward pass from ``first`` onward.

    ``inputs[i]`` is the input of block ``first + i`` and the final entry is
    the output of the last recorded block; ``block_tapes`` hold the per-layer
    saved inputs that the block VJPs consume.
    """

    def __init__(self, first, inputs, block_tapes, mode):
        self.first = first
        self.inputs = inputs
        self.block_tapes = block_tapes
        self.mode = mode
        _LIVE_TAPES.add(self)

    @property
    def last(self):
        return self.first + len(self.block_tapes) - 1

    def block_input(self, j):
        return self.inputs[j - self.first]

    def block_output(self, j):
        return self.inputs[j - self.first + 1]

    def n_layers(self) -> int:
        n = 0
        for t in self.block_tapes:
            n += sum(len(v) for v in t.values())
        return n

    def n_arrays(self) -> int:
        return self.n_layers() + len(self.inputs)


def record_forward(net: BlockNetwork, x, mode="train", update_stats=False, first=0, last=None) -> ReverseTape:
    """Run blocks ``first..last`` on ``x`` (the input of block ``first``), recording a tape."""
    last = net.n_blocks - 1 if last is None else last
    inputs, tapes = [x], []
    for j in range(first, last + 1):
        x, t = net.blocks[j].forward(x, mode, update_stats, record=True)
        if not np.isfinite(x).all():
            raise NonFiniteError(f"block {j} produced non-finite activations")
        inputs.append(x)
        tapes.append(t)
    return ReverseTape(first, inputs, tapes, mode)


def primal_forward(net: BlockNetwork, x, upto: int, mode="train"):
    """Input of block ``upto`` (no recording, no statistic updates)."""
    for j in range(upto):
        x = net.blocks[j].forward(x, mode, update_stats=False)
    return x


def head_loss_grad(head: Sequential, h, y, mode="train"):
    """Returns (loss, logits, d loss / d h, head param grads)."""
    logits, saved = head.forward(h, mode, update_stats=False, record=True)
    loss, g = cross_entropy_grad(logits, y)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    h_cot, grads = head.vjp(saved, g, mode)
    return loss, logits, h_cot, grads


def pullback(net: BlockNetwork, tape: ReverseTape, y, loss: LossSpec, to_block: int, want_weights=True):
    """Backpropagate ``loss`` down to the output of ``to_block``.

    Returns ``(loss_value, cot, weight_grads)`` where ``cot`` is the batch-mean
    cotangent at the output of ``to_block`` and ``weight_grads`` maps each
    traversed block index ``j`` (``to_block < j <= loss.block``) to its
    parameter gradients.
    """
    if not (tape.first <= to_block + 1 and loss.block <= tape.last):
        raise RuntimeError("tape does not cover the requested blocks")
    if to_block > loss.block:
        raise ValueError("loss block precedes the insertion point")
    head = loss.resolve(net)
    value, _, cot, _ = head_loss_grad(head, tape.block_output(loss.block), y, tape.mode)
    grads = {}
    for j in range(loss.block, to_block, -1):
        cot, g = net.blocks[j].vjp(tape.block_tapes[j - tape.first], cot, tape.mode)
        if want_weights:
            grads[j] = g
    return value, cot, grads


def block_weight_grad(net: BlockNetwork, tape: ReverseTape, j: int, out_cot):
    """Parameter gradient of block ``j`` for the cotangent ``out_cot`` at its output."""
    _, g = net.blocks[j].vjp(tape.block_tapes[j - tape.first], out_cot, tape.mode)
    return g


def reverse_gradient(net: BlockNetwork, x, y, loss: LossSpec | None = None, insertion="all", mode="train", tape=None):
    """Exact reverse-mode gradients of a minibatch-mean loss.

    ``insertion`` selects what is returned:

    * ``("weight", j)``: batch-mean gradient dict for block ``j``'s parameters;
    * ``("activity", j)``: per-sample gradients at the output of block ``j``,
      i.e. ``n * dL/dx_{j+1}`` (the gradient of each sample's own loss when
      samples do not interact);
    * ``"all"``: dict with ``"blocks"`` (per-block parameter gradients),
      ``"head"`` and ``"activity"`` (per-sample output gradients per block).
    """
    loss = global_loss(net) if loss is None else loss
    if tape is None:
        tape = record_forward(net, x, mode, update_stats=False, last=loss.block)
    n = len(y)
    if insertion == "all":
        head = loss.resolve(net)
        value, _, cot, head_grads = head_loss_grad(head, tape.block_output(loss.block), y, mode)
        blocks, activity = {}, {}
        for j in range(loss.block, tape.first - 1, -1):
            activity[j] = cot * n
            cot, blocks[j] = net.blocks[j].vjp(tape.block_tapes[j - tape.first], cot, mode)
        return {"loss": value, "blocks": blocks, "head": head_grads, "activity": activity, "input": cot}
    space, j = insertion
    if space == "activity":
        _, cot, _ = pullback(net, tape, y, loss, j, want_weights=False)
        return cot * n
    if space == "weight":
        if j > loss.block:
            raise ValueError("block lies above the loss")
        _, cot, _ = pullback(net, tape, y, loss, j, want_weights=False)
        return block_weight_grad(net, tape, j, cot)
    raise ValueError(f"unknown insertion {insertion!r}")


def forward_directional(net: BlockNetwork, x, y, direction, loss: LossSpec | None = None, mode="train"):
    """Loss value and ``<grad loss, direction>`` from a single forward sweep.

    Nothing is recorded for a later backward pass: activations are dropped as
    soon as the next block has consumed them.
    """
    loss = global_loss(net) if loss is None else loss
    if isinstance(direction, WeightTangents):
        blocks = sorted(direction.tangents)
        if not blocks:
            h = primal_forward(net, x, loss.block + 1, mode)
            logits = loss.resolve(net).forward(h, mode, update_stats=False)
            value = cross_entropy(logits, y)
            if not np.isfinite(value):
                raise NonFiniteError("non-finite loss")
            return value, 0.0
        start = blocks[0]
        if blocks[-1] > loss.block:
            raise ValueError("direction touches blocks above the loss")
        h = primal_forward(net, x, start, mode)
        h_dot = np.zeros_like(h)
        for j in range(start, loss.block + 1):
            t = direction.tangents.get(j)
            if t is not None:
                params = net.blocks[j].parameters()
                for name, v in t.items():
                    if name not in params or params[name].shape != v.shape:
                        raise ShapeError(f"block {j}: bad tangent for {name!r}")
            h, h_dot = net.blocks[j].jvp(h, h_dot, t, mode)
    elif isinstance(direction, ActivityTangent):
        j = direction.block
        if j > loss.block:
            raise ValueError("activity insertion lies above the loss")
        h = primal_forward(net, x, j + 1, mode)
        if direction.tangent.shape != h.shape:
            raise ShapeError(f"activity tangent shape {direction.tangent.shape} != {h.shape}")
        h_dot = direction.tangent.astype(h.dtype, copy=False)
        for k in range(j + 1, loss.block + 1):
            h, h_dot = net.blocks[k].jvp(h, h_dot, None, mode)
    else:
        raise TypeError("direction must be WeightTangents or ActivityTangent")
    logits, logits_dot = loss.resolve(net).jvp(h, h_dot, None, mode)
    value, dd = cross_entropy_jvp(logits, logits_dot, y)
    if not np.isfinite(value):
        raise NonFiniteError("non-finite loss")
    return value, dd


def per_sample_directional(net: BlockNetwork, x, y, j, guesses, loss: LossSpec | None = None, mode="train"):
    """``<n dL/dx^i_{j+1}, guesses[i]>`` for every sample via one JVP sweep per sample."""
    n = len(y)
    out = np.empty(n)
    for i in range(n):
        t = np.zeros_like(guesses)
        t[i] = guesses[i]
        _, dd = forward_directional(net, x, y, ActivityTangent(j, t), loss, mode)
        out[i] = n * dd
    return out


# ---------------------------------------------------------------------------
# flat-vector helpers shared with the estimators


def flat_dot(a: dict, b: dict) -> float:
    return float(sum(np.vdot(a[k].astype(np.float64), b[k].astype(np.float64)) for k in a))


def flat_norm(a: dict) -> float:
    return float(np.sqrt(sum(np.vdot(v.astype(np.float64), v.astype(np.float64)) for v in a.values())))


def scale_dict(a: dict, s: float) -> dict:
    return {k: (v * s).astype(v.dtype, copy=False) for k, v in a.items()}


def two_pass_projection(net: BlockNetwork, x, y, target_loss: LossSpec, guess_loss: LossSpec, j: int, space: str,
                        mode="train", normalize=True, tape=None):
    """Projected update for block ``j`` from two backward passes.

    The guess is the gradient of ``guess_loss`` at the insertion point
    (normalized to unit norm per sample in activity space, jointly over the
    block's parameters in weight space); the target gradient of
    ``target_loss`` is projected onto it. Returns the parameter update dict.
    """
    last = max(target_loss.block, guess_loss.block)
    if tape is None:
        tape = record_forward(net, x, mode, update_stats=False, last=last)
    n = len(y)
    _, t_cot, _ = pullback(net, tape, y, target_loss, j, want_weights=False)
    _, g_cot, _ = pullback(net, tape, y, guess_loss, j, want_weights=False)
    if space == "weight":
        target = block_weight_grad(net, tape, j, t_cot)
        guess = block_weight_grad(net, tape, j, g_cot)
        if normalize:
            norm = flat_norm(guess)
            guess = scale_dict(guess, 1.0 / norm) if norm > 0 else scale_dict(guess, 0.0)
        return scale_dict(guess, flat_dot(target, guess))
    if space == "activity":
        target = t_cot * n
        guess = g_cot * n
        flat_g = guess.reshape(n, -1).astype(np.float64)
        if normalize:
            norms = np.linalg.norm(flat_g, axis=1)
            flat_g = np.divide(flat_g, norms[:, None], out=np.zeros_like(flat_g), where=norms[:, None] > 0)
        coef = (target.reshape(n, -1).astype(np.float64) * flat_g).sum(axis=1)
        proj = (coef[:, None] * flat_g).reshape(target.shape) / n
        return block_weight_grad(net, tape, j, proj.astype(target.dtype))
    raise ValueError(f"space must be 'weight' or 'activity', got {space!r}")


class BatchContext:
    """One recorded forward pass on a minibatch with memoized pullbacks.

    Every cotangent of a given loss is computed once, walking down from the
    loss block and keeping each intermediate block-output cotangent, so all
    blocks of a training step share a single backward sweep per loss.
    """

    def __init__(self, net: BlockNetwork, x, y, mode="train", update_stats=False, tape=None):
        self.net, self.x, self.y, self.mode = net, x, np.asarray(y), mode
        self.tape = tape if tape is not None else record_forward(net, x, mode, update_stats)
        self._cots: dict = {}
        self._heads: dict = {}
        self._wgrads: dict = {}

    @property
    def n(self):
        return len(self.y)

    def seed_head(self, loss: LossSpec, value, h_cot, head_grads, logits=None):
        """Register an externally computed head pass (e.g. the auxiliary training step)."""
        self._heads[loss] = (value, logits, head_grads)
        self._cots.setdefault(loss, {})[loss.block] = h_cot

    def head_pass(self, loss: LossSpec):
        if loss not in self._heads:
            value, logits, cot, grads = head_loss_grad(loss.resolve(self.net), self.tape.block_output(loss.block), self.y, self.mode)
            self._heads[loss] = (value, logits, grads)
            self._cots.setdefault(loss, {})[loss.block] = cot
        return self._heads[loss]

    def loss_value(self, loss: LossSpec) -> float:
        return self.head_pass(loss)[0]

    def cot(self, loss: LossSpec, j: int):
        """Batch-mean cotangent of ``loss`` at the output of block ``j``."""
        if j > loss.block:
            raise ValueError("insertion point lies above the loss")
        self.head_pass(loss)
        cots = self._cots[loss]
        k = min(b for b in cots if b >= j)
        cot = cots[k]
        while k > j:
            cot, g = self.net.blocks[k].vjp(self.tape.block_tapes[k - self.tape.first], cot, self.mode)
            self._wgrads[(loss, k)] = g
            k -= 1
            cots[k] = cot
        return cot

    def activity_grad(self, loss: LossSpec, j: int):
        """Per-sample gradient ``n * dL/dx_{j+1}``."""
        return self.cot(loss, j) * self.n

    def has_weight_grad(self, loss: LossSpec, j: int) -> bool:
        return (loss, j) in self._wgrads

    def weight_grad(self, loss: LossSpec, j: int):
        key = (loss, j)
        if key not in self._wgrads:
            if j > self.tape.first:
                self.cot(loss, j - 1)  # the walk records block j's parameter gradient
            else:
                self._wgrads[key] = block_weight_grad(self.net, self.tape, j, self.cot(loss, j))
        return self._wgrads[key]

    def block_vjp(self, j: int, out_cot):
        return block_weight_grad(self.net, self.tape, j, out_cot)
