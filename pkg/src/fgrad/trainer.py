"""SGD training of a block network with forward-gradient block updates."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import BatchContext, global_loss, local_loss
from .estimators import EstimatorConfig, _safe_cosine, estimate_block
from .guesses import AUX_FAMILIES, RANDOM_FAMILIES, make_fixed_heads, normalize_rows
from .layers import NonFiniteError, cross_entropy, cross_entropy_grad
from .models import BlockNetwork

log = logging.getLogger(__name__)

AUX_TRAINING = ("co_trained", "detached_logging", "frozen")
DIAGNOSTICS = ("full", "cheap", "off")


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: OptimState, prefix: str = "") -> dict:
    """Heavy-ball SGD with coupled weight decay, in place.

    ``v <- m v + (g + wd p)``; ``p <- p - lr v``. Buffers are keyed by
    ``prefix + name`` so one state can serve several parameter groups.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {prefix}{name}")
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"{prefix}{name}: grad shape {g.shape} != param shape {p.shape}")
        d = g + state.weight_decay * p if state.weight_decay else g
        key = prefix + name
        v = state.buffers.get(key)
        if v is None or state.momentum == 0:
            v = np.array(d, dtype=p.dtype, copy=True)
        else:
            v *= state.momentum
            v += d
        state.buffers[key] = v
        p -= (state.lr * v).astype(p.dtype, copy=False)
    return params


@dataclass(frozen=True)
class Schedule:
    initial_lr: float
    decay_factor: float = 0.2
    step_epochs: int = 30

    def __post_init__(self):
        if self.initial_lr <= 0 or self.step_epochs < 1 or self.decay_factor <= 0:
            raise ValueError("schedule needs initial_lr > 0, decay_factor > 0, step_epochs >= 1")

    def lr(self, epoch: int) -> float:
        return self.initial_lr * self.decay_factor ** (epoch // self.step_epochs)


@dataclass(frozen=True)
class RunPlan:
    estimator: EstimatorConfig
    schedule: Schedule
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    aux_training: str = "co_trained"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    aux_lr: float | None = None
    diagnostics: str = "full"

    def __post_init__(self):
        if self.aux_training not in AUX_TRAINING:
            raise ValueError(f"aux_training must be one of {AUX_TRAINING}, got {self.aux_training!r}")
        if self.diagnostics not in DIAGNOSTICS:
            raise ValueError(f"diagnostics must be one of {DIAGNOSTICS}, got {self.diagnostics!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def validate(self, net: BlockNetwork):
        has_aux = any(a is not None for a in net.aux)
        fam = self.estimator.guess.family
        if fam in RANDOM_FAMILIES and has_aux and self.aux_training != "detached_logging":
            raise ValueError("random guesses with auxiliaries require aux_training=detached_logging")
        needs_aux = fam in AUX_FAMILIES or self.estimator.target.kind != "global"
        if needs_aux and net.n_blocks > 1 and not has_aux:
            raise ValueError(f"guess={fam} / target={self.estimator.target.kind} needs auxiliary heads")
        if fam == "local" and self.aux_training == "frozen":
            log.warning("local guesses from frozen auxiliaries")


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    local_train_loss: list
    local_test_loss: list
    cos_activity: list
    cos_weight: list
    zero_guesses: list
    skipped_steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _head_train(head, h, y):
    """Forward in train mode (updating BN statistics) and backprop a head."""
    logits, saved = head.forward(h, "train", update_stats=True, record=True)
    loss, g = cross_entropy_grad(logits, y)
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite head loss")
    h_cot, grads = head.vjp(saved, g, "train")
    return loss, logits, h_cot, grads


class Trainer:
    """Holds the network, per-group optimizer state and rng streams of one run."""

    def __init__(self, net: BlockNetwork, plan: RunPlan, rngs: dict | None = None):
        plan.validate(net)
        self.net, self.plan = net, plan
        if rngs is None:
            rngs = spawn_streams(plan.seed)
        self.rngs = rngs
        lr = plan.schedule.initial_lr
        self.state = OptimState(lr, plan.momentum, plan.weight_decay)
        self.aux_state = OptimState(plan.aux_lr or lr, plan.momentum, plan.weight_decay)
        if plan.estimator.guess.family == "fixed_ntk":
            make_fixed_heads(net, rngs["fixed"])

    def set_epoch(self, epoch: int):
        lr = self.plan.schedule.lr(epoch)
        self.state.lr = lr
        base = self.plan.aux_lr or self.plan.schedule.initial_lr
        self.aux_state.lr = base * lr / self.plan.schedule.initial_lr

    def train_step(self, x, y) -> dict:
        """One minibatch: auxiliary/classifier exact steps plus every block's estimated update."""
        net, plan = self.net, self.plan
        y = np.asarray(y)
        L = net.n_blocks
        frag = {"local_loss": [math.nan] * L, "cos_activity": [math.nan] * L, "cos_weight": [math.nan] * L,
                "zero_guesses": [0] * L, "skipped": 0}

        head_grads, updates = {}, {}
        try:
            ctx = BatchContext(net, x, y, mode="train", update_stats=True)
            # heads: exact gradients on their own loss, seeded into the context
            # so the backbone pullbacks reuse the same head pass
            for j in range(L):
                if j < L - 1 and net.aux[j] is None:
                    continue
                loss, logits, h_cot, grads = _head_train(net.local_head(j), ctx.tape.block_output(j), y)
                ctx.seed_head(local_loss(net, j), loss, h_cot, grads, logits)
                frag["local_loss"][j] = loss
                head_grads[j] = grads
            frag["loss"] = frag["local_loss"][L - 1]
            frag["correct"] = int((logits.argmax(axis=1) == y).sum())
            for j in range(L):
                upd = estimate_block(net, j, x, y, plan.estimator, self.rngs["guess"], ctx, diagnostics=plan.diagnostics == "full")
                updates[j] = upd.grads
                frag["zero_guesses"][j] = upd.zero_guesses
                if plan.diagnostics != "off":
                    self._log_cosines(ctx, j, upd, frag)
            for j, g in updates.items():
                for v in g.values():
                    if not np.isfinite(v).all():
                        raise NonFiniteError(f"non-finite update for block {j}")
        except NonFiniteError as e:
            log.warning("step skipped: %s", e)
            frag["skipped"] = 1
            return frag

        for j, g in updates.items():
            sgd_step(net.blocks[j].parameters(), g, self.state, prefix=f"blocks.{j}.")
        sgd_step(net.head.parameters(), head_grads[L - 1], self.state, prefix="head.")
        if plan.aux_training != "frozen":
            for j, g in head_grads.items():
                if j < L - 1:
                    sgd_step(net.aux[j].parameters(), g, self.aux_state, prefix=f"aux.{j}.")
        return frag

    def _log_cosines(self, ctx, j, upd, frag):
        """Local guess vs global target in both spaces (the configured guess if block ``j`` has no auxiliary).

        ``cheap`` diagnostics skip the weight-space cosine unless both
        gradients were already computed for the update.
        """
        net = self.net
        gl = global_loss(net)
        if j == net.n_blocks - 1 or net.aux[j] is not None:
            ll = local_loss(net, j)
            guess_a, _ = normalize_rows(ctx.activity_grad(ll, j))
            frag["cos_activity"][j] = _safe_cosine(ctx.activity_grad(gl, j), guess_a)
            if self.plan.diagnostics == "full" or ctx.has_weight_grad(gl, j) and ctx.has_weight_grad(ll, j):
                frag["cos_weight"][j] = _safe_cosine(ctx.weight_grad(gl, j), ctx.weight_grad(ll, j))
        elif self.plan.estimator.space == "activity":
            frag["cos_activity"][j] = upd.cosine
        else:
            frag["cos_weight"][j] = upd.cosine


def spawn_streams(seed: int) -> dict:
    """Independent generators for data order, augmentation, guesses and fixed heads."""
    names = ("data", "augment", "guess", "fixed")
    return {k: np.random.default_rng(s) for k, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def evaluate(net: BlockNetwork, x, y, batch_size=256):
    """Global loss/accuracy and each block's local loss (eval mode)."""
    y = np.asarray(y)
    L = net.n_blocks
    n = len(y)
    if n == 0:
        return math.nan, math.nan, [math.nan] * L
    tot, correct = 0.0, 0
    local = np.zeros(L)
    for i in range(0, n, batch_size):
        h, yb = x[i:i + batch_size], y[i:i + batch_size]
        for j, b in enumerate(net.blocks):
            h = b.forward(h, "eval", update_stats=False)
            if j < L - 1 and net.aux[j] is not None:
                local[j] += cross_entropy(net.aux[j].forward(h, "eval", update_stats=False), yb) * len(yb)
        logits = net.head.forward(h, "eval", update_stats=False)
        loss = cross_entropy(logits, yb) * len(yb)
        tot += loss
        local[L - 1] += loss
        correct += int((logits.argmax(axis=1) == yb).sum())
    out_local = [float(v / n) if (j == L - 1 or net.aux[j] is not None) else math.nan for j, v in enumerate(local)]
    return tot / n, correct / n, out_local


def _nanmean(rows, L):
    a = np.array(rows, dtype=np.float64).reshape(-1, L)
    with np.errstate(all="ignore"):
        cnt = np.isfinite(a).sum(axis=0)
        s = np.where(np.isfinite(a), a, 0.0).sum(axis=0)
        m = np.where(cnt > 0, s / np.maximum(cnt, 1), np.nan)
    return [float(v) for v in m]


def train_run(net: BlockNetwork, plan: RunPlan, train, test, on_epoch=None):
    """Run ``plan.epochs`` epochs; yields one :class:`MetricsRecord` per epoch.

    ``train`` and ``test`` are :class:`fgrad.data.Dataset` objects (the
    training set carries its augmentation spec).
    """
    from .data import iterate_minibatches

    rngs = spawn_streams(plan.seed)
    trainer = Trainer(net, plan, rngs)
    L = net.n_blocks
    for epoch in range(plan.epochs):
        t0 = time.perf_counter()
        trainer.set_epoch(epoch)
        losses, local, cos_a, cos_w = [], [], [], []
        zeros = np.zeros(L, dtype=np.int64)
        correct = seen = skipped = 0
        for xb, yb in iterate_minibatches(train, plan.batch_size, rngs["data"], rngs["augment"]):
            frag = trainer.train_step(xb, yb)
            skipped += frag["skipped"]
            zeros += np.array(frag["zero_guesses"])
            local.append(frag["local_loss"])
            if frag["skipped"]:
                continue
            losses.append((frag["loss"], len(yb)))
            correct += frag["correct"]
            seen += len(yb)
            cos_a.append(frag["cos_activity"])
            cos_w.append(frag["cos_weight"])
        train_loss = sum(l * k for l, k in losses) / max(seen, 1) if seen else math.nan
        test_loss, test_acc, local_test = evaluate(net, test.normalized_images(), test.labels)
        rec = MetricsRecord(
            epoch=epoch + 1,
            lr=trainer.state.lr,
            train_loss=float(train_loss),
            train_acc=correct / seen if seen else math.nan,
            test_loss=float(test_loss),
            test_acc=float(test_acc),
            local_train_loss=_nanmean(local, L),
            local_test_loss=local_test,
            cos_activity=_nanmean(cos_a, L) if cos_a else [math.nan] * L,
            cos_weight=_nanmean(cos_w, L) if cos_w else [math.nan] * L,
            zero_guesses=[int(v) for v in zeros],
            skipped_steps=skipped,
        )
        log.info("epoch %d done in %.1fs", epoch + 1, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(rec)
        yield rec
