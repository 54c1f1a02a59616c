"""Block-decomposed backbones and auxiliary heads."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    AdaptiveAvgPool2d,
    BatchNorm,
    Conv2d,
    Flatten,
    Layer,
    Linear,
    ReLU,
    ShapeError,
)

AUX_KINDS = ("cnn", "mlp", "linear")
SPLITS = ("residual", "layerwise")


class Sequential:
    """Ordered layers evaluated one after the other."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    # -- parameters --------------------------------------------------------
    def named_layers(self):
        for i, layer in enumerate(self.layers):
            yield str(i), layer

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self.named_layers():
            for k, v in layer.params.items():
                out[f"{prefix}.{k}"] = v
        return out

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        for prefix, layer in self.named_layers():
            for k in layer.params:
                name = f"{prefix}.{k}"
                if name in values:
                    layer.params[k] = values[name]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self.named_layers():
            for k, v in layer.buffers.items():
                out[f"{prefix}.{k}"] = v
        return out

    def num_params(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def reinit(self, rng: np.random.Generator) -> None:
        for _, layer in self.named_layers():
            layer.reinit(rng)

    def astype(self, dtype):
        for _, layer in self.named_layers():
            layer.astype(dtype)
        return self

    # -- shapes ------------------------------------------------------------
    def output_shape(self, in_shape):
        s = tuple(in_shape)
        for layer in self.layers:
            s = layer.output_shape(s)
        return s

    def macs(self, in_shape) -> int:
        total, s = 0, tuple(in_shape)
        for layer in self.layers:
            total += layer.macs(s)
            s = layer.output_shape(s)
        return total

    # -- evaluation --------------------------------------------------------
    def forward(self, x, mode="train", update_stats=True, record=False):
        saved = [] if record else None
        for layer in self.layers:
            if record:
                saved.append(x)
            x = layer.forward(x, mode, update_stats)
        return (x, saved) if record else x

    def jvp(self, x, x_dot, tangents=None, mode="train"):
        tangents = tangents or {}
        for prefix, layer in self.named_layers():
            pt = {k: tangents[f"{prefix}.{k}"] for k in layer.params if f"{prefix}.{k}" in tangents}
            x, x_dot = layer.jvp(x, x_dot, pt, mode)
        return x, x_dot

    def vjp(self, saved, cot, mode="train"):
        """Pull ``cot`` back through the layers given their recorded inputs."""
        if saved is None or len(saved) != len(self.layers):
            raise RuntimeError("missing forward context: record the forward pass first")
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            cot, g = self.layers[i].vjp(saved[i], cot, mode)
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return cot, grads

    def __repr__(self):
        inner = ", ".join(repr(l) for l in self.layers)
        return f"{type(self).__name__}([{inner}])"


class Block(Sequential):
    """One trainable unit ``f_j``: body layers, optional residual skip, post layers.

    With ``has_skip`` the block computes ``post(body(x) + shortcut(x))`` where
    an empty shortcut is the identity.
    """

    def __init__(self, body, has_skip=False, shortcut=None, post=None):
        self.body = list(body)
        self.has_skip = has_skip
        self.shortcut = list(shortcut or [])
        self.post = list(post or [])
        if self.shortcut and not has_skip:
            raise ValueError("shortcut layers given for a block without skip")
        self.layers = self.body + self.shortcut + self.post

    def named_layers(self):
        for i, layer in enumerate(self.body):
            yield f"body.{i}", layer
        for i, layer in enumerate(self.shortcut):
            yield f"shortcut.{i}", layer
        for i, layer in enumerate(self.post):
            yield f"post.{i}", layer

    def _seq_shape(self, layers, s):
        for layer in layers:
            s = layer.output_shape(s)
        return s

    def output_shape(self, in_shape):
        s = self._seq_shape(self.body, tuple(in_shape))
        if self.has_skip:
            sk = self._seq_shape(self.shortcut, tuple(in_shape))
            if sk != s:
                raise ShapeError(f"residual shapes differ: body {s} vs shortcut {sk}")
        return self._seq_shape(self.post, s)

    def macs(self, in_shape):
        total, s = 0, tuple(in_shape)
        for layer in self.body:
            total += layer.macs(s)
            s = layer.output_shape(s)
        sk = tuple(in_shape)
        for layer in self.shortcut:
            total += layer.macs(sk)
            sk = layer.output_shape(sk)
        if self.has_skip:
            total += int(np.prod(s))
        for layer in self.post:
            total += layer.macs(s)
            s = layer.output_shape(s)
        return total

    @staticmethod
    def _run(layers, x, mode, update_stats, saved):
        for layer in layers:
            if saved is not None:
                saved.append(x)
            x = layer.forward(x, mode, update_stats)
        return x

    def forward(self, x, mode="train", update_stats=True, record=False):
        tape = {"body": [], "shortcut": [], "post": []} if record else None
        h = self._run(self.body, x, mode, update_stats, tape and tape["body"])
        if self.has_skip:
            s = self._run(self.shortcut, x, mode, update_stats, tape and tape["shortcut"])
            if s.shape != h.shape:
                raise ShapeError(f"residual shapes differ: {h.shape} vs {s.shape}")
            h = h + s
        y = self._run(self.post, h, mode, update_stats, tape and tape["post"])
        return (y, tape) if record else y

    def _jvp_seq(self, layers, prefix, x, x_dot, tangents, mode):
        for i, layer in enumerate(layers):
            pt = {k: tangents[f"{prefix}.{i}.{k}"] for k in layer.params if f"{prefix}.{i}.{k}" in tangents}
            x, x_dot = layer.jvp(x, x_dot, pt, mode)
        return x, x_dot

    def jvp(self, x, x_dot, tangents=None, mode="train"):
        tangents = tangents or {}
        h, h_dot = self._jvp_seq(self.body, "body", x, x_dot, tangents, mode)
        if self.has_skip:
            s, s_dot = self._jvp_seq(self.shortcut, "shortcut", x, x_dot, tangents, mode)
            h, h_dot = h + s, h_dot + s_dot
        return self._jvp_seq(self.post, "post", h, h_dot, tangents, mode)

    def _vjp_seq(self, layers, prefix, saved, cot, mode, grads):
        if len(saved) != len(layers):
            raise RuntimeError("missing forward context: record the forward pass first")
        for i in range(len(layers) - 1, -1, -1):
            cot, g = layers[i].vjp(saved[i], cot, mode)
            for k, v in g.items():
                grads[f"{prefix}.{i}.{k}"] = v
        return cot

    def vjp(self, tape, cot, mode="train"):
        if tape is None:
            raise RuntimeError("missing forward context: record the forward pass first")
        grads = {}
        h_cot = self._vjp_seq(self.post, "post", tape["post"], cot, mode, grads)
        x_cot = self._vjp_seq(self.body, "body", tape["body"], h_cot, mode, grads)
        if self.has_skip:
            x_cot = x_cot + self._vjp_seq(self.shortcut, "shortcut", tape["shortcut"], h_cot, mode, grads)
        return x_cot, grads


@dataclass
class BackboneSpec:
    channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    split: str = "residual"
    skip: bool = True
    input_shape: tuple = (3, 32, 32)
    class_count: int = 10
    seed: int = 0
    dtype: str = "float32"


PRESETS = {
    "tiny8": dict(channels=(16, 32, 64, 128), blocks_per_stage=(2, 2, 2, 2), split="residual", skip=True),
    "tiny16": dict(channels=(16, 32, 64, 128), blocks_per_stage=(2, 2, 2, 2), split="layerwise", skip=False),
    "micro4": dict(channels=(8, 16), blocks_per_stage=(2, 2), split="residual", skip=True),
}

# Auxiliary widths for the desk presets: the full-size CNN/MLP widths divided by
# the same 4x factor as the backbone channels.
AUX_DEFAULTS = {"cnn": dict(h_chan=8, n_depth=3), "mlp": dict(h_chan=256, n_depth=3), "linear": dict(h_chan=1, n_depth=0)}
# Single-conv blocks of the layerwise split are about half as expensive, so
# the heads are halved again to stay under a 10% FLOPS ratio.
AUX_WIDTH_LAYERWISE = {"cnn": 4, "mlp": 128}


@dataclass
class BlockNetwork:
    blocks: list
    head: Sequential
    class_count: int
    input_shape: tuple
    aux: list = field(default_factory=list)
    aux_config: dict | None = None

    def __post_init__(self):
        if not self.aux:
            self.aux = [None] * len(self.blocks)

    @property
    def n_blocks(self):
        return len(self.blocks)

    def block_input_shape(self, j):
        s = tuple(self.input_shape)
        for b in self.blocks[:j]:
            s = b.output_shape(s)
        return s

    def block_output_shape(self, j):
        return self.blocks[j].output_shape(self.block_input_shape(j))

    def local_head(self, j):
        """Head whose loss is block ``j``'s local loss; the classifier for the last block."""
        if j == self.n_blocks - 1:
            return self.head
        if self.aux[j] is None:
            raise ValueError(f"block {j} has no auxiliary head")
        return self.aux[j]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for j, b in enumerate(self.blocks):
            out.update({f"blocks.{j}.{k}": v for k, v in b.parameters().items()})
        out.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return out

    def aux_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for j, a in enumerate(self.aux):
            if a is not None:
                out.update({f"aux.{j}.{k}": v for k, v in a.parameters().items()})
        return out

    def backbone_param_count(self) -> int:
        return sum(b.num_params() for b in self.blocks)

    def forward(self, x, mode="eval", update_stats=False):
        for b in self.blocks:
            x = b.forward(x, mode, update_stats)
        return self.head.forward(x, mode, update_stats)

    def predict_logits(self, x, batch_size=256):
        outs = [self.forward(x[i:i + batch_size], "eval") for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.class_count), np.float32)

    def astype(self, dtype):
        for b in self.blocks:
            b.astype(dtype)
        self.head.astype(dtype)
        for a in self.aux:
            if a is not None:
                a.astype(dtype)
        return self

    def copy(self):
        return copy.deepcopy(self)


def _conv_bn_relu(cin, cout, stride, rng, dtype, relu=True):
    layers = [Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False, rng=rng, dtype=dtype), BatchNorm(cout, dtype=dtype)]
    if relu:
        layers.append(ReLU())
    return layers


def build_backbone(spec: BackboneSpec | dict | str, **overrides) -> BlockNetwork:
    """Build a ResNet-style block network.

    ``spec`` may be a :class:`BackboneSpec`, a dict of its fields or a preset
    name (``tiny8``, ``tiny16``, ``micro4``).
    """
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise ValueError(f"unknown preset {spec!r}; choose from {sorted(PRESETS)}")
        spec = BackboneSpec(**{**PRESETS[spec], **overrides})
    elif isinstance(spec, dict):
        spec = BackboneSpec(**{**spec, **overrides})
    elif overrides:
        spec = BackboneSpec(**{**spec.__dict__, **overrides})

    if spec.class_count < 2:
        raise ValueError("class_count must be at least 2 for cross-entropy")
    if len(spec.channels) != len(spec.blocks_per_stage) or not spec.channels:
        raise ValueError("channels and blocks_per_stage must be non-empty and the same length")
    if any(n < 1 for n in spec.blocks_per_stage) or any(c < 1 for c in spec.channels):
        raise ValueError("stage widths and depths must be positive")
    if spec.split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if spec.split == "layerwise" and spec.skip:
        raise ValueError("layerwise split has no skip connections; set skip=False")

    dtype = np.dtype(spec.dtype)
    rng = np.random.default_rng(spec.seed)
    in_ch = spec.input_shape[0]
    stem = _conv_bn_relu(in_ch, spec.channels[0], 1, rng, dtype)

    # (cin, cout, stride) per 3x3 conv pair of a basic block
    units = []
    cin = spec.channels[0]
    for s, (cout, n) in enumerate(zip(spec.channels, spec.blocks_per_stage)):
        for b in range(n):
            stride = 2 if (s > 0 and b == 0) else 1
            units.append((cin, cout, stride))
            cin = cout

    blocks = []
    if spec.split == "residual":
        for u, (ci, co, stride) in enumerate(units):
            body = _conv_bn_relu(ci, co, stride, rng, dtype) + _conv_bn_relu(co, co, 1, rng, dtype, relu=False)
            shortcut = []
            if spec.skip and (stride != 1 or ci != co):
                shortcut = [Conv2d(ci, co, 1, stride=stride, bias=False, rng=rng, dtype=dtype), BatchNorm(co, dtype=dtype)]
            if u == 0:
                # the residual wraps the basic block only; the stem runs in front
                blocks.append(_StemBlock(stem, body, shortcut, spec.skip))
            else:
                blocks.append(Block(body, has_skip=spec.skip, shortcut=shortcut, post=[ReLU()]))
    else:
        convs = []
        for ci, co, stride in units:
            convs.append((ci, co, stride))
            convs.append((co, co, 1))
        first = stem + _conv_bn_relu(*convs[0], rng, dtype)
        blocks.append(Block(first))
        for ci, co, stride in convs[1:]:
            blocks.append(Block(_conv_bn_relu(ci, co, stride, rng, dtype)))

    head = Sequential([AdaptiveAvgPool2d(1, 1), Flatten(), Linear(spec.channels[-1], spec.class_count, rng=rng, dtype=dtype)])
    net = BlockNetwork(blocks=blocks, head=head, class_count=spec.class_count, input_shape=tuple(spec.input_shape))
    net.spec = spec
    try:
        net.block_output_shape(net.n_blocks - 1)
    except ShapeError as e:
        raise ValueError(f"inconsistent channel/stride plan: {e}") from e
    return net


class _StemBlock(Block):
    """First residual block with the stem in front: ``post(body(stem(x)) + shortcut(stem(x)))``."""

    def __init__(self, stem, body, shortcut, has_skip=True):
        self.stem = list(stem)
        self.body = list(body)
        self.has_skip = has_skip
        self.shortcut = list(shortcut)
        self.post = [ReLU()]
        self.layers = self.stem + self.body + self.shortcut + self.post

    def named_layers(self):
        for i, layer in enumerate(self.stem):
            yield f"stem.{i}", layer
        yield from super().named_layers()

    def output_shape(self, in_shape):
        return super().output_shape(self._seq_shape(self.stem, tuple(in_shape)))

    def macs(self, in_shape):
        s, total = tuple(in_shape), 0
        for layer in self.stem:
            total += layer.macs(s)
            s = layer.output_shape(s)
        return total + super().macs(s)

    def forward(self, x, mode="train", update_stats=True, record=False):
        stem_saved = [] if record else None
        h = self._run(self.stem, x, mode, update_stats, stem_saved)
        out = super().forward(h, mode, update_stats, record)
        if record:
            y, tape = out
            tape["stem"] = stem_saved
            return y, tape
        return out

    def jvp(self, x, x_dot, tangents=None, mode="train"):
        tangents = tangents or {}
        h, h_dot = self._jvp_seq(self.stem, "stem", x, x_dot, tangents, mode)
        return super().jvp(h, h_dot, tangents, mode)

    def vjp(self, tape, cot, mode="train"):
        h_cot, grads = super().vjp(tape, cot, mode)
        x_cot = self._vjp_seq(self.stem, "stem", tape["stem"], h_cot, mode, grads)
        return x_cot, grads


# ---------------------------------------------------------------------------
# auxiliary heads


def make_aux_head(kind, in_shape, class_count, h_chan=None, n_depth=None, rng=None, dtype=np.float32) -> Sequential:
    if kind not in AUX_KINDS:
        raise ValueError(f"aux kind must be one of {AUX_KINDS}, got {kind!r}")
    defaults = AUX_DEFAULTS[kind]
    h_chan = defaults["h_chan"] if h_chan is None else h_chan
    n_depth = defaults["n_depth"] if n_depth is None else n_depth
    if kind != "linear" and (h_chan < 1 or n_depth < 0):
        raise ValueError("h_chan must be >= 1 and n_depth >= 0")
    C, H, W = in_shape
    if C * H * W == 0:
        raise ShapeError("auxiliary head on a zero-sized tensor")
    rng = rng if rng is not None else np.random.default_rng(0)
    layers: list[Layer] = []
    if kind == "cnn":
        layers.append(Conv2d(C, h_chan, 1, rng=rng, dtype=dtype))
        h, w = H, W
        for _ in range(n_depth):
            # clamp to stride 1 once the map would fall below the 2x2 pooling grid
            stride = 2 if (h + 1) // 2 >= 2 and (w + 1) // 2 >= 2 else 1
            layers += [Conv2d(h_chan, h_chan, 3, stride=stride, padding=1, rng=rng, dtype=dtype), ReLU()]
            h, w = (h + 1) // 2 if stride == 2 else h, (w + 1) // 2 if stride == 2 else w
        layers += [AdaptiveAvgPool2d(2, 2), Flatten(), Linear(4 * h_chan, class_count, rng=rng, dtype=dtype)]
    elif kind == "mlp":
        layers += [AdaptiveAvgPool2d(2, 2), Flatten()]
        d = 4 * C
        for _ in range(n_depth):
            layers += [Linear(d, h_chan, rng=rng, dtype=dtype), BatchNorm(h_chan, dtype=dtype), ReLU()]
            d = h_chan
        layers.append(Linear(d, class_count, rng=rng, dtype=dtype))
    else:
        layers += [BatchNorm(C, dtype=dtype), AdaptiveAvgPool2d(2, 2), Flatten(), Linear(4 * C, class_count, rng=rng, dtype=dtype)]
    head = Sequential(layers)
    head.kind = kind
    head.output_shape(in_shape)  # rejects pooling from below 2x2
    return head


def attach_auxiliaries(net: BlockNetwork, kind="cnn", h_chan=None, n_depth=None, seed=None) -> BlockNetwork:
    """Give every non-final block an auxiliary classifier head (in place; returns ``net``)."""
    if h_chan is not None and h_chan < 1:
        raise ValueError("h_chan must be >= 1")
    if n_depth is not None and n_depth < 1 and kind != "linear":
        raise ValueError("n_depth must be >= 1")
    dtype = net.head.layers[-1].params["weight"].dtype
    if h_chan is None and getattr(getattr(net, "spec", None), "split", None) == "layerwise":
        h_chan = AUX_WIDTH_LAYERWISE.get(kind)
    base_seed = getattr(getattr(net, "spec", None), "seed", 0) if seed is None else seed
    rng = np.random.default_rng([base_seed, 1])
    aux = []
    for j in range(net.n_blocks - 1):
        aux.append(make_aux_head(kind, net.block_output_shape(j), net.class_count, h_chan, n_depth, rng, dtype))
    aux.append(None)
    net.aux = aux
    net.aux_config = dict(kind=kind, h_chan=h_chan, n_depth=n_depth)
    return net


def fresh_aux(net: BlockNetwork, j: int, rng: np.random.Generator) -> Sequential:
    """A newly initialized copy of block ``j``'s auxiliary architecture."""
    if j == net.n_blocks - 1:
        template = net.head
    else:
        template = net.aux[j]
        if template is None:
            raise ValueError(f"block {j} has no auxiliary head")
    head = copy.deepcopy(template)
    head.reinit(rng)
    return head


def flops_ratio(aux: Sequential, block: Block, input_shape) -> float:
    """MAC count of ``aux`` on the block output over that of ``block`` on ``input_shape``."""
    block_macs = block.macs(input_shape)
    aux_macs = aux.macs(block.output_shape(input_shape))
    return aux_macs / block_macs
