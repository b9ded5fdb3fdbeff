"""Architecture specs for FasteNet, VanillaNet and LargeNet, plus the
forward/backward executor and the static analyses (parameters, FLOPs,
receptive field).
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from . import tensor_ops as T
from .tensor_ops import ShapeError

ROLE_ORDER = ("weight", "bias", "bn_gamma", "bn_beta", "bn_mean", "bn_var")
TRAINABLE_ROLES = ("weight", "bias", "bn_gamma", "bn_beta")
NET_NAMES = ("fastenet", "vanillanet", "largenet")


@dataclass(frozen=True)
class LayerSpec:
    index: int
    op: str  # "conv" or "tconv"
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0
    pool: bool = False
    activation: str = "leaky_relu"
    batchnorm: bool = True


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple
    skips: tuple = ()  # (source layer, destination layer): source output is appended to destination input
    divisor: int = 8
    output_stride: int = 8

    def layer(self, index):
        return self.layers[index - 1]

    def skip_sources(self, dest):
        return [src for src, dst in self.skips if dst == dest]

    def to_dict(self):
        return {
            "name": self.name,
            "divisor": self.divisor,
            "output_stride": self.output_stride,
            "skips": [list(s) for s in self.skips],
            "layers": [asdict(l) for l in self.layers],
        }

    def to_text(self):
        """Canonical JSON text; the model-file digest is computed over it."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text):
        d = json.loads(text)
        return cls(
            name=d["name"],
            layers=tuple(LayerSpec(**l) for l in d["layers"]),
            skips=tuple(tuple(s) for s in d["skips"]),
            divisor=d["divisor"],
            output_stride=d["output_stride"],
        )

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _conv(i, cin, cout, k=3, pool=False, act="leaky_relu", bn=True):
    return LayerSpec(i, "conv", cin, cout, k, 1, (k - 1) // 2, pool, act, bn)


def _tconv(i, cin, cout):
    return LayerSpec(i, "tconv", cin, cout, 4, 2, 1)


def build_fastenet():
    layers = (
        _conv(1, 1, 32, pool=True),
        _conv(2, 32, 32, pool=True),
        _conv(3, 32, 64, pool=True),
        _conv(4, 64, 64, pool=True),
        _conv(5, 64, 128, pool=True),
        _conv(6, 128, 128, pool=True),
        _conv(7, 128, 64, k=1),
        _tconv(8, 64, 64),
        _tconv(9, 64, 64),
        _tconv(10, 64, 64),
        _conv(11, 128, 1, k=1, act="sigmoid", bn=False),
    )
    return _validated(NetworkSpec("fastenet", layers, skips=((3, 11),), divisor=64, output_stride=8))


def build_vanillanet():
    # The final 1x1 layer is listed with a 1x1 pad; pad 0 is what keeps the 200x64 output.
    layers = (
        _conv(1, 1, 32, pool=True),
        _conv(2, 32, 64),
        _conv(3, 64, 32),
        _conv(4, 32, 64, pool=True),
        _conv(5, 64, 128),
        _conv(6, 128, 64),
        _conv(7, 64, 128, pool=True),
        _conv(8, 128, 64),
        _conv(9, 64, 128),
        _conv(10, 128, 64),
        _conv(11, 64, 1, k=1, act="sigmoid", bn=False),
    )
    return _validated(NetworkSpec("vanillanet", layers, divisor=8, output_stride=8))


def build_largenet():
    layers = (
        _conv(1, 1, 32, pool=True),
        _conv(2, 32, 64, pool=True),
        _conv(3, 64, 64, pool=True),
        _conv(4, 64, 64, pool=True),
        _conv(5, 64, 64, pool=True),
        _conv(6, 64, 64, pool=True),
        _conv(7, 64, 128, pool=True),
        _conv(8, 128, 64, k=1),
        _tconv(9, 64, 64),
        _tconv(10, 64, 64),
        _tconv(11, 64, 64),
        _tconv(12, 64, 64),
        _conv(13, 128, 1, k=1, act="sigmoid", bn=False),
    )
    return _validated(NetworkSpec("largenet", layers, skips=((3, 13),), divisor=128, output_stride=8))


BUILDERS = {"fastenet": build_fastenet, "vanillanet": build_vanillanet, "largenet": build_largenet}


def build(name):
    try:
        return BUILDERS[name]()
    except KeyError:
        raise ValueError(f"unknown network {name!r}; choose from {', '.join(NET_NAMES)}") from None


def shipped_spec_text(name):
    """Text of the canonical architecture file shipped with the package."""
    return resources.files("fastenet.archs").joinpath(f"{name}.json").read_text()


# ---------------------------------------------------------------------------
# Shape propagation
# ---------------------------------------------------------------------------


def _layer_out_hw(layer, h, w):
    if layer.op == "conv":
        h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
    else:
        h = (h - 1) * layer.stride - 2 * layer.pad + layer.kernel
        w = (w - 1) * layer.stride - 2 * layer.pad + layer.kernel
    if layer.pool:
        if h % 2 or w % 2:
            raise ShapeError(f"layer {layer.index}: cannot 2x2-pool an odd {h}x{w} map")
        h, w = h // 2, w // 2
    return h, w


def layer_shapes(spec, h, w):
    """Per-layer ``(in_ch, in_h, in_w, out_ch, out_h, out_w)``; raises on any mismatch."""
    shapes = []
    outs = {0: (1, h, w)}
    ch = 1
    for layer in spec.layers:
        in_ch = ch
        for src in spec.skip_sources(layer.index):
            sc, sh, sw = outs[src]
            if (sh, sw) != (h, w):
                raise ShapeError(
                    f"layer {layer.index}: skip from layer {src} is {sh}x{sw} but the main path is {h}x{w}"
                )
            in_ch += sc
        if in_ch != layer.in_ch:
            raise ShapeError(f"layer {layer.index}: expects {layer.in_ch} input channels, receives {in_ch}")
        oh, ow = _layer_out_hw(layer, h, w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"layer {layer.index}: empty output for {h}x{w} input")
        shapes.append((in_ch, h, w, layer.out_ch, oh, ow))
        h, w, ch = oh, ow, layer.out_ch
        outs[layer.index] = (ch, h, w)
    return shapes


def check_input(spec, h, w):
    if h % spec.divisor or w % spec.divisor:
        raise ShapeError(
            f"{spec.name}: input {h}x{w} is not divisible by {spec.divisor} in both dimensions"
        )
    return layer_shapes(spec, h, w)


def _validated(spec):
    layer_shapes(spec, spec.divisor, spec.divisor)
    last = spec.layers[-1]
    assert last.out_ch == 1 and last.activation == "sigmoid"
    return spec


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


@dataclass
class WeightStore:
    """Named tensors keyed by ``(layer index, role)``."""

    tensors: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.tensors[key]

    def __setitem__(self, key, value):
        self.tensors[key] = value

    def keys(self):
        return sorted(self.tensors, key=lambda k: (k[0], ROLE_ORDER.index(k[1])))

    def trainable_keys(self):
        return [k for k in self.keys() if k[1] in TRAINABLE_ROLES]

    def params(self):
        return [self.tensors[k] for k in self.trainable_keys()]

    def copy(self):
        return WeightStore({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        return WeightStore({k: v.astype(dtype) for k, v in self.tensors.items()})

    def equal(self, other):
        if set(self.tensors) != set(other.tensors):
            return False
        return all(
            self.tensors[k].dtype == other.tensors[k].dtype
            and self.tensors[k].shape == other.tensors[k].shape
            and self.tensors[k].tobytes() == other.tensors[k].tobytes()
            for k in self.tensors
        )


def expected_shapes(spec):
    out = {}
    for l in spec.layers:
        if l.op == "conv":
            out[(l.index, "weight")] = (l.out_ch, l.in_ch, l.kernel, l.kernel)
        else:
            out[(l.index, "weight")] = (l.in_ch, l.out_ch, l.kernel, l.kernel)
        out[(l.index, "bias")] = (l.out_ch,)
        if l.batchnorm:
            for role in ("bn_gamma", "bn_beta", "bn_mean", "bn_var"):
                out[(l.index, role)] = (l.out_ch,)
    return out


def check_weights(spec, weights):
    exp = expected_shapes(spec)
    if set(exp) != set(weights.tensors):
        missing = sorted(set(exp) - set(weights.tensors))
        extra = sorted(set(weights.tensors) - set(exp))
        raise ShapeError(f"{spec.name}: weight store mismatch (missing {missing}, unexpected {extra})")
    for key, shape in exp.items():
        if weights[key].shape != shape:
            raise ShapeError(f"{spec.name}: {key} has shape {weights[key].shape}, expected {shape}")


OUTPUT_BIAS_INIT = -2.0


def init_weights(spec, seed=0, dtype=np.float32):
    """Kaiming-uniform (fan-in, leaky-ReLU gain) weights, zero biases, identity BN.

    The sigmoid layer's bias starts at ``OUTPUT_BIAS_INIT`` so an untrained
    net predicts a low foreground rate instead of a uniform 0.5.
    """
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0 / (1.0 + T.LEAKY_SLOPE ** 2))
    ws = WeightStore()
    for l in spec.layers:
        if l.op == "conv":
            fan_in = l.in_ch * l.kernel * l.kernel
            shape = (l.out_ch, l.in_ch, l.kernel, l.kernel)
        else:
            # Each output cell of a stride-s transposed conv receives in_ch*(k/s)^2 terms.
            fan_in = l.in_ch * (l.kernel // l.stride) ** 2
            shape = (l.in_ch, l.out_ch, l.kernel, l.kernel)
        bound = gain * np.sqrt(3.0 / fan_in)
        ws[(l.index, "weight")] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        bias = np.zeros(l.out_ch, dtype=dtype)
        if l.activation == "sigmoid":
            bias[:] = OUTPUT_BIAS_INIT
        ws[(l.index, "bias")] = bias
        if l.batchnorm:
            ws[(l.index, "bn_gamma")] = np.ones(l.out_ch, dtype=dtype)
            ws[(l.index, "bn_beta")] = np.zeros(l.out_ch, dtype=dtype)
            ws[(l.index, "bn_mean")] = np.zeros(l.out_ch, dtype=dtype)
            ws[(l.index, "bn_var")] = np.ones(l.out_ch, dtype=dtype)
    return ws


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _concat(tensors):
    if len(tensors) == 1:
        return tensors[0]
    return T.as_nchw(np.concatenate([T.channels_last(t) for t in tensors], axis=-1))


def forward(spec, weights, x, mode="infer"):
    """Run the network.

    ``x`` is (batch, 1, H, W).  In ``"infer"`` mode returns the saliency
    tensor; in ``"train"`` mode returns ``(saliency, tape)`` where ``tape``
    feeds :func:`backward`.  Train mode updates BN running statistics.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"{spec.name}: expected a (batch, 1, H, W) input, got {x.shape}")
    check_input(spec, x.shape[2], x.shape[3])
    train = mode == "train"
    keep = {src for src, _ in spec.skips}
    saved = {}
    tape = []
    h = x
    for l in spec.layers:
        sources = spec.skip_sources(l.index)
        parts = [h] + [saved[s] for s in sources]
        h = _concat(parts)
        wt, b = weights[(l.index, "weight")], weights[(l.index, "bias")]
        if l.op == "conv":
            z, conv_cache = T.conv2d_forward(h, wt, b, l.stride, l.pad)
        else:
            z, conv_cache = T.transposed_conv2d_forward(h, wt, b, l.stride, l.pad)
        bn_cache = None
        if l.batchnorm and l.activation == "leaky_relu":
            a, bn_cache = T.batchnorm_leaky_forward(
                z, weights[(l.index, "bn_gamma")], weights[(l.index, "bn_beta")],
                weights[(l.index, "bn_mean")], weights[(l.index, "bn_var")], mode=mode,
            )
        else:
            if l.batchnorm:
                z, bn_cache = T.batchnorm_forward(
                    z, weights[(l.index, "bn_gamma")], weights[(l.index, "bn_beta")],
                    weights[(l.index, "bn_mean")], weights[(l.index, "bn_var")], mode=mode,
                )
            a = T.sigmoid(z) if l.activation == "sigmoid" else T.leaky_relu(z)
        arg = None
        if l.pool:
            a, arg = T.maxpool2(a)
        if train:
            tape.append((l, [p.shape[1] for p in parts], conv_cache, bn_cache, a if l.activation == "sigmoid" else z, arg))
        h = a
        if l.index in keep:
            saved[l.index] = h
    if train:
        return h, tape
    return h


def backward(spec, weights, tape, grad_out):
    """Back-propagate ``grad_out`` (d loss / d saliency) through a train-mode tape.

    Returns a dict ``{(layer, role): gradient}`` over the trainable roles.
    """
    grads = {}
    pending = {}
    g = grad_out
    for l, part_channels, conv_cache, bn_cache, act_in, arg in reversed(tape):
        if l.index in pending:
            g = g + pending.pop(l.index)
        if arg is not None:
            g = T.maxpool2_backward(g, arg)
        if l.batchnorm and l.activation == "leaky_relu":
            g, grads[(l.index, "bn_gamma")], grads[(l.index, "bn_beta")] = T.batchnorm_leaky_backward(g, bn_cache)
        else:
            if l.activation == "sigmoid":
                g = T.sigmoid_backward(g, act_in)
            else:
                g = T.leaky_relu_backward(g, act_in)
            if bn_cache is not None:
                g, grads[(l.index, "bn_gamma")], grads[(l.index, "bn_beta")] = T.batchnorm_backward(g, bn_cache)
        if l.op == "conv":
            g, gw, gb = T.conv2d_backward(g, conv_cache)
        else:
            g, gw, gb = T.transposed_conv2d_backward(g, conv_cache)
        grads[(l.index, "weight")] = gw
        grads[(l.index, "bias")] = gb
        if len(part_channels) > 1:
            gl = T.channels_last(g)
            offs = np.cumsum(part_channels)[:-1]
            pieces = np.split(gl, offs, axis=-1)
            g = T.as_nchw(np.ascontiguousarray(pieces[0]))
            for src, piece in zip(spec.skip_sources(l.index), pieces[1:]):
                piece = T.as_nchw(np.ascontiguousarray(piece))
                pending[src] = pending[src] + piece if src in pending else piece
    return grads


# ---------------------------------------------------------------------------
# Static analysis
# ---------------------------------------------------------------------------


def param_count(spec):
    """Weights + biases + BN affine parameters (running statistics excluded)."""
    total = 0
    for key, shape in expected_shapes(spec).items():
        if key[1] in TRAINABLE_ROLES:
            total += int(np.prod(shape))
    return total


def layer_macs(spec, h, w):
    """Multiply-accumulates per layer for one (h, w) input.

    Convolutions are counted at their own (pre-pool) output resolution,
    transposed convolutions as ``in_cells * in_ch * out_ch * k * k``.
    """
    macs = []
    for l, (cin, ih, iw, cout, oh, ow) in zip(spec.layers, layer_shapes(spec, h, w)):
        if l.op == "conv":
            ch = (ih + 2 * l.pad - l.kernel) // l.stride + 1
            cw = (iw + 2 * l.pad - l.kernel) // l.stride + 1
            macs.append(ch * cw * cin * cout * l.kernel * l.kernel)
        else:
            macs.append(ih * iw * cin * cout * l.kernel * l.kernel)
    return macs


def flops_count(spec, h, w):
    """Total MACs (1 MAC counted as 1 FLOP) for an ``h x w`` input."""
    check_input(spec, h, w)
    return int(sum(layer_macs(spec, h, w)))


def receptive_field(spec):
    """Theoretical receptive field ``[(layer index, rf, jump), ...]`` in input pixels.

    Convolutions apply ``rf += (k - 1) * jump; jump *= stride``, each 2x2
    pool another ``rf += jump; jump *= 2``.  A stride-s transposed conv sees
    ``k / s`` input cells per output cell: ``rf += (k / s - 1) * jump;
    jump /= s``.  Concatenated inputs take the larger field of the branches.
    """
    rf_of = {0: (1.0, 1.0)}
    rows = []
    prev = 0
    for l in spec.layers:
        rf, jump = rf_of[prev]
        for src in spec.skip_sources(l.index):
            srf, sjump = rf_of[src]
            if srf > rf:
                rf, jump = srf, sjump
        if l.op == "conv":
            rf += (l.kernel - 1) * jump
            jump *= l.stride
        else:
            rf += (l.kernel / l.stride - 1) * jump
            jump /= l.stride
        if l.pool:
            rf += jump
            jump *= 2
        rf_of[l.index] = (rf, jump)
        rows.append((l.index, rf, jump))
        prev = l.index
    return rows
