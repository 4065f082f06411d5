"""CsiNet and BCsiNet encoder/decoder construction."""

import copy
from dataclasses import dataclass, asdict
from fractions import Fraction

import numpy as np

from .nn import (
    BatchNorm,
    BinaryDense,
    Conv3x3,
    Dense,
    Flatten,
    Graph,
    LeakyReLU,
    Reshape,
    ResidualAdd,
    ShapeError,
    Sigmoid,
)

ETAS = (Fraction(1, 4), Fraction(1, 8), Fraction(1, 16), Fraction(1, 32))
FAMILIES = ("CsiNet", "BCsiNet")
HEADS = ("A", "B", "C")


def _as_eta(eta):
    value = Fraction(eta).limit_denominator(1024)
    for allowed in ETAS:
        if value == allowed:
            return allowed
    raise ValueError(f"compression ratio must be one of 1/4, 1/8, 1/16, 1/32, got {eta}")


@dataclass(frozen=True)
class ModelSpec:
    family: str = "BCsiNet"
    head: str = "A"
    refinenets: int = 2
    eta: float = 0.25
    na: int = 32
    nt: int = 32

    def __post_init__(self):
        family = {f.lower(): f for f in FAMILIES}.get(str(self.family).lower())
        if family is None:
            raise ValueError(f"family must be CsiNet or BCsiNet, got {self.family!r}")
        head = str(self.head).upper()
        if head not in HEADS:
            raise ValueError(f"head must be A, B or C, got {self.head!r}")
        if family == "CsiNet" and head != "A":
            raise ValueError("CsiNet uses encoder head A only")
        if int(self.refinenets) not in (2, 3):
            raise ValueError(f"refinenets must be 2 or 3, got {self.refinenets}")
        if self.na < 1 or self.nt < 1:
            raise ValueError("na and nt must be positive")
        eta = _as_eta(self.eta)
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "head", head)
        object.__setattr__(self, "refinenets", int(self.refinenets))
        object.__setattr__(self, "eta", float(eta))
        if self.codeword_length < 1:
            raise ValueError("codeword length must be positive")

    @property
    def binary(self):
        return self.family == "BCsiNet"

    @property
    def input_size(self):
        return 2 * self.na * self.nt

    @property
    def codeword_length(self):
        return int(round(self.input_size * self.eta))

    @property
    def eta_denominator(self):
        return _as_eta(self.eta).denominator

    @property
    def name(self):
        return f"{self.family}-{self.head}{self.refinenets}"

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _conv_bn(layers, prefix, c_in, c_out, rng):
    layers.append(Conv3x3(c_in, c_out, rng=rng, name=f"{prefix}.conv"))
    layers.append(BatchNorm(c_out, name=f"{prefix}.bn"))


def _head_layers(head, rng):
    layers = []
    _conv_bn(layers, "head1", 2, 2, rng)
    if head == "A":
        layers.append(LeakyReLU(name="head1.act"))
        return layers
    layers.append(LeakyReLU(name="head1.act"))
    _conv_bn(layers, "head2", 2, 2, rng)
    if head == "C":
        # identity skip from the head input, added before the last activation
        layers.append(ResidualAdd(0, name="head.skip"))
    layers.append(LeakyReLU(name="head2.act"))
    return layers


def _refinenet_layers(start, prefix, rng):
    """RefineNet appended after activation index ``start``."""
    layers = []
    _conv_bn(layers, f"{prefix}.1", 2, 8, rng)
    layers.append(LeakyReLU(name=f"{prefix}.1.act"))
    _conv_bn(layers, f"{prefix}.2", 8, 16, rng)
    layers.append(LeakyReLU(name=f"{prefix}.2.act"))
    _conv_bn(layers, f"{prefix}.3", 16, 2, rng)
    layers.append(ResidualAdd(start, name=f"{prefix}.skip"))
    layers.append(LeakyReLU(name=f"{prefix}.act"))
    return layers


def build_encoder(spec, rng):
    shape = (2, spec.na, spec.nt)
    layers = _head_layers(spec.head, rng)
    layers.append(Flatten(name="flatten"))
    fc_cls = BinaryDense if spec.binary else Dense
    layers.append(fc_cls(spec.input_size, spec.codeword_length, rng=rng, name="fc"))
    return Graph(layers, shape, name="encoder")


def build_decoder(spec, rng):
    layers = [
        Dense(spec.codeword_length, spec.input_size, rng=rng, name="fc"),
        Reshape((2, spec.na, spec.nt), name="reshape"),
    ]
    for k in range(spec.refinenets):
        layers.extend(_refinenet_layers(len(layers), f"refine{k + 1}", rng))
    _conv_bn(layers, "out", 2, 2, rng)
    # zero scale: the output starts flat at sigmoid(beta) and grows its spread only as
    # training asks for it; unit scale forces unit batch variance into the sigmoid,
    # which saturates on tightly concentrated targets
    layers[-1].params["gamma"][:] = 0
    layers.append(Sigmoid(name="out.act"))
    return Graph(layers, (spec.codeword_length,), name="decoder")


class Network:
    """Encoder/decoder pair for one model spec."""

    def __init__(self, spec, encoder, decoder):
        self.spec = spec
        self.encoder = encoder
        self.decoder = decoder

    # inference -------------------------------------------------------------

    def encode(self, h):
        return encode(self, h)

    def decode(self, v):
        return decode(self, v)

    def reconstruct(self, h):
        return self.decode(self.encode(h))

    # training --------------------------------------------------------------

    def forward(self, h, train=False):
        return self.decoder.forward(self.encoder.forward(h, train=train), train=train)

    def backward(self, dy):
        return self.encoder.backward(self.decoder.backward(dy))

    def graphs(self):
        return (self.encoder, self.decoder)

    def parameters(self):
        for g in self.graphs():
            yield from g.parameters()

    def zero_grad(self):
        for g in self.graphs():
            g.zero_grad()

    def binary_layer(self):
        for layer in self.encoder.layers:
            if isinstance(layer, BinaryDense):
                return layer
        return None

    def astype(self, dtype):
        for g in self.graphs():
            g.astype(dtype)
        return self

    def copy(self):
        return copy.deepcopy(self)

    # state -----------------------------------------------------------------

    def state_dict(self):
        """Flat name -> array copy of all parameters and BatchNorm buffers."""
        state = {}
        for g in self.graphs():
            for layer in g.layers:
                for store in (layer.params, layer.buffers):
                    for k, v in store.items():
                        state[f"{g.name}.{layer.name}.{k}"] = v.copy()
        return state

    def load_state_dict(self, state):
        for g in self.graphs():
            for layer in g.layers:
                for store in (layer.params, layer.buffers):
                    for k in store:
                        key = f"{g.name}.{layer.name}.{k}"
                        if key not in state:
                            raise KeyError(f"missing entry {key!r} in state")
                        value = np.asarray(state[key])
                        if value.shape != store[k].shape:
                            raise ShapeError(f"{key}: shape {value.shape} != {store[k].shape}")
                        store[k] = value.astype(store[k].dtype).copy()

    def __repr__(self):
        return f"Network({self.spec.name}, eta=1/{self.spec.eta_denominator})"


def build(spec, seed=0):
    """Instantiate a network with Xavier-uniform weights drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    return Network(spec, build_encoder(spec, rng), build_decoder(spec, rng))


def encode(net, h):
    h = np.asarray(h)
    expected = (2, net.spec.na, net.spec.nt)
    if h.ndim != 4 or h.shape[1:] != expected:
        raise ShapeError(f"encode: expected batch of shape (N, {expected}), got {h.shape}")
    return net.encoder.forward(h, train=False)


def decode(net, v):
    v = np.asarray(v)
    m = net.spec.codeword_length
    if v.ndim != 2 or v.shape[1] != m:
        raise ShapeError(f"decode: expected codewords of shape (N, {m}), got {v.shape}")
    return net.decoder.forward(v, train=False)
