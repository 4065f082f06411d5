"""
Static FLOPs / multiplication / parameter / memory accounting.

Counting conventions
--------------------
* one FLOP is one multiply-then-add; a 3x3 conv costs H*W*C_out*9*C_in and a
  dense layer m*n;
* BatchNorm and activations cost nothing (BN folds into the preceding conv);
* trainable parameters: weights + biases, BatchNorm contributes 2 per channel
  (running statistics are not trainable);
* a binary weight counts as 1/32 of a float parameter; a binary dense layer
  performs no weight multiplications, only the m scale multiplications;
* bytes = 4 per float parameter + one bit per binary weight + 4 for the scale.

Reports can be produced from an instantiated :class:`~bcsinet.nn.Graph` or
from a static descriptor derived from a :class:`~bcsinet.models.ModelSpec`;
both paths must agree.
"""

import csv
import io
import math
from dataclasses import dataclass, field

from . import nn
from .models import ETAS, ModelSpec


@dataclass(frozen=True)
class LayerShape:
    kind: str
    name: str
    in_shape: tuple
    out_shape: tuple
    binary: bool = False


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    flops: int
    mults: int
    params: float
    bytes: int
    fc: bool = False


@dataclass
class ComplexityReport:
    scope: str
    rows: list = field(default_factory=list)

    @property
    def flops(self):
        return sum(r.flops for r in self.rows)

    @property
    def mults(self):
        return sum(r.mults for r in self.rows)

    @property
    def params(self):
        return sum(r.params for r in self.rows)

    @property
    def bytes(self):
        return sum(r.bytes for r in self.rows)

    @property
    def fc_flops_share(self):
        return sum(r.flops for r in self.rows if r.fc) / self.flops

    @property
    def fc_params_share(self):
        return sum(r.params for r in self.rows if r.fc) / self.params

    def kinds(self):
        return [r.kind for r in self.rows]


# ---------------------------------------------------------------------------
# rounding
# ---------------------------------------------------------------------------

def _half_up(x, ndigits=0):
    q = 10 ** ndigits
    return math.floor(x * q + 0.5) / q


def to_k(count):
    return int(_half_up(count / 1e3))


def to_m(count):
    return _half_up(count / 1e6, 2)


def to_m_floor(count):
    return math.floor(count / 1e4) / 100


def fmt_k(count):
    return f"{to_k(count)}K"


def fmt_m(count):
    return f"{to_m(count):.2f}M"


# ---------------------------------------------------------------------------
# layer shapes
# ---------------------------------------------------------------------------

def shapes_from_graph(graph):
    out = []
    for i, layer in enumerate(graph.layers):
        out.append(
            LayerShape(
                kind=layer.kind,
                name=layer.name,
                in_shape=graph.shapes[i],
                out_shape=graph.shapes[i + 1],
                binary=isinstance(layer, nn.BinaryDense),
            )
        )
    return out


def _conv(name, c_in, c_out, h, w):
    return LayerShape("Conv3x3", name, (c_in, h, w), (c_out, h, w))


def _bn(name, c, h, w):
    return LayerShape("BatchNorm", name, (c, h, w), (c, h, w))


def _same(kind, name, shape):
    return LayerShape(kind, name, shape, shape)


def describe(spec):
    """Static (encoder, decoder) layer-shape descriptors for a model spec.

    Mirrors :func:`bcsinet.models.build` without instantiating any weights.
    """
    na, nt, m, size = spec.na, spec.nt, spec.codeword_length, spec.input_size
    img = (2, na, nt)
    enc = [_conv("head1.conv", 2, 2, na, nt), _bn("head1.bn", 2, na, nt),
           _same("LeakyReLU", "head1.act", img)]
    if spec.head in ("B", "C"):
        enc += [_conv("head2.conv", 2, 2, na, nt), _bn("head2.bn", 2, na, nt)]
        if spec.head == "C":
            enc.append(_same("ResidualAdd", "head.skip", img))
        enc.append(_same("LeakyReLU", "head2.act", img))
    enc.append(LayerShape("Flatten", "flatten", img, (size,)))
    enc.append(LayerShape("BinaryDense" if spec.binary else "Dense", "fc", (size,), (m,),
                          binary=spec.binary))

    dec = [LayerShape("Dense", "fc", (m,), (size,)), LayerShape("Reshape", "reshape", (size,), img)]
    for k in range(1, spec.refinenets + 1):
        p = f"refine{k}"
        dec += [
            _conv(f"{p}.1.conv", 2, 8, na, nt), _bn(f"{p}.1.bn", 8, na, nt),
            _same("LeakyReLU", f"{p}.1.act", (8, na, nt)),
            _conv(f"{p}.2.conv", 8, 16, na, nt), _bn(f"{p}.2.bn", 16, na, nt),
            _same("LeakyReLU", f"{p}.2.act", (16, na, nt)),
            _conv(f"{p}.3.conv", 16, 2, na, nt), _bn(f"{p}.3.bn", 2, na, nt),
            _same("ResidualAdd", f"{p}.skip", img), _same("LeakyReLU", f"{p}.act", img),
        ]
    dec += [_conv("out.conv", 2, 2, na, nt), _bn("out.bn", 2, na, nt), _same("Sigmoid", "out.act", img)]
    return enc, dec


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------

def layer_cost(shape):
    kind = shape.kind
    if kind == "Conv3x3":
        c_in, h, w = shape.in_shape
        c_out = shape.out_shape[0]
        flops = h * w * c_out * 9 * c_in
        params = c_out * c_in * 9 + c_out
        return LayerCost(shape.name, kind, flops, flops, params, 4 * params)
    if kind == "BatchNorm":
        c = shape.in_shape[0]
        return LayerCost(shape.name, kind, 0, 0, 2 * c, 8 * c)
    if kind in ("Dense", "BinaryDense"):
        (n,) = shape.in_shape
        (m,) = shape.out_shape
        if shape.binary or kind == "BinaryDense":
            # additions stay; only the m scale multiplications remain
            params = m * n / 32 + m
            nbytes = math.ceil(m * n / 8) + 4 + 4 * m
            return LayerCost(shape.name, "BinaryDense", m * n, m, params, nbytes, fc=True)
        params = m * n + m
        return LayerCost(shape.name, kind, m * n, m * n, params, 4 * params, fc=True)
    return LayerCost(shape.name, kind, 0, 0, 0, 0)


def count(target, scope=None):
    """Count a Graph, a list of LayerShape, or an external descriptor."""
    if isinstance(target, nn.Graph):
        shapes = shapes_from_graph(target)
        scope = scope or target.name
    else:
        shapes = list(target)
        scope = scope or "graph"
    for s in shapes:
        if s.in_shape is None or s.out_shape is None:
            raise ValueError(f"{s.name}: unresolved shape")
    return ComplexityReport(scope, [layer_cost(s) for s in shapes])


def count_spec(spec):
    """(encoder report, decoder report) for a model spec via its static descriptor."""
    enc, dec = describe(spec)
    return count(enc, "encoder"), count(dec, "decoder")


def memory_multiple(baseline, binary):
    if binary.bytes == 0:
        raise ZeroDivisionError("binary report has zero bytes")
    return baseline.bytes / binary.bytes


def encoder_memory_multiple(head, eta, na=32, nt=32):
    base, _ = count_spec(ModelSpec("CsiNet", "A", 2, eta, na, nt))
    binr, _ = count_spec(ModelSpec("BCsiNet", head, 2, eta, na, nt))
    return memory_multiple(base, binr)


# ---------------------------------------------------------------------------
# comparison networks: published figures, never executed
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExternalDescriptor:
    name: str
    enc_flops: float
    enc_params: float
    dec_flops: float
    dec_params: float
    fc_flops_pct: float = None
    fc_params_pct: float = None
    source: str = "descriptor, not executed"


EXTERNAL_NETWORKS = (
    ExternalDescriptor("CRNet", 1.20e6, 1.05e6, 3.92e6, 1.05e6, 87.07, 99.984),
    ExternalDescriptor("CsiNetPlus", 1.45e6, 1.05e6, 23.12e6, 1.07e6, 72.32, 99.962),
    ExternalDescriptor("ConvCsiNet", 60.16e6, 2.14e6, 166.07e6, 2.07e6),
    ExternalDescriptor("DeepCMC", 173.54e6, 3.32e6, 278.40e6, 9.87e6),
)


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

TABLE_MODES = ("tab1", "tab2", "tab4", "fig4")


def _tab1():
    rows = []
    for spec in (ModelSpec("CsiNet", "A", 2, 0.25), ModelSpec("BCsiNet", "A", 2, 0.25),
                 ModelSpec("BCsiNet", "B", 3, 0.25)):
        enc, dec = count_spec(spec)
        rows.append({
            "method": spec.name if spec.binary else "CsiNet",
            "enc_flops": fmt_m(enc.flops), "enc_params": fmt_m(enc.params),
            "dec_flops": fmt_m(dec.flops), "dec_params": fmt_m(dec.params),
            "enc_flops_exact": enc.flops, "enc_params_exact": enc.params,
            "dec_flops_exact": dec.flops, "dec_params_exact": dec.params,
            "dec_flops_floor": f"{to_m_floor(dec.flops):.2f}M",
            "source": "counted",
        })
    for ext in EXTERNAL_NETWORKS:
        rows.append({
            "method": ext.name,
            "enc_flops": fmt_m(ext.enc_flops), "enc_params": fmt_m(ext.enc_params),
            "dec_flops": fmt_m(ext.dec_flops), "dec_params": fmt_m(ext.dec_params),
            "enc_flops_exact": "", "enc_params_exact": "",
            "dec_flops_exact": "", "dec_params_exact": "", "dec_flops_floor": "",
            "source": ext.source,
        })
    return rows


def _tab2():
    enc, _ = count_spec(ModelSpec("CsiNet", "A", 2, 0.25))
    fc_f = 100 * enc.fc_flops_share
    fc_p = 100 * enc.fc_params_share
    rows = [{
        "method": "CsiNet",
        "fc_flops": f"{fc_f:.2f}%", "other_flops": f"{100 - fc_f:.2f}%",
        "fc_params": f"{fc_p:.3f}%", "other_params": f"{100 - fc_p:.3f}%",
        "source": "counted",
    }]
    for ext in EXTERNAL_NETWORKS:
        if ext.fc_flops_pct is None:
            continue
        rows.append({
            "method": ext.name,
            "fc_flops": f"{ext.fc_flops_pct:.2f}%", "other_flops": f"{100 - ext.fc_flops_pct:.2f}%",
            "fc_params": f"{ext.fc_params_pct:.3f}%", "other_params": f"{100 - ext.fc_params_pct:.3f}%",
            "source": ext.source,
        })
    return rows


def _tab4():
    rows = []
    for eta in ETAS:
        for family, head, k in (("CsiNet", "A", 2), ("BCsiNet", "A", 2), ("BCsiNet", "B", 3)):
            spec = ModelSpec(family, head, k, eta)
            enc, _ = count_spec(spec)
            rows.append({
                "eta": f"1/{eta.denominator}",
                "method": spec.name if spec.binary else "CsiNet",
                "mul": fmt_k(enc.mults), "params": fmt_k(enc.params),
                "mul_exact": enc.mults, "params_exact": enc.params,
            })
    return rows


def _fig4():
    rows = []
    for head in ("A", "B", "C"):
        for eta in ETAS:
            rows.append({
                "head": head,
                "compression_multiple": eta.denominator,
                "memory_multiple": round(encoder_memory_multiple(head, eta), 4),
            })
    return rows


def table(mode):
    """Rows (list of dicts) for one of ``tab1``, ``tab2``, ``tab4``, ``fig4``."""
    builders = {"tab1": _tab1, "tab2": _tab2, "tab4": _tab4, "fig4": _fig4}
    if mode not in builders:
        raise ValueError(f"unknown table {mode!r}; choose from {', '.join(TABLE_MODES)}")
    return builders[mode]()


_DISPLAY_COLUMNS = {
    "tab1": ["method", "enc_flops", "enc_params", "dec_flops", "dec_params", "source"],
    "tab2": ["method", "fc_flops", "other_flops", "fc_params", "other_params", "source"],
    "tab4": ["eta", "method", "mul", "params"],
    "fig4": ["head", "compression_multiple", "memory_multiple"],
}


def format_table(mode, rows=None):
    rows = table(mode) if rows is None else rows
    cols = _DISPLAY_COLUMNS[mode]
    cells = [[str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def to_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
