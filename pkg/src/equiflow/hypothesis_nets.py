"""Convolutional layer families, networks, equivariance checks and well functions.

A layer is a sum of channels ``v * act(w conv x + b * ones)``, applied either
plainly or as a residual update ``x + ...``.  Networks stack layers over a
fixed lattice and may finish with a permutation-invariant pooling plus a
scalar output bias.  Everything here is immutable after construction and
evaluation is pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import (
    PeriodicTensor,
    DimensionMismatchError,
    as_dims,
    all_shifts,
    conv_raw,
    kernel_offsets,
    pool_raw,
    shift_raw,
    support,
    POOL_KINDS,
)

__all__ = [
    "ActivationKind",
    "RELU",
    "SIGMOID",
    "TANH",
    "ConvChannel",
    "ConvLayer",
    "ConvNetwork",
    "KernelSupportError",
    "NetworkFormatError",
    "UnsupportedActivationError",
    "WellFunction",
    "apply_layer",
    "apply_network",
    "check_equivariance",
    "make_well_function",
    "register_well_function",
    "serialize_network",
    "deserialize_network",
]


@dataclass(frozen=True)
class ActivationKind:
    """Scalar activation with its Lipschitz constant on the real line."""

    tag: str
    fn: callable = field(repr=False)
    lipschitz: float = 1.0


RELU = ActivationKind("relu", lambda x: np.maximum(x, 0.0), 1.0)
SIGMOID = ActivationKind("sigmoid", lambda x: 1.0 / (1.0 + np.exp(-x)), 0.25)
TANH = ActivationKind("tanh", np.tanh, 1.0)

_BUILTIN_ACTIVATIONS = {a.tag: a for a in (RELU, SIGMOID, TANH)}


def activation_by_tag(tag: str) -> ActivationKind:
    try:
        return _BUILTIN_ACTIVATIONS[tag]
    except KeyError:
        raise UnsupportedActivationError(f"unknown activation tag {tag!r}") from None


class KernelSupportError(ValueError):
    """Kernel support exceeds the declared per-axis bound."""


class NetworkFormatError(ValueError):
    """Malformed or unsupported serialized network."""


class UnsupportedActivationError(ValueError):
    """No construction registered for this activation."""


@dataclass(frozen=True)
class ConvChannel:
    """One channel: outer weight v, kernel w, bias b."""

    v: float
    w: PeriodicTensor
    b: float
    kernel_bound: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "v", float(self.v))
        object.__setattr__(self, "b", float(self.b))
        if self.kernel_bound is not None:
            bound = as_dims(self.kernel_bound)
            object.__setattr__(self, "kernel_bound", bound)
            sup = support(self.w)
            if any(s > l for s, l in zip(sup, bound)):
                raise KernelSupportError(
                    f"kernel support {sup} exceeds declared bound {bound}"
                )


@dataclass(frozen=True)
class ConvLayer:
    channels: tuple[ConvChannel, ...]
    kind: str = "plain"  # "plain" | "residual"
    activation: ActivationKind = RELU

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.kind not in ("plain", "residual"):
            raise ValueError(f"layer kind must be plain or residual, got {self.kind!r}")
        if len(self.channels) < 1:
            raise ValueError("a layer needs at least one channel")


@dataclass(frozen=True)
class ConvNetwork:
    """Stack of layers over one lattice, optionally pooled to a scalar.

    Without pooling the network maps tensors to tensors; with pooling it maps
    to reals and ``output_bias`` shifts the pooled value.
    """

    dims: tuple[int, ...]
    layers: tuple[ConvLayer, ...]
    pooling: str | None = None
    output_bias: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dims", as_dims(self.dims))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "output_bias", float(self.output_bias))
        if self.pooling is not None and self.pooling not in POOL_KINDS:
            raise ValueError(f"pooling must be one of {POOL_KINDS} or None")
        for layer in self.layers:
            for ch in layer.channels:
                if ch.w.dims != self.dims:
                    raise DimensionMismatchError(
                        f"channel kernel dims {ch.w.dims} != network dims {self.dims}"
                    )

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def max_channels(self) -> int:
        return max((len(l.channels) for l in self.layers), default=0)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _layer_offsets(layer: ConvLayer):
    return [kernel_offsets(ch.w) for ch in layer.channels]


def apply_layer_raw(layer: ConvLayer, arr: np.ndarray, d: int,
                    offsets=None) -> np.ndarray:
    """Evaluate one layer on a batched (..., n1, ..., nd) array."""
    if offsets is None:
        offsets = _layer_offsets(layer)
    act = layer.activation.fn
    total = np.zeros_like(arr)
    for ch, offs in zip(layer.channels, offsets):
        total += ch.v * act(conv_raw(offs, arr, d) + ch.b)
    if layer.kind == "residual":
        return arr + total
    return total


def apply_layer(layer: ConvLayer, x: PeriodicTensor) -> PeriodicTensor:
    """Plain: sum_i v_i act(w_i conv x + b_i); residual adds the input back."""
    for ch in layer.channels:
        if ch.w.dims != x.dims:
            raise DimensionMismatchError(f"kernel dims {ch.w.dims} != input dims {x.dims}")
    return PeriodicTensor(x.dims, apply_layer_raw(layer, x.values, len(x.dims)))


def apply_network_raw(net: ConvNetwork, arr: np.ndarray):
    d = len(net.dims)
    for layer in net.layers:
        arr = apply_layer_raw(layer, arr, d)
    if net.pooling is None:
        return arr
    return pool_raw(arr, net.pooling, d) + net.output_bias


def apply_network(net: ConvNetwork, x: PeriodicTensor):
    """Compose the layers; returns a tensor, or a float when pooling is set."""
    if x.dims != net.dims:
        raise DimensionMismatchError(f"input dims {x.dims} != network dims {net.dims}")
    out = apply_network_raw(net, x.values)
    if net.pooling is None:
        return PeriodicTensor(net.dims, out)
    return float(out)


def network_as_batch_fn(net: ConvNetwork):
    """Batched evaluator suitable for Monte-Carlo integration."""
    return lambda arr: apply_network_raw(net, arr)


# ---------------------------------------------------------------------------
# symmetry checking
# ---------------------------------------------------------------------------

def check_equivariance(map_fn, dims, trials: int = 20, seed=0) -> float:
    """Worst shift-symmetry violation of a map over random inputs.

    Enumerates every lattice translation.  For tensor-valued maps this measures
    max |map(T_k x) - T_k map(x)| (max norm); scalar-valued maps are checked
    for shift invariance instead.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    dims = as_dims(dims)
    d = len(dims)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = PeriodicTensor.random(dims, rng)
        base = map_fn(x)
        scalar = not isinstance(base, PeriodicTensor)
        for k in all_shifts(dims):
            shifted_out = map_fn(PeriodicTensor(dims, shift_raw(x.values, k, d)))
            if scalar:
                worst = max(worst, abs(float(shifted_out) - float(base)))
            else:
                expect = shift_raw(base.values, k, d)
                worst = max(worst, float(np.max(np.abs(shifted_out.values - expect))))
    return worst


# ---------------------------------------------------------------------------
# well functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WellFunction:
    """Lipschitz scalar function whose zero set is exactly [zero_lo, zero_hi].

    ``field_terms(v, w, b)`` expands v * h(w*z + b) into (v_i, w_i, b_i)
    channel triples of the owning activation, for use inside vector fields.
    """

    fn: callable = field(repr=False)
    zero_lo: float = -1.0
    zero_hi: float = 1.0
    lipschitz: float = 1.0
    field_terms: callable = field(repr=False, default=None)


def _relu_well() -> WellFunction:
    # h(y) = relu(y - 1) + relu(-y - 1): zero exactly on [-1, 1], slopes +-1 outside
    def fn(y):
        return np.maximum(y - 1.0, 0.0) + np.maximum(-y - 1.0, 0.0)

    def field_terms(v, w, b):
        return [(v, w, b - 1.0), (v, -w, -b - 1.0)]

    return WellFunction(fn=fn, zero_lo=-1.0, zero_hi=1.0, lipschitz=1.0,
                        field_terms=field_terms)


_WELL_REGISTRY = {"relu": _relu_well}


def register_well_function(tag: str, builder):
    """Register a well-function construction for a custom activation tag."""
    _WELL_REGISTRY[tag] = builder


def make_well_function(act: ActivationKind) -> WellFunction:
    """Well function in the span of single-activation terms, if registered."""
    try:
        builder = _WELL_REGISTRY[act.tag]
    except KeyError:
        raise UnsupportedActivationError(
            f"no well-function construction registered for activation {act.tag!r}"
        ) from None
    return builder()


# ---------------------------------------------------------------------------
# serialization (format version 1)
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


def serialize_network(net: ConvNetwork) -> bytes:
    obj = {
        "version": FORMAT_VERSION,
        "dims": list(net.dims),
        "pooling": net.pooling,
        "output_bias": net.output_bias,
        "layers": [
            {
                "kind": layer.kind,
                "activation": layer.activation.tag,
                "channels": [
                    {"v": ch.v, "b": ch.b, "w": ch.w.to_json_obj()}
                    for ch in layer.channels
                ],
            }
            for layer in net.layers
        ],
    }
    return json.dumps(obj, separators=(",", ":")).encode("utf-8")


def deserialize_network(data: bytes) -> ConvNetwork:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise NetworkFormatError(f"not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise NetworkFormatError("top-level value must be an object")
    version = obj.get("version")
    if version != FORMAT_VERSION:
        raise NetworkFormatError(f"unsupported format version {version!r}")
    try:
        dims = as_dims(obj["dims"])
        layers = []
        for lobj in obj["layers"]:
            channels = [
                ConvChannel(float(c["v"]), PeriodicTensor.from_json_obj(c["w"]), float(c["b"]))
                for c in lobj["channels"]
            ]
            layers.append(ConvLayer(tuple(channels), lobj["kind"], activation_by_tag(lobj["activation"])))
        return ConvNetwork(dims, tuple(layers), obj.get("pooling"), float(obj.get("output_bias", 0.0)))
    except NetworkFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"malformed network object: {exc}") from exc
