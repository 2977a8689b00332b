"""Flow maps of convolutional vector fields and their layer discretizations.

A vector field is a finite sum of terms ``v * act(w conv z + b * ones)``.
Time integration uses an embedded Dormand-Prince 4(5) pair with a per-step
error budget of ``tol`` per unit time.  Because piecewise-linear activations
make the field only piecewise smooth, accepted steps are additionally capped
at 1/(10 L), where L is the field's Lipschitz bound; that keeps kink crossings
resolved without event detection.

Programs are ordered lists of segments, each either a flow of one field over a
signed time horizon (negative horizon means flowing the negated field), or a
coordinatewise piecewise-linear "zoom".  Both segment kinds commute with
lattice translations, so every program is shift-equivariant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .piecewise import PiecewiseLinearFn
from .tensor_core import PeriodicTensor, as_dims, conv_raw, kernel_offsets, support
from .hypothesis_nets import (
    ActivationKind,
    ConvChannel,
    ConvLayer,
    ConvNetwork,
    RELU,
    activation_by_tag,
)

__all__ = [
    "FieldTerm",
    "VectorField",
    "FlowSeg",
    "ZoomSeg",
    "FlowProgram",
    "FlowStiffnessError",
    "NonfiniteStateError",
    "DiscretizationError",
    "flow",
    "flow_raw",
    "euler_compose",
    "flow_split_check",
    "run_program",
    "run_program_raw",
    "discretize_to_resnet",
    "serialize_program",
    "deserialize_program",
]


class FlowStiffnessError(RuntimeError):
    """Step size underflow during adaptive integration."""


class NonfiniteStateError(FloatingPointError):
    """State became NaN or infinite during integration."""


class DiscretizationError(RuntimeError):
    """Requested accuracy unreachable within the configured depth budget."""


@dataclass(frozen=True)
class FieldTerm:
    v: float
    w: PeriodicTensor
    b: float

    def __post_init__(self):
        object.__setattr__(self, "v", float(self.v))
        object.__setattr__(self, "b", float(self.b))


@dataclass(frozen=True)
class VectorField:
    """f(z) = sum_i v_i * act(w_i conv z + b_i * ones) on a fixed lattice."""

    dims: tuple[int, ...]
    terms: tuple[FieldTerm, ...]
    activation: ActivationKind = RELU

    def __post_init__(self):
        object.__setattr__(self, "dims", as_dims(self.dims))
        object.__setattr__(self, "terms", tuple(self.terms))
        for t in self.terms:
            if t.w.dims != self.dims:
                raise ValueError(f"term kernel dims {t.w.dims} != field dims {self.dims}")
        object.__setattr__(self, "_offsets", tuple(kernel_offsets(t.w) for t in self.terms))

    @classmethod
    def single(cls, dims, v: float, w: PeriodicTensor, b: float,
               activation: ActivationKind = RELU) -> "VectorField":
        return cls(as_dims(dims), (FieldTerm(v, w, b),), activation)

    @property
    def lipschitz_bound(self) -> float:
        lip = self.activation.lipschitz
        return float(sum(abs(t.v) * lip * np.abs(t.w.values).sum() for t in self.terms))

    def negated(self) -> "VectorField":
        return VectorField(self.dims, tuple(FieldTerm(-t.v, t.w, t.b) for t in self.terms),
                           self.activation)

    def __call__(self, arr: np.ndarray) -> np.ndarray:
        """Evaluate on a batched (..., n1, ..., nd) array."""
        d = len(self.dims)
        act = self.activation.fn
        out = np.zeros_like(arr)
        for t, offs in zip(self.terms, self._offsets):
            out += t.v * act(conv_raw(offs, arr, d) + t.b)
        return out

    def max_kernel_support(self) -> tuple[int, ...]:
        sup = (0,) * len(self.dims)
        for t in self.terms:
            sup = tuple(max(a, b) for a, b in zip(sup, support(t.w)))
        return sup


# ---------------------------------------------------------------------------
# Dormand-Prince 4(5) with step cap
# ---------------------------------------------------------------------------

_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)


def flow_raw(fld: VectorField, t: float, state: np.ndarray, tol: float) -> np.ndarray:
    """Integrate dz/dt = f(z) from a batched state over a signed horizon."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if t == 0.0:
        return state.copy()
    f = fld if t > 0 else fld.negated()
    horizon = abs(float(t))
    lip = f.lipschitz_bound
    cap = (1.0 / (10.0 * lip)) if lip > 0 else horizon

    y = np.array(state, dtype=float, copy=True)
    s = 0.0
    h = min(cap, horizon, 0.1)
    min_h = 1e-14 * max(horizon, 1.0)
    while s < horizon:
        h = min(h, horizon - s)
        k = [f(y)]
        for row in _DP_A[1:]:
            yi = y + h * sum(a * ki for a, ki in zip(row, k))
            k.append(f(yi))
        y5 = y + h * sum(b * ki for b, ki in zip(_DP_B5, k))
        k.append(f(y5))
        y4 = y + h * sum(b * ki for b, ki in zip(_DP_B4, k))
        err = float(np.max(np.abs(y5 - y4)))
        if not np.isfinite(err) or not np.all(np.isfinite(y5)):
            raise NonfiniteStateError("nonfinite state during flow integration")
        budget = tol * h
        if err <= budget:
            y = y5
            s += h
            factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * (budget / err) ** 0.2))
        else:
            factor = max(0.2, 0.9 * (budget / err) ** 0.2)
        h = min(cap, h * factor)
        if h < min_h:
            raise FlowStiffnessError(f"step size underflow at s={s:.3g} (h={h:.3g})")
    return y


def flow(fld: VectorField, t: float, x0: PeriodicTensor, tol: float = 1e-9) -> PeriodicTensor:
    """Flow map at horizon t applied to x0; t < 0 flows the negated field."""
    if x0.dims != fld.dims:
        raise ValueError(f"state dims {x0.dims} != field dims {fld.dims}")
    return PeriodicTensor(x0.dims, flow_raw(fld, t, x0.values, tol))


def euler_compose(fld: VectorField, T: float, n_steps: int, x0: PeriodicTensor) -> PeriodicTensor:
    """Apply x -> x + (T/n) f(x) exactly n times."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    h = float(T) / n_steps
    y = x0.values.copy()
    for _ in range(n_steps):
        y = y + h * fld(y)
        if not np.all(np.isfinite(y)):
            raise NonfiniteStateError("nonfinite state during Euler composition")
    return PeriodicTensor(x0.dims, y)


def flow_split_check(f: VectorField, g: VectorField, T: float, n: int,
                     x0: PeriodicTensor, tol: float = 1e-12) -> float:
    """Deviation of the alternating step [(id+tf) o (id+tg)]^n from the joint flow.

    The reference is a tightly integrated flow of the combined field f+g; the
    returned max-norm deviation decays like 1/n.
    """
    if f.dims != g.dims:
        raise ValueError("fields must share dims")
    if f.activation.tag != g.activation.tag:
        raise ValueError("fields must share an activation")
    h = float(T) / n
    y = x0.values.copy()
    for _ in range(n):
        y = y + h * g(y)
        y = y + h * f(y)
        if not np.all(np.isfinite(y)):
            raise NonfiniteStateError("nonfinite state during split composition")
    combined = VectorField(f.dims, f.terms + g.terms, f.activation)
    ref = flow_raw(combined, T, x0.values, tol)
    return float(np.max(np.abs(y - ref)))


# ---------------------------------------------------------------------------
# programs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowSeg:
    field: VectorField
    t: float

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))


@dataclass(frozen=True)
class ZoomSeg:
    u: PiecewiseLinearFn


@dataclass(frozen=True)
class FlowProgram:
    """Ordered segments, applied first-to-last; every segment is equivariant."""

    dims: tuple[int, ...]
    segments: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "dims", as_dims(self.dims))
        object.__setattr__(self, "segments", tuple(self.segments))
        for seg in self.segments:
            if isinstance(seg, FlowSeg) and seg.field.dims != self.dims:
                raise ValueError("flow segment dims mismatch")

    def __len__(self) -> int:
        return len(self.segments)

    def extended(self, more) -> "FlowProgram":
        return FlowProgram(self.dims, self.segments + tuple(more))

    def inverse(self) -> "FlowProgram":
        """Reverse the program; zooms must be strictly increasing to invert."""
        inv = []
        for seg in reversed(self.segments):
            if isinstance(seg, FlowSeg):
                inv.append(FlowSeg(seg.field, -seg.t))
            else:
                inv.append(ZoomSeg(seg.u.inverse()))
        return FlowProgram(self.dims, tuple(inv))


def run_program_raw(prog: FlowProgram, state: np.ndarray, tol: float) -> np.ndarray:
    y = np.array(state, dtype=float, copy=True)
    for seg in prog.segments:
        if isinstance(seg, FlowSeg):
            y = flow_raw(seg.field, seg.t, y, tol)
        else:
            y = seg.u(y)
    return y


def run_program(prog: FlowProgram, x0: PeriodicTensor, tol: float = 1e-9) -> PeriodicTensor:
    """Execute all segments in order on one tensor."""
    if x0.dims != prog.dims:
        raise ValueError(f"state dims {x0.dims} != program dims {prog.dims}")
    return PeriodicTensor(prog.dims, run_program_raw(prog, x0.values, tol))


def program_as_batch_fn(prog: FlowProgram, tol: float = 1e-9):
    return lambda arr: run_program_raw(prog, arr, tol)


# ---------------------------------------------------------------------------
# discretization to residual networks
# ---------------------------------------------------------------------------

def _segment_layers(seg: FlowSeg, n_steps: int) -> list[ConvLayer]:
    """First-order layers for one flow segment.

    Multi-term fields are split one term per layer (alternating composition);
    the extra splitting error is the same order as the Euler error and the
    Monte-Carlo validation loop absorbs both.
    """
    fld = seg.field if seg.t >= 0 else seg.field.negated()
    horizon = abs(seg.t)
    s = horizon / n_steps
    layers = []
    for _ in range(n_steps):
        for term in fld.terms:
            ch = ConvChannel(s * term.v, term.w, term.b)
            layers.append(ConvLayer((ch,), "residual", fld.activation))
    return layers


def _estimate_sup_field(fld: VectorField, t: float, states: np.ndarray, tol: float) -> float:
    """Track sup |f| along sampled trajectories, inflated x2 for safety."""
    f = fld if t >= 0 else fld.negated()
    horizon = abs(t)
    peak = float(np.max(np.abs(f(states)))) if states.size else 0.0
    n_check = 8
    y = states
    for i in range(n_check):
        y = flow_raw(f, horizon / n_check, y, tol)
        peak = max(peak, float(np.max(np.abs(f(y)))))
    return 2.0 * peak


def discretize_to_resnet(prog: FlowProgram, domain, eps: float, seed=0,
                         n_validate: int = 200, p: float = 2.0,
                         max_layers: int = 2_000_000, tol: float = 1e-10) -> ConvNetwork:
    """Compile a flow-only program into a residual network accurate on a domain.

    Step counts start from the first-order bound e^(T L) M (T/n) with a
    per-segment share of eps, then double until a Monte-Carlo comparison
    against the exact program passes.  Raises DiscretizationError if the depth
    budget runs out, and rejects programs that still contain zoom segments.
    """
    from .tensor_core import lp_norm_mc  # local import to avoid cycle at module load

    if eps <= 0:
        raise ValueError("eps must be positive")
    flows = []
    for seg in prog.segments:
        if isinstance(seg, ZoomSeg):
            raise DiscretizationError(
                "program contains zoom segments; compile them into flows first")
        flows.append(seg)
    rng = np.random.default_rng(seed)
    if not flows:
        net = ConvNetwork(prog.dims, (), pooling=None)
        return net

    states = domain.sample(rng, min(n_validate, 64))
    n_seg = len(flows)
    steps = []
    for seg in flows:
        horizon = abs(seg.t)
        if horizon == 0.0 or not seg.field.terms:
            steps.append(1)
            continue
        L = seg.field.lipschitz_bound
        M = _estimate_sup_field(seg.field, seg.t, states, tol)
        share = eps / n_seg
        n0 = 1 if M == 0.0 else math.exp(horizon * L) * M * horizon / share
        steps.append(max(1, min(int(math.ceil(n0)), max_layers)))
        # states advance so each segment sees its own reachable tube
        states = flow_raw(seg.field, seg.t, states, tol)

    ref_fn = program_as_batch_fn(prog, tol)
    while True:
        total = sum(s * max(1, len(seg.field.terms)) for s, seg in zip(steps, flows))
        if total > max_layers:
            raise DiscretizationError(
                f"needed {total} layers, budget is {max_layers}; eps={eps} unreachable")
        layers = []
        for seg, n_steps in zip(flows, steps):
            layers.extend(_segment_layers(seg, n_steps))
        net = ConvNetwork(prog.dims, tuple(layers), pooling=None)

        from .hypothesis_nets import network_as_batch_fn
        est = lp_norm_mc(ref_fn, network_as_batch_fn(net), domain, p, n_validate,
                         np.random.default_rng(seed + 1), batch=True)
        if est.value <= eps:
            return net
        steps = [2 * s for s in steps]


# ---------------------------------------------------------------------------
# program serialization
# ---------------------------------------------------------------------------

def serialize_program(prog: FlowProgram) -> bytes:
    segs = []
    for seg in prog.segments:
        if isinstance(seg, FlowSeg):
            segs.append({
                "type": "flow",
                "t": seg.t,
                "field": {
                    "activation": seg.field.activation.tag,
                    "terms": [
                        {"v": t.v, "b": t.b, "w": t.w.to_json_obj()}
                        for t in seg.field.terms
                    ],
                },
            })
        else:
            segs.append({"type": "zoom", "knots": seg.u.to_knot_list()})
    obj = {"dims": list(prog.dims), "segments": segs}
    return json.dumps(obj, separators=(",", ":")).encode("utf-8")


def deserialize_program(data: bytes) -> FlowProgram:
    obj = json.loads(data.decode("utf-8"))
    dims = as_dims(obj["dims"])
    segs = []
    for sobj in obj["segments"]:
        if sobj["type"] == "flow":
            fobj = sobj["field"]
            terms = tuple(
                FieldTerm(float(t["v"]), PeriodicTensor.from_json_obj(t["w"]), float(t["b"]))
                for t in fobj["terms"]
            )
            segs.append(FlowSeg(VectorField(dims, terms, activation_by_tag(fobj["activation"])),
                                float(sobj["t"])))
        elif sobj["type"] == "zoom":
            knots = sobj["knots"]
            segs.append(ZoomSeg(PiecewiseLinearFn(
                np.array([k[0] for k in knots]), np.array([k[1] for k in knots]))))
        else:
            raise ValueError(f"unknown segment type {sobj['type']!r}")
    return FlowProgram(dims, tuple(segs))
