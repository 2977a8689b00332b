"""Constructive approximation pipelines.

Four capabilities live here:

1. Exact embeddings of single-channel residual stacks into plain networks
   (``res_to_cnn3`` globally, ``res_to_cnn2`` on a chosen box).
2. One-dimensional increasing-function fitting by stacked well-function flows
   (``fit_increasing_1d``), the building block for compiling zooms.
3. Point transport: ``reorder_points`` makes the coordinate values of a
   shift-distinct point set strictly ordered (by point, then lexicographically
   within a point, with stabilizer coordinates demoted below everything), and
   ``point_match`` composes two orderings with a monotone coordinate map to
   carry sources onto targets while parking stabilizers near the origin.
4. The end-to-end grid pipeline ``construct_uap``: average the target over a
   grid, snap each shrunken cell to its base vertex with a coordinate zoom,
   transport the vertex orbit representatives onto the cell targets, and
   optionally compile the whole program into residual and plain two-channel
   networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .piecewise import PiecewiseLinearFn, KnotOrderError
from .tensor_core import (
    BoxDomain,
    PeriodicTensor,
    all_shifts,
    as_dims,
    lp_norm_mc,
    pool_raw,
    shift_raw,
)
from .hypothesis_nets import (
    ConvChannel,
    ConvLayer,
    ConvNetwork,
    RELU,
    ActivationKind,
    make_well_function,
    network_as_batch_fn,
)
from .flow_engine import (
    FieldTerm,
    FlowProgram,
    FlowSeg,
    VectorField,
    ZoomSeg,
    discretize_to_resnet,
    run_program_raw,
)
from ._transport import (
    Budget,
    BudgetExhaustedError,
    SourcesNotDistinctError,
    TransportEngine,
    ordering_counts,
)

__all__ = [
    "BudgetExhaustedError",
    "SourcesNotDistinctError",
    "PointMatchError",
    "ResidualEmbedError",
    "GridError",
    "PointSet",
    "OrderingReport",
    "reorder_points",
    "ordering_report",
    "point_match",
    "res_to_cnn3",
    "res_to_cnn2",
    "zoom_apply",
    "fit_increasing_1d",
    "equivariantize",
    "snap_function",
    "GridApproxPlan",
    "build_grid_plan",
    "compile_zooms",
    "ConstructionResult",
    "construct_uap",
]

DEFAULT_BUDGET = 10_000


class PointMatchError(RuntimeError):
    """Point matching could not meet its tolerance."""


class ResidualEmbedError(ValueError):
    """Network shape not eligible for a residual-to-plain embedding."""


class GridError(ValueError):
    """Invalid grid geometry for the construction pipeline."""


# ---------------------------------------------------------------------------
# point sets
# ---------------------------------------------------------------------------

def _is_stabilizer_arr(arr: np.ndarray, dims) -> bool:
    d = len(dims)
    for k in all_shifts(dims):
        if all(v == 0 for v in k):
            continue
        if np.array_equal(shift_raw(arr, k, d), arr):
            return True
    return False


def _shift_equal(a: np.ndarray, b: np.ndarray, dims) -> bool:
    d = len(dims)
    return any(np.array_equal(shift_raw(a, k, d), b) for k in all_shifts(dims))


@dataclass
class PointSet:
    """Sources, optional matching targets, and stabilizer points on one lattice."""

    dims: tuple[int, ...]
    sources: list[PeriodicTensor] = dc_field(default_factory=list)
    targets: list[PeriodicTensor] = dc_field(default_factory=list)
    stabilizers: list[PeriodicTensor] = dc_field(default_factory=list)

    def __post_init__(self):
        self.dims = as_dims(self.dims)
        for t in [*self.sources, *self.targets, *self.stabilizers]:
            if t.dims != self.dims:
                raise ValueError("all points must share the point set dims")

    @classmethod
    def from_roles(cls, dims, points, roles) -> "PointSet":
        ps = cls(as_dims(dims))
        for pt, role in zip(points, roles):
            getattr(ps, role + "s").append(pt)
        return ps

    def source_array(self) -> np.ndarray:
        return (np.stack([p.values for p in self.sources])
                if self.sources else np.zeros((0, *self.dims)))

    def target_array(self) -> np.ndarray:
        return (np.stack([p.values for p in self.targets])
                if self.targets else np.zeros((0, *self.dims)))

    def stabilizer_array(self) -> np.ndarray:
        return (np.stack([p.values for p in self.stabilizers])
                if self.stabilizers else np.zeros((0, *self.dims)))

    def validate_sources(self):
        """Sources must be pairwise shift distinct and free of self-symmetry."""
        arrs = [p.values for p in self.sources]
        for i, a in enumerate(arrs):
            if _is_stabilizer_arr(a, self.dims):
                raise SourcesNotDistinctError(f"source {i} is fixed by a nontrivial shift")
            for j in range(i + 1, len(arrs)):
                if _shift_equal(a, arrs[j], self.dims):
                    raise SourcesNotDistinctError(f"sources {i} and {j} are shift images")


# ---------------------------------------------------------------------------
# reordering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OrderingReport:
    ties: int
    block: int
    lex: int
    stab: int

    @property
    def ordered(self) -> bool:
        return self.ties == 0 and self.block == 0 and self.lex == 0 and self.stab == 0


def reorder_points(ps: PointSet, seed=0, budget: int = DEFAULT_BUDGET,
                   tol: float = 1e-9) -> FlowProgram:
    """Program making all source coordinate values strictly ordered.

    After the program, coordinate values descend with the point index, descend
    lexicographically within each point, and every stabilizer coordinate sits
    strictly below every source coordinate.  The engine is deterministic; the
    seed is accepted for interface stability.
    """
    ps.validate_sources()
    if int(np.prod(ps.dims)) < 2:
        raise SourcesNotDistinctError(
            "reordering needs at least two lattice sites; scalar lattices admit only "
            "monotone maps")
    eng = TransportEngine(ps.dims, ps.source_array(), ps.stabilizer_array(),
                          Budget.with_moves(budget), tol=tol)
    eng.run_all_phases()
    return FlowProgram(ps.dims, tuple(eng.segments))


def ordering_report(ps: PointSet, prog: FlowProgram, tol: float = 1e-9) -> OrderingReport:
    """Re-run the program on the point set and count ordering violations."""
    src = ps.source_array()
    stab = ps.stabilizer_array()
    n_src, n_stab = src.shape[0], stab.shape[0]
    both = np.concatenate([src, stab]) if n_stab else src
    out = run_program_raw(prog, both, tol)
    size = int(np.prod(ps.dims))
    counts = ordering_counts(out[:n_src].reshape(n_src, size),
                             out[n_src:].reshape(n_stab, size))
    return OrderingReport(counts["ties"], counts["block"], counts["lex"], counts["stab"])


# ---------------------------------------------------------------------------
# point matching
# ---------------------------------------------------------------------------

def _range_guard(lo: float, hi: float, outer_slope: float = 0.01,
                 reach: float = 1e7) -> PiecewiseLinearFn:
    """Increasing zoom that is the identity on [lo, hi] and nearly flat outside.

    Keeps program outputs on off-grid inputs within a bounded envelope without
    touching anything in the identity window.
    """
    return PiecewiseLinearFn.from_pairs([
        (lo - reach, lo - outer_slope * reach),
        (lo, lo),
        (hi, hi),
        (hi + reach, hi + outer_slope * reach),
    ], monotone=True)


def point_match(ps: PointSet, eps: float, budget: int = DEFAULT_BUDGET,
                seed=0, tol: float = 1e-9) -> FlowProgram:
    """Program carrying each source onto its target within eps (max norm),
    with every stabilizer mapped into the unit max-norm ball.

    Built as (source ordering) then a monotone coordinate map then the inverse
    of (target ordering); the coordinate map interpolates source coordinate
    values onto target coordinate values exactly, so the residual is pure
    integration error.  Stabilizer coordinates are funneled onto the image of
    the zero tensor under the target ordering and return near zero through the
    inverse.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if len(ps.sources) != len(ps.targets):
        raise ValueError("need as many targets as sources")
    ps.validate_sources()
    dims = ps.dims
    d = len(dims)
    size = int(np.prod(dims))
    rng = np.random.default_rng(seed)

    src = ps.source_array()
    tgt = ps.target_array()
    stab = ps.stabilizer_array()
    m = src.shape[0]
    n_stab = stab.shape[0]

    stab_ok = (n_stab == 0) or float(np.max(np.abs(stab))) <= 1.0
    if m == 0:
        if stab_ok:
            return FlowProgram(dims, ())
        s_max = float(np.max(np.abs(stab)))
        u = PiecewiseLinearFn.from_pairs([(-s_max, -0.9), (s_max, 0.9)], monotone=True)
        return FlowProgram(dims, (ZoomSeg(u),))
    if stab_ok and float(np.max(np.abs(src - tgt))) <= eps * (1 - 1e-12):
        return FlowProgram(dims, ())

    if size == 1:
        # scalar lattice: a single continuous coordinate map does the matching
        xs = src.reshape(m)
        ys = tgt.reshape(m)
        order = np.argsort(xs)
        if np.unique(xs).size != m:
            raise SourcesNotDistinctError("scalar sources must be pairwise distinct")
        u = PiecewiseLinearFn(xs[order], ys[order])
        return FlowProgram(dims, (ZoomSeg(u),))

    # targets must be shift distinct and stabilizer-free for an invertible ordering;
    # jitter within the eps budget when they are not
    jitter_scale = eps / 16.0
    for attempt in range(5):
        ok = True
        for i in range(m):
            if _is_stabilizer_arr(tgt[i], dims):
                ok = False
            for j in range(i + 1, m):
                if _shift_equal(tgt[i], tgt[j], dims):
                    ok = False
        if ok:
            break
        if attempt == 4:
            raise PointMatchError("targets could not be made shift distinct by jitter")
        tgt = tgt + rng.normal(scale=jitter_scale, size=tgt.shape)
        jitter_scale /= 2.0

    shared = Budget.with_moves(budget)
    eng_x = TransportEngine(dims, src, stab, shared, tol=tol)
    eng_x.run_all_phases()
    eng_y = TransportEngine(dims, tgt, np.zeros((1, *dims)), shared, tol=tol)
    eng_y.run_all_phases()

    xs = np.sort(eng_x.source_values().ravel())
    ys = np.sort(eng_y.source_values().ravel())
    if not (np.all(np.diff(xs) > 0) and np.all(np.diff(ys) > 0)):
        raise PointMatchError("ordering produced coincident coordinate values")

    zero_img = eng_y.stab_values().ravel()
    c = float(zero_img[0])
    if not np.allclose(zero_img, c, atol=1e-9):
        raise PointMatchError("zero tensor image is not constant; equivariance broken")

    prog_x = FlowProgram(dims, tuple(eng_x.segments))
    prog_y = FlowProgram(dims, tuple(eng_y.segments))
    prog_y_inv = prog_y.inverse()

    guard_lo = float(min(np.min(tgt), -1.25)) - 1.0
    guard_hi = float(max(np.max(tgt), 1.25)) + 1.0
    guard = _range_guard(guard_lo, guard_hi)

    delta_f = min((float(ys[0]) - c) / 4.0, 0.5)
    stab_x = eng_x.stab_values().ravel() if n_stab else np.array([])
    for attempt in range(8):
        pairs = []
        if n_stab:
            w_lo, w_hi = float(stab_x.min()), float(stab_x.max())
            if w_hi >= xs[0]:
                raise PointMatchError("stabilizer coordinates not demoted below sources")
            if w_lo < w_hi:
                pairs += [(w_lo, c - delta_f), (w_hi, c + delta_f)]
            else:
                pairs += [(w_lo, c)]
        pairs += list(zip(xs, ys))
        u_match = PiecewiseLinearFn.from_pairs(pairs, monotone=True)

        prog = FlowProgram(dims, prog_x.segments + (ZoomSeg(u_match),)
                           + prog_y_inv.segments + (ZoomSeg(guard),))

        batch = np.concatenate([src, stab]) if n_stab else src
        out = run_program_raw(prog, batch, tol)
        res = float(np.max(np.abs(out[:m] - tgt))) if m else 0.0
        s_res = float(np.max(np.abs(out[m:]))) if n_stab else 0.0
        if res <= eps and s_res <= 1.0:
            return prog
        if res > eps:
            raise PointMatchError(
                f"match residual {res:.3g} exceeds eps={eps:.3g} (integration drift)")
        delta_f /= 4.0
    raise PointMatchError(f"stabilizer image stayed above 1 (last {s_res:.3g})")


# ---------------------------------------------------------------------------
# residual-to-plain embeddings
# ---------------------------------------------------------------------------

def _check_single_channel_relu(resnet: ConvNetwork, op: str):
    for i, layer in enumerate(resnet.layers):
        if layer.kind != "residual":
            raise ResidualEmbedError(f"{op}: layer {i} is not residual")
        if len(layer.channels) != 1:
            raise ResidualEmbedError(f"{op}: layer {i} has {len(layer.channels)} channels")
        if layer.activation.tag != "relu":
            raise ResidualEmbedError(f"{op}: layer {i} uses {layer.activation.tag}, needs relu")


def res_to_cnn3(resnet: ConvNetwork) -> ConvNetwork:
    """Plain 3-channel network equal to the residual stack on all inputs.

    Each residual layer x + v*relu(w conv x + b) becomes the plain layer
    relu(x) - relu(-x) + v*relu(w conv x + b), which is the same function
    everywhere since relu(x) - relu(-x) = x.
    """
    _check_single_channel_relu(resnet, "res_to_cnn3")
    dims = resnet.dims
    ident = PeriodicTensor.delta(dims)
    layers = []
    for layer in resnet.layers:
        ch = layer.channels[0]
        layers.append(ConvLayer((
            ConvChannel(1.0, ident, 0.0),
            ConvChannel(-1.0, -1.0 * ident, 0.0),
            ConvChannel(ch.v, ch.w, ch.b),
        ), "plain", RELU))
    return ConvNetwork(dims, tuple(layers), resnet.pooling, resnet.output_bias)


def estimate_positivity_shift(resnet: ConvNetwork, box: BoxDomain, seed=0,
                              n_samples: int = 512, margin: float = 1.0) -> float:
    """Bound R with |gamma_i(x)| <= R for all layer prefixes over the box.

    Sampled prefix maxima are inflated by the layerwise Lipschitz product times
    a nominal sample mesh, then doubled and padded.
    """
    rng = np.random.default_rng(seed)
    d = len(resnet.dims)
    size = int(np.prod(resnet.dims))
    cur = box.sample(rng, n_samples)
    peak = float(np.max(np.abs(cur)))
    lip = 1.0
    lip_max = 1.0
    for layer in resnet.layers:
        ch = layer.channels[0]
        lip *= 1.0 + abs(ch.v) * float(np.abs(ch.w.values).sum())
        lip_max = max(lip_max, lip)
        from .hypothesis_nets import apply_layer_raw
        cur = apply_layer_raw(layer, cur, d)
        peak = max(peak, float(np.max(np.abs(cur))))
    mesh = (box.high - box.low) / max(n_samples ** (1.0 / size), 2.0)
    return 2.0 * peak + lip_max * mesh * math.sqrt(size) + margin


def res_to_cnn2(resnet: ConvNetwork, box: BoxDomain, seed=0) -> ConvNetwork:
    """Plain 2-channel network equal to the residual stack on the given box.

    The state is lifted by R (entering relu's linear region), each layer keeps
    the shifted state nonnegative while adding the residual update with a
    bias corrected by R times the kernel mass, and a final layer subtracts R.
    Inputs far outside the box can disagree once an activation leaves its
    intended regime.
    """
    _check_single_channel_relu(resnet, "res_to_cnn2")
    if box.dims != resnet.dims:
        raise ResidualEmbedError("box dims must match network dims")
    radius = estimate_positivity_shift(resnet, box, seed=seed)
    if not math.isfinite(radius):
        raise ResidualEmbedError("positivity shift overflowed")
    dims = resnet.dims
    ident = PeriodicTensor.delta(dims)
    zero_kernel = PeriodicTensor.zeros(dims)
    layers = [ConvLayer((ConvChannel(1.0, ident, radius),), "plain", RELU)]
    for layer in resnet.layers:
        ch = layer.channels[0]
        mass = float(ch.w.values.sum())
        layers.append(ConvLayer((
            ConvChannel(1.0, ident, 0.0),
            ConvChannel(ch.v, ch.w, ch.b - mass * radius),
        ), "plain", RELU))
    layers.append(ConvLayer((
        ConvChannel(1.0, ident, 0.0),
        ConvChannel(-1.0, zero_kernel, radius),
    ), "plain", RELU))
    return ConvNetwork(dims, tuple(layers), resnet.pooling, resnet.output_bias)


# ---------------------------------------------------------------------------
# coordinate zooming and 1-d fitting
# ---------------------------------------------------------------------------

def zoom_apply(u, x: PeriodicTensor) -> PeriodicTensor:
    """Apply a scalar map to every coordinate (always shift equivariant)."""
    fn = u if callable(u) else None
    if fn is None:
        raise TypeError("u must be callable")
    return PeriodicTensor(x.dims, np.asarray(fn(x.values), dtype=float).reshape(x.dims))


def _lift_1d_terms(terms_1d, dims) -> tuple[FieldTerm, ...]:
    """Diagonal-kernel lift of scalar field terms to an arbitrary lattice."""
    out = []
    for v, w_scalar, b in terms_1d:
        kernel = PeriodicTensor.delta(dims) * w_scalar
        out.append(FieldTerm(v, kernel, b))
    return tuple(out)


def fit_increasing_1d(u_target: PiecewiseLinearFn, knots, act: ActivationKind = RELU,
                      dims=(1,), fit_tol: float = 1e-9,
                      match_tol: float = 1e-6) -> FlowProgram:
    """Flow composition matching an increasing function at the given knots.

    Each step moves one knot to its target with a well-function flow whose
    zero interval is placed over all previously matched values, so earlier
    matches are preserved exactly.  The returned program uses diagonal kernels
    and therefore acts coordinatewise on any lattice given by ``dims``.
    """
    dims = as_dims(dims)
    knots = np.asarray(sorted(float(k) for k in knots), dtype=float)
    if np.unique(knots).size != knots.size:
        raise KnotOrderError("knots must be pairwise distinct")
    targets = np.asarray(u_target(knots), dtype=float)
    if knots.size > 1 and not np.all(np.diff(targets) > 0):
        raise KnotOrderError("target values at the knots must be strictly increasing")
    well = make_well_function(act)

    vals = knots.copy()
    segments = []
    for mi in range(knots.size):
        if abs(vals[mi] - targets[mi]) <= fit_tol:
            continue
        prev_top = targets[mi - 1] if mi > 0 else min(vals[mi], targets[mi]) - 1.0
        theta = (prev_top + min(vals[mi], targets[mi])) / 2.0
        low = float(min(vals.min(), targets.min())) - 10.0
        w = (well.zero_hi - well.zero_lo) / (theta - low)
        b = well.zero_lo - w * low
        v = 1.0 if targets[mi] > vals[mi] else -1.0
        fld = VectorField(dims, _lift_1d_terms(well.field_terms(v, w, b), dims), act)

        def advance(t: float) -> np.ndarray:
            from .flow_engine import flow_raw
            state = vals.reshape(-1, *((1,) * len(dims)))
            state = np.broadcast_to(state, (vals.size, *dims)).copy()
            out = flow_raw(fld, t, state, 1e-12)
            return out.reshape(vals.size, -1)[:, 0]

        t_hi = 0.5
        for _ in range(80):
            moved = advance(t_hi)[mi]
            if (moved - targets[mi]) * v >= 0:
                break
            t_hi *= 2.0
        else:
            raise PointMatchError("well flow failed to reach its target value")
        t_lo = 0.0
        for _ in range(80):
            mid = 0.5 * (t_lo + t_hi)
            if (advance(mid)[mi] - targets[mi]) * v >= 0:
                t_hi = mid
            else:
                t_lo = mid
        t_star = 0.5 * (t_lo + t_hi)
        vals = advance(t_star)
        if abs(vals[mi] - targets[mi]) > match_tol:
            raise PointMatchError(
                f"knot {mi} matched only to {abs(vals[mi]-targets[mi]):.3g}")
        segments.append(FlowSeg(fld, t_star))
    return FlowProgram(dims, tuple(segments))


# ---------------------------------------------------------------------------
# equivariantization of a single-cell function
# ---------------------------------------------------------------------------

def _smoothstep(r: float) -> float:
    r = min(max(r, 0.0), 1.0)
    return r * r * (3.0 - 2.0 * r)


def equivariantize(u, dims, chi_margin: float = 0.1):
    """Extend a map defined where the first coordinate is the strict argmax.

    Returns an equivariant, continuous map: inputs are rotated so their argmax
    sits at the first position, passed through ``u`` scaled by a C^1 bump of
    the argmax gap, and rotated back.  Tie points (no strict argmax) map to
    zero by convention.
    """
    dims = as_dims(dims)
    d = len(dims)
    if chi_margin <= 0:
        raise ValueError("chi_margin must be positive")

    def f(x: PeriodicTensor) -> PeriodicTensor:
        vals = x.values
        flat = vals.ravel()
        if flat.size == 1:
            out = u(x)
            return out if isinstance(out, PeriodicTensor) else PeriodicTensor(dims, out)
        top_pos = int(np.argmax(flat))
        top = flat[top_pos]
        rest = np.delete(flat, top_pos)
        gap = float(top - rest.max())
        if gap <= 0.0:
            return PeriodicTensor.zeros(dims)
        offset = np.unravel_index(top_pos, dims)
        rotated = PeriodicTensor(dims, shift_raw(vals, offset, d))
        out = u(rotated)
        out_arr = out.values if isinstance(out, PeriodicTensor) else np.asarray(out)
        chi = _smoothstep(gap / chi_margin)
        back = shift_raw(chi * out_arr, tuple(-o for o in offset), d)
        return PeriodicTensor(dims, back)

    return f


# ---------------------------------------------------------------------------
# grid plans and the construction pipeline
# ---------------------------------------------------------------------------

def snap_function(a: float, delta: float, shrink: float) -> PiecewiseLinearFn:
    """Zoom collapsing every shrunken grid interval onto its base vertex.

    On [i*delta, (i+shrink)*delta] the map is the constant i*delta; the rest
    of each interval ramps linearly to the next vertex.  Identity-slope
    extrapolation applies beyond [-a, a].
    """
    if not (0 < shrink < 1):
        raise GridError("shrink factor must lie in (0, 1)")
    levels = int(round(a / delta))
    pairs = []
    for i in range(-levels, levels):
        v = i * delta
        pairs.append((v, v))
        pairs.append((v + shrink * delta, v))
    pairs.append((a, a))
    return PiecewiseLinearFn.from_pairs(pairs, monotone=True)


def _canonical_orbit(q_arr: np.ndarray, dims) -> tuple[tuple, bool]:
    """Lexicographically maximal shift of an integer vertex tensor.

    Returns (canonical flattened tuple, is_stabilizer); a tie between distinct
    shifts means the vertex is fixed by a nontrivial translation.
    """
    d = len(dims)
    best = None
    hits = 0
    for k in all_shifts(dims):
        cand = tuple(shift_raw(q_arr, k, d).ravel())
        if best is None or cand > best:
            best, hits = cand, 1
        elif cand == best:
            hits += 1
    return best, hits > 1


@dataclass
class GridApproxPlan:
    """Grid geometry, cell targets and orbit bookkeeping for one construction."""

    dims: tuple[int, ...]
    a: float
    delta: float
    shrink: float
    mode: str
    representatives: list[tuple]                 # canonical vertex index tuples
    rep_sources: np.ndarray                      # (M, *dims) vertex tensors q*delta
    rep_targets: np.ndarray                      # (M, *dims) cell targets y_q
    rep_pooled: np.ndarray                       # (M,) pooled scalars (invariant mode)
    stabilizer_cells: list[tuple]                # every stabilizer vertex index
    stab_sources: np.ndarray                     # (S, *dims) deduplicated stabilizer vertices
    n_cells: int

    def verify_cover(self) -> bool:
        """Representatives' orbits plus stabilizers tile the full vertex set."""
        size = int(np.prod(self.dims))
        d = len(self.dims)
        levels = int(round(self.a / self.delta))
        all_q = {tuple(q) for q in np.stack(np.meshgrid(
            *[np.arange(-levels, levels)] * size, indexing="ij"), axis=-1).reshape(-1, size)}
        covered = set(tuple(q) for q in self.stabilizer_cells)
        for rep in self.representatives:
            q_arr = np.asarray(rep, dtype=float).reshape(self.dims)
            for k in all_shifts(self.dims):
                covered.add(tuple(int(v) for v in shift_raw(q_arr, k, d).ravel()))
        return covered == all_q and len(all_q) == self.n_cells


def _cell_quadrature_offsets(size: int, delta: float, order: int) -> np.ndarray:
    axes = [((np.arange(order) + 0.5) / order) * delta] * size
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def build_grid_plan(target_fn, dims, a: float, delta: float, shrink: float,
                    mode: str = "invariant", eps: float = 0.1, quad_order: int = 3,
                    max_cells: int = 4096) -> GridApproxPlan:
    """Average the target over each grid cell and pick shift-orbit representatives.

    Cell averages use a midpoint product quadrature on each cell; invariant-mode
    targets are spread over a zero-sum asymmetric pattern so that pooled sums
    are preserved exactly while distinct cells get shift-distinct tensors.
    """
    dims = as_dims(dims)
    size = int(np.prod(dims))
    if mode not in ("invariant", "equivariant"):
        raise GridError(f"mode must be invariant or equivariant, got {mode!r}")
    levels_f = a / delta
    if abs(levels_f - round(levels_f)) > 1e-9 or round(levels_f) < 1:
        raise GridError(f"delta={delta} must divide the half-width a={a} evenly")
    levels = int(round(levels_f))
    n_cells = (2 * levels) ** size
    if n_cells > max_cells:
        raise GridError(f"{n_cells} cells exceed the desk-scale limit {max_cells}")

    reps: list[tuple] = []
    stab_cells: list[tuple] = []
    stab_canon: list[tuple] = []
    seen: set = set()
    grid_axes = [np.arange(-levels, levels)] * size
    for q_flat in np.stack(np.meshgrid(*grid_axes, indexing="ij"), axis=-1).reshape(-1, size):
        q = tuple(int(v) for v in q_flat)
        q_arr = np.asarray(q, dtype=float).reshape(dims)
        canon, is_stab = _canonical_orbit(q_arr, dims)
        if is_stab:
            stab_cells.append(q)
            if canon not in seen:
                seen.add(canon)
                stab_canon.append(q)
            continue
        if canon not in seen:
            seen.add(canon)
            reps.append(tuple(int(v) for v in canon))

    offsets = _cell_quadrature_offsets(size, delta, quad_order)

    def cell_average(q):
        base = np.asarray(q, dtype=float) * delta
        pts = base[None, :] + offsets
        outs = []
        for p in pts:
            res = target_fn(PeriodicTensor(dims, p.reshape(dims)))
            outs.append(res.values if isinstance(res, PeriodicTensor) else float(res))
        return np.mean(np.asarray(outs, dtype=float), axis=0)

    m = len(reps)
    rep_sources = np.zeros((m, *dims))
    rep_targets = np.zeros((m, *dims))
    rep_pooled = np.zeros(m)
    if mode == "invariant":
        # fixed zero-sum asymmetric pattern, scaled per representative so the
        # targets are pairwise shift distinct while pooled sums stay exact
        ramp = np.array([2.0 ** (-i) for i in range(size)])
        pattern = (ramp - ramp.mean())
        pattern /= np.max(np.abs(pattern))
        eta = eps / 10.0
    for idx, q in enumerate(reps):
        rep_sources[idx] = np.asarray(q, dtype=float).reshape(dims) * delta
        avg = cell_average(q)
        if mode == "invariant":
            rep_pooled[idx] = float(avg)
            rho = 1.0 + idx / (2.0 * max(m, 1))
            rep_targets[idx] = (avg / size) + eta * rho * pattern.reshape(dims)
        else:
            rep_targets[idx] = avg
    stab_sources = (np.stack([np.asarray(q, dtype=float).reshape(dims) * delta
                              for q in stab_canon])
                    if stab_canon else np.zeros((0, *dims)))

    return GridApproxPlan(dims, a, delta, shrink, mode, reps, rep_sources,
                          rep_targets, rep_pooled, stab_cells, stab_sources, n_cells)


# ---------------------------------------------------------------------------
# compiling zooms into flows, and the full pipeline
# ---------------------------------------------------------------------------

def _strictified(u: PiecewiseLinearFn, min_slope: float) -> PiecewiseLinearFn:
    """Nearby strictly increasing version of a nondecreasing zoom."""
    if u.strictly_increasing:
        return u
    xs = u.xs
    ys = u.ys.copy()
    for i in range(1, ys.size):
        floor = ys[i - 1] + min_slope * (xs[i] - xs[i - 1])
        if ys[i] < floor:
            ys[i] = floor
    return PiecewiseLinearFn(xs, ys, monotone=True)


def compile_zooms(prog: FlowProgram, act: ActivationKind = RELU,
                  fit_eps: float = 1e-3, min_slope: float = 1e-4,
                  max_rounds: int = 4, pad: float = 2.0) -> FlowProgram:
    """Replace every zoom segment by a composition of diagonal well flows.

    Each zoom's knot set (padded at both ends) is matched exactly by
    ``fit_increasing_1d``; between knots the fit is validated on a fine grid
    and knots are refined until the deviation falls under ``fit_eps``.
    Non-invertible zooms are first replaced by a strictly increasing version
    with slope at least ``min_slope``.
    """
    out_segments: list = []
    for seg in prog.segments:
        if isinstance(seg, FlowSeg):
            out_segments.append(seg)
            continue
        u = _strictified(seg.u, min_slope)
        lo, hi = float(u.xs[0]) - pad, float(u.xs[-1]) + pad
        knots = np.unique(np.concatenate([[lo], u.xs, [hi]]))
        fitted = None
        for _ in range(max_rounds):
            fitted = fit_increasing_1d(u, knots, act=act, dims=prog.dims)
            grid = np.linspace(lo, hi, 4 * knots.size + 1)
            state = np.broadcast_to(grid.reshape(-1, *([1] * len(prog.dims))),
                                    (grid.size, *prog.dims)).copy()
            got = run_program_raw(fitted, state, 1e-11).reshape(grid.size, -1)[:, 0]
            dev = np.abs(got - u(grid))
            if float(dev.max()) <= fit_eps:
                break
            worst = np.argsort(dev)[-max(2, knots.size // 4):]
            knots = np.unique(np.concatenate([knots, grid[worst]]))
        out_segments.extend(fitted.segments)
    return FlowProgram(prog.dims, tuple(out_segments))


@dataclass
class ConstructionResult:
    program: FlowProgram
    plan: GridApproxPlan
    pooling: str | None
    resnet: ConvNetwork | None
    cnn2: ConvNetwork | None
    report: dict

    def scalar_fn(self, tol: float = 1e-9):
        """Batched scalar evaluator (pooled program output)."""
        if self.pooling is None:
            raise ValueError("equivariant constructions have no scalar output")
        d = len(self.program.dims)

        def fn(arr):
            return pool_raw(run_program_raw(self.program, arr, tol), self.pooling, d)

        return fn

    def tensor_fn(self, tol: float = 1e-9):
        return lambda arr: run_program_raw(self.program, arr, tol)


def construct_uap(target_fn, dims, a: float, delta: float, shrink: float,
                  eps: float, mode: str = "invariant", seed=0, p: float = 2.0,
                  pooling: str = "sum", budget: int | None = None,
                  n_mc: int = 512, compile_resnet: bool = False,
                  compile_cnn2: bool = False, quad_order: int = 3,
                  tol: float = 1e-9) -> ConstructionResult:
    """Grid-average, snap, transport: a constructive approximator for a
    shift-invariant (or equivariant) target on the box [-a, a]^lattice.

    Reports a Monte-Carlo Lp error against the target and the worst symmetry
    violation of the built program.  Optional compilation turns the program
    into a residual network (first-order steps, validated by Monte Carlo) and
    further into a plain 2-channel network that agrees with it on the box.
    """
    dims = as_dims(dims)
    size = int(np.prod(dims))
    d = len(dims)
    if mode == "invariant" and pooling != "sum":
        raise GridError("invariant mode supports sum pooling only")
    rng = np.random.default_rng(seed)

    plan = build_grid_plan(target_fn, dims, a, delta, shrink, mode=mode, eps=eps,
                           quad_order=quad_order)
    snap = snap_function(a, delta, shrink)

    m = plan.rep_sources.shape[0]
    order = np.argsort([-float(np.max(v)) for v in plan.rep_sources], kind="stable")
    ps = PointSet(dims,
                  sources=[PeriodicTensor(dims, plan.rep_sources[i]) for i in order],
                  targets=[PeriodicTensor(dims, plan.rep_targets[i]) for i in order],
                  stabilizers=[PeriodicTensor(dims, s) for s in plan.stab_sources])
    if budget is None:
        budget = max(DEFAULT_BUDGET, 60 * (m * size + 1) ** 2)
    match_prog = point_match(ps, eps=eps, budget=budget, seed=seed, tol=tol)

    program = FlowProgram(dims, (ZoomSeg(snap),) + match_prog.segments)

    # verification of the matched points through the full program
    batch = np.concatenate([plan.rep_sources, plan.stab_sources]) \
        if plan.stab_sources.size else plan.rep_sources
    out = run_program_raw(program, batch, tol) if batch.size else batch
    residual = float(np.max(np.abs(out[:m] - plan.rep_targets))) if m else 0.0
    stab_peak = float(np.max(np.abs(out[m:]))) if plan.stab_sources.size else 0.0

    box = BoxDomain(dims, -a, a)
    if mode == "invariant":
        def model_fn(arr):
            return pool_raw(run_program_raw(program, arr, tol), pooling, d)

        def oracle_fn(arr):
            return np.asarray([float(target_fn(PeriodicTensor(dims, s))) for s in arr])
    else:
        def model_fn(arr):
            return run_program_raw(program, arr, tol)

        def oracle_fn(arr):
            return np.stack([np.asarray(target_fn(PeriodicTensor(dims, s)).values)
                             for s in arr])

    err = lp_norm_mc(oracle_fn, model_fn, box, p, n_mc, rng, batch=True)

    from .hypothesis_nets import check_equivariance
    if mode == "invariant":
        sym = check_equivariance(lambda x: float(pool_raw(
            run_program_raw(program, x.values, tol), pooling, d)), dims, trials=10, seed=seed)
    else:
        sym = check_equivariance(
            lambda x: PeriodicTensor(dims, run_program_raw(program, x.values, tol)),
            dims, trials=10, seed=seed)

    resnet = cnn2 = None
    compiled = {}
    if compile_resnet or compile_cnn2:
        flows_only = compile_zooms(program, fit_eps=eps / 8.0,
                                   min_slope=eps / (16.0 * max(2.0 * a, 1.0)))
        resnet = discretize_to_resnet(flows_only, box, eps / 2.0, seed=seed + 1,
                                      n_validate=min(n_mc, 128), p=p)
        compiled["resnet_layers"] = resnet.depth
        if compile_cnn2:
            pooled_resnet = ConvNetwork(dims, resnet.layers,
                                        pooling if mode == "invariant" else None, 0.0)
            cnn2 = res_to_cnn2(pooled_resnet, box, seed=seed + 2)
            compiled["cnn2_layers"] = cnn2.depth
            net_fn = network_as_batch_fn(cnn2)
            cmp_est = lp_norm_mc(model_fn, net_fn, box, p, min(n_mc, 256),
                                 np.random.default_rng(seed + 3), batch=True)
            compiled["cnn2_vs_program_lp"] = cmp_est.value

    report = {
        "grid": {
            "cells": plan.n_cells,
            "representatives": m,
            "stabilizer_cells": len(plan.stabilizer_cells),
            "delta": delta,
            "shrink": shrink,
            "cover_ok": plan.verify_cover(),
        },
        "match": {"residual_max": residual, "stabilizer_peak": stab_peak,
                  "segments": len(program)},
        "lp_error": {"estimate": err.value, "power_integral": err.power_integral,
                     "power_stderr": err.power_stderr, "p": p, "n": n_mc},
        "symmetry_violation": sym,
        "compiled": compiled,
    }
    return ConstructionResult(program, plan, pooling if mode == "invariant" else None,
                              resnet, cnn2, report)
