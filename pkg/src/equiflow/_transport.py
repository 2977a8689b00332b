"""Order-based point transport through zooms and gated single-term flows.

This is the engine behind point reordering and point matching.  The state is
the list of coordinate values of all tracked points (sources first, then
stabilizers).  A *move* appends one or two program segments:

- an increasing piecewise-linear zoom that locally compresses the gap between
  a targeted pair of coordinate slots (and occasionally renormalizes the whole
  value ladder), and
- a flow of a single-term field ``v * relu(g * z_{i+e} + b)`` whose gate is
  placed between the e-neighbor values of the targeted pair, so exactly one of
  the two slots moves while the other sits still.

Flow times are found by bracketed search: a candidate time is accepted only if
the targeted slot crossed its partner while every other strictly ordered pair
of slots kept its order.  Each phase (tie separation, block ordering, in-point
lexicographic ordering, stabilizer demotion) repairs one violating pair per
move and its violation count strictly decreases, so a finite move budget
bounds the run.

Everything is deterministic: no randomness enters the engine itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .piecewise import PiecewiseLinearFn
from .tensor_core import PeriodicTensor, as_dims
from .flow_engine import FieldTerm, FlowSeg, VectorField, ZoomSeg, flow_raw
from .hypothesis_nets import RELU

__all__ = [
    "Budget",
    "BudgetExhaustedError",
    "SourcesNotDistinctError",
    "TransportEngine",
    "ordering_counts",
]


class BudgetExhaustedError(RuntimeError):
    """The repair loop ran out of moves before reaching its goal."""

    def __init__(self, phase: str, detail: str = ""):
        self.phase = phase
        super().__init__(f"transport budget exhausted during phase {phase!r} {detail}".rstrip())


class SourcesNotDistinctError(ValueError):
    """Source points are not shift distinct (or contain a stabilizer)."""


@dataclass
class Budget:
    moves: int
    attempts: int

    @classmethod
    def with_moves(cls, moves: int) -> "Budget":
        return cls(moves=moves, attempts=64 * moves)

    def spend_move(self, phase: str):
        self.moves -= 1
        if self.moves < 0:
            raise BudgetExhaustedError(phase, "(move budget)")

    def spend_attempt(self, phase: str):
        self.attempts -= 1
        if self.attempts < 0:
            raise BudgetExhaustedError(phase, "(attempt budget)")


def _neighbor_perms(dims) -> list[np.ndarray]:
    """Flat-index permutation per axis sending i to i + e_axis (wrapped)."""
    dims = as_dims(dims)
    flat = np.arange(int(np.prod(dims))).reshape(dims)
    return [np.roll(flat, -1, axis=a).ravel() for a in range(len(dims))]


def ordering_counts(src_vals: np.ndarray, stab_vals: np.ndarray) -> dict:
    """Violation counts of the strict ordering predicate.

    ``ties``: coincident coordinate values among source slots.
    ``block``: source coordinate of a later point above one of an earlier point.
    ``lex``: within a point, an earlier (lexicographically smaller) coordinate
    below a later one.
    ``stab``: a stabilizer coordinate at or above a source coordinate.
    """
    m, size = src_vals.shape
    flat = src_vals.ravel()
    ties = 0
    uniq, counts = np.unique(flat, return_counts=True)
    ties = int(sum(c * (c - 1) // 2 for c in counts if c > 1))
    block = 0
    for j in range(m):
        for j2 in range(j + 1, m):
            block += int(np.sum(src_vals[j2][None, :] >= src_vals[j][:, None]))
    lex = 0
    for j in range(m):
        v = src_vals[j]
        lex += int(sum(np.sum(v[i + 1:] >= v[i]) for i in range(size)))
    stab = 0
    if stab_vals.size:
        stab = int(np.sum(stab_vals.ravel()[None, :] >= flat[:, None]))
    return {"ties": ties, "block": block, "lex": lex, "stab": stab}


class TransportEngine:
    """Mutable repair-loop state over source and stabilizer points."""

    def __init__(self, dims, sources: np.ndarray, stabilizers: np.ndarray,
                 budget: Budget, tol: float = 1e-12):
        self.dims = as_dims(dims)
        self.size = int(np.prod(self.dims))
        self.n_src = sources.shape[0]
        self.n_stab = stabilizers.shape[0] if stabilizers.size else 0
        self.n_pts = self.n_src + self.n_stab
        vals = np.concatenate(
            [sources.reshape(self.n_src, self.size),
             stabilizers.reshape(self.n_stab, self.size) if self.n_stab
             else np.zeros((0, self.size))], axis=0)
        self.vals = np.array(vals, dtype=float)
        self.budget = budget
        self.tol = tol
        self.segments: list = []
        self.perms = _neighbor_perms(self.dims)
        self.axes = [a for a in range(len(self.dims)) if self.dims[a] >= 2]
        self.src_slots = np.arange(self.n_src * self.size)
        self._moves_since_renorm = 0
        # healthy starting gaps keep later squeeze ratios (and hence the
        # condition number of the recorded zooms) bounded
        self._renormalize()

    # -- slot helpers ---------------------------------------------------
    def _flat(self) -> np.ndarray:
        return self.vals.ravel()

    def _slot_value(self, slot) -> float:
        p, c = slot
        return float(self.vals[p, c])

    def _neighbor_slot(self, slot, axis):
        p, c = slot
        return (p, int(self.perms[axis][c]))

    # -- segment application ---------------------------------------------
    def _apply_zoom(self, u: PiecewiseLinearFn):
        self.segments.append(ZoomSeg(u))
        self.vals = u(self.vals)

    def _apply_flow(self, field: VectorField, t: float, new_vals: np.ndarray):
        self.segments.append(FlowSeg(field, t))
        self.vals = new_vals

    def _candidate_flow(self, field: VectorField, t: float) -> np.ndarray:
        state = self.vals.reshape(self.n_pts, *self.dims)
        out = flow_raw(field, t, state, self.tol)
        return out.reshape(self.n_pts, self.size)

    # -- ladder hygiene ----------------------------------------------------
    def _renormalize(self):
        """Map the distinct sorted values onto a geometric ladder (order preserved).

        Gaps proportional to the value level keep the ratio (local gap)/(gated
        flow rate) bounded below across the whole ladder, which caps how deep
        any later squeeze has to go.
        """
        flat = self._flat()
        uniq = np.unique(flat)
        if uniq.size < 2:
            return
        k = np.arange(uniq.size, dtype=float)
        ladder = np.exp(2.0 * k / uniq.size)
        self._apply_zoom(PiecewiseLinearFn(uniq, ladder, monotone=True))
        self._moves_since_renorm = 0

    def _maybe_renormalize(self):
        flat = self._flat()
        uniq = np.unique(flat)
        if uniq.size < 2:
            return
        gaps = np.diff(uniq)
        span = uniq[-1] - uniq[0]
        if gaps.min() < 1e-7 * max(span, 1.0) or span > 1e7 or self._moves_since_renorm >= 64:
            self._renormalize()

    # -- the move primitive ----------------------------------------------
    def _check_candidate(self, ctx, new_vals: np.ndarray, accept_fn) -> bool:
        """Accept a candidate state: order preserved outside the band, the band
        stays between its old neighbors, the goal predicate holds, and source
        values that were distinct remain distinct."""
        new_flat = new_vals.ravel()
        seq = new_flat[ctx["outside"]]
        if seq.size > 1:
            d = np.diff(seq)
            if ctx["strict"].size and not np.all(d[ctx["strict"]] > 0):
                return False
        band = new_flat[ctx["band_slots"]]
        if band.size:
            if ctx["border_lo_slot"] is not None:
                if not np.all(band > new_flat[ctx["border_lo_slot"]]):
                    return False
            if ctx["border_hi_slot"] is not None:
                if not np.all(band < new_flat[ctx["border_hi_slot"]]):
                    return False
        if not accept_fn(new_flat):
            return False
        src = new_flat[: self.n_src * self.size]
        if np.unique(src).size < ctx["src_distinct_before"]:
            return False
        return True

    def _gate_field(self, axis: int, gate_sign: float, direction: float,
                    threshold: float) -> VectorField:
        """Field v*relu(g * z_{i+e} + b) with the gate opening beyond threshold."""
        kernel = np.zeros(self.dims)
        idx = [0] * len(self.dims)
        idx[axis] = 1 % self.dims[axis]
        kernel[tuple(idx)] = gate_sign
        return VectorField(
            self.dims,
            (FieldTerm(direction, PeriodicTensor(self.dims, kernel), -gate_sign * threshold),),
            RELU,
        )

    def _try_move(self, A, B, axis, mover: str, phase: str, accept_fn,
                  separate_only: bool = False, _squeezes: int = 0) -> bool:
        """One (zoom?, flow) repair attempt: slot A should end strictly above B
        (or merely split from it when ``separate_only``).

        ``mover`` selects which of the pair is displaced ("A" rises, "B" sinks).
        Returns False if no admissible flow time was found for this gate.
        """
        vA, vB = self._slot_value(A), self._slot_value(B)
        nA = self._slot_value(self._neighbor_slot(A, axis))
        nB = self._slot_value(self._neighbor_slot(B, axis))
        if nA == nB:
            return False
        lo, hi = min(vA, vB), max(vA, vB)

        ctx = self._make_context(lo, hi)
        if ctx is None:
            return False
        slack = ctx["slack"]

        # gate between the two neighbor values; the gated slot is the mover
        if mover == "A":
            gate_sign = 1.0 if nA > nB else -1.0
            direction = 1.0
        else:
            gate_sign = 1.0 if nB > nA else -1.0
            direction = -1.0
        field = self._gate_field(axis, gate_sign, direction, (nA + nB) / 2.0)

        rates = np.abs(field(self.vals.reshape(self.n_pts, *self.dims))).reshape(
            self.n_pts, self.size).ravel()
        mover_idx = (A if mover == "A" else B)
        mover_flat = mover_idx[0] * self.size + mover_idx[1]
        r_mov = rates[mover_flat]
        if r_mov <= 0:
            return False

        # per-slot time allowance: each slot may move a third of its local gap
        # (band members instead get a third of the room between the borders)
        flat = self._flat()
        uniq = np.unique(flat)
        pos = np.searchsorted(uniq, flat)
        gap_up = np.full(flat.size, np.inf)
        gap_dn = np.full(flat.size, np.inf)
        has_up = pos < uniq.size - 1
        has_dn = pos > 0
        gap_up[has_up] = uniq[np.minimum(pos + 1, uniq.size - 1)][has_up] - flat[has_up]
        gap_dn[has_dn] = flat[has_dn] - uniq[np.maximum(pos - 1, 0)][has_dn]
        local_gap = np.minimum(gap_up, gap_dn)
        in_band = (flat >= lo) & (flat <= hi)
        room = slack if ctx["border_room"] is None else min(slack, ctx["border_room"] / 3.0)
        allowance = np.where(in_band, max(room, 1e-300), local_gap) / 3.0
        with np.errstate(divide="ignore", invalid="ignore"):
            caps = np.where(rates > 0, allowance / np.maximum(rates, 1e-300), np.inf)
        caps[mover_flat] = np.inf
        t_cap = float(np.min(caps))
        if not np.isfinite(t_cap) or t_cap <= 0:
            return False

        width = hi - lo
        floor = 1e-11 * max(1.0, abs(hi), abs(lo))
        target_disp = max(min(room, t_cap * r_mov) / 2.0, floor)
        if width > target_disp / 2.0:
            if width <= 0:
                return False
            # gate rates change once in-band neighbors are compressed, so a fixed
            # squeeze ratio may need a few rounds; the squeeze gap keeps a float
            # floor so the recorded zoom (and its inverse) stays conditioned
            if _squeezes >= 6:
                return False
            mu = max(target_disp / 8.0, floor)
            if mu >= width:
                return False
            self._squeeze_band(lo, hi, mu)
            return self._try_move(A, B, axis, mover, phase, accept_fn,
                                  separate_only=separate_only, _squeezes=_squeezes + 1)

        t = (width + target_disp / 2.0) / r_mov
        grow, shrink = 1.6, 0.45
        for _ in range(48):
            self.budget.spend_attempt(phase)
            if t > 4.0 * t_cap or t <= 0:
                return False
            new_vals = self._candidate_flow(field, t)
            if not np.all(np.isfinite(new_vals)):
                t *= shrink
                continue
            if self._check_candidate(ctx, new_vals, accept_fn):
                self._apply_flow(field, t, new_vals)
                self._respread_band(ctx)
                self.budget.spend_move(phase)
                self._moves_since_renorm += 1
                self._maybe_renormalize()
                return True
            # diagnose: did the mover cross yet?
            flatc = new_vals.ravel()
            a_new = flatc[A[0] * self.size + A[1]]
            b_new = flatc[B[0] * self.size + B[1]]
            crossed = (a_new != b_new) if (separate_only and width == 0.0) else (a_new > b_new)
            t = t * (shrink if crossed else grow)
        return False

    def _make_context(self, lo: float, hi: float):
        flat = self._flat()
        order = np.argsort(flat, kind="stable")
        svals = flat[order]
        in_band = (svals >= lo) & (svals <= hi)
        outside = order[~in_band]
        out_vals = flat[outside]
        strict = np.diff(out_vals) > 0 if outside.size > 1 else np.array([], dtype=bool)
        below_mask = out_vals < lo
        above_mask = out_vals > hi
        border_lo_slot = outside[np.where(below_mask)[0][-1]] if below_mask.any() else None
        border_hi_slot = outside[np.where(above_mask)[0][0]] if above_mask.any() else None
        strict_gaps = np.diff(out_vals)
        positive = strict_gaps[strict_gaps > 0]
        room_parts = []
        if border_lo_slot is not None:
            room_parts.append(lo - flat[border_lo_slot])
        if border_hi_slot is not None:
            room_parts.append(flat[border_hi_slot] - hi)
        slack_base = positive.min() if positive.size else 1.0
        slack = min([slack_base] + room_parts) / 3.0 if room_parts else slack_base / 3.0
        if slack <= 0:
            return None
        src_flat = flat[: self.n_src * self.size]
        return {
            "outside": outside,
            "strict": strict,
            "band_slots": order[in_band],
            "border_lo_slot": border_lo_slot,
            "border_hi_slot": border_hi_slot,
            "border_lo": flat[border_lo_slot] if border_lo_slot is not None else None,
            "border_hi": flat[border_hi_slot] if border_hi_slot is not None else None,
            "border_room": min(room_parts) if room_parts else None,
            "slack": slack,
            "src_distinct_before": int(np.unique(src_flat).size),
        }

    def _squeeze_zoom(self, lo: float, hi: float, mu: float) -> PiecewiseLinearFn:
        """Increasing zoom mapping [lo, hi] onto [lo, lo+mu], identity far away.

        Moves apply this as a conjugation (squeeze, flow, exact unsqueeze), so
        the compression is always paired with its own inverse; that keeps the
        recorded program and its inverse numerically well conditioned, and the
        original gap scale around the swapped pair is restored for free.
        """
        flat = self._flat()
        above = flat[flat > hi]
        pairs = [(lo, lo), (hi, lo + mu)]
        if above.size:
            nxt = float(above.min())
            pairs.append((nxt, nxt))
        else:
            pairs.append((hi + 1.0, lo + mu + 1.0))
        return PiecewiseLinearFn.from_pairs(pairs, monotone=True)

    def _attempt(self, thunk) -> bool:
        """Run a move attempt transactionally: failed attempts leave no trace.

        Orphaned squeeze zooms from failed attempts would otherwise stack up
        as unpaired compressions and ruin the conditioning of the program.
        """
        mark = len(self.segments)
        saved = self.vals.copy()
        if thunk():
            return True
        del self.segments[mark:]
        self.vals = saved
        return False

    def _ordering_move(self, A, B, phase: str, accept_fn, separate_only=False) -> bool:
        """Try every gate (axis x mover) for the pair; renormalize once and retry."""
        for attempt in range(2):
            for axis in self.axes:
                for mover in ("A", "B"):
                    if self._attempt(lambda: self._try_move(
                            A, B, axis, mover, phase, accept_fn,
                            separate_only=separate_only)):
                        return True
            if attempt == 0:
                self._renormalize()
        return False

    # -- tie separation ----------------------------------------------------
    def _source_tie_groups(self):
        flat = self._flat()[: self.n_src * self.size]
        uniq, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
        groups = []
        for g in np.where(counts > 1)[0]:
            slots = np.where(inverse == g)[0]
            groups.append([(int(s) // self.size, int(s) % self.size) for s in slots])
        return groups

    def _find_separating_pair(self, A, B):
        """Walk the common offset orbit of a coincident pair to a gate position.

        Returns (A', B', axis) where the pair is still coincident but their
        axis-neighbors differ; None when the full orbit coincides, which means
        the two points are shift images of each other.
        """
        pA, _ = A
        pB, _ = B
        start = (A[1], B[1])
        seen = {start}
        queue = [start]
        while queue:
            ca, cb = queue.pop(0)
            if self.vals[pA, ca] != self.vals[pB, cb]:
                continue
            for axis in self.axes:
                na, nb = int(self.perms[axis][ca]), int(self.perms[axis][cb])
                if self.vals[pA, na] != self.vals[pB, nb]:
                    return (pA, ca), (pB, cb), axis
                if (na, nb) not in seen:
                    seen.add((na, nb))
                    queue.append((na, nb))
        return None

    def phase_ties(self):
        """Separate coincident source coordinate values (count strictly decreases)."""
        while True:
            groups = self._source_tie_groups()
            if not groups:
                return
            progressed = False
            for group in groups:
                for i in range(1, len(group)):
                    found = self._find_separating_pair(group[0], group[i])
                    if found is None:
                        continue
                    A2, B2, axis = found

                    def separated(new_flat, a=A2, b=B2):
                        return new_flat[a[0] * self.size + a[1]] != new_flat[b[0] * self.size + b[1]]

                    before = self._tie_count()
                    for mover in ("A", "B"):
                        if self._attempt(lambda m=mover: self._try_move(
                                A2, B2, axis, m, "ties", separated,
                                separate_only=True)):
                            progressed = True
                            break
                    if progressed and self._tie_count() >= before:
                        raise BudgetExhaustedError("ties", "(tie count failed to decrease)")
                    if progressed:
                        break
                if progressed:
                    break
            if not progressed:
                raise SourcesNotDistinctError(
                    "coincident coordinates cannot be separated; "
                    "two source points are shift images of each other or a source is a stabilizer")

    def _tie_count(self) -> int:
        flat = self._flat()[: self.n_src * self.size]
        _, counts = np.unique(flat, return_counts=True)
        return int(sum(c * (c - 1) // 2 for c in counts if c > 1))

    # -- block ordering (earlier points above later ones) ------------------
    def _block_violation(self, j: int):
        vj = self.vals[j]
        lower = self.vals[j + 1: self.n_src]
        if lower.size == 0 or float(vj.min()) > float(lower.max()):
            return None
        all_v = np.concatenate([vj.ravel(), lower.ravel()])
        labels = np.concatenate([np.zeros(self.size, dtype=int),
                                 np.ones(lower.size, dtype=int)])
        order = np.argsort(all_v, kind="stable")
        sv, sl = all_v[order], labels[order]
        best = None
        for i in range(sv.size - 1):
            if sl[i] == 0 and sl[i + 1] == 1:
                gap = sv[i + 1] - sv[i]
                if best is None or gap < best[0]:
                    best = (gap, order[i], order[i + 1])
        if best is None:
            return None
        _, ia, ib = best
        slot_a = (j, int(ia))
        k = int(ib) - self.size
        slot_b = (j + 1 + k // self.size, k % self.size)
        return slot_a, slot_b

    def _lift_block(self, j: int):
        """Raise point j's value band well above everything below it."""
        bj = self.vals[j]
        lo_b, hi_b = float(bj.min()), float(bj.max())
        flat = self._flat()
        below = flat[flat < lo_b]
        anchor = float(below.max()) if below.size else lo_b - 3.0
        a = anchor + 3.0
        pairs = [(lo_b, a - 1.0), (hi_b, a + 1.0)]
        if below.size:
            pairs.insert(0, (anchor, anchor))
        above = flat[flat > hi_b]
        if above.size:
            u_min, u_max = float(above.min()), float(above.max())
            y0 = max(a + 2.0, u_min)
            pairs.append((u_min, y0))
            if u_max > u_min:
                pairs.append((u_max, y0 + (u_max - u_min)))
        self._apply_zoom(PiecewiseLinearFn.from_pairs(pairs, monotone=True))

    def phase_blocks(self):
        for j in range(self.n_src):
            while True:
                pair = self._block_violation(j)
                if pair is None:
                    break
                A, B = pair

                def a_above_b(new_flat, a=A, b=B):
                    return new_flat[a[0] * self.size + a[1]] > new_flat[b[0] * self.size + b[1]]

                if not self._ordering_move(A, B, "blocks", a_above_b):
                    raise BudgetExhaustedError("blocks", f"(stuck on pair {A} vs {B})")
            if j < self.n_src - 1:
                self._lift_block(j)

    # -- lexicographic ordering inside each point ---------------------------
    def _lex_violation(self, j: int):
        v = self.vals[j]
        order = np.argsort(v, kind="stable")
        sv = v[order]
        best = None
        for i in range(sv.size - 1):
            if order[i] < order[i + 1]:  # lower value at an earlier lex position
                gap = sv[i + 1] - sv[i]
                if best is None or gap < best[0]:
                    best = (gap, int(order[i]), int(order[i + 1]))
        if best is None:
            return None
        _, ca, cb = best
        return (j, ca), (j, cb)

    def phase_lex(self):
        for j in range(self.n_src):
            while True:
                pair = self._lex_violation(j)
                if pair is None:
                    break
                A, B = pair

                def a_above_b(new_flat, a=A, b=B):
                    return new_flat[a[0] * self.size + a[1]] > new_flat[b[0] * self.size + b[1]]

                if not self._ordering_move(A, B, "lex", a_above_b):
                    raise BudgetExhaustedError("lex", f"(stuck on pair {A} vs {B})")

    # -- stabilizer demotion -------------------------------------------------
    def _stab_violation(self):
        if self.n_stab == 0:
            return None
        src = self._flat()[: self.n_src * self.size]
        stab = self._flat()[self.n_src * self.size:]
        if src.size == 0 or float(src.min()) > float(stab.max()):
            return None
        # exact ties first
        for si, sval in enumerate(stab):
            hits = np.where(src == sval)[0]
            if hits.size:
                a = (int(hits[0]) // self.size, int(hits[0]) % self.size)
                b = (self.n_src + si // self.size, si % self.size)
                return a, b, True
        all_v = np.concatenate([src, stab])
        labels = np.concatenate([np.zeros(src.size, dtype=int), np.ones(stab.size, dtype=int)])
        order = np.argsort(all_v, kind="stable")
        sv, sl = all_v[order], labels[order]
        best = None
        for i in range(sv.size - 1):
            if sl[i] == 0 and sl[i + 1] == 1 and sv[i + 1] > sv[i]:
                gap = sv[i + 1] - sv[i]
                if best is None or gap < best[0]:
                    best = (gap, order[i], order[i + 1])
        if best is None:
            return None
        _, ia, ib = best
        a = (int(ia) // self.size, int(ia) % self.size)
        k = int(ib) - src.size
        b = (self.n_src + k // self.size, k % self.size)
        return a, b, False

    def phase_stabilizers(self):
        while True:
            found = self._stab_violation()
            if found is None:
                return
            A, B, tied = found

            def a_above_b(new_flat, a=A, b=B):
                return new_flat[a[0] * self.size + a[1]] > new_flat[b[0] * self.size + b[1]]

            if tied:
                walked = self._find_separating_pair(A, B)
                if walked is None:
                    raise SourcesNotDistinctError(
                        "a source point is a shift image of a stabilizer")
                A2, B2, axis = walked

                def a2_above_b2(new_flat, a=A2, b=B2):
                    return new_flat[a[0] * self.size + a[1]] > new_flat[b[0] * self.size + b[1]]

                moved = False
                for mover in ("A", "B"):
                    if self._attempt(lambda m=mover: self._try_move(
                            A2, B2, axis, m, "stabilizers", a2_above_b2,
                            separate_only=True)):
                        moved = True
                        break
                if not moved:
                    self._renormalize()
                    for axis2 in self.axes:
                        for mover in ("A", "B"):
                            if self._attempt(lambda a2=axis2, m=mover: self._try_move(
                                    A2, B2, a2, m, "stabilizers", a2_above_b2,
                                    separate_only=True)):
                                moved = True
                                break
                        if moved:
                            break
                if not moved:
                    raise BudgetExhaustedError("stabilizers", f"(tied pair {A2} vs {B2})")
            else:
                if not self._ordering_move(A, B, "stabilizers", a_above_b):
                    raise BudgetExhaustedError("stabilizers", f"(stuck on pair {A} vs {B})")

    # -- driver ---------------------------------------------------------------
    def run_all_phases(self):
        self.phase_ties()
        self.phase_blocks()
        self.phase_lex()
        self.phase_stabilizers()

    def source_values(self) -> np.ndarray:
        return self.vals[: self.n_src].copy()

    def stab_values(self) -> np.ndarray:
        return self.vals[self.n_src:].copy()
