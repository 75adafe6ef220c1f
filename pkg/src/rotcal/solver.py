"""Damped nonlinear least-squares (Levenberg-Marquardt) engine.

The problems in this package share one shape: many small residual chunks
(one per feature observation), each depending on a handful of parameter
blocks. To keep pure-Python overhead off the hot path, residuals are grouped:
a ResidualGroup evaluates all of its chunks in one vectorized call and returns
stacked residuals and Jacobians. A classic one-residual problem is simply a
group with a single chunk.

Parameter blocks come in three kinds:

- "euclidean": plain vector, optional per-entry box bounds enforced by
  projection after every step;
- "rotation-tangent": a unit quaternion (wxyz) updated through a 3-parameter
  right-multiplied tangent increment and renormalized after every update
  (Jacobians must be expressed w.r.t. that tangent);
- "fixed": held constant, excluded from the unknowns.

Blocks flagged ``eliminate`` (feature/landmark blocks that appear in exactly
one chunk each) are removed from the normal equations by a Schur complement,
so the dense solve only covers camera-sized blocks.

Total cost is 0.5 * sum over chunks of rho(||r_chunk||^2), rho being the
chunk's robust loss (identity when no loss is attached). Accepted steps never
increase this cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from .rotation import quat_apply_tangent

EUCLIDEAN = "euclidean"
ROTATION_TANGENT = "rotation-tangent"
FIXED = "fixed"

_DIAG_MIN = 1e-10
_DIAG_MAX = 1e32


class SolverError(RuntimeError):
    pass


class ParameterBlock:
    """One optimization variable: a vector with a kind and optional bounds."""

    __slots__ = ("values", "kind", "lower", "upper", "eliminate", "name")

    def __init__(self, values, kind: str = EUCLIDEAN, lower=None, upper=None,
                 eliminate: bool = False, name: str = ""):
        self.values = np.array(values, dtype=float).ravel()
        if kind not in (EUCLIDEAN, ROTATION_TANGENT, FIXED):
            raise ValueError(f"unknown block kind {kind!r}")
        if kind == ROTATION_TANGENT and self.values.size != 4:
            raise ValueError("rotation-tangent blocks store a wxyz quaternion")
        self.kind = kind
        self.lower = None if lower is None else np.broadcast_to(np.asarray(lower, float), self.values.shape).copy()
        self.upper = None if upper is None else np.broadcast_to(np.asarray(upper, float), self.values.shape).copy()
        self.eliminate = eliminate
        self.name = name

    @property
    def local_size(self) -> int:
        if self.kind == FIXED:
            return 0
        if self.kind == ROTATION_TANGENT:
            return 3
        return self.values.size

    def apply_step(self, delta: np.ndarray) -> None:
        if self.kind == FIXED:
            return
        if self.kind == ROTATION_TANGENT:
            self.values = quat_apply_tangent(self.values, delta)
            return
        self.values = self.values + delta
        if self.lower is not None:
            np.maximum(self.values, self.lower, out=self.values)
        if self.upper is not None:
            np.minimum(self.values, self.upper, out=self.values)

    def __repr__(self):
        return f"ParameterBlock({self.name or self.kind}, n={self.values.size})"


# ---------------------------------------------------------------------------
# Robust losses
# ---------------------------------------------------------------------------


def robust_loss_eval(kind: str, scale: float, squared_norm):
    """Evaluate rho(s) and rho'(s) for s = squared residual norm.

    "trivial": rho(s) = s. "huber" with delta = scale: rho(s) = s inside
    delta^2, else 2*delta*sqrt(s) - delta^2; the derivative is continuous.
    Accepts scalars or arrays.
    """
    s = np.asarray(squared_norm, dtype=float)
    if np.any(s < 0):
        raise ValueError("squared norm must be >= 0")
    if kind == "trivial":
        rho = s
        drho = np.ones_like(s)
    elif kind == "huber":
        if scale <= 0:
            raise ValueError("huber scale must be positive")
        d2 = scale * scale
        big = s > d2
        root = np.sqrt(np.where(big, s, d2))
        rho = np.where(big, 2.0 * scale * root - d2, s)
        drho = np.where(big, scale / root, 1.0)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    if np.isscalar(squared_norm):
        return float(rho), float(drho)
    return rho, drho


@dataclass(frozen=True)
class Loss:
    kind: str = "trivial"
    scale: float = 1.0

    def __call__(self, squared_norm):
        return robust_loss_eval(self.kind, self.scale, squared_norm)


TRIVIAL_LOSS = Loss("trivial")


def huber(scale: float) -> Loss:
    return Loss("huber", scale)


# ---------------------------------------------------------------------------
# Residual groups and problems
# ---------------------------------------------------------------------------


class ResidualGroup:
    """A batch of identically-structured residual chunks.

    fn(shared_values, chunk_values, want_jac) must return
      res:        (n_chunks, chunk_dim)
      jac_shared: list parallel to shared blocks, entries (n_chunks, chunk_dim,
                  local_size) -- or None when want_jac is false
      jac_chunk:  (n_chunks, chunk_dim, chunk_local) or None
    chunk_values is an (n_chunks, k) array stacking the per-chunk block values
    (None when the group has no per-chunk blocks). Chunk residual k may depend
    only on chunk block k; the robust loss is applied per chunk.
    """

    __slots__ = ("fn", "shared", "chunk_blocks", "n_chunks", "chunk_dim", "loss", "name")

    def __init__(self, fn: Callable, shared: Sequence[ParameterBlock],
                 chunk_blocks: Optional[Sequence[ParameterBlock]] = None,
                 n_chunks: int = 1, chunk_dim: int = 1,
                 loss: Optional[Loss] = None, name: str = ""):
        self.fn = fn
        self.shared = tuple(shared)
        self.chunk_blocks = None if chunk_blocks is None else list(chunk_blocks)
        if self.chunk_blocks is not None and len(self.chunk_blocks) != n_chunks:
            raise ValueError("need exactly one chunk block per chunk")
        self.n_chunks = n_chunks
        self.chunk_dim = chunk_dim
        self.loss = loss or TRIVIAL_LOSS
        self.name = name

    def shared_values(self):
        return [b.values for b in self.shared]

    def chunk_values(self):
        if self.chunk_blocks is None:
            return None
        return np.stack([b.values for b in self.chunk_blocks])

    def evaluate(self, want_jac: bool):
        res, js, jc = self.fn(self.shared_values(), self.chunk_values(), want_jac)
        res = np.asarray(res, dtype=float).reshape(self.n_chunks, self.chunk_dim)
        return res, js, jc


class Problem:
    def __init__(self):
        self.groups: list[ResidualGroup] = []

    def add_group(self, fn, shared, chunk_blocks=None, n_chunks=1, chunk_dim=1,
                  loss=None, name="") -> ResidualGroup:
        g = ResidualGroup(fn, shared, chunk_blocks, n_chunks, chunk_dim, loss, name)
        self.groups.append(g)
        return g

    def add_residual(self, fn, params, dim, loss=None, name="") -> ResidualGroup:
        """Single-chunk convenience: fn(*values, want_jac) -> (res (dim,), jacs)."""

        def adapter(shared_values, _chunk, want_jac):
            res, jacs = fn(*shared_values, want_jac)
            res = np.asarray(res, dtype=float).reshape(1, dim)
            if not want_jac:
                return res, None, None
            js = [np.asarray(j, dtype=float).reshape(1, dim, -1) for j in jacs]
            return res, js, None

        return self.add_group(adapter, params, None, 1, dim, loss, name)

    def parameter_blocks(self) -> list[ParameterBlock]:
        seen: dict[int, ParameterBlock] = {}
        for g in self.groups:
            for b in g.shared:
                seen.setdefault(id(b), b)
            if g.chunk_blocks is not None:
                for b in g.chunk_blocks:
                    seen.setdefault(id(b), b)
        return list(seen.values())


@dataclass
class SolverOptions:
    max_iterations: int = 100
    function_tolerance: float = 1e-10
    gradient_tolerance: float = 1e-12
    init_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    min_lambda: float = 1e-18
    max_lambda: float = 1e12
    huber_delta_px: float = 4.0   # consumed by callers when building losses
    verbose: bool = False


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str  # "converged" | "max-iter" | "failure"
    message: str = ""

    @property
    def success(self) -> bool:
        return self.termination != "failure"


# ---------------------------------------------------------------------------
# Core solve
# ---------------------------------------------------------------------------


def _total_cost(groups: Sequence[ResidualGroup]) -> float:
    total = 0.0
    for g in groups:
        res, _, _ = g.evaluate(want_jac=False)
        if not np.all(np.isfinite(res)):
            return np.inf
        s = np.einsum("ij,ij->i", res, res)
        rho, _ = g.loss(s)
        total += 0.5 * float(np.sum(rho))
    return total


class _Structure:
    """Index layout: reduced (dense) blocks vs Schur-eliminated blocks."""

    def __init__(self, blocks: Sequence[ParameterBlock]):
        self.reduced: list[ParameterBlock] = []
        self.elim: list[ParameterBlock] = []
        self.offset: dict[int, int] = {}
        self.elim_index: dict[int, int] = {}
        p = 0
        for b in blocks:
            if b.kind == FIXED:
                continue
            if b.eliminate:
                self.elim_index[id(b)] = len(self.elim)
                self.elim.append(b)
            else:
                self.offset[id(b)] = p
                self.reduced.append(b)
                p += b.local_size
        self.reduced_size = p
        if self.elim:
            sizes = {b.local_size for b in self.elim}
            if len(sizes) != 1:
                raise SolverError("eliminated blocks must share one local size")
            self.elim_local = sizes.pop()
        else:
            self.elim_local = 0


def _assemble(groups, st: _Structure):
    """Build the damped-normal-equation ingredients at the current point.

    Returns (cost, H (P,P), g (P,), U (L,P,e), Hll (L,e,e), gl (L,e)) where the
    U/Hll/gl parts are empty when nothing is eliminated. Raises SolverError on
    non-finite residuals or Jacobians.
    """
    P = st.reduced_size
    L = len(st.elim)
    e = st.elim_local
    H = np.zeros((P, P))
    g = np.zeros(P)
    U = np.zeros((L, P, e)) if L else np.zeros((0, P, max(e, 1)))
    Hll = np.zeros((L, e, e))
    gl = np.zeros((L, e))
    cost = 0.0

    for grp in groups:
        res, js, jc = grp.evaluate(want_jac=True)
        if not np.all(np.isfinite(res)):
            raise SolverError(f"non-finite residual in group {grp.name!r}")
        s = np.einsum("ij,ij->i", res, res)
        rho, w = grp.loss(s)
        cost += 0.5 * float(np.sum(rho))
        sw = np.sqrt(w)[:, None]
        r_w = res * sw

        # concatenate the free shared-block Jacobians into one (n, d, ps) array
        cols = []
        jpieces = []
        for b, j in zip(grp.shared, js):
            if b.kind == FIXED or b.eliminate:
                if b.eliminate:
                    raise SolverError("eliminated blocks may only appear as chunk blocks")
                continue
            j = np.asarray(j, dtype=float)
            if not np.all(np.isfinite(j)):
                raise SolverError(f"non-finite Jacobian in group {grp.name!r}")
            off = st.offset[id(b)]
            cols.extend(range(off, off + b.local_size))
            jpieces.append(j)
        if jpieces:
            Jsh = np.concatenate(jpieces, axis=2) * sw[:, :, None]
            cols = np.asarray(cols, dtype=int)
            Hg = np.einsum("nia,nib->ab", Jsh, Jsh)
            H[np.ix_(cols, cols)] += Hg
            g[cols] += np.einsum("nia,ni->a", Jsh, r_w)
        else:
            Jsh = None
            cols = np.zeros(0, dtype=int)

        if grp.chunk_blocks is not None and jc is not None:
            first = grp.chunk_blocks[0]
            if first.kind == FIXED:
                continue
            jc = np.asarray(jc, dtype=float) * sw[:, :, None]
            if not np.all(np.isfinite(jc)):
                raise SolverError(f"non-finite chunk Jacobian in group {grp.name!r}")
            if not first.eliminate:
                # rare path: chunk blocks solved densely
                for k, b in enumerate(grp.chunk_blocks):
                    off = st.offset[id(b)]
                    sl = slice(off, off + b.local_size)
                    H[sl, sl] += jc[k].T @ jc[k]
                    g[sl.start:sl.stop] += jc[k].T @ r_w[k]
                    if Jsh is not None:
                        W = Jsh[k].T @ jc[k]
                        H[np.ix_(cols, range(sl.start, sl.stop))] += W
                        H[np.ix_(range(sl.start, sl.stop), cols)] += W.T
                continue
            idx = np.fromiter((st.elim_index[id(b)] for b in grp.chunk_blocks),
                              dtype=int, count=grp.n_chunks)
            np.add.at(Hll, idx, np.einsum("nia,nib->nab", jc, jc))
            np.add.at(gl, idx, np.einsum("nia,ni->na", jc, r_w))
            if Jsh is not None:
                Wk = np.einsum("nia,nib->nab", Jsh, jc)  # (n, ps, e)
                Ug = np.zeros((L, len(cols), st.elim_local))
                np.add.at(Ug, idx, Wk)
                U[:, cols, :] += Ug
    return cost, H, g, U, Hll, gl


def _try_step(H, g, U, Hll, gl, lam):
    """Solve the lambda-damped system; returns per-block deltas or None."""
    P = H.shape[0]
    D = np.clip(np.diag(H), _DIAG_MIN, _DIAG_MAX)
    A = H + lam * np.diag(D)
    L = Hll.shape[0]
    if L:
        e = Hll.shape[1]
        Dl = np.clip(Hll[:, np.arange(e), np.arange(e)], _DIAG_MIN, _DIAG_MAX)
        Hll_d = Hll.copy()
        Hll_d[:, np.arange(e), np.arange(e)] += lam * Dl
        try:
            B = np.linalg.inv(Hll_d)
        except np.linalg.LinAlgError:
            return None
        V = np.einsum("lpa,lab->lpb", U, B)
        Vr = V.transpose(1, 0, 2).reshape(P, L * e)
        Ur = U.transpose(1, 0, 2).reshape(P, L * e)
        A = A - Vr @ Ur.T
        rhs = -g + np.einsum("lpb,lb->p", V, gl)
    else:
        B = None
        rhs = -g
    try:
        c, low = scipy.linalg.cho_factor(A, check_finite=False)
        dx = scipy.linalg.cho_solve((c, low), rhs, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
        return None
    if not np.all(np.isfinite(dx)):
        return None
    if L:
        dl = -np.einsum("lab,lb->la", B, gl + np.einsum("lpa,p->la", U, dx))
        if not np.all(np.isfinite(dl)):
            return None
    else:
        dl = None
    return dx, dl


def solve(problem: Problem, options: Optional[SolverOptions] = None) -> SolveReport:
    """Minimize the robustified cost over the problem's free blocks."""
    opts = options or SolverOptions()
    blocks = problem.parameter_blocks()
    st = _Structure(blocks)
    free = st.reduced + st.elim
    if not free:
        return SolveReport(np.nan, np.nan, 0, "failure", "no free parameter blocks")
    residual_total = sum(g.n_chunks * g.chunk_dim for g in problem.groups)
    unknown_total = sum(b.local_size for b in free)
    if residual_total < unknown_total:
        return SolveReport(np.nan, np.nan, 0, "failure",
                           f"under-determined: {residual_total} residuals for {unknown_total} unknowns")

    cost = _total_cost(problem.groups)
    if not np.isfinite(cost):
        return SolveReport(np.inf, np.inf, 0, "failure", "non-finite residual at initial point")
    initial_cost = cost
    lam = opts.init_lambda
    iterations = 0

    def snapshot():
        return [b.values.copy() for b in free]

    def restore(vals):
        for b, v in zip(free, vals):
            b.values = v

    for _ in range(opts.max_iterations):
        try:
            cost_j, H, g, U, Hll, gl = _assemble(problem.groups, st)
        except SolverError as exc:
            return SolveReport(initial_cost, cost, iterations, "failure", str(exc))
        cost = cost_j
        gmax = np.abs(g).max(initial=0.0)
        if gl.size:
            gmax = max(gmax, np.abs(gl).max())
        if gmax < opts.gradient_tolerance:
            return SolveReport(initial_cost, cost, iterations, "converged",
                               f"gradient max-norm {gmax:.3e}")

        saved = snapshot()
        accepted = False
        while lam <= opts.max_lambda:
            step = _try_step(H, g, U, Hll, gl, lam)
            if step is not None:
                dx, dl = step
                for b in st.reduced:
                    off = st.offset[id(b)]
                    b.apply_step(dx[off:off + b.local_size])
                if dl is not None:
                    for i, b in enumerate(st.elim):
                        b.apply_step(dl[i])
                new_cost = _total_cost(problem.groups)
                if np.isfinite(new_cost) and new_cost < cost:
                    accepted = True
                    lam = max(lam * opts.lambda_down, opts.min_lambda)
                    break
                restore(saved)
            lam *= opts.lambda_up
        if not accepted:
            return SolveReport(initial_cost, cost, iterations, "converged",
                               "no decreasing step within damping limits")
        iterations += 1
        decrease = cost - new_cost
        cost = new_cost
        if opts.verbose:
            print(f"  iter {iterations:3d}  cost {cost:.6e}  lambda {lam:.1e}")
        if decrease <= opts.function_tolerance * max(cost, 1e-300):
            return SolveReport(initial_cost, cost, iterations, "converged",
                               f"relative decrease {decrease / max(cost, 1e-300):.3e}")
    return SolveReport(initial_cost, cost, iterations, "max-iter", "iteration limit reached")


# ---------------------------------------------------------------------------
# Finite-difference Jacobian verification
# ---------------------------------------------------------------------------


def check_jacobian(group: ResidualGroup, step: float = 1e-6) -> float:
    """Worst relative deviation between analytic and central-difference Jacobians.

    Perturbations happen in the local (tangent) parameterization, stepping
    h = step * (1 + |x|) per coordinate. Deviation for an entry pair (a, b) is
    |a - b| / max(1, |a|, |b|); the maximum over all entries and blocks is
    returned. Evaluates at the blocks' current values.
    """
    res0, js, jc = group.evaluate(want_jac=True)
    worst = 0.0

    def fd_vs_analytic(plus, minus, h, analytic):
        nonlocal worst
        fd = (plus - minus) / (2.0 * h)
        denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(analytic)))
        worst = max(worst, float(np.max(np.abs(fd - analytic) / denom)))

    for bi, b in enumerate(group.shared):
        if b.kind == FIXED:
            continue
        analytic = np.asarray(js[bi], dtype=float)
        saved = b.values.copy()
        for i in range(b.local_size):
            if b.kind == ROTATION_TANGENT:
                h = step
                d = np.zeros(3)
                d[i] = h
                b.values = quat_apply_tangent(saved, d)
                rp, _, _ = group.evaluate(want_jac=False)
                b.values = quat_apply_tangent(saved, -d)
                rm, _, _ = group.evaluate(want_jac=False)
            else:
                h = step * (1.0 + abs(saved[i]))
                b.values = saved.copy()
                b.values[i] += h
                rp, _, _ = group.evaluate(want_jac=False)
                b.values = saved.copy()
                b.values[i] -= h
                rm, _, _ = group.evaluate(want_jac=False)
            b.values = saved.copy()
            fd_vs_analytic(rp, rm, h, analytic[:, :, i])

    if group.chunk_blocks is not None and jc is not None:
        analytic = np.asarray(jc, dtype=float)
        saved = [b.values.copy() for b in group.chunk_blocks]
        k = group.chunk_blocks[0].values.size
        for i in range(k):
            hs = np.array([step * (1.0 + abs(v[i])) for v in saved])
            for b, v, h in zip(group.chunk_blocks, saved, hs):
                b.values = v.copy()
                b.values[i] += h
            rp, _, _ = group.evaluate(want_jac=False)
            for b, v, h in zip(group.chunk_blocks, saved, hs):
                b.values = v.copy()
                b.values[i] -= h
            rm, _, _ = group.evaluate(want_jac=False)
            for b, v in zip(group.chunk_blocks, saved):
                b.values = v.copy()
            fd = (rp - rm) / (2.0 * hs[:, None])
            an = analytic[:, :, i]
            denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(an)))
            worst = max(worst, float(np.max(np.abs(fd - an) / denom)))
    return worst
