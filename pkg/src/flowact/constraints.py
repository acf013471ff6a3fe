"""State-conditioned feasible action sets: membership, violation magnitude, projection.

A ConstraintSet describes C(s) through inequality functions g_i(a, s) <= 0,
equality functions h_j(a, s) = 0, box bounds, and an integrality flag. The
built-in families cover a quadratic ball, weighted-L1 and hinge-sum budgets,
and an integer allocation simplex slab; arbitrary affine constraints can be
assembled from coefficient matrices.
"""

from __future__ import annotations

import numpy as np

# Error margin for equality constraints in the violation-magnitude measure.
EQUALITY_MARGIN = 0.1

DEFAULT_TOL = 1e-6
PROJECTION_TOL = 1e-6


class ProjectionError(RuntimeError):
    """Projection did not converge; carries the best feasible iterate found."""

    def __init__(self, message, best_feasible=None):
        super().__init__(message)
        self.best_feasible = best_feasible


class ConstraintSet:
    """Base class; subclasses supply vectorized constraint values and a projection.

    All operations are pure and instances are immutable after construction,
    so a single ConstraintSet may be shared freely across threads.
    """

    dim: int
    integral: bool = False

    def __init__(self, dim, lower, upper, integral=False):
        self.dim = int(dim)
        self.lower = np.broadcast_to(np.asarray(lower, dtype=np.float64), (self.dim,)).copy()
        self.upper = np.broadcast_to(np.asarray(upper, dtype=np.float64), (self.dim,)).copy()
        self.integral = bool(integral)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    # Subclasses return (n, m) / (n, k) arrays; m or k may be zero.
    def ineq_values(self, actions):
        return np.zeros((actions.shape[0], 0))

    def eq_values(self, actions):
        return np.zeros((actions.shape[0], 0))

    def feasible_point(self):
        """A point that is guaranteed feasible (used as sampler start)."""
        raise NotImplementedError

    def default_tol(self):
        return 0.0 if self.integral else DEFAULT_TOL

    def _as_batch(self, a):
        a = np.asarray(a, dtype=np.float64)
        single = a.ndim == 1
        if single:
            a = a[None, :]
        if a.shape[1] != self.dim:
            raise ValueError(f"action dimension {a.shape[1]} != constraint dimension {self.dim}")
        return a, single

    def decode_action(self, x):
        """Map a continuous proposal onto the action lattice (integer sets).

        The default is componentwise rounding; constraint families with
        equality structure override this with rounding in a unimodular basis
        adapted to the equality, which keeps coordinate-level rounding noise
        from scrambling the constrained linear form. Continuous sets return
        the input unchanged. The decoder is not a projector: a badly placed
        proposal still decodes to an infeasible action.
        """
        if not self.integral:
            return x
        return np.rint(x)

    def is_feasible(self, a, s=None, tol=None):
        """Feasibility test; batched input gives a boolean array."""
        batch, single = self._as_batch(a)
        if tol is None:
            tol = self.default_tol()
        ok = np.all(batch >= self.lower - tol, axis=1)
        ok &= np.all(batch <= self.upper + tol, axis=1)
        if self.integral:
            ok &= np.all(np.abs(batch - np.rint(batch)) <= tol, axis=1)
        g = self.ineq_values(batch)
        if g.shape[1]:
            ok &= np.all(g <= tol, axis=1)
        h = self.eq_values(batch)
        if h.shape[1]:
            ok &= np.all(np.abs(h) <= tol, axis=1)
        return bool(ok[0]) if single else ok

    def violation_magnitude(self, a, s=None):
        """Hinge losses of inequalities plus margin-excess of equalities.

        Box bounds count as inequalities; integrality is not penalized (this
        is a continuous nearness measure). Batched input gives an array.
        """
        batch, single = self._as_batch(a)
        cv = np.maximum(self.lower - batch, 0.0).sum(axis=1)
        cv += np.maximum(batch - self.upper, 0.0).sum(axis=1)
        g = self.ineq_values(batch)
        if g.shape[1]:
            cv += np.maximum(g, 0.0).sum(axis=1)
        h = self.eq_values(batch)
        if h.shape[1]:
            cv += np.maximum(np.abs(h) - EQUALITY_MARGIN, 0.0).sum(axis=1)
        return float(cv[0]) if single else cv

    def project(self, a, s=None):
        """Feasible point nearest to a (Euclidean, exact or within solver tolerance)."""
        raise NotImplementedError


class BoxOnly(ConstraintSet):
    """Nothing beyond the box bounds (and optional integrality)."""

    def feasible_point(self):
        return 0.5 * (self.lower + self.upper)

    def project(self, a, s=None):
        batch, single = self._as_batch(a)
        out = np.clip(batch, self.lower, self.upper)
        if self.integral:
            out = np.rint(out)
        return out[0] if single else out


class Ball(ConstraintSet):
    """Quadratic constraint a_1^2 + ... + a_D^2 <= radius_sq inside a box."""

    def __init__(self, radius_sq, dim=2, box=1.0):
        if radius_sq <= 0:
            raise ValueError("radius_sq must be positive")
        if np.sqrt(radius_sq) > abs(box):
            raise ValueError("ball must be contained in the box for exact projection")
        super().__init__(dim, -abs(box), abs(box))
        self.radius_sq = float(radius_sq)

    def ineq_values(self, actions):
        return (np.sum(actions * actions, axis=1) - self.radius_sq)[:, None]

    def feasible_point(self):
        return np.zeros(self.dim)

    def project(self, a, s=None):
        # The ball is contained in the box, so radial scaling is the exact
        # Euclidean projection onto the intersection.
        batch, single = self._as_batch(a)
        out = batch.copy()
        norms_sq = np.sum(out * out, axis=1)
        over = norms_sq > self.radius_sq
        if np.any(over):
            scale = np.sqrt(self.radius_sq / norms_sq[over])
            out[over] *= scale[:, None]
            # Float rounding can leave the squared norm a few ulp above the
            # bound; nudge inward until the hinge is exactly zero.
            for _ in range(4):
                still = np.sum(out * out, axis=1) > self.radius_sq
                if not np.any(still):
                    break
                out[still] *= 1.0 - 1e-15
        return out[0] if single else out


class WeightedL1(ConstraintSet):
    """sum_i |a_i * w_i| <= limit, actions boxed to [-1, 1]^D."""

    def __init__(self, limit, weights):
        weights = np.asarray(weights, dtype=np.float64)
        super().__init__(weights.size, -1.0, 1.0)
        if limit <= 0:
            raise ValueError("limit must be positive")
        self.limit = float(limit)
        self.weights = weights

    def ineq_values(self, actions):
        return (np.sum(np.abs(actions * self.weights), axis=1) - self.limit)[:, None]

    def feasible_point(self):
        return np.zeros(self.dim)

    def _project_budget(self, a):
        # Projection onto {x : sum w'_i |x_i| <= L} by soft-thresholding with a
        # bisected multiplier (w' = |w|); zero-weight coordinates are free.
        w = np.abs(self.weights)
        if np.sum(w * np.abs(a)) <= self.limit:
            return a.copy()
        lo, hi = 0.0, float(np.max(np.abs(a) / np.maximum(w, 1e-300)))
        for _ in range(200):
            lam = 0.5 * (lo + hi)
            x = np.sign(a) * np.maximum(np.abs(a) - lam * w, 0.0)
            if np.sum(w * np.abs(x)) > self.limit:
                lo = lam
            else:
                hi = lam
        return np.sign(a) * np.maximum(np.abs(a) - hi * w, 0.0)

    def project(self, a, s=None):
        return _dykstra_box_and_set(self, a, self._project_budget, self._shrink_to_budget)

    def _shrink_to_budget(self, x):
        total = np.sum(np.abs(x * self.weights))
        if total > self.limit:
            x = x * (self.limit / total)
        return x


class HingeSum(ConstraintSet):
    """sum_i max(w_i * a_i, 0) <= limit, actions boxed to [-1, 1]^D."""

    def __init__(self, limit, weights):
        weights = np.asarray(weights, dtype=np.float64)
        super().__init__(weights.size, -1.0, 1.0)
        if limit <= 0:
            raise ValueError("limit must be positive")
        self.limit = float(limit)
        self.weights = weights

    def ineq_values(self, actions):
        return (np.sum(np.maximum(actions * self.weights, 0.0), axis=1) - self.limit)[:, None]

    def feasible_point(self):
        return np.zeros(self.dim)

    def _hinge_total(self, x):
        return np.sum(np.maximum(x * self.weights, 0.0))

    def _project_budget(self, a):
        # prox of lam * sum max(w x, 0): per-coordinate piecewise solution,
        # with lam bisected until the budget is met.
        w = self.weights
        if self._hinge_total(a) <= self.limit:
            return a.copy()

        def prox(lam):
            x = a.copy()
            active = a * w > 0
            shifted = a - lam * w
            crossed = active & (shifted * w <= 0)
            x[active] = shifted[active]
            x[crossed] = 0.0
            return x

        lo, hi = 0.0, 1.0
        while self._hinge_total(prox(hi)) > self.limit:
            hi *= 2.0
            if hi > 1e12:
                raise ProjectionError("hinge projection multiplier diverged")
        for _ in range(200):
            lam = 0.5 * (lo + hi)
            if self._hinge_total(prox(lam)) > self.limit:
                lo = lam
            else:
                hi = lam
        return prox(hi)

    def project(self, a, s=None):
        return _dykstra_box_and_set(self, a, self._project_budget, self._shrink_to_budget)

    def _shrink_to_budget(self, x):
        total = self._hinge_total(x)
        if total > self.limit:
            x = x * (self.limit / total)
        return x


def _dykstra_box_and_set(cs, a, project_set, shrink, max_iter=500):
    """Dykstra alternating projections between the box and one convex set.

    Both target sets contain 0 strictly, so after convergence a final shrink
    toward 0 plus a box clip makes the result exactly feasible.
    """
    batch, single = cs._as_batch(a)
    out = np.empty_like(batch)
    for row in range(batch.shape[0]):
        x = batch[row]
        if cs.is_feasible(x):
            out[row] = x
            continue
        p = np.zeros_like(x)
        q = np.zeros_like(x)
        y = x.copy()
        converged = False
        for _ in range(max_iter):
            u = project_set(y + p)
            p = y + p - u
            y_new = np.clip(u + q, cs.lower, cs.upper)
            q = u + q - y_new
            if np.max(np.abs(y_new - y)) < 1e-12:
                y = y_new
                converged = True
                break
            y = y_new
        y = np.clip(shrink(y), cs.lower, cs.upper)
        if not converged and not cs.is_feasible(y):
            raise ProjectionError("Dykstra projection did not converge",
                                  best_feasible=np.clip(shrink(np.zeros_like(x)), cs.lower, cs.upper))
        out[row] = y
    return out[0] if single else out


class AllocEq(ConstraintSet):
    """Integer allocation: sum a_i = total, 0 <= a_i <= cap, a_i integer."""

    def __init__(self, total, cap, n):
        if n * cap < total:
            raise ValueError("capacity n*cap is below the required total")
        super().__init__(n, 0.0, cap, integral=True)
        self.total = float(total)
        self.cap = float(cap)

    def eq_values(self, actions):
        return (np.sum(actions, axis=1) - self.total)[:, None]

    def decode_action(self, x):
        """Round in the sum-first unimodular basis (Babai nearest-plane).

        Rounding every coordinate independently perturbs the sum by the sum of
        the rounding residuals, so proposals with a near-perfect total still
        decode to totals of +-1 about half the time. Instead round the total
        and all but the first coordinate, and let the first coordinate absorb
        the residual: the decoded sum then equals the rounded total exactly.
        The basis change (rows: all-ones, e2..eD) has determinant 1, so this
        is still plain rounding of an integer lattice, just in better
        coordinates; bounds and the total itself can still come out wrong.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        rest = np.rint(batch[:, 1:])
        total = np.rint(batch.sum(axis=1))
        out = np.concatenate([(total - rest.sum(axis=1))[:, None], rest], axis=1)
        return out[0] if single else out

    def feasible_point(self):
        # Equal split, corrected to integers that sum exactly to the total.
        base = np.full(self.dim, np.floor(self.total / self.dim))
        base[: int(self.total - base.sum())] += 1
        return base

    def _project_continuous(self, a):
        # Lagrangian bisection ("water-filling"): x = clip(a - tau, 0, cap)
        # with tau chosen so the components sum to the target.
        lo = np.min(a) - self.cap - 1.0
        hi = np.max(a) + 1.0
        for _ in range(100):
            tau = 0.5 * (lo + hi)
            total = np.sum(np.clip(a - tau, 0.0, self.cap))
            if total > self.total:
                lo = tau
            else:
                hi = tau
        return np.clip(a - 0.5 * (lo + hi), 0.0, self.cap)

    def _round_with_repair(self, x):
        # Round, then redistribute the residual one unit at a time, preferring
        # the coordinates whose fractional part argues hardest for the change.
        base = np.rint(x)
        base = np.clip(base, 0.0, self.cap)
        residual = int(round(self.total - base.sum()))
        frac = x - base
        if residual > 0:
            order = np.argsort(-frac)
            i = 0
            while residual > 0:
                j = order[i % self.dim]
                if base[j] < self.cap:
                    base[j] += 1
                    residual -= 1
                i += 1
        elif residual < 0:
            order = np.argsort(frac)
            i = 0
            while residual < 0:
                j = order[i % self.dim]
                if base[j] > 0:
                    base[j] -= 1
                    residual += 1
                i += 1
        return base

    def project(self, a, s=None):
        batch, single = self._as_batch(a)
        out = np.empty_like(batch)
        for row in range(batch.shape[0]):
            x = batch[row]
            if self.is_feasible(x):
                out[row] = x
                continue
            out[row] = self._round_with_repair(self._project_continuous(x))
        return out[0] if single else out


class AffineSet(ConstraintSet):
    """Affine constraints G a <= g_rhs and H a = h_rhs inside a box.

    Built from JSON coefficient matrices; projection uses Dykstra over the box
    and each half-space/hyperplane.
    """

    def __init__(self, dim, lower, upper, G=None, g_rhs=None, H=None, h_rhs=None,
                 integral=False):
        super().__init__(dim, lower, upper, integral=integral)
        self.G = np.zeros((0, self.dim)) if G is None else np.asarray(G, dtype=np.float64)
        self.g_rhs = np.zeros(0) if g_rhs is None else np.asarray(g_rhs, dtype=np.float64)
        self.H = np.zeros((0, self.dim)) if H is None else np.asarray(H, dtype=np.float64)
        self.h_rhs = np.zeros(0) if h_rhs is None else np.asarray(h_rhs, dtype=np.float64)
        if self.G.shape != (self.g_rhs.size, self.dim) or self.H.shape != (self.h_rhs.size, self.dim):
            raise ValueError("coefficient matrix shapes do not match right-hand sides")
        self._start = self._find_feasible_point()

    def ineq_values(self, actions):
        return actions @ self.G.T - self.g_rhs

    def eq_values(self, actions):
        return actions @ self.H.T - self.h_rhs

    def _find_feasible_point(self):
        center = 0.5 * (self.lower + self.upper)
        x = self._dykstra(center)
        if not self.is_feasible(x, tol=max(DEFAULT_TOL, 1e-9)):
            raise ValueError("could not locate a feasible point; set may be empty")
        return x

    def feasible_point(self):
        return self._start.copy()

    def _dykstra(self, a, max_iter=2000):
        x = np.clip(a, self.lower, self.upper)
        m = self.G.shape[0] + self.H.shape[0] + 1
        corrections = np.zeros((m, self.dim))
        for _ in range(max_iter):
            prev = x.copy()
            for k in range(m):
                y = x + corrections[k]
                if k < self.G.shape[0]:
                    row, rhs = self.G[k], self.g_rhs[k]
                    val = row @ y - rhs
                    x = y - row * (max(val, 0.0) / (row @ row)) if val > 0 else y
                elif k < self.G.shape[0] + self.H.shape[0]:
                    row, rhs = self.H[k - self.G.shape[0]], self.h_rhs[k - self.G.shape[0]]
                    x = y - row * ((row @ y - rhs) / (row @ row))
                else:
                    x = np.clip(y, self.lower, self.upper)
                corrections[k] = y - x
            if np.max(np.abs(x - prev)) < 1e-12:
                break
        return x

    def project(self, a, s=None):
        batch, single = self._as_batch(a)
        out = np.empty_like(batch)
        for row in range(batch.shape[0]):
            x = batch[row]
            if self.is_feasible(x):
                out[row] = x
                continue
            y = self._dykstra(x)
            if not self.is_feasible(y, tol=PROJECTION_TOL):
                raise ProjectionError("affine projection did not converge",
                                      best_feasible=self._start.copy())
            out[row] = y
        return out[0] if single else out


def constraint_from_config(cfg):
    """Build a ConstraintSet from a JSON-style dict (family name + parameters)."""
    if not isinstance(cfg, dict) or "family" not in cfg:
        raise ValueError("constraint config must be a dict with a 'family' key")
    family = cfg["family"]
    params = {k: v for k, v in cfg.items() if k != "family"}
    if family == "ball":
        built = Ball(params.pop("radius_sq"), dim=params.pop("dim", 2),
                     box=params.pop("box", 1.0))
    elif family == "weighted_l1":
        built = WeightedL1(params.pop("limit"), params.pop("weights"))
    elif family == "hinge_sum":
        built = HingeSum(params.pop("limit"), params.pop("weights"))
    elif family == "alloc_eq":
        built = AllocEq(params.pop("total"), params.pop("cap"), params.pop("n"))
    elif family == "box":
        built = BoxOnly(params.pop("dim"), params.pop("lower", -1.0),
                        params.pop("upper", 1.0), integral=params.pop("integral", False))
    elif family == "affine":
        built = AffineSet(params.pop("dim"), params.pop("lower", -1.0),
                          params.pop("upper", 1.0), G=params.pop("G", None),
                          g_rhs=params.pop("g_rhs", None), H=params.pop("H", None),
                          h_rhs=params.pop("h_rhs", None),
                          integral=params.pop("integral", False))
    else:
        raise ValueError(f"unknown constraint family '{family}'")
    if params:
        raise ValueError(f"unknown keys for family '{family}': {sorted(params)}")
    return built
