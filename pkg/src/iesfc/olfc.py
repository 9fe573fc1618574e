"""The optimal load-side frequency control problem.

Decision variables per bus are the frequency deviation ``omega``, the
controllable electric load ``d`` and heat load ``q``, and a virtual phase
angle ``phi``; per line, the flow ``P``. The Lagrangian used throughout the
package is

    L = sum C_e(d) + C_h(q) + 1/2 D omega^2
        + lam . (P_in - d - D omega - C P)
        + mu  . (P_in - d - Lap phi)
        + sum over every inequality g(x) <= 0 of  nu * g(x)

with all inequality multipliers ``nu >= 0``. The inequalities are the CHP
half-planes, the ``d`` box, the heat-buffer box on ``Q_in - q`` and the box on
virtual line flows ``B (phi_i - phi_j)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import cvxpy as cp
import numpy as np

from .network import NetworkTopology, PhysicalParams, build_incidence


class Infeasible(RuntimeError):
    """The constraint set of the problem is empty."""


class NonConvergence(RuntimeError):
    pass


class QuadraticCost:
    """Separable cost ``a/2 x^2 + b x`` evaluated elementwise over buses.

    This is the default ``CostFunction``: any replacement must provide the
    same methods (value, grad, hess, inverse_grad, cvx) and a strong
    convexity bound.
    """

    def __init__(self, a, b=0.0):
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.broadcast_to(np.asarray(b, dtype=float), a.shape).copy()
        self.a = a
        self.b = b

    def __len__(self):
        return len(self.a)

    def __repr__(self):
        return f"QuadraticCost(a={self.a.tolist()}, b={self.b.tolist()})"

    def value(self, x):
        return 0.5 * self.a * x**2 + self.b * x

    def grad(self, x):
        return self.a * x + self.b

    def hess(self, x=None):
        return self.a.copy()

    def inverse_grad(self, y):
        return (y - self.b) / self.a

    def cvx(self, x):
        return cp.sum(cp.multiply(0.5 * self.a, cp.square(x)) + cp.multiply(self.b, x))

    def scaled(self, c: float) -> "QuadraticCost":
        return QuadraticCost(c * self.a, c * self.b)

    def strong_convexity(self, mask=None) -> float:
        a = self.a if mask is None else self.a[mask]
        return float(a.min()) if a.size else np.inf

    def lipschitz(self, mask=None) -> float:
        a = self.a if mask is None else self.a[mask]
        return float(a.max()) if a.size else 0.0


@dataclass(frozen=True)
class ChpRegion:
    """CHP operating region: ``q <= k d + b`` for each upper pair, ``q >= k d + b`` for each lower."""

    upper: tuple[tuple[float, float], ...] = ()
    lower: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "upper", tuple((float(k), float(b)) for k, b in self.upper))
        object.__setattr__(self, "lower", tuple((float(k), float(b)) for k, b in self.lower))

    @property
    def is_empty(self) -> bool:
        return not self.upper and not self.lower

    def violation(self, d: float, q: float) -> float:
        v = 0.0
        for k, b in self.upper:
            v = max(v, q - (k * d + b))
        for k, b in self.lower:
            v = max(v, (k * d + b) - q)
        return v


def chp_feasible(region: ChpRegion, d: float, q: float, tol: float = 1e-9) -> tuple[bool, float]:
    """Check ``(d, q)`` against every half-plane; returns (feasible, worst violation)."""
    v = region.violation(d, q)
    return v <= tol, v


class ChpArrays(NamedTuple):
    up_bus: np.ndarray
    up_k: np.ndarray
    up_b: np.ndarray
    lo_bus: np.ndarray
    lo_k: np.ndarray
    lo_b: np.ndarray


def _flatten_chp(regions) -> ChpArrays:
    up, lo = [], []
    for i, region in enumerate(regions):
        up += [(i, k, b) for k, b in region.upper]
        lo += [(i, k, b) for k, b in region.lower]

    def cols(rows):
        if not rows:
            return np.zeros(0, dtype=int), np.zeros(0), np.zeros(0)
        a = np.array(rows, dtype=float)
        return a[:, 0].astype(int), a[:, 1], a[:, 2]

    return ChpArrays(*cols(up), *cols(lo))


@dataclass(frozen=True)
class OlfcProblem:
    """Problem data. Per-bus arrays follow ``topology.buses`` order, per-line arrays ``topology.lines``.

    ``controllable`` marks buses with an adjustable electric load ``d`` (fixed
    at 0 elsewhere); ``heat_controllable`` marks buses with an adjustable heat
    load ``q`` (pinned to ``Q_in`` elsewhere, zero heat cost).
    """

    topology: NetworkTopology
    params: PhysicalParams
    cost_e: QuadraticCost
    cost_h: QuadraticCost
    chp: tuple[ChpRegion, ...]
    d_lo: np.ndarray
    d_hi: np.ndarray
    flow_lo: np.ndarray
    flow_hi: np.ndarray
    controllable: np.ndarray
    heat_controllable: np.ndarray
    chp_arrays: ChpArrays = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("d_lo", "d_hi", "flow_lo", "flow_hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for name in ("controllable", "heat_controllable"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=bool))
        object.__setattr__(self, "chp", tuple(self.chp))
        object.__setattr__(self, "chp_arrays", _flatten_chp(self.chp))

    @property
    def n_buses(self):
        return self.topology.n_buses

    @property
    def n_lines(self):
        return self.topology.n_lines

    def validate(self) -> list[str]:
        topo = self.topology
        n, m = topo.n_buses, topo.n_lines
        errors = list(self.params.validate(topo))
        shapes = {
            "d_lo": n, "d_hi": n, "controllable": n, "heat_controllable": n,
            "flow_lo": m, "flow_hi": m,
        }
        for name, size in shapes.items():
            if getattr(self, name).shape != (size,):
                errors.append(f"{name} must have {size} entries")
        if len(self.cost_e) != n or len(self.cost_h) != n:
            errors.append("one electric and one heat cost per bus are required")
        if len(self.chp) != n:
            errors.append("one CHP region (possibly empty) per bus is required")
        if errors:
            return errors
        for i, bus in enumerate(topo.buses):
            if self.controllable[i] and not self.cost_e.a[i] > 0:
                errors.append(f"bus {bus}: electric cost must be strongly convex (a > 0)")
            if self.heat_controllable[i] and not self.cost_h.a[i] > 0:
                errors.append(f"bus {bus}: heat cost must be strongly convex (a > 0)")
            if not self.d_lo[i] <= 0 <= self.d_hi[i]:
                errors.append(f"bus {bus}: d bounds must bracket 0")
            if not self.chp[i].is_empty and not (self.controllable[i] and self.heat_controllable[i]):
                errors.append(f"bus {bus}: a CHP region needs controllable d and q")
        for l, line in enumerate(topo.lines):
            if not self.flow_lo[l] <= 0 <= self.flow_hi[l]:
                errors.append(f"line {line.name}: flow bounds must bracket 0")
        return errors

    def without_chp(self) -> "OlfcProblem":
        """Same problem with every CHP half-plane dropped (heat stays controllable)."""
        return replace(self, chp=tuple(ChpRegion() for _ in self.chp))

    def with_injections(self, p_in, q_in) -> "OlfcProblem":
        return replace(self, params=replace(self.params, p_in=np.asarray(p_in), q_in=np.asarray(q_in)))

    def scaled_costs(self, c: float) -> "OlfcProblem":
        return replace(self, cost_e=self.cost_e.scaled(c), cost_h=self.cost_h.scaled(c))

    def strong_convexity(self) -> float:
        return self.cost_e.strong_convexity(self.controllable)

    def lipschitz(self) -> float:
        return max(self.cost_e.lipschitz(self.controllable), self.cost_h.lipschitz(self.heat_controllable))

    def pinned_buses(self) -> np.ndarray:
        """Index of the lowest-id bus in each connected component."""
        labels = self.topology.components()
        ids = np.array(self.topology.buses)
        pins = []
        for c in np.unique(labels):
            members = np.flatnonzero(labels == c)
            pins.append(members[np.argmin(ids[members])])
        return np.array(sorted(pins), dtype=int)


@dataclass
class OlfcSolution:
    omega: np.ndarray
    d: np.ndarray
    q: np.ndarray
    P: np.ndarray
    phi: np.ndarray
    objective: float
    lam: np.ndarray
    mu: np.ndarray
    zeta_up: np.ndarray
    zeta_lo: np.ndarray
    gamma_p: np.ndarray
    gamma_m: np.ndarray
    delta_p: np.ndarray
    delta_m: np.ndarray
    sigma_p: np.ndarray
    sigma_m: np.ndarray

    def copy(self) -> "OlfcSolution":
        return OlfcSolution(**{
            k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()
        })

    def multipliers(self) -> dict[str, np.ndarray]:
        return {
            "zeta_up": self.zeta_up, "zeta_lo": self.zeta_lo,
            "gamma_p": self.gamma_p, "gamma_m": self.gamma_m,
            "delta_p": self.delta_p, "delta_m": self.delta_m,
            "sigma_p": self.sigma_p, "sigma_m": self.sigma_m,
        }


def objective(problem: OlfcProblem, omega, d, q) -> float:
    """Total control cost plus the frequency-deviation penalty 1/2 D omega^2."""
    D = problem.params.damping
    cost_h = np.where(problem.heat_controllable, problem.cost_h.value(np.asarray(q, float)), 0.0)
    return float(
        np.sum(problem.cost_e.value(np.asarray(d, float)))
        + np.sum(cost_h)
        + np.sum(0.5 * D * np.asarray(omega, float) ** 2)
    )


def virtual_flows(problem: OlfcProblem, phi) -> np.ndarray:
    topo = problem.topology
    phi = np.asarray(phi, float)
    return topo.susceptance * (phi[topo.from_idx] - phi[topo.to_idx])


def _finite(x):
    return np.flatnonzero(np.isfinite(x))


def centralized_solve(problem: OlfcProblem, tol: float = 1e-6, max_iter: int = 500) -> OlfcSolution:
    """Solve the problem centrally as a convex QP and return primal and dual optimum.

    The multipliers follow the sign convention of the module docstring. Line
    flows are returned in the range of ``B C^T`` (the flows a DC network can
    physically carry) and ``phi`` is zero at the lowest-id bus of each
    connected component.

    Raises
    ------
    Infeasible
        If the solver certifies the constraint set empty.
    NonConvergence
        If the solver stops without an optimal point or the KKT residual of
        the returned point exceeds ``tol``.
    """
    errors = problem.validate()
    if errors:
        raise ValueError("; ".join(errors))
    topo = problem.topology
    prm = problem.params
    n, m = topo.n_buses, topo.n_lines
    C = build_incidence(topo)
    Lap = topo.laplacian()
    B = topo.susceptance
    D = prm.damping
    ctrl, heat = problem.controllable, problem.heat_controllable
    chp = problem.chp_arrays

    d, q, phi, omega = cp.Variable(n), cp.Variable(n), cp.Variable(n), cp.Variable(n)
    P = cp.Variable(m) if m else None
    flow_out = C @ P if m else np.zeros(n)
    vflow = (B[:, None] * C.T) @ phi if m else None

    heat_cost = QuadraticCost(np.where(heat, problem.cost_h.a, 0.0), np.where(heat, problem.cost_h.b, 0.0))
    f = problem.cost_e.cvx(d) + heat_cost.cvx(q) + cp.sum(cp.multiply(0.5 * D, cp.square(omega)))

    con = {}
    con["lam"] = prm.p_in - d - cp.multiply(D, omega) - flow_out == 0
    con["mu"] = prm.p_in - d - Lap @ phi == 0
    extra = [phi[problem.pinned_buses()] == 0]
    if (~ctrl).any():
        extra.append(d[~ctrl] == 0)
    if (~heat).any():
        extra.append(q[~heat] == prm.q_in[~heat])
    if len(chp.up_bus):
        con["zeta_up"] = q[chp.up_bus] - cp.multiply(chp.up_k, d[chp.up_bus]) - chp.up_b <= 0
    if len(chp.lo_bus):
        con["zeta_lo"] = cp.multiply(chp.lo_k, d[chp.lo_bus]) + chp.lo_b - q[chp.lo_bus] <= 0
    idx = {}
    idx["gamma_p"] = np.flatnonzero(ctrl & np.isfinite(problem.d_lo))
    idx["gamma_m"] = np.flatnonzero(ctrl & np.isfinite(problem.d_hi))
    idx["delta_p"] = np.flatnonzero(heat & np.isfinite(prm.buffer_hi))
    idx["delta_m"] = np.flatnonzero(heat & np.isfinite(prm.buffer_lo))
    idx["sigma_p"] = _finite(problem.flow_lo)
    idx["sigma_m"] = _finite(problem.flow_hi)
    if len(idx["gamma_p"]):
        i = idx["gamma_p"]
        con["gamma_p"] = problem.d_lo[i] - d[i] <= 0
    if len(idx["gamma_m"]):
        i = idx["gamma_m"]
        con["gamma_m"] = d[i] - problem.d_hi[i] <= 0
    if len(idx["delta_p"]):
        i = idx["delta_p"]
        con["delta_p"] = prm.q_in[i] - q[i] - prm.buffer_hi[i] <= 0
    if len(idx["delta_m"]):
        i = idx["delta_m"]
        con["delta_m"] = prm.buffer_lo[i] - prm.q_in[i] + q[i] <= 0
    if m and len(idx["sigma_p"]):
        i = idx["sigma_p"]
        con["sigma_p"] = problem.flow_lo[i] - vflow[i] <= 0
    if m and len(idx["sigma_m"]):
        i = idx["sigma_m"]
        con["sigma_m"] = vflow[i] - problem.flow_hi[i] <= 0

    prob = cp.Problem(cp.Minimize(f), list(con.values()) + extra)
    try:
        prob.solve(
            solver=cp.CLARABEL, max_iter=max_iter,
            tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12, tol_ktratio=1e-10,
        )
    except cp.SolverError as exc:
        raise NonConvergence(str(exc)) from exc
    if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise Infeasible("constraint set is empty")
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise NonConvergence(f"solver stopped with status {prob.status!r} (max_iter={max_iter})")

    def dual(name, size, where=None):
        out = np.zeros(size)
        if name in con:
            val = np.atleast_1d(np.asarray(con[name].dual_value, dtype=float))
            if where is None:
                out[:] = val
            else:
                out[where] = val
        return out

    phi_v = np.asarray(phi.value, float)
    d_v = np.where(ctrl, d.value, 0.0)
    q_v = np.where(heat, q.value, prm.q_in)
    omega_v = np.asarray(omega.value, float)
    if m:
        # Keep the injection pattern, drop loop flows outside range(B C^T).
        theta = np.linalg.lstsq(Lap, C @ P.value, rcond=None)[0]
        P_v = B * (C.T @ theta)
    else:
        P_v = np.zeros(0)

    sol = OlfcSolution(
        omega=omega_v, d=d_v, q=q_v, P=P_v, phi=phi_v,
        objective=objective(problem, omega_v, d_v, q_v),
        lam=dual("lam", n), mu=dual("mu", n),
        zeta_up=dual("zeta_up", len(chp.up_bus)), zeta_lo=dual("zeta_lo", len(chp.lo_bus)),
        gamma_p=dual("gamma_p", n, idx["gamma_p"]), gamma_m=dual("gamma_m", n, idx["gamma_m"]),
        delta_p=dual("delta_p", n, idx["delta_p"]), delta_m=dual("delta_m", n, idx["delta_m"]),
        sigma_p=dual("sigma_p", m, idx["sigma_p"]), sigma_m=dual("sigma_m", m, idx["sigma_m"]),
    )
    # Interior-point duals sit a hair off zero on inactive constraints.
    slacks = inequality_slacks(problem, sol.d, sol.q, sol.phi)
    for name, arr in sol.multipliers().items():
        np.maximum(arr, 0.0, out=arr)
        arr[slacks[name] < -max(tol, 1e-9)] = 0.0
    res = kkt_residual(problem, sol)
    if max(res) > tol:
        raise NonConvergence(f"KKT residual {max(res):.3e} above tol {tol:.1e}")
    return sol


class KktResidual(NamedTuple):
    stationarity: float
    primal_infeas: float
    dual_infeas: float
    complementarity: float


def _maxabs(*arrays) -> float:
    vals = [np.max(np.abs(a)) for a in arrays if np.size(a)]
    return float(max(vals)) if vals else 0.0


def inequality_slacks(problem: OlfcProblem, d, q, phi) -> dict[str, np.ndarray]:
    """Value of every ``g(x) <= 0`` constraint function, keyed by multiplier name.

    Entries for bounds that do not apply (infinite, or an uncontrolled bus)
    are ``-inf``.
    """
    prm = problem.params
    chp = problem.chp_arrays
    ctrl, heat = problem.controllable, problem.heat_controllable
    d, q = np.asarray(d, float), np.asarray(q, float)
    vf = virtual_flows(problem, phi)
    with np.errstate(invalid="ignore"):
        out = {
            "zeta_up": q[chp.up_bus] - chp.up_k * d[chp.up_bus] - chp.up_b,
            "zeta_lo": chp.lo_k * d[chp.lo_bus] + chp.lo_b - q[chp.lo_bus],
            "gamma_p": np.where(ctrl, problem.d_lo - d, -np.inf),
            "gamma_m": np.where(ctrl, d - problem.d_hi, -np.inf),
            "delta_p": np.where(heat, prm.q_in - q - prm.buffer_hi, -np.inf),
            "delta_m": np.where(heat, prm.buffer_lo - prm.q_in + q, -np.inf),
            "sigma_p": problem.flow_lo - vf,
            "sigma_m": vf - problem.flow_hi,
        }
    for v in out.values():
        v[np.isnan(v)] = -np.inf
    return out


def kkt_residual(problem: OlfcProblem, candidate: OlfcSolution) -> KktResidual:
    """Max-norm of the four KKT blocks of the Lagrangian in the module docstring."""
    topo = problem.topology
    prm = problem.params
    s = candidate
    C = build_incidence(topo)
    Lap = topo.laplacian()
    B = topo.susceptance
    D = prm.damping
    chp = problem.chp_arrays
    ctrl, heat = problem.controllable, problem.heat_controllable
    n = topo.n_buses

    chp_d = np.zeros(n)
    np.add.at(chp_d, chp.up_bus, -chp.up_k * s.zeta_up)
    np.add.at(chp_d, chp.lo_bus, chp.lo_k * s.zeta_lo)
    chp_q = np.zeros(n)
    np.add.at(chp_q, chp.up_bus, s.zeta_up)
    np.add.at(chp_q, chp.lo_bus, -s.zeta_lo)

    g_omega = D * s.omega - D * s.lam
    g_P = -(C.T @ s.lam)
    g_d = (problem.cost_e.grad(s.d) - s.lam - s.mu - s.gamma_p + s.gamma_m + chp_d)[ctrl]
    g_q = (problem.cost_h.grad(s.q) - s.delta_p + s.delta_m + chp_q)[heat]
    g_phi = -(Lap @ s.mu) + C @ (B * (s.sigma_m - s.sigma_p))
    stationarity = _maxabs(g_omega, g_P, g_d, g_q, g_phi)

    slacks = inequality_slacks(problem, s.d, s.q, s.phi)
    eq_b = prm.p_in - s.d - D * s.omega - C @ s.P
    eq_c = prm.p_in - s.d - Lap @ s.phi
    pins = [s.d[~ctrl], (s.q - prm.q_in)[~heat]]
    ineq = [np.maximum(g[np.isfinite(g)], 0.0) for g in slacks.values()]
    primal = _maxabs(eq_b, eq_c, *pins, *ineq)

    mults = candidate.multipliers()
    dual = _maxabs(*[np.minimum(v, 0.0) for v in mults.values()])
    with np.errstate(invalid="ignore"):
        comp = _maxabs(*[
            np.where(np.isfinite(slacks[k]), mults[k] * slacks[k], 0.0) for k in mults
        ])
    return KktResidual(stationarity, primal, dual, comp)


def solution_rows(problem: OlfcProblem, sol: OlfcSolution) -> list[tuple[str, str, str, float]]:
    """Flat (kind, id, variable, value) rows; ids are bus ids, line names or ``bus.j`` for half-planes."""
    topo = problem.topology
    rows = [("problem", "", "objective", float(sol.objective))]
    for name in ("omega", "d", "q", "phi", "lam", "mu", "gamma_p", "gamma_m", "delta_p", "delta_m"):
        for i, b in enumerate(topo.buses):
            rows.append(("bus", str(b), name, float(getattr(sol, name)[i])))
    for name in ("P", "sigma_p", "sigma_m"):
        for l, line in enumerate(topo.lines):
            rows.append(("line", line.name, name, float(getattr(sol, name)[l])))
    chp = problem.chp_arrays
    for name, owners in (("zeta_up", chp.up_bus), ("zeta_lo", chp.lo_bus)):
        for j, i in enumerate(owners):
            rows.append(("chp", f"{topo.buses[i]}.{j}", name, float(getattr(sol, name)[j])))
    return rows


def write_solution_csv(problem: OlfcProblem, sol: OlfcSolution, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "id", "variable", "value"])
        for kind, ident, name, value in solution_rows(problem, sol):
            w.writerow([kind, ident, name, repr(value)])
