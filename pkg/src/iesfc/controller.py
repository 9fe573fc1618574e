"""Distributed primal-dual update laws for load-side frequency control.

Each bus integrates its own electric/heat load setpoints ``d``, ``q``, a
virtual angle ``phi``, an internal variable ``r`` and its multipliers. The
electricity-balance multiplier ``mu`` is never stored: it is recovered from
``r`` and the local frequency, which removes any need to measure the
uncontrolled injection ``P_in``.

Multiplier signs follow the Lagrangian in :mod:`iesfc.olfc`: every
inequality ``g <= 0`` has a multiplier driven by ``[g]^+`` and the primal
gradients carry ``+nu * dg/dx``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from numba import njit

from .comm import Inbox
from .olfc import OlfcProblem, OlfcSolution


class MissingNeighborMessage(RuntimeError):
    def __init__(self, bus):
        super().__init__(f"bus {bus} is missing a message from at least one neighbour")
        self.bus = bus


def positive_projection(w, v):
    """``w`` where ``w > 0`` or ``v > 0``, else 0 (keeps a multiplier ``v`` from going negative)."""
    w = np.asarray(w, dtype=float)
    return np.where((w > 0) | (np.asarray(v) > 0), w, 0.0)


def recover_mu(r, omega, K, eps_mu, eps_lambda):
    """Invert ``r = K/eps_mu * mu - K/eps_lambda * omega`` for ``mu``.

    ``eps_lambda = inf`` (load buses, no inertia) drops the frequency term.
    """
    return np.asarray(eps_mu) / K * r + np.asarray(eps_mu) / eps_lambda * omega


def robustness_interval(lipschitz: float, damping_min: float) -> tuple[float, float]:
    """Admissible additive damping error ``tau*a`` for the inaccurate-damping guarantee."""
    if lipschitz <= 0 or damping_min <= 0:
        raise ValueError("need lipschitz > 0 and damping_min > 0")
    dp = 1.0 / lipschitz
    rad = math.sqrt(dp * dp + dp * damping_min)
    return 2.0 * (dp - rad), dp + rad


@dataclass(frozen=True)
class InaccurateDamping:
    """Damping the controller believes in: exact, ``k * D`` or ``D + tau_a``."""

    mode: str = "exact"
    value: float | np.ndarray = 1.0

    def __post_init__(self):
        if self.mode not in ("exact", "multiplier", "additive"):
            raise ValueError(f"unknown damping mode {self.mode!r}")
        if self.mode == "multiplier" and not np.all(np.asarray(self.value) > 0):
            raise ValueError("damping multiplier must be > 0")

    def apply(self, damping: np.ndarray) -> np.ndarray:
        if self.mode == "multiplier":
            return self.value * damping
        if self.mode == "additive":
            return damping + self.value
        return np.asarray(damping, float).copy()

    def additive_error(self, damping: np.ndarray) -> np.ndarray:
        return self.apply(damping) - damping

    def within_guarantee(self, problem: OlfcProblem) -> bool:
        D = problem.params.damping
        lo, hi = robustness_interval(problem.lipschitz(), float(D.min()))
        err = self.additive_error(D)
        return bool(np.all((err >= lo) & (err <= hi)))


@dataclass(frozen=True)
class ControllerGains:
    """Step sizes of the gradient flow, one entry per bus (or per line / half-plane).

    ``eps_lambda`` should equal ``1/M`` at generator buses so that the
    recovered ``mu`` is exact; it is ``inf`` at load buses.

    ``omega_coupling`` selects the frequency weight in the ``d`` law:
    ``"derived"`` uses ``omega + mu`` (the gradient of the reduced
    Lagrangian), ``"printed"`` uses ``eps_lambda/(eps_lambda+eps_mu) omega +
    eps_mu/K r``. ``primal_mode="instantaneous"`` solves the ``d``/``q``
    stationarity conditions at every evaluation instead of integrating them.
    """

    eps_d: np.ndarray
    eps_q: np.ndarray
    eps_phi: np.ndarray
    eps_lambda: np.ndarray
    eps_mu: np.ndarray
    K: np.ndarray
    eps_zeta_up: np.ndarray
    eps_zeta_lo: np.ndarray
    eps_gamma: np.ndarray
    eps_delta: np.ndarray
    eps_sigma: np.ndarray
    omega_coupling: str = "derived"
    primal_mode: str = "dynamic"

    _ARRAYS = ("eps_d", "eps_q", "eps_phi", "eps_lambda", "eps_mu", "K",
               "eps_zeta_up", "eps_zeta_lo", "eps_gamma", "eps_delta", "eps_sigma")

    def __post_init__(self):
        for name in self._ARRAYS:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.omega_coupling not in ("derived", "printed"):
            raise ValueError(f"unknown omega_coupling {self.omega_coupling!r}")
        if self.primal_mode not in ("dynamic", "instantaneous"):
            raise ValueError(f"unknown primal_mode {self.primal_mode!r}")

    @classmethod
    def default(cls, problem: OlfcProblem, **scalars) -> "ControllerGains":
        """Uniform gains (1.0 unless overridden), ``eps_lambda = 1/M`` at generators."""
        n, m = problem.n_buses, problem.n_lines
        chp = problem.chp_arrays
        gen = problem.topology.is_generator
        M = problem.params.inertia
        coupling = scalars.pop("omega_coupling", "derived")
        mode = scalars.pop("primal_mode", "dynamic")
        sizes = {
            "eps_d": n, "eps_q": n, "eps_phi": n, "eps_mu": n, "K": n,
            "eps_zeta_up": len(chp.up_bus), "eps_zeta_lo": len(chp.lo_bus),
            "eps_gamma": n, "eps_delta": n, "eps_sigma": m,
        }
        unknown = set(scalars) - set(sizes) - {"eps_lambda"}
        if unknown:
            raise ValueError(f"unknown gain(s) {sorted(unknown)}")
        kw = {k: np.full(size, float(scalars.get(k, 1.0))) for k, size in sizes.items()}
        if "eps_lambda" in scalars:
            kw["eps_lambda"] = np.where(gen, float(scalars["eps_lambda"]), np.inf)
        else:
            with np.errstate(divide="ignore"):
                kw["eps_lambda"] = np.where(gen, 1.0 / np.where(gen, M, 1.0), np.inf)
        return cls(**kw, omega_coupling=coupling, primal_mode=mode)

    def validate(self, problem: OlfcProblem) -> list[str]:
        n, m = problem.n_buses, problem.n_lines
        chp = problem.chp_arrays
        sizes = {
            "eps_d": n, "eps_q": n, "eps_phi": n, "eps_lambda": n, "eps_mu": n, "K": n,
            "eps_zeta_up": len(chp.up_bus), "eps_zeta_lo": len(chp.lo_bus),
            "eps_gamma": n, "eps_delta": n, "eps_sigma": m,
        }
        errors = []
        for name, size in sizes.items():
            arr = getattr(self, name)
            if arr.shape != (size,):
                errors.append(f"gain {name} must have {size} entries")
            elif not np.all(arr > 0):
                errors.append(f"gain {name} must be strictly positive")
        if self.primal_mode == "instantaneous" and np.any(problem.controllable & ~problem.topology.is_generator):
            errors.append("instantaneous primal mode needs every controllable bus to be a generator bus")
        return errors

    def as_dict(self) -> dict:
        out = {name: getattr(self, name).tolist() for name in self._ARRAYS}
        out["omega_coupling"] = self.omega_coupling
        out["primal_mode"] = self.primal_mode
        return out


@dataclass
class ControllerState:
    d: np.ndarray
    q: np.ndarray
    phi: np.ndarray
    r: np.ndarray
    zeta_up: np.ndarray
    zeta_lo: np.ndarray
    gamma_p: np.ndarray
    gamma_m: np.ndarray
    delta_p: np.ndarray
    delta_m: np.ndarray
    sigma_p: np.ndarray
    sigma_m: np.ndarray

    MULTIPLIERS = ("zeta_up", "zeta_lo", "gamma_p", "gamma_m", "delta_p", "delta_m", "sigma_p", "sigma_m")

    @classmethod
    def zeros(cls, problem: OlfcProblem) -> "ControllerState":
        n, m = problem.n_buses, problem.n_lines
        chp = problem.chp_arrays
        return cls(
            d=np.zeros(n), q=np.array(problem.params.q_in, dtype=float), phi=np.zeros(n), r=np.zeros(n),
            zeta_up=np.zeros(len(chp.up_bus)), zeta_lo=np.zeros(len(chp.lo_bus)),
            gamma_p=np.zeros(n), gamma_m=np.zeros(n), delta_p=np.zeros(n), delta_m=np.zeros(n),
            sigma_p=np.zeros(m), sigma_m=np.zeros(m),
        )

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def copy(self) -> "ControllerState":
        return ControllerState(**{k: getattr(self, k).copy() for k in self.field_names()})

    def multipliers(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.MULTIPLIERS}


@dataclass
class Measurements:
    """What a bus observes locally: its frequency, its incident line flows and its heat injection."""

    omega: np.ndarray
    line_flow: np.ndarray
    heat_injection: np.ndarray


# Column layout of the per-bus constant table handed to the kernels.
(A_E, B_E, A_H, B_H, D_LO, D_HI, BUF_LO, BUF_HI, CTRL, HEAT, EPS_D, EPS_Q, EPS_PHI, EPS_LAMBDA,
 EPS_MU, GAIN_K, EPS_GAMMA, EPS_DELTA, DAMP_USED, OMEGA_W) = range(20)
# Per-line table: susceptance, flow bounds, sigma step size.
L_B, L_LO, L_HI, L_EPS = range(4)


@njit(cache=True)
def _offsets(n, m, nu, nl):
    o_zu = 4 * n
    o_zl = o_zu + nu
    o_gp = o_zl + nl
    o_gm = o_gp + n
    o_dp = o_gm + n
    o_dm = o_dp + n
    o_sp = o_dm + n
    o_sm = o_sp + m
    return o_zu, o_zl, o_gp, o_gm, o_dp, o_dm, o_sp, o_sm, o_sm + m


@njit(cache=True)
def _proj(w, v):
    if w > 0.0 or v > 0.0:
        return w
    return 0.0


@njit(cache=True)
def recover_mu_kernel(r, omega, bus):
    return bus[:, EPS_MU] / bus[:, GAIN_K] * r + bus[:, EPS_MU] / bus[:, EPS_LAMBDA] * omega


@njit(cache=True)
def _chp_terms(x, n, chp_up, chp_lo, o_zu, o_zl):
    chp_d = np.zeros(n)
    chp_q = np.zeros(n)
    for j in range(chp_up.shape[0]):
        i = int(chp_up[j, 0])
        chp_d[i] -= chp_up[j, 1] * x[o_zu + j]
        chp_q[i] += x[o_zu + j]
    for j in range(chp_lo.shape[0]):
        i = int(chp_lo[j, 0])
        chp_d[i] += chp_lo[j, 1] * x[o_zl + j]
        chp_q[i] -= x[o_zl + j]
    return chp_d, chp_q


@njit(cache=True)
def _price(r, omega, mu, bus, printed):
    if printed:
        return bus[:, OMEGA_W] * omega + bus[:, EPS_MU] / bus[:, GAIN_K] * r
    return omega + mu


@njit(cache=True)
def stationary_primal_kernel(x, omega, q_in, bus, line, chp_up, chp_lo, printed):
    """(d, q) zeroing the bracketed gradients of the primal laws (quadratic costs)."""
    n = bus.shape[0]
    o_zu, o_zl, o_gp, o_gm, o_dp, o_dm, o_sp, o_sm, _ = _offsets(n, line.shape[0], chp_up.shape[0], chp_lo.shape[0])
    r = x[3 * n:4 * n]
    mu = recover_mu_kernel(r, omega, bus)
    chp_d, chp_q = _chp_terms(x, n, chp_up, chp_lo, o_zu, o_zl)
    price = _price(r, omega, mu, bus, printed)
    d = np.zeros(n)
    q = np.empty(n)
    for i in range(n):
        if bus[i, CTRL] > 0:
            y = price[i] + x[o_gp + i] - x[o_gm + i] - chp_d[i]
            d[i] = (y - bus[i, B_E]) / bus[i, A_E]
        if bus[i, HEAT] > 0:
            y = x[o_dp + i] - x[o_dm + i] - chp_q[i]
            q[i] = (y - bus[i, B_H]) / bus[i, A_H]
        else:
            q[i] = q_in[i]
    return d, q


@njit(cache=True)
def controller_kernel(x, omega, line_flow, q_in, rcp, mline, orient, mu_msg, phi_msg, sp_msg, sm_msg,
                      bus, line, chp_up, chp_lo, f, t, instantaneous, printed):
    """Rates of the flat controller state ``x`` (layout d, q, phi, r, zeta_up, zeta_lo,
    gamma+, gamma-, delta+, delta-, sigma+, sigma-).

    Neighbour data arrive only through the message columns (``rcp`` = recipient,
    ``mline`` = line, ``orient`` = +1 when the recipient sends on that line).
    """
    n = bus.shape[0]
    m = line.shape[0]
    o_zu, o_zl, o_gp, o_gm, o_dp, o_dm, o_sp, o_sm, size = _offsets(n, m, chp_up.shape[0], chp_lo.shape[0])
    out = np.zeros(size)
    phi = x[2 * n:3 * n]
    r = x[3 * n:4 * n]
    if instantaneous:
        d, q = stationary_primal_kernel(x, omega, q_in, bus, line, chp_up, chp_lo, printed)
    else:
        d = x[0:n]
        q = x[n:2 * n].copy()
        for i in range(n):
            if bus[i, HEAT] <= 0:
                q[i] = q_in[i]
    mu = recover_mu_kernel(r, omega, bus)

    vout = np.zeros(n)
    lap_mu = np.zeros(n)
    sig = np.zeros(n)
    vflow = np.zeros(m)
    for k in range(rcp.shape[0]):
        i = rcp[k]
        l = mline[k]
        b = line[l, L_B]
        vo = b * (phi[i] - phi_msg[k])
        vout[i] += vo
        lap_mu[i] += b * (mu[i] - mu_msg[k])
        if orient[k] > 0:
            sv = x[o_sp + l] - x[o_sm + l]
            vflow[l] = vo
        else:
            sv = sp_msg[k] - sm_msg[k]
        sig[i] += orient[k] * b * sv
    pe = np.zeros(n)
    for l in range(m):
        pe[f[l]] += line_flow[l]
        pe[t[l]] -= line_flow[l]

    chp_d, chp_q = _chp_terms(x, n, chp_up, chp_lo, o_zu, o_zl)
    price = _price(r, omega, mu, bus, printed)
    for i in range(n):
        if not instantaneous:
            if bus[i, CTRL] > 0:
                grad_d = (bus[i, A_E] * d[i] + bus[i, B_E] - price[i]
                          - x[o_gp + i] + x[o_gm + i] + chp_d[i])
                out[i] = -bus[i, EPS_D] * grad_d
            if bus[i, HEAT] > 0:
                grad_q = bus[i, A_H] * q[i] + bus[i, B_H] - x[o_dp + i] + x[o_dm + i] + chp_q[i]
                out[n + i] = -bus[i, EPS_Q] * grad_q
        out[2 * n + i] = bus[i, EPS_PHI] * (lap_mu[i] + sig[i])
        out[3 * n + i] = bus[i, GAIN_K] * (bus[i, DAMP_USED] * omega[i] + pe[i] - vout[i])
        if bus[i, CTRL] > 0:
            out[o_gp + i] = bus[i, EPS_GAMMA] * _proj(bus[i, D_LO] - d[i], x[o_gp + i])
            out[o_gm + i] = bus[i, EPS_GAMMA] * _proj(d[i] - bus[i, D_HI], x[o_gm + i])
        if bus[i, HEAT] > 0:
            out[o_dp + i] = bus[i, EPS_DELTA] * _proj(q_in[i] - q[i] - bus[i, BUF_HI], x[o_dp + i])
            out[o_dm + i] = bus[i, EPS_DELTA] * _proj(bus[i, BUF_LO] - q_in[i] + q[i], x[o_dm + i])
    for j in range(chp_up.shape[0]):
        i = int(chp_up[j, 0])
        out[o_zu + j] = chp_up[j, 3] * _proj(q[i] - chp_up[j, 1] * d[i] - chp_up[j, 2], x[o_zu + j])
    for j in range(chp_lo.shape[0]):
        i = int(chp_lo[j, 0])
        out[o_zl + j] = chp_lo[j, 3] * _proj(chp_lo[j, 1] * d[i] + chp_lo[j, 2] - q[i], x[o_zl + j])
    for l in range(m):
        out[o_sp + l] = line[l, L_EPS] * _proj(line[l, L_LO] - vflow[l], x[o_sp + l])
        out[o_sm + l] = line[l, L_EPS] * _proj(vflow[l] - line[l, L_HI], x[o_sm + l])
    return out


class Controller:
    """Every bus's update law, evaluated together.

    Neighbour quantities enter only through the :class:`~iesfc.comm.Inbox`;
    everything else read here is the bus's own state, its local
    measurements or its own configuration. The uncontrolled electric
    injection is never an input.
    """

    def __init__(self, problem: OlfcProblem, gains: ControllerGains, damping_used: np.ndarray | None = None,
                 chp_enforced: bool = True):
        errors = problem.validate() + gains.validate(problem)
        if errors:
            raise ValueError("; ".join(errors))
        self.problem = problem
        self.gains = gains
        topo = problem.topology
        self.n, self.m = topo.n_buses, topo.n_lines
        self.f = topo.from_idx
        self.t = topo.to_idx
        g = gains
        damping_used = problem.params.damping if damping_used is None else damping_used
        with np.errstate(invalid="ignore"):
            w = g.eps_lambda / (g.eps_lambda + g.eps_mu)
        omega_weight = np.where(np.isinf(g.eps_lambda), 1.0, w)
        bus = np.zeros((self.n, 20))
        cols = {
            A_E: problem.cost_e.a, B_E: problem.cost_e.b,
            A_H: np.where(problem.heat_controllable, problem.cost_h.a, 1.0),
            B_H: np.where(problem.heat_controllable, problem.cost_h.b, 0.0),
            D_LO: problem.d_lo, D_HI: problem.d_hi,
            BUF_LO: problem.params.buffer_lo, BUF_HI: problem.params.buffer_hi,
            CTRL: problem.controllable, HEAT: problem.heat_controllable,
            EPS_D: g.eps_d, EPS_Q: g.eps_q, EPS_PHI: g.eps_phi, EPS_LAMBDA: g.eps_lambda, EPS_MU: g.eps_mu,
            GAIN_K: g.K, EPS_GAMMA: g.eps_gamma, EPS_DELTA: g.eps_delta,
            DAMP_USED: damping_used, OMEGA_W: omega_weight,
        }
        for c, v in cols.items():
            bus[:, c] = v
        self.bus = bus
        self.line = np.column_stack([topo.susceptance, problem.flow_lo, problem.flow_hi, g.eps_sigma]).reshape(self.m, 4)
        c = problem.chp_arrays
        self.chp_up = np.column_stack([c.up_bus, c.up_k, c.up_b, g.eps_zeta_up]).reshape(-1, 4).astype(float)
        self.chp_lo = np.column_stack([c.lo_bus, c.lo_k, c.lo_b, g.eps_zeta_lo]).reshape(-1, 4).astype(float)
        if not chp_enforced:
            # zeta keeps its slot in the state but never leaves zero
            self.chp_up[:, 3] = 0.0
            self.chp_lo[:, 3] = 0.0
        self.instantaneous = g.primal_mode == "instantaneous"
        self.printed = g.omega_coupling == "printed"
        self._expected = 2 * self.m

    def mu(self, r, omega):
        return recover_mu_kernel(np.asarray(r, float), np.asarray(omega, float), self.bus)

    def pack(self, s: ControllerState) -> np.ndarray:
        return np.concatenate([getattr(s, k) for k in ControllerState.field_names()])

    def unpack(self, x) -> ControllerState:
        n, m = self.n, self.m
        sizes = (n, n, n, n, len(self.chp_up), len(self.chp_lo), n, n, n, n, m, m)
        out, start = {}, 0
        for name, size in zip(ControllerState.field_names(), sizes):
            out[name] = x[start:start + size]
            start += size
        return ControllerState(**out)

    def stationary_primal(self, s: ControllerState, omega, heat_injection):
        """(d, q) that zero the bracketed gradients of the d and q laws (quadratic-cost closed form)."""
        return stationary_primal_kernel(
            self.pack(s), np.asarray(omega, float), np.asarray(heat_injection, float),
            self.bus, self.line, self.chp_up, self.chp_lo, self.printed,
        )

    def check_inbox(self, inbox: Inbox) -> None:
        if len(inbox) == self._expected:
            return
        have = set(zip(inbox.recipient.tolist(), inbox.line.tolist()))
        topo = self.problem.topology
        for l in range(self.m):
            for i in (self.f[l], self.t[l]):
                if (i, l) not in have:
                    raise MissingNeighborMessage(topo.buses[i])

    def rates(self, x, meas: Measurements, inbox: Inbox) -> np.ndarray:
        self.check_inbox(inbox)
        return controller_kernel(
            x, np.asarray(meas.omega, float), np.asarray(meas.line_flow, float),
            np.asarray(meas.heat_injection, float),
            inbox.recipient, inbox.line, inbox.orient, inbox.mu, inbox.phi, inbox.sigma_p, inbox.sigma_m,
            self.bus, self.line, self.chp_up, self.chp_lo, self.f, self.t, self.instantaneous, self.printed,
        )

    def derivatives(self, s: ControllerState, meas: Measurements, inbox: Inbox) -> ControllerState:
        return self.unpack(self.rates(self.pack(s), meas, inbox))


def controller_derivatives(ctrl: ControllerState, meas: Measurements, inbox: Inbox, problem: OlfcProblem,
                           gains: ControllerGains, damping_used=None) -> ControllerState:
    """Time derivative of every controller field; see :class:`Controller`."""
    return Controller(problem, gains, damping_used).derivatives(ctrl, meas, inbox)


def equilibrium_state(problem: OlfcProblem, solution: OlfcSolution, gains: ControllerGains,
                      phi_offset: float | np.ndarray = 0.0) -> ControllerState:
    """Controller state matching an optimal primal-dual point (with omega* taken as 0)."""
    r = gains.K / gains.eps_mu * solution.mu
    return ControllerState(
        d=solution.d.copy(), q=solution.q.copy(), phi=solution.phi + phi_offset, r=r,
        zeta_up=solution.zeta_up.copy(), zeta_lo=solution.zeta_lo.copy(),
        gamma_p=solution.gamma_p.copy(), gamma_m=solution.gamma_m.copy(),
        delta_p=solution.delta_p.copy(), delta_m=solution.delta_m.copy(),
        sigma_p=solution.sigma_p.copy(), sigma_m=solution.sigma_m.copy(),
    )
