"""Closed-loop simulation of the physical network and the distributed controller."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .comm import CommConfig, Exchanger, gather_messages
from .controller import (
    Controller,
    controller_kernel,
    recover_mu_kernel,
    stationary_primal_kernel,
    ControllerGains,
    ControllerState,
    InaccurateDamping,
    Measurements,
    equilibrium_state,
)
from .network import NetworkModel, physics_kernel
from .olfc import (
    OlfcProblem,
    OlfcSolution,
    centralized_solve,
    inequality_slacks,
    kkt_residual,
    objective,
    virtual_flows,
)

log = logging.getLogger(__name__)

BLOWUP_LIMIT = 1e6
OMEGA_TOL = 1e-4
PRIMAL_TOL = 1e-3
SETTLING_BAND = 1e-3
LYAPUNOV_SLACK = 1e-6


class NumericalBlowup(RuntimeError):
    def __init__(self, time: float, trajectory: "Trajectory | None" = None):
        super().__init__(f"state left the finite/1e6 p.u. envelope at t = {time:.4f} s")
        self.time = time
        self.trajectory = trajectory


@dataclass(frozen=True)
class Disturbance:
    time: float
    bus: int
    delta_p: float = 0.0
    delta_q: float = 0.0


@dataclass(frozen=True)
class IntegratorConfig:
    step: float = 1e-3
    duration: float = 60.0
    method: str = "rk4"
    decimation: int = 1

    def validate(self) -> list[str]:
        errors = []
        if not self.step > 0:
            errors.append("integrator step must be > 0")
        if not self.duration > self.step:
            errors.append("integrator duration must exceed the step")
        if self.method not in ("euler", "rk4"):
            errors.append(f"unknown integrator method {self.method!r}")
        if self.decimation < 1:
            errors.append("decimation must be >= 1")
        return errors

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.step))


@dataclass(frozen=True)
class Scenario:
    """One closed-loop experiment.

    ``problem`` carries the pre-disturbance injections (normally zero);
    ``disturbances`` are step changes added on top of them.
    """

    problem: OlfcProblem
    gains: ControllerGains
    disturbances: tuple[Disturbance, ...] = ()
    damping: InaccurateDamping = field(default_factory=InaccurateDamping)
    chp_enforced: bool = True
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    comm: CommConfig = field(default_factory=CommConfig)
    name: str = "custom"

    def validate(self) -> list[str]:
        errors = list(self.problem.validate())
        if errors:
            return errors
        errors += self.gains.validate(self.problem)
        errors += self.integrator.validate()
        times = [dist.time for dist in self.disturbances]
        if times != sorted(times):
            errors.append("disturbances must be sorted by time")
        for dist in self.disturbances:
            if dist.bus not in self.problem.topology.buses:
                errors.append(f"disturbance at unknown bus {dist.bus}")
            if dist.time < 0:
                errors.append("disturbance times must be >= 0")
        return errors

    def final_injections(self) -> tuple[np.ndarray, np.ndarray]:
        p = np.array(self.problem.params.p_in, dtype=float)
        q = np.array(self.problem.params.q_in, dtype=float)
        topo = self.problem.topology
        for dist in self.disturbances:
            i = topo.index(dist.bus)
            p[i] += dist.delta_p
            q[i] += dist.delta_q
        return p, q

    def controlled_problem(self) -> OlfcProblem:
        """The post-disturbance problem the controller is actually solving."""
        p, q = self.final_injections()
        prob = self.problem.with_injections(p, q)
        return prob if self.chp_enforced else prob.without_chp()

    def true_problem(self) -> OlfcProblem:
        """Post-disturbance problem with the CHP region always in force (for reporting)."""
        p, q = self.final_injections()
        return self.problem.with_injections(p, q)

    @property
    def last_disturbance_time(self) -> float:
        return max((d.time for d in self.disturbances), default=0.0)


class StateLayout:
    """Slices of the flat closed-loop state vector."""

    def __init__(self, problem: OlfcProblem):
        n, m = problem.n_buses, problem.n_lines
        chp = problem.chp_arrays
        ng = int(problem.topology.is_generator.sum())
        sizes = [
            ("omega_gen", ng), ("P", m), ("d", n), ("q", n), ("phi", n), ("r", n),
            ("zeta_up", len(chp.up_bus)), ("zeta_lo", len(chp.lo_bus)),
            ("gamma_p", n), ("gamma_m", n), ("delta_p", n), ("delta_m", n),
            ("sigma_p", m), ("sigma_m", m),
        ]
        self.slices = {}
        start = 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start
        mult = [self.slices[k] for k in ControllerState.MULTIPLIERS]
        self.multiplier_index = np.concatenate([np.arange(s.start, s.stop) for s in mult])

    def controller(self, z) -> ControllerState:
        sl = self.slices
        return ControllerState(**{k: z[sl[k]] for k in ControllerState.field_names()})

    def pack(self, omega_gen, P, s: ControllerState) -> np.ndarray:
        return np.concatenate([omega_gen, P] + [getattr(s, k) for k in ControllerState.field_names()])


@njit(cache=True)
def _fused_rhs(z, p_in, q_in, ng, gen, load, inertia, damping, f, t, B,
               rcp, snd, mline, orient, bus, line, chp_up, chp_lo, instantaneous, printed):
    n = p_in.shape[0]
    m = f.shape[0]
    omega_gen = z[:ng]
    P = z[ng:ng + m]
    x = z[ng + m:]
    if instantaneous:
        guess = np.zeros(n)
        for k in range(ng):
            guess[gen[k]] = omega_gen[k]
        d, _ = stationary_primal_kernel(x, guess, q_in, bus, line, chp_up, chp_lo, printed)
    else:
        d = x[:n]
    omega_dot, P_dot, omega = physics_kernel(omega_gen, P, d, p_in, gen, load, inertia, damping, f, t, B)
    mu = recover_mu_kernel(x[3 * n:4 * n], omega, bus)
    o_sp = x.shape[0] - 2 * m
    mu_m, phi_m, sp_m, sm_m = gather_messages(snd, mline, orient, mu, x[2 * n:3 * n],
                                              x[o_sp:o_sp + m], x[o_sp + m:])
    xd = controller_kernel(x, omega, P, q_in, rcp, mline, orient, mu_m, phi_m, sp_m, sm_m,
                           bus, line, chp_up, chp_lo, f, t, instantaneous, printed)
    out = np.empty_like(z)
    out[:ng] = omega_dot
    out[ng:ng + m] = P_dot
    out[ng + m:] = xd
    return out


@njit(cache=True)
def _fused_advance(z, steps, h, rk4, mult_start, limit, p_in, q_in, ng, gen, load, inertia, damping, f, t, B,
                   rcp, snd, mline, orient, bus, line, chp_up, chp_lo, instantaneous, printed):
    """Take ``steps`` fixed steps; returns (z, steps taken, clamp total, clamp max)."""
    clamp_total = 0.0
    clamp_max = 0.0
    for k in range(steps):
        k1 = _fused_rhs(z, p_in, q_in, ng, gen, load, inertia, damping, f, t, B,
                        rcp, snd, mline, orient, bus, line, chp_up, chp_lo, instantaneous, printed)
        if rk4:
            k2 = _fused_rhs(z + 0.5 * h * k1, p_in, q_in, ng, gen, load, inertia, damping, f, t, B,
                            rcp, snd, mline, orient, bus, line, chp_up, chp_lo, instantaneous, printed)
            k3 = _fused_rhs(z + 0.5 * h * k2, p_in, q_in, ng, gen, load, inertia, damping, f, t, B,
                            rcp, snd, mline, orient, bus, line, chp_up, chp_lo, instantaneous, printed)
            k4 = _fused_rhs(z + h * k3, p_in, q_in, ng, gen, load, inertia, damping, f, t, B,
                            rcp, snd, mline, orient, bus, line, chp_up, chp_lo, instantaneous, printed)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            z = z + h * k1
        bad = False
        for j in range(z.shape[0]):
            if j >= mult_start and z[j] < 0.0:
                clamp_total -= z[j]
                if -z[j] > clamp_max:
                    clamp_max = -z[j]
                z[j] = 0.0
            if not np.isfinite(z[j]) or abs(z[j]) > limit:
                bad = True
        if bad:
            return z, k + 1, clamp_total, clamp_max, True
    return z, steps, clamp_total, clamp_max, False


class ClosedLoop:
    """Right-hand side of the physics + controller interconnection.

    Under ideal communication the whole step runs in one compiled kernel
    (:meth:`advance`); otherwise :meth:`rhs` routes every stage through the
    stateful :class:`~iesfc.comm.Exchanger`.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        base = scenario.problem
        self.problem = base
        self.layout = StateLayout(base)
        self.p_in = np.array(base.params.p_in, dtype=float)
        self.q_in = np.array(base.params.q_in, dtype=float)
        self.network = NetworkModel(base.topology, base.params)
        damping_used = scenario.damping.apply(base.params.damping)
        self.controller = Controller(base, scenario.gains, damping_used, chp_enforced=scenario.chp_enforced)
        self.exchanger = Exchanger(base.topology, scenario.comm)
        self.instantaneous = scenario.gains.primal_mode == "instantaneous"
        self.heat = base.heat_controllable
        self.gen = self.network.gen
        self.fused = scenario.comm.ideal
        self.mult_start = self.layout.slices["zeta_up"].start

    def _kernel_args(self):
        net, c, ex = self.network, self.controller, self.exchanger
        p = self.problem.params
        return (self.p_in, self.q_in, len(self.gen), net.gen, net.load, p.inertia, p.damping, net.f, net.t, net.B,
                ex.recipient, ex.sender, ex.line, ex.orient, c.bus, c.line, c.chp_up, c.chp_lo,
                c.instantaneous, c.printed)

    def apply(self, dist: Disturbance) -> None:
        i = self.scenario.problem.topology.index(dist.bus)
        self.p_in[i] += dist.delta_p
        self.q_in[i] += dist.delta_q

    def resolve(self, z):
        """Split ``z`` and fill in algebraic quantities: returns (omega_all, P, controller state)."""
        sl = self.layout.slices
        s = self.layout.controller(z)
        omega_gen = z[sl["omega_gen"]]
        P = z[sl["P"]]
        if self.instantaneous:
            omega_guess = np.zeros(len(self.p_in))
            omega_guess[self.gen] = omega_gen
            s.d, s.q = self.controller.stationary_primal(s, omega_guess, self.q_in)
        s.q = np.where(self.heat, s.q, self.q_in)
        omega = np.empty(len(self.p_in))
        omega[self.gen] = omega_gen
        omega[self.network.load] = self.network.load_omega(s.d, P, self.p_in)
        return omega, P, s

    def rhs(self, z, rnd: int, stage: int) -> np.ndarray:
        if self.fused:
            return _fused_rhs(np.asarray(z, float), *self._kernel_args())
        sl = self.layout.slices
        n = len(self.p_in)
        omega_gen = z[sl["omega_gen"]]
        P = z[sl["P"]]
        x = z[sl["d"].start:]
        c = self.controller
        if self.instantaneous:
            guess = np.zeros(n)
            guess[self.gen] = omega_gen
            d, _ = stationary_primal_kernel(x, guess, self.q_in, c.bus, c.line, c.chp_up, c.chp_lo, c.printed)
        else:
            d = z[sl["d"]]
        omega_dot, P_dot, omega = self.network.derivatives(omega_gen, P, d, self.p_in)
        mu = c.mu(z[sl["r"]], omega)
        inbox = self.exchanger.exchange(rnd, mu, z[sl["phi"]], z[sl["sigma_p"]], z[sl["sigma_m"]],
                                        start_of_round=(stage == 0))
        xd = c.rates(x, Measurements(omega, P, self.q_in), inbox)
        return np.concatenate([omega_dot, P_dot, xd])

    def advance(self, z, steps: int, h: float, method: str):
        """Compiled fixed-step integration (ideal communication only)."""
        return _fused_advance(np.array(z, float), steps, h, method == "rk4", self.mult_start, BLOWUP_LIMIT,
                              *self._kernel_args())


def euler_step(f, z, h, rnd):
    return z + h * f(z, rnd, 0)


def rk4_step(f, z, h, rnd):
    k1 = f(z, rnd, 0)
    k2 = f(z + 0.5 * h * k1, rnd, 1)
    k3 = f(z + 0.5 * h * k2, rnd, 2)
    k4 = f(z + h * k3, rnd, 3)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


STEPPERS = {"euler": euler_step, "rk4": rk4_step}


@dataclass
class Trajectory:
    """Sampled closed-loop trajectory.

    Per-bus arrays have shape (samples, buses), per-line (samples, lines).
    ``U`` is filled by :func:`attach_lyapunov` once an equilibrium is known.
    """

    scenario: Scenario
    time: np.ndarray
    omega: np.ndarray
    P: np.ndarray
    heat_buffer: np.ndarray
    mu: np.ndarray
    controller: dict[str, np.ndarray]
    p_in: np.ndarray
    q_in: np.ndarray
    clamp_total: float = 0.0
    clamp_max: float = 0.0
    U: np.ndarray | None = None
    lyapunov_reference: str = ""
    blowup_time: float | None = None

    def __len__(self):
        return len(self.time)

    @property
    def d(self):
        return self.controller["d"]

    @property
    def q(self):
        return self.controller["q"]

    @property
    def phi(self):
        return self.controller["phi"]

    def virtual_flow(self) -> np.ndarray:
        topo = self.scenario.problem.topology
        return topo.susceptance * (self.phi[:, topo.from_idx] - self.phi[:, topo.to_idx])

    def objective(self) -> np.ndarray:
        prob = self.scenario.problem
        out = np.empty(len(self))
        for k in range(len(self)):
            out[k] = objective(prob, self.omega[k], self.d[k], self.q[k])
        return out

    def final_solution(self) -> OlfcSolution:
        """Final sample packaged as a primal-dual candidate (lam = omega, per the reduced Lagrangian)."""
        c = {k: v[-1].copy() for k, v in self.controller.items()}
        return OlfcSolution(
            omega=self.omega[-1].copy(), d=c["d"], q=c["q"], P=self.P[-1].copy(), phi=c["phi"],
            objective=objective(self.scenario.problem, self.omega[-1], c["d"], c["q"]),
            lam=self.omega[-1].copy(), mu=self.mu[-1].copy(),
            zeta_up=c["zeta_up"], zeta_lo=c["zeta_lo"], gamma_p=c["gamma_p"], gamma_m=c["gamma_m"],
            delta_p=c["delta_p"], delta_m=c["delta_m"], sigma_p=c["sigma_p"], sigma_m=c["sigma_m"],
        )

    def columns(self) -> list[tuple[str, np.ndarray]]:
        """Named columns for CSV export, e.g. ``omega.3``, ``P.2-3``, ``d.3``."""
        topo = self.scenario.problem.topology
        cols = [("time", self.time)]
        for i, b in enumerate(topo.buses):
            cols.append((f"omega.{b}", self.omega[:, i]))
        for l, line in enumerate(topo.lines):
            cols.append((f"P.{line.name}", self.P[:, l]))
        for name in ("d", "q", "phi", "r"):
            for i, b in enumerate(topo.buses):
                cols.append((f"{name}.{b}", self.controller[name][:, i]))
        for i, b in enumerate(topo.buses):
            cols.append((f"mu.{b}", self.mu[:, i]))
            cols.append((f"Qv.{b}", self.heat_buffer[:, i]))
        chp = self.scenario.problem.chp_arrays
        for j, i in enumerate(chp.up_bus):
            cols.append((f"zeta_up.{topo.buses[i]}.{j}", self.controller["zeta_up"][:, j]))
        for j, i in enumerate(chp.lo_bus):
            cols.append((f"zeta_lo.{topo.buses[i]}.{j}", self.controller["zeta_lo"][:, j]))
        for name in ("gamma_p", "gamma_m", "delta_p", "delta_m"):
            for i, b in enumerate(topo.buses):
                cols.append((f"{name}.{b}", self.controller[name][:, i]))
        for name in ("sigma_p", "sigma_m"):
            for l, line in enumerate(topo.lines):
                cols.append((f"{name}.{line.name}", self.controller[name][:, l]))
        if self.U is not None:
            cols.append(("U", self.U))
        return cols

    def write_csv(self, path) -> None:
        cols = self.columns()
        data = np.column_stack([c for _, c in cols])
        with open(path, "w", newline="") as fh:
            fh.write(",".join(name for name, _ in cols) + "\n")
            for row in data:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def simulate(scenario: Scenario, exchanger_log: bool = False) -> Trajectory:
    """Integrate the closed loop over ``[0, duration]`` with a fixed step.

    At every step, pending disturbances are applied first, then one
    synchronous communication round happens per integrator stage, then the
    state advances and multipliers are clamped at zero.

    Raises
    ------
    NumericalBlowup
        When any state is non-finite or exceeds 1e6 p.u.; the exception
        carries the trajectory recorded so far.
    """
    errors = scenario.validate()
    if errors:
        raise ValueError("; ".join(errors))
    integ = scenario.integrator
    loop = ClosedLoop(scenario)
    if exchanger_log:
        loop.exchanger.log_rows = []
    lay = loop.layout
    base = scenario.problem
    n, m = base.n_buses, base.n_lines
    h = integ.step
    n_steps = integ.n_steps
    dec = integ.decimation
    n_samples = n_steps // dec + 1
    stepper = STEPPERS[integ.method]

    rec_omega = np.zeros((n_samples, n))
    rec_P = np.zeros((n_samples, m))
    rec_mu = np.zeros((n_samples, n))
    rec_pin = np.zeros((n_samples, n))
    rec_qin = np.zeros((n_samples, n))
    rec_ctrl = {k: np.zeros((n_samples, lay.slices[k].stop - lay.slices[k].start))
                for k in ControllerState.field_names()}
    times = np.zeros(n_samples)

    s0 = ControllerState.zeros(base)
    z = lay.pack(np.zeros(len(loop.gen)), np.zeros(m), s0)
    pending = list(scenario.disturbances)
    mult_idx = lay.multiplier_index
    clamp_total = 0.0
    clamp_max = 0.0

    def record(k_sample, t, z):
        omega, P, s = loop.resolve(z)
        times[k_sample] = t
        rec_omega[k_sample] = omega
        rec_P[k_sample] = P
        rec_mu[k_sample] = loop.controller.mu(s.r, omega)
        rec_pin[k_sample] = loop.p_in
        rec_qin[k_sample] = loop.q_in
        for name in rec_ctrl:
            rec_ctrl[name][k_sample] = getattr(s, name)

    def build(count, blowup_time=None):
        return Trajectory(
            scenario=scenario, time=times[:count].copy(), omega=rec_omega[:count].copy(),
            P=rec_P[:count].copy(), heat_buffer=rec_qin[:count] - rec_ctrl["q"][:count],
            mu=rec_mu[:count].copy(), controller={k: v[:count].copy() for k, v in rec_ctrl.items()},
            p_in=rec_pin[:count].copy(), q_in=rec_qin[:count].copy(),
            clamp_total=clamp_total, clamp_max=clamp_max, blowup_time=blowup_time,
        )

    def next_event(step):
        nxt = min(n_steps, (step // dec + 1) * dec)
        if pending:
            nxt = min(nxt, max(step + 1, int(np.ceil((pending[0].time - 1e-12) / h))))
        return nxt

    sample = 0
    step = 0
    while step < n_steps:
        t = step * h
        while pending and pending[0].time <= t + 1e-12:
            loop.apply(pending.pop(0))
        if step % dec == 0:
            record(sample, t, z)
            sample += 1
        if loop.fused:
            z, taken, ct, cm, bad = loop.advance(z, next_event(step) - step, h, integ.method)
            clamp_total += ct
            clamp_max = max(clamp_max, cm)
            step += taken
        else:
            z = stepper(loop.rhs, z, h, step)
            step += 1
            mult = z[mult_idx]
            neg = np.minimum(mult, 0.0)
            if neg.any():
                clamp_total += float(-neg.sum())
                clamp_max = max(clamp_max, float(-neg.min()))
                z[mult_idx] = mult - neg
            bad = not np.all(np.isfinite(z)) or np.max(np.abs(z)) > BLOWUP_LIMIT
        if bad:
            raise NumericalBlowup(step * h, build(sample, step * h))
    while pending and pending[0].time <= n_steps * h + 1e-12:
        loop.apply(pending.pop(0))
    if n_steps % dec == 0:
        record(sample, n_steps * h, z)
        sample += 1
    traj = build(sample)
    if exchanger_log:
        traj.exchanger = loop.exchanger
    return traj


def lyapunov_value(z, z_star, eps) -> float:
    """Half squared distance to ``z_star`` with per-coordinate weight ``1/eps``."""
    dz = np.asarray(z, float) - np.asarray(z_star, float)
    return float(0.5 * np.sum(dz * dz / np.asarray(eps, float), axis=-1))


def _lyapunov_coordinates(scenario: Scenario, omega, P, controller: dict, mu):
    """Stack the gradient-flow coordinates and their step sizes.

    Coordinates: d, q (dynamic primal mode only), phi, P (step size B),
    generator omega (step size eps_lambda), mu, and every multiplier.
    """
    prob = scenario.problem
    g = scenario.gains
    gen = prob.topology.is_generator
    ctrl, heat = prob.controllable, prob.heat_controllable
    parts, eps = [], []
    if g.primal_mode == "dynamic":
        parts += [controller["d"][..., ctrl], controller["q"][..., heat]]
        eps += [g.eps_d[ctrl], g.eps_q[heat]]
    parts += [controller["phi"], P, omega[..., gen], mu]
    eps += [g.eps_phi, prob.topology.susceptance, g.eps_lambda[gen], g.eps_mu]
    mult_eps = {
        "zeta_up": g.eps_zeta_up, "zeta_lo": g.eps_zeta_lo, "gamma_p": g.eps_gamma, "gamma_m": g.eps_gamma,
        "delta_p": g.eps_delta, "delta_m": g.eps_delta, "sigma_p": g.eps_sigma, "sigma_m": g.eps_sigma,
    }
    for k, e in mult_eps.items():
        parts.append(controller[k])
        eps.append(e)
    return np.concatenate(parts, axis=-1), np.concatenate(eps)


def _fit_chp_slots(sol: OlfcSolution, problem: OlfcProblem) -> OlfcSolution:
    """Give ``sol`` one zeta entry per half-plane of ``problem`` (zeros where it had none)."""
    chp = problem.chp_arrays
    up, lo = len(chp.up_bus), len(chp.lo_bus)
    if sol.zeta_up.shape == (up,) and sol.zeta_lo.shape == (lo,):
        return sol
    return replace(sol, zeta_up=np.zeros(up), zeta_lo=np.zeros(lo))


def equilibrium_from_oracle(scenario: Scenario, oracle: OlfcSolution):
    """Closed-loop equilibrium built from an optimal primal-dual point.

    The virtual angles are shifted so that the (step-size weighted) angle
    sum of each connected component matches its value at t = 0, which the
    angle dynamics conserve.
    """
    prob = scenario.problem
    g = scenario.gains
    oracle = _fit_chp_slots(oracle, prob)
    labels = prob.topology.components()
    phi = oracle.phi.copy()
    for c in np.unique(labels):
        idx = labels == c
        w = 1.0 / g.eps_phi[idx]
        phi[idx] -= np.sum(w * phi[idx]) / np.sum(w)
    sol = replace(oracle, phi=phi)
    s = equilibrium_state(prob, sol, g)
    n = prob.n_buses
    return np.zeros(n), sol.P.copy(), s, sol.mu.copy()


def fixed_point_residual(scenario: Scenario, oracle: OlfcSolution) -> float:
    """Largest closed-loop derivative at the oracle-built equilibrium."""
    omega, P, s, _ = equilibrium_from_oracle(scenario, oracle)
    p, q = scenario.final_injections()
    loop = ClosedLoop(scenario)
    loop.p_in[:] = p
    loop.q_in[:] = q
    z = loop.layout.pack(omega[loop.gen], P, s)
    return float(np.max(np.abs(loop.rhs(z, 0, 0))))


def attach_lyapunov(traj: Trajectory, oracle: OlfcSolution | None, fixed_point_tol: float = 1e-6) -> None:
    """Fill ``traj.U``; falls back to the run's own final state when the oracle point is not a fixed point."""
    sc = traj.scenario
    coords, eps = _lyapunov_coordinates(sc, traj.omega, traj.P, traj.controller, traj.mu)
    use_oracle = oracle is not None and fixed_point_residual(sc, oracle) <= fixed_point_tol
    if use_oracle:
        omega, P, s, mu = equilibrium_from_oracle(sc, oracle)
        star = {k: getattr(s, k) for k in ControllerState.field_names()}
        z_star, _ = _lyapunov_coordinates(sc, omega, P, star, mu)
        traj.lyapunov_reference = "oracle"
    else:
        z_star = coords[-1]
        traj.lyapunov_reference = "run-limit"
    dz = coords - z_star
    traj.U = 0.5 * np.sum(dz * dz / eps, axis=1)


def constraint_violations(traj: Trajectory, problem: OlfcProblem) -> dict[str, np.ndarray]:
    """Per-sample worst violation of each constraint family (0 when satisfied)."""
    out = {"chp": [], "d_bounds": [], "heat_buffer": [], "line_flow": []}
    groups = {
        "chp": ("zeta_up", "zeta_lo"), "d_bounds": ("gamma_p", "gamma_m"),
        "heat_buffer": ("delta_p", "delta_m"), "line_flow": ("sigma_p", "sigma_m"),
    }
    for k in range(len(traj)):
        prob = problem.with_injections(traj.p_in[k], traj.q_in[k])
        sl = inequality_slacks(prob, traj.d[k], traj.q[k], traj.phi[k])
        for key, names in groups.items():
            vals = [np.max(sl[nm]) for nm in names if sl[nm].size]
            out[key].append(max([0.0] + [float(v) for v in vals]))
    return {k: np.array(v) for k, v in out.items()}


def settling_time(traj: Trajectory, band: float = SETTLING_BAND) -> float:
    """First instant after which max |omega| stays within ``band`` (inf if it never does)."""
    above = np.flatnonzero(np.max(np.abs(traj.omega), axis=1) > band)
    if above.size == 0:
        return float(traj.time[0])
    if above[-1] == len(traj) - 1:
        return float("inf")
    return float(traj.time[above[-1] + 1])


def lyapunov_check(traj: Trajectory, eta: float = LYAPUNOV_SLACK) -> dict:
    """Count post-disturbance samples where U rises by more than ``eta`` times the sample spacing."""
    if traj.U is None:
        raise ValueError("attach_lyapunov first")
    t0 = traj.scenario.last_disturbance_time
    idx = np.flatnonzero(traj.time >= t0 - 1e-12)
    U = traj.U[idx]
    dt = np.diff(traj.time[idx])
    rise = np.diff(U) - eta * dt
    bad = rise > 0
    steps = max(len(rise), 1)
    return {
        "steps": int(len(rise)),
        "violations": int(bad.sum()),
        "max_violation": float(rise[bad].max()) if bad.any() else 0.0,
        "fraction_ok": float(1.0 - bad.sum() / steps),
    }


def steady_state_report(traj: Trajectory, problem: OlfcProblem, oracle: OlfcSolution,
                        tail_fraction: float = 0.1) -> dict:
    """Tail statistics: frequency, constraint violations, distance to the oracle, U monotonicity.

    ``problem`` is the problem against which violations are judged (e.g. the
    true CHP region even when the controller ignored it); ``oracle`` is the
    optimum the run is compared with.
    """
    n_tail = max(1, int(round(tail_fraction * len(traj))))
    tail = slice(len(traj) - n_tail, len(traj))
    omega_tail = float(np.max(np.abs(traj.omega[tail])))
    viol = constraint_violations(traj, problem)
    final = traj.final_solution()
    controlled = traj.scenario.controlled_problem()
    vflow = virtual_flows(problem, final.phi)
    oracle_vflow = virtual_flows(problem, oracle.phi)
    dist = {
        "d": float(np.max(np.abs(final.d - oracle.d), initial=0.0)),
        "q": float(np.max(np.abs(final.q - oracle.q), initial=0.0)),
        "virtual_flow": float(np.max(np.abs(vflow - oracle_vflow), initial=0.0)),
    }
    report = {
        "scenario": traj.scenario.name,
        "max_tail_omega": omega_tail,
        "max_tail_freq_hz": omega_tail / (2 * np.pi),
        "violation_final": {k: float(v[-1]) for k, v in viol.items()},
        "violation_tail_max": {k: float(v[tail].max()) for k, v in viol.items()},
        "distance_to_oracle": dist,
        "primal_distance": max(dist.values()),
        "final_objective": final.objective,
        "oracle_objective": oracle.objective,
        "settling_time": settling_time(traj),
        "kkt_at_limit": kkt_residual(controlled, _fit_chp_slots(final, controlled))._asdict(),
        "multiplier_clamp_total": traj.clamp_total,
        "multiplier_clamp_max": traj.clamp_max,
        "min_multiplier": float(min(
            [np.min(traj.controller[k]) for k in ControllerState.MULTIPLIERS if traj.controller[k].size],
            default=0.0,
        )),
    }
    if traj.U is not None:
        report["lyapunov_reference"] = traj.lyapunov_reference
        report["lyapunov"] = lyapunov_check(traj)
    report["converged"] = bool(omega_tail <= OMEGA_TOL and report["primal_distance"] <= PRIMAL_TOL)
    return report


@dataclass
class SweepResult:
    value: float
    verdict: str
    report: dict | None
    trajectory: Trajectory | None = None


def classify(traj: Trajectory, report: dict) -> str:
    if report["converged"]:
        return "converged"
    # A tail that is not smaller than the window before it is a sustained oscillation.
    n = len(traj)
    w = max(1, n // 10)
    last = np.max(np.abs(traj.omega[n - w:]))
    prev = np.max(np.abs(traj.omega[n - 2 * w:n - w]))
    return "unstable" if last >= prev else "slow"


def run_and_report(scenario: Scenario, oracle: OlfcSolution | None = None, lyapunov: bool = True):
    """Simulate, attach the Lyapunov monitor and build the steady-state report.

    Returns ``(trajectory, report, oracle)``; on blow-up the trajectory is
    partial and the report is None.
    """
    if oracle is None:
        oracle = centralized_solve(scenario.controlled_problem())
    try:
        traj = simulate(scenario)
    except NumericalBlowup as exc:
        return exc.trajectory, None, oracle
    if lyapunov:
        attach_lyapunov(traj, oracle)
    report = steady_state_report(traj, scenario.true_problem(), oracle)
    return traj, report, oracle


def _sweep_one(args):
    scenario, k, keep = args
    sc = replace(scenario, damping=InaccurateDamping("multiplier", float(k)), name=f"{scenario.name}/k={k:g}")
    traj, report, _ = run_and_report(sc)
    if report is None:
        verdict = "unstable"
    else:
        verdict = classify(traj, report)
        report["settling_time"] = settling_time(traj)
    return SweepResult(float(k), verdict, report, traj if keep else None)


def sweep(scenario: Scenario, values, jobs: int = 1, keep_trajectories: bool = False) -> list[SweepResult]:
    """Run ``scenario`` with controller damping ``k * D`` for each ``k``.

    Verdicts: ``converged``, ``slow`` (still decaying at the horizon) or
    ``unstable`` (blow-up or non-decaying oscillation).
    """
    values = [float(v) for v in values]
    if any(v <= 0 for v in values):
        raise ValueError("damping multipliers must be > 0")
    tasks = [(scenario, v, keep_trajectories) for v in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    return sorted(results, key=lambda r: r.value)
