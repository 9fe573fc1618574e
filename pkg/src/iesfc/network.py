"""Electricity-heat network topology and physical-layer dynamics.

All quantities are deviations from the economic-dispatch operating point.
Frequencies are rad/s internally; divide by 2*pi for Hz.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    susceptance: float

    @property
    def name(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class NetworkTopology:
    """Directed graph of buses and lines.

    Buses are identified by integer ids; internally they are addressed by
    their position in ``buses``. Line orientation only fixes the sign of the
    flow variable.
    """

    buses: tuple[int, ...]
    generator_buses: frozenset[int]
    load_buses: frozenset[int]
    lines: tuple[Line, ...] = ()
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(int(b) for b in self.buses))
        object.__setattr__(self, "generator_buses", frozenset(self.generator_buses))
        object.__setattr__(self, "load_buses", frozenset(self.load_buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        errors = self.validate()
        if errors:
            raise TopologyError("; ".join(errors))
        object.__setattr__(self, "_index", {b: i for i, b in enumerate(self.buses)})

    def validate(self) -> list[str]:
        errors = []
        bus_set = set(self.buses)
        if len(bus_set) != len(self.buses):
            errors.append("duplicate bus ids")
        if self.generator_buses & self.load_buses:
            errors.append(
                f"buses {sorted(self.generator_buses & self.load_buses)} are both generator and load"
            )
        if (self.generator_buses | self.load_buses) != bus_set:
            errors.append("generator and load buses must partition the bus set")
        for line in self.lines:
            if line.from_bus not in bus_set or line.to_bus not in bus_set:
                errors.append(f"line {line.name} references an unknown bus")
            if line.from_bus == line.to_bus:
                errors.append(f"line {line.name} is a self-loop")
            if not line.susceptance > 0:
                errors.append(f"line {line.name} needs susceptance > 0")
        return errors

    @classmethod
    def from_edges(cls, buses, edges, generator_buses=None) -> "NetworkTopology":
        """Convenience constructor; ``edges`` are (from, to, B) triples.

        All buses are generator buses unless ``generator_buses`` says otherwise.
        """
        buses = tuple(buses)
        gens = frozenset(buses if generator_buses is None else generator_buses)
        return cls(
            buses=buses,
            generator_buses=gens,
            load_buses=frozenset(buses) - gens,
            lines=tuple(Line(int(f), int(t), float(b)) for f, t, b in edges),
        )

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def index(self, bus: int) -> int:
        return self._index[bus]

    @property
    def from_idx(self) -> np.ndarray:
        return np.array([self._index[l.from_bus] for l in self.lines], dtype=int)

    @property
    def to_idx(self) -> np.ndarray:
        return np.array([self._index[l.to_bus] for l in self.lines], dtype=int)

    @property
    def susceptance(self) -> np.ndarray:
        return np.array([l.susceptance for l in self.lines], dtype=float)

    @property
    def is_generator(self) -> np.ndarray:
        return np.array([b in self.generator_buses for b in self.buses], dtype=bool)

    def neighbors(self, bus: int) -> list[int]:
        out = set()
        for line in self.lines:
            if line.from_bus == bus:
                out.add(line.to_bus)
            elif line.to_bus == bus:
                out.add(line.from_bus)
        return sorted(out)

    def _adjacency(self) -> csr_matrix:
        n = self.n_buses
        f, t = self.from_idx, self.to_idx
        data = np.ones(len(f))
        return csr_matrix((data, (f, t)), shape=(n, n))

    def components(self) -> np.ndarray:
        """Connected-component label per bus index (lines taken undirected)."""
        _, labels = connected_components(self._adjacency(), directed=False)
        return labels

    def hop_distance(self) -> np.ndarray:
        """Matrix of graph distances in hops (inf between components)."""
        return shortest_path(self._adjacency(), directed=False, unweighted=True)

    def laplacian(self) -> np.ndarray:
        C = build_incidence(self)
        return C @ np.diag(self.susceptance) @ C.T


def build_incidence(topology: NetworkTopology) -> np.ndarray:
    """|N| x |E| incidence matrix: +1 where a line leaves a bus, -1 where it enters."""
    C = np.zeros((topology.n_buses, topology.n_lines))
    for l, line in enumerate(topology.lines):
        C[topology.index(line.from_bus), l] = 1.0
        C[topology.index(line.to_bus), l] = -1.0
    return C


def dc_flow(susceptance, angle_from, angle_to):
    return susceptance * (angle_from - angle_to)


def net_line_injection(bus: int, line_flow, topology: NetworkTopology) -> float:
    """Power leaving ``bus`` over its lines: sum of outgoing minus incoming flows."""
    total = 0.0
    for l, line in enumerate(topology.lines):
        if line.from_bus == bus:
            total += line_flow[l]
        elif line.to_bus == bus:
            total -= line_flow[l]
    return total


def heat_buffer(q_in, q):
    """Heat mismatch absorbed by thermal inertia, Q_in - q."""
    return q_in - q


@dataclass(frozen=True)
class PhysicalParams:
    """Per-bus physical parameters, as arrays ordered like ``topology.buses``.

    ``inertia`` is ignored (and conventionally 0) at load buses.
    """

    inertia: np.ndarray
    damping: np.ndarray
    p_in: np.ndarray
    q_in: np.ndarray
    buffer_lo: np.ndarray
    buffer_hi: np.ndarray

    def __post_init__(self):
        for name in ("inertia", "damping", "p_in", "q_in", "buffer_lo", "buffer_hi"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def validate(self, topology: NetworkTopology) -> list[str]:
        errors = []
        n = topology.n_buses
        for name in ("inertia", "damping", "p_in", "q_in", "buffer_lo", "buffer_hi"):
            if getattr(self, name).shape != (n,):
                errors.append(f"{name} must have one entry per bus ({n})")
        if errors:
            return errors
        gen = topology.is_generator
        for i, bus in enumerate(topology.buses):
            if not self.damping[i] > 0:
                errors.append(
                    f"bus {bus}: damping D must be > 0 (the load-bus balance is solved by dividing by D)"
                )
            if gen[i] and not self.inertia[i] > 0:
                errors.append(f"bus {bus}: generator inertia M must be > 0")
            if not self.buffer_lo[i] <= 0 <= self.buffer_hi[i]:
                errors.append(f"bus {bus}: heat buffer bounds must bracket 0")
        return errors


@dataclass
class PhysicalState:
    """Physical-layer state. Load-bus entries of ``omega`` are algebraic."""

    omega: np.ndarray
    line_flow: np.ndarray
    heat_buffer: np.ndarray

    @classmethod
    def zeros(cls, topology: NetworkTopology) -> "PhysicalState":
        n, m = topology.n_buses, topology.n_lines
        return cls(np.zeros(n), np.zeros(m), np.zeros(n))


@njit(cache=True)
def physics_kernel(omega_gen, line_flow, d, p_in, gen, load, inertia, damping, f, t, B):
    """Swing dynamics at generators, algebraic balance at loads, flow dynamics on lines."""
    n = p_in.shape[0]
    pe = np.zeros(n)
    for l in range(f.shape[0]):
        pe[f[l]] += line_flow[l]
        pe[t[l]] -= line_flow[l]
    omega = np.empty(n)
    omega_dot = np.empty(gen.shape[0])
    for k in range(gen.shape[0]):
        i = gen[k]
        omega[i] = omega_gen[k]
        omega_dot[k] = (p_in[i] - d[i] - damping[i] * omega_gen[k] - pe[i]) / inertia[i]
    for k in range(load.shape[0]):
        i = load[k]
        omega[i] = (p_in[i] - d[i] - pe[i]) / damping[i]
    flow_dot = np.empty(f.shape[0])
    for l in range(f.shape[0]):
        flow_dot[l] = B[l] * (omega[f[l]] - omega[t[l]])
    return omega_dot, flow_dot, omega


class NetworkModel:
    """Precomputed index arrays for fast evaluation of the swing/flow dynamics."""

    def __init__(self, topology: NetworkTopology, params: PhysicalParams):
        errors = params.validate(topology)
        if errors:
            raise TopologyError("; ".join(errors))
        self.topology = topology
        self.params = params
        self.incidence = build_incidence(topology)
        self.B = topology.susceptance
        self.f = topology.from_idx
        self.t = topology.to_idx
        self.gen = np.flatnonzero(topology.is_generator)
        self.load = np.flatnonzero(~topology.is_generator)

    def leaving_power(self, line_flow: np.ndarray) -> np.ndarray:
        return self.incidence @ line_flow

    def load_omega(self, d, line_flow, p_in=None) -> np.ndarray:
        """Frequency at load buses from the algebraic power balance."""
        p = self.params
        p_in = p.p_in if p_in is None else p_in
        pe = self.leaving_power(line_flow)
        i = self.load
        return (p_in[i] - d[i] - pe[i]) / p.damping[i]

    def derivatives(self, omega_gen, line_flow, d, p_in=None):
        """Return (omega_gen_dot, line_flow_dot, omega_all).

        ``omega_all`` has generator entries copied from ``omega_gen`` and load
        entries solved from the algebraic balance; line dynamics use it.
        """
        p = self.params
        p_in = p.p_in if p_in is None else p_in
        return physics_kernel(
            np.asarray(omega_gen, float), np.asarray(line_flow, float), np.asarray(d, float),
            np.asarray(p_in, float), self.gen, self.load, p.inertia, p.damping, self.f, self.t, self.B,
        )


def physical_derivatives(state: PhysicalState, d, params: PhysicalParams, topology: NetworkTopology):
    """Swing, load-balance and line-flow dynamics.

    Returns ``(omega_dot_gen, line_flow_dot, omega_load)`` where the first is
    indexed over generator buses, the last over load buses (in bus order).
    """
    model = NetworkModel(topology, params)
    omega_dot, flow_dot, omega = model.derivatives(
        np.asarray(state.omega, dtype=float)[model.gen], np.asarray(state.line_flow, dtype=float),
        np.asarray(d, dtype=float),
    )
    return omega_dot, flow_dot, omega[model.load]
