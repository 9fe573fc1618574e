"""Synchronous neighbour-to-neighbour exchange of (mu, phi).

Every line carries one message in each direction per round. A message from a
line's sending bus also carries that line's flow-limit multipliers, which the
sending bus owns; the receiving bus needs them in its angle update.

Message order inside an inbox is canonical: by recipient position, then
sender id, then line position.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np
from numba import njit

from .network import NetworkTopology


@njit(cache=True)
def gather_messages(sender, line, orient, mu, phi, sigma_p, sigma_m):
    """Message columns under ideal delivery: each slot reads its sender's current values."""
    k = sender.shape[0]
    mu_m = np.empty(k)
    phi_m = np.empty(k)
    sp = np.full(k, np.nan)
    sm = np.full(k, np.nan)
    for j in range(k):
        mu_m[j] = mu[sender[j]]
        phi_m[j] = phi[sender[j]]
        if orient[j] < 0:
            sp[j] = sigma_p[line[j]]
            sm[j] = sigma_m[line[j]]
    return mu_m, phi_m, sp, sm


@dataclass(frozen=True)
class NeighborMessage:
    sender: int
    recipient: int
    line: str
    mu: float
    phi: float
    round: int
    sigma_p: float | None = None
    sigma_m: float | None = None


@dataclass(frozen=True)
class CommConfig:
    """Idealised by default. ``replay_on_drop`` resends the last delivered value for a dropped message."""

    delay_rounds: int = 0
    drop_probability: float = 0.0
    seed: int = 0
    replay_on_drop: bool = False

    def __post_init__(self):
        if self.delay_rounds < 0:
            raise ValueError("delay_rounds must be >= 0")
        if not 0.0 <= self.drop_probability < 1.0:
            raise ValueError("drop_probability must be in [0, 1)")

    @property
    def ideal(self) -> bool:
        return self.delay_rounds == 0 and self.drop_probability == 0.0


@dataclass
class Inbox:
    """A batch of delivered messages stored column-wise.

    ``recipient``/``sender`` are bus positions, ``line`` a line position and
    ``orient`` is +1 when the recipient is the line's sending bus.
    """

    recipient: np.ndarray
    sender: np.ndarray
    line: np.ndarray
    orient: np.ndarray
    mu: np.ndarray
    phi: np.ndarray
    sigma_p: np.ndarray
    sigma_m: np.ndarray
    round: int
    topology: NetworkTopology

    def __len__(self):
        return len(self.recipient)

    def for_bus(self, bus: int) -> list[NeighborMessage]:
        topo = self.topology
        i = topo.index(bus)
        out = []
        for k in np.flatnonzero(self.recipient == i):
            carries_sigma = self.orient[k] < 0
            out.append(NeighborMessage(
                sender=topo.buses[self.sender[k]],
                recipient=bus,
                line=topo.lines[self.line[k]].name,
                mu=float(self.mu[k]),
                phi=float(self.phi[k]),
                round=self.round,
                sigma_p=float(self.sigma_p[k]) if carries_sigma else None,
                sigma_m=float(self.sigma_m[k]) if carries_sigma else None,
            ))
        return out


class Exchanger:
    """Stateful delivery service holding the per-round history needed for delays and drops."""

    def __init__(self, topology: NetworkTopology, config: CommConfig | None = None, log: bool = False):
        self.topology = topology
        self.config = config or CommConfig()
        f, t = topology.from_idx, topology.to_idx
        m = topology.n_lines
        ids = np.array(topology.buses)
        recipient = np.concatenate([f, t])
        sender = np.concatenate([t, f])
        line = np.concatenate([np.arange(m), np.arange(m)])
        orient = np.concatenate([np.ones(m), -np.ones(m)])
        order = np.lexsort((line, ids[sender] if m else sender, recipient))
        self.recipient = recipient[order].astype(int)
        self.sender = sender[order].astype(int)
        self.line = line[order].astype(int)
        self.orient = orient[order]
        self._history: deque = deque(maxlen=self.config.delay_rounds + 1)
        self._last_delivered = None
        self._drop_round = None
        self._drop_mask = None
        self.log_rows: list | None = [] if log else None

    def _snapshot(self, mu, phi, sigma_p, sigma_m):
        return gather_messages(self.sender, self.line, self.orient, mu, phi,
                               np.asarray(sigma_p, float), np.asarray(sigma_m, float))

    def _dropped(self, rnd: int) -> np.ndarray:
        if self._drop_round != rnd:
            rng = np.random.default_rng([self.config.seed, rnd])
            self._drop_mask = rng.random(len(self.recipient)) < self.config.drop_probability
            self._drop_round = rnd
        return self._drop_mask

    def exchange(self, rnd: int, mu, phi, sigma_p=None, sigma_m=None, start_of_round: bool = True) -> Inbox:
        """Deliver one round of messages.

        ``start_of_round`` marks the values broadcast at the beginning of the
        round; intermediate calls within a round (integrator stages) deliver
        fresh values only under ideal communication.
        """
        m = self.topology.n_lines
        sigma_p = np.zeros(m) if sigma_p is None else sigma_p
        sigma_m = np.zeros(m) if sigma_m is None else sigma_m
        cfg = self.config
        fresh = self._snapshot(np.asarray(mu, float), np.asarray(phi, float), sigma_p, sigma_m)
        if start_of_round:
            if not self._history or self._history[-1][0] != rnd:
                self._history.append((rnd, fresh))
        if cfg.ideal:
            values = fresh
            keep = slice(None)
        else:
            if cfg.delay_rounds:
                values = self._history[0][1] if self._history else fresh
            else:
                values = fresh
            keep = slice(None)
            if cfg.drop_probability > 0:
                dropped = self._dropped(rnd)
                if cfg.replay_on_drop and self._last_delivered is not None:
                    values = tuple(np.where(dropped, old, new) for old, new in zip(self._last_delivered, values))
                elif dropped.any():
                    keep = ~dropped
                if start_of_round:
                    if self._last_delivered is None:
                        self._last_delivered = values
                    else:
                        self._last_delivered = tuple(
                            np.where(dropped, old, new) for old, new in zip(self._last_delivered, values)
                        )
        mu_m, phi_m, sp, sm = values
        if start_of_round and self.log_rows is not None:
            ids = self.topology.buses
            for k in (np.arange(len(self.recipient))[keep]):
                self.log_rows.append((rnd, f"{ids[self.sender[k]]}->{ids[self.recipient[k]]}", mu_m[k], phi_m[k]))
        return Inbox(
            recipient=self.recipient[keep], sender=self.sender[keep], line=self.line[keep],
            orient=self.orient[keep], mu=mu_m[keep], phi=phi_m[keep],
            sigma_p=sp[keep], sigma_m=sm[keep], round=rnd, topology=self.topology,
        )

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "edge", "mu", "phi"])
            for rnd, edge, mu, phi in self.log_rows or []:
                w.writerow([rnd, edge, repr(float(mu)), repr(float(phi))])


def exchange_round(mu, phi, topology: NetworkTopology, config: CommConfig | None = None, round: int = 0,
                   sigma_p=None, sigma_m=None) -> dict[int, list[NeighborMessage]]:
    """One memoryless round of exchange, returned as a per-bus inbox.

    Delays need history, so they are only honoured through :class:`Exchanger`;
    here a delayed configuration simply replays the current values.
    """
    inbox = Exchanger(topology, config).exchange(round, mu, phi, sigma_p, sigma_m)
    return {bus: inbox.for_bus(bus) for bus in topology.buses}
