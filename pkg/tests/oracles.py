"""Brute-force reference optima for one- and two-bus problems.

With a single connected component the balance forces sum(d) = sum(P_in), and
on two buses the single line then carries P_in_1 - d_1. That leaves at most
one free electric load and one heat load to scan.
"""

import numpy as np

STEP = 1e-4


def _axis(lo, hi, step=STEP):
    return np.arange(np.ceil(lo / step), np.floor(hi / step) + 1) * step


def _heat_axis(problem, i):
    p = problem.params
    lo = p.q_in[i] - p.buffer_hi[i]
    hi = p.q_in[i] - p.buffer_lo[i]
    return _axis(lo, hi)


def _chp_ok(region, d, q):
    ok = np.ones(np.broadcast(d, q).shape, dtype=bool)
    for k, b in region.upper:
        ok &= q <= k * d + b + 1e-12
    for k, b in region.lower:
        ok &= q >= k * d + b - 1e-12
    return ok


def grid_search(problem):
    """Return (d, q) minimising the cost over a 1e-4 grid."""
    n = problem.n_buses
    assert n in (1, 2) and problem.n_lines <= 1
    p = problem.params
    ce, ch = problem.cost_e, problem.cost_h
    heat = np.flatnonzero(problem.heat_controllable)
    assert len(heat) <= 1
    total = float(np.sum(p.p_in))

    if n == 1:
        d_axis = np.array([total])
    else:
        d_axis = _axis(max(problem.d_lo[0], total - problem.d_hi[1]), min(problem.d_hi[0], total - problem.d_lo[1]))
    d = np.zeros((len(d_axis), n))
    d[:, 0] = d_axis
    if n == 2:
        d[:, 1] = total - d_axis
        line = problem.topology.lines[0]
        sign = 1.0 if problem.topology.index(line.from_bus) == 0 else -1.0
        flow = sign * (p.p_in[0] - d_axis)
        d = d[(flow >= problem.flow_lo[0] - 1e-12) & (flow <= problem.flow_hi[0] + 1e-12)]
    cost_d = np.sum(ce.value(d), axis=1)

    q = np.array(p.q_in, dtype=float)
    if len(heat) == 0:
        k = int(np.argmin(cost_d))
        return d[k], q
    i = int(heat[0])
    q_axis = _heat_axis(problem, i)
    best = (np.inf, None, None)
    for row, c in zip(d, cost_d):
        ok = _chp_ok(problem.chp[i], row[i], q_axis)
        if not ok.any():
            continue
        vals = c + ch.a[i] / 2 * q_axis**2 + ch.b[i] * q_axis
        vals = np.where(ok, vals, np.inf)
        j = int(np.argmin(vals))
        if vals[j] < best[0]:
            best = (vals[j], row, q_axis[j])
    assert best[1] is not None, "grid found no feasible point"
    q[i] = best[2]
    return best[1], q
