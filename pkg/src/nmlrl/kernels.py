"""Loop-heavy kernels: wall collisions, rollouts, visibility tests, soft-Q sweeps.

Each kernel has a numba ``@njit`` implementation and a pure-numpy one.  The
numba path is used unless ``NMLRL_DISABLE_NUMBA=1`` is set in the environment
(or numba is not importable).  Both paths follow the same operation order, so
results agree up to libm rounding of ``exp``/``log``; ``tests/test_kernels.py``
checks the two against each other.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

NUMBA_DISABLED = os.environ.get("NMLRL_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")
USE_NUMBA = njit is not None and not NUMBA_DISABLED

WALL_MARGIN = 1e-6
BOUND = 4.0


def _maybe_jit(fn):
    if njit is None:
        return fn
    return njit(cache=True)(fn)


# ------------------------------------------------------------------ dynamics


def _move_axis_py(pos, other, delta, walls, axis):
    """Move ``pos`` by ``delta`` along one axis, stopping short of blocking walls.

    ``walls`` rows are (x0, y0, x1, y1).  Only walls perpendicular to the motion
    axis can block; ``other`` is the fixed coordinate on the other axis.
    """
    target = pos + delta
    n = walls.shape[0]
    for k in range(n):
        if axis == 0:
            if walls[k, 0] != walls[k, 2]:
                continue
            c = walls[k, 0]
            lo = min(walls[k, 1], walls[k, 3])
            hi = max(walls[k, 1], walls[k, 3])
        else:
            if walls[k, 1] != walls[k, 3]:
                continue
            c = walls[k, 1]
            lo = min(walls[k, 0], walls[k, 2])
            hi = max(walls[k, 0], walls[k, 2])
        if other < lo or other > hi:
            continue
        if delta > 0 and pos < c and target >= c - WALL_MARGIN:
            target = c - WALL_MARGIN
        elif delta < 0 and pos > c and target <= c + WALL_MARGIN:
            target = c + WALL_MARGIN
    lim = BOUND - WALL_MARGIN
    if target > lim:
        target = lim
    if target < -lim:
        target = -lim
    return target


_move_axis_nb = _maybe_jit(_move_axis_py)


def _make_step(move_axis):
    def _step(walls, x, y, ax, ay, scale):
        ax = min(max(ax, -1.0), 1.0)
        ay = min(max(ay, -1.0), 1.0)
        dx = scale * ax
        dy = scale * ay
        if dx == 0.0 or dy == 0.0:
            nx = move_axis(x, y, dx, walls, 0) if dx != 0.0 else x
            ny = move_axis(y, nx, dy, walls, 1) if dy != 0.0 else y
            return nx, ny
        # diagonal: first wall contact along the straight segment, then slide
        t_hit = 2.0
        hit_axis = -1
        hit_stop = 0.0
        for k in range(walls.shape[0]):
            if walls[k, 0] == walls[k, 2]:
                axis = 0
                c = walls[k, 0]
                lo = min(walls[k, 1], walls[k, 3])
                hi = max(walls[k, 1], walls[k, 3])
                p, d, o, od = x, dx, y, dy
            else:
                axis = 1
                c = walls[k, 1]
                lo = min(walls[k, 0], walls[k, 2])
                hi = max(walls[k, 0], walls[k, 2])
                p, d, o, od = y, dy, x, dx
            if d > 0 and p < c:
                stop = c - WALL_MARGIN
            elif d < 0 and p > c:
                stop = c + WALL_MARGIN
            else:
                continue
            if abs(stop - p) > abs(d):
                continue
            t = (stop - p) / d
            o_c = o + (c - p) / d * od
            if o_c < lo - WALL_MARGIN or o_c > hi + WALL_MARGIN:
                continue
            t = max(t, 0.0)
            if t < t_hit:
                t_hit = t
                hit_axis = axis
                hit_stop = stop
        lim = BOUND - WALL_MARGIN
        if hit_axis < 0:
            return min(max(x + dx, -lim), lim), min(max(y + dy, -lim), lim)
        if hit_axis == 0:
            mid = min(max(y + t_hit * dy, -lim), lim)
            return hit_stop, move_axis(mid, hit_stop, (1.0 - t_hit) * dy, walls, 1)
        mid = min(max(x + t_hit * dx, -lim), lim)
        return move_axis(mid, hit_stop, (1.0 - t_hit) * dx, walls, 0), hit_stop
    return _step


_step_py = _make_step(_move_axis_py)
_step_nb = _maybe_jit(_make_step(_move_axis_nb))


def step_point(walls, x, y, ax, ay, scale):
    fn = _step_nb if USE_NUMBA else _step_py
    return fn(walls, float(x), float(y), float(ax), float(ay), float(scale))


def _cell_of(x, y, n):
    size = 2.0 * BOUND / n
    cx = int(np.floor((x + BOUND) / size))
    cy = int(np.floor((y + BOUND) / size))
    cx = min(max(cx, 0), n - 1)
    cy = min(max(cy, 0), n - 1)
    return cy * n + cx


def _make_rollout(step_fn, cell_fn):
    def _rollout(walls, start, q, actions, scale, temperature, horizon, n_steps,
                 n_cells_side, uniforms, greedy, out_states, out_cells, out_actions,
                 out_next_cells, out_t):
        n_act = actions.shape[0]
        x = start[0]
        y = start[1]
        t = 0
        probs = np.empty(n_act)
        for i in range(n_steps):
            s = cell_fn(x, y, n_cells_side)
            row = q[s]
            a_sel = n_act - 1
            if greedy:
                best = row.max()
                n_best = 0
                for a in range(n_act):
                    if row[a] >= best:
                        n_best += 1
                pick = min(int(uniforms[i] * n_best), n_best - 1)
                for a in range(n_act):
                    if row[a] >= best:
                        if pick == 0:
                            a_sel = a
                            break
                        pick -= 1
            else:
                m = row.max()
                tot = 0.0
                for a in range(n_act):
                    probs[a] = np.exp((row[a] - m) / temperature)
                    tot += probs[a]
                u = uniforms[i] * tot
                acc = 0.0
                for a in range(n_act):
                    acc += probs[a]
                    if u < acc:
                        a_sel = a
                        break
            nx, ny = step_fn(walls, x, y, actions[a_sel, 0], actions[a_sel, 1], scale)
            out_states[i, 0] = x
            out_states[i, 1] = y
            out_states[i, 2] = nx
            out_states[i, 3] = ny
            out_cells[i] = s
            out_actions[i] = a_sel
            out_next_cells[i] = cell_fn(nx, ny, n_cells_side)
            out_t[i] = t
            t += 1
            if t >= horizon:
                t = 0
                x = start[0]
                y = start[1]
            else:
                x = nx
                y = ny
    return _rollout


_rollout_py = _make_rollout(_step_py, _cell_of)
if njit is not None:
    # closure over jitted helpers; not cacheable, compiles on first use
    _rollout_nb = njit(_make_rollout(_step_nb, njit(cache=True)(_cell_of)))
else:  # pragma: no cover
    _rollout_nb = _rollout_py


def rollout(walls, start, q, actions, scale, temperature, horizon, n_steps,
            n_cells_side, uniforms, greedy=False):
    """Run ``n_steps`` of a Boltzmann (or greedy, random tie-break) policy.

    Episodes restart from ``start`` every ``horizon`` steps.  Returns a dict of
    arrays: ``states`` (n, 4) with (x, y, x', y'), ``cells``, ``actions``,
    ``next_cells`` and ``t`` (step index within the episode).
    """
    out_states = np.zeros((n_steps, 4))
    out_cells = np.zeros(n_steps, dtype=np.int64)
    out_actions = np.zeros(n_steps, dtype=np.int64)
    out_next = np.zeros(n_steps, dtype=np.int64)
    out_t = np.zeros(n_steps, dtype=np.int64)
    fn = _rollout_nb if USE_NUMBA else _rollout_py
    fn(np.ascontiguousarray(walls, dtype=np.float64),
       np.asarray(start, dtype=np.float64), np.ascontiguousarray(q, dtype=np.float64),
       np.ascontiguousarray(actions, dtype=np.float64), float(scale), float(temperature),
       int(horizon), int(n_steps), int(n_cells_side),
       np.ascontiguousarray(uniforms, dtype=np.float64), bool(greedy),
       out_states, out_cells, out_actions, out_next, out_t)
    return {"states": out_states, "cells": out_cells, "actions": out_actions,
            "next_cells": out_next, "t": out_t}


# ---------------------------------------------------------------- visibility


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _on_segment(ax, ay, bx, by, px, py):
    return (min(ax, bx) - 1e-12 <= px <= max(ax, bx) + 1e-12
            and min(ay, by) - 1e-12 <= py <= max(ay, by) + 1e-12)


def _blocked_py(p, q, walls):
    """``out[i, j]`` is True when segment p[i] -> q[j] touches any wall."""
    n = p.shape[0]
    m = q.shape[0]
    out = np.zeros((n, m), dtype=np.bool_)
    for i in range(n):
        for j in range(m):
            px, py, qx, qy = p[i, 0], p[i, 1], q[j, 0], q[j, 1]
            for k in range(walls.shape[0]):
                ax, ay, bx, by = walls[k, 0], walls[k, 1], walls[k, 2], walls[k, 3]
                d1 = _orient(px, py, qx, qy, ax, ay)
                d2 = _orient(px, py, qx, qy, bx, by)
                d3 = _orient(ax, ay, bx, by, px, py)
                d4 = _orient(ax, ay, bx, by, qx, qy)
                hit = False
                if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and \
                        ((d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)):
                    hit = True
                elif d1 == 0 and _on_segment(px, py, qx, qy, ax, ay):
                    hit = True
                elif d2 == 0 and _on_segment(px, py, qx, qy, bx, by):
                    hit = True
                elif d3 == 0 and _on_segment(ax, ay, bx, by, px, py):
                    hit = True
                elif d4 == 0 and _on_segment(ax, ay, bx, by, qx, qy):
                    hit = True
                if hit:
                    out[i, j] = True
                    break
    return out


def _blocked_np(p, q, walls):
    P = p[:, None, None, :]
    Q = q[None, :, None, :]
    A = walls[None, None, :, 0:2]
    B = walls[None, None, :, 2:4]

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    def on_seg(a, b, c):
        return ((np.minimum(a[..., 0], b[..., 0]) - 1e-12 <= c[..., 0])
                & (c[..., 0] <= np.maximum(a[..., 0], b[..., 0]) + 1e-12)
                & (np.minimum(a[..., 1], b[..., 1]) - 1e-12 <= c[..., 1])
                & (c[..., 1] <= np.maximum(a[..., 1], b[..., 1]) + 1e-12))

    d1 = orient(P, Q, A)
    d2 = orient(P, Q, B)
    d3 = orient(A, B, P)
    d4 = orient(A, B, Q)
    proper = (((d1 > 0) & (d2 < 0)) | ((d1 < 0) & (d2 > 0))) & \
             (((d3 > 0) & (d4 < 0)) | ((d3 < 0) & (d4 > 0)))
    touch = ((d1 == 0) & on_seg(P, Q, A)) | ((d2 == 0) & on_seg(P, Q, B)) | \
            ((d3 == 0) & on_seg(A, B, P)) | ((d4 == 0) & on_seg(A, B, Q))
    return np.any(proper | touch, axis=-1)


if njit is not None:
    _orient_nb = njit(cache=True)(_orient)
    _on_segment_nb = njit(cache=True)(_on_segment)

    @njit(cache=True)
    def _blocked_nb(p, q, walls):
        n = p.shape[0]
        m = q.shape[0]
        out = np.zeros((n, m), dtype=np.bool_)
        for i in range(n):
            for j in range(m):
                px, py, qx, qy = p[i, 0], p[i, 1], q[j, 0], q[j, 1]
                for k in range(walls.shape[0]):
                    ax, ay, bx, by = walls[k, 0], walls[k, 1], walls[k, 2], walls[k, 3]
                    d1 = _orient_nb(px, py, qx, qy, ax, ay)
                    d2 = _orient_nb(px, py, qx, qy, bx, by)
                    d3 = _orient_nb(ax, ay, bx, by, px, py)
                    d4 = _orient_nb(ax, ay, bx, by, qx, qy)
                    hit = False
                    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and \
                            ((d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)):
                        hit = True
                    elif d1 == 0 and _on_segment_nb(px, py, qx, qy, ax, ay):
                        hit = True
                    elif d2 == 0 and _on_segment_nb(px, py, qx, qy, bx, by):
                        hit = True
                    elif d3 == 0 and _on_segment_nb(ax, ay, bx, by, px, py):
                        hit = True
                    elif d4 == 0 and _on_segment_nb(ax, ay, bx, by, qx, qy):
                        hit = True
                    if hit:
                        out[i, j] = True
                        break
        return out
else:  # pragma: no cover
    _blocked_nb = _blocked_py


def segments_blocked(p, q, walls):
    p = np.ascontiguousarray(np.atleast_2d(p), dtype=np.float64)
    q = np.ascontiguousarray(np.atleast_2d(q), dtype=np.float64)
    walls = np.ascontiguousarray(walls, dtype=np.float64).reshape(-1, 4)
    if len(walls) == 0:
        return np.zeros((len(p), len(q)), dtype=bool)
    if USE_NUMBA:
        return _blocked_nb(p, q, walls)
    return _blocked_np(p, q, walls)


# ------------------------------------------------------------------- soft Q


def _logsumexp_rows_py(q, tau):
    n, a = q.shape
    out = np.empty(n)
    for i in range(n):
        m = q[i, 0]
        for j in range(1, a):
            if q[i, j] > m:
                m = q[i, j]
        s = 0.0
        for j in range(a):
            s += np.exp((q[i, j] - m) / tau)
        out[i] = m + tau * np.log(s / a)
    return out


def _soft_q_py(q, s, a, s2, r, lr, gamma, tau):
    """One synchronous soft-Q minibatch update, in place.

    Targets use the table as it was before the batch; duplicate (s, a) pairs
    accumulate their increments in batch order.  ``lr`` is per transition.
    """
    v = _logsumexp_rows_py(q, tau)
    n = s.shape[0]
    inc = np.empty(n)
    for i in range(n):
        inc[i] = lr[i] * (r[i] + gamma * v[s2[i]] - q[s[i], a[i]])
    for i in range(n):
        q[s[i], a[i]] += inc[i]


def _soft_q_np(q, s, a, s2, r, lr, gamma, tau):
    m = q.max(axis=1, keepdims=True)
    v = m[:, 0] + tau * np.log(np.exp((q - m) / tau).mean(axis=1))
    inc = lr * (r + gamma * v[s2] - q[s, a])
    np.add.at(q, (s, a), inc)


if njit is not None:
    _logsumexp_rows_nb = njit(cache=True)(_logsumexp_rows_py)

    @njit(cache=True)
    def _soft_q_nb(q, s, a, s2, r, lr, gamma, tau):
        v = _logsumexp_rows_nb(q, tau)
        n = s.shape[0]
        inc = np.empty(n)
        for i in range(n):
            inc[i] = lr[i] * (r[i] + gamma * v[s2[i]] - q[s[i], a[i]])
        for i in range(n):
            q[s[i], a[i]] += inc[i]
else:  # pragma: no cover
    _soft_q_nb = _soft_q_py


def soft_q_update(q, s, a, s2, r, lr, gamma, tau):
    """Soft-Q minibatch update of ``q`` in place; returns ``q``."""
    s = np.asarray(s, dtype=np.int64)
    lr = np.broadcast_to(np.asarray(lr, dtype=np.float64), s.shape).copy()
    args = (s, np.asarray(a, dtype=np.int64),
            np.asarray(s2, dtype=np.int64), np.asarray(r, dtype=np.float64),
            lr, float(gamma), float(tau))
    if USE_NUMBA:
        _soft_q_nb(q, *args)
    else:
        _soft_q_np(q, *args)
    return q


def soft_values(q, tau):
    """tau * log mean exp(Q / tau) per row (soft value under a uniform action prior)."""
    m = q.max(axis=1, keepdims=True)
    return m[:, 0] + tau * np.log(np.exp((q - m) / tau).mean(axis=1))
