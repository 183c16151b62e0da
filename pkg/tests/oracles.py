"""Independent reference computations used by the tests.

Nothing here imports package internals beyond plain data types: each
oracle recomputes its quantity from first principles so a bug in the
library cannot silently agree with itself.
"""

import itertools
import math

import numpy as np
from scipy.optimize import brentq

G = 9.80665


def box_inertia(m, L, W, H):
    return np.array([m * (W * W + H * H) / 12, m * (L * L + H * H) / 12,
                     m * (L * L + W * W) / 12])


def point_mass_tensor(masses, points):
    """Full 3x3 inertia tensor of point masses about the origin."""
    I = np.zeros((3, 3))
    for m, r in zip(masses, points):
        r = np.asarray(r, dtype=float)
        I += m * (r @ r * np.eye(3) - np.outer(r, r))
    return I


def viable_counts(mass, L, W, central_mass=0.5, module_mass=0.3, t_max=8.0, d=0.12,
                  threshold=0.6):
    """Even module counts that hover below the threshold and fit on the two long edges."""
    out = []
    if W < d:
        return out
    for n in range(4, 129, 2):
        e = (mass + central_mass + n * module_mass) * G / (n * t_max)
        s = 2 * (L - n / 2 * d)
        if e <= threshold and s > 0:
            out.append((n, e, s))
    return out


def grid_mm(L, n):
    rear = [int(round((-L / 2 + i * L / n) * 1000)) for i in range(n // 2)]
    return rear + [0] + [-p for p in reversed(rear)]


def brute_force_placement(L, W, H, mass, n, d=0.12):
    """Exhaustive minimum of |r_achieved - r_target| over admissible slot subsets.

    Returns (best error, all optimal x-sets) or (None, []) if nothing fits.
    """
    slots = grid_mm(L, n)
    k = n // 2
    dmin = int(round(d * 1000))
    hw = int(round(W / 2 * 1000))
    Ib = box_inertia(mass, L, W, H)
    target = Ib[0] / (Ib[0] + Ib[1])
    best, sets = None, []
    inner = range(1, len(slots) - 1)
    for combo in itertools.combinations(inner, k - 2):
        idx = (0,) + combo + (len(slots) - 1,)
        xs = [slots[i] for i in idx]
        if any(b - a < dmin for a, b in zip(xs, xs[1:])):
            continue
        sy = k * hw
        sx = sum(abs(x) for x in xs)
        err = abs(sy / (sy + sx) - target)
        if best is None or err < best - 1e-15:
            best, sets = err, [xs]
        elif abs(err - best) <= 1e-15:
            sets.append(xs)
    return best, sets


def rate_loop_ultimate(I, tau, b=1.0, delay=0.004, dt=0.004):
    """Phase crossover of b * exp(-s (delay + dt/2)) / (I s (tau s + 1)).

    The zero-order hold contributes half a sample of extra delay. The
    crossover is first bracketed on a dense frequency grid using the
    complex response, then refined with a root finder.
    """
    lag = delay + dt / 2

    def G(w):
        s = 1j * w
        return b * np.exp(-s * lag) / (I * s * (tau * s + 1))

    w = np.linspace(1e-3, math.pi / dt, 200000)
    ph = np.unwrap(np.angle(G(w)))
    j = int(np.argmax(ph <= -math.pi))
    wc = brentq(lambda x: np.unwrap(np.angle(G(np.array([w[0], x]))))[-1] + math.pi,
                w[max(j - 1, 0)], w[j])
    return 1.0 / abs(G(wc)), 2 * math.pi / wc


def x_quad_sign_table():
    """Mixer signs for FL, FR, RL, RR with front-left spinning CW (columns roll, pitch, yaw, thrust)."""
    return np.array([[+1, +1, +1, +1],
                     [-1, +1, -1, +1],
                     [+1, -1, -1, +1],
                     [-1, -1, +1, +1]], dtype=float)


def segments_intersect(p1, p2, p3, p4):
    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    d1, d2 = cross(p3, p4, p1), cross(p3, p4, p2)
    d3, d4 = cross(p1, p2, p3), cross(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def count_self_intersections(xy):
    """Proper crossings between non-adjacent segments of a closed polyline."""
    pts = [tuple(p) for p in xy]
    segs = list(zip(pts, pts[1:]))
    count = 0
    for i in range(len(segs)):
        for j in range(i + 2, len(segs)):
            if i == 0 and j == len(segs) - 1:
                continue
            if segments_intersect(*segs[i], *segs[j]):
                count += 1
    return count


def quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                     w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                     w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2])


def quat_to_matrix(q):
    """Rotate v by q via q v q*, evaluated on the basis vectors."""
    q = np.asarray(q, dtype=float) / np.linalg.norm(q)
    qc = q * np.array([1, -1, -1, -1])
    cols = [quat_mul(quat_mul(q, np.r_[0.0, e]), qc)[1:] for e in np.eye(3)]
    return np.column_stack(cols)


def multirotor_rhs(mass, inertia, rotors, k_tau, tau, areas, cd, cmd_thrust, wind):
    """Right-hand side over [p, v, q, w, f_1..f_n] for a rigid multirotor in NED/FRD.

    rotors: list of (x, y, spin_sign).
    """
    I = np.diag(inertia)
    xs = np.array([r[0] for r in rotors])
    ys = np.array([r[1] for r in rotors])
    ss = np.array([r[2] for r in rotors])
    n = len(rotors)

    def rhs(_t, s):
        v, q, w, f = s[3:6], s[6:10], s[10:13], s[13:13 + n]
        R = quat_to_matrix(q)
        force = R @ np.array([0.0, 0.0, -f.sum()])
        force += R @ (-cd * np.asarray(areas) * (R.T @ (v - np.asarray(wind))))
        acc = force / mass + np.array([0.0, 0.0, G])
        torque = np.array([np.sum(-ys * f), np.sum(xs * f), np.sum(ss * k_tau * f)])
        wdot = np.linalg.solve(I, torque - np.cross(w, I @ w))
        qdot = 0.5 * quat_mul(q, np.r_[0.0, w])
        fdot = (cmd_thrust - f) / tau
        return np.concatenate([v, acc, qdot, wdot, fdot])

    return rhs
