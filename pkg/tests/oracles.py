"""Independent reference implementations used only by the tests.

They share no code with the package paths they check.
"""

import math

import numpy as np


def naive_bsif_codes(image, filters):
    """Per-pixel, per-filter loops with explicit edge clamping."""
    img = [[float(v) for v in row] for row in np.asarray(image)]
    h, w = len(img), len(img[0])
    k, side, _ = np.asarray(filters).shape
    r = side // 2
    filt = np.asarray(filters).tolist()
    codes = [[0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            center = img[y][x]
            code = 0
            for i in range(k):
                s = 0.0
                for a in range(side):
                    yy = min(max(y + a - r, 0), h - 1)
                    for b in range(side):
                        xx = min(max(x + b - r, 0), w - 1)
                        s += filt[i][a][b] * (img[yy][xx] - center)
                if s > 0:
                    code += 2 ** i
            codes[y][x] = code
    return np.array(codes)


def sweep_rates(attack, bona):
    """(APCER, BPCER) in percent at every candidate threshold, by counting."""
    cands = sorted(set(attack) | set(bona), reverse=True)
    taus = [math.inf] + cands + [-math.inf]
    out = []
    for t in taus:
        ap = 100.0 * sum(1 for s in attack if s < t) / len(attack)
        bp = 100.0 * sum(1 for s in bona if s >= t) / len(bona)
        out.append((t, ap, bp))
    return out


def minimax_polyline(points):
    """min over the piecewise-linear DET polyline of max(APCER, BPCER).

    Each segment is checked at its endpoints and at the interior crossing,
    so no assumption about where the global minimum lies is needed.
    """
    best = math.inf
    for (_, a0, b0), (_, a1, b1) in zip(points, points[1:]):
        best = min(best, max(a0, b0), max(a1, b1))
        d0, d1 = a0 - b0, a1 - b1
        if d0 * d1 < 0:
            t = d0 / (d0 - d1)
            best = min(best, max(a0 + t * (a1 - a0), b0 + t * (b1 - b0)))
    return best


def qp_dual(x, y, C, gamma):
    """Dense QP reference for the SVM dual via cvxopt; returns (alpha, objective)."""
    import cvxopt

    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    K = np.exp(-gamma * sq)
    Q = np.outer(y, y) * K
    sol = cvxopt.solvers.qp(
        cvxopt.matrix(Q), cvxopt.matrix(-np.ones(n)),
        cvxopt.matrix(np.vstack([-np.eye(n), np.eye(n)])),
        cvxopt.matrix(np.concatenate([np.zeros(n), np.full(n, float(C))])),
        cvxopt.matrix(y.reshape(1, -1)), cvxopt.matrix(0.0),
        options={"show_progress": False, "abstol": 1e-12, "reltol": 1e-12, "feastol": 1e-12})
    alpha = np.array(sol["x"]).ravel()
    return alpha, dual_objective(alpha, Q)


def dual_objective(alpha, Q):
    return float(alpha.sum() - 0.5 * alpha @ Q @ alpha)


def platt_reference(decisions, labels):
    """Platt likelihood minimized with a generic optimizer (Nelder-Mead then BFGS)."""
    from scipy.optimize import minimize

    f = np.asarray(decisions, dtype=float)
    y = np.asarray(labels)
    n_pos = int((y > 0).sum())
    n_neg = len(y) - n_pos
    t = np.where(y > 0, (n_pos + 1) / (n_pos + 2), 1 / (n_neg + 2))

    def nll(p):
        z = p[0] * f + p[1]
        # -[t log s + (1-t) log(1-s)] with s = 1/(1+e^z)
        return float(np.sum(t * np.logaddexp(0, z) + (1 - t) * np.logaddexp(0, -z)))

    res = minimize(nll, [0.0, 0.0], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12,
                                                                    "maxiter": 20000})
    res = minimize(nll, res.x, method="BFGS", options={"gtol": 1e-10})
    return res.x, t, nll


def exhaustive_quality(size_of, target):
    """Largest q in 1..100 whose size fits the target (1 when none fits)."""
    feasible = [q for q in range(1, 101) if size_of(q) <= target]
    return max(feasible) if feasible else 1


def scalar_rbf(x, y, gamma):
    s = 0.0
    for a, b in zip(x, y):
        s += (a - b) ** 2
    return math.exp(-gamma * s)


def kkt_violation(alpha, y, K, bias, C, tol=1e-3):
    """Largest KKT violation of a dual solution, measured on y_i f(x_i)."""
    f = K @ (alpha * y) + bias
    margin = y * f
    worst = 0.0
    for a, m in zip(alpha, margin):
        if a <= 1e-12:
            worst = max(worst, (1 - tol) - m)
        elif a >= C - 1e-12:
            worst = max(worst, m - (1 + tol))
        else:
            worst = max(worst, abs(m - 1) - tol)
    return worst
