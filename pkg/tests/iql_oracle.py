"""Independent oracle for the advantage-weighted closed-form policy.

Solves  max_pi  E_pi[A]  s.t.  KL(pi || behavior) <= eps,  sum pi = 1, pi >= 0
directly with a sequential-quadratic-programming solver. Shares no code with
the production closed form or the in-package mirror-descent checker.
"""

import numpy as np
from scipy.optimize import NonlinearConstraint, minimize


def kl(p, q, tiny=1e-300):
    mask = p > tiny
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], tiny)))))


def solve_kl_constrained(adv, behavior, eps):
    """Numeric maximizer of expected advantage inside a KL ball around behavior."""
    adv = np.asarray(adv, dtype=np.float64)
    b = np.asarray(behavior, dtype=np.float64)
    K = len(adv)
    tiny = 1e-12

    def neg_obj(p):
        return -float(adv @ p)

    def kl_smooth(p):
        ps = np.maximum(p, tiny)
        return float(np.sum(ps * (np.log(ps) - np.log(np.maximum(b, tiny)))))

    res = minimize(
        neg_obj, b.copy(), jac=lambda p: -adv, method="SLSQP",
        bounds=[(0.0, 1.0)] * K,
        constraints=[
            {"type": "eq", "fun": lambda p: p.sum() - 1.0, "jac": lambda p: np.ones(K)},
            NonlinearConstraint(kl_smooth, -np.inf, eps),
        ],
        options={"maxiter": 500, "ftol": 1e-14},
    )
    p = np.maximum(res.x, 0.0)
    return p / p.sum()
