"""
Scalar quadratic bilevel family with a closed-form hypergradient.

    F(u, v) = (v - a)^2        upper objective
    f(u, v) = (v - u)^2        lower objective, minimized at v*(u) = u

so dF(u, v*(u))/du = 2 (u - a). With v = u and xi = 1/2 the one-step
hypergradient is exact; other (xi, v) show the approximation gap, which does
not depend on the finite-difference epsilon because f is quadratic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import bilevel as BL
from . import tensor as T

DEFAULT_US = (-1.0, 0.0, 2.0)
DEFAULT_XIS = (0.0, 0.25, 0.5, 1.0)
DEFAULT_EPSILONS = (1e-6, 1e-4, 1e-2, 1e-1)


def quadratic_family(a: float, upper_key: str = "u"):
    """(F, f) on maps {upper_key: scalar} / {"v": scalar}."""

    def upper(U, L, batch):
        return T.square(T.sub(L["v"], a))

    def lower(U, L, batch):
        return T.square(T.sub(L["v"], U[upper_key]))

    return upper, lower


def exact_hypergradient(u: float, a: float) -> float:
    return 2.0 * (u - a)


@dataclass
class OracleRow:
    solver: str
    u: float
    v: float
    a: float
    xi: float
    eps: float
    direct: float
    approx: float
    exact: float

    @property
    def gap(self) -> float:
        return self.approx - self.exact


def oracle_row(u: float, a: float, xi: float, eps: float, v: Optional[float] = None, solver: str = "BL") -> OracleRow:
    v = u if v is None else v
    key = "u" if solver == "BL" else "v_meta"
    upper, lower = quadratic_family(a, key)
    U = {key: np.array(u, dtype=np.float64)}
    L = {"v": np.array(v, dtype=np.float64)}
    hg = BL.hypergradient(U, L, upper, lower, None, None, xi, eps)
    # the direct term is the upper gradient at v' on its own
    _, direct, _ = BL.value_and_grad(upper, U, hg.v_prime, None)
    return OracleRow(solver, u, v, a, xi, eps, float(direct[key]), float(hg.grad[key]), exact_hypergradient(u, a))


def oracle_grid(
    us: Iterable[float] = DEFAULT_US,
    xis: Iterable[float] = DEFAULT_XIS,
    epsilons: Iterable[float] = DEFAULT_EPSILONS,
    a: float = 1.0,
    solvers: Iterable[str] = ("BL", "RBL"),
) -> list:
    return [oracle_row(u, a, xi, eps, solver=s) for s in solvers for u in us for xi in xis for eps in epsilons]


def format_table(rows: Iterable[OracleRow]) -> str:
    lines = [f"{'solver':<6} {'u':>6} {'v':>6} {'a':>6} {'xi':>6} {'eps':>8} {'direct':>10} {'approx':>10} {'exact':>10} {'gap':>10}"]
    for r in rows:
        lines.append(
            f"{r.solver:<6} {r.u:>6.2f} {r.v:>6.2f} {r.a:>6.2f} {r.xi:>6.2f} {r.eps:>8.0e} "
            f"{r.direct:>10.6f} {r.approx:>10.6f} {r.exact:>10.6f} {r.gap:>10.2e}"
        )
    return "\n".join(lines)
