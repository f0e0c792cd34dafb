"""The scalar Euler closed loop with measurement error and its certificate.

Plant ``x+ = x + T (x^3 + u)`` with ``u = -xh - 3 xh^3``, ``xh = x + e``.
The certificate uses ``V(x) = x^2``, ``alpha1 = alpha2 = s^2``,
``alpha3 = 3 s^4 + s^2`` and ``rho(s) = s / K``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .certifier import (
    CertificationReport,
    DecreaseGrid,
    LyapunovCandidate,
    Mode,
    Verdict,
    certify_decrease,
    lex_argmin,
    open_fracs,
    GRID_CAVEAT,
)
from .comparison import ComparisonFn, ExprFn
from .models import ClosedLoopModel, composed_model

K_PAPER = 0.025


def _bracket(x, e):
    return 2 * x**3 + 9 * e * x**2 + (9 * e**2 + 1) * x + 3 * e**3 + e


def example_model(x, e, T):
    """``Fbar(x, e, T) = x - T [2x^3 + 9ex^2 + (9e^2+1)x + 3e^3 + e]``."""
    x = np.asarray(x, dtype=float)
    e = np.asarray(e, dtype=float)
    T = np.asarray(T, dtype=float)
    out = x - T * _bracket(x, e)
    return float(out) if out.ndim == 0 else out


def example_closed_loop() -> ClosedLoopModel:
    def fn(x, e, T):
        return example_model(x, e, np.asarray(T)[..., None])

    return ClosedLoopModel(1, 1, analytic=fn, name="paper_example")


def example_composed(method: str = "euler") -> ClosedLoopModel:
    """The same loop assembled from plant, controller and a ZOH step map."""
    return composed_model("x^3+u", "-(x+e)-3*(x+e)^3", method, n=1, q=1, name="paper_example_composed")


def example_coeffs(K: float) -> tuple[float, float, float, float]:
    if K < 0:
        raise ValueError("K must be nonnegative")
    a = 9 * K**6 + 135 * K**4 + 174 * K**3 + 117 * K**2 + 90 * K + 4
    b = 6 * K**4 + 24 * K**3 + 36 * K**2 + 22 * K + 4
    c = K**2 + 2 * K + 1
    d = (6 * K**2 + 18) * K
    return a, b, c, d


def example_ttilde(M: float, K: float = K_PAPER) -> float:
    if not K > 0:
        raise ValueError("K must be positive")
    a, b, c, _ = example_coeffs(K)
    return min(1.0 / (2 * b), 1.0 / (2 * (a * M**4 + c)))


def example_hg(x, e):
    """``(h, g)`` with ``V(Fbar) - V(x) = (h + g T) T`` for ``V = x^2``."""
    p = _bracket(np.asarray(x, dtype=float), np.asarray(e, dtype=float))
    h = -2 * np.asarray(x, dtype=float) * p
    g = p**2
    if np.ndim(h) == 0:
        return float(h), float(g)
    return h, g


@dataclass(frozen=True)
class ExampleCertificate:
    K: float
    a: float
    b: float
    c: float
    d: float
    M: float
    Ttilde: float
    alpha1: ComparisonFn
    alpha2: ComparisonFn
    alpha3: ComparisonFn
    rho: ComparisonFn

    def candidate(self, E: float | None = None) -> LyapunovCandidate:
        """Decrease candidate; the error bound defaults to E = K M."""
        return LyapunovCandidate(
            V=example_V, alpha1=self.alpha1, alpha2=self.alpha2, alpha3=self.alpha3,
            rho=self.rho, M=self.M, E=self.K * self.M if E is None else E, name="x^2",
        )

    def to_dict(self):
        return {"K": self.K, "a": self.a, "b": self.b, "c": self.c, "d": self.d,
                "M": self.M, "Ttilde": self.Ttilde,
                "alpha1": "s^2", "alpha2": "s^2", "alpha3": "3*s^4+s^2", "rho": f"s/{self.K!r}"}


def example_V(x):
    x = np.asarray(x, dtype=float)
    return np.sum(x * x, axis=-1)


def example_certificate(M: float = 1.0, K: float = K_PAPER) -> ExampleCertificate:
    a, b, c, d = example_coeffs(K)
    return ExampleCertificate(
        K=K, a=a, b=b, c=c, d=d, M=M, Ttilde=example_ttilde(M, K),
        alpha1=ExprFn("pow(s,2)"), alpha2=ExprFn("pow(s,2)"), alpha3=ExprFn("3*pow(s,4)+pow(s,2)"),
        rho=ExprFn(f"s/{K!r}"),
    )


def example_grid(M: float, K: float, x_points: int = 2001, e_points: int = 101, T_points: int = 64):
    """Paired (x, e) points with |e| <= K|x| swept per x, plus open T fractions."""
    xs = np.linspace(-M, M, x_points) if M > 0 else np.zeros(1)
    frac = np.linspace(-1.0, 1.0, e_points)
    X = np.repeat(xs, e_points)
    E = (K * np.abs(xs))[:, None] * frac[None, :]
    return DecreaseGrid(X[:, None], E.reshape(-1, 1), open_fracs(T_points), paired=True,
                        spacing=2 * M / (x_points - 1) if M > 0 else 0.0)


def verify_example(M: float = 1.0, K: float = K_PAPER, x_points: int = 2001, e_points: int = 101,
                   T_points: int = 64, cross_check: bool = True, cross_tol: float = 1e-12,
                   workers: int = 1) -> CertificationReport:
    """Check ``h + g T <= -alpha3(|x|)`` on the grid, as the margin
    ``-T (h + g T + alpha3(|x|))``, for ``|e| <= K|x|``, ``|x| <= M`` and
    ``T in (0, Ttilde(M, K))``.

    The same points are pushed through :func:`certify_decrease`; the largest
    margin disagreement is reported in ``grid['cross_check_max_diff']``.
    """
    cert = example_certificate(M, K)
    T_bound = cert.Ttilde
    grid = example_grid(M, K, x_points, e_points, T_points)
    x = grid.x[:, 0]
    e = grid.e[:, 0]
    h, g = example_hg(x, e)
    a3 = 3 * x**4 + x**2
    Ts = grid.T_values(T_bound)
    best = None
    margins = np.empty((len(Ts), len(x)))
    for j, T in enumerate(Ts):
        m = -T * (h + g * T + a3)
        margins[j] = m
        i = lex_argmin(m, np.column_stack([x, e]))
        cand = (float(m[i]), np.array([x[i], e[i], T]))
        if best is None or cand[0] < best[0] or (cand[0] == best[0] and tuple(cand[1]) < tuple(best[1])):
            best = cand
    mm, key = best
    mm += 0.0
    verdict = Verdict.CERTIFIED if mm >= 0 else Verdict.VIOLATED
    info = {"x_points": x_points, "e_points_per_x": e_points, "T_points": T_points, "T_bound": T_bound,
            "M": M, "K": K, "E": K * M, "region": "|e| <= K|x| <= K M", "coefficients": cert.to_dict()}
    caveats = [GRID_CAVEAT]
    if cross_check and M > 0:
        rep = certify_decrease(example_closed_loop(), cert.candidate(), Mode.SISSVSR, T_bound, grid,
                               workers=workers, keep_margins=True)
        shared = rep.evaluated
        diff = np.abs(rep.margins[:, shared] - margins[:, shared])
        scale = np.maximum(np.abs(margins[:, shared]), 1e-300)
        worst_abs = float(diff.max()) if diff.size else 0.0
        worst_rel = float((diff / np.maximum(scale, 1.0)).max()) if diff.size else 0.0
        info["cross_check_points"] = int(shared.sum()) * len(Ts)
        info["cross_check_max_diff"] = worst_abs
        info["certifier_verdict"] = rep.verdict.value
        if worst_rel > cross_tol:
            caveats.append(f"certifier cross-check disagrees by {worst_abs:g}")
    return CertificationReport(verdict, mm, witness={"x": [float(key[0])], "e": [float(key[1])],
                                                     "T": float(key[2])},
                               grid=info, T_used=T_bound, caveats=caveats)
