"""Initial margin, stressed loss over IM, Cover-2 default fund sizing.

Margins are Student-t value-at-risk figures over the margin period of risk.
An account made of several books (e.g. after a porting) is margined on its
combined scale ``sqrt(a' R a)`` with ``a_k = nominal_k * vol_k`` and
``R_kl = 1`` for books sharing a market driver, ``rho_mkt`` otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, stats

from .network import Book, ClearingNetwork


class MarginError(ValueError):
    pass


def student_t_quantile(p: float, nu: float) -> float:
    return float(stats.t.ppf(p, nu))


def _check_level(alpha: float) -> None:
    if not 0.5 < alpha < 1.0:
        raise MarginError(f"confidence level must lie in (1/2, 1), got {alpha}")


def initial_margin(nominal: float, vol: float, mpor_years: float, alpha: float, nu: float) -> float:
    """``|N| * vol * sqrt(mpor) * t_nu^-1(alpha)``."""
    _check_level(alpha)
    if nu < 1 or mpor_years <= 0:
        raise MarginError("need nu >= 1 and a positive margin period")
    return abs(nominal) * vol * math.sqrt(mpor_years) * student_t_quantile(alpha, nu)


def sloim(nominal: float, vol: float, mpor_years: float, alpha: float, alpha_prime: float, nu: float) -> float:
    """Stressed loss over IM: VaR at ``alpha_prime`` of the loss in excess of IM.

    ``alpha_prime == alpha`` gives zero; a lower ``alpha_prime`` is rejected.
    """
    _check_level(alpha)
    _check_level(alpha_prime)
    if alpha_prime < alpha:
        raise MarginError(f"SLOIM level {alpha_prime} below IM level {alpha}")
    if alpha_prime == alpha:
        return 0.0
    band = student_t_quantile(alpha_prime, nu) - student_t_quantile(alpha, nu)
    return abs(nominal) * vol * math.sqrt(mpor_years) * band


def account_scale(books: Sequence[Book], rho_mkt: float) -> float:
    """Volatility-weighted size of an account, ``sqrt(a' R a)``."""
    if not books:
        return 0.0
    a = np.array([b.nominal * b.volatility for b in books])
    drivers = [b.driver for b in books]
    corr = np.array([[1.0 if x == y else rho_mkt for y in drivers] for x in drivers])
    return float(math.sqrt(max(a @ corr @ a, 0.0)))


def cover2_and_allocate(sloims: Mapping[int, float]) -> tuple[float, dict[int, float]]:
    """Cover-2 default fund and its SLOIM-proportional allocation.

    Returns ``(cover2, dfc)`` with ``cover2`` the sum of the two largest SLOIMs
    (ties broken by member id) and ``dfc[i] = sloim[i] / sum(sloim) * cover2``.
    """
    if len(sloims) < 2:
        raise MarginError("Cover-2 needs at least two members")
    ranked = sorted(sloims.items(), key=lambda kv: (-kv[1], kv[0]))
    cover2 = ranked[0][1] + ranked[1][1]
    total = math.fsum(sloims.values())
    if total <= 0.0:
        return 0.0, {i: 0.0 for i in sloims}
    return cover2, {i: s / total * cover2 for i, s in sloims.items()}


@dataclass
class MarginSchedule:
    """Per (member, ccp) margins and per-CCP Cover-2 default funds."""

    im: dict[tuple[int, int], float] = field(default_factory=dict)
    im_house: dict[tuple[int, int], float] = field(default_factory=dict)
    sloim: dict[tuple[int, int], float] = field(default_factory=dict)
    dfc: dict[tuple[int, int], float] = field(default_factory=dict)
    cover2: dict[int, float] = field(default_factory=dict)

    def cleared_collateral(self, member_id: int) -> float:
        """IM + house IM + DFC summed over the member's CCP services."""
        return math.fsum(
            self.im[k] + self.im_house[k] + self.dfc[k] for k in self.im if k[0] == member_id
        )


def compute_margins(net: ClearingNetwork, rho_mkt: float = 0.2) -> MarginSchedule:
    """Size IM, house IM, SLOIM and DFC for every (member, CCP) pair."""
    sched = MarginSchedule()
    for ccp in net.ccps:
        a, a2, nu, dt = ccp.im_confidence, ccp.sloim_confidence, ccp.degrees_of_freedom, ccp.mpor_years
        per_ccp = {}
        for m in net.members_of(ccp.id):
            client = account_scale(m.client_books(ccp.id), rho_mkt)
            house = account_scale(m.house_books(ccp.id), rho_mkt)
            key = (m.id, ccp.id)
            sched.im[key] = initial_margin(client, 1.0, dt, a, nu)
            sched.im_house[key] = initial_margin(house, 1.0, dt, a, nu)
            sched.sloim[key] = sloim(client, 1.0, dt, a, a2, nu) + sloim(house, 1.0, dt, a, a2, nu)
            per_ccp[m.id] = sched.sloim[key]
        if len(per_ccp) >= 2:
            cover2, dfc = cover2_and_allocate(per_ccp)
        else:
            # a one-member CCP cannot mutualise anything
            cover2, dfc = 0.0, {i: 0.0 for i in per_ccp}
        sched.cover2[ccp.id] = cover2
        for i, v in dfc.items():
            sched.dfc[(i, ccp.id)] = v
    return sched


def _top5_share(b: float, n: int) -> float:
    # (1 - r^5) / (1 - r^n) written with expm1 for small b
    return math.expm1(-5 * b) / math.expm1(-n * b) if b > 0 else 5.0 / n


def fit_exponential_nominals(
    n_members: int, total_df: float, top5_df_share: float, df_per_nominal: float = 1.0
) -> tuple[float, float]:
    """Fit ``N_(i) = a * exp(-b (i + 1))`` to default fund disclosures.

    DF contributions are taken proportional to nominals,
    ``dfc_(i) = df_per_nominal * N_(i)``. ``b`` solves the top-5 share
    equation by bracketing root search; ``a`` then matches ``total_df``.
    """
    if n_members < 6:
        raise MarginError("need at least 6 members to fit a top-5 share")
    if not 0.0 < top5_df_share < 1.0 or total_df <= 0 or df_per_nominal <= 0:
        raise MarginError("invalid disclosure inputs")
    if top5_df_share <= 5.0 / n_members:
        raise MarginError(
            f"no solution: top-5 share {top5_df_share} is not above the uniform share {5.0 / n_members:.6g}"
        )
    f = lambda b: _top5_share(b, n_members) - top5_df_share
    hi = 1.0
    while f(hi) < 0:
        hi *= 2.0
        if hi > 1e6:
            raise MarginError("no solution for the top-5 share")
    # near the uniform limit the root sits just above zero
    b = optimize.brentq(f, 1e-300, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    weights = np.exp(-b * np.arange(1, n_members + 1))
    a = total_df / (df_per_nominal * math.fsum(weights))
    return a, b


def exponential_profile(a: float, b: float, n_members: int) -> np.ndarray:
    return a * np.exp(-b * np.arange(1, n_members + 1))
