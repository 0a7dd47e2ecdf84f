"""Clearing network domain model.

A network is a set of clearing members, each holding client and house
accounts on one or more CCP services, plus optional bilateral netting sets
with counterparties outside the clearing network.

Sign convention: every nominal is the signed size of the holder's position
facing the CCP (or bilateral counterparty). Over the liquidation period the
amount owed by the holder is ``-nominal * vol * sqrt(period) * Z`` where ``Z``
is the holder's market latent, so a long position gains when ``Z`` rises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

BUSINESS_DAYS_PER_YEAR = 252


@dataclass(frozen=True)
class BilateralSet:
    """A bilateral netting set of a member with a non-member counterparty."""

    counterparty_default_prob: float
    nominal: float
    volatility: float
    mtm: float = 0.0
    vm: float | None = None  # VM received; None means fully margined (vm == mtm)
    im_received: float = 0.0
    im_posted: float = 0.0

    @property
    def vm_received(self) -> float:
        return self.mtm if self.vm is None else self.vm


@dataclass(frozen=True)
class Position:
    ccp_id: int
    client_nominal: float = 0.0
    house_nominal: float = 0.0
    # annual default probability of the cleared client; None means risk-free
    client_default_prob: float | None = None


@dataclass(frozen=True)
class PortedBook:
    """Client book taken over from a defaulted member.

    The book keeps its original volatility and stays driven by the market
    latent of ``driver`` (the member it was ported from).
    """

    ccp_id: int
    nominal: float
    volatility: float
    driver: int


@dataclass(frozen=True)
class Book:
    """One margined book of an account, as seen by the margin and loss code."""

    nominal: float
    volatility: float
    driver: int


@dataclass(frozen=True)
class Member:
    id: int
    annual_default_prob: float
    positions: tuple[Position, ...] = ()
    volatility_per_ccp: Mapping[int, float] = field(default_factory=dict)
    bilateral_netting_sets: tuple[BilateralSet, ...] = ()
    ported_books: tuple[PortedBook, ...] = ()
    # per-member wrong-way correlation; None uses the copula default
    rho_wwr: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(self.positions))
        object.__setattr__(self, "bilateral_netting_sets", tuple(self.bilateral_netting_sets))
        object.__setattr__(self, "ported_books", tuple(self.ported_books))
        object.__setattr__(self, "volatility_per_ccp", dict(self.volatility_per_ccp))

    @property
    def ccp_ids(self) -> list[int]:
        ids = [p.ccp_id for p in self.positions]
        ids += [b.ccp_id for b in self.ported_books if b.ccp_id not in ids]
        return ids

    def position(self, ccp_id: int) -> Position | None:
        for p in self.positions:
            if p.ccp_id == ccp_id:
                return p
        return None

    def volatility(self, ccp_id: int) -> float:
        return self.volatility_per_ccp[ccp_id]

    def client_books(self, ccp_id: int) -> list[Book]:
        books = []
        pos = self.position(ccp_id)
        if pos is not None and pos.client_nominal != 0.0:
            books.append(Book(pos.client_nominal, self.volatility(ccp_id), self.id))
        books += [
            Book(b.nominal, b.volatility, b.driver)
            for b in self.ported_books
            if b.ccp_id == ccp_id and b.nominal != 0.0
        ]
        return books

    def house_books(self, ccp_id: int) -> list[Book]:
        pos = self.position(ccp_id)
        if pos is None or pos.house_nominal == 0.0:
            return []
        return [Book(pos.house_nominal, self.volatility(ccp_id), self.id)]

    def net_nominal(self, ccp_id: int) -> float:
        pos = self.position(ccp_id)
        total = 0.0 if pos is None else pos.client_nominal + pos.house_nominal
        return total + sum(b.nominal for b in self.ported_books if b.ccp_id == ccp_id)

    def size(self) -> float:
        """Absolute nominal summed over CCP services (used for size rankings)."""
        return sum(abs(self.net_nominal(c)) for c in self.ccp_ids)


@dataclass(frozen=True)
class CcpService:
    id: int
    member_ids: tuple[int, ...] = ()
    im_confidence: float = 0.95
    sloim_confidence: float = 0.97
    mpor_days: float = 2.0
    liquidation_days: float = 5.0
    degrees_of_freedom: int = 3
    # public disclosure inputs: {"total_df": ..., "top5_df_share": ...}
    disclosure: Mapping[str, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "member_ids", tuple(self.member_ids))

    @property
    def mpor_years(self) -> float:
        return self.mpor_days / BUSINESS_DAYS_PER_YEAR

    @property
    def liquidation_years(self) -> float:
        return self.liquidation_days / BUSINESS_DAYS_PER_YEAR


@dataclass(frozen=True)
class ClearingNetwork:
    members: tuple[Member, ...]
    ccps: tuple[CcpService, ...]
    horizon_years: float = 5.0
    hurdle_rate: float = 0.10
    ec_quantile: float = 0.9975
    funding_blend_ratio: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "ccps", tuple(self.ccps))

    @property
    def member_ids(self) -> list[int]:
        return [m.id for m in self.members]

    def member(self, member_id: int) -> Member:
        for m in self.members:
            if m.id == member_id:
                return m
        raise KeyError(f"unknown member {member_id}")

    def ccp(self, ccp_id: int) -> CcpService:
        for c in self.ccps:
            if c.id == ccp_id:
                return c
        raise KeyError(f"unknown CCP {ccp_id}")

    def members_of(self, ccp_id: int) -> list[Member]:
        ids = set(self.ccp(ccp_id).member_ids)
        return [m for m in self.members if m.id in ids]

    def with_members(self, members: Iterable[Member]) -> "ClearingNetwork":
        """Copy with a new member list; CCP member lists follow the positions."""
        members = tuple(members)
        ccps = tuple(
            replace(c, member_ids=tuple(m.id for m in members if c.id in m.ccp_ids))
            for c in self.ccps
        )
        return replace(self, members=members, ccps=ccps)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    ccp_id: int | None = None
    member_id: int | None = None

    def __str__(self) -> str:
        return self.message


def _is_prob(p) -> bool:
    return isinstance(p, (int, float)) and 0.0 < p < 1.0


def validate_network(net: ClearingNetwork) -> list[Violation]:
    """Check the structural assumptions of the model.

    Returns an empty list when the network is usable. Checked: parameter
    domains, reference integrity, the per-CCP clearing condition (member
    nominals sum to zero) and, for members declaring bilateral sets, that
    the bilateral nominals mirror the house nominals.
    """
    out: list[Violation] = []
    if not net.horizon_years > 0:
        out.append(Violation("config", f"horizon must be positive, got {net.horizon_years}"))
    if not 0.0 <= net.hurdle_rate <= 1.0:
        out.append(Violation("config", f"hurdle rate {net.hurdle_rate} outside [0, 1]"))
    if not _is_prob(net.ec_quantile):
        out.append(Violation("config", f"EC quantile {net.ec_quantile} outside (0, 1)"))
    if not 0.0 < net.funding_blend_ratio <= 1.0:
        out.append(Violation("config", f"funding blend ratio {net.funding_blend_ratio} outside (0, 1]"))

    ccp_ids = [c.id for c in net.ccps]
    if len(set(ccp_ids)) != len(ccp_ids):
        out.append(Violation("reference", "duplicate CCP ids"))
    member_ids = net.member_ids
    if len(set(member_ids)) != len(member_ids):
        out.append(Violation("reference", "duplicate member ids"))

    for c in net.ccps:
        if not (0.5 < c.im_confidence < c.sloim_confidence < 1.0):
            out.append(Violation("ccp", f"CCP {c.id} needs 1/2 < alpha < alpha' < 1", ccp_id=c.id))
        if not (0 < c.mpor_days < c.liquidation_days):
            out.append(Violation("ccp", f"CCP {c.id} needs 0 < MPoR < liquidation period", ccp_id=c.id))
        if c.degrees_of_freedom < 1:
            out.append(Violation("ccp", f"CCP {c.id} degrees of freedom must be >= 1", ccp_id=c.id))
        for mid in c.member_ids:
            if mid not in member_ids:
                out.append(Violation("reference", f"CCP {c.id} lists unknown member {mid}", c.id, mid))

    for m in net.members:
        if not _is_prob(m.annual_default_prob):
            out.append(Violation("member", f"member {m.id} default probability {m.annual_default_prob} outside (0, 1)", member_id=m.id))
        seen = [p.ccp_id for p in m.positions]
        for cid in set(seen):
            if seen.count(cid) > 1:
                out.append(Violation("member", f"member {m.id} appears twice on CCP {cid}", cid, m.id))
        for cid in m.ccp_ids:
            if cid not in ccp_ids:
                out.append(Violation("reference", f"member {m.id} references unknown CCP {cid}", cid, m.id))
                continue
            if m.id not in net.ccp(cid).member_ids:
                out.append(Violation("reference", f"member {m.id} not listed by CCP {cid}", cid, m.id))
            if m.position(cid) is not None:
                vol = m.volatility_per_ccp.get(cid)
                if vol is None or not 0.0 < vol < 1.0:
                    out.append(Violation("member", f"member {m.id} volatility on CCP {cid} outside (0, 1)", cid, m.id))
                pdc = m.position(cid).client_default_prob
                if pdc is not None and not _is_prob(pdc):
                    out.append(Violation("member", f"member {m.id} client default probability {pdc} outside (0, 1)", cid, m.id))
        for b in m.ported_books:
            if not b.volatility > 0:
                out.append(Violation("member", f"member {m.id} ported book needs a positive volatility", b.ccp_id, m.id))
        if m.rho_wwr is not None and m.rho_wwr < 0:
            out.append(Violation("member", f"member {m.id} wrong-way correlation must be >= 0", member_id=m.id))
        for b in m.bilateral_netting_sets:
            if not _is_prob(b.counterparty_default_prob) or not b.volatility > 0:
                out.append(Violation("bilateral", f"member {m.id} has an invalid bilateral set", member_id=m.id))
            if min(b.im_received, b.im_posted) < 0:
                out.append(Violation("bilateral", f"member {m.id} bilateral margins must be nonnegative", member_id=m.id))
        if m.bilateral_netting_sets:
            bil = sum(b.nominal for b in m.bilateral_netting_sets)
            house = sum(p.house_nominal for p in m.positions)
            tol = 1e-9 * max([abs(bil), abs(house), 1.0])
            if abs(bil - house) > tol:
                out.append(Violation(
                    "clearing",
                    f"member {m.id} bilateral nominal sum = {bil:g} differs from house nominal {house:g}",
                    member_id=m.id,
                ))

    for c in net.ccps:
        nominals = []
        for m in net.members:
            if c.id in m.ccp_ids:
                pos = m.position(c.id)
                if pos is not None:
                    nominals += [pos.client_nominal, pos.house_nominal]
                nominals += [b.nominal for b in m.ported_books if b.ccp_id == c.id]
        total = math.fsum(nominals)
        scale = max([abs(x) for x in nominals] + [0.0])
        if abs(total) > 1e-9 * scale or (scale == 0.0 and total != 0.0):
            out.append(Violation("clearing", f"CCP {c.id} nominal sum = {total:g}", ccp_id=c.id))
    return out


def hazard_rate(annual_default_prob: float) -> float:
    """Constant hazard matching a one-year default probability."""
    return -math.log1p(-annual_default_prob)


def horizon_default_prob(member: Member | float, horizon_years: float) -> float:
    """Default probability over ``horizon_years`` under a constant hazard rate."""
    if not horizon_years > 0:
        raise ValueError(f"horizon must be positive, got {horizon_years}")
    p = member.annual_default_prob if isinstance(member, Member) else float(member)
    return -math.expm1(horizon_years * math.log1p(-p))


def blended_spread(net: ClearingNetwork, member: Member) -> float:
    """Funding spread applied to segregated collateral (IM and DFC)."""
    return net.funding_blend_ratio * horizon_default_prob(member, net.horizon_years)
