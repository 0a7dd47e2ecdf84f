"""Porting of defaulted members' client portfolios to surviving takers.

A taker keeps a ported portfolio as a separate book: it retains its
volatility and stays driven by the market latent of the member it came
from. The taker's client account is then margined on the combined scale of
its books (see :func:`ccpxva.margining.account_scale`), and IM, SLOIM and
the Cover-2 default fund are recomputed on the post-porting network.
``merge=True`` instead nets the ported nominal into the taker's own book.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .margining import compute_margins
from .network import ClearingNetwork, PortedBook, Position
from .simulation import SimConfig, parallel_map, sample_batch
from .xva import XvaBreakdown, compute_all_xva


class PortingError(ValueError):
    pass


def apply_porting(
    net: ClearingNetwork,
    defaulted: Iterable[int],
    assignment: Mapping[int, int],
    merge: bool = False,
) -> ClearingNetwork:
    """Network after the defaulted members' client positions move to their takers.

    Defaulted members leave the network (their house positions are
    liquidated outside the model). CCP member lists follow the positions.
    """
    defaulted = set(defaulted)
    if not defaulted:
        return net
    ids = set(net.member_ids)
    if defaulted - ids:
        raise PortingError(f"unknown defaulted members {sorted(defaulted - ids)}")
    if set(assignment) != defaulted:
        raise PortingError("assignment must map every defaulted member to a taker")
    for d, t in assignment.items():
        if t in defaulted:
            raise PortingError(f"taker {t} of member {d} is itself in default")
        if t not in ids:
            raise PortingError(f"unknown taker {t}")

    incoming: dict[int, list[tuple[int, float, float, int]]] = {}
    for d, t in assignment.items():
        m = net.member(d)
        for pos in m.positions:
            if pos.client_nominal != 0.0:
                incoming.setdefault(t, []).append((pos.ccp_id, pos.client_nominal, m.volatility(pos.ccp_id), d))
        for b in m.ported_books:
            incoming.setdefault(t, []).append((b.ccp_id, b.nominal, b.volatility, b.driver))

    members = []
    for m in net.members:
        if m.id in defaulted:
            continue
        books = incoming.get(m.id)
        if not books:
            members.append(m)
            continue
        if merge:
            positions = {p.ccp_id: p for p in m.positions}
            vols = dict(m.volatility_per_ccp)
            for cid, nominal, vol, _ in books:
                if cid in positions:
                    p = positions[cid]
                    positions[cid] = replace(p, client_nominal=p.client_nominal + nominal)
                else:
                    positions[cid] = Position(cid, client_nominal=nominal)
                    vols[cid] = vol
            members.append(replace(m, positions=tuple(positions.values()), volatility_per_ccp=vols))
        else:
            extra = tuple(PortedBook(cid, nominal, vol, driver) for cid, nominal, vol, driver in books)
            members.append(replace(m, ported_books=m.ported_books + extra))
    return net.with_members(members)


@dataclass(frozen=True)
class FtpQuote:
    """Aggregate incremental XVA cost of one porting assignment.

    Deltas are post-porting minus pre-default values summed over all
    survivors; ``self_*`` restrict the sums to the takers.
    """

    assignment: dict[int, int]
    delta_cmva: float
    delta_ccva: float
    delta_kva: float
    delta_bcva: float = 0.0
    delta_bmva: float = 0.0
    delta_fva: float = 0.0
    self_cmva: float = 0.0
    self_ccva: float = 0.0
    self_kva: float = 0.0
    per_member: dict[int, tuple[float, float, float]] = field(default_factory=dict)

    @property
    def ftp_total(self) -> float:
        return (self.delta_cmva + self.delta_ccva + self.delta_kva
                + self.delta_bcva + self.delta_bmva + self.delta_fva)

    @property
    def takers(self) -> tuple[int, ...]:
        return tuple(self.assignment[d] for d in sorted(self.assignment))

    @property
    def sort_key(self):
        return (self.ftp_total, self.takers)


_METRICS = ("cmva", "ccva", "kva", "bcva", "bmva", "fva")


class PortingStudy:
    """Incremental XVA of porting assignments with common random numbers.

    Scenario batches are drawn once on the pre-default network. Draws are
    keyed by member, so the batches of any post-porting network are column
    subsets of them; reusing them pairs pre and post runs path by path.
    """

    def __init__(self, net: ClearingNetwork, defaulted: Iterable[int], sim: SimConfig, merge: bool = False):
        self.net = net
        self.defaulted = tuple(sorted(set(defaulted)))
        self.sim = sim
        self.merge = merge
        self.survivors = [i for i in net.member_ids if i not in self.defaulted]
        if not self.survivors:
            raise PortingError("no surviving member to take the portfolios")
        self.batches = [
            sample_batch(net, sim.params, sim.batch_size, sim.seed, b) for b in range(sim.n_batches)
        ]
        self.baseline, _ = compute_all_xva(net, sim, members=self.survivors, batches=self.batches)

    def post_xva(self, assignment: Mapping[int, int]) -> dict[int, XvaBreakdown]:
        post = apply_porting(self.net, self.defaulted, assignment, self.merge)
        batches = [b.restrict(post) for b in self.batches] if post is not self.net else self.batches
        schedule = compute_margins(post, self.sim.params.rho_mkt)
        xva, _ = compute_all_xva(post, replace(self.sim, workers=1), schedule, batches=batches)
        return xva

    def quote(self, assignment: Mapping[int, int]) -> FtpQuote:
        assignment = dict(assignment)
        post = self.post_xva(assignment)
        takers = set(assignment.values())
        totals = dict.fromkeys(_METRICS, 0.0)
        selfs = dict.fromkeys(_METRICS, 0.0)
        per = {}
        for mid in self.survivors:
            d = {k: getattr(post[mid], k) - getattr(self.baseline[mid], k) for k in _METRICS}
            per[mid] = (d["cmva"], d["ccva"], d["kva"])
            for k in _METRICS:
                totals[k] += d[k]
                if mid in takers:
                    selfs[k] += d[k]
        return FtpQuote(
            assignment,
            totals["cmva"], totals["ccva"], totals["kva"], totals["bcva"], totals["bmva"], totals["fva"],
            selfs["cmva"], selfs["ccva"], selfs["kva"], per,
        )

    def candidates(self, takers: Sequence[int] | None = None) -> list[dict[int, int]]:
        pool = list(self.survivors if takers is None else takers)
        return [dict(zip(self.defaulted, combo)) for combo in itertools.product(pool, repeat=len(self.defaulted))]

    def optimize(self, takers: Sequence[int] | None = None, workers: int | None = None) -> list[FtpQuote]:
        quotes = parallel_map(self.quote, self.candidates(takers), workers or self.sim.workers)
        return sorted(quotes, key=lambda q: q.sort_key)


def ftp_of_assignment(
    net: ClearingNetwork,
    defaulted: Iterable[int],
    assignment: Mapping[int, int],
    sim: SimConfig,
    merge: bool = False,
) -> FtpQuote:
    """Incremental FTP of one assignment against the pre-default network."""
    return PortingStudy(net, defaulted, sim, merge).quote(assignment)


def optimize_porting(
    net: ClearingNetwork,
    defaulted: Iterable[int],
    sim: SimConfig,
    merge: bool = False,
    takers: Sequence[int] | None = None,
) -> list[FtpQuote]:
    """All one-taker-per-portfolio assignments ranked by total incremental FTP.

    Ties are broken by the takers' ids.
    """
    return PortingStudy(net, defaulted, sim, merge).optimize(takers)


def dispersion(quotes: Sequence[FtpQuote]) -> dict[str, float]:
    """Standard deviation across candidates of each aggregate delta."""
    return {k: float(np.std([getattr(q, f"delta_{k}") for q in quotes], ddof=1)) if len(quotes) > 1 else 0.0
            for k in ("cmva", "ccva", "kva")}
