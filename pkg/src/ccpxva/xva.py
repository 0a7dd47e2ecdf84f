"""CCP default waterfall, member trading losses and the XVA stack.

For a reference member on one path, the trading loss is

    C = sum_ccp mu^ccp H^ccp + sum_clients (1-J_c)(dP_c - IM_c)^+ + sum_b (1-J_b)(dP_b - IM_b)^+

where ``H`` is the CCP loss beyond the defaulters' collateral and ``mu`` the
reference member's share of it. Expectations are taken under the reference
member's survival measure, i.e. over the paths where it survives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .margining import MarginSchedule, compute_margins, initial_margin
from .network import BUSINESS_DAYS_PER_YEAR, Book, ClearingNetwork, horizon_default_prob
from .simulation import ScenarioBatch, SimConfig, books_delta_p, parallel_map, sample_batch

DEFAULT_LIQUIDATION_DAYS = 5.0


class EstimationError(ValueError):
    pass


@dataclass
class WaterfallResult:
    """Per-CCP waterfall outcome on every path of a batch.

    ``members[ccp]`` lists the member ids of that CCP; ``mu[ccp]`` and
    ``loss_over_collateral[ccp]`` are ``[path, member]`` arrays in that order.
    """

    members: dict[int, tuple[int, ...]]
    H: dict[int, np.ndarray]
    mu: dict[int, np.ndarray]
    loss_over_collateral: dict[int, np.ndarray]

    def ccp_default(self, ccp_id: int) -> np.ndarray:
        """Paths where no member of the CCP survives to absorb ``H``."""
        return self.mu[ccp_id].sum(axis=1) == 0.0

    def mu_of(self, ccp_id: int, member_id: int) -> np.ndarray:
        return self.mu[ccp_id][:, self.members[ccp_id].index(member_id)]


def waterfall(batch: ScenarioBatch, net: ClearingNetwork, schedule: MarginSchedule) -> WaterfallResult:
    """Losses over collateral of the defaulters and their allocation to survivors.

    ``H = sum_i (1-J_i) [(dP_client - IM)^+ + (dP_house - IM_house)^+ - DFC]^+``
    and ``mu_i = J_i DFC_i / sum_j J_j DFC_j`` (zero when nobody survives).
    """
    res = WaterfallResult({}, {}, {}, {})
    for ccp in net.ccps:
        mems = net.members_of(ccp.id)
        ids = tuple(m.id for m in mems)
        n, k = batch.n_paths, len(mems)
        dl = ccp.liquidation_years
        surv = batch.survival[:, [batch.column(i) for i in ids]] if k else np.ones((n, 0), bool)
        loss = np.zeros((n, k))
        dfc = np.array([schedule.dfc[(i, ccp.id)] for i in ids])
        for j, m in enumerate(mems):
            key = (m.id, ccp.id)
            over = np.maximum(books_delta_p(batch, m.client_books(ccp.id), dl) - schedule.im[key], 0.0)
            house = m.house_books(ccp.id)
            if house:
                over += np.maximum(books_delta_p(batch, house, dl) - schedule.im_house[key], 0.0)
            loss[:, j] = np.maximum(over - dfc[j], 0.0)
        loss[surv] = 0.0
        funded = surv * dfc
        total = funded.sum(axis=1, keepdims=True)
        mu = np.divide(funded, total, out=np.zeros_like(funded), where=total > 0)
        res.members[ccp.id] = ids
        res.H[ccp.id] = loss.sum(axis=1)
        res.mu[ccp.id] = mu
        res.loss_over_collateral[ccp.id] = loss
    return res


def _bilateral_liquidation_years(net: ClearingNetwork) -> float:
    days = net.ccps[0].liquidation_days if net.ccps else DEFAULT_LIQUIDATION_DAYS
    return days / BUSINESS_DAYS_PER_YEAR


def member_loss(
    batch: ScenarioBatch,
    net: ClearingNetwork,
    schedule: MarginSchedule,
    wf: WaterfallResult,
    member_id: int,
    by_ccp: bool = False,
):
    """Per-path trading loss of ``member_id`` (all paths; mask survivors yourself).

    With ``by_ccp`` returns ``(total, {ccp: cleared component})`` where the
    cleared component of a CCP is its ``mu H`` plus risky-client losses.
    """
    m = net.member(member_id)
    n = batch.n_paths
    total = np.zeros(n)
    parts = {}
    for cid in m.ccp_ids:
        part = wf.mu_of(cid, member_id) * wf.H[cid]
        pos = m.position(cid)
        if pos is not None and pos.client_default_prob is not None and pos.client_nominal != 0.0:
            ccp = net.ccp(cid)
            own = [Book(pos.client_nominal, m.volatility(cid), m.id)]
            im_c = initial_margin(pos.client_nominal, m.volatility(cid), ccp.mpor_years,
                                  ccp.im_confidence, ccp.degrees_of_freedom)
            dp = books_delta_p(batch, own, ccp.liquidation_years)
            part = part + ~batch.client_survival[(member_id, cid)] * np.maximum(dp - im_c, 0.0)
        parts[cid] = part
        total += part
    if m.bilateral_netting_sets:
        total += bilateral_loss(batch, net, member_id)
    return (total, parts) if by_ccp else total


def bilateral_loss(batch: ScenarioBatch, net: ClearingNetwork, member_id: int) -> np.ndarray:
    """Bilateral component of :func:`member_loss`."""
    m = net.member(member_id)
    out = np.zeros(batch.n_paths)
    root = math.sqrt(_bilateral_liquidation_years(net))
    for idx, b in enumerate(m.bilateral_netting_sets):
        # the counterparty holds -nominal, so it owes +nominal * vol * sqrt(dl) * Z
        dp = b.nominal * b.volatility * root * batch.bilateral_market[(member_id, idx)]
        out += ~batch.bilateral_survival[(member_id, idx)] * np.maximum(dp - b.im_received, 0.0)
    return out


# expected shortfall -----------------------------------------------------------


def expected_shortfall(losses, alpha: float) -> float:
    """Mean of the top ``M - floor(alpha M)`` order statistics."""
    x = np.asarray(losses, dtype=float).ravel()
    m = x.size
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    # small slack for 1/(1-alpha) computed in floating point
    if m == 0 or m * (1.0 - alpha) < 1.0 - 1e-9:
        raise EstimationError(f"insufficient tail sample: {m} paths at level {alpha}")
    k = min(int(math.floor(alpha * m)), m - 1)
    return float(np.partition(x, k)[k:].mean())


def batched_expected_shortfall(samples: Sequence[np.ndarray], alpha: float) -> tuple[float, float]:
    """Mean of per-batch ES and its standard deviation across batches."""
    es = np.array([expected_shortfall(s, alpha) for s in samples])
    return float(es.mean()), float(es.std(ddof=1)) if len(es) > 1 else float("nan")


# XVA -------------------------------------------------------------------------


@dataclass(frozen=True)
class XvaBreakdown:
    member_id: int
    ccva: float
    cmva: float
    bcva: float
    bmva: float
    fva: float
    ec: float
    kva: float
    ca: float
    ftp: float
    ccva_se: float
    bcva_se: float
    ec_se: float
    kva_se: float
    n_paths_surviving: int
    n_paths: int

    @property
    def cva(self) -> float:
        return self.ccva + self.bcva

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in XVA_COLUMNS}


XVA_COLUMNS = (
    "member_id", "ccva", "ccva_se", "cmva", "bcva", "bcva_se", "bmva", "fva",
    "ec", "ec_se", "kva", "kva_se", "ca", "ftp", "n_paths_surviving", "n_paths",
)


@dataclass
class MemberLosses:
    """Trading-loss samples of one member on its surviving paths, per batch."""

    member_id: int
    batches: list[np.ndarray] = field(default_factory=list)
    bilateral: list[np.ndarray] = field(default_factory=list)
    n_paths: list[int] = field(default_factory=list)
    batch_ids: list[int] = field(default_factory=list)
    path_index: list[np.ndarray] | None = None
    by_ccp: dict[int, list[np.ndarray]] | None = None

    def pooled(self) -> np.ndarray:
        return np.concatenate(self.batches) if self.batches else np.zeros(0)

    @property
    def n_surviving(self) -> int:
        return sum(len(b) for b in self.batches)


def _batch_losses(batch, net, schedule, members, keep_index, by_ccp):
    wf = waterfall(batch, net, schedule)
    out = {}
    for mid in members:
        alive = batch.survives(mid)
        total, parts = member_loss(batch, net, schedule, wf, mid, by_ccp=True)
        bil = bilateral_loss(batch, net, mid) if net.member(mid).bilateral_netting_sets else None
        out[mid] = (
            total[alive],
            None if bil is None else bil[alive],
            np.flatnonzero(alive).astype(np.int32) if keep_index else None,
            {c: p[alive] for c, p in parts.items()} if by_ccp else None,
        )
    return out


def simulate_losses(
    net: ClearingNetwork,
    sim: SimConfig,
    schedule: MarginSchedule | None = None,
    members: Iterable[int] | None = None,
    keep_index: bool = False,
    by_ccp: bool = False,
    batches: Sequence[ScenarioBatch] | None = None,
) -> dict[int, MemberLosses]:
    """Run the Monte-Carlo and collect per-member loss samples.

    Batches are sampled (or taken from ``batches``) and processed in
    parallel; the result is independent of the worker count.
    """
    schedule = schedule or compute_margins(net, sim.params.rho_mkt)
    members = list(net.member_ids if members is None else members)

    def work(b):
        batch = b if isinstance(b, ScenarioBatch) else sample_batch(net, sim.params, sim.batch_size, sim.seed, b)
        return batch.batch_id, batch.n_paths, _batch_losses(batch, net, schedule, members, keep_index, by_ccp)

    items = list(batches) if batches is not None else list(range(sim.n_batches))
    results = parallel_map(work, items, sim.workers)
    out = {mid: MemberLosses(mid, path_index=[] if keep_index else None, by_ccp={} if by_ccp else None)
           for mid in members}
    for batch_id, n, per in results:
        for mid, (c, bil, idx, parts) in per.items():
            ml = out[mid]
            ml.batches.append(c)
            if bil is not None:
                ml.bilateral.append(bil)
            ml.n_paths.append(n)
            ml.batch_ids.append(batch_id)
            if keep_index:
                ml.path_index.append(idx)
            if by_ccp:
                for cid, p in parts.items():
                    ml.by_ccp.setdefault(cid, []).append(p)
    return out


def _mean_and_se(samples: Sequence[np.ndarray]) -> tuple[float, float]:
    n = sum(len(s) for s in samples)
    mean = math.fsum(float(s.sum()) for s in samples) / n
    if len(samples) > 1:
        means = np.array([s.mean() if len(s) else mean for s in samples])
        return mean, float(means.std(ddof=1) / math.sqrt(len(samples)))
    pooled = np.concatenate(samples)
    return mean, float(pooled.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")


def xva_from_losses(
    net: ClearingNetwork, schedule: MarginSchedule, losses: MemberLosses, alpha: float | None = None
) -> XvaBreakdown:
    """XVA stack of one member from its loss samples."""
    alpha = net.ec_quantile if alpha is None else alpha
    if losses.n_surviving == 0:
        raise EstimationError(f"member {losses.member_id} survives on no simulated path")
    m = net.member(losses.member_id)
    gamma = horizon_default_prob(m, net.horizon_years)
    gamma_blend = net.funding_blend_ratio * gamma

    cva, cva_se = _mean_and_se(losses.batches)
    if losses.bilateral:
        bcva, bcva_se = _mean_and_se(losses.bilateral)
    else:
        bcva, bcva_se = 0.0, 0.0
    ccva, ccva_se = cva - bcva, cva_se
    if losses.bilateral:
        _, ccva_se = _mean_and_se([c - b for c, b in zip(losses.batches, losses.bilateral)])

    es_mean, es_std = batched_expected_shortfall(losses.batches, alpha)
    ec = es_mean - cva  # ES(C - CVA) = ES(C) - CVA
    ec_se = es_std / math.sqrt(len(losses.batches)) if len(losses.batches) > 1 else float("nan")

    cmva = gamma_blend * schedule.cleared_collateral(m.id)
    bmva = gamma_blend * math.fsum(b.im_posted for b in m.bilateral_netting_sets)
    unsecured = math.fsum(b.mtm - b.vm_received for b in m.bilateral_netting_sets)
    fva = gamma / (1 + gamma) * max(unsecured - (ccva + cmva + bcva + bmva) - ec, 0.0)
    h = net.hurdle_rate
    kva = h / (1 + h) * ec
    ca = ccva + cmva + bcva + bmva + fva
    return XvaBreakdown(
        member_id=m.id, ccva=ccva, cmva=cmva, bcva=bcva, bmva=bmva, fva=fva, ec=ec, kva=kva,
        ca=ca, ftp=ca + kva, ccva_se=ccva_se, bcva_se=bcva_se, ec_se=ec_se,
        kva_se=h / (1 + h) * ec_se, n_paths_surviving=losses.n_surviving, n_paths=sum(losses.n_paths),
    )


def compute_xva(
    net: ClearingNetwork,
    schedule: MarginSchedule,
    batches: Iterable[ScenarioBatch],
    reference_member: int,
    alpha: float | None = None,
) -> XvaBreakdown:
    """XVA stack of ``reference_member`` over the given scenario batches."""
    ml = MemberLosses(reference_member)
    for batch in batches:
        per = _batch_losses(batch, net, schedule, [reference_member], False, False)
        c, bil, _, _ = per[reference_member]
        ml.batches.append(c)
        if bil is not None:
            ml.bilateral.append(bil)
        ml.n_paths.append(batch.n_paths)
        ml.batch_ids.append(batch.batch_id)
    return xva_from_losses(net, schedule, ml, alpha)


def compute_all_xva(
    net: ClearingNetwork,
    sim: SimConfig,
    schedule: MarginSchedule | None = None,
    members: Iterable[int] | None = None,
    batches: Sequence[ScenarioBatch] | None = None,
    **loss_options,
) -> tuple[dict[int, XvaBreakdown], dict[int, MemberLosses]]:
    """XVA breakdown of every member (or ``members``) plus the loss samples."""
    schedule = schedule or compute_margins(net, sim.params.rho_mkt)
    losses = simulate_losses(net, sim, schedule, members, batches=batches, **loss_options)
    return {mid: xva_from_losses(net, schedule, ml) for mid, ml in losses.items()}, losses


def aggregate_by_batch(net: ClearingNetwork, losses: dict[int, MemberLosses], alpha: float | None = None) -> dict:
    """Aggregate CCVA and KVA over members with batch-based standard errors.

    Per batch the member sums are formed first, so the standard errors
    account for the dependence between members' losses.
    """
    alpha = net.ec_quantile if alpha is None else alpha
    h = net.hurdle_rate
    n_batches = len(next(iter(losses.values())).batches)
    ccva_b = np.zeros(n_batches)
    kva_b = np.zeros(n_batches)
    total_ccva = 0.0
    for ml in losses.values():
        cleared = [c - b for c, b in zip(ml.batches, ml.bilateral)] if ml.bilateral else ml.batches
        cva = ml.pooled().mean()
        total_ccva += float(np.concatenate(cleared).mean())
        for j in range(n_batches):
            ccva_b[j] += cleared[j].mean()
            kva_b[j] += h / (1 + h) * (expected_shortfall(ml.batches[j], alpha) - cva)
    root = math.sqrt(n_batches)
    se = (lambda x: float(x.std(ddof=1) / root)) if n_batches > 1 else (lambda x: float("nan"))
    return {"agg_ccva": total_ccva, "agg_ccva_se": se(ccva_b), "agg_kva": float(kva_b.mean()), "agg_kva_se": se(kva_b)}
