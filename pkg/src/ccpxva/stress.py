"""Stress and reverse stress tests on simulated trading-loss distributions.

Losses here are centered trading losses ``C - CVA`` of a member on its
surviving paths, pooled across batches unless stated otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .margining import MarginSchedule, compute_margins
from .network import ClearingNetwork
from .simulation import SimConfig, sample_batch
from .xva import EstimationError, MemberLosses, member_loss, simulate_losses, waterfall


@dataclass(frozen=True)
class QuantileReport:
    """Order-statistic quantile with a distribution-free confidence bracket.

    ``ci_lo`` and ``ci_hi`` are relative deviations of the bracket ends from
    ``q`` (``ci_lo <= 0 <= ci_hi``); ``lo`` and ``hi`` are the raw values.
    """

    q: float
    ci_lo: float
    ci_hi: float
    p: float
    n_paths: int
    lo: float
    hi: float
    member_id: int | None = None


def _rel(x: float, q: float) -> float:
    return (x - q) / abs(q) if q != 0 else (0.0 if x == q else math.copysign(math.inf, x - q))


def extreme_quantile(losses, p: float, ci_level: float = 0.95, member_id: int | None = None) -> QuantileReport:
    """Empirical ``p``-quantile ``x_(ceil(pM))`` with a binomial bracket.

    Ranks ``(r, s)`` are chosen so that ``P(r <= B <= s - 1) >= ci_level`` for
    ``B ~ Binomial(M, p)``, hence ``P(x_(r) <= q_p <= x_(s)) >= ci_level``.
    """
    x = np.sort(np.asarray(losses, dtype=float).ravel())
    m = x.size
    if not 0.0 < p < 1.0 or not 0.0 < ci_level < 1.0:
        raise ValueError("p and ci_level must lie in (0, 1)")
    if m == 0 or (1.0 - p) * m < 20 - 1e-9:
        raise EstimationError(f"insufficient tail sample: (1-p)M = {(1.0 - p) * m:.3g} < 20")
    k = max(int(math.ceil(p * m - 1e-9)), 1)
    q = float(x[k - 1])
    tail = (1.0 - ci_level) / 2.0
    r = int(stats.binom.ppf(tail, m, p))
    s = int(stats.binom.ppf(1.0 - tail, m, p)) + 1
    r, s = min(max(r, 1), m), min(max(s, 1), m)
    lo, hi = float(x[r - 1]), float(x[s - 1])
    return QuantileReport(q, _rel(lo, q), _rel(hi, q), p, m, lo, hi, member_id)


@dataclass(frozen=True)
class RstResult:
    """Probability of a loss at or above ``threshold`` with a batch-based CI.

    ``ci_rel`` is the relative half-width ``z * se / probability``;
    ``flagged`` marks zero hits (degenerate interval).
    """

    probability: float
    std_err: float
    ci_rel: float
    threshold: float
    n_hits: int
    n_paths: int
    flagged: bool = False


def rst_probability(loss_batches, threshold: float, ci_level: float = 0.95) -> RstResult:
    """Empirical ``P(loss >= threshold)`` over surviving paths.

    ``loss_batches`` is one array or a list of per-batch arrays; the standard
    error comes from the spread of the per-batch frequencies.
    """
    if isinstance(loss_batches, np.ndarray) and loss_batches.ndim == 1:
        loss_batches = [loss_batches]
    batches = [np.asarray(b, dtype=float) for b in loss_batches]
    hits = np.array([int((b >= threshold).sum()) for b in batches])
    sizes = np.array([b.size for b in batches])
    n = int(sizes.sum())
    if n == 0:
        raise EstimationError("no surviving paths")
    prob = hits.sum() / n
    if len(batches) > 1:
        freq = hits / np.maximum(sizes, 1)
        se = float(freq.std(ddof=1) / math.sqrt(len(batches)))
    else:
        se = math.sqrt(prob * (1 - prob) / n)
    z = stats.norm.ppf(0.5 + ci_level / 2.0)
    ci_rel = float(z * se / prob) if prob > 0 else math.nan
    return RstResult(float(prob), se, ci_rel, threshold, int(hits.sum()), n, flagged=bool(hits.sum() == 0))


def leave_one_out_es(losses, alpha: float) -> tuple[float, np.ndarray, np.ndarray]:
    """ES and per-scenario contributions for the tail scenarios.

    Returns ``(es, order, delta)`` where ``order`` are indices (into
    ``losses``) of the tail scenarios sorted by decreasing loss and
    ``delta[j] = ES - ES^{-m'}`` with
    ``ES^{-m'} = ((M - floor(aM)) ES - x_m') / (M - 1 - floor(a(M - 1)))``.
    """
    x = np.asarray(losses, dtype=float).ravel()
    m = x.size
    k = int(math.floor(alpha * m))
    if m - k < 1 or m < 2:
        raise EstimationError("insufficient tail sample")
    order = np.argsort(-x, kind="stable")[: m - k]
    es = float(x[order].mean())
    denom = m - 1 - int(math.floor(alpha * (m - 1)))
    es_without = ((m - k) * es - x[order]) / denom
    return es, order, es - es_without


@dataclass
class ScenarioDescriptor:
    rank: int
    total_loss: float
    n_defaults: int
    mu: float
    defaulter_ids: list[int]
    losses_over_collateral: dict[int, float]
    delta_es: float = 0.0
    batch_id: int | None = None
    path: int | None = None
    per_ccp_mu: dict[int, float] = field(default_factory=dict)
    sample_index: int | None = None


def ec_scenario_contributions(
    losses,
    alpha: float,
    top_k: int = 20,
    anatomy: Callable[[int], tuple[list[int], dict[int, float], float]] | None = None,
) -> list[ScenarioDescriptor]:
    """Worst tail scenarios with their leave-one-out EC contributions.

    ``anatomy(i)`` maps a sample index to ``(defaulter_ids,
    losses_over_collateral, mu)``; without it only loss and delta are filled.
    """
    x = np.asarray(losses, dtype=float).ravel()
    _, order, delta = leave_one_out_es(x, alpha)
    out = []
    for rank, (i, d) in enumerate(zip(order[:top_k], delta[:top_k]), start=1):
        ids, loc, mu = anatomy(int(i)) if anatomy else ([], {}, math.nan)
        out.append(ScenarioDescriptor(rank, float(x[i]), len(ids), mu, ids, loc, float(d), sample_index=int(i)))
    return out


def describe_tail_scenarios(
    net: ClearingNetwork,
    sim: SimConfig,
    member_id: int,
    top_k: int = 20,
    alpha: float | None = None,
    schedule: MarginSchedule | None = None,
    losses: MemberLosses | None = None,
    batch_id: int | None = 0,
) -> list[ScenarioDescriptor]:
    """Anatomy of a member's worst EC scenarios.

    EC is the mean of per-batch expected shortfalls, so by default the
    scenarios and their contributions are those of one batch (``batch_id``);
    ``batch_id=None`` pools all batches. The batches holding the reported
    scenarios are regenerated from the seed to read off defaulters, their
    losses over collateral and the member's allocation share.
    ``total_loss`` is the raw loss ``C`` (uncentered).
    """
    alpha = net.ec_quantile if alpha is None else alpha
    schedule = schedule or compute_margins(net, sim.params.rho_mkt)
    if losses is None or losses.path_index is None:
        losses = simulate_losses(net, sim, schedule, [member_id], keep_index=True)[member_id]
    keep = [j for j, bid in enumerate(losses.batch_ids) if batch_id is None or bid == batch_id]
    if not keep:
        raise ValueError(f"batch {batch_id} not in the loss run")
    pooled = np.concatenate([losses.batches[j] for j in keep])
    where = [(losses.batch_ids[j], int(p)) for j in keep for p in losses.path_index[j]]
    cache = {}

    def anatomy(i):
        bid, path = where[i]
        if bid not in cache:
            batch = sample_batch(net, sim.params, sim.batch_size, sim.seed, bid)
            cache[bid] = (batch, waterfall(batch, net, schedule))
        batch, wf = cache[bid]
        ids, loc, mu_total, h_total = [], {}, 0.0, 0.0
        for cid, mem in wf.members.items():
            row = wf.loss_over_collateral[cid][path]
            for j, mid in enumerate(mem):
                if not batch.survival[path, batch.column(mid)]:
                    if mid not in ids:
                        ids.append(mid)
                    loc[mid] = loc.get(mid, 0.0) + float(row[j])
            if member_id in mem:
                h = float(wf.H[cid][path])
                mu_total += float(wf.mu_of(cid, member_id)[path]) * h
                h_total += h
        mu = mu_total / h_total if h_total > 0 else (
            float(np.mean([wf.mu_of(c, member_id)[path] for c in wf.members if member_id in wf.members[c]]))
        )
        return sorted(ids), loc, mu

    out = ec_scenario_contributions(pooled, alpha, top_k, anatomy)
    for d in out:
        bid, path = where[d.sample_index]
        d.batch_id, d.path = bid, path
        batch, wf = cache[bid]
        d.per_ccp_mu = {c: float(wf.mu_of(c, member_id)[path]) for c in wf.members if member_id in wf.members[c]}
        # recompute the loss on that path from scratch as a consistency check
        check = float(member_loss(batch, net, schedule, wf, member_id)[path])
        if not math.isclose(check, d.total_loss, rel_tol=1e-9, abs_tol=1e-12):
            raise AssertionError(f"scenario loss mismatch {check} vs {d.total_loss}")
    return out


def centered(losses: MemberLosses) -> list[np.ndarray]:
    """Per-batch ``C - CVA`` with the pooled CVA."""
    cva = losses.pooled().mean()
    return [b - cva for b in losses.batches]


@dataclass(frozen=True)
class StandAloneComparison:
    """Joint vs summed stand-alone quantiles of one multi-CCP member."""

    member_id: int
    p: float
    joint: QuantileReport
    stand_alone: dict[int, QuantileReport]

    @property
    def stand_alone_sum(self) -> float:
        return math.fsum(r.q for r in self.stand_alone.values())


def stand_alone_comparison(
    net: ClearingNetwork,
    losses: MemberLosses,
    levels: Sequence[float] = (0.9, 0.999),
    ci_level: float = 0.95,
) -> list[StandAloneComparison]:
    """Quantiles of the joint loss and of each CCP's stand-alone loss.

    ``losses`` must carry the per-CCP components (``by_ccp=True``). Each
    stand-alone loss is what the member would lose if the CCP were analysed
    on its own: CCPs do not share margins, so it equals the CCP's component
    of the joint loss on the same paths. Each is centered by its own mean.
    """
    if not losses.by_ccp:
        raise ValueError("per-CCP loss components are required")
    joint = losses.pooled()
    joint = joint - joint.mean()
    parts = {}
    for cid, chunks in losses.by_ccp.items():
        x = np.concatenate(chunks)
        parts[cid] = x - x.mean()
    out = []
    for p in levels:
        out.append(StandAloneComparison(
            losses.member_id, p,
            extreme_quantile(joint, p, ci_level, losses.member_id),
            {cid: extreme_quantile(x, p, ci_level, losses.member_id) for cid, x in parts.items()},
        ))
    return out
