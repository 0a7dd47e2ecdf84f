"""Reference networks: the 20-member single CCP and the two-CCP replication."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .margining import fit_exponential_nominals
from .network import CcpService, ClearingNetwork, Member, Position

TABLE1_NOMINALS = (-242, 184, 139, 105, -80, -61, -46, 35, 26, -20, -15, -11, -9, -6, 5, -4, -3, 2, 2, -1)
TABLE1_DP_PERCENT = (0.5, 0.6, 0.7, 0.8, 0.9, 2.0, 1.9, 1.8, 1.7, 1.6, 1.5, 1.4, 1.3, 1.2, 1.1, 1.0, 0.9, 0.8, 0.7, 0.6)
TABLE1_VOLS = tuple(round(0.20 + 0.01 * i, 2) for i in range(20))

# CCP1 ranks of the members common to both CCPs in the published case
COMMON_CCP1_RANKS = (3, 4, 9, 12, 13, 14, 15, 17, 19, 22, 26, 27, 28, 31, 34, 35, 36, 39, 40, 44, 49, 50, 51, 55)
# annual default probabilities of the common members that differ from 0.1%
COMMON_DP_OVERRIDES = {9: 0.031, 14: 0.002, 17: 0.003, 19: 0.002, 22: 0.039, 28: 0.015, 40: 0.005}


def table1_network(**config) -> ClearingNetwork:
    """One CCP, 20 members each clearing for one risk-free client."""
    members = [
        Member(i, dp / 100.0, [Position(0, client_nominal=float(n))], {0: vol})
        for i, (n, dp, vol) in enumerate(zip(TABLE1_NOMINALS, TABLE1_DP_PERCENT, TABLE1_VOLS))
    ]
    ccp = CcpService(0, member_ids=tuple(range(20)))
    return ClearingNetwork(members, [ccp], **config)


def balanced_signs(magnitudes: Sequence[float]) -> list[float]:
    """Greedy signs keeping the running sum small, largest first negative."""
    out, running = [], 0.0
    for x in magnitudes:
        s = -1.0 if running >= 0 else 1.0
        out.append(s * x)
        running += s * x
    return out


def signed_zero_sum_profile(magnitudes: Sequence[float], signs: Sequence[float] | None = None) -> np.ndarray:
    """Attach signs, then move the last member so the nominals sum to zero."""
    mags = np.asarray(magnitudes, dtype=float)
    vals = np.asarray(balanced_signs(mags) if signs is None else np.sign(signs) * mags, dtype=float)
    vals[-1] = -math.fsum(vals[:-1])
    return vals


def _default_common_ranks(n1: int, common: int) -> list[int]:
    if common == len(COMMON_CCP1_RANKS) and n1 > max(COMMON_CCP1_RANKS):
        return list(COMMON_CCP1_RANKS)
    return [int(x) for x in np.linspace(0, n1 - 1, common).round()] if common else []


def build_two_ccp_network(
    n1: int = 123,
    n2: int = 56,
    common: int = 24,
    total_df1: float = 1000.0,
    total_df2: float = 500.0,
    top5_share1: float = 0.25,
    top5_share2: float = 0.61,
    default_prob: float = 0.001,
    default_prob_overrides: Mapping[int, float] | None = None,
    common_ccp1_ranks: Sequence[int] | None = None,
    path=None,
    **config,
) -> ClearingNetwork:
    """Two CCPs with exponentially decaying nominals fitted to DF disclosures.

    Member ids follow the CCP1 size ranking (``0..n1-1``); CCP2-only members
    get ids from ``n1`` on. Common members hold CCP2 ranks ``0..common-1``
    and the CCP1 ranks ``common_ccp1_ranks``. Volatilities cycle through
    20%..30% with the rank on each CCP. Writes JSON to ``path`` if given.
    """
    if not 0 <= common <= min(n1, n2):
        raise ValueError(f"common count {common} must lie in [0, min(n1, n2)]")
    a1, b1 = fit_exponential_nominals(n1, total_df1, top5_share1)
    a2, b2 = fit_exponential_nominals(n2, total_df2, top5_share2)
    size1 = signed_zero_sum_profile(a1 * np.exp(-b1 * np.arange(1, n1 + 1)))
    size2 = signed_zero_sum_profile(a2 * np.exp(-b2 * np.arange(1, n2 + 1)))
    ranks1 = list(common_ccp1_ranks) if common_ccp1_ranks is not None else _default_common_ranks(n1, common)
    if len(ranks1) != common or len(set(ranks1)) != common or any(not 0 <= r < n1 for r in ranks1):
        raise ValueError("common_ccp1_ranks must list distinct CCP1 ranks, one per common member")
    overrides = dict(COMMON_DP_OVERRIDES if default_prob_overrides is None else default_prob_overrides)

    # CCP2 rank -> member id
    ccp2_ids = list(ranks1) + list(range(n1, n1 + n2 - common))
    positions: dict[int, list[Position]] = {i: [] for i in range(n1 + n2 - common)}
    vols: dict[int, dict[int, float]] = {i: {} for i in positions}
    for r in range(n1):
        positions[r].append(Position(0, client_nominal=float(size1[r])))
        vols[r][0] = round(0.20 + 0.01 * (r % 11), 2)
    for r, mid in enumerate(ccp2_ids):
        positions[mid].append(Position(1, client_nominal=float(size2[r])))
        vols[mid][1] = round(0.20 + 0.01 * ((r + 1) % 11), 2)
    members = [Member(i, overrides.get(i, default_prob), positions[i], vols[i]) for i in sorted(positions)]
    disclosure1 = {"total_df": total_df1, "top5_df_share": top5_share1}
    disclosure2 = {"total_df": total_df2, "top5_df_share": top5_share2}
    ccps = [
        CcpService(0, member_ids=tuple(range(n1)), disclosure=disclosure1),
        CcpService(1, member_ids=tuple(ccp2_ids), disclosure=disclosure2),
    ]
    net = ClearingNetwork(members, ccps, **config)
    if path is not None:
        from .io import save_network

        save_network(net, path)
    return net
