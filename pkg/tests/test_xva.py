import itertools
import math

import numpy as np
import pytest

from ccpxva.cases import TABLE1_NOMINALS, TABLE1_VOLS, table1_network
from ccpxva.margining import compute_margins
from ccpxva.network import (
    BilateralSet, CcpService, ClearingNetwork, Member, Position, horizon_default_prob, validate_network,
)
from ccpxva.simulation import CopulaParams, ScenarioBatch, SimConfig, sample_batch
from ccpxva.xva import (
    EstimationError, batched_expected_shortfall, compute_all_xva, compute_xva,
    expected_shortfall, member_loss, waterfall,
)


# expected shortfall -----------------------------------------------------------


def test_es_hand_enumeration():
    assert expected_shortfall(np.arange(1, 101), 0.95) == pytest.approx(98.0)
    assert expected_shortfall(np.full(40, 2.5), 0.9) == pytest.approx(2.5)


def test_es_dominates_var():
    x = np.random.default_rng(0).standard_t(3, 10_000)
    assert expected_shortfall(x, 0.99) >= np.quantile(x, 0.99)


def test_es_needs_tail_sample():
    with pytest.raises(EstimationError):
        expected_shortfall(np.arange(10), 0.95)


def test_batched_es():
    mean, std = batched_expected_shortfall([np.arange(1, 101), np.arange(1, 101) + 2.0], 0.95)
    assert mean == pytest.approx(99.0)
    assert std == pytest.approx(math.sqrt(2.0))


# waterfall and allocation ----------------------------------------------------


def _handmade_batch(net, defaulted_rows, market=None):
    ids = tuple(net.member_ids)
    n = len(defaulted_rows)
    survival = np.ones((n, len(ids)), bool)
    for p, row in enumerate(defaulted_rows):
        for mid in row:
            survival[p, ids.index(mid)] = False
    mkt = np.zeros((n, len(ids))) if market is None else np.asarray(market, float)
    return ScenarioBatch(0, n, 0, ids, survival, ids, mkt)


def _sloim_share(member, defaulted):
    # DFC is proportional to SLOIM, itself proportional to |N| sigma
    w = {i: abs(n) * v for i, (n, v) in enumerate(zip(TABLE1_NOMINALS, TABLE1_VOLS))}
    return w[member] / math.fsum(w[i] for i in w if i not in defaulted)


TABLE5_ROWS = [
    ({0}, 0.21),
    ({5, 6, 7, 11, 12}, 0.21),
    ({0, 2, 5, 10, 11, 12, 14, 16}, 0.32),
]


@pytest.mark.parametrize("defaulted, printed", TABLE5_ROWS)
def test_mu_matches_sloim_share_and_printed_value(defaulted, printed):
    net = table1_network()
    sched = compute_margins(net)
    wf = waterfall(_handmade_batch(net, [defaulted]), net, sched)
    mu1 = float(wf.mu_of(0, 1)[0])
    assert mu1 == pytest.approx(_sloim_share(1, defaulted), abs=1e-9)
    assert abs(mu1 - printed) <= 0.01


def test_mu_sums_to_one_and_defaulters_get_nothing():
    net = table1_network()
    sched = compute_margins(net)
    batch = sample_batch(net, CopulaParams(), 20_000, seed=4)
    wf = waterfall(batch, net, sched)
    mu = wf.mu[0]
    alive = batch.survival
    some = alive.any(axis=1)
    assert np.allclose(mu[some].sum(axis=1), 1.0, atol=1e-12)
    assert np.all(mu[~alive] == 0.0)
    assert np.all(wf.H[0] >= 0.0)


def test_all_default_path_allocates_to_nobody():
    net = table1_network()
    wf = waterfall(_handmade_batch(net, [set(range(20))], np.full((1, 20), 5.0)), net, compute_margins(net))
    assert wf.H[0][0] > 0
    assert np.all(wf.mu[0][0] == 0.0)


def test_member_loss_is_mu_times_h():
    net = table1_network()
    sched = compute_margins(net)
    market = np.zeros((3, 20))
    market[0, 0] = 10.0  # CM0 is short, so a rise is owed to the CCP
    batch = _handmade_batch(net, [{0}, set(), {5, 6}], market)
    wf = waterfall(batch, net, sched)
    c1 = member_loss(batch, net, sched, wf, 1)
    m0 = net.member(0)
    dl = net.ccp(0).liquidation_years
    owed = 242 * m0.volatility(0) * math.sqrt(dl) * 10.0
    h = max(owed - sched.im[(0, 0)] - sched.dfc[(0, 0)], 0.0)
    assert wf.H[0][0] == pytest.approx(h, rel=1e-12)
    assert c1[0] == pytest.approx(_sloim_share(1, {0}) * h, rel=1e-9)
    assert c1[1] == 0.0 and c1[2] == 0.0


# XVA stack ---------------------------------------------------------------------


def _bilateral_network(vm):
    members = [
        Member(0, 0.02, [Position(0, client_nominal=-8.0, house_nominal=3.0)], {0: 0.25},
               bilateral_netting_sets=[BilateralSet(0.03, 3.0, 0.3, mtm=4.0, vm=vm, im_received=0.1, im_posted=0.2)]),
        Member(1, 0.01, [Position(0, client_nominal=6.0)], {0: 0.2}),
        Member(2, 0.015, [Position(0, client_nominal=-1.0)], {0: 0.3}),
    ]
    return ClearingNetwork(members, [CcpService(0, (0, 1, 2))])


def test_fva_fixed_point_and_exact_identities():
    net = _bilateral_network(vm=0.5)
    assert validate_network(net) == []
    xva, _ = compute_all_xva(net, SimConfig(20_000, 4, seed=2), members=[0])
    x = xva[0]
    gamma = horizon_default_prob(net.member(0), net.horizon_years)
    assert x.fva > 0
    others = x.ca - x.fva
    # x = gamma (A - x)^+ solved in closed form; substituting back must agree
    assert x.fva == pytest.approx(gamma * max(3.5 - others - x.ec - x.fva, 0.0), rel=1e-12)
    h = net.hurdle_rate
    assert x.kva == pytest.approx(h / (1 + h) * x.ec, rel=1e-12)
    assert x.ca == pytest.approx(x.ccva + x.cmva + x.bcva + x.bmva + x.fva, rel=1e-12)
    assert x.ftp == pytest.approx(x.ca + x.kva, rel=1e-12)
    assert x.bmva == pytest.approx(net.funding_blend_ratio * gamma * 0.2, rel=1e-12)


def test_fully_margined_case_study_has_no_bilateral_terms():
    xva, _ = compute_all_xva(table1_network(), SimConfig(20_000, 2, seed=0), members=[0, 19])
    for x in xva.values():
        assert x.fva == 0.0 and x.bcva == 0.0 and x.bmva == 0.0


def test_cmva_is_closed_form():
    net = table1_network()
    sched = compute_margins(net)
    gamma = horizon_default_prob(net.member(0), 5)
    x, _ = compute_all_xva(net, SimConfig(10_000, 2, seed=0), sched, members=[0])
    assert x[0].cmva == pytest.approx(0.25 * gamma * (sched.im[(0, 0)] + sched.dfc[(0, 0)]), rel=1e-12)


def test_centering_on_an_independent_run():
    net = table1_network()
    a, _ = compute_all_xva(net, SimConfig(200_000, 10, seed=1), members=[2])
    _, lb = compute_all_xva(net, SimConfig(200_000, 10, seed=2), members=[2])
    means = np.array([b.mean() for b in lb[2].batches]) - a[2].cva
    se = math.hypot(means.std(ddof=1) / math.sqrt(len(means)), a[2].ccva_se)
    assert abs(means.mean()) < 3 * se


@pytest.mark.parametrize("k", [0.5, 2.0, 10.0])
def test_scale_equivariance(k):
    net = _bilateral_network(vm=None)
    scaled = net.with_members([
        Member(m.id, m.annual_default_prob,
               [Position(p.ccp_id, p.client_nominal * k, p.house_nominal * k) for p in m.positions],
               m.volatility_per_ccp,
               [BilateralSet(b.counterparty_default_prob, b.nominal * k, b.volatility, b.mtm * k, None,
                             b.im_received * k, b.im_posted * k) for b in m.bilateral_netting_sets])
        for m in net.members
    ])
    sim = SimConfig(20_000, 4, seed=3)
    base, _ = compute_all_xva(net, sim)
    big, _ = compute_all_xva(scaled, sim)
    for mid in base:
        for f in ("ccva", "cmva", "bcva", "bmva", "ec", "kva"):
            assert getattr(big[mid], f) == pytest.approx(k * getattr(base[mid], f), rel=1e-9, abs=1e-15)


def _random_network(rng):
    n = int(rng.integers(3, 8))
    nominals = rng.normal(0, 20, n)
    nominals[-1] = -nominals[:-1].sum()
    members = []
    for i in range(n):
        bil = []
        if rng.random() < 0.3:
            house = float(rng.normal(0, 3))
            bil = [BilateralSet(float(rng.uniform(0.001, 0.05)), house, float(rng.uniform(0.1, 0.4)),
                                mtm=float(rng.normal(0, 1)), vm=0.0, im_received=float(rng.uniform(0, 0.5)),
                                im_posted=float(rng.uniform(0, 0.5)))]
            members.append(Member(i, float(rng.uniform(0.001, 0.05)),
                                  [Position(0, float(nominals[i]) - house, house)], {0: float(rng.uniform(0.1, 0.5))}, bil))
        else:
            members.append(Member(i, float(rng.uniform(0.001, 0.05)), [Position(0, float(nominals[i]))],
                                  {0: float(rng.uniform(0.1, 0.5))}))
    return ClearingNetwork(members, [CcpService(0, tuple(range(n)))])


def test_nonnegativity_on_random_networks():
    rng = np.random.default_rng(2024)
    fields = ("ccva", "cmva", "bcva", "bmva", "fva", "ec", "kva", "ca", "ftp")
    for trial in range(100):
        net = _random_network(rng)
        assert validate_network(net) == []
        rc, rm = rng.uniform(0.05, 0.9, 2)
        params = CopulaParams(float(rc), float(rm), float(rng.uniform(0, math.sqrt((1 - rc) * (1 - rm)))))
        xva, _ = compute_all_xva(net, SimConfig(4_000, 2, seed=trial, params=params))
        for x in xva.values():
            for f in fields:
                assert getattr(x, f) >= 0.0, (trial, x.member_id, f)


def test_reference_never_surviving_is_an_error():
    net = table1_network()
    batch = _handmade_batch(net, [{0}] * 50)
    with pytest.raises(EstimationError):
        compute_xva(net, compute_margins(net), [batch], 0)


# brute-force oracle ----------------------------------------------------------

TOY_DP = (0.06, 0.05, 0.04)  # annual; horizon probabilities near 0.27, 0.23, 0.18
Z = 3.0


def _toy():
    members = [
        Member(0, TOY_DP[0], [Position(0, client_nominal=10.0)], {0: 0.3}),
        Member(1, TOY_DP[1], [Position(0, client_nominal=-6.0)], {0: 0.25}),
        Member(2, TOY_DP[2], [Position(0, client_nominal=-4.0)], {0: 0.2}),
    ]
    return ClearingNetwork(members, [CcpService(0, (0, 1, 2))])


def _toy_batches(net, n_batches, size, seed):
    gam = np.array([horizon_default_prob(m, net.horizon_years) for m in net.members])
    rng = np.random.default_rng(seed)
    out = []
    for b in range(n_batches):
        surv = rng.random((size, 3)) >= gam
        mkt = np.where(rng.random((size, 3)) < 0.5, -Z, Z)
        out.append(ScenarioBatch(b, size, seed, (0, 1, 2), surv, (0, 1, 2), mkt))
    return out


def _enumerate(net, sched, ref, alpha):
    """Exact CCVA and EC for the toy network by listing all 64 outcomes."""
    gam = [horizon_default_prob(m, net.horizon_years) for m in net.members]
    dl = net.ccp(0).liquidation_years
    loss, prob = [], []
    for alive in itertools.product([False, True], repeat=3):
        if not alive[ref]:
            continue
        for signs in itertools.product([-Z, Z], repeat=3):
            p = math.prod(1 - g if a else g for g, a in zip(gam, alive)) / 8.0
            h = 0.0
            for i, m in enumerate(net.members):
                if not alive[i]:
                    owed = -m.positions[0].client_nominal * m.volatility(0) * math.sqrt(dl) * signs[i]
                    h += max(max(owed - sched.im[(i, 0)], 0.0) - sched.dfc[(i, 0)], 0.0)
            funded = sum(sched.dfc[(i, 0)] for i in range(3) if alive[i])
            loss.append(sched.dfc[(ref, 0)] / funded * h)
            prob.append(p)
    loss, prob = np.array(loss), np.array(prob) / sum(prob)
    cva = float(loss @ prob)
    # tail expectation above the alpha level with the boundary atom split
    order = np.argsort(-loss)
    tail, acc = 0.0, 0.0
    for i in order:
        take = min(prob[i], 1 - alpha - acc)
        if take <= 0:
            break
        tail += take * loss[i]
        acc += take
    return cva, tail / (1 - alpha) - cva


@pytest.mark.parametrize("ref", [0, 1, 2])
def test_brute_force_oracle(ref):
    net = _toy()
    sched = compute_margins(net)
    alpha = 0.95
    cva, ec = _enumerate(net, sched, ref, alpha)
    assert ec > 0
    x = compute_xva(net, sched, _toy_batches(net, 20, 20_000, seed=7 + ref), ref, alpha=alpha)
    assert abs(x.ccva - cva) < 3 * x.ccva_se
    assert abs(x.ec - ec) < 3 * x.ec_se
