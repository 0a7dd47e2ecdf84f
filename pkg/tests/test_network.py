import math

import pytest

from ccpxva.cases import TABLE1_NOMINALS, build_two_ccp_network, table1_network
from ccpxva.network import (
    BilateralSet, CcpService, ClearingNetwork, Member, PortedBook, Position,
    blended_spread, hazard_rate, horizon_default_prob, validate_network,
)


def test_table1_network_is_valid():
    net = table1_network()
    assert sum(TABLE1_NOMINALS) == 0
    assert validate_network(net) == []
    assert len(net.members) == 20


def test_lonely_member_cannot_net_to_zero():
    net = ClearingNetwork([Member(0, 0.01, [Position(0, client_nominal=5.0)], {0: 0.2})], [CcpService(0, (0,))])
    msgs = [str(v) for v in validate_network(net)]
    assert any("CCP 0 nominal sum = 5" in m for m in msgs)


def test_two_ccp_network_is_valid_and_nets_per_ccp():
    net = build_two_ccp_network()
    assert validate_network(net) == []
    for c in net.ccps:
        total = math.fsum(m.net_nominal(c.id) for m in net.members_of(c.id))
        assert abs(total) < 1e-9


def test_invalid_entries_are_reported_not_raised():
    members = [
        Member(0, 1.5, [Position(0, client_nominal=1.0)], {0: 0.2}),
        Member(1, 0.01, [Position(0, client_nominal=-1.0)], {0: 1.7}),
    ]
    out = validate_network(ClearingNetwork(members, [CcpService(0, (0, 1))]))
    assert len(out) >= 2


@pytest.mark.parametrize("dp, t, expected", [
    (0.005, 5, 1 - 0.995 * 0.995 * 0.995 * 0.995 * 0.995),
    (0.001, 5, 1 - 0.999 * 0.999 * 0.999 * 0.999 * 0.999),
    (0.037, 1, 0.037),
])
def test_horizon_default_prob(dp, t, expected):
    assert horizon_default_prob(dp, t) == pytest.approx(expected, rel=1e-13)


def test_horizon_default_prob_values():
    assert horizon_default_prob(0.005, 5) == pytest.approx(0.024752, abs=1e-6)
    assert horizon_default_prob(0.001, 5) == pytest.approx(0.004990, abs=1e-6)


def test_horizon_must_be_positive():
    with pytest.raises(ValueError):
        horizon_default_prob(0.01, 0.0)


def test_hazard_and_spread():
    assert math.exp(-5 * hazard_rate(0.02)) == pytest.approx(0.98 ** 5, rel=1e-13)
    net = table1_network()
    m = net.member(0)
    assert blended_spread(net, m) == pytest.approx(0.25 * (1 - 0.995 ** 5))


def test_books_and_ported_books():
    m = Member(3, 0.01, [Position(0, client_nominal=10.0, house_nominal=-4.0)], {0: 0.3},
               ported_books=[PortedBook(0, -7.0, 0.25, 9)])
    books = m.client_books(0)
    assert [(b.nominal, b.volatility, b.driver) for b in books] == [(10.0, 0.3, 3), (-7.0, 0.25, 9)]
    assert m.house_books(0)[0].nominal == -4.0
    assert m.net_nominal(0) == pytest.approx(-1.0)
    assert m.size() == pytest.approx(1.0)


def test_bilateral_vm_default():
    assert BilateralSet(0.01, 5.0, 0.2, mtm=3.0).vm_received == 3.0
    assert BilateralSet(0.01, 5.0, 0.2, mtm=3.0, vm=1.0).vm_received == 1.0
