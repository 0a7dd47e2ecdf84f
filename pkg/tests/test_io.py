import json

import pytest

from ccpxva.cases import build_two_ccp_network, table1_network
from ccpxva.io import ConfigError, load_network, network_from_dict, network_to_dict, save_network, write_csv
from ccpxva.network import BilateralSet, CcpService, ClearingNetwork, Member, PortedBook, Position
from ccpxva.simulation import CopulaParams


def test_round_trip(tmp_path):
    members = [
        Member(0, 0.01, [Position(0, 5.0, 2.0, 0.03)], {0: 0.2},
               [BilateralSet(0.02, 2.0, 0.3, mtm=1.0, vm=0.5, im_received=0.1, im_posted=0.2)],
               [PortedBook(0, -3.0, 0.25, 7)], rho_wwr=0.1),
        Member(1, 0.02, [Position(0, client_nominal=-4.0)], {0: 0.3}),
    ]
    net = ClearingNetwork(members, [CcpService(0, (0, 1), disclosure={"total_df": 10.0, "top5_df_share": 0.5})],
                          horizon_years=3.0)
    params = CopulaParams(0.4, 0.1, {0: 0.3, 1: 0.05}, 4)
    path = tmp_path / "net.json"
    save_network(net, path, params)
    back, back_params = load_network(path)
    assert back == net
    assert back_params == params


def test_reference_networks_round_trip():
    for net in (table1_network(), build_two_ccp_network()):
        back, _ = network_from_dict(json.loads(json.dumps(network_to_dict(net))))
        assert back == net


def test_ccp_member_list_is_inferred():
    doc = network_to_dict(table1_network())
    del doc["ccps"][0]["member_ids"]
    net, _ = network_from_dict(doc)
    assert net.ccp(0).member_ids == tuple(range(20))


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("members"),
    lambda d: d["members"][0].pop("annual_default_prob"),
    lambda d: d["members"][0]["positions"][0].update(volatility="high"),
    lambda d: d["config"]["copula"].update(nu=2.5),
    lambda d: d["members"][0].update(positions=[{"ccp_id": 0}]),
])
def test_malformed_documents(mutate):
    doc = network_to_dict(table1_network())
    mutate(doc)
    with pytest.raises(ConfigError):
        network_from_dict(doc)


def test_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_network(bad)
    with pytest.raises(ConfigError):
        load_network(tmp_path / "missing.json")


def test_csv_formatting(tmp_path):
    import numpy as np

    path = tmp_path / "x.csv"
    write_csv(path, ["a", "b", "c", "d"], [{"a": np.float64(0.1), "b": [1, 2], "c": True, "d": float("nan")}])
    assert path.read_text() == "a,b,c,d\n0.1,1 2,1,nan\n"
