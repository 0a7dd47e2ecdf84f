"""JSON network documents and CSV/JSON report writers.

Network schema (all keys except ids optional unless noted)::

    {
      "config": {"horizon_years": 5, "hurdle_rate": 0.1, "ec_quantile": 0.9975,
                 "funding_blend_ratio": 0.25,
                 "copula": {"rho_cr": 0.3, "rho_mkt": 0.2, "rho_wwr": 0.2, "nu": 3}},
      "ccps": [{"id": 0, "member_ids": [0, 1], "im_confidence": 0.95,
                "sloim_confidence": 0.97, "mpor_days": 2, "liquidation_days": 5,
                "degrees_of_freedom": 3,
                "disclosure": {"total_df": 1000, "top5_df_share": 0.25}}],
      "members": [{"id": 0, "annual_default_prob": 0.005, "rho_wwr": null,
                   "positions": [{"ccp_id": 0, "client_nominal": -242, "house_nominal": 0,
                                  "volatility": 0.2, "client_default_prob": null}],
                   "bilateral_netting_sets": [{"counterparty_default_prob": 0.01,
                       "nominal": 5, "volatility": 0.25, "mtm": 0, "vm": null,
                       "im_received": 0, "im_posted": 0}],
                   "ported_books": [{"ccp_id": 0, "nominal": 3, "volatility": 0.2, "driver": 7}]}]
    }

``rho_wwr`` in the copula block may be a number or an object mapping member
ids to values. A CCP without ``member_ids`` lists every member holding a
position on it.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .network import BilateralSet, CcpService, ClearingNetwork, Member, PortedBook, Position
from .simulation import CopulaParams


class ConfigError(ValueError):
    pass


_CONFIG_KEYS = ("horizon_years", "hurdle_rate", "ec_quantile", "funding_blend_ratio")
_CCP_KEYS = ("im_confidence", "sloim_confidence", "mpor_days", "liquidation_days", "degrees_of_freedom")


def _need(d: Mapping, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing key '{key}'")
    return d[key]


def _num(x, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {x!r}")
    return float(x)


def copula_from_dict(d: Mapping | None) -> CopulaParams:
    d = dict(d or {})
    wwr = d.get("rho_wwr", 0.2)
    if isinstance(wwr, Mapping):
        wwr = {int(k): _num(v, "copula.rho_wwr") for k, v in wwr.items()}
    else:
        wwr = _num(wwr, "copula.rho_wwr")
    nu = d.get("nu", 3)
    if isinstance(nu, bool) or not isinstance(nu, int) or nu < 1:
        raise ConfigError(f"copula.nu must be a positive integer, got {nu!r}")
    return CopulaParams(_num(d.get("rho_cr", 0.3), "copula.rho_cr"), _num(d.get("rho_mkt", 0.2), "copula.rho_mkt"), wwr, nu)


def network_from_dict(doc: Mapping[str, Any]) -> tuple[ClearingNetwork, CopulaParams]:
    """Parse a network document; raises :class:`ConfigError` on malformed input."""
    if not isinstance(doc, Mapping):
        raise ConfigError("network document must be a JSON object")
    for key in ("members", "ccps", "config"):
        _need(doc, key, "network")
    config = doc["config"] or {}
    members = []
    for k, md in enumerate(doc["members"]):
        where = f"members[{k}]"
        try:
            positions, vols = [], {}
            for p in md.get("positions", []):
                cid = int(_need(p, "ccp_id", where))
                pdc = p.get("client_default_prob")
                positions.append(Position(
                    cid, _num(p.get("client_nominal", 0.0), where), _num(p.get("house_nominal", 0.0), where),
                    None if pdc is None else _num(pdc, where),
                ))
                vols[cid] = _num(_need(p, "volatility", f"{where}.positions"), where)
            bil = [
                BilateralSet(
                    _num(_need(b, "counterparty_default_prob", where), where), _num(_need(b, "nominal", where), where),
                    _num(_need(b, "volatility", where), where), _num(b.get("mtm", 0.0), where),
                    None if b.get("vm") is None else _num(b["vm"], where),
                    _num(b.get("im_received", 0.0), where), _num(b.get("im_posted", 0.0), where),
                )
                for b in md.get("bilateral_netting_sets", [])
            ]
            ported = [
                PortedBook(int(b["ccp_id"]), _num(b["nominal"], where), _num(b["volatility"], where), int(b["driver"]))
                for b in md.get("ported_books", [])
            ]
            wwr = md.get("rho_wwr")
            members.append(Member(
                int(_need(md, "id", where)), _num(_need(md, "annual_default_prob", where), where),
                positions, vols, bil, ported, None if wwr is None else _num(wwr, where),
            ))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ConfigError(f"{where}: malformed entry ({exc})") from None
    ccps = []
    for k, cd in enumerate(doc["ccps"]):
        where = f"ccps[{k}]"
        cid = int(_need(cd, "id", where))
        mids = cd.get("member_ids")
        if mids is None:
            mids = [m.id for m in members if cid in m.ccp_ids]
        kwargs = {key: cd[key] for key in _CCP_KEYS if key in cd}
        disclosure = cd.get("disclosure")
        if disclosure is not None:
            disclosure = {"total_df": _num(_need(disclosure, "total_df", where), where),
                          "top5_df_share": _num(_need(disclosure, "top5_df_share", where), where)}
        ccps.append(CcpService(cid, tuple(int(i) for i in mids), disclosure=disclosure, **kwargs))
    net_kwargs = {key: _num(config[key], f"config.{key}") for key in _CONFIG_KEYS if key in config}
    return ClearingNetwork(members, ccps, **net_kwargs), copula_from_dict(config.get("copula"))


def network_to_dict(net: ClearingNetwork, params: CopulaParams | None = None) -> dict:
    params = params or CopulaParams()
    wwr = params.rho_wwr
    copula = {"rho_cr": params.rho_cr, "rho_mkt": params.rho_mkt,
              "rho_wwr": {str(k): v for k, v in wwr.items()} if isinstance(wwr, Mapping) else wwr,
              "nu": params.nu}
    members = []
    for m in net.members:
        md = {
            "id": m.id,
            "annual_default_prob": m.annual_default_prob,
            "positions": [
                {"ccp_id": p.ccp_id, "client_nominal": p.client_nominal, "house_nominal": p.house_nominal,
                 "volatility": m.volatility_per_ccp.get(p.ccp_id), "client_default_prob": p.client_default_prob}
                for p in m.positions
            ],
        }
        if m.rho_wwr is not None:
            md["rho_wwr"] = m.rho_wwr
        if m.bilateral_netting_sets:
            md["bilateral_netting_sets"] = [
                {"counterparty_default_prob": b.counterparty_default_prob, "nominal": b.nominal,
                 "volatility": b.volatility, "mtm": b.mtm, "vm": b.vm,
                 "im_received": b.im_received, "im_posted": b.im_posted}
                for b in m.bilateral_netting_sets
            ]
        if m.ported_books:
            md["ported_books"] = [
                {"ccp_id": b.ccp_id, "nominal": b.nominal, "volatility": b.volatility, "driver": b.driver}
                for b in m.ported_books
            ]
        members.append(md)
    ccps = []
    for c in net.ccps:
        cd = {"id": c.id, "member_ids": list(c.member_ids)}
        cd.update({key: getattr(c, key) for key in _CCP_KEYS})
        if c.disclosure is not None:
            cd["disclosure"] = dict(c.disclosure)
        ccps.append(cd)
    config = {key: getattr(net, key) for key in _CONFIG_KEYS}
    config["copula"] = copula
    return {"members": members, "ccps": ccps, "config": config}


def load_network(path) -> tuple[ClearingNetwork, CopulaParams]:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return network_from_dict(doc)


def save_network(net: ClearingNetwork, path, params: CopulaParams | None = None) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net, params), indent=2) + "\n", encoding="utf-8")


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(float(x))
    if isinstance(x, (list, tuple)):
        return " ".join(_fmt(v) for v in x)
    return str(x)


def write_csv(path, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> None:
    """UTF-8 CSV with a fixed column order and full-precision floats."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
