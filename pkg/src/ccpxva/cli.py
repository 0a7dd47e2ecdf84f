"""Command-line runner: network JSON in, CSV/JSON reports out."""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .io import ConfigError, load_network, write_csv, write_json
from .margining import MarginError, compute_margins
from .network import ClearingNetwork, validate_network
from .porting import PortingError, PortingStudy, dispersion
from .simulation import (
    AdmissibilityError, SimConfig, check_admissibility, dump_batch, sample_batch,
)
from .stress import centered, describe_tail_scenarios, extreme_quantile, rst_probability, stand_alone_comparison
from .xva import XVA_COLUMNS, EstimationError, aggregate_by_batch, compute_all_xva

MODES = ("xva", "stress", "rst", "porting", "sensitivity")
SWEEP_PARAMS = ("rho_cr", "rho_mkt", "rho_wwr")

EXIT_OK, EXIT_CONFIG, EXIT_INVALID, EXIT_ESTIMATION = 0, 2, 3, 4


@dataclass
class RunConfig:
    network_file: Path | None
    mode: str = "xva"
    n_paths: int = 1_000_000
    n_batches: int = 10
    seed: int = 0
    output_dir: Path = Path("out")
    quantiles: tuple[float, ...] = (0.999,)
    rst_multiplier: float = 1.5
    defaulted: tuple[int, ...] = ()
    sweeps: tuple[tuple[str, tuple[float, ...]], ...] = ()
    reference: int | None = None
    top_k: int = 20
    merge: bool = False
    dump_dir: Path | None = None
    two_ccp_out: Path | None = None
    table1_out: Path | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.n_paths <= 0 or self.n_batches <= 0:
            raise ConfigError("--paths and --batches must be positive")
        if self.n_paths % self.n_batches:
            raise ConfigError(f"--paths {self.n_paths} is not divisible by --batches {self.n_batches}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("--seed must be a 64-bit unsigned integer")
        if any(not 0.0 < q < 1.0 for q in self.quantiles):
            raise ConfigError("--quantile levels must lie in (0, 1)")
        if not self.rst_multiplier > 0:
            raise ConfigError("--rst-multiplier must be positive")
        if self.mode == "porting" and not self.defaulted:
            raise ConfigError("porting mode needs --default <id>...")
        if self.mode == "sensitivity" and not self.sweeps:
            raise ConfigError("sensitivity mode needs --sweep param=lo:hi:step")
        if self.top_k < 1:
            raise ConfigError("--top-k must be positive")


def parse_sweep(text: str) -> tuple[str, tuple[float, ...]]:
    """``param=lo:hi:step`` to an inclusive grid (endpoint kept within step/1e6)."""
    try:
        name, rng = text.split("=", 1)
        lo, hi, step = (float(x) for x in rng.split(":"))
    except ValueError:
        raise ConfigError(f"bad --sweep {text!r}, expected param=lo:hi:step") from None
    name = name.strip()
    if name not in SWEEP_PARAMS:
        raise ConfigError(f"--sweep parameter must be one of {SWEEP_PARAMS}, got {name!r}")
    if not step > 0 or hi < lo:
        raise ConfigError(f"bad --sweep range {text!r}")
    n = int(math.floor((hi - lo) / step + 1e-6)) + 1
    return name, tuple(round(lo + i * step, 12) for i in range(n))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccp-xva", description="XVA, stress and porting analytics for clearing networks")
    p.add_argument("--network", type=Path, help="network JSON document")
    p.add_argument("--mode", choices=MODES, default="xva")
    p.add_argument("--paths", type=int, default=1_000_000, help="Monte-Carlo paths (default 1,000,000)")
    p.add_argument("--batches", type=int, default=10, help="batches; must divide --paths (default 10)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--quantile", type=float, action="append", help="quantile level(s) for stress modes (default 0.999)")
    p.add_argument("--rst-multiplier", type=float, default=1.5)
    p.add_argument("--default", type=int, nargs="+", default=[], dest="defaulted", metavar="ID",
                   help="defaulted member ids (porting)")
    p.add_argument("--sweep", action="append", default=[], help="param=lo:hi:step, repeatable (sensitivity)")
    p.add_argument("--reference", type=int, help="member whose scenarios are described (default: largest member)")
    p.add_argument("--top-k", type=int, default=20, help="tail scenarios reported (default 20)")
    p.add_argument("--merge", action="store_true", help="porting: net ported nominals into the taker's own book")
    p.add_argument("--dump-batches", type=Path, help="write each scenario batch as a binary file here")
    p.add_argument("--write-two-ccp", type=Path, metavar="PATH",
                   help="write the default two-CCP network JSON to PATH and exit")
    p.add_argument("--write-table1", type=Path, metavar="PATH",
                   help="write the 20-member single-CCP network JSON to PATH and exit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def config_from_args(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        network_file=args.network,
        mode=args.mode,
        n_paths=args.paths,
        n_batches=args.batches,
        seed=args.seed,
        output_dir=args.out,
        quantiles=tuple(args.quantile) if args.quantile else (0.999,),
        rst_multiplier=args.rst_multiplier,
        defaulted=tuple(args.defaulted),
        sweeps=tuple(parse_sweep(s) for s in args.sweep),
        reference=args.reference,
        top_k=args.top_k,
        merge=args.merge,
        dump_dir=args.dump_batches,
        two_ccp_out=args.write_two_ccp,
        table1_out=args.write_table1,
    )


def _largest_member(net: ClearingNetwork) -> int:
    return max(net.members, key=lambda m: (m.size(), -m.id)).id


# modes -----------------------------------------------------------------------


def run_xva(net, sim, cfg, out):
    schedule = compute_margins(net, sim.params.rho_mkt)
    xva, _ = compute_all_xva(net, sim, schedule)
    rows = [xva[mid].as_row() for mid in net.member_ids]
    write_csv(out / "xva.csv", XVA_COLUMNS, rows)
    return [out / "xva.csv"]


STRESS_COLUMNS = ("member_id", "p", "q", "ci_lo", "ci_hi", "n_paths")
STANDALONE_COLUMNS = ("stand_alone_q", "stand_alone_ci_lo", "stand_alone_ci_hi")
RST_COLUMNS = ("rst_threshold", "rst_probability", "rst_ci", "rst_hits")


def run_stress(net, sim, cfg, out, rst: bool):
    schedule = compute_margins(net, sim.params.rho_mkt)
    multi = len(net.ccps) > 1
    _, losses = compute_all_xva(net, sim, schedule, by_ccp=multi, keep_index=True)
    rows = []
    for mid in net.member_ids:
        ml = losses[mid]
        batches = centered(ml)
        pooled = np.concatenate(batches)
        comparisons = {}
        if multi and len(ml.by_ccp) > 1:
            comparisons = {c.p: c for c in stand_alone_comparison(net, ml, cfg.quantiles)}
        for p in cfg.quantiles:
            q = extreme_quantile(pooled, p, member_id=mid)
            row = {"member_id": mid, "p": p, "q": q.q, "ci_lo": q.ci_lo, "ci_hi": q.ci_hi, "n_paths": q.n_paths}
            if p in comparisons:
                c = comparisons[p]
                sa_lo = math.fsum(r.lo for r in c.stand_alone.values())
                sa_hi = math.fsum(r.hi for r in c.stand_alone.values())
                s = c.stand_alone_sum
                row.update(stand_alone_q=s, stand_alone_ci_lo=(sa_lo - s) / abs(s) if s else 0.0,
                           stand_alone_ci_hi=(sa_hi - s) / abs(s) if s else 0.0)
            if rst:
                r = rst_probability(batches, cfg.rst_multiplier * q.q)
                row.update(rst_threshold=r.threshold, rst_probability=r.probability, rst_ci=r.ci_rel, rst_hits=r.n_hits)
            rows.append(row)
    columns = STRESS_COLUMNS + (STANDALONE_COLUMNS if multi else ()) + (RST_COLUMNS if rst else ())
    write_csv(out / "stress.csv", columns, rows)

    ref = cfg.reference if cfg.reference is not None else _largest_member(net)
    if ref not in net.member_ids:
        raise ConfigError(f"--reference {ref} is not a member")
    scen = describe_tail_scenarios(net, sim, ref, cfg.top_k, schedule=schedule, losses=losses[ref])
    write_json(out / "scenarios.json", {
        "reference_member": ref,
        "alpha": net.ec_quantile,
        "batch_id": 0,
        "scenarios": [
            {"rank": d.rank, "total_loss": d.total_loss, "n_defaults": d.n_defaults, "mu": d.mu,
             "defaulter_ids": d.defaulter_ids,
             "losses_over_collateral": {str(k): v for k, v in sorted(d.losses_over_collateral.items())},
             "delta_es": d.delta_es, "batch_id": d.batch_id, "path": d.path,
             "per_ccp_mu": {str(k): v for k, v in sorted(d.per_ccp_mu.items())}}
            for d in scen
        ],
    })
    return [out / "stress.csv", out / "scenarios.json"]


PORTING_COLUMNS = (
    "rank", "takers", "delta_cmva", "delta_ccva", "delta_kva", "ftp_total",
    "self_cmva", "self_ccva", "self_kva", "delta_bcva", "delta_bmva", "delta_fva",
)


def run_porting(net, sim, cfg, out):
    missing = [d for d in cfg.defaulted if d not in net.member_ids]
    if missing:
        raise ConfigError(f"--default ids {missing} are not members")
    study = PortingStudy(net, cfg.defaulted, sim, cfg.merge)
    quotes = study.optimize()
    rows = []
    for rank, q in enumerate(quotes, start=1):
        rows.append({"rank": rank, "takers": list(q.takers), "delta_cmva": q.delta_cmva, "delta_ccva": q.delta_ccva,
                     "delta_kva": q.delta_kva, "ftp_total": q.ftp_total, "self_cmva": q.self_cmva,
                     "self_ccva": q.self_ccva, "self_kva": q.self_kva, "delta_bcva": q.delta_bcva,
                     "delta_bmva": q.delta_bmva, "delta_fva": q.delta_fva})
    write_csv(out / "porting.csv", PORTING_COLUMNS, rows)
    write_json(out / "porting.json", {"defaulted": list(study.defaulted), "dispersion": dispersion(quotes)})
    return [out / "porting.csv", out / "porting.json"]


SENSITIVITY_COLUMNS = (
    "param", "value", "admissible", "agg_ccva", "agg_ccva_se", "agg_kva", "agg_kva_se", "agg_cmva",
)


def sensitivity_rows(net, sim, sweeps):
    """Aggregate CCVA/KVA over members along each one-dimensional sweep.

    Every grid point reuses the run seed so differences are not noise-dominated.
    """
    rows = []
    schedule = compute_margins(net, sim.params.rho_mkt)
    for name, grid in sweeps:
        for v in grid:
            params = replace(sim.params, **{name: v})
            row = {"param": name, "value": v}
            if not check_admissibility(params, net.members):
                row.update(admissible=False, agg_ccva=math.nan, agg_ccva_se=math.nan, agg_kva=math.nan,
                           agg_kva_se=math.nan, agg_cmva=math.nan)
                rows.append(row)
                continue
            s = schedule if name != "rho_mkt" else compute_margins(net, v)
            point = replace(sim, params=params)
            xva, losses = compute_all_xva(net, point, s)
            agg = aggregate_by_batch(net, losses)
            row.update(admissible=True, agg_cmva=math.fsum(x.cmva for x in xva.values()), **agg)
            rows.append(row)
    return rows


def run_sensitivity(net, sim, cfg, out):
    write_csv(out / "sensitivity.csv", SENSITIVITY_COLUMNS, sensitivity_rows(net, sim, cfg.sweeps))
    return [out / "sensitivity.csv"]


def run(cfg: RunConfig) -> int:
    """Execute one run; returns the process exit status."""
    try:
        if cfg.two_ccp_out is not None:
            from .cases import build_two_ccp_network

            build_two_ccp_network(path=cfg.two_ccp_out)
            print(f"wrote {cfg.two_ccp_out}")
            return EXIT_OK
        if cfg.table1_out is not None:
            from .cases import table1_network
            from .io import save_network

            save_network(table1_network(), cfg.table1_out)
            print(f"wrote {cfg.table1_out}")
            return EXIT_OK
        cfg.validate()
        if cfg.network_file is None:
            raise ConfigError("--network is required")
        net, params = load_network(cfg.network_file)
        violations = validate_network(net)
        adm = check_admissibility(params, net.members)
        if violations or not adm:
            for v in violations:
                print(f"invalid network: {v}", file=sys.stderr)
            if not adm:
                print(f"invalid copula: {adm}", file=sys.stderr)
            return EXIT_INVALID
        sim = SimConfig(cfg.n_paths, cfg.n_batches, cfg.seed, params)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if cfg.dump_dir is not None:
            cfg.dump_dir.mkdir(parents=True, exist_ok=True)
            for b in range(sim.n_batches):
                dump_batch(sample_batch(net, params, sim.batch_size, sim.seed, b), cfg.dump_dir / f"batch_{b:05d}.bin")
        if cfg.mode == "xva":
            files = run_xva(net, sim, cfg, out)
        elif cfg.mode in ("stress", "rst"):
            files = run_stress(net, sim, cfg, out, rst=cfg.mode == "rst")
        elif cfg.mode == "porting":
            files = run_porting(net, sim, cfg, out)
        else:
            files = run_sensitivity(net, sim, cfg, out)
    except (ConfigError, MarginError, PortingError, AdmissibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
