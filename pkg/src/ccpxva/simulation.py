"""Student-t credit/market copula sampling in reproducible batches.

Per member ``i`` and path, with i.i.d. standard normals ``T, E`` (systemic),
``T_i, E_i, X_i`` and independent chi-square(nu) mixers ``Gc_i, Gm_i``::

    credit_i = sqrt(nu/Gc_i) (sqrt(rc) T - sqrt(rw) ((1-rc)/(1-rm))^(1/4) X_i + sqrt(1-rc) k T_i)
    market_i = sqrt(nu/Gm_i) (sqrt(rm) E + sqrt(rw) ((1-rm)/(1-rc))^(1/4) X_i + sqrt(1-rm) k E_i)

with ``k = sqrt(1 - rw / (sqrt(1-rc) sqrt(1-rm)))``. Both latents are
standard Student-t; member ``i`` defaults before the horizon iff
``credit_i <= t_nu^-1(P(tau_i <= T))``.

Every factor is drawn from its own Philox stream keyed on
``(seed, batch_id, entity, factor)``, so a member's draws do not depend on
which other members are in the network, on the batch schedule, or on the
number of worker threads. Removing or adding members therefore gives common
random numbers for free.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence, TypeVar

import numpy as np
from scipy import stats

from .network import ClearingNetwork, Member, horizon_default_prob

THREADS_ENV = "CCP_XVA_THREADS"

# entity kinds in the stream key
_SYSTEMIC, _MEMBER, _BILATERAL, _CLIENT = 0, 1, 2, 3
# factor tags
_T, _E, _TI, _EI, _XI, _GC, _GM = range(7)


class AdmissibilityError(ValueError):
    pass


@dataclass(frozen=True)
class CopulaParams:
    rho_cr: float = 0.3
    rho_mkt: float = 0.2
    # scalar, or per-member overrides on top of ``Member.rho_wwr``
    rho_wwr: float | Mapping[int, float] = 0.2
    nu: int = 3

    def wwr_for(self, member: Member | int) -> float:
        mid = member.id if isinstance(member, Member) else member
        if isinstance(self.rho_wwr, Mapping):
            if mid in self.rho_wwr:
                return float(self.rho_wwr[mid])
            return float(member.rho_wwr) if isinstance(member, Member) and member.rho_wwr is not None else 0.0
        if isinstance(member, Member) and member.rho_wwr is not None:
            return float(member.rho_wwr)
        return float(self.rho_wwr)

    @property
    def default_wwr(self) -> float:
        """Wrong-way correlation for entities without an override (bilateral counterparties)."""
        return 0.0 if isinstance(self.rho_wwr, Mapping) else float(self.rho_wwr)

    @property
    def wwr_bound(self) -> float:
        return math.sqrt(1.0 - self.rho_cr) * math.sqrt(1.0 - self.rho_mkt)


@dataclass(frozen=True)
class Admissibility:
    ok: bool
    bound: float
    offenders: dict[int | None, float] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        items = ", ".join(f"{k}: {v:g}" for k, v in self.offenders.items())
        return f"wrong-way correlation above sqrt(1-rho_cr)*sqrt(1-rho_mkt) = {self.bound:.6g} ({items})"


def check_admissibility(params: CopulaParams, members: Iterable[Member | int] = ()) -> Admissibility:
    """``sqrt(1-rho_cr) sqrt(1-rho_mkt) >= rho_wwr_i`` for every member.

    The scalar ``rho_wwr`` is always checked (keyed ``None``); per-member
    values are checked for ``members`` and for any explicit overrides.
    """
    bad: dict[int | None, float] = {}
    if not (0.0 <= params.rho_cr < 1.0 and 0.0 <= params.rho_mkt < 1.0):
        return Admissibility(False, float("nan"), {None: float("nan")})
    bound = params.wwr_bound
    tol = 1e-12
    candidates: dict[int | None, float] = {}
    if isinstance(params.rho_wwr, Mapping):
        candidates.update({k: float(v) for k, v in params.rho_wwr.items()})
    else:
        candidates[None] = float(params.rho_wwr)
    for m in members:
        mid = m.id if isinstance(m, Member) else m
        candidates[mid] = params.wwr_for(m)
    for k, v in candidates.items():
        if v < 0 or v > bound + tol:
            bad[k] = v
    return Admissibility(not bad, bound, bad)


def _stream(seed: int, batch_id: int, key: Sequence[int], tag: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(batch_id), *[int(k) + 1 for k in key], tag])
    return np.random.Generator(np.random.Philox(ss))


def _normal(seed, batch_id, key, tag, n):
    return _stream(seed, batch_id, key, tag).standard_normal(n)


def _mixer(seed, batch_id, key, tag, n, nu):
    return np.sqrt(nu / _stream(seed, batch_id, key, tag).chisquare(nu, n))


def _loadings(params: CopulaParams, rw: float) -> tuple[float, float, float]:
    rc, rm = params.rho_cr, params.rho_mkt
    k = math.sqrt(max(1.0 - rw / (math.sqrt(1 - rc) * math.sqrt(1 - rm)), 0.0))
    x_cr = math.sqrt(rw) * ((1 - rc) / (1 - rm)) ** 0.25
    x_mk = math.sqrt(rw) * ((1 - rm) / (1 - rc)) ** 0.25
    return k, x_cr, x_mk


@dataclass
class ScenarioBatch:
    """One block of simulated paths.

    ``survival[p, j]`` is ``J`` for ``member_ids[j]`` and ``market[p, d]`` the
    Student-t market latent of driver ``drivers[d]``. Portfolio variations
    are formed on demand by :meth:`delta_p` and by the loss code.
    """

    batch_id: int
    n_paths: int
    seed: int
    member_ids: tuple[int, ...]
    survival: np.ndarray
    drivers: tuple[int, ...]
    market: np.ndarray
    # (member, index) -> survival / market latent of a bilateral counterparty
    bilateral_survival: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    bilateral_market: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    # (member, ccp) -> survival of a risky cleared client
    client_survival: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def column(self, member_id: int) -> int:
        return self.member_ids.index(member_id)

    def survives(self, member_id: int) -> np.ndarray:
        return self.survival[:, self.column(member_id)]

    def latent(self, driver: int) -> np.ndarray:
        return self.market[:, self.drivers.index(driver)]

    def delta_p(self, net: ClearingNetwork) -> np.ndarray:
        """Dense ``[path, member, ccp]`` variation of each member's whole position."""
        ccp_ids = [c.id for c in net.ccps]
        out = np.zeros((self.n_paths, len(self.member_ids), len(ccp_ids)))
        for j, mid in enumerate(self.member_ids):
            m = net.member(mid)
            for c, cid in enumerate(ccp_ids):
                books = m.client_books(cid) + m.house_books(cid)
                out[:, j, c] = books_delta_p(self, books, net.ccp(cid).liquidation_years)
        return out

    def restrict(self, net: ClearingNetwork) -> "ScenarioBatch":
        """The batch ``sample_batch`` would produce for ``net`` with the same seed.

        Valid when ``net`` only uses members and drivers present here and the
        copula parameters are unchanged; avoids resampling in porting loops.
        """
        cols = [self.column(m.id) for m in net.members]
        need = _drivers(net)
        missing = [d for d in need if d not in self.drivers]
        if missing:
            raise KeyError(f"drivers {missing} not in batch")
        dcols = [self.drivers.index(d) for d in need]
        keep = set(net.member_ids)
        return ScenarioBatch(
            self.batch_id, self.n_paths, self.seed, tuple(net.member_ids),
            self.survival[:, cols], tuple(need), self.market[:, dcols],
            {k: v for k, v in self.bilateral_survival.items() if k[0] in keep},
            {k: v for k, v in self.bilateral_market.items() if k[0] in keep},
            {k: v for k, v in self.client_survival.items() if k[0] in keep},
        )


def books_delta_p(batch: ScenarioBatch, books, liquidation_years: float) -> np.ndarray:
    """Amount owed by an account's holder over the liquidation period."""
    out = np.zeros(batch.n_paths)
    root = math.sqrt(liquidation_years)
    for b in books:
        out -= b.nominal * b.volatility * root * batch.latent(b.driver)
    return out


def _drivers(net: ClearingNetwork) -> list[int]:
    ids = list(net.member_ids)
    for m in net.members:
        for b in m.ported_books:
            if b.driver not in ids:
                ids.append(b.driver)
    return ids


def sample_batch(
    net: ClearingNetwork,
    params: CopulaParams,
    n_paths: int,
    seed: int,
    batch_id: int = 0,
    extra_drivers: Iterable[int] = (),
) -> ScenarioBatch:
    """Draw ``n_paths`` joint default / market scenarios for ``net``.

    ``extra_drivers`` adds market latents for ids outside the member list
    (e.g. members that have since defaulted and whose books were ported).
    """
    if n_paths <= 0:
        raise ValueError("n_paths must be positive")
    adm = check_admissibility(params, net.members)
    if not adm:
        raise AdmissibilityError(str(adm))
    nu, rc, rm = params.nu, params.rho_cr, params.rho_mkt
    sys_t = _normal(seed, batch_id, (_SYSTEMIC,), _T, n_paths)
    sys_e = _normal(seed, batch_id, (_SYSTEMIC,), _E, n_paths)
    t_inv = lambda p: stats.t.ppf(p, nu)

    def credit(key, x, rw):
        k, x_cr, _ = _loadings(params, rw)
        g = math.sqrt(rc) * sys_t - x_cr * x + math.sqrt(1 - rc) * k * _normal(seed, batch_id, key, _TI, n_paths)
        return _mixer(seed, batch_id, key, _GC, n_paths, nu) * g

    def market(key, x, rw):
        k, _, x_mk = _loadings(params, rw)
        g = math.sqrt(rm) * sys_e + x_mk * x + math.sqrt(1 - rm) * k * _normal(seed, batch_id, key, _EI, n_paths)
        return _mixer(seed, batch_id, key, _GM, n_paths, nu) * g

    members = list(net.members)
    drivers = _drivers(net)
    drivers += [d for d in extra_drivers if d not in drivers]
    wwr = {m.id: params.wwr_for(m) for m in members}
    survival = np.empty((n_paths, len(members)), dtype=bool)
    mkt = np.empty((n_paths, len(drivers)))
    xs = {}
    for d_col, d in enumerate(drivers):
        rw = wwr[d] if d in wwr else params.wwr_for(d)
        xs[d] = _normal(seed, batch_id, (_MEMBER, d), _XI, n_paths)
        mkt[:, d_col] = market((_MEMBER, d), xs[d], rw)
    for j, m in enumerate(members):
        gamma = horizon_default_prob(m, net.horizon_years)
        survival[:, j] = credit((_MEMBER, m.id), xs[m.id], wwr[m.id]) > t_inv(gamma)

    batch = ScenarioBatch(batch_id, n_paths, seed, tuple(m.id for m in members), survival, tuple(drivers), mkt)
    for m in members:
        for idx, b in enumerate(m.bilateral_netting_sets):
            key = (_BILATERAL, m.id, idx)
            x = _normal(seed, batch_id, key, _XI, n_paths)
            gamma = horizon_default_prob(b.counterparty_default_prob, net.horizon_years)
            rw = params.default_wwr
            batch.bilateral_survival[(m.id, idx)] = credit(key, x, rw) > t_inv(gamma)
            batch.bilateral_market[(m.id, idx)] = market(key, x, rw)
        for pos in m.positions:
            if pos.client_default_prob is None:
                continue
            # the client shares the member's wrong-way factor: its default
            # accelerates with adverse moves of the book it holds
            key = (_CLIENT, m.id, pos.ccp_id)
            gamma = horizon_default_prob(pos.client_default_prob, net.horizon_years)
            batch.client_survival[(m.id, pos.ccp_id)] = credit(key, xs[m.id], wwr[m.id]) > t_inv(gamma)
    return batch


# binary dump ---------------------------------------------------------------

_MAGIC = b"CCPXVA01"


def dump_batch(batch: ScenarioBatch, path) -> None:
    """Write a batch in a fixed little-endian layout.

    Layout: magic ``CCPXVA01``; ``<QqIII`` seed, batch_id, n_paths,
    n_members, n_drivers; member ids ``<i8``; driver ids ``<i8``; survival
    ``u1[n_paths, n_members]`` row-major; market ``<f8[n_paths, n_drivers]``;
    ``<I`` bilateral count then per set ``<qq`` key, ``u1[n_paths]``,
    ``<f8[n_paths]``; ``<I`` client count then per client ``<qq`` key,
    ``u1[n_paths]``.
    """
    n = batch.n_paths
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<QqIII", batch.seed & 0xFFFFFFFFFFFFFFFF, batch.batch_id, n,
                            len(batch.member_ids), len(batch.drivers)))
        f.write(np.asarray(batch.member_ids, dtype="<i8").tobytes())
        f.write(np.asarray(batch.drivers, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(batch.survival, dtype="u1").tobytes())
        f.write(np.ascontiguousarray(batch.market, dtype="<f8").tobytes())
        f.write(struct.pack("<I", len(batch.bilateral_survival)))
        for key in sorted(batch.bilateral_survival):
            f.write(struct.pack("<qq", *key))
            f.write(batch.bilateral_survival[key].astype("u1").tobytes())
            f.write(batch.bilateral_market[key].astype("<f8").tobytes())
        f.write(struct.pack("<I", len(batch.client_survival)))
        for key in sorted(batch.client_survival):
            f.write(struct.pack("<qq", *key))
            f.write(batch.client_survival[key].astype("u1").tobytes())


def load_batch(path) -> ScenarioBatch:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _MAGIC:
        raise ValueError("not a scenario batch dump")
    off = 8
    seed, batch_id, n, nm, nd = struct.unpack_from("<QqIII", data, off)
    off += struct.calcsize("<QqIII")

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    mids = tuple(int(x) for x in take("<i8", nm))
    drivers = tuple(int(x) for x in take("<i8", nd))
    surv = take("u1", n * nm).reshape(n, nm).astype(bool)
    mkt = take("<f8", n * nd).reshape(n, nd).copy()
    batch = ScenarioBatch(batch_id, n, seed, mids, surv, drivers, mkt)
    (nb,) = struct.unpack_from("<I", data, off)
    off += 4
    for _ in range(nb):
        key = struct.unpack_from("<qq", data, off)
        off += 16
        batch.bilateral_survival[key] = take("u1", n).astype(bool)
        batch.bilateral_market[key] = take("<f8", n).copy()
    (nc,) = struct.unpack_from("<I", data, off)
    off += 4
    for _ in range(nc):
        key = struct.unpack_from("<qq", data, off)
        off += 16
        batch.client_survival[key] = take("u1", n).astype(bool)
    return batch


# batching and workers --------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 1_000_000
    n_batches: int = 10
    seed: int = 0
    params: CopulaParams = field(default_factory=CopulaParams)
    workers: int | None = None

    def __post_init__(self):
        if self.n_paths <= 0 or self.n_batches <= 0:
            raise ValueError("n_paths and n_batches must be positive")
        if self.n_paths % self.n_batches:
            raise ValueError(f"n_paths {self.n_paths} not divisible by n_batches {self.n_batches}")

    @property
    def batch_size(self) -> int:
        return self.n_paths // self.n_batches


def worker_count(requested: int | None = None) -> int:
    """Worker threads: ``requested``, else the CPU count, capped by ``CCP_XVA_THREADS``."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(int(cap), 1))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(n, 1)


T = TypeVar("T")


def parallel_map(fn: Callable[..., T], items: Sequence, workers: int | None = None) -> list[T]:
    """Ordered map over ``items``; results do not depend on the worker count."""
    n = min(worker_count(workers), len(items)) if items else 1
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def iter_batches(net: ClearingNetwork, sim: SimConfig, extra_drivers: Iterable[int] = ()):
    """Yield the batches of a run one at a time (sequentially)."""
    extra = tuple(extra_drivers)
    for b in range(sim.n_batches):
        yield sample_batch(net, sim.params, sim.batch_size, sim.seed, b, extra)
