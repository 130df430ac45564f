"""Brownian paths, default times and the enlarged-filtration processes.

A single simulated world is a :class:`FiltrationPath`.  Many worlds that share
one base time grid are stored together in a :class:`PathBatch`, which is what
the solvers consume.

Column layout of a batch
------------------------
Every path gets ``n_steps + 3`` columns: the ``n_steps + 1`` base knots plus two
slots for the default time, one holding left limits (``tau-``) and one holding
values at ``tau``.  The step between the two slots has zero length and carries
the whole jump of ``H``, so a forward scheme applies the jump exactly once with
pre-default arguments.  Paths without a default before ``T`` (and paths whose
default falls exactly on a base knot) are padded at the end with zero-length
steps at ``T``.  ``base_col[i, k]`` is the column of base knot ``k`` on path
``i``; cross-sectional operations (regressions) work on base knots only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "TimeGrid",
    "IntensitySpec",
    "RngSpec",
    "FiltrationPath",
    "PathBatch",
    "KnotState",
    "sample_default_time",
    "build_filtration_path",
    "build_filtration_batch",
    "quadratic_variation_check",
    "batch_quadratic_variation_ok",
]


def _frozen(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing knots ``0 = t_0 < ... < t_n = T``."""

    knots: np.ndarray
    tau_index: int | None = None

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or knots.size < 3:
            raise InvalidInputError("a time grid needs at least 2 steps")
        if knots[0] != 0.0:
            raise InvalidInputError("first knot must be 0")
        if not np.all(np.diff(knots) > 0):
            raise InvalidInputError("knots must be strictly increasing")
        object.__setattr__(self, "knots", _frozen(knots))

    @classmethod
    def uniform(cls, T: float, n_steps: int) -> "TimeGrid":
        if T <= 0:
            raise InvalidInputError(f"horizon must be positive, got {T}")
        if n_steps < 2:
            raise InvalidInputError(f"n_steps must be >= 2, got {n_steps}")
        return cls(np.linspace(0.0, T, n_steps + 1))

    @property
    def T(self) -> float:
        return float(self.knots[-1])

    @property
    def n_steps(self) -> int:
        return self.knots.size - 1

    def insert_tau(self, tau: float) -> "TimeGrid":
        """Return a grid containing ``tau`` as a knot (no duplicate if it already is one)."""
        if not (0.0 < tau <= self.T):
            return self
        k = int(np.searchsorted(self.knots, tau))
        if self.knots[k] == tau:
            return TimeGrid(self.knots, tau_index=k)
        return TimeGrid(np.insert(self.knots, k, tau), tau_index=k)


@dataclass(frozen=True)
class IntensitySpec:
    """Deterministic default intensity ``lambda_F``.

    Piecewise linear through ``(times[i], values[i])`` and constant after the
    last knot.  A constant intensity is the one-knot case.
    """

    times: tuple = (0.0,)
    values: tuple = (0.0,)

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        values = tuple(float(v) for v in self.values)
        if len(times) != len(values) or not times:
            raise InvalidInputError("intensity times and values must have equal, nonzero length")
        if times[0] != 0.0:
            raise InvalidInputError("intensity must be specified from t = 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidInputError("intensity knots must be strictly increasing")
        if any(not np.isfinite(v) for v in values):
            raise InvalidInputError("intensity values must be finite")
        if any(v < 0 for v in values):
            raise InvalidInputError(f"negative intensity value in {values}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, c: float) -> "IntensitySpec":
        return cls((0.0,), (c,))

    @classmethod
    def piecewise_linear(cls, times, values) -> "IntensitySpec":
        return cls(tuple(times), tuple(values))

    @property
    def bound_c(self) -> float:
        return max(self.values)

    @property
    def is_zero(self) -> bool:
        return self.bound_c == 0.0

    @cached_property
    def _cum_knots(self) -> np.ndarray:
        t = np.asarray(self.times)
        v = np.asarray(self.values)
        seg = 0.5 * (v[1:] + v[:-1]) * np.diff(t)
        return np.concatenate([[0.0], np.cumsum(seg)])

    def rate(self, t):
        t = np.asarray(t, dtype=float)
        if len(self.times) == 1:
            return np.full_like(t, self.values[0])
        return np.interp(t, self.times, self.values)

    def cumulative(self, t):
        """Closed-form ``int_0^t lambda_F(s) ds`` (``inf`` maps to ``inf`` or 0)."""
        t = np.asarray(t, dtype=float)
        times = np.asarray(self.times)
        values = np.asarray(self.values)
        cum = self._cum_knots
        i = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1)
        s = t - times[i]
        if len(times) > 1:
            slope = np.zeros(len(times))
            slope[:-1] = np.diff(values) / np.diff(times)
            last = i == len(times) - 1
            slope_i = np.where(last, 0.0, slope[i])
        else:
            slope_i = 0.0
        with np.errstate(invalid="ignore"):
            out = cum[i] + values[i] * s + 0.5 * slope_i * s * s
        # infinite times: Lambda(inf) = inf unless the tail rate is zero
        return np.where(np.isinf(t), np.where(values[-1] > 0, np.inf, cum[-1]), out)

    def inverse_cumulative(self, e):
        """Smallest ``t`` with ``Lambda(t) >= e``; ``inf`` if never reached."""
        e = np.asarray(e, dtype=float)
        times = np.asarray(self.times)
        values = np.asarray(self.values)
        cum = self._cum_knots
        i = np.clip(np.searchsorted(cum, e, side="left") - 1, 0, len(times) - 1)
        rem = e - cum[i]
        v = values[i]
        out = np.full(e.shape, np.inf)
        last = i == len(times) - 1
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if len(times) > 1:
                slope = np.zeros(len(times))
                slope[:-1] = np.diff(values) / np.diff(times)
                a = np.where(last, 0.0, slope[i])
                # stable root of a/2 s^2 + v s - rem = 0
                disc = np.maximum(v * v + 2.0 * a * rem, 0.0)
                s = 2.0 * rem / (v + np.sqrt(disc))
                inner = ~last
                out = np.where(inner, times[i] + s, out)
            tail = last & (v > 0)
            out = np.where(tail, times[i] + rem / np.where(v > 0, v, 1.0), out)
        return np.where(e <= 0, 0.0, out)

    def survival(self, t):
        return np.exp(-self.cumulative(t))


@dataclass(frozen=True)
class RngSpec:
    """Counter-based stream: Philox keyed by ``(seed, stream_id)``."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def _draw_stream(rng: RngSpec, n_steps: int):
    g = rng.generator()
    e = g.standard_exponential()
    z = g.standard_normal(n_steps + 1)
    return e, z


def sample_default_time(intensity: IntensitySpec, rng: RngSpec, T: float) -> float:
    """Inverse-transform draw of the default time; ``inf`` if no default by ``T``."""
    if T <= 0:
        raise InvalidInputError("T must be positive")
    e = rng.generator().standard_exponential()
    return float(_tau_from_exponential(intensity, np.asarray([e]), T)[0])


def _tau_from_exponential(intensity: IntensitySpec, e, T: float):
    e = np.maximum(np.asarray(e, dtype=float), np.finfo(float).tiny)
    if intensity.is_zero:
        return np.full(e.shape, np.inf)
    tau = intensity.inverse_cumulative(e)
    return np.where(tau <= T, tau, np.inf)


@dataclass(frozen=True)
class KnotState:
    """Cross-section of path information at one column or base knot.

    ``t`` may differ between paths when the column is a default-time slot.
    """

    t: np.ndarray
    W: np.ndarray
    H: np.ndarray
    tau: np.ndarray
    lam: np.ndarray
    X: np.ndarray | None = None
    u: np.ndarray | None = None
    index: int = 0


@dataclass(frozen=True)
class FiltrationPath:
    """One world on its own strict grid (base knots plus ``tau`` if ``tau <= T``)."""

    grid: TimeGrid
    dW: np.ndarray
    tau: float
    H: np.ndarray
    M: np.ndarray
    lambda_G: np.ndarray
    compensator: np.ndarray
    rng: RngSpec | None = None
    batch: "PathBatch | None" = field(default=None, repr=False, compare=False)

    @property
    def W(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dW)])

    def m_jumps(self) -> np.ndarray:
        """Jumps of ``M`` at the knots, from its components.

        ``H`` only moves at ``tau`` (a knot) and the compensator is
        continuous, so the jump of ``M`` at a knot is the jump of ``H``.
        """
        dh = np.diff(self.H, prepend=0.0)
        dcomp = np.zeros_like(dh)
        return dh - dcomp

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["knot", "dW", "H", "M", "lambda_G"])
        dw = np.concatenate([[0.0], self.dW])
        for row in zip(self.grid.knots, dw, self.H, self.M, self.lambda_G):
            w.writerow([repr(float(x)) for x in row])


def quadratic_variation_check(path: FiltrationPath) -> bool:
    """``sum (delta M)^2 == H`` at every knot, plus the path-shape invariants."""
    H = np.asarray(path.H)
    if not np.all((H == 0.0) | (H == 1.0)) or np.any(np.diff(H) < 0):
        return False
    if not np.array_equal(path.M, H - path.compensator):
        return False
    qv = np.cumsum(path.m_jumps() ** 2)
    return bool(np.array_equal(qv, H))


def batch_quadratic_variation_ok(batch: "PathBatch") -> np.ndarray:
    """Per-path version of :func:`quadratic_variation_check` on the batch columns."""
    H = batch.H
    shape_ok = np.all((H == 0.0) | (H == 1.0), axis=1) & np.all(np.diff(H, axis=1) >= 0, axis=1)
    m_ok = np.all(batch.M == H - batch.A, axis=1)
    # the compensator is continuous, so the jumps of M are those of H
    qv = np.cumsum(np.diff(H, axis=1, prepend=0.0) ** 2, axis=1)
    return shape_ok & m_ok & np.all(qv == H, axis=1)


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Many filtration paths on a shared base grid, in the column layout."""

    base: TimeGrid
    intensity: IntensitySpec
    seed: int
    stream_ids: np.ndarray
    tau: np.ndarray
    W_base: np.ndarray
    W_tau: np.ndarray
    t: np.ndarray
    W: np.ndarray
    H: np.ndarray
    A: np.ndarray
    lam: np.ndarray
    base_col: np.ndarray
    jump_col: np.ndarray

    # -- construction ------------------------------------------------------
    @classmethod
    def assemble(cls, base: TimeGrid, intensity: IntensitySpec, tau, W_base, W_tau,
                 seed: int = 0, stream_ids=None) -> "PathBatch":
        knots = base.knots
        n1 = knots.size
        T = knots[-1]
        tau = np.asarray(tau, dtype=float)
        W_base = np.asarray(W_base, dtype=float)
        P = tau.size
        C = n1 + 2
        defaulted = tau <= T
        k = np.where(defaulted, np.searchsorted(knots, np.where(defaulted, tau, 0.0)), n1)
        exact = defaulted & (knots[np.minimum(k, n1 - 1)] == tau)
        W_tau = np.where(exact, W_base[np.arange(P), np.minimum(k, n1 - 1)], W_tau)
        W_tau = np.where(defaulted, W_tau, np.nan)

        c = np.arange(C)[None, :]
        kk = k[:, None]
        shift = np.where(exact, 1, 2)[:, None]
        slot = (c == kk) | (c == kk + 1)
        bidx = np.clip(np.where(c < kk, c, c - shift), 0, n1 - 1)
        slot_t = np.where(defaulted, tau, T)[:, None]
        slot_W = np.where(defaulted, W_tau, W_base[:, -1])[:, None]
        t = np.where(slot, slot_t, knots[bidx])
        W = np.where(slot, slot_W, np.take_along_axis(W_base, bidx, axis=1))
        H = (defaulted[:, None] & (c >= kk + 1)).astype(float)
        A = intensity.cumulative(np.minimum(t, tau[:, None]))
        lam = intensity.rate(t) * (1.0 - H)

        j = np.arange(n1)[None, :]
        base_col = np.where(j < kk, j, j + shift)
        jump_col = np.where(defaulted, k, -1)
        if stream_ids is None:
            stream_ids = np.arange(P)
        return cls(base, intensity, int(seed), _frozen(np.asarray(stream_ids)), _frozen(tau),
                   _frozen(W_base), _frozen(W_tau), _frozen(t), _frozen(W), _frozen(H),
                   _frozen(A), _frozen(lam), _frozen(base_col), _frozen(jump_col))

    # -- shape -------------------------------------------------------------
    @property
    def n_paths(self) -> int:
        return self.tau.size

    @property
    def n_cols(self) -> int:
        return self.t.shape[1]

    @property
    def T(self) -> float:
        return self.base.T

    @property
    def defaulted(self) -> np.ndarray:
        return self.tau <= self.T

    # -- column increments -------------------------------------------------
    @cached_property
    def dt(self):
        return _frozen(np.diff(self.t, axis=1))

    @cached_property
    def dW(self):
        return _frozen(np.diff(self.W, axis=1))

    @cached_property
    def dH(self):
        return _frozen(np.diff(self.H, axis=1))

    @cached_property
    def dA(self):
        return _frozen(np.diff(self.A, axis=1))

    @cached_property
    def M(self):
        return _frozen(self.H - self.A)

    @cached_property
    def dM(self):
        # jump part and compensator part kept separate so dM = dH - dA exactly
        return _frozen(self.dH - self.dA)

    @cached_property
    def trapezoid_weights(self):
        """Per-column trapezoid weights; zero-length steps contribute nothing."""
        w = np.zeros_like(self.t)
        w[:, :-1] += 0.5 * self.dt
        w[:, 1:] += 0.5 * self.dt
        return _frozen(w)

    # -- base-knot views -----------------------------------------------------
    def at_base(self, arr):
        return np.take_along_axis(np.asarray(arr), self.base_col, axis=1)

    @cached_property
    def base_dt(self):
        return _frozen(np.diff(self.base.knots))

    @cached_property
    def base_dW(self):
        return _frozen(np.diff(self.W_base, axis=1))

    @cached_property
    def base_H(self):
        return _frozen(self.at_base(self.H))

    @cached_property
    def base_dH(self):
        return _frozen(np.diff(self.base_H, axis=1))

    @cached_property
    def base_A(self):
        return _frozen(self.at_base(self.A))

    @cached_property
    def base_dM(self):
        return _frozen(self.base_dH - np.diff(self.base_A, axis=1))

    @cached_property
    def base_lam(self):
        """``lambda_G`` at base knots (zero once default has happened)."""
        return _frozen(self.intensity.rate(self.base.knots)[None, :] * (1.0 - self.base_H))

    @cached_property
    def survival_compensator(self):
        """``int lambda_F`` over each base step, for paths alive at its start."""
        cum = self.intensity.cumulative(self.base.knots)
        return _frozen(np.diff(cum)[None, :] * (1.0 - self.base_H[:, :-1]))

    def column_state(self, j: int, X=None, u=None) -> KnotState:
        return KnotState(t=self.t[:, j], W=self.W[:, j], H=self.H[:, j], tau=self.tau,
                         lam=self.lam[:, j], X=None if X is None else X[:, j],
                         u=None if u is None else u[:, j], index=j)

    def base_state(self, k: int, X_base=None, u_base=None) -> KnotState:
        tk = self.base.knots[k]
        return KnotState(t=np.full(self.n_paths, tk), W=self.W_base[:, k], H=self.base_H[:, k],
                         tau=self.tau, lam=self.base_lam[:, k],
                         X=None if X_base is None else X_base[:, k],
                         u=None if u_base is None else u_base[:, k], index=k)

    def terminal_state(self, X=None) -> KnotState:
        return self.column_state(self.n_cols - 1, X=X)

    def base_index_of_columns(self) -> np.ndarray:
        """For every column, the last base knot at or before its time."""
        idx = np.searchsorted(self.base.knots, self.t, side="right") - 1
        return np.clip(idx, 0, self.base.n_steps)

    # -- derived batches -----------------------------------------------------
    def subset(self, rows) -> "PathBatch":
        rows = np.asarray(rows)
        return PathBatch.assemble(self.base, self.intensity, self.tau[rows], self.W_base[rows],
                                  self.W_tau[rows], self.seed, self.stream_ids[rows])

    def coarsen(self, factor: int) -> "PathBatch":
        """Same Brownian paths and default times on every ``factor``-th base knot."""
        if self.base.n_steps % factor:
            raise InvalidInputError("factor must divide n_steps")
        base = TimeGrid(self.base.knots[::factor])
        return PathBatch.assemble(base, self.intensity, self.tau, self.W_base[:, ::factor],
                                  self.W_tau, self.seed, self.stream_ids)

    def path(self, i: int) -> FiltrationPath:
        """Strict-grid view of path ``i``."""
        cols = list(self.base_col[i])
        tau = float(self.tau[i])
        tau_idx = None
        if self.jump_col[i] >= 0:
            post = int(self.jump_col[i]) + 1
            if post not in cols:
                cols.append(post)
            cols.sort()
            tau_idx = cols.index(post)
        cols = np.asarray(cols)
        grid = TimeGrid(self.t[i, cols], tau_index=tau_idx)
        lam = self.lam[i, cols].copy()
        if tau_idx is not None:
            lam[tau_idx] = self.lam[i, self.jump_col[i]]  # lambda_G is predictable
        return FiltrationPath(grid=grid, dW=np.diff(self.W[i, cols]), tau=tau, H=self.H[i, cols],
                              M=self.M[i, cols], lambda_G=lam, compensator=self.A[i, cols],
                              rng=RngSpec(self.seed, int(self.stream_ids[i])),
                              batch=self.subset([i]))

    def iter_paths(self) -> Iterable[FiltrationPath]:
        for i in range(self.n_paths):
            yield self.path(i)


def build_filtration_batch(grid: TimeGrid, intensity: IntensitySpec, seed: int,
                           n_paths: int, first_stream: int = 0) -> PathBatch:
    """Draw ``n_paths`` worlds, path ``i`` from stream ``(seed, first_stream + i)``.

    Each stream yields, in order: one unit exponential (default clock), one
    standard normal per base step, and one standard normal for the Brownian
    bridge value at ``tau``.
    """
    if n_paths < 1:
        raise InvalidInputError("n_paths must be >= 1")
    n = grid.n_steps
    knots = grid.knots
    streams = np.arange(first_stream, first_stream + n_paths)
    E = np.empty(n_paths)
    Z = np.empty((n_paths, n + 1))
    for r, s in enumerate(streams):
        E[r], Z[r] = _draw_stream(RngSpec(seed, int(s)), n)
    tau = _tau_from_exponential(intensity, E, grid.T)
    dt = np.diff(knots)
    W_base = np.zeros((n_paths, n + 1))
    W_base[:, 1:] = np.cumsum(np.sqrt(dt) * Z[:, :n], axis=1)
    # Brownian bridge between the knots bracketing tau
    defaulted = tau <= grid.T
    k = np.clip(np.searchsorted(knots, np.where(defaulted, tau, 0.0)), 1, n)
    t0, t1 = knots[k - 1], knots[k]
    rows = np.arange(n_paths)
    w0, w1 = W_base[rows, k - 1], W_base[rows, k]
    with np.errstate(invalid="ignore"):
        frac = (np.where(defaulted, tau, t0) - t0) / (t1 - t0)
        sd = np.sqrt(np.maximum(frac * (t1 - np.where(defaulted, tau, t0)), 0.0))
    W_tau = np.where(defaulted, w0 + frac * (w1 - w0) + sd * Z[:, n], np.nan)
    return PathBatch.assemble(grid, intensity, tau, W_base, W_tau, seed, streams)


def build_filtration_path(grid: TimeGrid, intensity: IntensitySpec, rng: RngSpec) -> FiltrationPath:
    batch = build_filtration_batch(grid, intensity, rng.seed, 1, first_stream=rng.stream_id)
    return batch.path(0)
