"""Cross-sectional least squares for conditional expectations given the path state.

At a knot the design matrix is built from path functionals of the current
state.  With ``split_on_default`` the surviving and the defaulted paths get
separate fits.  Each stratum fit is reduced automatically: columns that are
numerically constant, and columns that are collinear with earlier ones
(pivoted QR), are dropped and recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import RegressionError
from .paths import KnotState

__all__ = ["RegressionBasis", "StratumFit", "KnotFit", "FEATURES", "feature", "fit_knot"]


def _feature_X(s: KnotState):
    if s.X is None:
        raise RegressionError("feature 'X' needs the forward state")
    return s.X


FEATURES: dict[str, Callable[[KnotState], np.ndarray]] = {
    "1": lambda s: np.ones_like(s.W),
    "t": lambda s: np.broadcast_to(s.t, s.W.shape).astype(float),
    "W": lambda s: s.W,
    "W2": lambda s: s.W ** 2,
    "W3": lambda s: s.W ** 3,
    "W4": lambda s: s.W ** 4,
    "H": lambda s: s.H,
    "Hdt": lambda s: s.H * np.where(s.H > 0, s.t - s.tau, 0.0),
    "X": _feature_X,
    "X2": lambda s: _feature_X(s) ** 2,
}


def feature(name: str) -> Callable[[KnotState], np.ndarray]:
    """Look up a feature; ``expW:a`` is the exponential martingale ``exp(a W_t - a^2 t / 2)``."""
    if name in FEATURES:
        return FEATURES[name]
    if name.startswith("expW:"):
        try:
            a = float(name[5:])
        except ValueError:
            raise RegressionError(f"bad feature parameter in {name!r}") from None
        return lambda s: np.exp(a * s.W - 0.5 * a * a * np.broadcast_to(s.t, s.W.shape))
    raise RegressionError(f"unknown basis feature {name!r}")


@dataclass(frozen=True)
class RegressionBasis:
    """Named features (see :data:`FEATURES`) and the default-stratum split."""

    features: tuple = ("1", "t", "W", "W2", "Hdt")
    split_on_default: bool = True
    min_paths_per_feature: int = 10
    rank_rtol: float = 1e-10

    def __post_init__(self):
        feats = tuple(self.features)
        # the constant goes first so that rank reduction never removes it
        object.__setattr__(self, "features", ("1",) + tuple(f for f in feats if f != "1")
                           if "1" in feats else feats)
        for f in self.features:
            feature(f)
        if "1" not in self.features:
            raise RegressionError("the basis must contain the constant feature '1'")

    def design(self, state: KnotState, names=None) -> np.ndarray:
        names = self.features if names is None else names
        return np.column_stack([np.asarray(feature(n)(state), dtype=float) for n in names])

    def extended(self, *extra: str) -> "RegressionBasis":
        return RegressionBasis(self.features + tuple(f for f in extra if f not in self.features),
                               self.split_on_default, self.min_paths_per_feature, self.rank_rtol)


@dataclass(frozen=True)
class StratumFit:
    features: tuple
    coef: np.ndarray  # (n_features, n_targets) on standardized columns
    center: np.ndarray
    scale: np.ndarray
    n_obs: int
    cond: float
    dropped: tuple
    resid_var: np.ndarray
    gram_inv: np.ndarray

    def _z(self, basis: RegressionBasis, state: KnotState) -> np.ndarray:
        D = basis.design(state, self.features)
        return (D - self.center) / self.scale

    def predict(self, basis: RegressionBasis, state: KnotState) -> np.ndarray:
        return self._z(basis, state) @ self.coef

    def prediction_se(self, basis: RegressionBasis, state: KnotState) -> np.ndarray:
        """Standard error of the fitted conditional mean (first target)."""
        Z = self._z(basis, state)
        lev = np.einsum("ij,jk,ik->i", Z, self.gram_inv, Z)
        return np.sqrt(np.maximum(lev, 0.0) * self.resid_var[0])


@dataclass
class KnotFit:
    """Fits for one knot, keyed by stratum (0 alive, 1 defaulted, -1 unsplit)."""

    basis: RegressionBasis
    knot: int
    strata: dict = field(default_factory=dict)

    def _stratum_of(self, state: KnotState) -> np.ndarray:
        if not self.basis.split_on_default:
            return np.full(state.W.shape, -1)
        return (np.asarray(state.H) > 0).astype(int)

    def has(self, stratum: int) -> bool:
        return self.strata.get(stratum) is not None

    def predict(self, state: KnotState) -> np.ndarray:
        lab = self._stratum_of(state)
        out = None
        for s in np.unique(lab):
            fit = self.strata.get(int(s))
            if fit is None:
                raise RegressionError("no fit for stratum", knot=self.knot, stratum=int(s))
            rows = lab == s
            sub = _take_rows(state, rows)
            val = fit.predict(self.basis, sub)
            if out is None:
                out = np.empty((lab.size, val.shape[1]))
            out[rows] = val
        return out

    def prediction_se(self, state: KnotState) -> np.ndarray:
        lab = self._stratum_of(state)
        out = np.empty(lab.size)
        for s in np.unique(lab):
            rows = lab == s
            out[rows] = self.strata[int(s)].prediction_se(self.basis, _take_rows(state, rows))
        return out

    @property
    def diagnostics(self) -> dict:
        return {str(k): {"n_obs": v.n_obs, "cond": v.cond, "features": list(v.features),
                         "dropped": list(v.dropped)}
                for k, v in self.strata.items() if v is not None}


def _take_rows(state: KnotState, rows) -> KnotState:
    def pick(a):
        if a is None:
            return None
        a = np.asarray(a)
        return a[rows] if a.ndim and a.shape[0] == rows.shape[0] else a

    return KnotState(t=pick(state.t), W=pick(state.W), H=pick(state.H), tau=pick(state.tau),
                     lam=pick(state.lam), X=pick(state.X), u=pick(state.u), index=state.index)


def _fit_stratum(basis: RegressionBasis, state: KnotState, Y: np.ndarray, knot, stratum,
                 weights=None):
    n = Y.shape[0]
    names = list(basis.features)
    D = basis.design(state, names)
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(Y))):
        raise RegressionError("non-finite design or target", knot=knot, stratum=stratum)
    dropped = []
    # too few observations: keep the leading features only
    max_feats = max(1, n // basis.min_paths_per_feature)
    if len(names) > max_feats:
        dropped += names[max_feats:]
        names, D = names[:max_feats], D[:, :max_feats]
    center = D.mean(axis=0)
    scale = D.std(axis=0)
    const = names.index("1")
    keep = []
    for j, nm in enumerate(names):
        if j == const:
            keep.append(j)
        elif scale[j] > 1e-12 * max(1.0, abs(center[j])):
            keep.append(j)
        else:
            dropped.append(nm)
    center[const], scale[const] = 0.0, 1.0
    Z = (D[:, keep] - center[keep]) / scale[keep]
    if Z.shape[1] > 1:
        _, R, piv = scipy.linalg.qr(Z, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > basis.rank_rtol * diag[0]))
        if rank < Z.shape[1]:
            good = np.sort(piv[:rank])
            if 0 not in good:
                good = np.sort(np.concatenate([[0], good[:-1]]))
            dropped += [names[keep[j]] for j in range(len(keep)) if j not in set(good)]
            keep = [keep[j] for j in good]
            Z = Z[:, good]
    if n == 0 or np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise RegressionError("rank-deficient design after reduction", knot=knot, stratum=stratum)
    sw = np.ones(n) if weights is None else np.sqrt(weights)
    Zw, Yw = Z * sw[:, None], Y * sw[:, None]
    coef, *_ = np.linalg.lstsq(Zw, Yw, rcond=None)
    G = Zw.T @ Zw
    cond = float(np.linalg.cond(G)) if Z.shape[1] > 1 else 1.0
    resid = Yw - Zw @ coef
    dof = max(n - Z.shape[1], 1)
    resid_var = np.sum(resid * resid, axis=0) / dof
    return StratumFit(tuple(names[j] for j in keep), coef, center[keep], scale[keep], n, cond,
                      tuple(dropped), np.atleast_1d(resid_var), np.linalg.pinv(G)), Z @ coef


def fit_knot(basis: RegressionBasis, state: KnotState, targets, knot: int = 0,
             mask=None, weights=None):
    """Regress one or more targets on the basis at a knot.

    ``targets`` has shape ``(n_paths,)`` or ``(n_paths, n_targets)``.  ``mask``
    restricts the fit to a subset of paths (rows outside it get fitted value 0
    and are absent from the fit).  ``weights`` (positive, per path) gives
    weighted least squares.  Returns ``(KnotFit, fitted)`` with fitted values
    of the same shape as ``targets``.
    """
    Y = np.asarray(targets, dtype=float)
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (Y.shape[0],) or not np.all(np.isfinite(weights) & (weights > 0)):
            raise RegressionError("weights must be positive and finite, one per path", knot=knot)
    squeeze = Y.ndim == 1
    Y2 = Y[:, None] if squeeze else Y
    n = Y2.shape[0]
    use = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    lab = (np.asarray(state.H) > 0).astype(int) if basis.split_on_default else np.full(n, -1)
    kf = KnotFit(basis, knot)
    fitted = np.zeros_like(Y2)
    for s in (-1, 0, 1):
        rows = (lab == s) & use
        if not rows.any():
            continue
        fit, vals = _fit_stratum(basis, _take_rows(state, rows), Y2[rows], knot, s,
                                 None if weights is None else weights[rows])
        kf.strata[s] = fit
        fitted[rows] = vals
    return kf, (fitted[:, 0] if squeeze else fitted)
