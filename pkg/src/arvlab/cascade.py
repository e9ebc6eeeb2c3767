"""Numerical verification of the error-accumulation theory on controlled
dynamical systems with known Lipschitz constants.

Three experiments: context-limited conditioning accumulates more rollout
error than full-history conditioning; per-step error growth obeys the
L-bound; terminal error is monotone in the transition map's constant.
Predictors are closed-form least-squares fits so the information argument
is isolated from optimization noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from . import kernels
from .seeding import rng_for


@dataclass
class LinearSystem:
    A: np.ndarray
    noise: float = 0.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        if not np.all(np.isfinite(self.A)):
            raise ValueError("non-finite transition matrix")
        if self.noise < 0:
            raise ValueError("noise scale must be >= 0")

    @property
    def lipschitz(self) -> float:
        return spectral_norm(self.A)


@dataclass
class ErrorTrace:
    error_norms: np.ndarray  # ||eps_t||, length steps+1
    delta_norms: np.ndarray  # ||delta_t||, length steps


def spectral_norm(A: np.ndarray, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    """Largest singular value by power iteration on A^T A."""
    A = np.asarray(A, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise ValueError("non-finite matrix")
    if A.size == 0:
        return 0.0
    G = A.T @ A
    v = np.ones(A.shape[1]) / np.sqrt(A.shape[1])
    lam = 0.0
    for _ in range(max_iter):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v_new = w / nw
        lam_new = float(v_new @ (G @ v_new))
        if abs(lam_new - lam) <= tol * max(lam_new, 1e-30):
            lam = lam_new
            break
        v, lam = v_new, lam_new
    return float(np.sqrt(max(lam, 0.0)))


def simulate_error(
    system: LinearSystem,
    steps: int,
    deltas: np.ndarray,
    seed: int = 0,
    eps0: np.ndarray | None = None,
) -> ErrorTrace:
    """Joint rollout of a true and a perturbed trajectory; records ||eps_t||.

    `deltas` is a (steps, d) schedule of injected per-step perturbations.
    Non-finite blow-up is reported, never clipped.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    d = system.A.shape[0]
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape != (steps, d):
        raise ValueError(f"delta schedule must have shape ({steps}, {d})")
    if eps0 is None:
        rng = np.random.default_rng(seed)
        eps0 = rng.normal(size=d)
        eps0 /= np.linalg.norm(eps0)
    norms = kernels.error_rollout(system.A, np.asarray(eps0, dtype=np.float64), deltas)
    if not np.all(np.isfinite(norms)):
        raise FloatingPointError("error trajectory diverged to non-finite values")
    return ErrorTrace(error_norms=norms, delta_norms=np.linalg.norm(deltas, axis=1))


def check_bound(trace: ErrorTrace, L: float, tol: float = 1e-10) -> list[int]:
    """Steps violating ||eps_{t+1}|| <= L ||eps_t|| + ||delta_t||; empty for linear systems."""
    bad = []
    for t in range(len(trace.delta_norms)):
        if trace.error_norms[t + 1] > L * trace.error_norms[t] + trace.delta_norms[t] + tol:
            bad.append(t)
    return bad


def simulate_tanh_error(W: np.ndarray, steps: int, deltas: np.ndarray, seed: int = 0) -> ErrorTrace:
    """Error trace for h -> tanh(W h); spectral_norm(W) is a certified global L."""
    W = np.asarray(W, dtype=np.float64)
    d = W.shape[0]
    rng = np.random.default_rng(seed)
    h = rng.normal(size=d)
    hp = h + rng.normal(size=d) * 0.1
    norms = [np.linalg.norm(hp - h)]
    for t in range(steps):
        h = np.tanh(W @ h)
        hp = np.tanh(W @ hp) + deltas[t]
        norms.append(np.linalg.norm(hp - h))
    return ErrorTrace(error_norms=np.array(norms), delta_norms=np.linalg.norm(deltas, axis=1))


# -- conditioning comparison (context-information experiment) ----------------


@dataclass
class RegimeSystem:
    """Block-level system whose dynamics regime is revealed in block 1 only.

    The regime selects a drift vector added at every transition, so the
    optimal predictor is linear in (first block, previous block); a
    previous-block-only predictor has to guess the drift. The memoryless
    variant makes transitions regime-independent, so the extra context
    carries no usable information and the predictors tie.
    """

    dim: int = 6
    n_regimes: int = 4
    rho: float = 0.95
    angle: float = 0.5
    noise: float = 0.05
    drift_scale: float = 0.3
    regime_observability: str = "first_block"  # or "memoryless"
    structure_seed: int = 0
    stamps: np.ndarray = field(init=False)
    drifts: np.ndarray = field(init=False)
    rotation: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.regime_observability not in ("first_block", "memoryless"):
            raise ValueError("unknown observability mode")
        rng = rng_for(self.structure_seed, "regime-system")
        stamps = rng.normal(size=(self.n_regimes, self.dim))
        stamps /= np.linalg.norm(stamps, axis=1, keepdims=True)
        self.stamps = stamps * 1.5
        drifts = rng.normal(size=(self.n_regimes, self.dim))
        self.drifts = drifts / np.linalg.norm(drifts, axis=1, keepdims=True)
        w = rng.normal(size=(self.dim, self.dim))
        w = w - w.T
        w /= np.linalg.norm(w, 2)
        self.rotation = self.rho * expm(self.angle * w)

    def sample_trajectory(self, horizon: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        """Blocks T_1..T_K; block 1 carries the regime stamp, later transitions
        apply the shared rotation plus the regime's drift."""
        regime = int(rng.integers(self.n_regimes))
        blocks = np.empty((horizon, self.dim))
        blocks[0] = self.stamps[regime] + rng.normal(size=self.dim) * 0.05
        if horizon > 1:
            blocks[1] = rng.normal(size=self.dim) * 0.5
        drift = self.drift_scale * self.drifts[regime]
        if self.regime_observability == "memoryless":
            drift = np.zeros(self.dim)
        for k in range(2, horizon):
            blocks[k] = self.rotation @ blocks[k - 1] + drift + rng.normal(size=self.dim) * self.noise
        return blocks, regime


def _ridge_fit(X: np.ndarray, Y: np.ndarray, lam: float = 1e-6) -> np.ndarray:
    """W minimizing ||XW - Y||^2 + lam||W||^2; X already carries a bias column."""
    d = X.shape[1]
    return np.linalg.solve(X.T @ X + lam * np.eye(d), X.T @ Y)


def _with_bias(X: np.ndarray) -> np.ndarray:
    return np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)


@dataclass
class ConditioningSummary:
    mean_error_full: float
    mean_error_local: float
    ratio: float  # local / full
    ratio_ci: tuple[float, float]  # bootstrap 95% CI
    trials: int


def compare_conditioning(system: RegimeSystem, horizon: int, trials: int, seed: int = 0) -> ConditioningSummary:
    """Optimal least-squares one-block predictors, full-history vs previous
    block only, rolled out autoregressively from the true first block."""
    if trials < 100:
        raise ValueError("need at least 100 trials")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = rng_for(seed, "compare-conditioning")
    n_train = trials
    train = np.stack([system.sample_trajectory(horizon, rng)[0] for _ in range(n_train)])
    evals = np.stack([system.sample_trajectory(horizon, rng)[0] for _ in range(trials)])
    d = system.dim

    if horizon == 1:
        # single block, nothing to predict: both predictors coincide
        return ConditioningSummary(0.0, 0.0, 1.0, (1.0, 1.0), trials)

    # per-step maps: local sees only the previous block, full sees the
    # concatenated history; at step 1 the feature sets coincide
    W_loc = []
    W_full = []
    for k in range(1, horizon):
        W_loc.append(_ridge_fit(_with_bias(train[:, k - 1]), train[:, k]))
        X = _with_bias(train[:, :k].reshape(n_train, -1))
        W_full.append(_ridge_fit(X, train[:, k]))

    err_full = np.zeros(trials)
    err_loc = np.zeros(trials)
    for i in range(trials):
        truth = evals[i]
        # local rollout: feeds only its previous (predicted) block
        prev = truth[0]
        hist = [truth[0]]
        for k in range(1, horizon):
            pred_loc = _with_bias(prev[None, :]) @ W_loc[k - 1]
            err_loc[i] += np.linalg.norm(truth[k] - pred_loc[0])
            prev = pred_loc[0]
            # full rollout: keeps the true first block in its history
            feats = _with_bias(np.concatenate(hist)[None, :])
            pred_full = feats @ W_full[k - 1]
            err_full[i] += np.linalg.norm(truth[k] - pred_full[0])
            hist.append(pred_full[0])

    mean_full = float(err_full.mean())
    mean_loc = float(err_loc.mean())
    ratio = mean_loc / mean_full if mean_full > 0 else float("inf")

    boot_rng = rng_for(seed, "compare-conditioning-bootstrap")
    ratios = []
    for _ in range(1000):
        pick = boot_rng.integers(0, trials, size=trials)
        denom = err_full[pick].mean()
        ratios.append(err_loc[pick].mean() / denom if denom > 0 else np.inf)
    lo, hi = np.percentile(ratios, [2.5, 97.5])
    return ConditioningSummary(mean_full, mean_loc, ratio, (float(lo), float(hi)), trials)


# -- continuity-constant sweep -----------------------------------------------


@dataclass
class LipschitzSweepRow:
    L: float
    mean_terminal_error: float


def reco_effect(
    L_grid: list[float],
    horizon: int,
    trials: int,
    delta_scale: float = 0.01,
    dim: int = 8,
    seed: int = 0,
) -> list[LipschitzSweepRow]:
    """Mean terminal error ||eps_K|| as a function of the transition constant L.

    The family is L times a fixed orthogonal map, so the constant is exact.
    """
    if len(L_grid) < 3:
        raise ValueError("need an L grid of at least 3 values")
    rng = rng_for(seed, "reco-effect-structure")
    w = rng.normal(size=(dim, dim))
    w = w - w.T
    Q = expm(w / np.linalg.norm(w, 2))
    rows = []
    for L in L_grid:
        A = L * Q
        terminal = np.empty(trials)
        for i in range(trials):
            trial_rng = rng_for(seed, "reco-effect-trial", i)
            deltas = trial_rng.normal(size=(horizon, dim))
            deltas *= delta_scale / np.linalg.norm(deltas, axis=1, keepdims=True)
            eps0 = np.zeros(dim)
            norms = kernels.error_rollout(A, eps0, deltas)
            terminal[i] = norms[-1]
        rows.append(LipschitzSweepRow(L=float(L), mean_terminal_error=float(terminal.mean())))
    return rows
