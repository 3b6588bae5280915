"""Gaussian mixtures, relative KL error, and weighted kernel density estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

MU1 = np.array([-1, -1, -0.3, -0.3, -0.4, -0.4, -1.6, -1.6, -0.8, -0.8, -0.5, -0.5, -0.5, -0.3, -1, -1], dtype=float)
MU3 = np.array([32, 32, 32.6, 32.6, 32.8, 32.8, 33.2, 33.2, 32.4, 32.4, 30.8, 30.8, 31, 31, 31.6, 31.6], dtype=float)
MIXTURE_WEIGHTS = np.array([0.3, 0.4, 0.3])


class MixtureError(ValueError):
    pass


class KdeError(ValueError):
    pass


@dataclass
class MixtureLaw:
    weights: np.ndarray
    means: np.ndarray  # (m, d)
    covs: np.ndarray  # (m, d, d)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(self.means.shape[0], self.dim, self.dim)
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise MixtureError(f"mixture weights must be positive and sum to 1, got {self.weights}")
        self.chols = []
        for k, c in enumerate(self.covs):
            if not np.allclose(c, c.T, rtol=0, atol=1e-10 * np.abs(c).max()):
                raise MixtureError(f"covariance {k} is not symmetric")
            try:
                self.chols.append(np.linalg.cholesky(c))
            except np.linalg.LinAlgError as exc:
                raise MixtureError(f"covariance {k} is not positive definite") from exc

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k, L in enumerate(self.chols):
            sel = comp == k
            out[sel] = self.means[k] + z[sel] @ L.T
        return out

    def component_logpdf(self, x: np.ndarray) -> np.ndarray:
        from scipy.linalg import solve_triangular
        x = np.atleast_2d(x)
        out = np.empty((x.shape[0], self.weights.size))
        for k, L in enumerate(self.chols):
            z = solve_triangular(L, (x - self.means[k]).T, lower=True)
            out[:, k] = (-0.5 * np.sum(z * z, axis=0) - np.log(np.diag(L)).sum()
                         - 0.5 * self.dim * math.log(2 * math.pi))
        return out

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_logpdf(x) + np.log(self.weights), axis=1)

    def marginal(self, idx) -> "MixtureLaw":
        idx = np.asarray(idx)
        return MixtureLaw(self.weights, self.means[:, idx], self.covs[:, idx][:, :, idx])


def benchmark_mixture(seed: int = 0) -> MixtureLaw:
    """16-d three-component mixture with covariances S S^T, S ~ U[0,1]^(16x16)."""
    rng = np.random.default_rng(seed)
    covs = []
    for _ in range(3):
        S = rng.uniform(0.0, 1.0, size=(16, 16))
        covs.append(S @ S.T)
    return MixtureLaw(MIXTURE_WEIGHTS, np.stack([MU1, 0.5 * (MU1 + MU3), MU3]), np.stack(covs))


def relative_kl_error(ref_logpdf: np.ndarray, est_logpdf: np.ndarray) -> float:
    """KL(ref || est) / H(ref), both as averages over samples from ref."""
    ref_logpdf = np.asarray(ref_logpdf)
    H = -float(np.mean(ref_logpdf))
    if H <= 0:
        raise MixtureError(f"entropy estimate {H:.4g} is not positive")
    return float(np.mean(ref_logpdf - np.asarray(est_logpdf))) / H


# -- kernel density ----------------------------------------------------------------


def weighted_quantile(x, w, q):
    order = np.argsort(x)
    x, w = np.asarray(x)[order], np.asarray(w)[order]
    cw = np.cumsum(w) - 0.5 * w
    return np.interp(q, cw / w.sum(), x)


@dataclass
class KdeModel:
    points: np.ndarray
    weights: np.ndarray
    bandwidth: float

    def __call__(self, query) -> np.ndarray:
        return kde_pdf(self, query)


def kde_fit(points, weights=None, bandwidth: float | None = None) -> KdeModel:
    """Gaussian KDE with Silverman's rule, using the weighted spread and n_eff."""
    x = np.asarray(points, dtype=np.float64).ravel()
    if x.size < 2:
        raise KdeError("KDE needs at least two samples")
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    if w.shape != x.shape or np.any(w < 0) or not w.sum() > 0:
        raise KdeError("weights must be nonnegative, not all zero, one per sample")
    w = w / w.sum()
    if bandwidth is None:
        mean = np.dot(w, x)
        sd = math.sqrt(max(np.dot(w, (x - mean) ** 2), 0.0))
        iqr = weighted_quantile(x, w, 0.75) - weighted_quantile(x, w, 0.25)
        spread = min(sd, iqr / 1.34) if iqr > 1e-12 * sd else sd
        if spread <= 1e-12 * (1.0 + abs(mean)):
            spread = 0.0  # rounding residue of identical samples
        n_eff = 1.0 / np.dot(w, w)
        bandwidth = 0.9 * spread * n_eff ** (-0.2)
    if not bandwidth > 0:
        raise KdeError("zero bandwidth: all samples are identical")
    return KdeModel(x, w, float(bandwidth))


def kde_pdf(model: KdeModel, query, chunk: int = 2048) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    flat = q.ravel()
    out = np.empty(flat.size)
    h = model.bandwidth
    for s in range(0, flat.size, chunk):
        z = (flat[s:s + chunk, None] - model.points[None, :]) / h
        out[s:s + chunk] = np.exp(-0.5 * z * z) @ model.weights
    return (out / (h * math.sqrt(2 * math.pi))).reshape(q.shape)


# -- conditional vs unconditional flow benchmark -------------------------------------


@dataclass
class BenchResult:
    cond_dim: int
    n_train: int
    seed: int
    delta_ckr: float
    delta_kr: float
    history: list  # (epoch, delta_ckr, delta_kr) on the per-epoch validation subset


def mixture_benchmark(cond_dim: int, n_train: int, seed: int, law: MixtureLaw | None = None,
                      n_val: int = 1_000_000, n_val_epoch: int = 100_000, epochs: int = 2,
                      batch_size: int = 1024, layers: int = 4, lr: float = 1e-3) -> BenchResult:
    """Fit the joint law by a conditional flow (with the exact marginal of c) and by a plain flow.

    The last ``cond_dim`` coordinates play the role of c.  Both models use
    ``16 - cond_dim`` stages of ``layers`` coupling layers.
    """
    from .flows import FlowModel, FlowSpec, FlowTrainConfig, train_flow

    law = law or benchmark_mixture(0)
    d = law.dim
    da = d - cond_dim
    rng = np.random.default_rng([seed, cond_dim, n_train])
    train = law.sample(n_train, rng)
    val = law.sample(n_val, np.random.default_rng([seed, 1, n_val]))
    ref = law.logpdf(val)
    marg_c = law.marginal(np.arange(da, d)).logpdf(val[:, da:])
    sub = slice(0, min(n_val_epoch, n_val))

    ckr = FlowModel(FlowSpec(dim=da, cond_dim=cond_dim, stages=da, layers_per_stage=layers, seed=seed))
    kr = FlowModel(FlowSpec(dim=d, cond_dim=0, stages=da, layers_per_stage=layers, seed=seed))

    def delta_ckr(rows):
        return relative_kl_error(ref[rows], ckr.log_prob(val[rows, :da], val[rows, da:]) + marg_c[rows])

    def delta_kr(rows):
        return relative_kl_error(ref[rows], kr.log_prob(val[rows]))

    cfg = FlowTrainConfig(batch_size=batch_size, epochs=epochs, lr=lr, seed=seed, holdout=0.0, keep_best=False)
    hist_c, hist_k = [], []
    train_flow(ckr, train[:, :da], train[:, da:], cfg, callback=lambda m, e: hist_c.append(delta_ckr(sub)))
    train_flow(kr, train, None, cfg, callback=lambda m, e: hist_k.append(delta_kr(sub)))
    history = [(e + 1, hist_c[e], hist_k[e]) for e in range(epochs)]
    return BenchResult(cond_dim, n_train, seed, delta_ckr(slice(None)), delta_kr(slice(None)), history)
