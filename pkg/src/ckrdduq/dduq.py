"""Offline sampling, surrogate-coupled online iteration, and reweighting.

Subdomain ``i`` is sampled offline from ``pi(xi_i) * p(tau_i)`` with a
Gaussian proposal ``p``.  Online, the decomposition is iterated with the
coupling surrogates to get samples of the converged ``tau_i`` given
``xi_i``; a conditional flow fitted to those pairs supplies the target
density in the importance weights ``pi(tau_i | xi_i) / p(tau_i)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .dd import Decomposition, PODBasis, build_pod, iterate, run_exact_dd
from .fem import FieldError
from .flows import FlowModel, FlowSpec, FlowTrainConfig, train_flow
from .io import SampleTable
from .randfield import EllipticityError, sample_truncated_normal
from .surrogate import CouplingSurrogate, SurrogateConfig, train_surrogate

WEIGHT_CLAMP = 1e12
MAX_DROP_FRACTION = 0.01

# seed-stream tags keep every stage's draws independent
PREP, OFFLINE, ONLINE, REFERENCE = 0, 1, 2, 3


class PipelineError(RuntimeError):
    pass


def stream(seed: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), tag, *extra])


# -- proposal -------------------------------------------------------------------


@dataclass
class GaussianProposal:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        self.chol = np.linalg.cholesky(self.cov)
        self._logdet = 2.0 * np.log(np.diag(self.chol)).sum()

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def fit(cls, samples: np.ndarray, jitter: float = 1e-10, check_sigmas: float = 6.0) -> "GaussianProposal":
        samples = np.atleast_2d(samples)
        mean = samples.mean(axis=0)
        cov = np.atleast_2d(np.cov(samples, rowvar=False)) + jitter * np.eye(samples.shape[1])
        prop = cls(mean, cov)
        z = prop.whiten(samples)
        if np.abs(z).max() > check_sigmas:
            raise PipelineError(f"snapshot lies {np.abs(z).max():.1f} std from the proposal mean")
        return prop

    def whiten(self, x: np.ndarray) -> np.ndarray:
        from scipy.linalg import solve_triangular
        return solve_triangular(self.chol, (np.atleast_2d(x) - self.mean).T, lower=True).T

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        z = self.whiten(x)
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * self._logdet - 0.5 * self.dim * math.log(2 * math.pi)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self.chol.T


# -- estimators -------------------------------------------------------------------


def _check_weights(w):
    w = np.asarray(w, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise PipelineError("weights sum to zero")
    return w, total


def weighted_moments(y, w) -> tuple[float, float]:
    """Self-normalised mean and (population) variance."""
    w, total = _check_weights(w)
    y = np.asarray(y, dtype=np.float64)
    mean = float(np.dot(w, y) / total)
    var = float(np.dot(w, (y - mean) ** 2) / total)
    return mean, var


def effective_sample_size(w) -> float:
    w, total = _check_weights(w)
    return float(total * total / np.dot(w, w))


def exceedance_probability(y, w, threshold: float) -> float:
    """Weighted fraction of samples with y <= threshold."""
    w, total = _check_weights(w)
    return float(w[np.asarray(y) <= threshold].sum() / total)


def error_metrics(mean, var, ref_mean, ref_var) -> tuple[float, float]:
    if ref_mean == 0 or ref_var == 0:
        raise PipelineError("reference mean and variance must be nonzero")
    return abs(mean - ref_mean) / abs(ref_mean), abs(var - ref_var) / abs(ref_var)


def compute_weights(log_target: np.ndarray, log_proposal: np.ndarray) -> tuple[np.ndarray, int]:
    """w = exp(log_target - log_proposal) clamped to [0, 1e12]."""
    log_target = np.asarray(log_target, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(log_target) | ~np.isfinite(log_proposal))
    if bad.size:
        raise PipelineError(f"non-finite log-density at sample {bad[0]}")
    w = np.exp(np.minimum(log_target - log_proposal, 700.0))
    clamped = int(np.sum(w > WEIGHT_CLAMP))
    return np.clip(w, 0.0, WEIGHT_CLAMP), clamped


# -- configuration ------------------------------------------------------------------


@dataclass
class FlowRunConfig:
    stages: dict = field(default_factory=dict)  # subdomain id -> R
    layers: int = 4
    gamma: float = 0.6
    width: int = 32
    bins: int = 32
    batch_size: int = 256
    epochs: int = 60
    lr: float = 1e-3
    holdout: float = 0.1
    max_updates: int = 2500  # caps epochs for large sample sizes

    def spec(self, i: int, dim: int, cond_dim: int, seed: int) -> FlowSpec:
        return FlowSpec(dim=dim, cond_dim=cond_dim, stages=min(self.stages.get(i, 2), dim),
                        layers_per_stage=self.layers, gamma=self.gamma, width=self.width,
                        bins=self.bins, seed=seed)

    def train(self, seed: int, n: int | None = None) -> FlowTrainConfig:
        epochs = self.epochs
        if n is not None and self.max_updates:
            per_epoch = max(1, math.ceil((1.0 - self.holdout) * n / self.batch_size))
            epochs = max(1, min(epochs, math.ceil(self.max_updates / per_epoch)))
        return FlowTrainConfig(batch_size=self.batch_size, epochs=epochs, lr=self.lr,
                               seed=seed, holdout=self.holdout)


# -- prep: POD bases and proposals --------------------------------------------------


@dataclass
class Prep:
    bases: dict  # interface key -> PODBasis
    proposals: dict  # subdomain id -> GaussianProposal
    snapshots: dict  # interface key -> (n_snap, n_dof) physical data
    snapshot_coeffs: dict  # subdomain id -> (n_snap, N_i)


def draw_inputs(dec: Decomposition, n: int, rng: np.random.Generator) -> dict:
    return {i: sample_truncated_normal(n, dec.n_xi(i), rng) for i in dec.ids}


def prepare(dec: Decomposition, n_snap: int = 100, seed: int = 0, center: bool = True) -> Prep:
    """POD bases from exactly coupled snapshots, and the Gaussian proposals."""
    xis = draw_inputs(dec, n_snap, stream(seed, PREP))
    res = run_exact_dd(dec, xis)
    if not res.converged.all():
        raise PipelineError(f"{np.sum(~res.converged)} snapshot iterations did not converge")
    bases = {itf.key: build_pod(res.tau[itf.key], itf.modes, center=center) for itf in dec.interfaces}
    # the online target is the fixed point in reduced coordinates, so the
    # proposal is fitted to that rather than to projected full-order data
    red = run_exact_dd(dec, xis, bases=bases)
    if not red.converged.all():
        raise PipelineError(f"{np.sum(~red.converged)} reduced snapshot iterations did not converge")
    coeffs = {i: np.concatenate([red.tau[itf.key] for itf in dec.incoming(i)], axis=1) for i in dec.ids}
    proposals = {i: GaussianProposal.fit(coeffs[i]) for i in dec.ids}
    return Prep(bases, proposals, dict(res.tau), coeffs)


def tau_layout(dec: Decomposition, bases: dict, i: int) -> list:
    """(key, start, stop) slices of the concatenated tau_i."""
    out, start = [], 0
    for itf in dec.incoming(i):
        n = bases[itf.key].size
        out.append((itf.key, start, start + n))
        start += n
    return out


# -- offline ----------------------------------------------------------------------------


def _solve_rows(args):
    dec, bases, i, xi, tau = args
    layout = tau_layout(dec, bases, i)
    outs = dec.outgoing(i)
    y = np.full(xi.shape[0], np.nan)
    h = {itf.receiver: np.full((xi.shape[0], bases[itf.key].size), np.nan) for itf in outs}
    ok = np.zeros(xi.shape[0], dtype=bool)
    for s in range(xi.shape[0]):
        try:
            a_el = dec.element_field(i, xi[s])
            data = {key[0]: bases[key].decode(tau[s, a:b]) for key, a, b in layout}
            u = dec.local_solve(i, a_el, data)
        except (EllipticityError, FieldError, np.linalg.LinAlgError):
            continue
        y[s] = dec.output(i, u)
        for j, val in dec.exports(i, u, a_el).items():
            h[j][s] = bases[(i, j)].encode(val)
        ok[s] = True
    return y, h, ok


def parallel_map(fn, tasks: list, workers: int = 1) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _chunks(n: int, workers: int) -> list:
    k = max(1, workers * 4) if workers > 1 else 1
    edges = np.linspace(0, n, k + 1).astype(int)
    return [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def run_offline(dec: Decomposition, prep: Prep, n_off: int, seed: int = 0, workers: int = 1) -> dict:
    """Local Monte Carlo per subdomain; returns {i: SampleTable}."""
    tables = {}
    for i in dec.ids:
        rng = stream(seed, OFFLINE, i)
        xi = sample_truncated_normal(n_off, dec.n_xi(i), rng)
        tau = prep.proposals[i].sample(n_off, rng)
        parts = parallel_map(_solve_rows, [(dec, prep.bases, i, xi[a:b], tau[a:b]) for a, b in _chunks(n_off, workers)],
                             workers)
        y = np.concatenate([p[0] for p in parts])
        ok = np.concatenate([p[2] for p in parts])
        dropped = int(np.sum(~ok))
        if dropped > MAX_DROP_FRACTION * n_off:
            raise PipelineError(f"subdomain {i}: {dropped} of {n_off} local solves failed")
        t = SampleTable()
        t.set_group(f"xi_{i}", xi[ok])
        t.set_group(f"tau_{i}", tau[ok])
        t[f"y_{i}"] = y[ok]
        for itf in dec.outgoing(i):
            j = itf.receiver
            t.set_group(f"h_{i}_{j}", np.concatenate([p[1][j] for p in parts])[ok])
        t.dropped = dropped
        tables[i] = t
    return tables


# -- surrogates ----------------------------------------------------------------------------


def fit_surrogates(dec: Decomposition, tables: dict, config: SurrogateConfig | None = None) -> dict:
    config = config or SurrogateConfig()
    sur = {}
    for itf in dec.interfaces:
        i, j = itf.key
        t = tables[i]
        x = np.concatenate([t.group(f"xi_{i}"), t.group(f"tau_{i}")], axis=1)
        sur[(i, j)] = train_surrogate(x, t.group(f"h_{i}_{j}"), config)
    return sur


def surrogate_oracle(dec: Decomposition, surrogates: dict, xis: dict):
    def oracle(i, idx, tau_i):
        x = np.concatenate([xis[i][idx], tau_i], axis=1)
        return {itf.receiver: surrogates[itf.key](x) for itf in dec.outgoing(i)}

    return oracle


# -- online ----------------------------------------------------------------------------------


@dataclass
class OnlineResult:
    weights: dict  # subdomain -> weights for the offline table rows
    clamped: dict
    ess: dict
    history: list
    steps: np.ndarray
    flows: dict
    flow_history: dict
    tau: dict  # subdomain -> converged concatenated tau
    xi: dict


def run_online(dec: Decomposition, prep: Prep, surrogates: dict, tables: dict, n_on: int,
               flow_cfg: FlowRunConfig, seed: int = 0, tol: float | None = None,
               max_steps: int | None = None) -> OnlineResult:
    xis = draw_inputs(dec, n_on, stream(seed, ONLINE))
    keys = [itf.key for itf in dec.interfaces]
    tau0 = {k: np.zeros((n_on, prep.bases[k].size)) for k in keys}
    receivers = {i: [itf.key for itf in dec.incoming(i)] for i in dec.ids}
    res = iterate(keys, {itf.key: itf.theta for itf in dec.interfaces}, receivers,
                  surrogate_oracle(dec, surrogates, xis), tau0,
                  dec.tol if tol is None else tol, dec.max_steps if max_steps is None else max_steps)
    failed = int(np.sum(~res.converged))
    if failed > MAX_DROP_FRACTION * n_on:
        finite = res.final_indicator[np.isfinite(res.final_indicator)]
        hist, edges = np.histogram(np.log10(np.maximum(finite, 1e-300)), bins=10)
        raise PipelineError(f"{failed} of {n_on} online iterations did not converge; "
                            f"log10 indicator histogram {hist.tolist()} over {np.round(edges, 2).tolist()}")
    ok = res.converged
    weights, clamped, ess, flows, fhist, taus = {}, {}, {}, {}, {}, {}
    for i in dec.ids:
        tau_i = np.concatenate([res.tau[k] for k in receivers[i]], axis=1)[ok]
        xi_i = xis[i][ok]
        model = FlowModel(flow_cfg.spec(i, tau_i.shape[1], xi_i.shape[1], seed + 7919 * i))
        out = train_flow(model, tau_i, xi_i, flow_cfg.train(seed + 104729 * i, tau_i.shape[0]))
        t = tables[i]
        lt = model.log_prob(t.group(f"tau_{i}"), t.group(f"xi_{i}"))
        lp = prep.proposals[i].logpdf(t.group(f"tau_{i}"))
        w, c = compute_weights(lt, lp)
        weights[i], clamped[i], ess[i] = w, c, effective_sample_size(w)
        flows[i], fhist[i], taus[i] = model, out.history, tau_i
    return OnlineResult(weights, clamped, ess, res.history, res.steps, flows, fhist, taus,
                        {i: xis[i][ok] for i in dec.ids})


# -- reference ---------------------------------------------------------------------------------


def _global_rows(args):
    dec, xis = args
    n = next(iter(xis.values())).shape[0]
    out = np.full((n, len(dec.ids)), np.nan)
    for s in range(n):
        try:
            u = dec.global_solve({i: xis[i][s] for i in dec.ids})
        except (EllipticityError, FieldError, np.linalg.LinAlgError):
            continue
        g = dec.global_outputs(u)
        out[s] = [g[i] for i in dec.ids]
    return out


def reference_monte_carlo(dec: Decomposition, n_ref: int, seed: int = 0, workers: int = 1) -> dict:
    """Plain Monte Carlo with global solves; returns outputs and moments."""
    xis = draw_inputs(dec, n_ref, stream(seed, REFERENCE))
    parts = parallel_map(_global_rows, [(dec, {i: x[a:b] for i, x in xis.items()}) for a, b in _chunks(n_ref, workers)],
                         workers)
    y = np.concatenate(parts)
    ok = np.all(np.isfinite(y), axis=1)
    if np.sum(~ok) > MAX_DROP_FRACTION * n_ref:
        raise PipelineError(f"{np.sum(~ok)} of {n_ref} global solves failed")
    y = y[ok]
    return {"outputs": {i: y[:, k] for k, i in enumerate(dec.ids)},
            "mean": {i: float(y[:, k].mean()) for k, i in enumerate(dec.ids)},
            "var": {i: float(y[:, k].var()) for k, i in enumerate(dec.ids)},
            "n": int(ok.sum())}


# -- synthetic linear-Gaussian system -----------------------------------------------------


class LinearGaussianSystem:
    """Two coupled subdomains with affine couplings and Gaussian inputs.

    h_12 = A1 xi_1 + B1 tau_1 + b1 (sent to 2), h_21 = A2 xi_2 + B2 tau_2 + b2
    (sent to 1), and local outputs y_i = c_i . xi_i + d_i . tau_i.  The
    converged tau_1 given xi_1 is Gaussian in closed form, and so is y_1.
    """

    def __init__(self, dim_xi: int = 2, dim_tau: int = 2, seed: int = 0, coupling: float = 0.4):
        rng = np.random.default_rng(seed)
        self.dx, self.dt = dim_xi, dim_tau
        self.A1 = rng.normal(size=(dim_tau, dim_xi))
        self.A2 = rng.normal(size=(dim_tau, dim_xi))
        self.B1 = coupling * _orthogonal(rng, dim_tau)
        self.B2 = coupling * _orthogonal(rng, dim_tau)
        self.b1 = rng.normal(size=dim_tau)
        self.b2 = rng.normal(size=dim_tau) + 1.0
        self.c1 = rng.normal(size=dim_xi)
        self.d1 = rng.normal(size=dim_tau)
        # tau_1 = h_21(xi_2, tau_2), tau_2 = h_12(xi_1, tau_1)
        M = np.eye(dim_tau) - self.B2 @ self.B1
        self.Minv = np.linalg.inv(M)

    def sample_xi(self, n: int, rng) -> np.ndarray:
        return rng.standard_normal((n, self.dx))

    def tau1_fixed_point(self, xi1, xi2) -> np.ndarray:
        rhs = xi2 @ self.A2.T + self.b2 + (xi1 @ self.A1.T + self.b1) @ self.B2.T
        return rhs @ self.Minv.T

    def oracle(self, xis: dict):
        def f(i, idx, tau_i):
            if i == 1:
                return {2: xis[1][idx] @ self.A1.T + tau_i @ self.B1.T + self.b1}
            return {1: xis[2][idx] @ self.A2.T + tau_i @ self.B2.T + self.b2}
        return f

    def conditional(self, xi1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean rows and shared covariance of tau_1 given xi_1."""
        mean = ((xi1 @ self.A1.T + self.b1) @ self.B2.T + self.b2) @ self.Minv.T
        cov = self.Minv @ self.A2 @ self.A2.T @ self.Minv.T
        return mean, cov

    def conditional_logpdf(self, tau1, xi1) -> np.ndarray:
        mean, cov = self.conditional(xi1)
        return GaussianProposal(np.zeros(self.dt), cov).logpdf(tau1 - mean)

    def marginal(self) -> tuple[np.ndarray, np.ndarray]:
        mean0, cov = self.conditional(np.zeros((1, self.dx)))
        G = self.Minv @ self.B2 @ self.A1
        return mean0[0], cov + G @ G.T

    def output(self, xi1, tau1) -> np.ndarray:
        return xi1 @ self.c1 + tau1 @ self.d1

    def output_law(self) -> tuple[float, float]:
        """Exact mean and variance of y_1 = c.xi_1 + d.tau_1."""
        mean0, cov = self.conditional(np.zeros((1, self.dx)))
        G = self.Minv @ self.B2 @ self.A1  # d tau_1 / d xi_1
        a = self.c1 + G.T @ self.d1
        return float(mean0[0] @ self.d1), float(a @ a + self.d1 @ cov @ self.d1)

    def output_cdf(self, t) -> np.ndarray:
        m, v = self.output_law()
        return ndtr((np.asarray(t) - m) / np.sqrt(v))

    def proposal(self, inflate: float = 2.0) -> GaussianProposal:
        mean, cov = self.marginal()
        return GaussianProposal(mean, inflate * cov)

    def offline(self, n: int, rng, proposal: GaussianProposal | None = None):
        proposal = proposal or self.proposal()
        xi1 = self.sample_xi(n, rng)
        tau1 = proposal.sample(n, rng)
        return xi1, tau1, self.output(xi1, tau1), proposal

    def exact_weights(self, xi1, tau1, proposal: GaussianProposal) -> np.ndarray:
        return compute_weights(self.conditional_logpdf(tau1, xi1), proposal.logpdf(tau1))[0]

    def online_pairs(self, n: int, rng, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
        """Converged (xi_1, tau_1) pairs from the relaxation iteration."""
        xis = {1: self.sample_xi(n, rng), 2: self.sample_xi(n, rng)}
        keys = [(2, 1), (1, 2)]
        res = iterate(keys, {k: 0.0 for k in keys}, {1: [(2, 1)], 2: [(1, 2)]}, self.oracle(xis),
                      {k: np.zeros((n, self.dt)) for k in keys}, tol, 500)
        return xis[1], res.tau[(2, 1)]


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))
