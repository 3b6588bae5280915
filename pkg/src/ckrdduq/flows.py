"""Conditional KRnet: a block-triangular normalizing flow for p(alpha | c).

The coordinates of ``alpha`` are split into ``R`` blocks in natural order.
Stage ``r`` transforms the trailing active block, conditioned on the leading
active blocks and on ``c``, then freezes it (the squeeze).  The last block is
transformed conditioned on ``c`` alone and finished with an elementwise
monotone layer.  The resulting map is Knothe-Rosenblatt: output block ``k``
depends only on input blocks ``1..k`` and on ``c``.

With ``cond_dim == 0`` the same construction is the unconditional KRnet.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import MLP, Adam, Graph, Node, Parameter, restore, snapshot

LOG_2PI = math.log(2.0 * math.pi)


class FlowConfigError(ValueError):
    pass


class FlowNumericalError(FloatingPointError):
    pass


class FlowTrainingError(RuntimeError):
    pass


def _softplus(x):
    return np.logaddexp(0.0, x)


# -- layers -------------------------------------------------------------------


class CouplingLayer:
    """Conditional affine coupling on the column range ``[u0, u1)``.

    The updated columns are scaled by ``1 + gamma*tanh(s)`` and shifted by
    ``exp(beta)*tanh(t)``, where ``s`` and ``t`` are the two heads of one
    conditioner network fed with the ``cond_ranges`` columns and ``c``.
    """

    kind = "coupling"

    def __init__(self, update: tuple[int, int], cond_ranges: list[tuple[int, int]],
                 cond_dim: int, gamma: float, width: int, rng: np.random.Generator, name: str):
        if not 0.0 < gamma < 1.0:
            raise FlowConfigError(f"gamma must lie in (0, 1), got {gamma}")
        self.u0, self.u1 = update
        self.cond_ranges = [r for r in cond_ranges if r[1] > r[0]]
        self.cond_dim = cond_dim
        self.gamma = gamma
        k = self.u1 - self.u0
        n_in = sum(b - a for a, b in self.cond_ranges) + cond_dim
        self.net = MLP([n_in, width, width, 2 * k], rng, activation="relu", zero_last=True, name=f"{name}.net")
        self.beta = Parameter(np.zeros(k), name=f"{name}.beta", kind="coupling_beta")

    def parameters(self) -> list[Parameter]:
        return self.net.parameters() + [self.beta]

    def _conditioner(self, g: Graph, x: Node, c: Node | None) -> tuple[Node, Node]:
        parts = [g.slice(x, a, b) for a, b in self.cond_ranges]
        if self.cond_dim:
            parts.append(c)
        if not parts:
            inp = g.input(np.zeros((x.shape[0], 0)))
        elif len(parts) == 1:
            inp = parts[0]
        else:
            inp = g.concat(parts)
        out = self.net(g, inp)
        k = self.u1 - self.u0
        return g.slice(out, 0, k), g.slice(out, k, 2 * k)

    def forward(self, g: Graph, x: Node, c: Node | None) -> tuple[Node, Node]:
        s, t = self._conditioner(g, x, c)
        scale = 1.0 + self.gamma * g.tanh(s)
        shift = g.mul(g.exp(self.beta), g.tanh(t))
        xu = g.slice(x, self.u0, self.u1)
        yu = xu * scale + shift
        d = x.shape[1]
        pieces = []
        if self.u0 > 0:
            pieces.append(g.slice(x, 0, self.u0))
        pieces.append(yu)
        if self.u1 < d:
            pieces.append(g.slice(x, self.u1, d))
        y = g.concat(pieces) if len(pieces) > 1 else yu
        return y, g.sum(g.log(scale), axis=1)

    def inverse(self, y: np.ndarray, c: np.ndarray | None) -> np.ndarray:
        g = Graph(record=False)
        s, t = self._conditioner(g, g.input(y), None if c is None else g.input(c))
        scale = 1.0 + self.gamma * np.tanh(s.value)
        shift = np.exp(self.beta.value) * np.tanh(t.value)
        x = y.copy()
        x[:, self.u0:self.u1] = (y[:, self.u0:self.u1] - shift) / scale
        return x

    def scale_factors(self, x: np.ndarray, c: np.ndarray | None) -> np.ndarray:
        """Diagonal of the Jacobian block for the updated columns."""
        g = Graph(record=False)
        s, _ = self._conditioner(g, g.input(x), None if c is None else g.input(c))
        return 1.0 + self.gamma * np.tanh(s.value)


class ScaleBias:
    """y = exp(s) * x + b on columns ``[a, b)``."""

    kind = "scale_bias"

    def __init__(self, cols: tuple[int, int], name: str):
        self.a, self.b = cols
        k = self.b - self.a
        self.log_scale = Parameter(np.zeros(k), name=f"{name}.log_scale", kind="scale_bias_log_scale")
        self.shift = Parameter(np.zeros(k), name=f"{name}.shift", kind="scale_bias_shift")

    def parameters(self) -> list[Parameter]:
        return [self.log_scale, self.shift]

    def forward(self, g: Graph, x: Node, c=None) -> tuple[Node, Node]:
        d = x.shape[1]
        yu = g.slice(x, self.a, self.b) * g.exp(self.log_scale) + self.shift
        pieces = ([g.slice(x, 0, self.a)] if self.a > 0 else []) + [yu]
        if self.b < d:
            pieces.append(g.slice(x, self.b, d))
        y = g.concat(pieces) if len(pieces) > 1 else yu
        return y, g.sum(self.log_scale)

    def inverse(self, y: np.ndarray, c=None) -> np.ndarray:
        x = y.copy()
        x[:, self.a:self.b] = (y[:, self.a:self.b] - self.shift.value) * np.exp(-self.log_scale.value)
        return x


class Squeeze:
    """Marks columns ``[a, b)`` as frozen; identity with zero log-Jacobian."""

    kind = "squeeze"

    def __init__(self, cols: tuple[int, int]):
        self.a, self.b = cols

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, g: Graph, x: Node, c=None) -> tuple[Node, Node]:
        return x, g.input(np.zeros(x.shape[0]))

    def inverse(self, y: np.ndarray, c=None) -> np.ndarray:
        return y


def _plcdf_parts(x: np.ndarray, logits: np.ndarray):
    """Shared forward work for the piecewise-linear CDF bijection.

    x is squashed to (0, 1) with a sigmoid, pushed through a monotone
    piecewise-linear CDF with ``K`` equal-width bins and heights
    ``softmax(logits)``, and mapped back to the real line with a logit.
    Both F and 1-F are tracked separately so the tails stay accurate.
    """
    K = logits.shape[1]
    h = np.exp(logits - logits.max(axis=1, keepdims=True))
    h /= h.sum(axis=1, keepdims=True)
    cum = np.concatenate([np.zeros((h.shape[0], 1)), np.cumsum(h, axis=1)], axis=1)
    tail = np.concatenate([np.cumsum(h[:, ::-1], axis=1)[:, ::-1][:, 1:], np.zeros((h.shape[0], 1))], axis=1)
    log_u = -_softplus(-x)
    log_v = -_softplus(x)
    u = np.exp(log_u)
    v = np.exp(log_v)
    b = np.clip(np.floor(u * K), 0, K - 1).astype(np.intp)
    cols = np.arange(x.shape[1])[None, :]
    hb = h[cols, b]
    frac = u * K - b
    frac_c = v * K - (K - 1 - b)
    F = cum[cols, b] + hb * frac
    G = tail[cols, b] + hb * frac_c
    return dict(K=K, h=h, b=b, hb=hb, frac=frac, frac_c=frac_c, F=F, G=G,
                u=u, v=v, log_u=log_u, log_v=log_v)


def _plcdf_logit_grad(P, coef_F, coef_G, coef_b):
    """Gradient w.r.t. the bin logits given dL/dF, dL/dG (free) and dL/dh_b."""
    K, b, h = P["K"], P["b"], P["h"]
    ar = np.arange(K)[None, None, :]
    bb = b[:, :, None]
    dF = (ar < bb) + (ar == bb) * P["frac"][:, :, None]
    dG = (ar > bb) + (ar == bb) * P["frac_c"][:, :, None]
    gh = coef_F[:, :, None] * dF + coef_G[:, :, None] * dG + (ar == bb) * coef_b[:, :, None]
    gh = gh.sum(axis=0)
    return h * (gh - (gh * h).sum(axis=1, keepdims=True))


class NonlinearCDF:
    """Elementwise monotone bijection of R: logit o PL-CDF o sigmoid."""

    kind = "nonlinear_cdf"

    def __init__(self, cols: tuple[int, int], bins: int, name: str):
        self.a, self.b = cols
        self.bins = bins
        self.logits = Parameter(np.zeros((self.b - self.a, bins)), name=f"{name}.logits", kind="cdf_logits")

    def parameters(self) -> list[Parameter]:
        return [self.logits]

    def forward(self, g: Graph, x: Node, c=None) -> tuple[Node, Node]:
        d = x.shape[1]
        xs = g.slice(x, self.a, self.b)
        lp = g.param(self.logits)
        P = _plcdf_parts(xs.value, self.logits.value)
        F, G, hb, u, v = P["F"], P["G"], P["hb"], P["u"], P["v"]
        y = np.log(F) - np.log(G)
        ld = np.log(hb * P["K"]) + P["log_u"] + P["log_v"] - np.log(F) - np.log(G)
        dFdx = hb * P["K"] * u * v

        def back_y(gy):
            gx = gy * dFdx * (1.0 / F + 1.0 / G)
            glog = _plcdf_logit_grad(P, gy / F, -gy / G, np.zeros_like(gy))
            return gx, glog

        def back_ld(gl):
            gx = gl * ((v - u) - dFdx * (1.0 / F - 1.0 / G))
            glog = _plcdf_logit_grad(P, -gl / F, -gl / G, gl / hb)
            return gx, glog

        yn = g.custom("plcdf", (xs, lp), y, back_y)
        ldn = g.custom("plcdf_logdet", (xs, lp), ld, back_ld)
        pieces = ([g.slice(x, 0, self.a)] if self.a > 0 else []) + [yn]
        if self.b < d:
            pieces.append(g.slice(x, self.b, d))
        out = g.concat(pieces) if len(pieces) > 1 else yn
        return out, g.sum(ldn, axis=1)

    def inverse(self, y: np.ndarray, c=None) -> np.ndarray:
        ys = y[:, self.a:self.b]
        logits = self.logits.value
        K = self.bins
        h = np.exp(logits - logits.max(axis=1, keepdims=True))
        h /= h.sum(axis=1, keepdims=True)
        cum = np.concatenate([np.zeros((h.shape[0], 1)), np.cumsum(h, axis=1)], axis=1)
        tail = np.concatenate([np.cumsum(h[:, ::-1], axis=1)[:, ::-1][:, 1:], np.zeros((h.shape[0], 1))], axis=1)
        F = np.exp(-_softplus(-ys))
        G = np.exp(-_softplus(ys))
        b = np.empty(ys.shape, dtype=np.intp)
        for j in range(ys.shape[1]):
            b[:, j] = np.searchsorted(cum[j, 1:], F[:, j], side="right")
        b = np.clip(b, 0, K - 1)
        cols = np.arange(ys.shape[1])[None, :]
        hb = h[cols, b]
        u = (b + (F - cum[cols, b]) / hb) / K
        v = ((K - 1 - b) + (G - tail[cols, b]) / hb) / K
        x = y.copy()
        x[:, self.a:self.b] = np.log(u) - np.log(v)
        return x


# -- model ----------------------------------------------------------------------


@dataclass
class FlowSpec:
    dim: int
    cond_dim: int = 0
    stages: int = 2  # R, counting the terminal mapping
    layers_per_stage: int = 4  # L
    gamma: float = 0.6
    width: int = 32
    bins: int = 32
    seed: int = 0


def block_partition(dim: int, stages: int) -> list[tuple[int, int]]:
    """Blocks in natural order; stage r splits off ceil(dim/R) trailing columns."""
    if dim < 1:
        raise FlowConfigError("flow dimension must be positive")
    if stages < 1:
        raise FlowConfigError("need at least one stage")
    m = math.ceil(dim / stages)
    blocks = []
    active = dim
    for _ in range(stages - 1):
        size = min(m, active - 1)
        if size <= 0:
            break
        blocks.append((active - size, active))
        active -= size
    blocks.append((0, active))
    return blocks[::-1]


class FlowModel:
    """KR-structured flow with frozen input standardization."""

    def __init__(self, spec: FlowSpec):
        self.spec = spec
        if not 0.0 < spec.gamma < 1.0:
            raise FlowConfigError(f"gamma must lie in (0, 1), got {spec.gamma}")
        rng = np.random.default_rng(spec.seed)
        self.blocks = block_partition(spec.dim, spec.stages)
        self.layers: list = []
        for r, (b0, b1) in enumerate(reversed(self.blocks)):
            for l in range(spec.layers_per_stage):
                name = f"stage{r}.layer{l}"
                if b1 - b0 >= 2:
                    mid = b0 + (b1 - b0) // 2
                    if l % 2 == 0:
                        update, cond = (mid, b1), [(0, mid)]
                    else:
                        update, cond = (b0, mid), [(0, b0), (mid, b1)]
                else:
                    update, cond = (b0, b1), [(0, b0)]
                self.layers.append(CouplingLayer(update, cond, spec.cond_dim, spec.gamma, spec.width, rng, name))
                self.layers.append(ScaleBias((b0, b1), f"{name}.scale_bias"))
            if b0 > 0:
                self.layers.append(Squeeze((b0, b1)))
            else:
                self.layers.append(NonlinearCDF((b0, b1), spec.bins, f"stage{r}.nonlinear"))
        self.alpha_shift = np.zeros(spec.dim)
        self.alpha_scale = np.ones(spec.dim)
        self.c_shift = np.zeros(spec.cond_dim)
        self.c_scale = np.ones(spec.cond_dim)
        self.standardized = False

    @property
    def conditional(self) -> bool:
        return self.spec.cond_dim > 0

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def fit_standardization(self, alpha: np.ndarray, c: np.ndarray | None = None) -> None:
        alpha = np.asarray(alpha, dtype=np.float64)
        self.alpha_shift = alpha.mean(axis=0)
        self.alpha_scale = _safe_std(alpha)
        if self.conditional:
            c = np.asarray(c, dtype=np.float64)
            self.c_shift = c.mean(axis=0)
            self.c_scale = _safe_std(c)
        self.standardized = True

    def manifest(self) -> dict:
        return {
            "dim": self.spec.dim, "cond_dim": self.spec.cond_dim, "R": self.spec.stages,
            "L": self.spec.layers_per_stage, "gamma": self.spec.gamma, "width": self.spec.width,
            "bins": self.spec.bins, "seed": self.spec.seed,
            "partition": [b - a for a, b in self.blocks], "conditional": self.conditional,
            "alpha_shift": self.alpha_shift.tolist(), "alpha_scale": self.alpha_scale.tolist(),
            "c_shift": self.c_shift.tolist(), "c_scale": self.c_scale.tolist(),
            "standardized": self.standardized,
        }

    @classmethod
    def from_manifest(cls, meta: dict) -> "FlowModel":
        spec = FlowSpec(dim=meta["dim"], cond_dim=meta["cond_dim"], stages=meta["R"],
                        layers_per_stage=meta["L"], gamma=meta["gamma"], width=meta["width"],
                        bins=meta["bins"], seed=meta["seed"])
        model = cls(spec)
        model.alpha_shift = np.array(meta["alpha_shift"], dtype=np.float64)
        model.alpha_scale = np.array(meta["alpha_scale"], dtype=np.float64)
        model.c_shift = np.array(meta["c_shift"], dtype=np.float64).reshape(spec.cond_dim)
        model.c_scale = np.array(meta["c_scale"], dtype=np.float64).reshape(spec.cond_dim)
        model.standardized = meta["standardized"]
        return model

    # -- evaluation ---------------------------------------------------------
    def _prepare(self, alpha, c):
        alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
        if alpha.shape[1] != self.spec.dim:
            raise FlowConfigError(f"expected alpha of dimension {self.spec.dim}, got {alpha.shape[1]}")
        x = (alpha - self.alpha_shift) / self.alpha_scale
        cs = None
        if self.conditional:
            c = np.asarray(c, dtype=np.float64)
            if c.ndim == 1:
                c = np.broadcast_to(c, (alpha.shape[0], c.shape[0]))
            if c.shape != (alpha.shape[0], self.spec.cond_dim):
                raise FlowConfigError(f"expected conditioner of shape {(alpha.shape[0], self.spec.cond_dim)}, got {c.shape}")
            cs = (c - self.c_shift) / self.c_scale
        return x, cs

    def forward(self, g: Graph, alpha, c=None) -> tuple[Node, Node]:
        """z = f(alpha, c) and the total log|det J| (including standardization)."""
        x, cs = self._prepare(alpha, c)
        xn = g.input(x)
        cn = g.input(cs) if cs is not None else None
        logdet = g.input(np.full(x.shape[0], -np.log(self.alpha_scale).sum()))
        for i, layer in enumerate(self.layers):
            xn, ld = layer.forward(g, xn, cn)
            if not (np.all(np.isfinite(xn.value)) and np.all(np.isfinite(ld.value))):
                raise FlowNumericalError(f"non-finite output in flow layer {i} ({layer.kind})")
            logdet = logdet + ld
        return xn, logdet

    def log_prob_node(self, g: Graph, alpha, c=None) -> Node:
        z, logdet = self.forward(g, alpha, c)
        d = self.spec.dim
        return logdet - 0.5 * g.sum(g.square(z), axis=1) - 0.5 * d * LOG_2PI

    def forward_logdet(self, alpha, c=None, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
        alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
        zs, lds = [], []
        for s in range(0, alpha.shape[0], chunk):
            g = Graph(record=False)
            cc = None if c is None or np.ndim(c) == 1 else c[s:s + chunk]
            if c is not None and np.ndim(c) == 1:
                cc = c
            z, ld = self.forward(g, alpha[s:s + chunk], cc)
            zs.append(z.value)
            lds.append(ld.value)
        return np.concatenate(zs), np.concatenate(lds)

    def log_prob(self, alpha, c=None, chunk: int = 8192) -> np.ndarray:
        z, ld = self.forward_logdet(alpha, c, chunk)
        return ld - 0.5 * np.sum(z * z, axis=1) - 0.5 * self.spec.dim * LOG_2PI

    def inverse(self, z, c=None) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        cs = None
        if self.conditional:
            c = np.asarray(c, dtype=np.float64)
            if c.ndim == 1:
                c = np.broadcast_to(c, (z.shape[0], c.shape[0]))
            cs = (c - self.c_shift) / self.c_scale
        x = z.copy()
        for layer in reversed(self.layers):
            x = layer.inverse(x, cs)
        return x * self.alpha_scale + self.alpha_shift

    def sample(self, c=None, n: int = 1, seed=None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, self.spec.dim))
        return self.inverse(z, c)


def _safe_std(x: np.ndarray) -> np.ndarray:
    std = x.std(axis=0)
    mean = np.abs(x.mean(axis=0))
    return np.where(std > 1e-12 * (1.0 + mean), std, 1.0)


# -- training -------------------------------------------------------------------


@dataclass
class FlowTrainConfig:
    batch_size: int = 256  # N_b
    epochs: int = 50  # N_e
    lr: float = 1e-3  # eta
    seed: int = 0
    holdout: float = 0.1
    keep_best: bool = True


@dataclass
class FlowTrainResult:
    model: FlowModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def nll(model: FlowModel, alpha, c=None) -> float:
    return float(-np.mean(model.log_prob(alpha, c)))


def train_flow(model: FlowModel, alpha, c=None, config: FlowTrainConfig | None = None,
               callback=None) -> FlowTrainResult:
    """Maximum-likelihood training with Adam over reshuffled mini-batches.

    A ``holdout`` fraction of the pairs is kept aside for the per-epoch
    held-out loss; with ``keep_best`` the parameters of the best held-out
    epoch are restored at the end.
    """
    config = config or FlowTrainConfig()
    alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    n = alpha.shape[0]
    if model.conditional:
        c = np.asarray(c, dtype=np.float64)
        if c.shape[0] != n:
            raise FlowConfigError("alpha and c must have the same number of rows")
    if n < config.batch_size:
        raise FlowConfigError(f"need at least batch_size={config.batch_size} pairs, got {n}")
    result = FlowTrainResult(model)
    if config.epochs <= 0:
        return result

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n)
    n_hold = int(round(config.holdout * n)) if config.holdout > 0 else 0
    hold, train = order[:n_hold], order[n_hold:]
    a_tr, a_ho = alpha[train], alpha[hold]
    c_tr = c[train] if model.conditional else None
    c_ho = c[hold] if model.conditional else None
    if not model.standardized:
        model.fit_standardization(a_tr, c_tr)

    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    best = (np.inf, snapshot(params), 0)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(a_tr.shape[0])
        total = 0.0
        for bi, s in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[s:s + config.batch_size]
            g = Graph()
            try:
                lp = model.log_prob_node(g, a_tr[idx], None if c_tr is None else c_tr[idx])
            except FlowNumericalError as exc:
                raise FlowTrainingError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            loss = -g.mean(lp)
            if not np.isfinite(loss.value):
                raise FlowTrainingError(f"NaN/inf loss at epoch {epoch}, batch {bi}")
            g.backward(loss)
            opt.step()
            total += float(loss.value) * len(idx)
        entry = {"epoch": epoch, "train_loss": total / len(perm)}
        if n_hold:
            entry["heldout_loss"] = nll(model, a_ho, c_ho)
            if entry["heldout_loss"] < best[0]:
                best = (entry["heldout_loss"], snapshot(params), epoch)
        result.history.append(entry)
        if callback is not None:
            callback(model, entry)
    if n_hold and config.keep_best and best[2] > 0:
        restore(params, best[1])
        result.best_epoch = best[2]
    else:
        result.best_epoch = config.epochs
    return result
