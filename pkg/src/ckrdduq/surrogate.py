"""Residual-network regression surrogates for the coupling functions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Adam, Dense, Graph, Node, Parameter, restore, snapshot


class SurrogateError(ValueError):
    pass


@dataclass
class SurrogateConfig:
    width: int = 64
    blocks: int = 5  # two hidden layers per block
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 400
    max_updates: int = 15000  # optimizer steps; bounds cost for large sample sizes
    patience: int = 20
    holdout: float = 0.1
    lr_decay: float = 0.3  # applied when validation stalls for `patience` epochs
    min_lr: float = 1e-5
    mse_ceiling: float = 1e-2  # on standardized targets
    seed: int = 0
    min_samples: int = 1000
    linear_skip: bool = True


def _std(x):
    s = x.std(axis=0)
    return np.where(s > 1e-12 * (1.0 + np.abs(x.mean(axis=0))), s, 1.0)


class ResNet:
    """Linear stem, ``blocks`` residual blocks of two LeakyReLU layers, linear head.

    With ``linear_skip`` a trainable affine map from input to output is added
    to the head, so affine structure in the target does not have to be
    learned through the nonlinear trunk.
    """

    def __init__(self, n_in: int, n_out: int, width: int = 64, blocks: int = 5, seed: int = 0,
                 linear_skip: bool = True):
        rng = np.random.default_rng(seed)
        self.stem = Dense(n_in, width, rng, name="stem")
        self.blocks = [(Dense(width, width, rng, name=f"block{b}.0"), Dense(width, width, rng, name=f"block{b}.1"))
                       for b in range(blocks)]
        self.head = Dense(width, n_out, rng, zero_init=True, name="head")
        self.skip = Dense(n_in, n_out, rng, zero_init=True, name="skip") if linear_skip else None
        self.n_in, self.n_out = n_in, n_out

    def parameters(self) -> list[Parameter]:
        ps = self.stem.parameters()
        for d0, d1 in self.blocks:
            ps += d0.parameters() + d1.parameters()
        ps += self.head.parameters()
        return ps + (self.skip.parameters() if self.skip else [])

    def __call__(self, g: Graph, x) -> Node:
        h = self.stem(g, x)
        for d0, d1 in self.blocks:
            h = h + d1(g, g.leaky_relu(d0(g, g.leaky_relu(h))))
        out = self.head(g, g.leaky_relu(h))
        return out + self.skip(g, x) if self.skip else out

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass (same arithmetic as the graph path)."""
        def leaky(v):
            return np.where(v > 0, v, 0.01 * v)

        def dense(d, v):
            return v @ d.weight.value + d.bias.value

        h = dense(self.stem, x)
        for d0, d1 in self.blocks:
            h = h + dense(d1, leaky(dense(d0, leaky(h))))
        out = dense(self.head, leaky(h))
        return out + dense(self.skip, x) if self.skip else out


@dataclass
class CouplingSurrogate:
    net: ResNet
    x_shift: np.ndarray
    x_scale: np.ndarray
    y_shift: np.ndarray
    y_scale: np.ndarray
    val_mse: float = np.inf
    flagged: bool = False
    history: list = field(default_factory=list)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.net.n_in:
            raise SurrogateError(f"expected {self.net.n_in} inputs, got {x.shape[1]}")
        return self.net.predict((x - self.x_shift) / self.x_scale) * self.y_scale + self.y_shift

    def manifest(self) -> dict:
        return {"n_in": self.net.n_in, "n_out": self.net.n_out, "width": self.net.stem.weight.shape[1],
                "blocks": len(self.net.blocks), "linear_skip": self.net.skip is not None, "x_shift": self.x_shift.tolist(), "x_scale": self.x_scale.tolist(),
                "y_shift": self.y_shift.tolist(), "y_scale": self.y_scale.tolist(),
                "val_mse": self.val_mse, "flagged": self.flagged}

    @classmethod
    def from_manifest(cls, meta: dict) -> "CouplingSurrogate":
        net = ResNet(meta["n_in"], meta["n_out"], meta["width"], meta["blocks"],
                     linear_skip=meta.get("linear_skip", True))
        arr = lambda k: np.array(meta[k], dtype=np.float64)
        return cls(net, arr("x_shift"), arr("x_scale"), arr("y_shift"), arr("y_scale"),
                   meta["val_mse"], meta["flagged"])


def train_surrogate(x: np.ndarray, y: np.ndarray, config: SurrogateConfig | None = None) -> CouplingSurrogate:
    """Fit inputs -> targets by mean squared error; returns the best-validation model."""
    config = config or SurrogateConfig()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(x.shape[0], -1)
    n = x.shape[0]
    if n < config.min_samples:
        raise SurrogateError(f"need at least {config.min_samples} samples, got {n}")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(config.holdout * n)))
    val, tr = order[:n_val], order[n_val:]
    sur = CouplingSurrogate(ResNet(x.shape[1], y.shape[1], config.width, config.blocks, config.seed,
                                   config.linear_skip),
                            x[tr].mean(axis=0), _std(x[tr]), y[tr].mean(axis=0), _std(y[tr]))
    xs = (x - sur.x_shift) / sur.x_scale
    ys = (y - sur.y_shift) / sur.y_scale
    if sur.net.skip is not None:
        # start the affine part at the least-squares fit of the training set
        A = np.column_stack([xs[tr], np.ones(tr.size)])
        coef = np.linalg.lstsq(A, ys[tr], rcond=None)[0]
        sur.net.skip.weight.value[...] = coef[:-1]
        sur.net.skip.bias.value[...] = coef[-1]
    params = sur.net.parameters()
    opt = Adam(params, lr=config.lr)

    def val_mse():
        r = sur.net.predict(xs[val]) - ys[val]
        return float(np.mean(r * r))

    best, best_vals, since = val_mse(), snapshot(params), 0
    per_epoch = -(-tr.size // config.batch_size)
    epochs = config.max_epochs
    if config.max_updates:
        epochs = max(1, min(epochs, config.max_updates // per_epoch))
    for epoch in range(1, epochs + 1):
        perm = tr[rng.permutation(tr.size)]
        for s in range(0, perm.size, config.batch_size):
            idx = perm[s:s + config.batch_size]
            g = Graph()
            r = sur.net(g, xs[idx]) - ys[idx]
            loss = g.mean(g.square(r))
            g.backward(loss)
            opt.step()
        mse = val_mse()
        sur.history.append(mse)
        if mse < best:
            best, best_vals, since = mse, snapshot(params), 0
        else:
            since += 1
            if since >= config.patience:
                if opt.lr * config.lr_decay < config.min_lr * (1 - 1e-9):
                    break
                opt.lr *= config.lr_decay
                restore(params, best_vals)
                since = 0
    restore(params, best_vals)
    sur.val_mse = best
    sur.flagged = bool(best > config.mse_ceiling)
    return sur
