"""Karhunen-Loeve expansion of a separable exponential random field."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

TRUNC_STD = 0.5
TRUNC_BOUND = 1.0


class EllipticityError(ValueError):
    pass


class KLError(RuntimeError):
    pass


@dataclass
class FieldConfig:
    mean: float = 1.0  # a_0
    sigma: float = 0.5
    corr_length: float = 1.0
    modes: int = 14

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.corr_length <= 0:
            raise ValueError(f"correlation length must be positive, got {self.corr_length}")
        if self.modes < 1:
            raise ValueError(f"need at least one KL mode, got {self.modes}")


@dataclass
class KLBasis:
    eigenvalues: np.ndarray  # (modes,)
    functions: np.ndarray  # (nodes, modes), orthonormal under `weights`
    weights: np.ndarray  # (nodes,) quadrature weights
    mean: float
    trace: float  # trace of the weighted covariance operator

    @property
    def modes(self) -> int:
        return self.eigenvalues.shape[0]

    def evaluate(self, xi: np.ndarray, floor: float = 1e-6) -> np.ndarray:
        """Nodal field values ``a_0 + sum sqrt(lam_m) a_m xi_m``; rows of xi give rows of output."""
        xi = np.asarray(xi, dtype=np.float64)
        if xi.shape[-1] != self.modes:
            raise ValueError(f"expected {self.modes} KL coordinates, got {xi.shape[-1]}")
        a = self.mean + (xi * np.sqrt(self.eigenvalues)) @ self.functions.T
        low = a.min()
        if low <= floor:
            raise EllipticityError(f"diffusion field reaches {low:.3e} <= {floor:g}")
        return a

    def to_table(self) -> np.ndarray:
        """Eigenvalue row followed by one row per node (weights then eigenfunctions)."""
        top = np.concatenate([[self.mean, self.trace], self.eigenvalues])
        body = np.column_stack([self.weights, np.zeros_like(self.weights), self.functions])
        return np.vstack([top, body])

    @classmethod
    def from_table(cls, table: np.ndarray) -> "KLBasis":
        return cls(eigenvalues=table[0, 2:].copy(), functions=table[1:, 2:].copy(),
                   weights=table[1:, 0].copy(), mean=float(table[0, 0]), trace=float(table[0, 1]))


def trapezoid_weights(x: np.ndarray) -> np.ndarray:
    """1-d composite trapezoid weights for sorted nodes x."""
    w = np.zeros_like(x, dtype=np.float64)
    dx = np.diff(x)
    w[:-1] += 0.5 * dx
    w[1:] += 0.5 * dx
    return w


def kl_expand(cfg: FieldConfig, x1: np.ndarray, x2: np.ndarray) -> KLBasis:
    """Nystrom eigenpairs of C(x, y) = sigma^2 exp(-|x1-y1|/Lc - |x2-y2|/Lc).

    Nodes form the tensor grid ``x1 x x2`` ordered with x2 fastest, which
    matches the finite-element node numbering.
    """
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    p1, p2 = X1.ravel(), X2.ravel()
    w = np.outer(trapezoid_weights(x1), trapezoid_weights(x2)).ravel()
    trace = cfg.sigma ** 2 * w.sum()
    if cfg.modes > p1.size:
        raise KLError(f"{cfg.modes} modes requested from {p1.size} nodes")
    if cfg.sigma == 0.0:
        funcs = np.zeros((p1.size, cfg.modes))
        funcs[:, :] = np.eye(p1.size, cfg.modes) / np.sqrt(w)[:, None]
        return KLBasis(np.zeros(cfg.modes), funcs, w, cfg.mean, 0.0)
    C = cfg.sigma ** 2 * np.exp(-(np.abs(p1[:, None] - p1[None, :]) + np.abs(p2[:, None] - p2[None, :])) / cfg.corr_length)
    sw = np.sqrt(w)
    A = sw[:, None] * C * sw[None, :]
    try:
        lam, vec = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise KLError(f"eigendecomposition failed, condition estimate {np.linalg.cond(A):.3e}") from exc
    order = np.argsort(lam)[::-1][: cfg.modes]
    lam = np.clip(lam[order], 0.0, None)
    funcs = vec[:, order] / sw[:, None]
    # fix the sign so the basis is reproducible across LAPACK builds
    signs = np.sign(funcs[np.argmax(np.abs(funcs), axis=0), np.arange(cfg.modes)])
    funcs *= np.where(signs == 0, 1.0, signs)
    return KLBasis(lam, funcs, w, cfg.mean, float(trace))


def sample_truncated_normal(n: int, dim: int, rng: np.random.Generator,
                            std: float = TRUNC_STD, bound: float = TRUNC_BOUND) -> np.ndarray:
    """i.i.d. N(0, std^2) conditioned on [-bound, bound], by rejection."""
    out = np.empty(n * dim)
    filled = 0
    while filled < out.size:
        need = out.size - filled
        draw = rng.normal(0.0, std, size=int(need * 1.1) + 16)
        draw = draw[np.abs(draw) <= bound][:need]
        out[filled:filled + draw.size] = draw
        filled += draw.size
    return out.reshape(n, dim)


def truncated_normal_std(std: float = TRUNC_STD, bound: float = TRUNC_BOUND) -> float:
    b = bound / std
    phi = np.exp(-0.5 * b * b) / np.sqrt(2 * np.pi)
    Z = erf(b / np.sqrt(2.0))
    return float(std * np.sqrt(1.0 - 2.0 * b * phi / Z))


def truncated_normal_logpdf(x: np.ndarray, std: float = TRUNC_STD, bound: float = TRUNC_BOUND) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    Z = erf(bound / (std * np.sqrt(2.0)))
    lp = -0.5 * (x / std) ** 2 - np.log(std * np.sqrt(2 * np.pi) * Z)
    return np.where(np.abs(x) <= bound, lp, -np.inf)
