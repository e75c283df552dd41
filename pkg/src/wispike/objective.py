"""Hybrid training loss: firing-rate MSE plus supervised contrastive loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, InvalidEmbedding, ShapeError, StateError


@dataclass
class LossConfig:
    gamma1: float = 1.0
    gamma2: float = 0.1
    tau: float = 0.07
    projection_dim: int = 64

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0 or self.gamma1 + self.gamma2 <= 0:
            raise ConfigError(f"need gamma1, gamma2 >= 0 with a positive sum, got {self.gamma1}, {self.gamma2}")
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.projection_dim < 2:
            raise ConfigError(f"projection_dim must be >= 2, got {self.projection_dim}")

    @classmethod
    def from_dict(cls, d) -> "LossConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown loss config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def one_hot(labels, n_class, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, n_class), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def mse_loss_and_grad(f, y):
    f = np.asarray(f)
    y = np.asarray(y, dtype=f.dtype)
    if f.shape != y.shape or f.ndim != 2:
        raise ShapeError(f"firing rates {f.shape} and targets {y.shape} must be equal (N, n_class) matrices")
    diff = f - y
    n = f.shape[0]
    return float((diff * diff).sum() / n), 2 * diff / n


def mse_loss(f, y) -> float:
    """Mean over the batch of the squared distance between rates and targets."""
    return mse_loss_and_grad(f, y)[0]


def _check_unit(z):
    norms = np.linalg.norm(z, axis=1)
    if np.any(np.abs(norms - 1) > 1e-4):
        worst = int(np.argmax(np.abs(norms - 1)))
        raise InvalidEmbedding(f"embedding row {worst} has norm {norms[worst]:.6f}, expected 1")


def supcon_loss_and_grad(z, labels, tau=0.07):
    """Supervised contrastive loss over one batch and its gradient w.r.t. ``z``.

    Anchors without a same-label partner are skipped and the average runs over
    the remaining anchors; a batch with none yields 0.
    """
    z = np.asarray(z)
    labels = np.asarray(labels)
    n = z.shape[0]
    if z.ndim != 2 or labels.shape != (n,):
        raise ShapeError(f"embeddings {z.shape} and labels {labels.shape} disagree")
    if n < 2:
        raise ShapeError("supervised contrastive loss needs at least two samples")
    _check_unit(z)
    logits = (z @ z.T) / tau
    off_diag = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off_diag
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    n_anchor = int(anchors.sum())
    if n_anchor == 0:
        return 0.0, np.zeros_like(z)
    masked = np.where(off_diag, logits, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    log_denom = row_max[:, 0] + np.log(np.exp(masked - row_max).sum(axis=1))
    log_prob = logits - log_denom[:, None]
    per_anchor = -np.where(pos, log_prob, 0).sum(axis=1) / np.maximum(n_pos, 1)
    loss = float(per_anchor[anchors].sum() / n_anchor)

    softmax = np.where(off_diag, np.exp(masked - log_denom[:, None]), 0)
    g_logits = (softmax - pos / np.maximum(n_pos, 1)[:, None]) * anchors[:, None] / n_anchor
    g_z = (g_logits + g_logits.T) @ z / tau
    return loss, g_z


def supcon_loss(z, labels, tau=0.07) -> float:
    return supcon_loss_and_grad(z, labels, tau)[0]


def hybrid_loss_and_grad(f, y, z, labels, cfg: LossConfig):
    """Returns ``(loss, d/df, d/dz, (mse, supcon))``."""
    l1, g_f = mse_loss_and_grad(f, y)
    if cfg.gamma2 > 0:
        l2, g_z = supcon_loss_and_grad(z, labels, cfg.tau)
    else:
        l2, g_z = 0.0, None
    loss = cfg.gamma1 * l1 + cfg.gamma2 * l2
    g_z = None if g_z is None else cfg.gamma2 * g_z
    return loss, cfg.gamma1 * g_f, g_z, (l1, l2)


def hybrid_loss(f, y, z, labels, cfg: LossConfig) -> float:
    return hybrid_loss_and_grad(f, y, z, labels, cfg)[0]


class ProjectionHead:
    """Affine map to ``dim`` features followed by L2 normalization."""

    def __init__(self, in_features: int, dim: int = 64, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        bound = 1 / np.sqrt(in_features)
        self.params = {
            "weight": rng.uniform(-bound, bound, (dim, in_features)).astype(dtype),
            # a zero bias would map silent (all-zero) spike features to an undefined direction
            "bias": rng.uniform(-bound, bound, dim).astype(dtype),
        }
        self.zero_grad()
        self._cache = None

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, h):
        h = np.asarray(h, dtype=self.params["weight"].dtype)
        p = h @ self.params["weight"].T + self.params["bias"]
        norm = np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
        z = p / norm
        self._cache = (h, z, norm)
        return z

    def backward(self, g_z):
        if self._cache is None:
            raise StateError("projection head backward called before forward")
        h, z, norm = self._cache
        g_z = np.asarray(g_z, dtype=z.dtype)
        g_p = (g_z - z * (z * g_z).sum(axis=1, keepdims=True)) / norm
        self.grads["weight"] += g_p.T @ h
        self.grads["bias"] += g_p.sum(axis=0)
        self._cache = None
        return g_p @ self.params["weight"]
