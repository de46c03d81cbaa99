"""Lightweight classification heads with imbalance-aware losses.

Three per-class binary losses are supported, all on ``p = sigmoid(z)``:

* ``bce``:  -[w_pos * y * log p + (1 - y) * log(1 - p)]
* ``focal``: -[y * (1 - p)^g * log p + (1 - y) * p^g * log(1 - p)]
* ``asymmetric``: -[y * (1 - p)^g+ * log p + (1 - y) * q^g- * log(1 - q)],
  with ``q = max(p - clip, 0)``

Losses are summed over classes and averaged over frames during training.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .streams import ProbStream

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12
LOSSES = ("bce", "focal", "asymmetric")
ARCHITECTURES = ("linear", "mlp")


class HeadError(ValueError):
    pass


@dataclass
class HeadSpec:
    model_id: int = 0
    architecture: str = "linear"
    hidden: int = 32
    loss: str = "bce"
    pos_weight: Optional[list] = None  # per class; None -> neg/pos clamped to [1, 100]
    gamma: float = 2.0
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip: float = 0.05
    lr: float = 0.1
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise HeadError(f"architecture must be one of {ARCHITECTURES}")
        if self.loss not in LOSSES:
            raise HeadError(f"loss must be one of {LOSSES}")
        if min(self.gamma, self.gamma_pos, self.gamma_neg) < 0:
            raise HeadError("focusing parameters must be >= 0")
        if not 0 <= self.clip < 1:
            raise HeadError("clip must lie in [0, 1)")
        if self.hidden < 1 or self.epochs < 0 or self.lr <= 0:
            raise HeadError("hidden >= 1, epochs >= 0 and lr > 0 are required")


def load_head_specs(path) -> list[HeadSpec]:
    with open(path) as fh:
        raw = json.load(fh)
    if isinstance(raw, dict):
        raw = raw.get("heads", [raw])
    return [HeadSpec(**entry) for entry in raw]


def _log(x):
    return np.log(np.maximum(x, LOG_EPS))


def loss_value_and_gradient(spec: HeadSpec, z, y, pos_weight=None) -> tuple[float, np.ndarray]:
    """Summed loss over the entries of ``z`` and its exact gradient with respect to ``z``."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise HeadError("logits must be finite")
    p = expit(z)
    dp = p * (1.0 - p)
    if spec.loss == "bce":
        w = 1.0 if pos_weight is None else np.asarray(pos_weight, dtype=np.float64)
        loss = -(w * y * _log(p) + (1 - y) * _log(1 - p))
        grad = w * y * (p - 1.0) + (1 - y) * p
    elif spec.loss == "focal":
        g = spec.gamma
        loss = -(y * (1 - p) ** g * _log(p) + (1 - y) * p ** g * _log(1 - p))
        grad = y * (1 - p) ** g * (g * p * _log(p) - (1 - p)) + (1 - y) * p ** g * (
            p - g * (1 - p) * _log(1 - p)
        )
    else:
        gp, gn, m = spec.gamma_pos, spec.gamma_neg, spec.clip
        q = np.maximum(p - m, 0.0)
        loss = -(y * (1 - p) ** gp * _log(p) + (1 - y) * q ** gn * _log(1 - q))
        pos_grad = (1 - p) ** gp * (gp * p * _log(p) - (1 - p))
        # d/dq of q^gn * log(1 - q); the gn * q^(gn-1) term vanishes for gn == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            dq_pow = np.where(q > 0, gn * q ** (gn - 1), 0.0) if gn > 0 else 0.0
        d_neg = dq_pow * _log(1 - q) - q ** gn / (1 - q)
        neg_grad = -np.where(p > m, d_neg * dp, 0.0)
        grad = y * pos_grad + (1 - y) * neg_grad
    return float(np.sum(loss)), grad


def default_pos_weight(labels: np.ndarray) -> np.ndarray:
    pos = labels.sum(axis=0)
    neg = labels.shape[0] - pos
    with np.errstate(divide="ignore"):
        w = np.where(pos > 0, neg / np.maximum(pos, 1), 1.0)
    return np.clip(w, 1.0, 100.0)


@dataclass
class HeadParams:
    spec: HeadSpec
    W1: np.ndarray
    b1: np.ndarray
    W2: Optional[np.ndarray] = None
    b2: Optional[np.ndarray] = None
    active: Optional[np.ndarray] = None  # classes that were trained
    losses: list = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None


def init_head(spec: HeadSpec, dim: int, num_classes: int) -> HeadParams:
    rng = np.random.default_rng(spec.seed)
    if spec.architecture == "linear":
        return HeadParams(spec, rng.normal(0, 0.01, (dim, num_classes)), np.zeros(num_classes))
    return HeadParams(
        spec,
        rng.normal(0, np.sqrt(2.0 / dim), (dim, spec.hidden)),
        np.zeros(spec.hidden),
        rng.normal(0, 0.01, (spec.hidden, num_classes)),
        np.zeros(num_classes),
    )


def head_logits(params: HeadParams, x: np.ndarray):
    if params.W2 is None:
        return x @ params.W1 + params.b1, None
    h = np.maximum(x @ params.W1 + params.b1, 0.0)
    return h @ params.W2 + params.b2, h


def train_head(features: np.ndarray, labels: np.ndarray, spec: HeadSpec) -> HeadParams:
    """Full-batch gradient descent; deterministic for a given seed."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise HeadError(f"features {x.shape} and labels {y.shape} are inconsistent")
    n, C = y.shape
    params = init_head(spec, x.shape[1], C)
    active = y.sum(axis=0) > 0
    if not active.all():
        logger.warning("classes %s have no positives and are not trained", np.flatnonzero(~active).tolist())
    params.active = active
    pw = None
    if spec.loss == "bce":
        pw = np.asarray(spec.pos_weight, dtype=np.float64) if spec.pos_weight is not None else default_pos_weight(y)
        pw = pw[active]
    for epoch in range(spec.epochs):
        z, h = head_logits(params, x)
        loss, g_act = loss_value_and_gradient(spec, z[:, active], y[:, active], pw)
        if not np.isfinite(loss):
            raise HeadError(f"loss became {loss} at epoch {epoch} ({spec.loss}, lr={spec.lr})")
        g = np.zeros_like(z)
        g[:, active] = g_act / n
        if params.W2 is None:
            params.W1 -= spec.lr * (x.T @ g)
            params.b1 -= spec.lr * g.sum(axis=0)
        else:
            gh = (g @ params.W2.T) * (h > 0)
            params.W2 -= spec.lr * (h.T @ g)
            params.b2 -= spec.lr * g.sum(axis=0)
            params.W1 -= spec.lr * (x.T @ gh)
            params.b1 -= spec.lr * gh.sum(axis=0)
        params.losses.append(loss / n)
    return params


def predict_head(params: HeadParams, features: np.ndarray, video_id: str = "", backbone_id: int = 0) -> ProbStream:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.W1.shape[0]:
        raise HeadError(f"expected features with {params.W1.shape[0]} columns, got {x.shape}")
    z, _ = head_logits(params, x)
    return ProbStream(video_id, (backbone_id, params.spec.model_id), np.clip(expit(z), 1e-12, 1 - 1e-12))


def default_head_specs(seed: int = 0) -> list[HeadSpec]:
    """Five heads mixing architectures and losses."""
    return [
        HeadSpec(0, "linear", loss="bce", seed=seed),
        HeadSpec(1, "linear", loss="focal", seed=seed + 1),
        HeadSpec(2, "linear", loss="asymmetric", seed=seed + 2),
        HeadSpec(3, "mlp", loss="bce", seed=seed + 3),
        HeadSpec(4, "mlp", loss="focal", seed=seed + 4),
    ]


def spec_to_dict(spec: HeadSpec) -> dict:
    return asdict(spec)
