"""Pseudo-prototypical proxy (PPP) loss and the cross-entropy baseline loss.

Notation used below: ``F`` holds the unit-norm batch features (one row per
instance), ``P`` the stored class prototypes.  Stored prototypes are treated
as constants; pseudo-prototypes are batch features and receive gradient.

For instance ``i`` of class ``c``:

* attractor proxies are ``p^c`` plus the features of the other class-``c``
  batch members;
* repellor proxies are ``p^c`` and ``f_i`` itself, and every batch member of
  another class is pushed away from both.

The class probability for a proxy ``q`` is a softmax where ``q`` competes with
the prototypes of every other observed class, so it reduces to
``sigmoid(f.q/tau - logsumexp_{k != c} f.p^k/tau)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .numerics import DTYPE

# 1 - P is floored here before taking the log
LOG_CLAMP = 1e-12
_TINY = 1e-300


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    include_pseudo_prototypes: bool = True
    attractor_enabled: bool = True
    repellor_enabled: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class LabeledFeatures:
    features: np.ndarray
    labels: np.ndarray
    prototypes: Mapping[int, np.ndarray]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be |B| x d with one label per row")
        missing = set(self.labels.tolist()) - set(int(k) for k in self.prototypes)
        if missing:
            raise KeyError(f"no prototype for classes {sorted(missing)}")


@dataclass
class LossOutput:
    loss: float
    grad: np.ndarray
    pos: float
    neg: float

    @property
    def pos_fraction(self) -> float:
        total = self.pos + self.neg
        return 0.5 if total == 0.0 else self.pos / total


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- scalar reference forms -------------------------------------------------


def class_prob(f, proxy, prototypes: Mapping[int, np.ndarray], c: int, tau: float) -> float:
    """Probability that ``f`` belongs to class ``c`` with ``proxy`` standing in for ``p^c``."""
    if c not in prototypes:
        raise KeyError(f"unknown class {c}")
    f = np.asarray(f, dtype=DTYPE)
    scores = [float(f @ np.asarray(proxy, dtype=DTYPE)) / tau]
    scores += [float(f @ np.asarray(p, dtype=DTYPE)) / tau for k, p in prototypes.items() if k != c]
    scores = np.asarray(scores)
    e = np.exp(scores - scores.max())
    return float(e[0] / e.sum())


def attractor_set(i: int, batch: LabeledFeatures, cfg: LossConfig) -> list[np.ndarray]:
    c = int(batch.labels[i])
    proxies = [np.asarray(batch.prototypes[c], dtype=DTYPE)]
    if cfg.include_pseudo_prototypes:
        proxies += [batch.features[j] for j in range(len(batch.labels)) if j != i and batch.labels[j] == c]
    return proxies


def repellor_set(i: int, batch: LabeledFeatures, cfg: LossConfig) -> list[np.ndarray]:
    c = int(batch.labels[i])
    proxies = [np.asarray(batch.prototypes[c], dtype=DTYPE)]
    if cfg.include_pseudo_prototypes:
        proxies.append(batch.features[i])
    return proxies


def attractor_prob(i: int, batch: LabeledFeatures, cfg: LossConfig) -> float:
    c = int(batch.labels[i])
    f = batch.features[i]
    probs = [class_prob(f, q, batch.prototypes, c, cfg.temperature) for q in attractor_set(i, batch, cfg)]
    return float(np.mean(probs))


def repellor_prob(i: int, j: int, batch: LabeledFeatures, cfg: LossConfig) -> float:
    """Probability that other-class instance ``j`` is taken for instance ``i``'s class."""
    c = int(batch.labels[i])
    if int(batch.labels[j]) == c:
        raise ValueError("repellor pairs must have different labels")
    f = batch.features[j]
    probs = [class_prob(f, q, batch.prototypes, c, cfg.temperature) for q in repellor_set(i, batch, cfg)]
    return float(np.mean(probs))


# -- vectorised loss --------------------------------------------------------


def _logsumexp_excluding(S: np.ndarray):
    """``out[r, c] = log sum_{k != c} exp(S[r, k])`` and its softmax weights."""
    n, K = S.shape
    A = np.broadcast_to(S[:, None, :], (n, K, K)).copy()
    A[:, np.arange(K), np.arange(K)] = -np.inf
    if K == 1:
        return np.full((n, 1), -np.inf), np.zeros((n, 1, 1))
    m = A.max(axis=2, keepdims=True)
    e = np.exp(A - m)
    s = e.sum(axis=2, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    return out, e / s


def ppp_loss_terms(batch: LabeledFeatures, cfg: LossConfig) -> LossOutput:
    """Loss value, gradient w.r.t. the feature rows, and the attractor/repellor split."""
    F = batch.features
    y = batch.labels
    n = len(y)
    if n == 0:
        raise ValueError("empty batch")
    tau = cfg.temperature
    classes = sorted(int(k) for k in batch.prototypes)
    col_of = {c: k for k, c in enumerate(classes)}
    P = np.stack([np.asarray(batch.prototypes[c], dtype=DTYPE) for c in classes])
    col = np.array([col_of[int(c)] for c in y])
    rows = np.arange(n)

    S = F @ P.T / tau
    G = F @ F.T / tau
    Lx, W = _logsumexp_excluding(S)

    dS = np.zeros_like(S)
    dLx = np.zeros_like(Lx)
    dG = np.zeros_like(G)

    same = (y[:, None] == y[None, :]) & ~np.eye(n, dtype=bool)
    diff = y[:, None] != y[None, :]
    pos_loss = 0.0
    neg_loss = 0.0

    if cfg.attractor_enabled:
        L_own = Lx[rows, col]
        a_proto = _sigmoid(S[rows, col] - L_own)
        pseudo = same if cfg.include_pseudo_prototypes else np.zeros_like(same)
        a_pseudo = _sigmoid(G - L_own[:, None]) * pseudo
        count = 1.0 + pseudo.sum(axis=1)
        p_att = (a_proto + a_pseudo.sum(axis=1)) / count
        p_safe = np.maximum(p_att, _TINY)
        pos_loss = float(-np.log(p_safe).sum() / n)
        g = np.where(p_att > _TINY, -1.0 / (n * p_safe), 0.0) / count
        d_proto = g * a_proto * (1.0 - a_proto)
        d_pseudo = g[:, None] * a_pseudo * (1.0 - a_pseudo)
        dS[rows, col] += d_proto
        dG += d_pseudo
        dLx[rows, col] -= d_proto + d_pseudo.sum(axis=1)

    if cfg.repellor_enabled and diff.any():
        # [i, j] entries: anchor i of class c = y_i, other-class instance j
        SJ = S[:, col].T
        LJ = Lx[:, col].T
        u1 = _sigmoid(LJ - SJ)
        if cfg.include_pseudo_prototypes:
            u2 = _sigmoid(LJ - G)
            q = 0.5 * (u1 + u2)
            w = 0.5
        else:
            u2 = np.zeros_like(u1)
            q = u1
            w = 1.0
        q_safe = np.maximum(q, LOG_CLAMP)
        neg_loss = float(-(np.log(q_safe) * diff).sum() / n)
        g = np.where(diff & (q > LOG_CLAMP), -1.0 / (n * q_safe), 0.0) * w
        d1 = g * u1 * (1.0 - u1)
        d2 = g * u2 * (1.0 - u2)
        onehot = np.zeros((n, len(classes)))
        onehot[rows, col] = 1.0
        # dS[j, col_i] -= d1[i, j]; dLx[j, col_i] += d1[i, j] + d2[i, j]
        dS -= d1.T @ onehot
        dLx += (d1 + d2).T @ onehot
        dG -= d2

    dS += np.einsum("rc,rck->rk", dLx, W)
    grad = (dS @ P + (dG + dG.T) @ F) / tau
    return LossOutput(pos_loss + neg_loss, grad, pos_loss, neg_loss)


def ppp_loss(batch: LabeledFeatures, cfg: LossConfig) -> tuple[float, np.ndarray]:
    out = ppp_loss_terms(batch, cfg)
    return out.loss, out.grad


def loss_term_split(batch: LabeledFeatures, cfg: LossConfig) -> float:
    """Share of the attractor term in the full loss, 0.5 when the loss is zero."""
    return ppp_loss_terms(batch, cfg).pos_fraction


def cross_entropy_loss(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    ``targets`` are column indices into ``logits``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if np.any(targets < 0) or np.any(targets >= k):
        raise ValueError(f"label outside head range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), targets].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), targets] -= 1.0
    return loss, grad / n
