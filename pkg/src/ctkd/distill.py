"""Distillation losses, the gradient reversal gate and learnable temperatures."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Tensor

DEFAULT_TAU_INIT = 1.0
DEFAULT_TAU_RANGE = 20.0
DEFAULT_HIDDEN = 256


# -- gradient reversal -------------------------------------------------------
@dataclass
class GrlGate:
    """Identity forward; backward multiplies the incoming gradient by ``-lam``."""

    lam: float = 0.0

    def __post_init__(self):
        self.set_lambda(self.lam)

    def set_lambda(self, lam: float) -> None:
        lam = float(lam)
        if not lam >= 0:
            raise DomainError(f"reversal magnitude must be >= 0, got {lam}")
        self.lam = lam

    def __call__(self, x: Tensor) -> Tensor:
        return grl_apply(self, x)


def grl_apply(gate: GrlGate, x: Tensor) -> Tensor:
    factor = -gate.lam
    # forward hands back the very same buffer: bit-identical by construction
    return ad._make(x.data, "grl", (x,), lambda g: (g * factor,))


# -- temperature modules --------------------------------------------------------
@dataclass
class TemperatureModule:
    """Maps raw predictions ``T_pred`` to ``tau_init + tau_range * sigmoid(T_pred)``.

    ``kind="global"`` holds a single scalar parameter shared by every instance.
    ``kind="instance"`` runs a two-layer relu MLP over the concatenated teacher
    and student logits (``2C -> hidden -> 1``) and yields one value per row.
    """

    kind: str
    num_classes: int = 0
    tau_init: float = DEFAULT_TAU_INIT
    tau_range: float = DEFAULT_TAU_RANGE
    hidden: int = DEFAULT_HIDDEN
    params: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("global", "instance"):
            raise ValueError(f"unknown temperature module kind {self.kind!r}")
        if not self.tau_init > 0 or not self.tau_range > 0:
            raise ValueError("tau_init and tau_range must both be positive")
        if self.kind == "instance" and (self.num_classes <= 0 or self.hidden <= 0):
            raise ValueError("instance module needs positive num_classes and hidden")

    @classmethod
    def global_t(cls, init: float = 0.0, tau_init: float = DEFAULT_TAU_INIT,
                 tau_range: float = DEFAULT_TAU_RANGE) -> "TemperatureModule":
        return cls("global", tau_init=tau_init, tau_range=tau_range,
                   params=[Tensor(np.array(float(init)), True)])

    @classmethod
    def instance_t(cls, num_classes: int, hidden: int = DEFAULT_HIDDEN, seed: int = 0,
                   tau_init: float = DEFAULT_TAU_INIT,
                   tau_range: float = DEFAULT_TAU_RANGE) -> "TemperatureModule":
        rng = np.random.default_rng(seed)
        fan1, fan2 = 2 * num_classes, hidden
        b1, b2 = 1.0 / math.sqrt(fan1), 1.0 / math.sqrt(fan2)
        params = [
            Tensor(rng.uniform(-b1, b1, (fan1, hidden)), True),
            Tensor(rng.uniform(-b1, b1, (hidden,)), True),
            Tensor(rng.uniform(-b2, b2, (hidden, 1)), True),
            Tensor(rng.uniform(-b2, b2, (1,)), True),
        ]
        return cls("instance", num_classes, tau_init, tau_range, hidden, params)

    def raw(self, q_t: Tensor, q_s: Tensor) -> Tensor:
        if self.kind == "global":
            return self.params[0]
        w1, b1, w2, b2 = self.params
        h = ad.relu(ad.linear(ad.concat_rows(q_t, q_s), w1, b1))
        return ad.linear(h, w2, b2)

    def __call__(self, q_t: Tensor, q_s: Tensor) -> Tensor:
        return predict_temperature(self, q_t, q_s)


def predict_temperature(module: TemperatureModule, q_t: Tensor, q_s: Tensor) -> Tensor:
    """Temperature for this batch: a scalar (global) or a ``B x 1`` column (instance).

    Both logit inputs are detached, so gradients reach only the module's own
    parameters.
    """
    if q_t.shape != q_s.shape or len(q_t.shape) != 2:
        raise ShapeError(f"teacher/student logits differ: {q_t.shape} vs {q_s.shape}")
    raw = module.raw(q_t.detach(), q_s.detach())
    return ad.add(module.tau_init, ad.scale(ad.sigmoid(raw), module.tau_range))


# -- losses -----------------------------------------------------------------------
def kd_loss(q_t: Tensor, q_s: Tensor, tau) -> Tensor:
    """Batch mean of ``tau_i**2 * KL(softmax(q_t/tau_i) || softmax(q_s/tau_i))``.

    The teacher logits are detached; gradient reaches ``q_s`` and ``tau``.
    ``tau`` may be a float, a scalar tensor or a ``B x 1`` column.
    """
    q_t = q_t.detach() if isinstance(q_t, Tensor) else Tensor(q_t)
    q_s = q_s if isinstance(q_s, Tensor) else Tensor(q_s)
    tau = tau if isinstance(tau, Tensor) else Tensor(tau)
    if q_t.shape != q_s.shape:
        raise ShapeError(f"teacher/student logits differ: {q_t.shape} vs {q_s.shape}")
    if np.any(tau.data <= 0):
        raise DomainError("temperature must be strictly positive")
    log_pt = ad.log_softmax(q_t, tau)
    log_ps = ad.log_softmax(q_s, tau)
    p_t = ad.exp(log_pt)
    kl = ad.sum(ad.mul(p_t, ad.sub(log_pt, log_ps)), axis=1, keepdims=True)
    return ad.mean(ad.mul(kl, ad.square(tau)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    logp = ad.log_softmax(logits, 1.0)
    return ad.scale(ad.sum(ad.mul(logp, onehot)), -1.0 / b)


def total_loss(ce: Tensor, kd: Tensor, alpha_ce: float = 0.1, alpha_kd: float = 0.9) -> Tensor:
    if alpha_ce < 0 or alpha_kd < 0:
        raise ValueError("loss weights must be non-negative")
    return ad.add(ad.scale(ce, alpha_ce), ad.scale(kd, alpha_kd))
