"""Training objectives and their per-step report."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError
from .tensor import Tensor

DEFAULT_LAMBDA1 = 1e-4
DEFAULT_LAMBDA2 = 1e-4
DEFAULT_BETA1 = 0.1
DEFAULT_BETA2 = 0.01


@dataclass
class LossReport:
    """Per-batch means of every loss term for one step."""

    rec: float = 0.0
    kl_st: float = 0.0
    kl_ts: float = 0.0
    adv: float = 0.0
    cons_s: float = 0.0
    cons_t: float = 0.0
    total_phi: float = 0.0
    total_theta: float = 0.0

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in asdict(self).values())

    def row(self, step: int) -> list:
        return [step] + [repr(float(getattr(self, f.name))) for f in fields(self)]


TRACE_HEADER = ["step"] + [f.name for f in fields(LossReport)]


def write_trace(path, rows: list[tuple[int, LossReport]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for step, rep in rows:
            w.writerow(rep.row(step))


def read_trace(path) -> list[tuple[int, LossReport]]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [(int(row.pop("step")), LossReport(**{k: float(v) for k, v in row.items()})) for row in r]


def kl_standard_normal(mu, sigma) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dims, averaged over the batch."""
    mu = mu if isinstance(mu, Tensor) else Tensor(np.asarray(mu))
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(np.asarray(sigma), dtype=mu.dtype)
    if mu.shape != sigma.shape:
        raise DimensionError(f"kl: mu {mu.shape} and sigma {sigma.shape} disagree")
    if np.any(sigma.data <= 0):
        raise DomainError("kl: sigma must be strictly positive")
    per = T.sub(T.add(T.square(mu), T.square(sigma)), T.add(T.mul(T.log(sigma), 2.0), 1.0))
    if per.ndim == 1:
        per = T.reshape(per, (1, -1))
    return T.mul(T.mean(T.sum_(per, axis=tuple(range(1, per.ndim)))), 0.5)


def reconstruction_loss(x_hat: Tensor, x, kind: str = "bce") -> Tensor:
    """Mean per-pixel Bernoulli negative log-likelihood (or MSE with ``kind='mse'``)."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=x_hat.dtype))
    if x_hat.shape != x.shape:
        raise DimensionError(f"reconstruction: prediction {x_hat.shape} vs target {x.shape}")
    if kind == "mse":
        return T.mean(T.square(T.sub(x_hat, x)))
    if kind != "bce":
        raise DomainError(f"unknown reconstruction likelihood {kind!r}")
    p = T.clamp_probs(x_hat, "reconstruction")
    ll = T.add(T.mul(x, T.log(p)), T.mul(T.sub(1.0, x), T.log(T.sub(1.0, p))))
    return T.neg(T.mean(ll))


def adversarial_loss(p_s: Tensor, p_t: Tensor) -> Tensor:
    """-mean log p_s - mean log(1 - p_t); the discriminator minimises it."""
    ps = T.clamp_probs(p_s, "adversarial (source)")
    pt = T.clamp_probs(p_t, "adversarial (target)")
    return T.neg(T.add(T.mean(T.log(ps)), T.mean(T.log(T.sub(1.0, pt)))))


def consistency_loss(xhat_st: Tensor, xtilde_s: Tensor, xhat_ts: Tensor | None,
                     xtilde_t: Tensor | None) -> tuple[Tensor, Tensor]:
    """Pixel MSE between each reconstruction and its h-only generation.

    Returns the unweighted (source, target) pair; the weights are applied in
    :func:`aggregate`. A branch passed as None contributes zero.
    """
    out = []
    for name, a, b in (("source", xhat_st, xtilde_s), ("target", xhat_ts, xtilde_t)):
        if a is None or b is None:
            out.append(Tensor(np.zeros((), dtype=np.float32)))
            continue
        if a.shape != b.shape:
            raise DimensionError(f"consistency ({name}): {a.shape} vs {b.shape}")
        out.append(T.mean(T.square(T.sub(a, b))))
    return out[0], out[1]


def aggregate(rec, kl_st, kl_ts, adv, cons_s, cons_t, lambda1: float = DEFAULT_LAMBDA1,
              lambda2: float = DEFAULT_LAMBDA2, beta1: float = DEFAULT_BETA1, beta2: float = DEFAULT_BETA2):
    """Split objective: (adv + l1*(KL_st + KL_ts) + l2*rec, rec + b1*Lc_s + b2*Lc_t).

    Works on tensors (for backward) or plain floats.
    """
    total_phi = adv + lambda1 * (kl_st + kl_ts) + lambda2 * rec
    total_theta = rec + beta1 * cons_s + beta2 * cons_t
    return total_phi, total_theta
