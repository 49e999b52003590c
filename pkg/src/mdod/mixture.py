"""Densities and likelihoods of the box mixture model, evaluated in numpy.

A component scores a box with four independent per-coordinate densities
(Cauchy by default, Gaussian for comparison) and a categorical class
distribution whose last entry is the background class.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mdod.geometry import Box, ltrb_to_xywh

LOG_PI = np.log(np.pi)
LOG_2PI = np.log(2 * np.pi)

PRECISIONS = {"half": np.float16, "single": np.float32, "double": np.float64}
DISTRIBUTIONS = ("cauchy", "gaussian")


def cauchy_logpdf(x, mu, gamma):
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma <= 0):
        raise ValueError("Cauchy scale must be positive")
    d = np.asarray(x, dtype=np.float64) - mu
    # log(d^2 + g^2) written to avoid overflow for huge offsets
    big = np.maximum(np.abs(d), gamma)
    small = np.minimum(np.abs(d), gamma)
    log_denom = 2 * np.log(big) + np.log1p((small / big) ** 2)
    return np.log(gamma) - LOG_PI - log_denom


def gaussian_logpdf(x, mu, sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("Gaussian scale must be positive")
    z = (np.asarray(x, dtype=np.float64) - mu) / sigma
    return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z


def coord_logpdf(x, mu, scale, distribution: str = "cauchy"):
    if distribution == "cauchy":
        return cauchy_logpdf(x, mu, scale)
    if distribution == "gaussian":
        return gaussian_logpdf(x, mu, scale)
    raise ValueError(f"unknown distribution {distribution!r}")


def _coords(box) -> np.ndarray:
    if isinstance(box, Box):
        return box.as_array()
    return np.asarray(box, dtype=np.float64)


def box_logpdf(box, mu, gamma, distribution: str = "cauchy") -> float:
    """Joint log-density of the four coordinates under independent marginals."""
    return float(np.sum(coord_logpdf(_coords(box), np.asarray(mu, dtype=np.float64),
                                     gamma, distribution)))


@dataclass(frozen=True)
class MixtureModel:
    """K components over box coordinates plus per-component class probabilities.

    ``mu`` and ``gamma`` are ``(K, 4)``; ``p`` is ``(K, C+1)`` with background
    last; ``pi`` is ``(K,)``. ``box_format`` says whether ``mu`` holds
    ``ltrb`` corners or ``xywh`` centre/size.
    """

    mu: np.ndarray
    gamma: np.ndarray
    p: np.ndarray
    pi: np.ndarray
    box_format: str = "ltrb"
    log_pi: np.ndarray = field(default=None, repr=False)
    log_p: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("mu", "gamma", "p", "pi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        k = len(self.pi)
        if self.mu.shape != (k, 4) or self.gamma.shape != (k, 4) or self.p.shape[0] != k:
            raise ValueError(f"inconsistent component shapes: mu {self.mu.shape}, "
                             f"gamma {self.gamma.shape}, p {self.p.shape}, pi {self.pi.shape}")
        if np.any(self.gamma <= 0):
            raise ValueError("gamma must be positive")
        if abs(self.pi.sum() - 1) > 1e-9 or np.any(self.pi < 0):
            raise ValueError("pi must be a probability vector")
        if np.any(np.abs(self.p.sum(axis=1) - 1) > 1e-9) or np.any(self.p < 0):
            raise ValueError("each row of p must be a probability vector")
        if self.box_format not in ("ltrb", "xywh"):
            raise ValueError(f"unknown box format {self.box_format!r}")
        # logs may be supplied directly when they are known more precisely
        if self.log_pi is None:
            with np.errstate(divide="ignore"):
                object.__setattr__(self, "log_pi", np.log(self.pi))
        if self.log_p is None:
            with np.errstate(divide="ignore"):
                object.__setattr__(self, "log_p", np.log(self.p))

    @property
    def K(self) -> int:
        return len(self.pi)

    @property
    def num_classes(self) -> int:
        """Foreground class count C."""
        return self.p.shape[1] - 1

    @property
    def background(self) -> int:
        return self.p.shape[1] - 1

    def boxes_ltrb(self) -> np.ndarray:
        if self.box_format == "ltrb":
            return self.mu
        cx, cy, w, h = self.mu.T
        return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)

    def encode(self, boxes_ltrb: np.ndarray) -> np.ndarray:
        """Express ltrb boxes in this model's coordinate format."""
        boxes_ltrb = np.asarray(boxes_ltrb, dtype=np.float64).reshape(-1, 4)
        if self.box_format == "ltrb":
            return boxes_ltrb
        return np.stack(ltrb_to_xywh(*boxes_ltrb.T), axis=1)


def _box_array(boxes) -> np.ndarray:
    if isinstance(boxes, Box):
        return boxes.as_array()[None]
    if len(boxes) and isinstance(boxes[0], Box):
        return np.array([b.ltrb for b in boxes], dtype=np.float64)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def component_logpdf(boxes, model: MixtureModel, distribution: str = "cauchy") -> np.ndarray:
    """``(N, K)`` coordinate log-densities of every box under every component."""
    x = model.encode(_box_array(boxes))
    return coord_logpdf(x[:, None, :], model.mu[None], model.gamma[None], distribution).sum(axis=2)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def mixture_box_loglik(box, model: MixtureModel, distribution: str = "cauchy") -> float:
    """log sum_k pi_k F(box; mu_k, gamma_k)."""
    comp = component_logpdf(box, model, distribution)[0]
    return float(_logsumexp(model.log_pi + comp, axis=0))


def mixture_full_loglik(box: Box, model: MixtureModel, class_id: int | None = None,
                        distribution: str = "cauchy") -> float:
    """log sum_k pi_k F(box; mu_k, gamma_k) p_k[class]."""
    cls = box.class_id if class_id is None else class_id
    if cls is None or not 0 <= cls <= model.background:
        raise ValueError(f"class id must be in [0, {model.background}], got {cls}")
    comp = component_logpdf(box, model, distribution)[0]
    return float(_logsumexp(model.log_pi + comp + model.log_p[:, cls], axis=0))


def sample_components(pi, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. categorical draws of component indices."""
    pi = np.asarray(pi, dtype=np.float64)
    cdf = np.cumsum(pi)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    return np.minimum(idx, len(pi) - 1)


def round_to_precision(x, precision: str) -> np.ndarray:
    """Round float64 values to the nearest representable value (ties to even)."""
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float64).astype(PRECISIONS[precision])


def component_density(boxes, model: MixtureModel, distribution: str, precision: str) -> np.ndarray:
    """``(N, K)`` products of the four per-coordinate densities, in the given precision.

    Each marginal density is rounded to the target format and the product is
    accumulated in that format, as a non-log implementation would do.
    """
    dtype = PRECISIONS[precision]
    x = model.encode(_box_array(boxes))
    with np.errstate(under="ignore", over="ignore"):
        marg = np.exp(coord_logpdf(x[:, None, :], model.mu[None], model.gamma[None], distribution))
        marg = marg.astype(dtype)
        out = marg[..., 0]
        for c in range(1, 4):
            out = (out * marg[..., c]).astype(dtype)
    return out


def underflow_count(boxes, model: MixtureModel, distribution: str = "cauchy",
                    precision: str = "half") -> tuple[int, int]:
    """(underflowed pairs, total pairs) over every (box, component) pair."""
    boxes = _box_array(boxes)
    if len(boxes) == 0:
        return 0, 0
    dens = component_density(boxes, model, distribution, precision)
    return int(np.count_nonzero(dens == 0)), int(dens.size)


def underflow_ratio(boxes, model: MixtureModel, distribution: str = "cauchy",
                    precision: str = "half") -> float:
    """Fraction of (box, component) pairs whose density rounds to exactly zero."""
    zeros, total = underflow_count(boxes, model, distribution, precision)
    return zeros / total if total else 0.0


def underflow_threshold(distribution: str, precision: str, scale: float = 1.0) -> float:
    """Smallest |x - mu| at which a single marginal density rounds to zero (bisection)."""
    def zero(d):
        val = np.exp(coord_logpdf(d, 0.0, scale, distribution))
        return round_to_precision(val, precision) == 0

    lo, hi = 0.0, scale
    while not zero(hi):
        lo, hi = hi, hi * 2
        if hi > 1e300:
            return float("inf")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if zero(mid):
            hi = mid
        else:
            lo = mid
    return hi

