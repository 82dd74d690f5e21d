#!/usr/bin/env python3
"""
Objective Service
Sparse L_p photometric loss, its analytic gradient with a finite-difference
check, the weighted total objective and descent-based flow refinement.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.core.errors import BadExponent, DimensionMismatch, InvalidArgument, NonFinite
from src.core.models import FlowField, Image, LossReport, RefinementResult
from src.services import bilinear

logger = logging.getLogger(__name__)

DEFAULT_P = 0.4
DEFAULT_EPS = 1e-3
DEFAULT_LAMBDAS = (0.1, 0.1, 1.0, 1.0, 0.5)
MAX_HALVINGS = 10


def _check_penalty(p: float, eps: float) -> None:
    if not 0 < p <= 1:
        raise BadExponent(f"p must lie in (0, 1], got {p}")
    if eps <= 0:
        raise InvalidArgument(f"eps must be > 0, got {eps}")


def sparse_lp(x, p: float = DEFAULT_P, eps: float = DEFAULT_EPS):
    """psi(x) = (x^2 + eps^2)^(p/2); scalars or arrays."""
    _check_penalty(p, eps)
    return np.power(np.square(x) + eps * eps, 0.5 * p)


def sparse_lp_derivative(x, p: float = DEFAULT_P, eps: float = DEFAULT_EPS):
    _check_penalty(p, eps)
    return p * x * np.power(np.square(x) + eps * eps, 0.5 * p - 1.0)


def _sample_positions(i0: Image, i1: Image, flow: FlowField):
    if i0.data.shape != i1.data.shape or i0.data.shape != flow.shape:
        raise DimensionMismatch(f"images {i0.data.shape}/{i1.data.shape} vs flow {flow.shape}")
    height, width = flow.shape
    xs, ys = bilinear.pixel_grid(height, width)
    sx, sy = xs + flow.u, ys + flow.v
    valid = (sx >= 0) & (sx <= width - 1) & (sy >= 0) & (sy <= height - 1)
    return sx, sy, valid


def photometric_terms(i0: Image, i1: Image, flow: FlowField,
                      p: float = DEFAULT_P, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Per-pixel psi(i0 - warp(i1, flow)); zero where the warp leaves the raster."""
    sx, sy, valid = _sample_positions(i0, i1, flow)
    residual = i0.data - bilinear.sample(i1.data, sx, sy)
    return np.where(valid, sparse_lp(residual, p, eps), 0.0)


def photometric_loss(i0: Image, i1: Image, flow: FlowField, gt: Optional[FlowField] = None,
                     p: float = DEFAULT_P, eps: float = DEFAULT_EPS) -> float:
    """Sum of psi over valid pixels, plus the mean L1 flow error when gt is given."""
    loss = float(photometric_terms(i0, i1, flow, p, eps).sum())
    if gt is not None:
        if gt.shape != flow.shape:
            raise DimensionMismatch(f"ground truth {gt.shape} vs flow {flow.shape}")
        loss += float(np.mean(np.abs(flow.u - gt.u) + np.abs(flow.v - gt.v)))
    return loss


def photometric_grad(i0: Image, i1: Image, flow: FlowField,
                     p: float = DEFAULT_P, eps: float = DEFAULT_EPS) -> FlowField:
    """
    d(photometric term)/d(flow), per pixel.

    r = i0 - i1(x + flow), so dL/du = psi'(r) * -(d i1/dx at the sample).
    """
    sx, sy, valid = _sample_positions(i0, i1, flow)
    warped, d_dx, d_dy = bilinear.sample_with_gradient(i1.data, sx, sy)
    dpsi = np.where(valid, sparse_lp_derivative(i0.data - warped, p, eps), 0.0)
    return FlowField(u=-dpsi * d_dx, v=-dpsi * d_dy)


def gradcheck(i0: Image, i1: Image, flow: FlowField, p: float = DEFAULT_P,
              eps: float = DEFAULT_EPS, h: float = 1e-4) -> float:
    """
    Max relative error between photometric_grad and central differences.

    Each pixel's term depends on its own flow only, so every pixel is
    perturbed at once. Pixels whose sample sits within 2h of a bilinear cell
    edge or the raster border are skipped.
    """
    if h <= 0:
        raise InvalidArgument(f"h must be > 0, got {h}")
    analytic = photometric_grad(i0, i1, flow, p, eps)
    sx, sy, valid = _sample_positions(i0, i1, flow)
    height, width = flow.shape

    def _clear(pos, limit):
        frac = pos - np.floor(pos)
        return (np.minimum(frac, 1.0 - frac) >= 2 * h) & (pos >= 2 * h) & (pos <= limit - 2 * h)

    usable = valid & _clear(sx, width - 1) & _clear(sy, height - 1)
    if not usable.any():
        raise InvalidArgument("no pixel is far enough from cell edges for a gradient check")

    worst = 0.0
    for component, grad in (("u", analytic.u), ("v", analytic.v)):
        du, dv = (h, 0.0) if component == "u" else (0.0, h)
        plus = photometric_terms(i0, i1, FlowField(u=flow.u + du, v=flow.v + dv), p, eps)
        minus = photometric_terms(i0, i1, FlowField(u=flow.u - du, v=flow.v - dv), p, eps)
        numeric = (plus - minus) / (2 * h)
        a, n = grad[usable], numeric[usable]
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(rel.max()))
    logger.debug(f"Gradient check: max relative error {worst:.3e} over {int(usable.sum())} pixels")
    return worst


def random_gradcheck_instance(seed: int = 0, size: int = 32) -> Tuple[Image, Image, FlowField]:
    """
    Smooth random (i0, i1, flow) with i0 in [0.6, 1] and i1 in [0, 0.4].

    Residuals therefore stay at least 0.2 away from zero, where the smoothed
    penalty is well conditioned.
    """
    rng = np.random.default_rng(seed)

    def _smooth(lo, hi, sigma):
        field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="nearest")
        field = (field - field.min()) / max(float(np.ptp(field)), 1e-12)
        return lo + (hi - lo) * field

    i0 = Image(data=_smooth(0.6, 1.0, 2.0))
    i1 = Image(data=_smooth(0.0, 0.4, 2.0))
    flow = FlowField(u=_smooth(-2.0, 2.0, 4.0), v=_smooth(-2.0, 2.0, 4.0))
    return i0, i1, flow


def total_loss(pho: float = 0.0, kl: float = 0.0, entropy: float = 0.0, spa: float = 0.0,
               temp: float = 0.0, consis: float = 0.0,
               lambdas: Sequence[float] = DEFAULT_LAMBDAS) -> LossReport:
    """pho + l1*kl + l2*entropy + l3*spa + l4*temp + l5*consis."""
    parts = (pho, kl, entropy, spa, temp, consis)
    lambdas = tuple(float(w) for w in lambdas)
    if len(lambdas) != 5:
        raise InvalidArgument(f"expected 5 weights, got {len(lambdas)}")
    if not all(np.isfinite(parts)) or not all(np.isfinite(lambdas)):
        raise NonFinite(f"loss parts {parts} / weights {lambdas} must be finite")
    l1, l2, l3, l4, l5 = lambdas
    total = pho + l1 * kl + l2 * entropy + l3 * spa + l4 * temp + l5 * consis
    return LossReport(pho=pho, kl=kl, entropy=entropy, spa=spa, temp=temp, consis=consis,
                      total=float(total), lambdas=lambdas)


def refine_flow(i0: Image, i1: Image, flow0: FlowField, steps: int = 50, lr: float = 0.5,
                p: float = DEFAULT_P, eps: float = DEFAULT_EPS) -> RefinementResult:
    """
    Fixed-step gradient descent on the photometric term.

    A step that raises the loss is retried with half the step size, up to
    MAX_HALVINGS times; if it still raises the loss, refinement stops.
    """
    if steps < 0:
        raise InvalidArgument(f"steps must be >= 0, got {steps}")
    if lr <= 0:
        raise InvalidArgument(f"lr must be > 0, got {lr}")

    flow = flow0
    loss = photometric_loss(i0, i1, flow, p=p, eps=eps)
    history = [loss]
    halvings = 0
    for step in range(steps):
        grad = photometric_grad(i0, i1, flow, p, eps)
        step_size = lr
        accepted = False
        for attempt in range(MAX_HALVINGS + 1):
            candidate = FlowField(u=flow.u - step_size * grad.u, v=flow.v - step_size * grad.v)
            candidate_loss = photometric_loss(i0, i1, candidate, p=p, eps=eps)
            if candidate_loss <= loss:
                accepted = True
                break
            step_size *= 0.5
            halvings += 1
        if not accepted:
            logger.debug(f"Refinement stopped at step {step}: no decrease after {MAX_HALVINGS} halvings")
            break
        flow, loss = candidate, candidate_loss
        history.append(loss)

    logger.info(f"Refinement: loss {history[0]:.4f} -> {history[-1]:.4f} in {len(history) - 1} steps")
    return RefinementResult(flow=flow, loss_history=history, halvings=halvings)
