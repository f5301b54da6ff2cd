"""Forward noising, posterior sampling, priors and losses for nonisotropic diffusion.

Latents have shape (..., J, L): the structured transforms act on the joint axis
J, independently for each of the L feature columns. Leading axes are batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NonisoError, ParameterError, ValidationError
from .schedule import LAMBDA_FLOOR, NoiseSchedule


@dataclass(frozen=True)
class LatentState:
    values: np.ndarray
    t: int


@dataclass(frozen=True)
class PosteriorParams:
    mean: np.ndarray
    lambda_q: np.ndarray
    eigvecs: np.ndarray


def _check_t(t: int, s: NoiseSchedule, lo: int = 1) -> int:
    t = int(t)
    if not (lo <= t <= s.T):
        raise ParameterError(f"timestep {t} outside [{lo}, {s.T}]")
    return t


def _check_shape(x: np.ndarray, s: NoiseSchedule, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] != s.J:
        raise ValidationError(f"{name} must have shape (..., {s.J}, L), got {x.shape}")
    return x


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, LatentState) else x


def rotate(x: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Coordinates in the eigenbasis, U^T x."""
    return s.U.T @ x


def unrotate(x: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    return s.U @ x


def _scale_modes(x: np.ndarray, diag: np.ndarray) -> np.ndarray:
    return diag[:, None] * x


def forward_sample(x0, t: int, eps, s: NoiseSchedule) -> LatentState:
    """x_t = sqrt(abar_t) x0 + U Lambda_bar_t^{1/2} eps."""
    t = _check_t(t, s)
    x0 = _check_shape(x0, s, "x0")
    eps = _check_shape(eps, s, "eps")
    if eps.shape[-2:] != x0.shape[-2:]:
        raise ValidationError(f"eps shape {eps.shape} does not match x0 {x0.shape}")
    noise = unrotate(_scale_modes(eps, np.sqrt(s.lambda_bar[t])), s)
    return LatentState(np.sqrt(s.alpha.alpha_bar[t]) * x0 + noise, t)


def transition_sample(x_prev, t: int, eps, s: NoiseSchedule) -> LatentState:
    """One forward step q(x_t | x_{t-1}) = N(sqrt(alpha_t) x_{t-1}, U Lambda_t U^T)."""
    t = _check_t(t, s)
    x_prev = _check_shape(_values(x_prev), s, "x_prev")
    eps = _check_shape(eps, s, "eps")
    if eps.shape[-2:] != x_prev.shape[-2:]:
        raise ValidationError(f"eps shape {eps.shape} does not match x_prev {x_prev.shape}")
    noise = unrotate(_scale_modes(eps, np.sqrt(s.lambda_t[t])), s)
    return LatentState(np.sqrt(s.alpha.alpha[t]) * x_prev + noise, t)


def posterior_params(x_t, x0, s: NoiseSchedule, t: int | None = None) -> PosteriorParams:
    """Parameters of q(x_{t-1} | x_t, x_0) in the original frame.

    At t = 1 the posterior collapses onto x0 (zero variance).
    """
    if t is None:
        if not isinstance(x_t, LatentState):
            raise ParameterError("timestep required when x_t is a bare array")
        t = x_t.t
    t = _check_t(t, s)
    xt = _check_shape(_values(x_t), s, "x_t")
    x0 = _check_shape(x0, s, "x0")
    if t == 1:
        return PosteriorParams(x0.copy(), np.zeros(s.J), s.U)
    mean_rot = _scale_modes(rotate(xt, s), s.coef_xt[t]) + _scale_modes(rotate(x0, s), s.coef_x0[t])
    return PosteriorParams(unrotate(mean_rot, s), s.lambda_q[t].copy(), s.U)


def reverse_step(x_t, x0_pred, eps, s: NoiseSchedule, t: int | None = None) -> LatentState:
    """x_{t-1} = mu_q + U Lambda_q^{1/2} eps for t >= 2; x0_pred at t = 1."""
    if t is None:
        if not isinstance(x_t, LatentState):
            raise ParameterError("timestep required when x_t is a bare array")
        t = x_t.t
    t = _check_t(t, s)
    x0_pred = _check_shape(x0_pred, s, "x0_pred")
    if t == 1:
        return LatentState(x0_pred.copy(), 0)
    post = posterior_params(x_t, x0_pred, s, t)
    eps = _check_shape(eps, s, "eps")
    noise = unrotate(_scale_modes(eps, np.sqrt(post.lambda_q)), s)
    return LatentState(post.mean + noise, t - 1)


def sample_prior(shape, s: NoiseSchedule, eps, *, isotropic: bool = False) -> LatentState:
    """x_T drawn from the forward marginal at T (or N(0, I) when ``isotropic``)."""
    eps = _check_shape(eps, s, "eps")
    if tuple(shape) != eps.shape[-len(shape):]:
        raise ValidationError(f"eps shape {eps.shape} does not end in {tuple(shape)}")
    if isotropic:
        return LatentState(eps.copy(), s.T)
    return LatentState(unrotate(_scale_modes(eps, np.sqrt(s.lambda_bar[s.T])), s), s.T)


def x0_from_noise_marginal(x_t, eps, s: NoiseSchedule, t: int | None = None) -> np.ndarray:
    """Exact inverse of forward_sample: (x_t - U Lambda_bar_t^{1/2} eps) / sqrt(abar_t)."""
    if t is None:
        t = x_t.t
    t = _check_t(t, s)
    xt = _check_shape(_values(x_t), s, "x_t")
    noise = unrotate(_scale_modes(_check_shape(eps, s, "eps"), np.sqrt(s.lambda_bar[t])), s)
    return (xt - noise) / np.sqrt(s.alpha.alpha_bar[t])


def x0_from_noise_step(x_t, eps, s: NoiseSchedule, t: int | None = None) -> np.ndarray:
    """Single-step reparameterisation using Lambda_t^{1/2} instead of Lambda_bar_t^{1/2}."""
    if t is None:
        t = x_t.t
    t = _check_t(t, s)
    xt = _check_shape(_values(x_t), s, "x_t")
    noise = unrotate(_scale_modes(_check_shape(eps, s, "eps"), np.sqrt(s.lambda_t[t])), s)
    return (xt - noise) / np.sqrt(s.alpha.alpha_bar[t])


x0_from_noise = x0_from_noise_marginal


# -- losses -------------------------------------------------------------------
# Both losses: weighted squared norm over the rotated joint axis, arithmetic mean
# over the L feature columns and over any leading batch axes.


def _weighted_sq(delta: np.ndarray, w: np.ndarray, s: NoiseSchedule) -> float:
    rot = rotate(delta, s)
    per_col = (w[:, None] * rot**2).sum(axis=-2)
    return float(per_col.mean())


def _weighted_sq_grad(delta: np.ndarray, w: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    n = delta.size // delta.shape[-2]
    return unrotate(2.0 * w[:, None] * rotate(delta, s), s) / n


def loss_x0(x0_pred, x0, t: int, s: NoiseSchedule) -> float:
    """abar_t * ||Lambda_bar_t^{-1/2} U^T (x0_pred - x0)||^2, column-averaged."""
    t = _check_t(t, s)
    delta = _check_shape(x0_pred, s) - _check_shape(x0, s)
    return _weighted_sq(delta, s.loss_weight_x0[t], s)


def loss_x0_grad(x0_pred, x0, t: int, s: NoiseSchedule) -> np.ndarray:
    t = _check_t(t, s)
    delta = _check_shape(x0_pred, s) - _check_shape(x0, s)
    return _weighted_sq_grad(delta, s.loss_weight_x0[t], s)


def loss_noise(eps_pred, eps, t: int, s: NoiseSchedule) -> float:
    """Noise-regression objective weighted by (Lambda_t / abar_t)(SNR(t-1) - SNR(t)).

    At t = 1, SNR(0) uses the floored Lambda_bar_0 = LAMBDA_FLOOR.
    """
    t = _check_t(t, s)
    delta = _check_shape(eps_pred, s) - _check_shape(eps, s)
    return _weighted_sq(delta, s.loss_weight_noise[t], s)


def loss_noise_grad(eps_pred, eps, t: int, s: NoiseSchedule) -> np.ndarray:
    t = _check_t(t, s)
    delta = _check_shape(eps_pred, s) - _check_shape(eps, s)
    return _weighted_sq_grad(delta, s.loss_weight_noise[t], s)


# -- sampling -----------------------------------------------------------------


def rollout_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, rollout index) via SeedSequence hashing."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(index)]))


def rollout_noise(seed: int, n: int, J: int, L: int, T: int) -> np.ndarray:
    """Standard normal draws of shape (n, T + 1, J, L): slot T is the prior, slot t-1 drives step t."""
    out = np.empty((n, T + 1, J, L))
    for i in range(n):
        out[i] = rollout_rng(seed, i).standard_normal((T + 1, J, L))
    return out


Denoiser = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def generate_from_noise(
    denoiser: Denoiser,
    cond,
    s: NoiseSchedule,
    noise: np.ndarray,
    *,
    isotropic_prior: bool = False,
    stop_at: int = 1,
    return_trace: bool = False,
):
    """Run the reverse chain for a batch with pre-drawn noise of shape (n, T+1, J, L).

    Returns final x0 predictions (n, J, L). With ``stop_at`` > 1 the chain stops
    once the denoiser has been evaluated at that step and returns (x_t, x0_pred).
    """
    T = s.T
    x = sample_prior(noise.shape[-2:], s, noise[:, T], isotropic=isotropic_prior).values
    trace = []
    x0_pred = None
    for t in range(T, stop_at - 1, -1):
        try:
            x0_pred = np.asarray(denoiser(x, cond, t), dtype=np.float64)
        except NonisoError:
            raise
        except Exception as exc:
            raise NonisoError(f"denoiser failed at timestep {t}: {exc}") from exc
        if x0_pred.shape != x.shape:
            raise ValidationError(f"denoiser returned {x0_pred.shape} at t={t}, expected {x.shape}")
        if return_trace:
            trace.append((t, x.copy(), x0_pred.copy()))
        if t == stop_at and stop_at > 1:
            return (x, x0_pred, trace) if return_trace else (x, x0_pred)
        x = reverse_step(x, x0_pred, noise[:, t - 1] if t >= 2 else None, s, t).values
    return (x, trace) if return_trace else x


def generate(
    denoiser: Denoiser,
    cond,
    s: NoiseSchedule,
    n: int,
    rng_seed: int,
    *,
    isotropic_prior: bool = False,
) -> np.ndarray:
    """n independent reverse-chain rollouts, returned as an (n, J, L) array."""
    cond = np.asarray(cond, dtype=np.float64)
    L = cond.shape[-1]
    if n == 0:
        return np.zeros((0, s.J, L))
    noise = rollout_noise(rng_seed, n, s.J, L, s.T)
    return generate_from_noise(denoiser, cond, s, noise, isotropic_prior=isotropic_prior)
