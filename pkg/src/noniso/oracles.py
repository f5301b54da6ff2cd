"""Independent reference computations used to check the fast code paths.

Nothing here reuses the eigen tables of a built schedule: covariances are
assembled densely from Sigma_N and the scalar alpha / gamma series, Gaussians
are conditioned by Schur complements, and metrics are written as plain loops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import mpmath
import numpy as np

from .schedule import NoiseSchedule


# -- dense covariances --------------------------------------------------------


def dense_step_covariance(s: NoiseSchedule, t: int) -> np.ndarray:
    """Sigma_t assembled from its defining formula for each schedule kind."""
    sig = np.asarray(s.correlation.sigma_n, dtype=np.float64)
    eye = np.eye(sig.shape[0])
    a = float(s.alpha.alpha[t])
    if s.kind == "discarded":
        return sig * a + eye * (1.0 - a)
    g = float(s.gamma.gamma[t])
    return (1.0 - a) * g * sig + (1.0 - a) * (1.0 - g) * eye


def dense_marginal_covariance(s: NoiseSchedule, t: int) -> np.ndarray:
    """Sigma_bar_t by summing the independent per-step contributions."""
    cov = np.zeros((s.J, s.J))
    for k in range(1, t + 1):
        cov = s.alpha.alpha[k] * cov + dense_step_covariance(s, k)
    return cov


def _mp_matrix(a: np.ndarray):
    return mpmath.matrix([[mpmath.mpf(float(v)) for v in row] for row in np.atleast_2d(a)])


def _mp_pinv_sym(V, rel: float = 1e-30):
    evals, Q = mpmath.eigsy(V)
    top = max(abs(e) for e in evals)
    n = V.rows
    D = mpmath.zeros(n, n)
    for i in range(n):
        if abs(evals[i]) > rel * top:
            D[i, i] = 1 / evals[i]
    return Q * D * Q.T


def schur_posterior(
    s: NoiseSchedule, t: int, x_t: np.ndarray, x0: np.ndarray, dps: int = 40
) -> tuple[np.ndarray, np.ndarray]:
    """Condition the joint Gaussian of (x_{t-1}, x_t) | x0 on x_t, in extended precision.

    x_{t-1} ~ N(sqrt(abar_{t-1}) x0, C), x_t = sqrt(alpha_t) x_{t-1} + N(0, S).
    C and S come from the dense float covariances; the conditioning itself
    runs in mpmath so the oracle's own rounding sits far below test tolerances.
    Returns (mean, covariance); x arrays are (J, L) and conditioned column-wise.
    """
    with mpmath.workdps(dps):
        a = mpmath.mpf(float(s.alpha.alpha[t]))
        ab_prev = mpmath.mpf(float(s.alpha.alpha_bar[t - 1]))
        ab = mpmath.mpf(float(s.alpha.alpha_bar[t]))
        C = _mp_matrix(dense_marginal_covariance(s, t - 1))
        S = _mp_matrix(dense_step_covariance(s, t))
        cross = mpmath.sqrt(a) * C               # Cov(x_{t-1}, x_t)
        V = a * C + S                             # Var(x_t)
        gain = cross * _mp_pinv_sym(V)
        X0, XT = _mp_matrix(x0), _mp_matrix(x_t)
        mean = mpmath.sqrt(ab_prev) * X0 + gain * (XT - mpmath.sqrt(ab) * X0)
        cov = C - gain * cross.T
        mean_f = np.array(mean.tolist(), dtype=np.float64).reshape(np.shape(x0))
        cov_f = np.array(cov.tolist(), dtype=np.float64)
    return mean_f, 0.5 * (cov_f + cov_f.T)


# -- Monte Carlo forward equivalence -----------------------------------------


@dataclass
class MonteCarloResult:
    mean_abs_err: float
    mean_bound: float
    cov_rel_err: float
    passed: bool


def _compare(samples: np.ndarray, mean: np.ndarray, cov: np.ndarray, cov_tol: float) -> MonteCarloResult:
    n = samples.shape[0]
    emp_mean = samples.mean(axis=0)
    centered = samples - emp_mean
    emp_cov = centered.T @ centered / (n - 1)
    sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
    err = np.abs(emp_mean - mean)
    bound = 3.0 * sd / math.sqrt(n)
    mean_ok = bool(np.all(err <= bound + 1e-15))
    rel = float(np.linalg.norm(emp_cov - cov) / max(np.linalg.norm(cov), 1e-300))
    # worst ratio of error to bound, reported as an absolute error with its bound
    k = int(np.argmax(err - bound))
    return MonteCarloResult(float(err[k]), float(bound[k]), rel, mean_ok and rel < cov_tol)


def mc_forward_equivalence(
    s: NoiseSchedule, x0: np.ndarray, n: int = 200_000, seed: int = 0, cov_tol: float = 0.02
) -> tuple[MonteCarloResult, MonteCarloResult]:
    """Empirical law at t = T of (iterated transitions, closed-form forward) vs the dense marginal.

    x0 is a single joint vector (J,); samples carry L = 1.
    """
    from .diffusion import forward_sample, transition_sample

    rng = np.random.default_rng(seed)
    J = s.J
    x0 = np.asarray(x0, dtype=np.float64).reshape(J)
    mean = math.sqrt(s.alpha.alpha_bar[s.T]) * x0
    cov = dense_marginal_covariance(s, s.T)

    x = np.broadcast_to(x0[None, :, None], (n, J, 1)).copy()
    for t in range(1, s.T + 1):
        x = transition_sample(x, t, rng.standard_normal((n, J, 1)), s).values
    iterated = _compare(x[..., 0], mean, cov, cov_tol)

    xs = forward_sample(np.broadcast_to(x0[None, :, None], (n, J, 1)), s.T, rng.standard_normal((n, J, 1)), s).values
    closed = _compare(xs[..., 0], mean, cov, cov_tol)
    return iterated, closed


def mc_prior_covariance(s: NoiseSchedule, n: int = 200_000, seed: int = 0) -> float:
    from .diffusion import sample_prior

    rng = np.random.default_rng(seed)
    x = sample_prior((s.J, 1), s, rng.standard_normal((n, s.J, 1))).values[..., 0]
    emp = x.T @ x / n
    cov = dense_marginal_covariance(s, s.T)
    return float(np.linalg.norm(emp - cov) / np.linalg.norm(cov))


# -- textbook scalar DDPM -----------------------------------------------------


class ScalarDDPM:
    """Isotropic DDPM written from the scalar beta_t formulas."""

    def __init__(self, alphas: np.ndarray):
        # alphas indexed 1..T at positions 1..T; position 0 ignored
        self.T = len(alphas) - 1
        self.beta = [0.0] + [1.0 - float(alphas[t]) for t in range(1, self.T + 1)]
        self.abar = [1.0]
        for t in range(1, self.T + 1):
            self.abar.append(self.abar[-1] * (1.0 - self.beta[t]))

    def q_sample(self, x0, t, eps):
        return math.sqrt(self.abar[t]) * x0 + math.sqrt(1.0 - self.abar[t]) * eps

    def q_step(self, x_prev, t, eps):
        return math.sqrt(1.0 - self.beta[t]) * x_prev + math.sqrt(self.beta[t]) * eps

    def posterior_mean(self, x_t, x0, t):
        c0 = self.beta[t] * math.sqrt(self.abar[t - 1]) / (1.0 - self.abar[t])
        ct = (1.0 - self.abar[t - 1]) * math.sqrt(1.0 - self.beta[t]) / (1.0 - self.abar[t])
        return c0 * x0 + ct * x_t

    def posterior_variance(self, t):
        return self.beta[t] * (1.0 - self.abar[t - 1]) / (1.0 - self.abar[t])

    def snr(self, t):
        return self.abar[t] / (1.0 - self.abar[t])

    def loss_x0(self, pred, x0, t):
        d = np.asarray(pred) - np.asarray(x0)
        # sum over joints, mean over feature columns and batch
        return self.snr(t) * float(np.sum(d * d)) * d.shape[-2] / d.size

    def loss_noise(self, eps_pred, eps, t):
        w = self.beta[t] / self.abar[t] * (self.snr(t - 1) - self.snr(t))
        d = np.asarray(eps_pred) - np.asarray(eps)
        return w * float(np.sum(d * d)) * d.shape[-2] / d.size


# -- finite differences -------------------------------------------------------


def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Gradient of the scalar f at x, perturbing x in place one entry at a time."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm(a - b))
    den = float(np.linalg.norm(a) + np.linalg.norm(b))
    return 0.0 if den == 0.0 else num / den


# -- brute force metrics ------------------------------------------------------


def seq_dist_loop(a, b) -> float:
    F, J = len(a), len(a[0])
    total = 0.0
    for f in range(F):
        sq = 0.0
        for j in range(J):
            for c in range(3):
                d = float(a[f][j][c]) - float(b[f][j][c])
                sq += d * d
        total += math.sqrt(sq) / math.sqrt(J)
    return total / F


def frame_dist_loop(a, b) -> float:
    J = len(a)
    sq = 0.0
    for j in range(J):
        for c in range(3):
            d = float(a[j][c]) - float(b[j][c])
            sq += d * d
    return math.sqrt(sq) / math.sqrt(J)


def ade_loop(preds, gt) -> float:
    return min(seq_dist_loop(p, gt) for p in preds)


def fde_loop(preds, gt) -> float:
    return min(frame_dist_loop(p[-1], gt[-1]) for p in preds)


def mm_loop(preds, mm, final=False) -> float:
    best = math.inf
    for p in preds:
        for g in mm:
            d = frame_dist_loop(p[-1], g[-1]) if final else seq_dist_loop(p, g)
            best = min(best, d)
    return best


def apd_loop(preds) -> float:
    n = len(preds)
    if n < 2:
        return 0.0
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += seq_dist_loop(preds[i], preds[j])
    return total / (n * (n - 1))


def cmd_loop(preds, mbar) -> float:
    N, F, J = len(preds), len(preds[0]), len(preds[0][0])
    total = 0.0
    for f in range(1, F):
        m = 0.0
        for n in range(N):
            for j in range(J):
                sq = sum((float(preds[n][f][j][c]) - float(preds[n][f - 1][j][c])) ** 2 for c in range(3))
                m += math.sqrt(sq)
        m /= N * J
        total += (F - f) * abs(m - mbar)
    return total


def bone_lengths_loop(motion, edges):
    out = []
    for frame in motion:
        row = []
        for i, j in edges:
            row.append(math.sqrt(sum((float(frame[i][c]) - float(frame[j][c])) ** 2 for c in range(3))))
        out.append(row)
    return out


def body_realism_loop(preds, edges, ref):
    """(str_mean, jit_mean, str_rmse, jit_rmse) in percent."""
    s_mean = j_mean = s_rmse = j_rmse = 0.0
    count = 0
    for p in preds:
        bl = bone_lengths_loop(p, edges)
        F = len(bl)
        for k, b in enumerate(ref):
            e = [abs(b - bl[f][k]) / b for f in range(F)]
            v = [abs(bl[f + 1][k] - bl[f][k]) / b for f in range(F - 1)]
            s_mean += sum(e) / F
            s_rmse += math.sqrt(sum(x * x for x in e) / F)
            if v:
                j_mean += sum(v) / len(v)
                j_rmse += math.sqrt(sum(x * x for x in v) / len(v))
            count += 1
    return tuple(100.0 * x / count for x in (s_mean, j_mean, s_rmse, j_rmse))


def mae_loop(preds, gt, edges) -> float:
    best = math.inf
    for p in preds:
        tot = 0.0
        for f in range(len(gt)):
            fr = 0.0
            for i, j in edges:
                u = [float(p[f][j][c]) - float(p[f][i][c]) for c in range(3)]
                w = [float(gt[f][j][c]) - float(gt[f][i][c]) for c in range(3)]
                nu = math.sqrt(sum(x * x for x in u))
                nw = math.sqrt(sum(x * x for x in w))
                if nu == 0.0 or nw == 0.0:
                    fr += 90.0
                    continue
                cosang = sum(a * b for a, b in zip(u, w)) / (nu * nw)
                fr += math.degrees(math.acos(max(-1.0, min(1.0, cosang))))
            tot += fr / len(edges)
        best = min(best, tot / len(gt))
    return best
