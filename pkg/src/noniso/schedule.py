"""Per-timestep scalar and eigenvalue tables for nonisotropic diffusion.

All tables are indexed by the diffusion step ``t`` directly: row 0 holds the
noiseless state (alpha = alpha_bar = 1, no accumulated noise) and rows 1..T the
actual steps. Eigenvalue tables have shape (T + 1, J), one column per eigen-mode
of the correlation matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ValidationError
from .skeleton import CorrelationModel

LAMBDA_FLOOR = 1e-8
ALPHA_CLIP = (0.001, 0.9999)
GAMMA_KINDS = ("blend", "pure_noniso", "pure_iso", "discarded")


def _frozen(*arrays):
    for a in arrays:
        a.setflags(write=False)


def _cosine_shape(T: int, offset: float) -> np.ndarray:
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + offset) / (1.0 + offset)) * math.pi / 2.0) ** 2
    return f / f[0]


@dataclass(frozen=True)
class AlphaSchedule:
    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray


@dataclass(frozen=True)
class GammaSchedule:
    kind: str
    gamma: np.ndarray


def cosine_alpha_schedule(T: int, offset: float = 0.008) -> AlphaSchedule:
    """Improved-DDPM cosine schedule; alpha_t = abar_t / abar_{t-1}, clipped."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not offset > 0:
        raise ParameterError(f"offset must be positive, got {offset}")
    T = int(T)
    shape = _cosine_shape(T, offset)
    alpha = np.ones(T + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha[1:] = np.clip(shape[1:] / shape[:-1], *ALPHA_CLIP)
    alpha_bar = np.cumprod(alpha)
    _frozen(alpha, alpha_bar)
    return AlphaSchedule(T, alpha, alpha_bar)


def gamma_schedule(
    T: int,
    kind: str = "blend",
    *,
    alpha: AlphaSchedule | None = None,
    offset: float = 0.008,
) -> GammaSchedule:
    """Blend weight between isotropic and structured noise per step.

    blend moves from ~0 (isotropic) to ~1 (structured) as 1 - cosine shape.
    For ``discarded`` the table holds the weight alpha_t put on Sigma_N in
    Sigma_t = alpha_t Sigma_N + (1 - alpha_t) I, so ``alpha`` is required.
    """
    if kind not in GAMMA_KINDS:
        raise ParameterError(f"unknown gamma kind {kind!r}; expected one of {GAMMA_KINDS}")
    if T < 1:
        raise ParameterError(f"T must be positive, got {T}")
    if kind == "blend":
        gamma = 1.0 - _cosine_shape(T, offset)
    elif kind == "pure_noniso":
        gamma = np.ones(T + 1)
    elif kind == "pure_iso":
        gamma = np.zeros(T + 1)
    else:
        if alpha is None or alpha.T != T:
            raise ParameterError("the discarded schedule needs the matching alpha schedule")
        gamma = alpha.alpha.copy()
    gamma[0] = 0.0
    _frozen(gamma)
    return GammaSchedule(kind, gamma)


@dataclass(frozen=True)
class NoiseSchedule:
    correlation: CorrelationModel
    alpha: AlphaSchedule
    gamma: GammaSchedule
    gamma_tilde: np.ndarray        # coefficient series of the structured part of Lambda_bar
    lambda_t: np.ndarray           # (T+1, J) eigenvalues of the step covariance
    lambda_bar: np.ndarray         # (T+1, J) eigenvalues of the marginal covariance
    lambda_q: np.ndarray           # (T+1, J) posterior eigenvalues, row 1 is zero
    coef_xt: np.ndarray            # (T+1, J) posterior mean weight on rotated x_t
    coef_x0: np.ndarray            # (T+1, J) posterior mean weight on rotated x_0
    snr: np.ndarray                # (T+1, J) alpha_bar / floored Lambda_bar
    loss_weight_x0: np.ndarray     # (T+1, J)
    loss_weight_noise: np.ndarray  # (T+1, J), row 0 unused
    degenerate: np.ndarray = field(repr=False)  # (T+1, J) bool, Lambda_bar below floor

    @property
    def T(self) -> int:
        return self.alpha.T

    @property
    def J(self) -> int:
        return self.correlation.order

    @property
    def kind(self) -> str:
        return self.gamma.kind

    @property
    def U(self) -> np.ndarray:
        return self.correlation.eigvecs

    def step_coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """(a_t, b_t) with Lambda_t = a_t * Lambda_N + b_t."""
        a, g = self.alpha.alpha, self.gamma.gamma
        if self.kind == "discarded":
            return g.copy(), 1.0 - a
        return (1.0 - a) * g, (1.0 - a) * (1.0 - g)


def _gamma_tilde(alpha: np.ndarray, weight_n: np.ndarray) -> np.ndarray:
    gt = np.zeros_like(alpha)
    for t in range(1, len(alpha)):
        gt[t] = weight_n[t] + alpha[t] * gt[t - 1]
    return gt


def gamma_tilde_closed_sum(alpha: AlphaSchedule, weight_n: np.ndarray) -> np.ndarray:
    """alpha_bar_t * sum_{i<=t} w_i / alpha_bar_i, the unrolled coefficient series."""
    ab = alpha.alpha_bar
    out = np.zeros(alpha.T + 1)
    out[1:] = ab[1:] * np.cumsum(weight_n[1:] / ab[1:])
    return out


def build_schedule(correlation: CorrelationModel, alpha: AlphaSchedule, gamma: GammaSchedule) -> NoiseSchedule:
    T = alpha.T
    if len(gamma.gamma) != T + 1:
        raise ValidationError(f"gamma table has {len(gamma.gamma) - 1} steps, alpha has {T}")
    lam_n = np.asarray(correlation.eigvals, dtype=np.float64)
    if np.any(lam_n < 0) or not np.all(np.isfinite(lam_n)):
        raise ValidationError("correlation eigenvalues must be finite and nonnegative")
    a, ab, g = alpha.alpha, alpha.alpha_bar, gamma.gamma

    if gamma.kind == "discarded":
        step_n, step_i = g.copy(), 1.0 - a
        step_n[0] = step_i[0] = 0.0
        gt = _gamma_tilde(a, step_n)
        bar_n, bar_i = gt, 1.0 - ab
    else:
        # Lambda_t = (1-a) g Lambda_N + (1-a)(1-g); Lambda_bar = gt (Lambda_N - 1) + (1 - abar)
        gbar = (1.0 - a) * g
        step_n, step_i = gbar, (1.0 - a) * (1.0 - g)
        gt = _gamma_tilde(a, gbar)
        # (1 - abar) - gamma_tilde accumulated as a positive series: no cancellation
        bar_n, bar_i = gt, _gamma_tilde(a, step_i)

    lam_t = step_n[:, None] * lam_n[None, :] + step_i[:, None]
    lam_bar = bar_n[:, None] * lam_n[None, :] + bar_i[:, None]
    lam_t[0] = 0.0
    lam_bar[0] = 0.0
    lam_t = np.maximum(lam_t, 0.0)
    lam_bar = np.maximum(lam_bar, 0.0)

    degenerate = lam_bar < LAMBDA_FLOOR
    degenerate[0] = False
    safe_bar = np.maximum(lam_bar, LAMBDA_FLOOR)

    ratio_prev = np.zeros_like(lam_bar)
    ratio_step = np.zeros_like(lam_bar)
    ratio_prev[1:] = lam_bar[:-1] / safe_bar[1:]
    ratio_step[1:] = lam_t[1:] / safe_bar[1:]
    # zero modes: take the lambda -> 0 limit of the ratios (constant parts vanish)
    for t in range(1, T + 1):
        d = degenerate[t]
        if d.any() and bar_n[t] > 0:
            ratio_prev[t, d] = bar_n[t - 1] / bar_n[t]
            ratio_step[t, d] = step_n[t] / bar_n[t]

    lam_q = np.zeros_like(lam_bar)
    lam_q[2:] = lam_t[2:] * ratio_prev[2:]
    coef_xt = np.zeros_like(lam_bar)
    coef_x0 = np.zeros_like(lam_bar)
    coef_xt[1:] = np.sqrt(a[1:])[:, None] * ratio_prev[1:]
    coef_x0[1:] = np.sqrt(ab[:-1])[:, None] * ratio_step[1:]

    snr = ab[:, None] / safe_bar
    w_x0 = snr.copy()
    w_noise = np.zeros_like(lam_bar)
    w_noise[1:] = (lam_t[1:] / ab[1:, None]) * (snr[:-1] - snr[1:])

    arrays = (gt, lam_t, lam_bar, lam_q, coef_xt, coef_x0, snr, w_x0, w_noise, degenerate)
    _frozen(*arrays)
    return NoiseSchedule(correlation, alpha, gamma, *arrays)


def make_schedule(correlation: CorrelationModel, T: int = 10, kind: str = "blend", offset: float = 0.008) -> NoiseSchedule:
    alpha = cosine_alpha_schedule(T, offset)
    return build_schedule(correlation, alpha, gamma_schedule(T, kind, alpha=alpha, offset=offset))


# -- validation ---------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    max_violation: float
    worst_t: int | None
    passed: bool

    def label(self) -> str:
        return self.name if self.worst_t is None else f"{self.name}, t={self.worst_t}"


@dataclass
class ValidationReport:
    checks: list[CheckResult]
    tol: float
    warnings: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[str]:
        return [c.label() for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "checks": [
                {"name": c.name, "max_violation": c.max_violation, "worst_t": c.worst_t, "passed": c.passed}
                for c in self.checks
            ],
            "warnings": list(self.warnings),
        }


def _worst(per_t: np.ndarray, ts: np.ndarray, tol: float, name: str) -> CheckResult:
    if per_t.size == 0:
        return CheckResult(name, 0.0, None, True)
    k = int(np.argmax(per_t))
    v = float(per_t[k])
    return CheckResult(name, v, int(ts[k]) if v > tol else None, bool(v < tol))


def validate_schedule(s: NoiseSchedule, tol: float = 1e-10) -> ValidationReport:
    """Mechanically re-check the algebraic identities the tables must satisfy."""
    T = s.T
    a, ab = s.alpha.alpha, s.alpha.alpha_bar
    ts = np.arange(1, T + 1)
    checks: list[CheckResult] = []
    warnings: list[str] = []

    rec = np.abs(s.lambda_bar[1:] - (a[1:, None] * s.lambda_bar[:-1] + s.lambda_t[1:])).max(axis=1)
    checks.append(_worst(rec, ts, tol, "lambda_bar recursion"))

    step_n, _ = s.step_coefficients()
    step_n = step_n.copy()
    step_n[0] = 0.0
    closed = gamma_tilde_closed_sum(s.alpha, step_n)
    checks.append(_worst(np.abs(s.gamma_tilde[1:] - closed[1:]), ts, tol, "gamma_tilde closed sum"))

    recur = np.abs(s.gamma_tilde[1:] - (step_n[1:] + a[1:] * s.gamma_tilde[:-1]))
    checks.append(_worst(recur, ts, tol, "gamma_tilde recursion"))

    ts2 = np.arange(2, T + 1)
    if T >= 2:
        formula = s.lambda_t[2:] * s.lambda_bar[1:-1] / np.maximum(s.lambda_bar[2:], LAMBDA_FLOOR)
        live = ~s.degenerate[2:]
        diff = np.where(live, np.abs(s.lambda_q[2:] - formula), 0.0).max(axis=1)
        checks.append(_worst(diff, ts2, tol, "lambda_q formula"))
        neg = np.where(live, np.maximum(-s.lambda_q[2:], 0.0), 0.0).max(axis=1)
        checks.append(_worst(neg, ts2, tol, "lambda_q positivity"))
        zero = live & (s.lambda_q[2:] == 0.0)
        if zero.any():
            rows, cols = np.nonzero(zero)
            warnings.append(f"lambda_q exactly zero at t={int(ts2[rows[0]])}, mode {int(cols[0])}")
    else:
        checks.append(CheckResult("lambda_q formula", 0.0, None, True))
        checks.append(CheckResult("lambda_q positivity", 0.0, None, True))

    mono = np.maximum(ab[1:] - ab[:-1], 0.0)
    checks.append(_worst(mono, ts, tol, "alpha_bar monotonicity"))

    snr_up = np.maximum(s.snr[1:] - s.snr[:-1], 0.0).max(axis=1)
    if np.any(snr_up > 0):
        warnings.append(f"SNR not strictly decreasing at t={int(ts[np.argmax(snr_up)])}")
    return ValidationReport(checks, tol, warnings)


# -- export ---------------------------------------------------------------------


def schedule_table(s: NoiseSchedule) -> tuple[list[str], np.ndarray]:
    J = s.J
    cols = ["t", "alpha", "alpha_bar", "gamma", "gamma_tilde"]
    cols += [f"lambda_t_{k}" for k in range(J)]
    cols += [f"lambda_bar_{k}" for k in range(J)]
    cols += [f"lambda_q_{k}" for k in range(J)]
    rows = np.column_stack(
        [
            np.arange(s.T + 1),
            s.alpha.alpha,
            s.alpha.alpha_bar,
            s.gamma.gamma,
            s.gamma_tilde,
            s.lambda_t,
            s.lambda_bar,
            s.lambda_q,
        ]
    )
    return cols, rows


def write_schedule_csv(s: NoiseSchedule, path) -> None:
    cols, rows = schedule_table(s)
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join([str(int(r[0]))] + [repr(float(v)) for v in r[1:]]) + "\n")
