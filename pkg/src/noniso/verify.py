"""Oracle suites shared by the ``verify`` command and the test-suite.

Every suite returns a SuiteResult whose checks carry the largest violation
seen and the tolerance it was held to.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diffusion as df
from . import oracles
from .schedule import GAMMA_KINDS, make_schedule, validate_schedule
from .skeleton import Skeleton, correlation_for_skeleton


@dataclass
class Check:
    name: str
    violation: float
    tol: float
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "max_violation": self.violation, "tol": self.tol, "passed": self.passed, "detail": self.detail}


@dataclass
class SuiteResult:
    suite: str
    checks: list[Check] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, violation: float, tol: float, detail: str = "", *, passed: bool | None = None) -> Check:
        ok = bool(violation <= tol) if passed is None else passed
        c = Check(name, float(violation), float(tol), ok, detail)
        self.checks.append(c)
        return c

    def to_dict(self) -> dict:
        return {"suite": self.suite, "passed": self.passed, "seconds": round(self.seconds, 3), "checks": [c.to_dict() for c in self.checks]}


def chain_skeleton(J: int) -> Skeleton:
    return Skeleton([f"j{i}" for i in range(J)], [(i, i + 1) for i in range(J - 1)], [1.0] * (J - 1))


def random_skeleton(rng: np.random.Generator, J: int, p_extra: float = 0.3) -> Skeleton:
    """Random connected simple graph: a random tree plus extra edges."""
    edges = [(int(rng.integers(0, k)), k) for k in range(1, J)]
    have = {tuple(sorted(e)) for e in edges}
    for i in range(J):
        for j in range(i + 1, J):
            if (i, j) not in have and rng.random() < p_extra:
                edges.append((i, j))
    return Skeleton([f"j{i}" for i in range(J)], edges, [1.0] * len(edges))


def _timed(fn):
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


@_timed
def forward_suite(samples: int = 200_000, seed: int = 0, sizes=(2, 3, 5), T: int = 10, cov_tol: float = 0.02) -> SuiteResult:
    """Iterated transitions and the closed-form marginal against the dense covariance, all kinds."""
    res = SuiteResult("forward")
    rng = np.random.default_rng(seed)
    for J in sizes:
        corr = correlation_for_skeleton(chain_skeleton(J))
        for kind in GAMMA_KINDS:
            s = make_schedule(corr, T=T, kind=kind)
            x0 = rng.uniform(-1, 1, J)
            it, cl = oracles.mc_forward_equivalence(s, x0, n=samples, seed=int(rng.integers(2**31)), cov_tol=cov_tol)
            for route, r in (("iterated", it), ("closed", cl)):
                tag = f"J={J} {kind} {route}"
                res.add(f"mean {tag}", r.mean_abs_err, r.mean_bound)
                res.add(f"cov {tag}", r.cov_rel_err, cov_tol)
    return res


@_timed
def prior_suite(samples: int = 200_000, seed: int = 0, cov_tol: float = 0.02) -> SuiteResult:
    res = SuiteResult("prior")
    for J in (3, 5):
        s = make_schedule(correlation_for_skeleton(chain_skeleton(J)), kind="blend")
        res.add(f"prior cov J={J}", oracles.mc_prior_covariance(s, samples, seed), cov_tol)
    return res


@_timed
def posterior_suite(configs: int = 100, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    """Closed-form posterior against extended-precision Schur conditioning.

    x0 is random; x_t is drawn from the forward law of the same schedule.
    """
    res = SuiteResult("posterior")
    rng = np.random.default_rng(seed)
    worst_m = worst_c = 0.0
    where_m = where_c = ""
    for c in range(configs):
        J = int(rng.integers(2, 6))
        kind = GAMMA_KINDS[c % len(GAMMA_KINDS)]
        base = ("adjacency", "closure")[int(rng.integers(2))]
        T = int(rng.integers(2, 21))
        s = make_schedule(correlation_for_skeleton(random_skeleton(rng, J), base), T=T, kind=kind)
        t = int(rng.integers(2, T + 1))
        L = int(rng.integers(1, 4))
        x0 = rng.standard_normal((J, L))
        xt = df.forward_sample(x0, t, rng.standard_normal((J, L)), s).values
        post = df.posterior_params(xt, x0, s, t)
        mean, cov = oracles.schur_posterior(s, t, xt, x0)
        cov_q = (s.U * post.lambda_q) @ s.U.T
        em = float(np.abs(post.mean - mean).max())
        ec = float(np.abs(cov_q - cov).max())
        if em >= worst_m:
            worst_m, where_m = em, f"config {c}: {kind} J={J} T={T} t={t}"
        if ec >= worst_c:
            worst_c, where_c = ec, f"config {c}: {kind} J={J} T={T} t={t}"
    res.add("posterior mean", worst_m, tol, where_m)
    res.add("posterior covariance", worst_c, tol, where_c)
    # noiseless x_t collapses the mean onto sqrt(abar_{t-1}) x0
    s = make_schedule(correlation_for_skeleton(chain_skeleton(4)), kind="blend")
    x0 = rng.standard_normal((4, 3))
    worst = 0.0
    for t in range(2, s.T + 1):
        m = df.posterior_params(np.sqrt(s.alpha.alpha_bar[t]) * x0, x0, s, t).mean
        worst = max(worst, float(np.abs(m - np.sqrt(s.alpha.alpha_bar[t - 1]) * x0).max()))
    res.add("noiseless x_t mean", worst, tol)
    return res


@_timed
def isotropic_suite(seed: int = 0, tol: float = 1e-12, J: int = 4, L: int = 3, T: int = 10) -> SuiteResult:
    """gamma = 0 against a scalar textbook DDPM: forward, posterior, both losses."""
    res = SuiteResult("isotropic")
    rng = np.random.default_rng(seed)
    s = make_schedule(correlation_for_skeleton(chain_skeleton(J)), T=T, kind="pure_iso")
    ref = oracles.ScalarDDPM(s.alpha.alpha)
    worst = {k: 0.0 for k in ("forward mean", "forward variance", "transition", "posterior mean",
                              "posterior variance", "loss_x0", "loss_noise", "prior")}
    for t in range(1, T + 1):
        x0 = rng.standard_normal((J, L))
        eps = rng.standard_normal((J, L))
        # rotation by U is an orthogonal change of noise variable; compare in the rotated noise
        eps_rot = s.U @ eps
        xt = df.forward_sample(x0, t, eps, s).values
        worst["forward mean"] = max(worst["forward mean"], float(np.abs(df.forward_sample(x0, t, 0 * eps, s).values - ref.q_sample(x0, t, 0.0)).max()))
        worst["forward variance"] = max(worst["forward variance"], float(np.abs(xt - ref.q_sample(x0, t, eps_rot)).max()))
        worst["forward variance"] = max(worst["forward variance"], float(np.abs(s.lambda_bar[t] - (1 - ref.abar[t])).max()))
        xp = rng.standard_normal((J, L))
        worst["transition"] = max(worst["transition"], float(np.abs(df.transition_sample(xp, t, eps, s).values - ref.q_step(xp, t, eps_rot)).max()))
        if t >= 2:
            post = df.posterior_params(xt, x0, s, t)
            worst["posterior mean"] = max(worst["posterior mean"], float(np.abs(post.mean - ref.posterior_mean(xt, x0, t)).max()))
            worst["posterior variance"] = max(worst["posterior variance"], float(np.abs(post.lambda_q - ref.posterior_variance(t)).max()))
        pred = rng.standard_normal((J, L))
        lx = df.loss_x0(pred, x0, t, s)
        worst["loss_x0"] = max(worst["loss_x0"], abs(lx - ref.loss_x0(pred, x0, t)) / max(1.0, abs(lx)))
        if t >= 2:
            ln = df.loss_noise(pred, eps, t, s)
            worst["loss_noise"] = max(worst["loss_noise"], abs(ln - ref.loss_noise(pred, eps, t)) / max(1.0, abs(ln)))
    eps = rng.standard_normal((J, L))
    prior = df.sample_prior((J, L), s, eps).values
    worst["prior"] = float(np.abs(prior - np.sqrt(1 - ref.abar[T]) * (s.U @ eps)).max())
    for k, v in worst.items():
        res.add(k, v, tol)
    return res


@_timed
def schedule_suite(Ts=(1, 10, 100), tol: float = 1e-12) -> SuiteResult:
    """Recursion and closed-sum identities of every schedule kind."""
    res = SuiteResult("schedule")
    for J in (3, 7):
        corr = correlation_for_skeleton(chain_skeleton(J))
        for T in Ts:
            for kind in GAMMA_KINDS:
                rep = validate_schedule(make_schedule(corr, T=T, kind=kind), tol=tol)
                for c in rep.checks:
                    res.add(f"{c.name} J={J} T={T} {kind}", c.max_violation, tol,
                            f"worst t={c.worst_t}" if c.worst_t is not None else "", passed=c.passed)
    return res


SUITES = {
    "forward": forward_suite,
    "posterior": posterior_suite,
    "isotropic": isotropic_suite,
    "schedule": schedule_suite,
}


# -- gradients ------------------------------------------------------------------


def _randomise(module, rng, scale=0.5):
    """Non-trivial weights everywhere, so zero-initialised projections are exercised too."""
    for _, m, k in module.named_parameters():
        p = m.params[k]
        p[...] = rng.uniform(-scale, scale, p.shape) + (1.0 if k == "gain" else 0.0)


def gradient_error(module, loss_fn, inputs: list[np.ndarray], h: float = 1e-4) -> tuple[float, str]:
    """Worst norm-wise relative error over parameters and inputs.

    ``loss_fn()`` must return (loss, backward) where backward() runs the
    analytic pass and returns the input gradients in the order of ``inputs``.
    """
    module.zero_grad()
    _, backward = loss_fn()
    d_inputs = backward()
    worst, where = 0.0, ""
    for name, m, k in module.named_parameters():
        num = oracles.central_difference(lambda: loss_fn()[0], m.params[k], h)
        e = oracles.relative_error(m.grads[k], num)
        if e >= worst:
            worst, where = e, name
    for i, (x, dx) in enumerate(zip(inputs, d_inputs)):
        num = oracles.central_difference(lambda: loss_fn()[0], x, h)
        e = oracles.relative_error(dx, num)
        if e >= worst:
            worst, where = e, f"input {i}"
    return worst, where


def _projection_loss(forward, backward, rng, out_shape):
    R = rng.standard_normal(out_shape)

    def loss():
        y, cache = forward()
        return float(np.sum(R * y)), lambda: backward(R, cache)

    return loss


@_timed
def gradients_suite(seeds: int = 20, seed: int = 0, tol: float = 1e-5, models: bool = True) -> SuiteResult:
    """Analytic backward passes against central differences (h = 1e-4, float64)."""
    from .nn import layers as ly
    from .nn.models import Autoencoder, Denoiser

    res = SuiteResult("gradients")
    worst: dict[str, tuple[float, str]] = {}

    def note(key, err_where):
        if key not in worst or err_where[0] >= worst[key][0]:
            worst[key] = err_where

    for k in range(seeds):
        rng = np.random.default_rng([seed, k])
        J = int(rng.integers(1, 5))
        B = int(rng.integers(1, 3))
        # width 1 makes RMS a sign function whose true derivative (~1e-8) sits below FD rounding
        din, dout = int(rng.integers(2, 6)), int(rng.integers(1, 6))
        adj = None if J == 1 else (rng.random((J, J)) < 0.5).astype(float)

        lin = ly.TGLinear(J, din, dout, rng, adjacency=adj)
        _randomise(lin, rng)
        x = rng.standard_normal((B, J, din))
        note("tg_linear", gradient_error(lin, _projection_loss(lambda: lin.forward(x), lambda d, c: [lin.backward(d, c)], rng, (B, J, dout)), [x]))

        rms = ly.RMSNorm(din)
        _randomise(rms, rng)
        note("rms_norm", gradient_error(rms, _projection_loss(lambda: rms.forward(x), lambda d, c: [rms.backward(d, c)], rng, x.shape), [x]))

        act = ly.Module()
        note("silu", gradient_error(act, _projection_loss(lambda: ly.SiLU.forward(x), lambda d, c: [ly.SiLU.backward(d, c)], rng, x.shape), [x]))

        heads = int(rng.integers(1, 3))
        d = heads * int(rng.integers(1, 4))
        d = max(d, 2)
        xa = rng.standard_normal((B, J, d))
        att = ly.TGAttention(J, d, heads, rng, adjacency=adj)
        _randomise(att, rng)
        note("tg_attention", gradient_error(att, _projection_loss(lambda: att.forward(xa), lambda g, c: [att.backward(g, c)], rng, xa.shape), [xa]))

        blk = ly.TGBlock(J, d, heads, rng, adjacency=adj)
        _randomise(blk, rng)
        note("tg_block", gradient_error(blk, _projection_loss(lambda: blk.forward(xa), lambda g, c: [blk.backward(g, c)], rng, xa.shape), [xa]))

    # both losses
    for k in range(seeds):
        rng = np.random.default_rng([seed, 1000 + k])
        J = int(rng.integers(2, 6))
        s = make_schedule(correlation_for_skeleton(random_skeleton(rng, J)), kind=GAMMA_KINDS[k % 4])
        a, b = rng.standard_normal((2, J, 3)), rng.standard_normal((2, J, 3))
        t = int(rng.integers(1, s.T + 1))
        for name, f, g in (("loss_x0", df.loss_x0, df.loss_x0_grad), ("loss_noise", df.loss_noise, df.loss_noise_grad)):
            num = oracles.central_difference(lambda: f(a, b, t, s), a)
            note(name, (oracles.relative_error(g(a, b, t, s), num), f"t={t}"))

    if models:
        for k in range(2):
            rng = np.random.default_rng([seed, 2000 + k])
            J, L = 4, 8
            s = make_schedule(correlation_for_skeleton(chain_skeleton(J)), kind="blend")
            net = Denoiser(J, L, s.T, rng, width=8, heads=2, blocks=2, adjacency=np.eye(J, k=1) + np.eye(J, k=-1))
            _randomise(net, rng, 0.3)
            xt, cond, x0 = (rng.standard_normal((2, J, L)) for _ in range(3))
            t = int(rng.integers(1, s.T + 1))

            def dn_loss():
                y, cache = net.forward(xt, cond, t)
                return df.loss_x0(y, x0, t, s), lambda: list(net.backward(df.loss_x0_grad(y, x0, t, s), cache))

            note("denoiser", gradient_error(net, dn_loss, [xt, cond]))

            F = 5
            ae = Autoencoder(J, 3, F, rng, enc_width=6, dec_width=6)
            # O(1) weights keep first-layer gradients well above the FD rounding floor
            _randomise(ae, rng, 1.0)
            motion = rng.standard_normal((2, 4, J, 3))
            tail = rng.standard_normal((2, 2, J, 3))
            target = rng.standard_normal((2, F, J, 3))

            def ae_loss():
                z, ce = ae.encoder.forward(motion)
                y, cd = ae.decoder.forward(z, tail)
                diff = y - target
                loss = float(np.abs(diff).mean())

                def back():
                    g = np.sign(diff) / diff.size
                    dz, dtail = ae.decoder.backward(g, cd)
                    return [ae.encoder.backward(dz, ce), dtail]

                return loss, back

            note("autoencoder", gradient_error(ae, ae_loss, [motion, tail]))

    for key, (err, where) in worst.items():
        res.add(key, err, tol, where)
    return res


SUITES["gradients"] = gradients_suite


# -- metrics --------------------------------------------------------------------


def _zero_velocity_checks(res: SuiteResult, seed: int, tol: float):
    """Frozen-pose predictor: APD and jitter vanish on any data; stretch vanishes on rigid data."""
    from .data import DataConfig, make_dataset
    from .metrics import evaluate_predictions, zero_velocity_predictions

    configs = [
        ("clean J=7 3 modes", DataConfig(noise_std=0.0, n_train=0, n_val=0, n_test=20)),
        ("clean J=4 unimodal", DataConfig(joints=4, bone_lengths=[0.5, 0.4, 0.3], num_modes=1, noise_std=0.0,
                                          n_train=0, n_val=0, n_test=20)),
        ("noisy J=7 3 modes", DataConfig(n_train=0, n_val=0, n_test=20)),
    ]
    for name, cfg in configs:
        ds = make_dataset(cfg, seed)
        zv = zero_velocity_predictions(ds.test.past, 5, cfg.future)
        rep = evaluate_predictions(zv, ds.test, ds.skeleton, 0.1)
        res.add(f"zero-velocity apd {name}", rep.apd, 0.0, "exact", passed=rep.apd == 0.0)
        jit = max(rep.jit_mean, rep.jit_rmse)
        res.add(f"zero-velocity jit {name}", jit, 0.0, "exact", passed=jit == 0.0)
        if cfg.noise_std == 0.0:
            # identical up to forward-kinematics rounding, 0.00 at reported precision
            res.add(f"zero-velocity str {name}", rep.str_mean, tol * 100, f"str_rmse={rep.str_rmse:.3g}",
                    passed=round(rep.str_mean, 2) == 0.0 and rep.str_mean < max(tol * 100, 1e-9))


@_timed
def metrics_suite(instances: int = 60, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    """Vectorised metric kernels against brute-force loops, plus the zero-velocity pattern."""
    from . import metrics as mt
    from .data import make_chain_skeleton

    res = SuiteResult("metrics")
    rng = np.random.default_rng(seed)
    worst: dict[str, tuple[float, str]] = {}
    for i in range(instances):
        N, F, J = int(rng.integers(1, 9)), int(rng.integers(2, 17)), int(rng.integers(2, 8))
        sk = make_chain_skeleton(J, rng.uniform(0.2, 1.0, size=J - 1))
        preds = rng.normal(size=(N, F, J, 3))
        gt = rng.normal(size=(F, J, 3))
        mm = rng.normal(size=(int(rng.integers(1, 5)), F, J, 3))
        mbar = float(rng.uniform(0, 1))
        br = mt.body_realism(preds, sk)
        ref = oracles.body_realism_loop(preds, sk.edges, sk.bone_lengths)
        pairs = {
            "ade": (mt.ade(preds, gt), oracles.ade_loop(preds, gt)),
            "fde": (mt.fde(preds, gt), oracles.fde_loop(preds, gt)),
            "mmade": (mt.mmade(preds, mm), oracles.mm_loop(preds, mm)),
            "mmfde": (mt.mmfde(preds, mm), oracles.mm_loop(preds, mm, final=True)),
            "apd": (mt.apd(preds), oracles.apd_loop(preds)),
            "cmd": (mt.cmd(preds, mbar), oracles.cmd_loop(preds, mbar)),
            "str_mean": (br.str_mean, ref[0]),
            "jit_mean": (br.jit_mean, ref[1]),
            "str_rmse": (br.str_rmse, ref[2]),
            "jit_rmse": (br.jit_rmse, ref[3]),
            "mae": (mt.mae_angle(preds, gt, sk).degrees, oracles.mae_loop(preds, gt, sk.edges)),
        }
        for k, (a, b) in pairs.items():
            err = abs(a - b)
            if k not in worst or err > worst[k][0]:
                worst[k] = (err, f"instance {i} N={N} F={F} J={J}")
    for k, (err, where) in worst.items():
        res.add(f"{k} vs loop", err, tol, where)
    _zero_velocity_checks(res, seed, tol)
    return res


SUITES["metrics"] = metrics_suite
