"""Two-stage training (motion autoencoder, then latent diffusion), prediction and evaluation.

Stage one learns an encoder that summarises a motion of any length into a
(J, L) latent and a decoder that rebuilds the future from that latent and the
last two observed frames. Stage two freezes the autoencoder and trains a
denoiser in latent space, conditioned on the encoded past. Each step rolls k
candidates from the prior down to a random timestep and trains only the
candidate whose decoded motion is closest to the ground truth.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffusion as df
from .data import DataConfig, Dataset, DatasetSplit, make_dataset, save_dataset, save_predictions
from .errors import NonisoError, ParameterError, TrainingError, ValidationError
from .metrics import MetricsReport, delta_apd, evaluate_predictions, validity_curve, write_curve_csv, \
    zero_velocity_predictions
from .nn import EMA, Adam, Autoencoder, Denoiser
from .nn.checkpoint import encode_tensors, load_tensors, save_tensors
from .schedule import GAMMA_KINDS, NoiseSchedule, make_schedule
from .skeleton import build_adjacency, correlation_for_skeleton

log = logging.getLogger(__name__)

ARGMIN_SPACES = ("motion", "latent")
CURVE_THRESHOLDS = tuple(np.round(np.linspace(0.0, 0.3, 31), 4))


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    latent: int = 8
    T: int = 10
    kind: str = "blend"
    correlation: str = "adjacency"
    offset: float = 0.008
    lr: float = 0.005
    lr_final: float = 0.05          # cosine decay to lr * lr_final over each stage
    ema_decay: float = 0.98
    batch: int = 16
    # autoencoder
    ae_epochs: int = 60
    curriculum_epochs: int = 10
    enc_width: int = 32
    dec_width: int = 64
    # denoiser
    epochs: int = 8
    k: int = 10
    argmin: str = "motion"
    width: int = 32
    heads: int = 2
    blocks: int = 2
    # evaluation
    n_predict: int = 50
    delta: float = 0.1
    seed: int = 0

    def validate(self):
        self.data.validate()
        if self.k < 1:
            raise ValidationError("k must be >= 1", field="k")
        if self.epochs < 1 or self.ae_epochs < 1:
            raise ValidationError("epochs must be >= 1", field="epochs")
        if self.curriculum_epochs < 0:
            raise ValidationError("curriculum_epochs must be >= 0", field="curriculum_epochs")
        if self.kind not in GAMMA_KINDS:
            raise ValidationError(f"unknown schedule kind {self.kind!r}", field="kind")
        if self.argmin not in ARGMIN_SPACES:
            raise ValidationError(f"argmin must be one of {ARGMIN_SPACES}", field="argmin")
        if self.latent < 1 or self.T < 1 or self.batch < 1:
            raise ValidationError("latent, T and batch must be positive")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValidationError("ema_decay must lie in [0, 1)", field="ema_decay")
        if not (0.0 <= self.lr_final <= 1.0):
            raise ValidationError("lr_final must lie in [0, 1]", field="lr_final")
        if not self.lr > 0:
            raise ValidationError("lr must be positive", field="lr")
        if self.width % self.heads:
            raise ValidationError("width must be divisible by heads", field="width")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ValidationError(f"unknown config keys {extra}")
        if "data" in d and isinstance(d["data"], dict):
            d["data"] = DataConfig.from_dict(d["data"])
        return cls(**d)

    def with_(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)


def load_config(path) -> TrainConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config line {exc.lineno}: {exc.msg}", line=exc.lineno) from exc
    return TrainConfig.from_dict(raw).validate()


def _stream(seed: int, *tag) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *tag]))


def state_hash(state: dict) -> str:
    return hashlib.sha256(encode_tensors(state)).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- stage one -------------------------------------------------------------------------


def curriculum_max_length(epoch: int, F: int, ramp_epochs: int) -> int:
    """Upper bound of the sampled motion length, raised from 1 to F by a cosine ramp."""
    if ramp_epochs <= 0:
        return F
    r = min(epoch / ramp_epochs, 1.0)
    return 1 + int(round((F - 1) * 0.5 * (1.0 - np.cos(np.pi * r))))


def cosine_lr(step: int, total: int, lr: float, final: float) -> float:
    r = min(step / max(total, 1), 1.0)
    return lr * (final + (1.0 - final) * 0.5 * (1.0 + np.cos(np.pi * r)))


def build_autoencoder(cfg: TrainConfig, rng=None) -> Autoencoder:
    sk = cfg.data.skeleton()
    rng = rng if rng is not None else _stream(cfg.seed, 1)
    return Autoencoder(sk.num_joints, cfg.latent, cfg.data.future, rng, enc_width=cfg.enc_width,
                       dec_width=cfg.dec_width, adjacency=build_adjacency(sk))


@dataclass
class AEResult:
    model: Autoencoder           # carries the EMA weights
    losses: list                 # mean train L1 per epoch
    lengths: list                # F~_max per epoch


def _l1(y, target):
    d = y - target
    return float(np.abs(d).mean()), np.sign(d) / d.size


def train_autoencoder(cfg: TrainConfig, split: DatasetSplit, *, epochs: int | None = None) -> AEResult:
    """L1 reconstruction of train futures with curricular length sampling and EMA weights."""
    epochs = cfg.ae_epochs if epochs is None else epochs
    rng = _stream(cfg.seed, 2)
    ae = build_autoencoder(cfg)
    opt = Adam(ae, lr=cfg.lr)
    ema = EMA(ae, cfg.ema_decay)
    F = cfg.data.future
    n = len(split)
    if n == 0:
        raise ValidationError("empty training split")
    tails = split.past[:, -2:]
    losses, lengths = [], []
    per_epoch = -(-n // cfg.batch)
    step = 0
    for ep in range(epochs):
        fmax = curriculum_max_length(ep, F, cfg.curriculum_epochs)
        order = rng.permutation(n)
        tot, steps = 0.0, 0
        for b0 in range(0, n, cfg.batch):
            idx = order[b0:b0 + cfg.batch]
            fl = int(rng.integers(1, fmax + 1))
            target = split.future[idx, :fl]
            ae.zero_grad()
            z, ce = ae.encoder.forward(target)
            y, cd = ae.decoder.forward(z, tails[idx])
            loss, g = _l1(y[:, :fl], target)
            if not np.isfinite(loss):
                raise TrainingError(f"autoencoder loss not finite at epoch {ep} step {steps}")
            dy = np.zeros_like(y)
            dy[:, :fl] = g
            dz, _ = ae.decoder.backward(dy, cd)
            ae.encoder.backward(dz, ce)
            opt.lr = cosine_lr(step, epochs * per_epoch, cfg.lr, cfg.lr_final)
            step += 1
            if not opt.step():
                raise TrainingError(f"autoencoder gradient not finite at epoch {ep} step {steps}")
            ema.update(ae)
            tot += loss
            steps += 1
        losses.append(tot / steps)
        lengths.append(fmax)
        log.info("ae epoch %d  len<=%d  L1 %.5f", ep, fmax, losses[-1])
    ema.copy_to(ae)
    return AEResult(ae, losses, lengths)


def reconstruction_l1(ae: Autoencoder, split: DatasetSplit, clean: bool = True) -> float:
    target = split.future_clean if clean else split.future
    y = ae.decode(ae.encode(split.future), split.past[:, -2:])
    return float(np.abs(y - target).mean())


# -- stage two -------------------------------------------------------------------------


@dataclass
class LatentStats:
    """Per-column affine standardisation shared by all joints (commutes with joint rotations)."""
    x_mean: np.ndarray
    x_std: np.ndarray
    c_mean: np.ndarray
    c_std: np.ndarray

    @staticmethod
    def _fit(z):
        flat = z.reshape(-1, z.shape[-1])
        return flat.mean(axis=0), np.maximum(flat.std(axis=0), 1e-6)

    @classmethod
    def fit(cls, z_future, z_past) -> "LatentStats":
        return cls(*cls._fit(z_future), *cls._fit(z_past))

    def to_tensors(self) -> dict:
        return {"stats.x_mean": self.x_mean, "stats.x_std": self.x_std,
                "stats.c_mean": self.c_mean, "stats.c_std": self.c_std}

    @classmethod
    def from_tensors(cls, t: dict) -> "LatentStats":
        return cls(t["stats.x_mean"], t["stats.x_std"], t["stats.c_mean"], t["stats.c_std"])


def build_schedule_for(cfg: TrainConfig) -> NoiseSchedule:
    corr = correlation_for_skeleton(cfg.data.skeleton(), base=cfg.correlation)
    return make_schedule(corr, T=cfg.T, kind=cfg.kind, offset=cfg.offset)


def build_denoiser(cfg: TrainConfig) -> Denoiser:
    sk = cfg.data.skeleton()
    return Denoiser(sk.num_joints, cfg.latent, cfg.T, _stream(cfg.seed, 3), width=cfg.width, heads=cfg.heads,
                    blocks=cfg.blocks, adjacency=build_adjacency(sk))


@dataclass
class LatentModel:
    """Everything needed to sample futures: frozen autoencoder, denoiser, schedule and latent scaling."""
    cfg: TrainConfig
    ae: Autoencoder
    denoiser: Denoiser
    schedule: NoiseSchedule
    stats: LatentStats

    def encode_condition(self, past):
        return (self.ae.encode(past) - self.stats.c_mean) / self.stats.c_std

    def encode_target(self, future):
        return (self.ae.encode(future) - self.stats.x_mean) / self.stats.x_std

    def decode(self, x0, past_tail):
        tail = np.broadcast_to(past_tail, x0.shape[:-2] + np.shape(past_tail)[-3:])
        return self.ae.decode(x0 * self.stats.x_std + self.stats.x_mean, tail)

    def state(self) -> dict:
        out = {f"denoiser.{k}": v for k, v in self.denoiser.state_dict().items()}
        out.update(self.stats.to_tensors())
        return out


def rollout_to(denoiser, cond, s: NoiseSchedule, noise, t_stop: int):
    """Reverse chain from the prior down to x_{t_stop} (no denoiser call at t_stop itself)."""
    x = df.sample_prior(noise.shape[-2:], s, noise[:, s.T]).values
    for t in range(s.T, t_stop, -1):
        x0 = denoiser(x, cond, t)
        x = df.reverse_step(x, x0, noise[:, t - 1], s, t).values
    return x


@dataclass
class DenoiserResult:
    model: LatentModel
    losses: list            # mean loss_x0 per epoch
    step_losses: list
    ae_hash_before: str
    ae_hash_after: str


def train_denoiser(cfg: TrainConfig, split: DatasetSplit, ae: Autoencoder, *, epochs: int | None = None,
                   max_steps: int | None = None) -> DenoiserResult:
    """Latent diffusion with k-sample relaxation; the autoencoder is never updated."""
    cfg.validate()
    epochs = cfg.epochs if epochs is None else epochs
    h0 = state_hash(ae.state_dict())
    s = build_schedule_for(cfg)
    z_f = ae.encode(split.future)
    z_p = ae.encode(split.past)
    stats = LatentStats.fit(z_f, z_p)
    x0_all = (z_f - stats.x_mean) / stats.x_std
    c_all = (z_p - stats.c_mean) / stats.c_std
    dn = build_denoiser(cfg)
    model = LatentModel(cfg, ae, dn, s, stats)
    opt = Adam(dn, lr=cfg.lr)
    ema = EMA(dn, cfg.ema_decay)
    rng = _stream(cfg.seed, 4)
    n, k, T = len(split), cfg.k, cfg.T
    J, L = x0_all.shape[-2:]
    tails = split.past[:, -2:]
    losses, step_losses = [], []
    step = 0
    total_steps = epochs * -(-n // cfg.batch)
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    for ep in range(epochs):
        order = rng.permutation(n)
        tot, cnt = 0.0, 0
        for b0 in range(0, n, cfg.batch):
            if max_steps is not None and step >= max_steps:
                break
            idx = order[b0:b0 + cfg.batch]
            B = len(idx)
            t = int(rng.integers(1, T + 1))
            noise = rng.standard_normal((B * k, T + 1, J, L))
            cond_k = np.repeat(c_all[idx], k, axis=0)
            x_t = rollout_to(dn, cond_k, s, noise, t)
            if k > 1:
                cand = dn(x_t, cond_k, t).reshape(B, k, J, L)
                if cfg.argmin == "motion":
                    mot = model.decode(cand, tails[idx][:, None])
                    err = np.abs(mot - split.future[idx][:, None]).mean(axis=(2, 3, 4))
                else:
                    err = np.abs(cand - x0_all[idx][:, None]).mean(axis=(2, 3))
                best = np.argmin(err, axis=1)
                x_sel = x_t.reshape(B, k, J, L)[np.arange(B), best]
            else:
                x_sel = x_t
            # gradient flows through this last call only; the rollout is treated as data
            dn.zero_grad()
            pred, cache = dn.forward(x_sel, c_all[idx], t)
            loss = df.loss_x0(pred, x0_all[idx], t, s)
            if not np.isfinite(loss):
                raise TrainingError(f"denoiser loss not finite at epoch {ep} step {step}")
            dn.backward(df.loss_x0_grad(pred, x0_all[idx], t, s), cache)
            opt.lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_final)
            if not opt.step():
                raise TrainingError(f"denoiser gradient not finite at epoch {ep} step {step}")
            ema.update(dn)
            tot += loss
            cnt += 1
            step += 1
            step_losses.append(loss)
        if cnt:
            losses.append(tot / cnt)
            log.info("denoiser epoch %d  loss %.5f", ep, losses[-1])
    ema.copy_to(dn)
    return DenoiserResult(model, losses, step_losses, h0, state_hash(ae.state_dict()))


# -- prediction -----------------------------------------------------------------------


def predict(model: LatentModel, past, n: int, seed: int, *, threads: int = 1, chunk: int = 2048) -> np.ndarray:
    """n futures per observed past: (S, n, F, J, 3), deterministic in ``seed`` for any thread count."""
    past = np.asarray(past, dtype=np.float64)
    single = past.ndim == 3
    if single:
        past = past[None]
    J = model.ae.J
    if past.shape[-2:] != (J, 3) or past.shape[1] < 2:
        raise ValidationError(f"past must be (S, P >= 2, {J}, 3), got {past.shape}")
    if n < 1:
        raise ParameterError("n must be positive")
    S = past.shape[0]
    s, L, T = model.schedule, model.cfg.latent, model.schedule.T
    cond = np.repeat(model.encode_condition(past), n, axis=0)
    tails = np.repeat(past[:, -2:], n, axis=0)
    total = S * n
    # one independent stream per (segment, sample), so chunking never changes values
    noise = np.empty((total, T + 1, J, L))
    for i in range(total):
        noise[i] = df.rollout_rng(seed, i).standard_normal((T + 1, J, L))
    bounds = [(a, min(a + chunk, total)) for a in range(0, total, chunk)]

    def run(b):
        a, e = b
        x0 = df.generate_from_noise(model.denoiser, cond[a:e], s, noise[a:e])
        return model.decode(x0, tails[a:e])

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    out = np.concatenate(parts).reshape(S, n, *parts[0].shape[1:])
    return out[0] if single else out


# -- checkpoints --------------------------------------------------------------------


def save_autoencoder(path, ae: Autoencoder):
    save_tensors(path, ae.state_dict())


def load_autoencoder(path, cfg: TrainConfig) -> Autoencoder:
    ae = build_autoencoder(cfg)
    ae.load_state_dict(load_tensors(path))
    return ae


def save_latent_model(path, model: LatentModel):
    save_tensors(path, model.state())


def load_latent_model(path, ae: Autoencoder, cfg: TrainConfig) -> LatentModel:
    t = load_tensors(path)
    dn = build_denoiser(cfg)
    dn.load_state_dict({k[len("denoiser."):]: v for k, v in t.items() if k.startswith("denoiser.")})
    stats = LatentStats.from_tensors(t)
    if stats.x_mean.shape != (cfg.latent,):
        raise ValidationError("latent statistics do not match the configured latent width")
    return LatentModel(cfg, ae, dn, build_schedule_for(cfg), stats)


# -- evaluation and runs --------------------------------------------------------------


def evaluate(preds, split: DatasetSplit, cfg: TrainConfig, *, reference: str = "skeleton") -> MetricsReport:
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 5 or preds.shape[0] != len(split):
        got = preds.shape[0] if preds.ndim == 5 else "?"
        missing = list(range(got, len(split))) if isinstance(got, int) and got < len(split) else []
        raise ValidationError(f"predictions cover {got} segments, split has {len(split)}"
                              + (f"; missing {missing[:10]}" if missing else ""))
    return evaluate_predictions(preds, split, cfg.data.skeleton(), cfg.delta, reference=reference)


def zero_velocity_report(split: DatasetSplit, cfg: TrainConfig, n: int | None = None) -> MetricsReport:
    zv = zero_velocity_predictions(split.past, n or cfg.n_predict, split.future.shape[1])
    return evaluate(zv, split, cfg)


def write_curves(directory, preds, cfg: TrainConfig, thresholds=CURVE_THRESHOLDS) -> dict:
    """Pooled validity (stretch) and delta-APD (jitter) curves as two-column CSVs."""
    d = Path(directory)
    sk = cfg.data.skeleton()
    preds = np.asarray(preds, dtype=np.float64)
    th = np.asarray(thresholds, dtype=np.float64)
    valid = np.mean([validity_curve(p, th, sk, "stretch") for p in preds], axis=0)
    dap = np.mean([delta_apd(p, th, sk, "jitter") for p in preds], axis=0)
    paths = {"validity": d / "validity_curve.csv", "delta_apd": d / "delta_apd_curve.csv"}
    write_curve_csv(paths["validity"], th, valid, ("threshold", "valid_fraction"))
    write_curve_csv(paths["delta_apd"], th, dap, ("threshold", "apd"))
    return {k: str(v) for k, v in paths.items()}


@dataclass
class RunManifest:
    config: dict
    input_hash: str
    checkpoints: dict
    metrics: str
    wall_clock: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def input_hash(cfg: TrainConfig) -> str:
    """Content hash of everything that determines the run's outputs."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class DemoResult:
    manifest: RunManifest
    report: MetricsReport
    baseline: MetricsReport
    preds: np.ndarray = field(repr=False)
    ae_losses: list = field(default_factory=list)
    dn_losses: list = field(default_factory=list)


def run_demo(out, cfg: TrainConfig, *, threads: int = 1, dataset: Dataset | None = None,
             ae: Autoencoder | None = None) -> DemoResult:
    """gen-data -> train-ae -> train-diff -> predict -> evaluate -> curves inside ``out``."""
    cfg.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    clock = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            res = fn()
        except NonisoError as exc:
            raise type(exc)(f"[{name}] {exc}") from exc
        clock[name] = round(time.perf_counter() - t0, 3)
        return res

    ds = dataset or stage("gen-data", lambda: make_dataset(cfg.data, cfg.seed))
    stage("save-data", lambda: save_dataset(ds, out / "data"))
    ae_losses = []
    if ae is None:
        r = stage("train-ae", lambda: train_autoencoder(cfg, ds.train))
        ae, ae_losses = r.model, r.losses
    save_autoencoder(out / "autoencoder.nitg", ae)
    dres = stage("train-diff", lambda: train_denoiser(cfg, ds.train, ae))
    if dres.ae_hash_before != dres.ae_hash_after:
        raise TrainingError("autoencoder weights changed during denoiser training")
    save_latent_model(out / "denoiser.nitg", dres.model)
    preds = stage("predict", lambda: predict(dres.model, ds.test.past, cfg.n_predict, cfg.seed, threads=threads))
    save_predictions(out / "predictions.nipr", preds.reshape(-1, *preds.shape[2:]), cfg.data.frame_rate)
    # score what was written, so `evaluate` on the file reproduces metrics.json
    preds = preds.astype(np.float32).astype(np.float64)
    rep = stage("evaluate", lambda: evaluate(preds, ds.test, cfg))
    (out / "metrics.json").write_text(rep.to_json())
    rep.write_segments_csv(out / "segments.csv")
    base = zero_velocity_report(ds.test, cfg)
    (out / "zero_velocity_metrics.json").write_text(base.to_json())
    curves = stage("curves", lambda: write_curves(out, preds, cfg))
    (out / "losses.json").write_text(json.dumps({"autoencoder": ae_losses, "denoiser": dres.losses}, indent=2))
    man = RunManifest(cfg.to_dict(), input_hash(cfg),
                      {"autoencoder": str(out / "autoencoder.nitg"), "denoiser": str(out / "denoiser.nitg"),
                       **{f"{k}_sha256": file_hash(out / f"{k}.nitg") for k in ("autoencoder", "denoiser")},
                       **curves},
                      str(out / "metrics.json"), clock)
    (out / "manifest.json").write_text(man.to_json())
    return DemoResult(man, rep, base, preds, ae_losses, dres.losses)
