"""Procedural kinematic-chain motions with a known, multimodal future.

Each sequence follows a random idle program of joint angles. After the last
observed frame one of several modes bends every bone away from the idle
program along a mode-specific axis and direction. Positions come from forward
kinematics, so clean bone lengths are exact; jitter is added afterwards.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, ValidationError
from .skeleton import Skeleton

DEFAULT_LENGTHS = (0.3, 0.3, 0.25, 0.25, 0.2, 0.2)


def make_chain_skeleton(J: int = 7, lengths=None, hub: int | None = None) -> Skeleton:
    """Path graph 0-1-...-(J-1) rooted at joint 0."""
    if J < 2:
        raise ValidationError(f"a chain needs at least 2 joints, got {J}")
    if lengths is None:
        lengths = DEFAULT_LENGTHS[: J - 1] if J - 1 <= len(DEFAULT_LENGTHS) else [0.25] * (J - 1)
    lengths = [float(b) for b in lengths]
    if len(lengths) != J - 1:
        raise ValidationError(f"{J} joints need {J - 1} bone lengths, got {len(lengths)}")
    if any(not b > 0 for b in lengths):
        raise ValidationError("bone lengths must be positive", field="bone_lengths")
    return Skeleton([f"j{i}" for i in range(J)], [(i, i + 1) for i in range(J - 1)], lengths, hub)


# -- kinematics -------------------------------------------------------------------


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    out = np.zeros(a.shape + (3, 3))
    out[..., 0, 0], out[..., 0, 1] = c, -s
    out[..., 1, 0], out[..., 1, 1] = s, c
    out[..., 2, 2] = 1.0
    return out


def _ry(b):
    c, s = np.cos(b), np.sin(b)
    out = np.zeros(b.shape + (3, 3))
    out[..., 0, 0], out[..., 0, 2] = c, s
    out[..., 2, 0], out[..., 2, 2] = -s, c
    out[..., 1, 1] = 1.0
    return out


def forward_kinematics(angles: np.ndarray, lengths) -> np.ndarray:
    """angles (F, J-1, 2) of (yaw, pitch) per bone, relative to the parent bone.

    Returns positions (F, J, 3) with joint 0 at the origin.
    """
    F, nb, _ = angles.shape
    lengths = np.asarray(lengths, dtype=np.float64)
    pos = np.zeros((F, nb + 1, 3))
    R = np.broadcast_to(np.eye(3), (F, 3, 3))
    local = _rz(angles[..., 0]) @ _ry(angles[..., 1])      # (F, nb, 3, 3)
    for k in range(nb):
        R = R @ local[:, k]
        pos[:, k + 1] = pos[:, k] + lengths[k] * R[:, :, 0]
    return pos


# -- programs -----------------------------------------------------------------------


@dataclass(frozen=True)
class MotionProgram:
    """Random idle state shared by every future drawn for one past."""

    rest: np.ndarray          # (J-1, 2) rest angles
    amp: float                # idle amplitude (rad)
    freq: float               # idle frequency (Hz)
    phase: float
    lag: float                # phase lag per bone


@dataclass(frozen=True)
class ModeSpec:
    axis: int
    sign: float
    omega: float              # rad/s of the 1 - cos ramp
    amplitude: float


def mode_spec(mode: int, amplitude: float = 0.35) -> ModeSpec:
    if mode < 0:
        raise ParameterError(f"mode must be nonnegative, got {mode}")
    return ModeSpec(mode % 2, 1.0 if (mode // 2) % 2 == 0 else -1.0, np.pi / 2 * (1 + mode // 4), amplitude)


def draw_program(n_bones: int, rng: np.random.Generator) -> MotionProgram:
    return MotionProgram(
        rest=rng.uniform(-0.3, 0.3, size=(n_bones, 2)),
        amp=float(rng.uniform(0.05, 0.15)),
        freq=float(rng.uniform(0.3, 0.7)),
        phase=float(rng.uniform(0, 2 * np.pi)),
        lag=float(rng.uniform(0.2, 0.8)),
    )


def program_angles(prog: MotionProgram, mode: int, frames: int, switch: int, frame_rate: float,
                   amplitude: float = 0.35) -> np.ndarray:
    """(frames, J-1, 2) joint angles; the mode ramp starts after frame ``switch``."""
    nb = prog.rest.shape[0]
    tsec = np.arange(frames) / frame_rate
    k = np.arange(nb)
    idle = prog.amp * np.sin(2 * np.pi * prog.freq * tsec[:, None] + prog.phase + prog.lag * k[None, :])
    ang = np.broadcast_to(prog.rest, (frames, nb, 2)).copy()
    ang[..., 0] += idle
    ang[..., 1] += 0.5 * idle
    spec = mode_spec(mode, amplitude)
    s = np.maximum(tsec - tsec[min(switch, frames - 1)], 0.0)
    ang[..., spec.axis] += spec.sign * spec.amplitude * (1.0 - np.cos(spec.omega * s))[:, None]
    return ang


@dataclass(frozen=True)
class MotionSequence:
    frames: np.ndarray        # (F, J, 3)
    frame_rate: float
    skeleton: Skeleton | None = None


def gen_motion(skeleton: Skeleton, mode: int, frames: int, noise_std: float, rng: np.random.Generator, *,
               switch: int | None = None, program: MotionProgram | None = None, frame_rate: float = 24.0,
               num_modes: int | None = None, amplitude: float = 0.35) -> MotionSequence:
    """One sequence of a chain skeleton. Without ``switch`` the mode ramp starts at frame 0."""
    if num_modes is not None and not (0 <= mode < num_modes):
        raise ParameterError(f"mode {mode} outside [0, {num_modes})")
    _check_chain(skeleton)
    if program is None:
        program = draw_program(skeleton.num_bones, rng)
    ang = program_angles(program, mode, frames, 0 if switch is None else switch, frame_rate, amplitude)
    pos = forward_kinematics(ang, skeleton.bone_lengths)
    if noise_std > 0:
        pos = pos + rng.normal(0.0, noise_std, size=pos.shape)
    return MotionSequence(pos, frame_rate, skeleton)


def _check_chain(sk: Skeleton):
    if tuple(sk.edges) != tuple((i, i + 1) for i in range(sk.num_joints - 1)):
        raise ValidationError("the generator drives chain skeletons with edges (k, k+1)")


# -- datasets -----------------------------------------------------------------------


@dataclass
class DataConfig:
    joints: int = 7
    bone_lengths: list = field(default_factory=lambda: list(DEFAULT_LENGTHS))
    past: int = 12
    future: int = 48
    seq_frames: int | None = None      # generated frames per sequence, default past + future
    frame_rate: float = 24.0
    num_modes: int = 3
    mode_weights: list | None = None
    mode_amplitude: float = 0.35
    noise_std: float = 0.01
    futures_per_past: int = 2
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200

    def validate(self):
        total = self.seq_frames if self.seq_frames is not None else self.past + self.future
        if self.past < 2:
            raise ValidationError("past must hold at least 2 frames", field="past")
        if self.future < 1:
            raise ValidationError("future must hold at least 1 frame", field="future")
        if self.past + self.future > total:
            raise ValidationError(f"past + future = {self.past + self.future} exceeds generated frames {total}",
                                  field="seq_frames")
        if self.num_modes < 1:
            raise ValidationError("need at least one mode", field="num_modes")
        w = self.weights()
        if len(w) != self.num_modes or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValidationError("mode weights must be nonnegative, one per mode, summing to 1", field="mode_weights")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be nonnegative", field="noise_std")
        if self.futures_per_past < 1:
            raise ValidationError("futures_per_past must be >= 1", field="futures_per_past")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValidationError("split sizes must be nonnegative")
        make_chain_skeleton(self.joints, self.bone_lengths)

    def weights(self) -> np.ndarray:
        if self.mode_weights is None:
            return np.full(self.num_modes, 1.0 / self.num_modes)
        return np.asarray(self.mode_weights, dtype=np.float64)

    def skeleton(self) -> Skeleton:
        return make_chain_skeleton(self.joints, self.bone_lengths)

    def noise_bound(self) -> float:
        """Percent stretch a jitter of 2 noise_std per bone would cause, averaged over bones."""
        b = np.asarray(self.bone_lengths, dtype=np.float64)
        return float(100.0 * np.mean(2.0 * self.noise_std / b))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ValidationError(f"unknown data config keys {extra}")
        return cls(**d)


@dataclass
class DatasetSplit:
    past: np.ndarray            # (N, P, J, 3)
    future: np.ndarray          # (N, F, J, 3)
    future_clean: np.ndarray    # (N, F, J, 3), noiseless reference
    modes: np.ndarray           # (N,) int
    states: np.ndarray          # (N,) id of the shared past generator state
    mean_velocity: float = 0.0  # average per-frame joint displacement (test split statistic)

    def __len__(self):
        return len(self.modes)

    def subset(self, idx) -> "DatasetSplit":
        idx = np.asarray(idx)
        return DatasetSplit(self.past[idx], self.future[idx], self.future_clean[idx], self.modes[idx],
                            self.states[idx], self.mean_velocity)


def mean_velocity(futures: np.ndarray) -> float:
    """Mean over segments, frame transitions and joints of the per-frame displacement norm."""
    if futures.shape[0] == 0 or futures.shape[1] < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(futures, axis=1), axis=-1).mean())


def _make_split(cfg: DataConfig, n: int, rng: np.random.Generator, state_offset: int) -> DatasetSplit:
    sk = cfg.skeleton()
    P, F = cfg.past, cfg.future
    total = cfg.seq_frames or P + F
    J = cfg.joints
    past = np.zeros((n, P, J, 3))
    fut = np.zeros((n, F, J, 3))
    clean = np.zeros((n, F, J, 3))
    modes = np.zeros(n, dtype=np.int64)
    states = np.zeros(n, dtype=np.int64)
    w = cfg.weights()
    i = 0
    state = state_offset
    while i < n:
        prog = draw_program(sk.num_bones, rng)
        past_noise = rng.normal(0.0, cfg.noise_std, size=(P, J, 3)) if cfg.noise_std > 0 else 0.0
        for _ in range(min(cfg.futures_per_past, n - i)):
            m = int(rng.choice(cfg.num_modes, p=w))
            ang = program_angles(prog, m, total, P - 1, cfg.frame_rate, cfg.mode_amplitude)
            pos = forward_kinematics(ang, sk.bone_lengths)[: P + F]
            noise = rng.normal(0.0, cfg.noise_std, size=(F, J, 3)) if cfg.noise_std > 0 else 0.0
            past[i] = pos[:P] + past_noise    # shared observation for every future of this state
            fut[i] = pos[P:] + noise
            clean[i] = pos[P:]
            modes[i], states[i] = m, state
            i += 1
        state += 1
    return DatasetSplit(past, fut, clean, modes, states)


@dataclass
class Dataset:
    config: DataConfig
    train: DatasetSplit
    val: DatasetSplit
    test: DatasetSplit

    @property
    def skeleton(self) -> Skeleton:
        return self.config.skeleton()


def make_dataset(cfg: DataConfig, seed: int) -> Dataset:
    """Train / val / test splits from independent child streams of ``seed``; M-bar from test."""
    cfg.validate()
    ss = np.random.SeedSequence(int(seed))
    r_tr, r_va, r_te = (np.random.default_rng(s) for s in ss.spawn(3))
    train = _make_split(cfg, cfg.n_train, r_tr, 0)
    val = _make_split(cfg, cfg.n_val, r_va, 10**6)
    test = _make_split(cfg, cfg.n_test, r_te, 2 * 10**6)
    mbar = mean_velocity(test.future)
    for s in (train, val, test):
        s.mean_velocity = mbar
    return Dataset(cfg, train, val, test)


# -- files -------------------------------------------------------------------------

MOTION_MAGIC = b"NIMO"
PRED_MAGIC = b"NIPR"
FORMAT_VERSION = 1


def encode_motion(frames: np.ndarray, frame_rate: float = 24.0) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[2] != 3:
        raise ValidationError(f"motion must be (F, J, 3), got {frames.shape}")
    F, J, D = frames.shape
    head = MOTION_MAGIC + struct.pack("<IIIIf", FORMAT_VERSION, F, J, D, frame_rate)
    return head + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def _decode_motion(buf: bytes, pos: int) -> tuple[np.ndarray, float, int]:
    if buf[pos:pos + 4] != MOTION_MAGIC:
        raise FormatError(f"bad motion magic at byte {pos}")
    if len(buf) < pos + 24:
        raise FormatError("motion header truncated")
    version, F, J, D, rate = struct.unpack("<IIIIf", buf[pos + 4:pos + 24])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported motion version {version}")
    if D != 3:
        raise FormatError(f"motion coordinate dimension must be 3, got {D}")
    n = F * J * D * 4
    start = pos + 24
    if len(buf) < start + n:
        raise FormatError(f"motion payload truncated: need {n} bytes, have {len(buf) - start}")
    arr = np.frombuffer(buf[start:start + n], dtype="<f4").reshape(F, J, D).astype(np.float64)
    return arr, float(rate), start + n


def decode_motion(buf: bytes) -> tuple[np.ndarray, float]:
    arr, rate, end = _decode_motion(buf, 0)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after motion")
    return arr, rate


def encode_predictions(preds: np.ndarray, frame_rate: float = 24.0) -> bytes:
    preds = np.asarray(preds)
    return PRED_MAGIC + struct.pack("<I", preds.shape[0]) + b"".join(encode_motion(p, frame_rate) for p in preds)


def decode_predictions(buf: bytes) -> np.ndarray:
    if buf[:4] != PRED_MAGIC:
        raise FormatError("not a prediction-set file (bad magic)")
    if len(buf) < 8:
        raise FormatError("prediction header truncated")
    (n,) = struct.unpack("<I", buf[4:8])
    pos, out = 8, []
    for _ in range(n):
        arr, _, pos = _decode_motion(buf, pos)
        out.append(arr)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after prediction set")
    if not out:
        return np.zeros((0, 0, 0, 3))
    if len({a.shape for a in out}) != 1:
        raise FormatError("motions in a prediction set differ in shape")
    return np.stack(out)


def save_motion(path, frames, frame_rate=24.0):
    Path(path).write_bytes(encode_motion(frames, frame_rate))


def load_motion(path) -> tuple[np.ndarray, float]:
    return decode_motion(Path(path).read_bytes())


def save_predictions(path, preds, frame_rate=24.0):
    Path(path).write_bytes(encode_predictions(preds, frame_rate))


def load_predictions(path) -> np.ndarray:
    return decode_predictions(Path(path).read_bytes())


def write_motion_csv(path, frames: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "joint", "x", "y", "z"])
        for f in range(frames.shape[0]):
            for j in range(frames.shape[1]):
                w.writerow([f, j, *(repr(float(v)) for v in frames[f, j])])


def read_motion_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FormatError("empty motion CSV")
    try:
        F = max(int(r["frame"]) for r in rows) + 1
        J = max(int(r["joint"]) for r in rows) + 1
        out = np.full((F, J, 3), np.nan)
        for r in rows:
            out[int(r["frame"]), int(r["joint"])] = [float(r["x"]), float(r["y"]), float(r["z"])]
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"malformed motion CSV: {exc}") from exc
    if np.isnan(out).any():
        raise FormatError("motion CSV is missing (frame, joint) rows")
    return out


def save_dataset(ds: Dataset, directory) -> None:
    """Float64 tensors in the checkpoint container plus a JSON description."""
    from .nn.checkpoint import save_tensors

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name in ("train", "val", "test"):
        sp = getattr(ds, name)
        for key in ("past", "future", "future_clean", "modes", "states"):
            tensors[f"{name}.{key}"] = np.asarray(getattr(sp, key), dtype=np.float64)
    save_tensors(d / "dataset.nitg", tensors)
    meta = {"config": ds.config.to_dict(), "mean_velocity": ds.test.mean_velocity,
            "skeleton": ds.skeleton.to_dict(), "sizes": {n: len(getattr(ds, n)) for n in ("train", "val", "test")}}
    (d / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_dataset(directory) -> Dataset:
    from .nn.checkpoint import load_tensors

    d = Path(directory)
    try:
        meta = json.loads((d / "dataset.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"no dataset at {d}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"dataset.json line {exc.lineno}: {exc.msg}") from exc
    t = load_tensors(d / "dataset.nitg")
    splits = {}
    for name in ("train", "val", "test"):
        splits[name] = DatasetSplit(
            t[f"{name}.past"], t[f"{name}.future"], t[f"{name}.future_clean"],
            t[f"{name}.modes"].astype(np.int64), t[f"{name}.states"].astype(np.int64), float(meta["mean_velocity"]))
    return Dataset(DataConfig.from_dict(meta["config"]), **splits)
