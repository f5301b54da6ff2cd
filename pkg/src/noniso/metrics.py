"""Precision, multimodality, diversity, realism and body-realism metrics.

Sequence norm used by every distance below (fixed so numbers are reproducible):
for motions a, b of shape (F, J, 3),

    d(a, b) = mean_f ||a_f - b_f||_2 / sqrt(J)

where a_f is the joint-stacked 3J vector of frame f. The final-frame distance
is the same quantity evaluated on frame F only.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError
from .skeleton import Skeleton


def _motions(x, name="preds") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValidationError(f"{name} must be (N, F, J, 3), got {x.shape}")
    return x


def frame_distance(a, b) -> np.ndarray:
    """Per-frame ||a_f - b_f|| / sqrt(J), broadcasting over leading axes."""
    d = np.asarray(a) - np.asarray(b)
    J = d.shape[-2]
    return np.sqrt(np.sum(d * d, axis=(-1, -2))) / np.sqrt(J)


def sequence_distance(a, b) -> np.ndarray:
    return frame_distance(a, b).mean(axis=-1)


def _check_pair(preds, gt):
    preds = _motions(preds)
    gt = np.asarray(gt, dtype=np.float64)
    if preds.shape[1:] != gt.shape:
        raise ValidationError(f"prediction shape {preds.shape[1:]} does not match ground truth {gt.shape}")
    if preds.shape[0] < 1:
        raise ValidationError("need at least one prediction")
    return preds, gt


def ade(preds, gt) -> float:
    preds, gt = _check_pair(preds, gt)
    return float(sequence_distance(preds, gt[None]).min())


def fde(preds, gt) -> float:
    preds, gt = _check_pair(preds, gt)
    return float(frame_distance(preds[:, -1], gt[None, -1]).min())


# -- multimodal ground truth ----------------------------------------------------------


def build_mmgt(last_frames, delta: float) -> list[np.ndarray]:
    """For each segment, indices m != j whose last observed frame lies within delta (plain L2)."""
    if not delta > 0:
        raise ValidationError(f"threshold must be positive, got {delta}")
    x = np.asarray(last_frames, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    out = []
    for j in range(flat.shape[0]):
        d = np.sqrt(np.sum((flat - flat[j]) ** 2, axis=1))
        idx = np.nonzero(d < delta)[0]
        out.append(idx[idx != j])
    return out


def mmade(preds, mm) -> float:
    preds = _motions(preds)
    mm = _motions(mm, "mmgt")
    if mm.shape[0] == 0:
        raise ValidationError("empty multimodal ground truth")
    return float(sequence_distance(preds[:, None], mm[None]).min())


def mmfde(preds, mm) -> float:
    preds = _motions(preds)
    mm = _motions(mm, "mmgt")
    if mm.shape[0] == 0:
        raise ValidationError("empty multimodal ground truth")
    return float(frame_distance(preds[:, None, -1], mm[None, :, -1]).min())


# -- diversity ------------------------------------------------------------------------


def pairwise_distances(preds) -> np.ndarray:
    preds = _motions(preds)
    return sequence_distance(preds[:, None], preds[None])


def apd(preds) -> float:
    """Mean of d(p_i, p_j) over the N(N-1) ordered pairs; 0 for N < 2."""
    preds = _motions(preds)
    n = preds.shape[0]
    if n < 2:
        return 0.0
    D = pairwise_distances(preds)
    return float(D.sum() / (n * (n - 1)))


def apde(preds, mm) -> float:
    return abs(apd(preds) - apd(mm))


# -- realism ----------------------------------------------------------------------


def frame_velocity(preds) -> np.ndarray:
    """M_f for f = 1..F-1: mean over samples and joints of the per-frame displacement norm."""
    preds = _motions(preds)
    return np.linalg.norm(np.diff(preds, axis=1), axis=-1).mean(axis=(0, 2))


def cmd(preds, mbar: float) -> float:
    """sum_{f=1}^{F-1} (F - f) |M_f - mbar|."""
    preds = _motions(preds)
    F = preds.shape[1]
    if F < 2:
        raise ValidationError("CMD needs at least two frames")
    M = frame_velocity(preds)
    w = F - np.arange(1, F)
    return float(np.sum(w * np.abs(M - mbar)))


# -- body realism -------------------------------------------------------------------


def bone_lengths(motion, edges) -> np.ndarray:
    """(..., F, K) lengths of the listed bones."""
    m = np.asarray(motion, dtype=np.float64)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return np.linalg.norm(m[..., e[:, 1], :] - m[..., e[:, 0], :], axis=-1)


def reference_lengths(skeleton: Skeleton, gt=None, mode: str = "skeleton") -> np.ndarray:
    if mode == "skeleton":
        return skeleton.bone_array()
    if mode == "gt_median":
        if gt is None:
            raise ValidationError("gt_median reference needs the ground-truth motion")
        return np.median(bone_lengths(gt, skeleton.edges), axis=-2)
    raise ValidationError(f"unknown reference mode {mode!r}")


def limb_errors(preds, edges, ref) -> tuple[np.ndarray, np.ndarray]:
    """(e, v): normalised length error (N, F, K) and its frame-to-frame change (N, F-1, K)."""
    bl = bone_lengths(_motions(preds), edges)
    ref = np.asarray(ref, dtype=np.float64)
    e = np.abs(ref - bl) / ref
    v = np.abs(np.diff(bl, axis=1)) / ref
    return e, v


@dataclass
class BodyRealism:
    str_mean: float
    jit_mean: float
    str_rmse: float
    jit_rmse: float


def body_realism(preds, skeleton: Skeleton, ref=None) -> BodyRealism:
    """Mean / RMSE over time per limb and sample, then averaged, in percent."""
    ref = skeleton.bone_array() if ref is None else ref
    if np.any(np.asarray(ref) <= 0):
        raise ValidationError("reference bone lengths must be positive")
    e, v = limb_errors(preds, skeleton.edges, ref)
    jm = v.mean(axis=1).mean() if v.shape[1] else 0.0
    jr = np.sqrt((v * v).mean(axis=1)).mean() if v.shape[1] else 0.0
    return BodyRealism(
        float(100 * e.mean(axis=1).mean()),
        float(100 * jm),
        float(100 * np.sqrt((e * e).mean(axis=1)).mean()),
        float(100 * jr),
    )


@dataclass
class AngleResult:
    degrees: float
    zero_length: bool


def mae_angle(preds, gt, skeleton: Skeleton) -> AngleResult:
    """Min over samples of the frame-mean, bone-mean angle between bone directions.

    A zero-length bone on either side counts as 90 degrees and sets the flag.
    """
    preds, gt = _check_pair(preds, gt)
    e = np.asarray(skeleton.edges)
    u = preds[..., e[:, 1], :] - preds[..., e[:, 0], :]
    w = (gt[..., e[:, 1], :] - gt[..., e[:, 0], :])[None]
    nu = np.linalg.norm(u, axis=-1)
    nw = np.linalg.norm(w, axis=-1)
    bad = (nu == 0) | (nw == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.sum(u * w, axis=-1) / (nu * nw)
    ang = np.degrees(np.arccos(np.clip(np.where(bad, 0.0, c), -1.0, 1.0)))
    ang = np.where(bad, 90.0, ang)
    per_sample = ang.mean(axis=-1).mean(axis=-1)
    return AngleResult(float(per_sample.min()), bool(bad.any()))


# -- curves -----------------------------------------------------------------------


def max_limb_error(preds, skeleton: Skeleton, kind: str = "stretch", ref=None) -> np.ndarray:
    """Per-motion maximum over frames and bones of the stretch (e) or jitter (v) error, as a fraction."""
    ref = skeleton.bone_array() if ref is None else ref
    e, v = limb_errors(preds, skeleton.edges, ref)
    src = {"stretch": e, "jitter": v}.get(kind)
    if src is None:
        raise ValidationError(f"unknown error kind {kind!r}")
    if src.shape[1] == 0:
        return np.zeros(src.shape[0])
    return src.reshape(src.shape[0], -1).max(axis=1)


def _check_thresholds(thresholds) -> np.ndarray:
    th = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(th) < 0):
        raise ValidationError("thresholds must be sorted ascending")
    return th


def validity_curve(preds, thresholds, skeleton: Skeleton, kind: str = "stretch", ref=None) -> np.ndarray:
    """Fraction of motions whose maximal error is <= each threshold."""
    th = _check_thresholds(thresholds)
    err = max_limb_error(preds, skeleton, kind, ref)
    return (err[None, :] <= th[:, None]).mean(axis=1)


def delta_apd(preds, thresholds, skeleton: Skeleton, kind: str = "jitter", ref=None) -> np.ndarray:
    """APD among motions valid at each threshold; 0 with fewer than two valid motions."""
    th = _check_thresholds(thresholds)
    preds = _motions(preds)
    err = max_limb_error(preds, skeleton, kind, ref)
    D = pairwise_distances(preds)
    out = np.zeros(len(th))
    for i, t in enumerate(th):
        ok = np.nonzero(err <= t)[0]
        n = len(ok)
        if n >= 2:
            out[i] = D[np.ix_(ok, ok)].sum() / (n * (n - 1))
    return out


# -- reports -------------------------------------------------------------------------

REPORT_KEYS = ("ade", "fde", "mae_deg", "mmade", "mmfde", "apd", "apde", "cmd",
               "str_mean", "jit_mean", "str_rmse", "jit_rmse")


@dataclass
class MetricsReport:
    ade: float
    fde: float
    mae_deg: float
    mmade: float
    mmfde: float
    apd: float
    apde: float
    cmd: float
    str_mean: float
    jit_mean: float
    str_rmse: float
    jit_rmse: float
    delta: float
    num_samples: int
    num_segments: int
    flags: dict = field(default_factory=dict)
    segments: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("segments")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write_segments_csv(self, path) -> None:
        cols = ["segment"] + [k for k in REPORT_KEYS if k != "cmd"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.segments:
                w.writerow([row[c] if c == "segment" else repr(float(row[c])) for c in cols])


def evaluate_predictions(preds_per_segment, split, skeleton: Skeleton, delta: float, *,
                         reference: str = "skeleton") -> MetricsReport:
    """Full metric suite over a test split.

    ``preds_per_segment`` is (S, N, F, J, 3). Segment metrics are averaged with
    a fixed order; CMD pools the per-frame velocities over every segment.
    """
    preds_all = np.asarray(preds_per_segment, dtype=np.float64)
    S = len(split)
    if preds_all.shape[0] != S:
        raise ValidationError(f"got predictions for {preds_all.shape[0]} segments, split has {S}")
    if S == 0:
        raise ValidationError("empty split")
    gts = split.future
    mm_index = build_mmgt(split.past[:, -1], delta)
    rows = []
    empty_mm = 0
    zero_bone = False
    for s in range(S):
        preds, gt = preds_all[s], gts[s]
        idx = mm_index[s]
        if len(idx) == 0:
            empty_mm += 1
            mm = gt[None]
        else:
            mm = gts[idx]
        ref = reference_lengths(skeleton, gt, reference)
        br = body_realism(preds, skeleton, ref)
        ang = mae_angle(preds, gt, skeleton)
        zero_bone |= ang.zero_length
        rows.append({
            "segment": s, "ade": ade(preds, gt), "fde": fde(preds, gt), "mae_deg": ang.degrees,
            "mmade": mmade(preds, mm), "mmfde": mmfde(preds, mm), "apd": apd(preds), "apde": apde(preds, mm),
            "str_mean": br.str_mean, "jit_mean": br.jit_mean, "str_rmse": br.str_rmse, "jit_rmse": br.jit_rmse,
        })
    agg = {k: float(np.mean([r[k] for r in rows])) for k in REPORT_KEYS if k != "cmd"}
    pooled = preds_all.reshape(-1, *preds_all.shape[2:])
    agg["cmd"] = cmd(pooled, split.mean_velocity) if pooled.shape[1] >= 2 else 0.0
    flags = {"mmgt_fallback_segments": empty_mm, "zero_length_bone": zero_bone,
             "apd_single_sample": preds_all.shape[1] < 2, "reference": reference}
    return MetricsReport(**agg, delta=float(delta), num_samples=int(preds_all.shape[1]), num_segments=S,
                         flags=flags, segments=rows)


def zero_velocity_predictions(past, n: int, future_len: int) -> np.ndarray:
    """The last observed frame repeated over the horizon, n identical copies per segment."""
    past = np.asarray(past, dtype=np.float64)
    last = past[:, -1]
    return np.broadcast_to(last[:, None, None], (past.shape[0], n, future_len) + last.shape[1:]).copy()


def write_curve_csv(path, thresholds, values, header=("threshold", "value")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, v in zip(thresholds, values):
            w.writerow([repr(float(t)), repr(float(v))])
