"""Skeleton graphs, their structural matrices and the normalised joint correlation."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateMatrixError, ParameterError, ValidationError

EIG_CLAMP = 1e-12
DEFAULT_ETA = 0.9


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    bone_lengths: tuple[float, ...]
    hub_joint: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(str(n) for n in self.joint_names))
        object.__setattr__(self, "edges", tuple((int(i), int(j)) for i, j in self.edges))
        object.__setattr__(self, "bone_lengths", tuple(float(b) for b in self.bone_lengths))
        validate_skeleton(self)

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_bones(self) -> int:
        return len(self.edges)

    def bone_array(self) -> np.ndarray:
        return np.asarray(self.bone_lengths, dtype=np.float64)

    def to_dict(self) -> dict:
        out = {
            "joints": list(self.joint_names),
            "edges": [list(e) for e in self.edges],
            "bone_lengths": list(self.bone_lengths),
        }
        if self.hub_joint is not None:
            out["hub"] = self.hub_joint
        return out


def validate_skeleton(sk: Skeleton, lines: dict | None = None) -> None:
    """Raise ValidationError naming the first offending edge or field.

    ``lines`` optionally maps ("edges", k) / ("bone_lengths", k) to source lines.
    """
    lines = lines or {}
    J = len(sk.joint_names)
    if J < 2:
        raise ValidationError("skeleton needs at least two joints", field="joints", line=lines.get("joints"))
    if len(set(sk.joint_names)) != J:
        raise ValidationError("duplicate joint names", field="joints", line=lines.get("joints"))
    if len(sk.bone_lengths) != len(sk.edges):
        raise ValidationError(
            f"{len(sk.bone_lengths)} bone lengths for {len(sk.edges)} edges",
            field="bone_lengths",
            line=lines.get("bone_lengths"),
        )
    seen = set()
    for k, (i, j) in enumerate(sk.edges):
        where = dict(field=f"edges[{k}]=({i},{j})", line=lines.get(("edges", k)))
        if not (0 <= i < J and 0 <= j < J):
            raise ValidationError(f"edge index out of range for {J} joints", **where)
        if i == j:
            raise ValidationError("self-loop", **where)
        key = (min(i, j), max(i, j))
        if key in seen:
            raise ValidationError("duplicate edge", **where)
        seen.add(key)
    for k, b in enumerate(sk.bone_lengths):
        if not (np.isfinite(b) and b > 0):
            raise ValidationError(
                f"bone length {b} must be positive",
                field=f"bone_lengths[{k}]",
                line=lines.get(("bone_lengths", k)),
            )
    if sk.hub_joint is not None and not (0 <= sk.hub_joint < J):
        raise ValidationError(f"hub {sk.hub_joint} out of range", field="hub", line=lines.get("hub"))
    # connectivity
    adj = _neighbours(J, sk.edges)
    reached = _bfs_hops(adj, 0) >= 0
    if not reached.all():
        lonely = int(np.flatnonzero(~reached)[0])
        bad = next((k for k, e in enumerate(sk.edges) if lonely in e), None)
        raise ValidationError(
            f"graph is disconnected: joint {lonely} ({sk.joint_names[lonely]}) unreachable from joint 0",
            field=f"edges[{bad}]" if bad is not None else "edges",
            line=lines.get(("edges", bad)) if bad is not None else lines.get("edges"),
        )


def _neighbours(J: int, edges: Sequence[tuple[int, int]]) -> list[list[int]]:
    adj = [[] for _ in range(J)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    for row in adj:
        row.sort()
    return adj


def _bfs_hops(adj: list[list[int]], src: int) -> np.ndarray:
    hops = np.full(len(adj), -1, dtype=np.int64)
    hops[src] = 0
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if hops[v] < 0:
                hops[v] = hops[u] + 1
                queue.append(v)
    return hops


def _bfs_tree(adj: list[list[int]], src: int) -> tuple[np.ndarray, np.ndarray]:
    """Hop counts and BFS parents (lowest-index neighbour first, so paths are deterministic)."""
    hops = np.full(len(adj), -1, dtype=np.int64)
    parent = np.full(len(adj), -1, dtype=np.int64)
    hops[src] = 0
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if hops[v] < 0:
                hops[v] = hops[u] + 1
                parent[v] = u
                queue.append(v)
    return hops, parent


def hop_matrix(skeleton: Skeleton) -> np.ndarray:
    adj = _neighbours(skeleton.num_joints, skeleton.edges)
    return np.stack([_bfs_hops(adj, s) for s in range(skeleton.num_joints)])


def shortest_path(skeleton: Skeleton, i: int, j: int) -> list[int]:
    """Vertices of the BFS shortest path from i to j, endpoints included."""
    adj = _neighbours(skeleton.num_joints, skeleton.edges)
    _, parent = _bfs_tree(adj, i)
    path = [j]
    while path[-1] != i:
        path.append(int(parent[path[-1]]))
    return path[::-1]


def _symmetrize(m: np.ndarray) -> np.ndarray:
    # exact symmetry: copy the upper triangle onto the lower one
    upper = np.triu(m, 1)
    return upper + upper.T + np.diag(np.diag(m))


def build_adjacency(skeleton: Skeleton) -> np.ndarray:
    J = skeleton.num_joints
    A = np.zeros((J, J))
    for i, j in skeleton.edges:
        A[i, j] = A[j, i] = 1.0
    return A


def _check_eta(eta: float) -> None:
    if not (0.0 < eta < 1.0):
        raise ParameterError(f"eta must lie in (0, 1), got {eta}")


def closure_matrix(skeleton: Skeleton, eta: float = DEFAULT_ETA) -> np.ndarray:
    """Weighted transitive closure: eta**(hops - 1) off the diagonal, 0 on it."""
    _check_eta(eta)
    hops = hop_matrix(skeleton)
    R = np.where(hops > 0, eta ** (hops - 1.0), 0.0)
    return _symmetrize(R)


def masked_closure_matrix(
    skeleton: Skeleton,
    eta: float = DEFAULT_ETA,
    hub: int | None = None,
    *,
    keep: str = "through_hub",
) -> np.ndarray:
    """Closure matrix masked by whether the shortest path crosses the hub joint.

    ``keep="through_hub"`` keeps R[i, j] only when the hub lies on P(i, j) and
    neither endpoint is the hub (all other entries are 0).
    ``keep="avoid_hub"`` is the complement on the off-diagonal: entries whose
    path has the hub strictly inside are zeroed, everything else is kept.
    """
    _check_eta(eta)
    if hub is None:
        hub = skeleton.hub_joint
    if hub is None or not (0 <= hub < skeleton.num_joints):
        raise ParameterError(f"hub joint {hub!r} out of range")
    if keep not in ("through_hub", "avoid_hub"):
        raise ParameterError(f"unknown mask mode {keep!r}")
    R = closure_matrix(skeleton, eta)
    J = skeleton.num_joints
    adj = _neighbours(J, skeleton.edges)
    out = np.zeros_like(R)
    for i in range(J):
        _, parent = _bfs_tree(adj, i)
        for j in range(i + 1, J):
            interior = False
            v = int(parent[j])
            while v != i:
                if v == hub:
                    interior = True
                    break
                v = int(parent[v])
            if keep == "through_hub":
                out[i, j] = R[i, j] if interior else 0.0
            else:
                out[i, j] = 0.0 if interior else R[i, j]
    return out + out.T


@dataclass(frozen=True)
class CorrelationModel:
    sigma_n: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    norm_kind: str = "spectral"
    scale: float = field(default=1.0, compare=False)

    @property
    def order(self) -> int:
        return self.sigma_n.shape[0]


def symmetric_eigh(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ascending eigenpairs with a deterministic sign per eigenvector.

    Each column is flipped so that its largest-magnitude entry (lowest index on
    ties) is positive.
    """
    w, U = np.linalg.eigh(m)
    order = np.lexsort((np.arange(len(w)), w))
    w, U = w[order], U[:, order]
    pivot = np.argmax(np.abs(U) > np.abs(U).max(axis=0) - 1e-12, axis=0)
    signs = np.sign(U[pivot, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return w, U * signs


def correlation_from_matrix(m: np.ndarray, norm_kind: str = "spectral") -> CorrelationModel:
    """Shift by the smallest eigenvalue and rescale to a PSD correlation matrix.

    spectral: divide by lambda_max - lambda_min (unit spectral norm).
    frobenius: divide by the mean of the shifted eigenvalues.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {m.shape}")
    if not np.array_equal(m, m.T):
        raise ValidationError("matrix is not symmetric")
    w = np.linalg.eigvalsh(m)
    lo, hi = float(w[0]), float(w[-1])
    shifted = w - lo
    if norm_kind == "spectral":
        scale = hi - lo
    elif norm_kind == "frobenius":
        scale = float(shifted.mean())
    else:
        raise ParameterError(f"unknown norm kind {norm_kind!r}")
    if not scale > 1e-12 * max(1.0, abs(hi), abs(lo)):
        raise DegenerateMatrixError("matrix is proportional to the identity; nothing to normalise")
    J = m.shape[0]
    sigma = _symmetrize((m - lo * np.eye(J)) / scale)
    eigvals, eigvecs = symmetric_eigh(sigma)
    eigvals = np.where(eigvals < 0, 0.0, eigvals)
    if norm_kind == "spectral":
        # exact extremes; eigh leaves O(eps) residue on the end modes
        eigvals[0] = 0.0
        if abs(eigvals[-1] - 1.0) < 1e-10:
            eigvals[-1] = 1.0
    eigvals[eigvals < EIG_CLAMP] = 0.0
    for a in (sigma, eigvecs, eigvals):
        a.setflags(write=False)
    return CorrelationModel(sigma, eigvecs, eigvals, norm_kind, scale)


def correlation_for_skeleton(
    skeleton: Skeleton,
    base: str = "adjacency",
    norm_kind: str = "spectral",
    eta: float = DEFAULT_ETA,
    hub: int | None = None,
) -> CorrelationModel:
    if base == "adjacency":
        m = build_adjacency(skeleton)
    elif base == "closure":
        m = closure_matrix(skeleton, eta)
    elif base == "closure_hub":
        m = masked_closure_matrix(skeleton, eta, hub)
    elif base == "identity":
        # isotropic reference: Sigma_N = I, fixed basis
        J = skeleton.num_joints
        eye = np.eye(J)
        vals = np.ones(J)
        for a in (eye, vals):
            a.setflags(write=False)
        return CorrelationModel(eye, eye.copy(), vals, "identity")
    else:
        raise ParameterError(f"unknown correlation base {base!r}")
    return correlation_from_matrix(m, norm_kind)


def reconstruction_error(c: CorrelationModel) -> float:
    U, w = c.eigvecs, c.eigvals
    rec = (U * w) @ U.T
    return float(np.linalg.norm(rec - c.sigma_n) / max(np.linalg.norm(c.sigma_n), 1e-300))


# -- JSON I/O -----------------------------------------------------------------


def _element_lines(text: str, key: str) -> dict[int, int]:
    """Map element index -> 1-based line for the top-level array under ``key``."""
    dec = json.JSONDecoder()
    pos = text.find(f'"{key}"')
    if pos < 0:
        return {}
    pos = text.find("[", pos)
    if pos < 0:
        return {}
    out = {}
    i, k = pos + 1, 0
    while i < len(text):
        while i < len(text) and text[i] in " \t\r\n,":
            i += 1
        if i >= len(text) or text[i] == "]":
            break
        out[k] = text.count("\n", 0, i) + 1
        try:
            _, i = dec.raw_decode(text, i)
        except json.JSONDecodeError:
            break
        k += 1
    return out


def _key_line(text: str, key: str) -> int | None:
    pos = text.find(f'"{key}"')
    return None if pos < 0 else text.count("\n", 0, pos) + 1


def skeleton_from_json(text: str) -> Skeleton:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(raw, dict):
        raise ValidationError("top level must be an object", line=1)
    lines: dict = {}
    for key in ("joints", "edges", "bone_lengths", "hub"):
        lines[key] = _key_line(text, key)
    for key in ("edges", "bone_lengths"):
        for k, ln in _element_lines(text, key).items():
            lines[(key, k)] = ln
    for key in ("joints", "edges", "bone_lengths"):
        if key not in raw:
            raise ValidationError(f"missing key {key!r}", field=key, line=1)
    edges = raw["edges"]
    for k, e in enumerate(edges):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e)):
            raise ValidationError("edge must be a pair of integers", field=f"edges[{k}]", line=lines.get(("edges", k)))
    sk = object.__new__(Skeleton)
    object.__setattr__(sk, "joint_names", tuple(str(n) for n in raw["joints"]))
    object.__setattr__(sk, "edges", tuple((e[0], e[1]) for e in edges))
    try:
        lengths = tuple(float(b) for b in raw["bone_lengths"])
    except (TypeError, ValueError) as exc:
        raise ValidationError("bone lengths must be numbers", field="bone_lengths", line=lines.get("bone_lengths")) from exc
    object.__setattr__(sk, "bone_lengths", lengths)
    object.__setattr__(sk, "hub_joint", raw.get("hub"))
    validate_skeleton(sk, lines)
    return sk


def load_skeleton(path: str | Path) -> Skeleton:
    return skeleton_from_json(Path(path).read_text())


def save_skeleton(sk: Skeleton, path: str | Path) -> None:
    Path(path).write_text(json.dumps(sk.to_dict(), indent=2) + "\n")
