"""Typed-graph layers with explicit forward caches and hand-written backward passes.

Activations are (..., J, D): leading axes are batch, J is the joint axis and D
the feature axis. ``forward`` returns (output, cache); ``backward(dy, cache)``
adds parameter gradients into ``self.grads`` and returns the input gradient.
"""
from __future__ import annotations

import numpy as np

from ..errors import ValidationError

RMS_EPS = 1e-8


class Module:
    """Parameter container. Children are discovered from attributes in insertion order."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def _children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield f"{name}.{i}", m

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def named_parameters(self, prefix: str = ""):
        """Pairs (full name, owning module, local key) in a fixed order."""
        for k in self.params:
            yield prefix + k, self, k
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def zero_grad(self):
        for _, m, k in self.named_parameters():
            m.grads[k].fill(0.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: m.params[k] for n, m, k in self.named_parameters()}

    def grad_dict(self) -> dict[str, np.ndarray]:
        return {n: m.grads[k] for n, m, k in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = list(self.named_parameters())
        missing = [n for n, _, _ in own if n not in state]
        extra = sorted(set(state) - {n for n, _, _ in own})
        if missing or extra:
            raise ValidationError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for n, m, k in own:
            v = np.asarray(state[n], dtype=np.float64)
            if v.shape != m.params[k].shape:
                raise ValidationError(f"shape mismatch for {n}: {v.shape} vs {m.params[k].shape}")
            m.params[k][...] = v

    def num_parameters(self) -> int:
        return sum(m.params[k].size for _, m, k in self.named_parameters())


def _uniform(rng, shape, fan_in):
    b = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-b, b, size=shape)


def default_aggregation(J: int, adjacency: np.ndarray | None = None) -> np.ndarray:
    """Row-normalised (A + I), or the identity without a graph."""
    if adjacency is None:
        return np.eye(J)
    m = np.asarray(adjacency, dtype=np.float64) + np.eye(J)
    return m / m.sum(axis=1, keepdims=True)


class TGLinear(Module):
    """f^j = W^j x^j per joint, then f = G f (+ per-joint bias)."""

    def __init__(self, J, d_in, d_out, rng, *, adjacency=None, bias=True, zero=False):
        super().__init__()
        self.J, self.d_in, self.d_out = J, d_in, d_out
        W = np.zeros((J, d_in, d_out)) if zero else _uniform(rng, (J, d_in, d_out), d_in)
        self.add_param("W", W)
        self.add_param("G", default_aggregation(J, adjacency))
        self.has_bias = bias
        if bias:
            self.add_param("b", np.zeros((J, d_out)))

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2:] != (self.J, self.d_in):
            raise ValidationError(f"TGLinear expects (..., {self.J}, {self.d_in}), got {x.shape}")
        lead = x.shape[:-2]
        xb = x.reshape(-1, self.J, self.d_in).transpose(1, 0, 2)      # (J, B, Din)
        fh = np.matmul(xb, self.params["W"])                          # (J, B, Dout)
        B = xb.shape[1]
        y = (self.params["G"] @ fh.reshape(self.J, -1)).reshape(self.J, B, self.d_out)
        y = y.transpose(1, 0, 2)
        if self.has_bias:
            y = y + self.params["b"]
        return y.reshape(*lead, self.J, self.d_out), (xb, fh, lead)

    def backward(self, dy, cache):
        xb, fh, lead = cache
        J, B = self.J, xb.shape[1]
        dyt = np.asarray(dy).reshape(B, J, self.d_out).transpose(1, 0, 2)  # (J, B, Dout)
        flat = dyt.reshape(J, -1)
        if self.has_bias:
            self.grads["b"] += dyt.sum(axis=1)
        self.grads["G"] += flat @ fh.reshape(J, -1).T
        dfh = (self.params["G"].T @ flat).reshape(J, B, self.d_out)
        self.grads["W"] += np.matmul(xb.transpose(0, 2, 1), dfh)
        dx = np.matmul(dfh, self.params["W"].transpose(0, 2, 1))
        return dx.transpose(1, 0, 2).reshape(*lead, J, self.d_in)


class RMSNorm(Module):
    """x / sqrt(mean(x^2) + eps) * gain over the feature axis of each joint."""

    def __init__(self, d, eps=RMS_EPS):
        super().__init__()
        self.eps = eps
        self.add_param("gain", np.ones(d))

    def forward(self, x):
        r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + self.eps)
        n = x / r
        return n * self.params["gain"], (n, r)

    def backward(self, dy, cache):
        n, r = cache
        self.grads["gain"] += (dy * n).reshape(-1, n.shape[-1]).sum(axis=0)
        dn = dy * self.params["gain"]
        return (dn - n * np.mean(dn * n, axis=-1, keepdims=True)) / r


def rms_norm(x, gain, eps=RMS_EPS):
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


class SiLU:
    @staticmethod
    def forward(x):
        s = 0.5 * (1.0 + np.tanh(0.5 * x))   # overflow-free logistic
        return x * s, (x, s)

    @staticmethod
    def backward(dy, cache):
        x, s = cache
        return dy * (s + x * s * (1.0 - s))


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class TGAttention(Module):
    """Multi-head scaled dot-product attention over joints, projections are TG layers.

    Q_h, K_h, V_h = TG_h(RMS(x)); heads are concatenated and passed through a
    TG output projection (zero-initialised). The residual is added by the caller.
    """

    def __init__(self, J, d, heads, rng, *, adjacency=None, zero_out=True):
        super().__init__()
        if d % heads:
            raise ValidationError(f"width {d} not divisible by {heads} heads")
        self.J, self.d, self.heads, self.dk = J, d, heads, d // heads
        self.norm = RMSNorm(d)
        self.q = [TGLinear(J, d, self.dk, rng, adjacency=adjacency) for _ in range(heads)]
        self.k = [TGLinear(J, d, self.dk, rng, adjacency=adjacency) for _ in range(heads)]
        self.v = [TGLinear(J, d, self.dk, rng, adjacency=adjacency) for _ in range(heads)]
        self.out = TGLinear(J, d, d, rng, adjacency=adjacency, zero=zero_out)

    def forward(self, x):
        h, c_norm = self.norm.forward(x)
        scale = 1.0 / np.sqrt(self.dk)
        heads, caches = [], []
        for qm, km, vm in zip(self.q, self.k, self.v):
            q, cq = qm.forward(h)
            k, ck = km.forward(h)
            v, cv = vm.forward(h)
            A = softmax(np.matmul(q, np.swapaxes(k, -1, -2)) * scale)   # (..., J, J)
            heads.append(np.matmul(A, v))
            caches.append((q, k, v, A, cq, ck, cv))
        y, c_out = self.out.forward(np.concatenate(heads, axis=-1))
        return y, (c_norm, caches, c_out)

    def backward(self, dy, cache):
        c_norm, caches, c_out = cache
        scale = 1.0 / np.sqrt(self.dk)
        dcat = self.out.backward(dy, c_out)
        dh = 0.0
        for i, (qm, km, vm) in enumerate(zip(self.q, self.k, self.v)):
            q, k, v, A, cq, ck, cv = caches[i]
            do = dcat[..., i * self.dk:(i + 1) * self.dk]
            dA = np.matmul(do, np.swapaxes(v, -1, -2))
            dv = np.matmul(np.swapaxes(A, -1, -2), do)
            dz = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
            dq = np.matmul(dz, k)
            dk = np.matmul(np.swapaxes(dz, -1, -2), q)
            dh = dh + qm.backward(dq, cq) + km.backward(dk, ck) + vm.backward(dv, cv)
        return self.norm.backward(dh, c_norm)


class TGMLP(Module):
    """RMS -> TG -> SiLU -> TG, used as the feed-forward half of a residual block."""

    def __init__(self, J, d, hidden, rng, *, adjacency=None):
        super().__init__()
        self.norm = RMSNorm(d)
        self.fc1 = TGLinear(J, d, hidden, rng, adjacency=adjacency)
        self.fc2 = TGLinear(J, hidden, d, rng, adjacency=adjacency)

    def forward(self, x):
        h, c0 = self.norm.forward(x)
        h, c1 = self.fc1.forward(h)
        h, c2 = SiLU.forward(h)
        y, c3 = self.fc2.forward(h)
        return y, (c0, c1, c2, c3)

    def backward(self, dy, cache):
        c0, c1, c2, c3 = cache
        d = self.fc2.backward(dy, c3)
        d = SiLU.backward(d, c2)
        d = self.fc1.backward(d, c1)
        return self.norm.backward(d, c0)


class TGBlock(Module):
    """x + Attn(x), then + MLP(.)."""

    def __init__(self, J, d, heads, rng, *, adjacency=None, mlp_ratio=2):
        super().__init__()
        self.attn = TGAttention(J, d, heads, rng, adjacency=adjacency)
        self.mlp = TGMLP(J, d, mlp_ratio * d, rng, adjacency=adjacency)

    def forward(self, x):
        a, ca = self.attn.forward(x)
        h = x + a
        m, cm = self.mlp.forward(h)
        return h + m, (ca, cm)

    def backward(self, dy, cache):
        ca, cm = cache
        dh = dy + self.mlp.backward(dy, cm)
        return dh + self.attn.backward(dh, ca)
