"""Toy denoiser and motion autoencoder assembled from typed-graph layers."""
from __future__ import annotations

import numpy as np

from ..errors import ParameterError, ValidationError
from .layers import Module, RMSNorm, SiLU, TGBlock, TGLinear


class Denoiser(Module):
    """x0_pred = g(x_t, cond, t) on (..., J, L) latents.

    The noisy latent and the condition are concatenated per joint, projected to
    the working width, shifted by a learned timestep embedding and passed
    through residual TG blocks before a normed TG read-out.
    """

    def __init__(self, J, L, T, rng, *, width=32, heads=2, blocks=2, adjacency=None):
        super().__init__()
        self.J, self.L, self.T, self.width = J, L, T, width
        self.inp = TGLinear(J, 2 * L, width, rng, adjacency=adjacency)
        self.add_param("temb", rng.uniform(-1.0, 1.0, size=(T, width)) / np.sqrt(width))
        self.blocks = [TGBlock(J, width, heads, rng, adjacency=adjacency) for _ in range(blocks)]
        self.norm = RMSNorm(width)
        self.out = TGLinear(J, width, L, rng, adjacency=adjacency)

    def _temb(self, t, lead):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ParameterError(f"timestep outside [1, {self.T}]")
        e = self.params["temb"][t - 1]
        if t.ndim == 0:
            return e
        # one timestep per leading batch entry
        return e.reshape(*t.shape, *([1] * (len(lead) - t.ndim)), 1, self.width)

    def forward(self, x_t, cond, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        cond = np.broadcast_to(np.asarray(cond, dtype=np.float64), x_t.shape)
        if x_t.shape[-2:] != (self.J, self.L):
            raise ValidationError(f"denoiser expects (..., {self.J}, {self.L}), got {x_t.shape}")
        h, c_in = self.inp.forward(np.concatenate([x_t, cond], axis=-1))
        h = h + self._temb(t, x_t.shape[:-2])
        cb = []
        for b in self.blocks:
            h, c = b.forward(h)
            cb.append(c)
        h, c_n = self.norm.forward(h)
        y, c_out = self.out.forward(h)
        return y, (c_in, cb, c_n, c_out, np.asarray(t), x_t.shape)

    def __call__(self, x_t, cond, t):
        return self.forward(x_t, cond, t)[0]

    def backward(self, dy, cache):
        """Returns (d x_t, d cond)."""
        c_in, cb, c_n, c_out, t, shape = cache
        d = self.out.backward(dy, c_out)
        d = self.norm.backward(d, c_n)
        for b, c in zip(reversed(self.blocks), reversed(cb)):
            d = b.backward(d, c)
        g = self.grads["temb"]
        if t.ndim == 0:
            g[int(t) - 1] += d.reshape(-1, self.width).sum(axis=0)
        else:
            per = d.reshape(*t.shape, -1, self.width).sum(axis=-2)
            np.add.at(g, t.reshape(-1) - 1, per.reshape(-1, self.width))
        dinp = self.inp.backward(d, c_in)
        return dinp[..., : self.L], dinp[..., self.L:]


def time_features(n_frames: int, K: int = 6) -> np.ndarray:
    """sin/cos features of the distance to the last frame, shape (n_frames, 2K)."""
    s = np.arange(n_frames - 1, -1, -1, dtype=np.float64)[:, None]
    w = 2.0 * np.pi / (4.0 * 2.0 ** np.arange(K))
    return np.concatenate([np.sin(s * w), np.cos(s * w)], axis=1)


class Encoder(Module):
    """Motion (..., F~, J, 3) of any length F~ >= 1 to a latent (..., J, L).

    Per-frame TG features (position plus time-to-end encoding) are pooled over
    time by a mean and joined with the last frame's features.
    """

    def __init__(self, J, L, rng, *, width=32, K=6, adjacency=None):
        super().__init__()
        self.J, self.L, self.width, self.K = J, L, width, K
        self.f1 = TGLinear(J, 3 + 2 * K, width, rng, adjacency=adjacency)
        self.f2 = TGLinear(J, width, width, rng, adjacency=adjacency)
        self.g1 = TGLinear(J, 2 * width, width, rng, adjacency=adjacency)
        self.g2 = TGLinear(J, width, L, rng, adjacency=adjacency)

    def forward(self, motion):
        m = np.asarray(motion, dtype=np.float64)
        if m.ndim < 3 or m.shape[-2:] != (self.J, 3):
            raise ValidationError(f"encoder expects (..., F, {self.J}, 3), got {m.shape}")
        F = m.shape[-3]
        if F < 1:
            raise ValidationError("cannot encode an empty motion")
        pe = time_features(F, self.K)[:, None, :]
        pe = np.broadcast_to(pe, m.shape[:-1] + (2 * self.K,))
        h, c1 = self.f1.forward(np.concatenate([m, pe], axis=-1))
        h, a1 = SiLU.forward(h)
        h, c2 = self.f2.forward(h)
        h, a2 = SiLU.forward(h)
        pooled = np.concatenate([h.mean(axis=-3), h[..., -1, :, :]], axis=-1)
        g, c3 = self.g1.forward(pooled)
        g, a3 = SiLU.forward(g)
        z, c4 = self.g2.forward(g)
        return z, (c1, a1, c2, a2, c3, a3, c4, F, h.shape)

    def __call__(self, motion):
        return self.forward(motion)[0]

    def backward(self, dz, cache):
        c1, a1, c2, a2, c3, a3, c4, F, hshape = cache
        d = self.g2.backward(dz, c4)
        d = SiLU.backward(d, a3)
        d = self.g1.backward(d, c3)
        dmean, dlast = d[..., : self.width], d[..., self.width:]
        dh = np.broadcast_to((dmean / F)[..., None, :, :], hshape).copy()
        dh[..., -1, :, :] += dlast
        dh = SiLU.backward(dh, a2)
        dh = self.f2.backward(dh, c2)
        dh = SiLU.backward(dh, a1)
        dm = self.f1.backward(dh, c1)
        return dm[..., :3]


class Decoder(Module):
    """Latent plus the last two past frames to F future frames, as offsets from the last frame."""

    def __init__(self, J, L, F, rng, *, width=64, adjacency=None):
        super().__init__()
        self.J, self.L, self.F, self.width = J, L, F, width
        self.h1 = TGLinear(J, L + 9, width, rng, adjacency=adjacency)
        self.h2 = TGLinear(J, width, width, rng, adjacency=adjacency)
        self.h3 = TGLinear(J, width, 3 * F, rng, adjacency=adjacency)

    def forward(self, z, past_tail):
        z = np.asarray(z, dtype=np.float64)
        tail = np.asarray(past_tail, dtype=np.float64)
        if tail.shape[-3:] != (2, self.J, 3):
            raise ValidationError(f"past tail must be (..., 2, {self.J}, 3), got {tail.shape}")
        prev, last = tail[..., 0, :, :], tail[..., 1, :, :]
        inp = np.concatenate([z, prev, last, last - prev], axis=-1)
        h, c1 = self.h1.forward(inp)
        h, a1 = SiLU.forward(h)
        h, c2 = self.h2.forward(h)
        h, a2 = SiLU.forward(h)
        o, c3 = self.h3.forward(h)                                 # (..., J, 3F)
        o = o.reshape(*o.shape[:-1], self.F, 3)
        motion = np.swapaxes(o, -3, -2) + last[..., None, :, :]    # (..., F, J, 3)
        return motion, (c1, a1, c2, a2, c3)

    def __call__(self, z, past_tail):
        return self.forward(z, past_tail)[0]

    def backward(self, dmotion, cache):
        """Returns (dz, d past_tail)."""
        c1, a1, c2, a2, c3 = cache
        dmotion = np.asarray(dmotion)
        dlast = dmotion.sum(axis=-3)
        do = np.swapaxes(dmotion, -3, -2).reshape(*dmotion.shape[:-3], self.J, 3 * self.F)
        d = self.h3.backward(do, c3)
        d = SiLU.backward(d, a2)
        d = self.h2.backward(d, c2)
        d = SiLU.backward(d, a1)
        d = self.h1.backward(d, c1)
        L = self.L
        dz = d[..., :L]
        dprev = d[..., L:L + 3] - d[..., L + 6:L + 9]
        dlast = dlast + d[..., L + 3:L + 6] + d[..., L + 6:L + 9]
        return dz, np.stack([dprev, dlast], axis=-3)


class Autoencoder(Module):
    def __init__(self, J, L, F, rng, *, enc_width=32, dec_width=64, adjacency=None):
        super().__init__()
        self.J, self.L, self.F = J, L, F
        self.encoder = Encoder(J, L, rng, width=enc_width, adjacency=adjacency)
        self.decoder = Decoder(J, L, F, rng, width=dec_width, adjacency=adjacency)

    def encode(self, motion):
        return self.encoder(motion)

    def decode(self, z, past_tail):
        return self.decoder(z, past_tail)
