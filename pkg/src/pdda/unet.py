"""Small UNet epsilon-predictor with taps on every resolution stage.

Layout (single channel 16x16 input):

    enc1   16ch @ 16x16   -> tap 0
    enc2   32ch @  8x8    -> tap 1
    bott   32ch @  4x4    -> tap 2
    dec2   32ch @  8x8    -> tap 3 (skip from enc2)
    dec1   16ch @ 16x16   -> tap 4 (skip from enc1)
    head    1ch @ 16x16   (zero-initialized)

Each block is conv3x3 plus a projected time embedding, then silu. The
head starts at zero so an untrained model predicts eps_hat = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ta
from .autodiff import Graph, Tensor
from .diffusion import NoiseSchedule

__all__ = [
    "FeatureTap",
    "ScoreNetwork",
    "predict_eps",
    "dsm_loss",
    "train_score",
    "sinusoidal_embedding",
]

EMBED_DIM = 32
TAP_CHANNELS = [16, 32, 32, 32, 16]
TAP_RESOLUTIONS = [16, 8, 4, 8, 16]


@dataclass
class FeatureTap:
    index: int
    channels: int
    height: int
    width: int
    tensor: Tensor


def sinusoidal_embedding(t, dim: int = EMBED_DIM) -> np.ndarray:
    """Transformer-style sin/cos embedding of integer steps; shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ScoreNetwork:
    """Epsilon-predictor over (B, 1, 16, 16) images in [-1, 1]."""

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        p = {}

        def conv(name, cin, cout, k=3):
            p[f"{name}.w"] = _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k)
            p[f"{name}.b"] = np.zeros(cout)

        def time_proj(name, cout):
            # Scale-and-shift conditioning; zero init keeps t neutral at start.
            p[f"{name}.ts"] = np.zeros((EMBED_DIM, cout))
            p[f"{name}.tw"] = _kaiming_uniform(rng, (EMBED_DIM, cout), EMBED_DIM)
            p[f"{name}.tb"] = np.zeros(cout)

        for name, cin, cout in [("enc1", 1, 16), ("enc2", 16, 32),
                                ("bott", 32, 32), ("dec2", 32, 32),
                                ("dec1", 16, 16)]:
            conv(f"{name}.c1", cin, cout)
            time_proj(name, cout)
        conv("reduce", 32, 16, k=1)
        conv("head", 16, 1)
        p["head.w"][:] = 0.0  # zero head: untrained model predicts zero noise

        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def parameter_names(self):
        return sorted(self.params)

    def state_arrays(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise ValueError(f"parameter names do not match checkpoint: {sorted(missing)}")
        for k, t in self.params.items():
            if arrays[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            t.data = np.ascontiguousarray(arrays[k], dtype=np.float64)

    def _block(self, name, x, emb):
        p = self.params
        h = ta.conv2d(x, p[f"{name}.c1.w"], p[f"{name}.c1.b"])
        scale = ta.matmul(emb, p[f"{name}.ts"])
        shift = ta.matmul(emb, p[f"{name}.tw"]) + p[f"{name}.tb"]
        B, c = scale.data.shape
        h = h * (1.0 + ta.reshape(scale, (B, c, 1, 1))) \
            + ta.reshape(shift, (B, c, 1, 1))
        return ta.silu(h)

    def forward(self, x: Tensor, t) -> tuple[Tensor, list[FeatureTap]]:
        """Run the UNet on a (B, 1, 16, 16) batch at integer step(s) t."""
        if x.data.ndim != 4 or x.data.shape[1:] != (1, 16, 16):
            raise ValueError(f"expected (B, 1, 16, 16) input, got {x.data.shape}")
        B = x.data.shape[0]
        t = np.broadcast_to(np.atleast_1d(t), (B,))
        emb = Tensor._make(sinusoidal_embedding(t), False)
        p = self.params

        h1 = self._block("enc1", x, emb)                      # 16 @ 16x16
        h2 = self._block("enc2", ta.avg_pool2d(h1, 2), emb)   # 32 @ 8x8
        h3 = self._block("bott", ta.avg_pool2d(h2, 2), emb)   # 32 @ 4x4
        h4 = self._block("dec2", ta.upsample2d(h3, 2) + h2, emb)   # 32 @ 8x8
        u2 = ta.conv2d(ta.upsample2d(h4, 2), p["reduce.w"], p["reduce.b"])
        h5 = self._block("dec1", u2 + h1, emb)                # 16 @ 16x16
        eps_hat = ta.conv2d(h5, p["head.w"], p["head.b"])

        taps = [
            FeatureTap(i, c, r, r, h)
            for i, (c, r, h) in enumerate(zip(TAP_CHANNELS, TAP_RESOLUTIONS,
                                              (h1, h2, h3, h4, h5)))
        ]
        return eps_hat, taps


def predict_eps(model: ScoreNetwork, x_t: Tensor, t: int):
    """Single-image prediction: (1, 16, 16) in, (1, 16, 16) out plus taps.

    Differentiable with respect to x_t when called under an active Graph.
    """
    if x_t.data.shape != (1, 16, 16):
        raise ValueError(f"expected (1, 16, 16) image, got {x_t.data.shape}")
    batched = ta.reshape(x_t, (1, 1, 16, 16))
    eps_hat, taps = model.forward(batched, int(t))
    eps_hat = ta.reshape(eps_hat, (1, 16, 16))
    taps = [FeatureTap(f.index, f.channels, f.height, f.width,
                       ta.reshape(f.tensor, (f.channels, f.height, f.width)))
            for f in taps]
    return eps_hat, taps


def dsm_loss(model: ScoreNetwork, x0_batch: np.ndarray,
             sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """Denoising score-matching loss: mean squared eps residual.

    Draws one step t (uniform over [1, T]) and one noise sample per item.
    """
    x0_batch = np.asarray(x0_batch, dtype=np.float64)
    if x0_batch.ndim != 4 or x0_batch.shape[0] == 0:
        raise ValueError("x0_batch must be a nonempty (B, 1, 16, 16) array")
    B = x0_batch.shape[0]
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.standard_normal(x0_batch.shape)
    ab = sched.alpha_bar[t - 1].reshape(B, 1, 1, 1)
    x_t = np.sqrt(ab) * x0_batch + np.sqrt(1.0 - ab) * eps

    eps_hat, _ = model.forward(Tensor._make(x_t, False), t)
    resid = eps_hat - Tensor._make(eps, False)
    return ta.tmean(resid * resid)


def train_score(model: ScoreNetwork, images: np.ndarray, sched: NoiseSchedule,
                epochs: int = 30, lr: float = 1e-3, momentum: float = 0.9,
                batch_size: int = 32, seed: int = 0) -> list[float]:
    """SGD-with-momentum training loop; returns per-epoch mean losses."""
    if len(images) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    names = model.parameter_names()
    velocity = {k: np.zeros_like(model.params[k].data) for k in names}
    log = []
    n = len(images)
    for _epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            batch = images[order[start:start + batch_size]]
            with Graph() as g:
                loss = dsm_loss(model, batch, sched, rng)
                g.backward(loss)
            val = loss.item()
            if not np.isfinite(val):
                raise FloatingPointError(f"training diverged: loss={val}")
            losses.append(val)
            for k in names:
                p = model.params[k]
                if p.grad is None:
                    continue
                velocity[k] = momentum * velocity[k] + p.grad
                p.data = p.data - lr * velocity[k]
        log.append(float(np.mean(losses)))
    return log
