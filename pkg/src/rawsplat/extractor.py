"""Noise extractor: a small 3x3 CNN with hand-written backward pass.

Architecture (fixed): conv 1->16, ReLU, conv 16->16, ReLU, conv 16->16,
ReLU, conv 16->1. Every conv is 3x3 with reflection padding. The last
layer starts at zero so a fresh network outputs exactly zero and the
extracted noise equals the fixed pattern.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ValidationError
from .optim import AdamState, PiecewiseLR, adam_step

CHANNELS = (1, 16, 16, 16, 1)
_WEIGHTS_MAGIC = b"EXTW0001"


def _pad(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")


def _unpad(g):
    """Adjoint of reflection padding by one pixel on both spatial axes."""
    rows = g[:, 1:-1, :].copy()
    rows[:, 1, :] += g[:, 0, :]
    rows[:, -2, :] += g[:, -1, :]
    out = rows[:, :, 1:-1].copy()
    out[:, :, 1] += rows[:, :, 0]
    out[:, :, -2] += rows[:, :, -1]
    return out


def conv3x3(x, w, b):
    """``x`` (Cin, H, W), ``w`` (Cout, Cin, 3, 3) -> (Cout, H, W), reflection padded."""
    win = sliding_window_view(_pad(x), (3, 3), axis=(1, 2))  # (Cin, H, W, 3, 3)
    return np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None], win


def conv3x3_backward(win, w, g_out, shape):
    g_w = np.tensordot(g_out, win, axes=([1, 2], [1, 2]))
    g_b = g_out.sum(axis=(1, 2))
    cin, h, wd = shape
    g_pad = np.zeros((cin, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            g_pad[:, i : i + h, j : j + wd] += np.tensordot(w[:, :, i, j], g_out, axes=([0], [0]))
    return g_w, g_b, _unpad(g_pad)


class ExtractorNet:
    """Four-layer CNN mapping a fixed-pattern-subtracted frame to noise."""

    def __init__(self, seed: int = 0, channels=CHANNELS):
        rng = np.random.default_rng(seed)
        self.channels = tuple(channels)
        self.params = {}
        n_layers = len(self.channels) - 1
        for i in range(n_layers):
            cin, cout = self.channels[i], self.channels[i + 1]
            if i == n_layers - 1:
                w = np.zeros((cout, cin, 3, 3))
            else:
                w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (9 * cin))
            self.params[f"w{i}"] = w
            self.params[f"b{i}"] = np.zeros(cout)
        self.version = 0
        self._cache = None

    @property
    def n_layers(self):
        return len(self.channels) - 1

    def copy(self) -> "ExtractorNet":
        out = ExtractorNet.__new__(ExtractorNet)
        out.channels = self.channels
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.version = 0
        out._cache = None
        return out

    def touch(self):
        self.version += 1
        self._cache = None

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ValidationError("extractor input must be a 2-D image")
        h = x[None]
        layers = []
        for i in range(self.n_layers):
            pre, win = conv3x3(h, self.params[f"w{i}"], self.params[f"b{i}"])
            layers.append((win, h.shape, pre))
            h = np.maximum(pre, 0.0) if i < self.n_layers - 1 else pre
        self._cache = (x, self.version, layers)
        return h[0]

    __call__ = forward

    def backward(self, x, g_out):
        """Gradients for every weight and bias plus dL/dinput.

        ``x`` must be the input of the most recent :meth:`forward` call.
        """
        if self._cache is None or self._cache[1] != self.version:
            raise ValidationError("extractor cache is stale; run forward first")
        cached_x, _, layers = self._cache
        if cached_x is not x and not np.array_equal(cached_x, x):
            raise ValidationError("backward input differs from the cached forward input")
        g = np.asarray(g_out, dtype=np.float64)[None]
        grads = {}
        for i in range(self.n_layers - 1, -1, -1):
            win, in_shape, pre = layers[i]
            if i < self.n_layers - 1:
                g = g * (pre > 0)
            g_w, g_b, g = conv3x3_backward(win, self.params[f"w{i}"], g, in_shape)
            grads[f"w{i}"] = g_w
            grads[f"b{i}"] = g_b
        return grads, g[0]


def extract(raw_normalized, n_fp, net: ExtractorNet) -> np.ndarray:
    """Estimated noise: ``net(raw - n_fp) + n_fp``."""
    raw_normalized = np.asarray(raw_normalized, dtype=np.float64)
    n_fp = np.asarray(n_fp, dtype=np.float64)
    if raw_normalized.shape != n_fp.shape:
        raise ValidationError(f"raw {raw_normalized.shape} and n_fp {n_fp.shape} differ in shape")
    return net(raw_normalized - n_fp) + n_fp


def net_backward(net: ExtractorNet, x, g_out):
    return net.backward(x, g_out)


def extractor_optimizer(lr_values=(1e-4, 1e-5), milestones=(25_000,)) -> AdamState:
    return AdamState(schedules={"*": PiecewiseLR(tuple(lr_values), tuple(milestones))})


def extractor_step(net: ExtractorNet, grads, state: AdamState):
    adam_step(net.params, grads, state)
    net.touch()


# -- supervised warm start ------------------------------------------------------


def pretrain(net, clean_images, noise_fn, steps, state: AdamState, seed=0, log_every=0):
    """Fit ``net`` to predict synthetic noise: MSE(net(clean + n), n).

    ``noise_fn(clean, seed)`` returns a noise field without the fixed
    pattern, matching the fixed-pattern-subtracted input the network sees
    in training. Returns the per-step loss history.
    """
    rng = np.random.default_rng(seed)
    history = []
    for step in range(steps):
        clean = clean_images[rng.integers(len(clean_images))]
        noise = noise_fn(clean, int(rng.integers(2**62)))
        x = clean + noise
        pred = net(x)
        diff = pred - noise
        history.append(float(np.mean(diff * diff)))
        grads, _ = net.backward(x, 2.0 * diff / diff.size)
        extractor_step(net, grads, state)
        if log_every and step % log_every == 0:
            print(f"pretrain step {step}: mse {history[-1]:.3e}")
    return history


def prediction_mse(net, clean_images, noise_fn, seeds) -> float:
    """Mean noise-prediction MSE over ``(image, seed)`` pairs."""
    errs = []
    for clean, seed in zip(clean_images, seeds):
        noise = noise_fn(clean, seed)
        errs.append(float(np.mean((net(clean + noise) - noise) ** 2)))
    return float(np.mean(errs))


# -- serialization ----------------------------------------------------------


def save_weights(net: ExtractorNet, path) -> None:
    """Magic ``EXTW0001``, u32 header length, JSON header, little-endian f32 blocks."""
    names = sorted(net.params, key=lambda k: (int(k[1:]), k[0] == "b"))
    header = json.dumps(
        {"channels": list(net.channels),
         "blocks": [{"name": n, "shape": list(net.params[n].shape)} for n in names]}
    ).encode()
    body = b"".join(np.ascontiguousarray(net.params[n], dtype="<f4").tobytes() for n in names)
    Path(path).write_bytes(_WEIGHTS_MAGIC + struct.pack("<I", len(header)) + header + body)


def load_weights(path) -> ExtractorNet:
    buf = Path(path).read_bytes()
    if buf[:8] != _WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:8]!r}")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12 : 12 + hlen])
    net = ExtractorNet(channels=header["channels"])
    pos = 12 + hlen
    for blk in header["blocks"]:
        count = int(np.prod(blk["shape"]))
        net.params[blk["name"]] = (
            np.frombuffer(buf, "<f4", count, pos).astype(np.float64).reshape(blk["shape"])
        )
        pos += 4 * count
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return net
