"""Small U-Net noise predictor over the ``(3, J, f)`` motion image.

Layout (``ch_i = base_width * 2**i``)::

    cond  = time_mlp(sinusoid(t)) + label_table[c]
    h     = conv_in(x)                                  3 -> ch_0
    down i: h = act(conv(h)) + proj_i(cond); skip_i = h; h = avgpool2(h)
                                                        ch_i -> ch_{i+1}
    mid:    h = act(conv(h)) + proj(cond)               ch_D -> ch_D
    up i:   h = act(conv(concat(upsample2(h), skip_i))) + proj_i(cond)
                                                        2 ch_{i+1} -> ch_i
    out   = conv_out(h)                                 ch_0 -> 3

All convolutions are 3x3 with zero "same" padding.  ``proj`` outputs are
broadcast over the spatial axes.  The label table has ``num_classes + 1``
rows; the last row is the null label used by guidance.

Inputs whose ``J`` or ``f`` is not a multiple of ``2**depth`` are zero-padded
on the bottom/right and the prediction is cropped back.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .optim import AdamState, adam_step

CKPT_MAGIC = b"MDCK"
CKPT_VERSION = 1
ACTIVATIONS = ("silu", "linear")


@dataclass(frozen=True)
class DenoiserConfig:
    joints: int = 8
    frames: int = 32
    num_classes: int = 4
    T: int = 50
    base_width: int = 16
    depth: int = 2
    embed_dim: int | None = None
    activation: str = "silu"

    def __post_init__(self):
        if self.embed_dim is None:
            object.__setattr__(self, "embed_dim", 4 * self.base_width)
        for name in ("joints", "frames", "num_classes", "T", "base_width", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def padded_shape(self) -> tuple[int, int]:
        m = 2**self.depth
        return (-(-self.joints // m) * m, -(-self.frames // m) * m)

    @property
    def padding(self) -> tuple[int, int]:
        H, W = self.padded_shape
        return H - self.joints, W - self.frames

    @property
    def null_label(self) -> int:
        return self.num_classes

    def channels(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.depth + 1)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["padding"] = list(self.padding)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = {k: v for k, v in d.items() if k != "padding"}
        return cls(**d)


# -- primitive layers --------------------------------------------------------


def sinusoidal_features(t, dim: int) -> np.ndarray:
    """``[sin(t w_k), cos(t w_k)]`` with ``w_k = 10000 ** (-k / half)``; shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros((t.size, 1))], axis=1)
    return feats


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _im2col(x: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)


def conv3x3(x, w, b):
    B, _, H, W = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(B, H, W, -1).transpose(0, 3, 1, 2), cols


def conv3x3_backward(dout, cols, x_shape, w):
    B, C, H, W = x_shape
    Cout = w.shape[0]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, Cout)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(Cout, -1)).reshape(B, H, W, C, 3, 3)
    dxp = np.zeros((B, C, H + 2, W + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + H, j : j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw, db


def avgpool2(x):
    B, C, H, W = x.shape
    return x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(d):
    return np.repeat(np.repeat(d, 2, axis=2), 2, axis=3) * 0.25


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(d):
    B, C, H, W = d.shape
    return d.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))


# -- model -------------------------------------------------------------------


def init_params(config: DenoiserConfig, rng=None) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases, zero output conv."""
    rng = np.random.default_rng(rng)
    E = config.embed_dim
    p: dict[str, np.ndarray] = {}

    def dense(name, n_out, n_in):
        bound = 1.0 / math.sqrt(n_in)
        p[f"{name}.w"] = rng.uniform(-bound, bound, (n_out, n_in))
        p[f"{name}.b"] = np.zeros(n_out)

    def conv(name, c_out, c_in):
        bound = 1.0 / math.sqrt(c_in * 9)
        p[f"{name}.w"] = rng.uniform(-bound, bound, (c_out, c_in, 3, 3))
        p[f"{name}.b"] = np.zeros(c_out)

    ch = config.channels()
    dense("time1", E, E)
    dense("time2", E, E)
    p["label.table"] = rng.standard_normal((config.num_classes + 1, E)) * 0.5
    conv("in", ch[0], 3)
    for i in range(config.depth):
        conv(f"down{i}", ch[i + 1], ch[i])
        dense(f"down{i}.proj", ch[i + 1], E)
    conv("mid", ch[-1], ch[-1])
    dense("mid.proj", ch[-1], E)
    for i in reversed(range(config.depth)):
        conv(f"up{i}", ch[i], 2 * ch[i + 1])
        dense(f"up{i}.proj", ch[i], E)
    p["out.w"] = np.zeros((3, ch[0], 3, 3))
    p["out.b"] = np.zeros(3)
    return p


def parameter_count(config: DenoiserConfig) -> int:
    return sum(a.size for a in init_params(config, 0).values())


class Denoiser:
    """Noise predictor ``eps(x_t, t, c)`` with cached forward, exact backward and Adam."""

    def __init__(self, config: DenoiserConfig, params=None, rng=None, adam: AdamState | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config, rng)
        expected = init_params(config, 0)
        if set(expected) != set(self.params):
            raise ValueError("parameter names do not match the config")
        for k, a in expected.items():
            if self.params[k].shape != a.shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {a.shape}")
        self.adam = adam if adam is not None else AdamState.zeros_like(self.params)
        self._cache = None

    # -- conditioning

    def time_embedding(self, t) -> np.ndarray:
        return self._time_embedding(t)[0]

    def _time_embedding(self, t):
        p = self.params
        feats = sinusoidal_features(t, self.config.embed_dim)
        a1 = feats @ p["time1.w"].T + p["time1.b"]
        h1 = self._act(a1)
        return h1 @ p["time2.w"].T + p["time2.b"], (feats, a1, h1)

    def label_embedding(self, c) -> np.ndarray:
        c = np.asarray(c)
        if np.any(c < 0) or np.any(c > self.config.num_classes):
            raise ValueError(f"label out of range [0,{self.config.num_classes}] (last is the null label)")
        return self.params["label.table"][c]

    def conditioning(self, t, c) -> np.ndarray:
        return self._time_embedding(t)[0] + self.label_embedding(c)

    # -- activation

    def _act(self, z):
        if self.config.activation == "linear":
            return z
        return z * _sigmoid(z)

    def _act_grad(self, z, d):
        if self.config.activation == "linear":
            return d
        s = _sigmoid(z)
        return d * s * (1.0 + z * (1.0 - s))

    # -- passes

    def _check_input(self, x, t, c):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (3, cfg.joints, cfg.frames):
            raise ValueError(
                f"expected input of shape (B, 3, {cfg.joints}, {cfg.frames}), got {x.shape}"
            )
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (B,))
        if np.any(t < 0) or np.any(t > cfg.T):
            raise ValueError(f"diffusion step out of range [0, {cfg.T}]")
        return x, t, c, single

    def predict(self, x, t, c) -> np.ndarray:
        return self.forward(x, t, c, cache=False)

    __call__ = predict

    def forward(self, x, t, c, cache: bool = False) -> np.ndarray:
        x, t, c, single = self._check_input(x, t, c)
        cfg, p = self.config, self.params
        ph, pw = cfg.padding
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
        temb, tcache = self._time_embedding(t)
        emb = temb + self.label_embedding(c)

        def cond(name, z):
            proj = emb @ p[f"{name}.proj.w"].T + p[f"{name}.proj.b"]
            return self._act(z) + proj[:, :, None, None]

        stages = []
        h, cols = conv3x3(x, p["in.w"], p["in.b"])
        stages.append(("in", x.shape, cols, None))
        skips = []
        for i in range(cfg.depth):
            z, cols = conv3x3(h, p[f"down{i}.w"], p[f"down{i}.b"])
            stages.append((f"down{i}", h.shape, cols, z))
            y = cond(f"down{i}", z)
            skips.append(y)
            h = avgpool2(y)
        z, cols = conv3x3(h, p["mid.w"], p["mid.b"])
        stages.append(("mid", h.shape, cols, z))
        h = cond("mid", z)
        for i in reversed(range(cfg.depth)):
            u = np.concatenate([upsample2(h), skips[i]], axis=1)
            z, cols = conv3x3(u, p[f"up{i}.w"], p[f"up{i}.b"])
            stages.append((f"up{i}", u.shape, cols, z))
            h = cond(f"up{i}", z)
        out, cols = conv3x3(h, p["out.w"], p["out.b"])
        stages.append(("out", h.shape, cols, None))
        out = out[:, :, : cfg.joints, : cfg.frames]

        if cache:
            self._cache = {"t": t, "c": c, "emb": emb, "tcache": tcache, "stages": stages}
        elif not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite parameters produced non-finite output")
        return out[0] if single else out

    def backward(self, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of the loss for every parameter, given ``dLoss/d eps_hat``."""
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        cfg, p = self.config, self.params
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.ndim == 3:
            grad_out = grad_out[None]
        ph, pw = cfg.padding
        if ph or pw:
            grad_out = np.pad(grad_out, ((0, 0), (0, 0), (0, ph), (0, pw)))
        stages = {name: (shape, cols, z) for name, shape, cols, z in cache["stages"]}
        emb = cache["emb"]
        g: dict[str, np.ndarray] = {}
        demb = np.zeros_like(emb)

        def conv_back(name, dout):
            shape, cols, _ = stages[name]
            dx, g[f"{name}.w"], g[f"{name}.b"] = conv3x3_backward(dout, cols, shape, p[f"{name}.w"])
            return dx

        def cond_back(name, dy):
            nonlocal demb
            dproj = dy.sum(axis=(2, 3))
            g[f"{name}.proj.w"] = dproj.T @ emb
            g[f"{name}.proj.b"] = dproj.sum(axis=0)
            demb += dproj @ p[f"{name}.proj.w"]
            _, _, z = stages[name]
            return self._act_grad(z, dy)

        dh = conv_back("out", grad_out)
        dskips = [None] * cfg.depth
        for i in range(cfg.depth):
            dz = cond_back(f"up{i}", dh)
            du = conv_back(f"up{i}", dz)
            c_up = du.shape[1] // 2
            dskips[i] = du[:, c_up:]
            dh = upsample2_backward(du[:, :c_up])
        dz = cond_back("mid", dh)
        dh = conv_back("mid", dz)
        for i in reversed(range(cfg.depth)):
            dy = avgpool2_backward(dh) + dskips[i]
            dz = cond_back(f"down{i}", dy)
            dh = conv_back(f"down{i}", dz)
        conv_back("in", dh)

        table = np.zeros_like(p["label.table"])
        np.add.at(table, cache["c"], demb)
        g["label.table"] = table
        feats, a1, h1 = cache["tcache"]
        g["time2.w"] = demb.T @ h1
        g["time2.b"] = demb.sum(axis=0)
        da1 = self._act_grad(a1, demb @ p["time2.w"])
        g["time1.w"] = da1.T @ feats
        g["time1.b"] = da1.sum(axis=0)
        return {k: g[k] for k in p}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        adam_step(self.params, grads, self.adam, lr)

    def copy(self) -> "Denoiser":
        return Denoiser(self.config, {k: v.copy() for k, v in self.params.items()}, adam=self.adam.copy())

    def num_parameters(self) -> int:
        return sum(a.size for a in self.params.values())


# -- checkpoint container ----------------------------------------------------
#
# "MDCK" | u8 version | u32 len + config JSON | u32 len + manifest JSON
# | u32 n_arrays | n x (u16 name len, name, u8 ndim, ndim x u32 dims)
# | weights (f64, layer order) | adam m (f64) | adam v (f64) | u64 adam step
# | 3 x f64 (beta1, beta2, eps)


def _pack_json(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_to_bytes(model: Denoiser, manifest: dict | None = None) -> bytes:
    names = list(model.params)
    parts = [CKPT_MAGIC, struct.pack("<B", CKPT_VERSION)]
    parts.append(_pack_json(model.config.to_dict()))
    parts.append(_pack_json(manifest or {}))
    parts.append(struct.pack("<I", len(names)))
    for k in names:
        enc = k.encode("utf-8")
        shape = model.params[k].shape
        parts.append(struct.pack("<H", len(enc)) + enc + struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
    for group in (model.params, model.adam.m, model.adam.v):
        for k in names:
            parts.append(np.ascontiguousarray(group[k], dtype="<f8").tobytes())
    a = model.adam
    parts.append(struct.pack("<Q3d", a.step, a.beta1, a.beta2, a.eps))
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> tuple[Denoiser, dict]:
    from .motion_data import _Reader, DatasetFormatError

    r = _Reader(data)
    magic = r.take(4)
    if magic != CKPT_MAGIC:
        raise DatasetFormatError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}")
    (version,) = r.unpack("<B")
    if version != CKPT_VERSION:
        raise DatasetFormatError(f"unsupported checkpoint version {version}")

    def read_json():
        (n,) = r.unpack("<I")
        return json.loads(r.take(n).decode("utf-8"))

    config = DenoiserConfig.from_dict(read_json())
    manifest = read_json()
    (count,) = r.unpack("<I")
    layout = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        layout.append((name, r.unpack(f"<{ndim}I")))
    groups = []
    for _ in range(3):
        arrays = {}
        for name, shape in layout:
            size = int(np.prod(shape))
            arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        groups.append(arrays)
    step, b1, b2, eps = r.unpack("<Q3d")
    if r.pos != len(data):
        raise DatasetFormatError("trailing bytes in checkpoint")
    adam = AdamState(groups[1], groups[2], step, b1, b2, eps)
    return Denoiser(config, groups[0], adam=adam), manifest


def save_checkpoint(model: Denoiser, path, manifest: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(model, manifest))


def load_checkpoint(path) -> tuple[Denoiser, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())
