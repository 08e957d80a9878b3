"""Gated-attention CRNN trained on clip-level weak labels.

Architecture: small 3x3 conv blocks with max-pooling whose time stride
defaults to 1 (time resolution is kept for decoding), optional mean-pooling
down to a target frame count, a reshape that merges channels and frequency,
a 1-D convolution along time, a bi-directional GRU, a WaveNet-style gated
unit tanh(W_f h) * sigmoid(W_g h), and two per-class heads: a frame
classifier P[t,c] = sigmoid(w_c g_t + b_c) and an attention head
a[t,c] = sigmoid(v_c g_t + d_c). The clip score is the attention-weighted
average y_c = sum_t a[t,c] P[t,c] / sum_t a[t,c], so y_c is always a convex
combination of the frame posteriors.

Everything runs in float64 numpy with hand-written backprop, verified
against central finite differences. Training uses clip-level weighted
binary cross-entropy and Adam with early stopping.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO

import numpy as np
from scipy.special import expit as sigmoid

from sedpipe.corpus import FORMAT_VERSION, CorpusFormatError, PosteriorGrid, WeakLabel, _read_exact
from sedpipe.features import FeatureTensor
from sedpipe.sampling import MixupConfig, class_weights, mixup, plan_epoch

CHECKPOINT_MAGIC = b"SEDM"

BCE_EPS = 1e-7


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    freq_pool: int = 2
    time_pool: int = 1  # reduced stride in time by default

    def __post_init__(self):
        if min(self.out_channels, self.freq_pool, self.time_pool) < 1:
            raise ValueError("conv block dims must be >= 1")


@dataclass
class ModelConfig:
    n_mels: int = 128
    in_channels: int = 3
    conv_blocks: tuple[ConvBlock, ...] = (
        ConvBlock(16),
        ConvBlock(32),
        ConvBlock(32),
    )
    conv1d_channels: int = 64
    conv1d_kernel: int = 3
    rnn_hidden: int = 32
    gated_dim: int = 64
    n_classes: int = 10
    target_frames: int | None = 160
    # per-band standardization: (mean, std) arrays of shape (in_channels, n_mels)
    input_norm: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.conv1d_kernel % 2 == 0:
            raise ValueError("conv1d_kernel must be odd")
        dims = (
            self.n_mels,
            self.in_channels,
            self.conv1d_channels,
            self.rnn_hidden,
            self.gated_dim,
            self.n_classes,
        )
        if min(dims) < 1:
            raise ValueError("all model dims must be >= 1")
        if self.target_frames is not None and self.target_frames < 1:
            raise ValueError("target_frames must be >= 1")
        if self.final_bands < 1:
            raise ValueError("frequency axis pooled away entirely")

    @property
    def final_bands(self) -> int:
        f = self.n_mels
        for blk in self.conv_blocks:
            f //= blk.freq_pool
        return f

    @property
    def reshaped_dim(self) -> int:
        ch = self.conv_blocks[-1].out_channels if self.conv_blocks else self.in_channels
        return ch * self.final_bands


ModelParams = dict[str, np.ndarray]


def _glorot(rng: np.random.Generator, shape, fan_in, fan_out) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    p: ModelParams = {}
    cin = cfg.in_channels
    for i, blk in enumerate(cfg.conv_blocks):
        p[f"conv{i}_w"] = _glorot(
            rng, (blk.out_channels, cin, 3, 3), cin * 9, blk.out_channels * 9
        )
        p[f"conv{i}_b"] = np.zeros(blk.out_channels)
        cin = blk.out_channels
    d = cfg.reshaped_dim
    k = cfg.conv1d_kernel
    p["tconv_w"] = _glorot(rng, (cfg.conv1d_channels, d, k), d * k, cfg.conv1d_channels * k)
    p["tconv_b"] = np.zeros(cfg.conv1d_channels)
    h, din = cfg.rnn_hidden, cfg.conv1d_channels
    for direction in ("fw", "bw"):
        for gate in ("z", "r", "h"):
            p[f"gru_{direction}_w{gate}"] = _glorot(rng, (h, din), din, h)
            p[f"gru_{direction}_u{gate}"] = _glorot(rng, (h, h), h, h)
            p[f"gru_{direction}_b{gate}"] = np.zeros(h)
    p["gate_wf"] = _glorot(rng, (cfg.gated_dim, 2 * h), 2 * h, cfg.gated_dim)
    p["gate_wg"] = _glorot(rng, (cfg.gated_dim, 2 * h), 2 * h, cfg.gated_dim)
    p["cls_w"] = _glorot(rng, (cfg.n_classes, cfg.gated_dim), cfg.gated_dim, cfg.n_classes)
    p["cls_b"] = np.zeros(cfg.n_classes)
    p["att_w"] = _glorot(rng, (cfg.n_classes, cfg.gated_dim), cfg.gated_dim, cfg.n_classes)
    p["att_b"] = np.zeros(cfg.n_classes)
    return p


def zeros_like_params(params: ModelParams) -> ModelParams:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# layer primitives (batched, float64, explicit caches)

def _conv2d_forward(x, w, b):
    """3x3 convolution with 'same' zero padding. x: (B, Cin, T, F)."""
    bsz, cin, t, f = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((bsz, t, f, 9, cin), dtype=x.dtype)
    for idx in range(9):
        dt, df = divmod(idx, 3)
        cols[:, :, :, idx, :] = xp[:, :, dt : dt + t, df : df + f].transpose(0, 2, 3, 1)
    cols = cols.reshape(bsz, t, f, 9 * cin)
    w_mat = w.transpose(2, 3, 1, 0).reshape(9 * cin, cout)
    y = cols @ w_mat + b
    return y.transpose(0, 3, 1, 2), (cols, w_mat, x.shape)


def _conv2d_backward(dy, cache, w):
    cols, w_mat, x_shape = cache
    bsz, cin, t, f = x_shape
    cout = w.shape[0]
    dyt = dy.transpose(0, 2, 3, 1)  # (B, T, F, Cout)
    dw_mat = cols.reshape(-1, 9 * cin).T @ dyt.reshape(-1, cout)
    dw = dw_mat.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
    db = dyt.sum(axis=(0, 1, 2))
    dcols = (dyt @ w_mat.T).reshape(bsz, t, f, 9, cin)
    dxp = np.zeros((bsz, cin, t + 2, f + 2), dtype=dy.dtype)
    for idx in range(9):
        dt, df = divmod(idx, 3)
        dxp[:, :, dt : dt + t, df : df + f] += dcols[:, :, :, idx, :].transpose(
            0, 3, 1, 2
        )
    return dxp[:, :, 1 : 1 + t, 1 : 1 + f], dw, db


def _relu_forward(x):
    y = np.maximum(x, 0.0)
    return y, x


def _relu_backward(dy, pre):
    return dy * (pre > 0.0)


def _maxpool_forward(x, pt, pf):
    """Non-overlapping (pt, pf) max pooling; remainder frames are cropped."""
    bsz, ch, t, f = x.shape
    t2, f2 = t // pt, f // pf
    if t2 < 1 or f2 < 1:
        raise ValueError(f"pool ({pt}, {pf}) larger than input ({t}, {f})")
    crop = x[:, :, : t2 * pt, : f2 * pf]
    xr = (
        crop.reshape(bsz, ch, t2, pt, f2, pf)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(bsz, ch, t2, f2, pt * pf)
    )
    idx = np.argmax(xr, axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, (xr, idx, x.shape, pt, pf)


def _maxpool_backward(dy, cache):
    xr, idx, x_shape, pt, pf = cache
    bsz, ch, t, f = x_shape
    t2, f2 = t // pt, f // pf
    dxr = np.zeros((bsz, ch, t2, f2, pt * pf), dtype=dy.dtype)
    np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
    dcrop = (
        dxr.reshape(bsz, ch, t2, f2, pt, pf)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(bsz, ch, t2 * pt, f2 * pf)
    )
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, : t2 * pt, : f2 * pf] = dcrop
    return dx


def time_pool_matrix(t_in: int, t_out: int) -> np.ndarray:
    """Adaptive mean-pool assignment matrix (t_out, t_in); identity when equal."""
    a = np.zeros((t_out, t_in))
    for i in range(t_out):
        lo = (i * t_in) // t_out
        hi = -(-((i + 1) * t_in) // t_out)  # ceil
        a[i, lo:hi] = 1.0 / (hi - lo)
    return a


def _tconv_forward(x, w, b):
    """1-D convolution along time with 'same' zero padding. x: (B, T, D)."""
    bsz, t, din = x.shape
    dout, _, k = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    cols = np.empty((bsz, t, k, din), dtype=x.dtype)
    for j in range(k):
        cols[:, :, j, :] = xp[:, j : j + t, :]
    cols = cols.reshape(bsz, t, k * din)
    w_mat = w.transpose(2, 1, 0).reshape(k * din, dout)
    y = cols @ w_mat + b
    return y, (cols, w_mat, x.shape, k)


def _tconv_backward(dy, cache, w):
    cols, w_mat, x_shape, k = cache
    bsz, t, din = x_shape
    dout = w.shape[0]
    pad = k // 2
    dw_mat = cols.reshape(-1, k * din).T @ dy.reshape(-1, dout)
    dw = dw_mat.reshape(k, din, dout).transpose(2, 1, 0)
    db = dy.sum(axis=(0, 1))
    dcols = (dy @ w_mat.T).reshape(bsz, t, k, din)
    dxp = np.zeros((bsz, t + 2 * pad, din), dtype=dy.dtype)
    for j in range(k):
        dxp[:, j : j + t, :] += dcols[:, :, j, :]
    return dxp[:, pad : pad + t, :], dw, db


def _gru_forward(x, params, direction):
    """One GRU direction. x: (B, T, Din) -> h: (B, T, H).

    z_t = sigmoid(Wz x_t + Uz h_{t-1} + bz)
    r_t = sigmoid(Wr x_t + Ur h_{t-1} + br)
    c_t = tanh(Wh x_t + Uh (r_t * h_{t-1}) + bh)
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t
    """
    wz, uz, bz = (params[f"gru_{direction}_{n}z"] for n in ("w", "u", "b"))
    wr, ur, br = (params[f"gru_{direction}_{n}r"] for n in ("w", "u", "b"))
    wh, uh, bh = (params[f"gru_{direction}_{n}h"] for n in ("w", "u", "b"))
    bsz, t, _ = x.shape
    hdim = wz.shape[0]
    h = np.zeros((bsz, t, hdim), dtype=x.dtype)
    steps = []
    h_prev = np.zeros((bsz, hdim), dtype=x.dtype)
    xw_z = x @ wz.T + bz
    xw_r = x @ wr.T + br
    xw_h = x @ wh.T + bh
    for step in range(t):
        z = sigmoid(xw_z[:, step] + h_prev @ uz.T)
        r = sigmoid(xw_r[:, step] + h_prev @ ur.T)
        c = np.tanh(xw_h[:, step] + (r * h_prev) @ uh.T)
        h_t = (1.0 - z) * h_prev + z * c
        steps.append((z, r, c, h_prev))
        h[:, step] = h_t
        h_prev = h_t
    return h, (x, steps)


def _gru_backward(dh_out, cache, params, direction):
    wz, uz = params[f"gru_{direction}_wz"], params[f"gru_{direction}_uz"]
    wr, ur = params[f"gru_{direction}_wr"], params[f"gru_{direction}_ur"]
    wh, uh = params[f"gru_{direction}_wh"], params[f"gru_{direction}_uh"]
    x, steps = cache
    bsz, t, din = x.shape
    grads = {
        f"gru_{direction}_wz": np.zeros_like(wz),
        f"gru_{direction}_uz": np.zeros_like(uz),
        f"gru_{direction}_bz": np.zeros(wz.shape[0]),
        f"gru_{direction}_wr": np.zeros_like(wr),
        f"gru_{direction}_ur": np.zeros_like(ur),
        f"gru_{direction}_br": np.zeros(wr.shape[0]),
        f"gru_{direction}_wh": np.zeros_like(wh),
        f"gru_{direction}_uh": np.zeros_like(uh),
        f"gru_{direction}_bh": np.zeros(wh.shape[0]),
    }
    dx = np.zeros_like(x)
    dh_carry = np.zeros((bsz, wz.shape[0]), dtype=x.dtype)
    for step in range(t - 1, -1, -1):
        z, r, c, h_prev = steps[step]
        dh = dh_out[:, step] + dh_carry
        dz_pre = dh * (c - h_prev) * z * (1.0 - z)
        dc_pre = dh * z * (1.0 - c * c)
        drh = dc_pre @ uh  # gradient into (r * h_prev)
        dr_pre = drh * h_prev * r * (1.0 - r)
        x_t = x[:, step]
        grads[f"gru_{direction}_wz"] += dz_pre.T @ x_t
        grads[f"gru_{direction}_uz"] += dz_pre.T @ h_prev
        grads[f"gru_{direction}_bz"] += dz_pre.sum(axis=0)
        grads[f"gru_{direction}_wr"] += dr_pre.T @ x_t
        grads[f"gru_{direction}_ur"] += dr_pre.T @ h_prev
        grads[f"gru_{direction}_br"] += dr_pre.sum(axis=0)
        grads[f"gru_{direction}_wh"] += dc_pre.T @ x_t
        grads[f"gru_{direction}_uh"] += dc_pre.T @ (r * h_prev)
        grads[f"gru_{direction}_bh"] += dc_pre.sum(axis=0)
        dx[:, step] = dz_pre @ wz + dr_pre @ wr + dc_pre @ wh
        dh_carry = (
            dh * (1.0 - z) + dz_pre @ uz + dr_pre @ ur + drh * r
        )
    return dx, grads


# ---------------------------------------------------------------------------
# full network

def forward(params: ModelParams, cfg: ModelConfig, x: np.ndarray) -> dict:
    """Run the network on a batch. x: (B, in_channels, T, F).

    Returns a cache dict; cache["P"] is (B, T', C) frame posteriors,
    cache["y"] is (B, C) clip scores.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, T, F) input, got ndim {x.ndim}")
    if x.shape[1] != cfg.in_channels or x.shape[3] != cfg.n_mels:
        raise ValueError(
            f"input shape {x.shape} incompatible with config "
            f"({cfg.in_channels} channels, {cfg.n_mels} bands)"
        )
    cache: dict = {"x_raw_shape": x.shape}
    if cfg.input_norm is not None:
        mean, std = cfg.input_norm
        x = (x - mean[None, :, None, :]) / std[None, :, None, :]

    conv_caches = []
    for i, blk in enumerate(cfg.conv_blocks):
        x, c_conv = _conv2d_forward(x, params[f"conv{i}_w"], params[f"conv{i}_b"])
        x, c_relu = _relu_forward(x)
        x, c_pool = _maxpool_forward(x, blk.time_pool, blk.freq_pool)
        conv_caches.append((c_conv, c_relu, c_pool))
    cache["conv"] = conv_caches

    t_conv = x.shape[2]
    if cfg.target_frames is not None and t_conv > cfg.target_frames:
        a_mat = time_pool_matrix(t_conv, cfg.target_frames)
        x = np.einsum("pt,bctf->bcpf", a_mat, x)
        cache["time_pool"] = a_mat
    else:
        cache["time_pool"] = None

    bsz, ch, t_out, f_out = x.shape
    cache["pre_reshape_shape"] = x.shape
    seq = x.transpose(0, 2, 1, 3).reshape(bsz, t_out, ch * f_out)

    seq, cache["tconv"] = _tconv_forward(seq, params["tconv_w"], params["tconv_b"])
    seq, cache["tconv_relu"] = _relu_forward(seq)

    h_fw, cache["gru_fw"] = _gru_forward(seq, params, "fw")
    h_bw_rev, cache["gru_bw"] = _gru_forward(seq[:, ::-1], params, "bw")
    h = np.concatenate([h_fw, h_bw_rev[:, ::-1]], axis=2)
    cache["h"] = h

    f_pre = h @ params["gate_wf"].T
    s_pre = h @ params["gate_wg"].T
    tanh_f = np.tanh(f_pre)
    sig_s = sigmoid(s_pre)
    g = tanh_f * sig_s
    cache["gate"] = (tanh_f, sig_s)
    cache["g"] = g

    p = sigmoid(g @ params["cls_w"].T + params["cls_b"])
    a = sigmoid(g @ params["att_w"].T + params["att_b"])
    num = (a * p).sum(axis=1)
    den = np.maximum(a.sum(axis=1), 1e-30)
    y = num / den
    cache.update(P=p, A=a, den=den, y=y)
    return cache


def loss(
    y: np.ndarray,
    target: np.ndarray,
    weights: np.ndarray | None = None,
) -> float:
    """Weighted clip-level binary cross-entropy, averaged over classes
    (and over the batch when y is 2-D). Probabilities are clamped to
    [BCE_EPS, 1 - BCE_EPS].
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if y.shape != target.shape:
        raise ValueError(f"shape mismatch: y {y.shape} vs target {target.shape}")
    c = y.shape[1]
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    yc = np.clip(y, BCE_EPS, 1.0 - BCE_EPS)
    per_clip = -(w * (target * np.log(yc) + (1.0 - target) * np.log(1.0 - yc))).sum(
        axis=1
    ) / c
    return float(per_clip.mean())


def loss_grad(
    y: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None
) -> np.ndarray:
    """dL/dy for the loss above, zero where the clamp is active."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    bsz, c = y.shape
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    yc = np.clip(y, BCE_EPS, 1.0 - BCE_EPS)
    grad = -(w * (target / yc - (1.0 - target) / (1.0 - yc))) / (c * bsz)
    grad[(y < BCE_EPS) | (y > 1.0 - BCE_EPS)] = 0.0
    return grad


def backward(
    params: ModelParams, cfg: ModelConfig, cache: dict, dy: np.ndarray
) -> ModelParams:
    """Analytic gradients of every parameter given dL/dy (B, C)."""
    p, a, den = cache["P"], cache["A"], cache["den"]
    g, y = cache["g"], cache["y"]
    dy = np.atleast_2d(np.asarray(dy, dtype=np.float64))

    dnum = dy / den
    dp = a * dnum[:, None, :]
    da = p * dnum[:, None, :] - (dy * y / den)[:, None, :]

    du = dp * p * (1.0 - p)
    dv = da * a * (1.0 - a)
    bsz, t, c = du.shape
    gd = g.shape[2]
    du2, dv2, g2 = du.reshape(-1, c), dv.reshape(-1, c), g.reshape(-1, gd)
    grads: ModelParams = {
        "cls_w": du2.T @ g2,
        "cls_b": du2.sum(axis=0),
        "att_w": dv2.T @ g2,
        "att_b": dv2.sum(axis=0),
    }
    dg = du @ params["cls_w"] + dv @ params["att_w"]

    tanh_f, sig_s = cache["gate"]
    df_pre = dg * sig_s * (1.0 - tanh_f * tanh_f)
    ds_pre = dg * tanh_f * sig_s * (1.0 - sig_s)
    h = cache["h"]
    h2 = h.reshape(-1, h.shape[2])
    grads["gate_wf"] = df_pre.reshape(-1, gd).T @ h2
    grads["gate_wg"] = ds_pre.reshape(-1, gd).T @ h2
    dh = df_pre @ params["gate_wf"] + ds_pre @ params["gate_wg"]

    hdim = cfg.rnn_hidden
    dseq_fw, g_fw = _gru_backward(dh[:, :, :hdim], cache["gru_fw"], params, "fw")
    dseq_bw, g_bw = _gru_backward(
        dh[:, ::-1, hdim:], cache["gru_bw"], params, "bw"
    )
    grads.update(g_fw)
    grads.update(g_bw)
    dseq = dseq_fw + dseq_bw[:, ::-1]

    dseq = _relu_backward(dseq, cache["tconv_relu"])
    dseq, dw, db = _tconv_backward(dseq, cache["tconv"], params["tconv_w"])
    grads["tconv_w"] = dw
    grads["tconv_b"] = db

    bsz, t_out, _ = dseq.shape
    _, ch, _, f_out = cache["pre_reshape_shape"]
    dx = dseq.reshape(bsz, t_out, ch, f_out).transpose(0, 2, 1, 3)

    if cache["time_pool"] is not None:
        dx = np.einsum("pt,bcpf->bctf", cache["time_pool"], dx)

    for i in range(len(cfg.conv_blocks) - 1, -1, -1):
        c_conv, c_relu, c_pool = cache["conv"][i]
        dx = _maxpool_backward(dx, c_pool)
        dx = _relu_backward(dx, c_relu)
        dx, dw, db = _conv2d_backward(dx, c_conv, params[f"conv{i}_w"])
        grads[f"conv{i}_w"] = dw
        grads[f"conv{i}_b"] = db

    for key, val in grads.items():
        if not np.all(np.isfinite(val)):
            raise FloatingPointError(f"non-finite gradient in {key}")
    return grads


def grad_check(
    params: ModelParams,
    cfg: ModelConfig,
    x: np.ndarray,
    target: np.ndarray,
    weights: np.ndarray | None = None,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences over every parameter element, in double precision.
    """
    cache = forward(params, cfg, x)
    grads = backward(params, cfg, cache, loss_grad(cache["y"], target, weights))

    def loss_at() -> float:
        c = forward(params, cfg, x)
        return loss(c["y"], target, weights)

    worst = 0.0
    for key in sorted(params):
        arr = params[key]
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss_at()
            arr[idx] = orig - step
            down = loss_at()
            arr[idx] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = grads[key][idx]
            scale = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / scale)
            it.iternext()
    return worst


def kink_margin(cache: dict) -> float:
    """Distance of the cached activations from the network's
    nondifferentiable points: ReLU corners, max-pool ties, and the BCE
    probability clamp. Finite differences are only a valid gradient oracle
    away from these, so checks resample inputs when the margin is tiny.
    """
    margin = np.inf
    for _, relu_pre, pool_cache in cache["conv"]:
        margin = min(margin, float(np.abs(relu_pre).min()))
        xr = pool_cache[0]
        if xr.shape[-1] > 1:
            top2 = np.sort(xr, axis=-1)[..., -2:]
            gap = top2[..., 1] - top2[..., 0]
            # ties between clamped zeros are benign: the gradient is zero on
            # both sides of the tie, so only positive-valued ties matter
            hazardous = top2[..., 1] > 0.0
            if hazardous.any():
                margin = min(margin, float(gap[hazardous].min()))
    margin = min(margin, float(np.abs(cache["tconv_relu"]).min()))
    y = cache["y"]
    margin = min(margin, float(np.abs(y - BCE_EPS).min()))
    margin = min(margin, float(np.abs(1.0 - BCE_EPS - y).min()))
    return margin


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 20
    max_epochs: int = 50
    early_stop_patience: int | None = 7
    seed: int = 0
    use_class_weights: bool = False
    mixup: MixupConfig = field(default_factory=MixupConfig)
    balance_cap: float = 6.0
    use_balance: bool = True
    val_fraction: float = 0.1

    def __post_init__(self):
        if min(self.lr, 0.0) < 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("lr, batch_size, max_epochs must be positive")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


class AdamState:
    """Adaptive-moment optimizer, beta1 0.9, beta2 0.999, eps 1e-8."""

    def __init__(self, params: ModelParams, lr: float):
        self.lr = lr
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.m = zeros_like_params(params)
        self.v = zeros_like_params(params)
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for key, g in grads.items():
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[key] / b1c
            v_hat = self.v[key] / b2c
            params[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def input_norm_stats(
    tensors: list[FeatureTensor],
) -> tuple[np.ndarray, np.ndarray]:
    """Per-(channel, band) mean and std over all frames of all clips."""
    total = None
    total_sq = None
    count = 0
    for tens in tensors:
        v = tens.values.astype(np.float64)
        s = v.sum(axis=1)
        sq = (v * v).sum(axis=1)
        total = s if total is None else total + s
        total_sq = sq if total_sq is None else total_sq + sq
        count += v.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    # floor keeps near-constant bands from exploding after standardization
    return mean, np.maximum(np.sqrt(var), 1e-3)


def _stable_split(clip_ids: list[str], fraction: float) -> set[int]:
    """Indices of the validation subset, chosen by md5 order of clip_id."""
    n_val = max(1, int(round(fraction * len(clip_ids))))
    ranked = sorted(
        range(len(clip_ids)),
        key=lambda i: hashlib.md5(clip_ids[i].encode("utf-8")).hexdigest(),
    )
    return set(ranked[:n_val])


def _forward_loss_batch(params, cfg, xs, ys, weights):
    """Mean loss over a list of equally-shaped items, with gradients."""
    x = np.stack(xs)
    cache = forward(params, cfg, x)
    y_true = np.stack(ys)
    batch_loss = loss(cache["y"], y_true, weights)
    grads = backward(params, cfg, cache, loss_grad(cache["y"], y_true, weights))
    return batch_loss, grads


def _eval_loss(params, cfg, items, weights):
    if not items:
        return None
    total = 0.0
    for tens, target in items:
        cache = forward(params, cfg, tens.values)
        total += loss(cache["y"], target, weights)
    return total / len(items)


def train(
    dataset: list[tuple[FeatureTensor, np.ndarray]],
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    val_dataset: list[tuple[FeatureTensor, np.ndarray]] | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Adam training loop with class-balanced epochs, mixup, and early
    stopping on validation loss. Returns the best-validation parameters
    (final parameters when patience is disabled) and the epoch history.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    rng = np.random.default_rng(train_cfg.seed)
    n_classes = model_cfg.n_classes

    if model_cfg.input_norm is None:
        stats = input_norm_stats([tens for tens, _ in dataset])
        model_cfg = replace(model_cfg, input_norm=stats)

    if train_cfg.early_stop_patience is not None and val_dataset is None:
        val_idx = _stable_split([t.clip_id for t, _ in dataset], train_cfg.val_fraction)
        if len(val_idx) < len(dataset):
            val_dataset = [dataset[i] for i in sorted(val_idx)]
            dataset = [dataset[i] for i in range(len(dataset)) if i not in val_idx]

    weak = [
        WeakLabel(tens.clip_id or str(i), frozenset(np.flatnonzero(target > 0.5).tolist()))
        for i, (tens, target) in enumerate(dataset)
    ]
    weights = (
        class_weights(weak, n_classes) if train_cfg.use_class_weights else None
    )

    params = init_params(model_cfg, rng)
    adam = AdamState(params, train_cfg.lr)
    history: list[dict] = []
    best_val = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    wait = 0

    labeled = [lab for lab in weak if lab.classes]
    labeled_idx = [i for i, lab in enumerate(weak) if lab.classes]
    negative_idx = [i for i, lab in enumerate(weak) if not lab.classes]

    for epoch in range(train_cfg.max_epochs):
        if train_cfg.use_balance and labeled:
            plan = plan_epoch(labeled, n_classes, train_cfg.balance_cap, rng)
            order = [labeled_idx[j] for j in plan.order]
            # clips with an empty label set fall outside the class quotas;
            # keep them as negatives, once per epoch
            order.extend(negative_idx)
            order = [order[j] for j in rng.permutation(len(order))]
        else:
            order = rng.permutation(len(dataset)).tolist()

        epoch_loss = 0.0
        n_items = 0
        for start in range(0, len(order), train_cfg.batch_size):
            batch_idx = order[start : start + train_cfg.batch_size]
            xs = [dataset[i][0].values.astype(np.float64) for i in batch_idx]
            ys = [np.asarray(dataset[i][1], dtype=np.float64) for i in batch_idx]
            if train_cfg.mixup.enabled and len(xs) > 1:
                xs, ys = _mixup_same_shape(xs, ys, train_cfg.mixup, rng)

            # group by shape; clips of different lengths cannot be stacked
            groups: dict[tuple, list[int]] = {}
            for j, xv in enumerate(xs):
                groups.setdefault(xv.shape, []).append(j)
            grads_total = None
            batch_loss = 0.0
            for shape_key in sorted(groups, key=str):
                members = groups[shape_key]
                frac = len(members) / len(xs)
                g_loss, g_grads = _forward_loss_batch(
                    params,
                    model_cfg,
                    [xs[j] for j in members],
                    [ys[j] for j in members],
                    weights,
                )
                batch_loss += g_loss * frac
                if grads_total is None:
                    grads_total = {k: v * frac for k, v in g_grads.items()}
                else:
                    for k in grads_total:
                        grads_total[k] += g_grads[k] * frac
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}", history
                )
            adam.step(params, grads_total)
            epoch_loss += batch_loss * len(batch_idx)
            n_items += len(batch_idx)

        train_loss = epoch_loss / max(n_items, 1)
        val_loss = _eval_loss(params, model_cfg, val_dataset or [], weights)
        history.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
        )

        if train_cfg.early_stop_patience is not None and val_loss is not None:
            if val_loss < best_val:
                best_val = val_loss
                best_params = {k: v.copy() for k, v in params.items()}
                wait = 0
            else:
                wait += 1
                if wait >= train_cfg.early_stop_patience:
                    break

    if train_cfg.early_stop_patience is not None and np.isfinite(best_val):
        final = best_params
    else:
        final = params
    return final, history


def _mixup_same_shape(xs, ys, cfg: MixupConfig, rng: np.random.Generator):
    """Mixup restricted to partners of the same tensor shape."""
    shapes = {x.shape for x in xs}
    if len(shapes) == 1:
        return mixup(xs, ys, cfg, rng)
    mixed_x = list(xs)
    mixed_y = list(ys)
    for shape in sorted(shapes, key=str):
        members = [j for j, x in enumerate(xs) if x.shape == shape]
        sub_x, sub_y = mixup(
            [xs[j] for j in members], [ys[j] for j in members], cfg, rng
        )
        for j, mx, my in zip(members, sub_x, sub_y):
            mixed_x[j] = mx
            mixed_y[j] = my
    return mixed_x, mixed_y


def infer(
    params: ModelParams,
    cfg: ModelConfig,
    tensor: FeatureTensor,
    clip_duration: float | None = None,
) -> PosteriorGrid:
    """Forward pass packaged as a posterior grid for decoding."""
    cache = forward(params, cfg, tensor.values)
    duration = tensor.clip_duration if clip_duration is None else clip_duration
    if duration <= 0:
        raise ValueError(f"clip {tensor.clip_id!r} has no positive duration")
    return PosteriorGrid(tensor.clip_id, duration, cache["P"][0])


# ---------------------------------------------------------------------------
# checkpoint container: magic 'SEDM', u32 version, u32 array count, then per
# array a name/shape header, then all float32 payloads in header order.

def save_checkpoint(arrays: dict[str, np.ndarray], sink: BinaryIO) -> None:
    sink.write(CHECKPOINT_MAGIC)
    sink.write(struct.pack("<I", FORMAT_VERSION))
    keys = sorted(arrays)
    sink.write(struct.pack("<I", len(keys)))
    for key in keys:
        name = key.encode("utf-8")
        arr = arrays[key]
        sink.write(struct.pack("<I", len(name)))
        sink.write(name)
        sink.write(struct.pack("<I", arr.ndim))
        sink.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for key in keys:
        sink.write(arrays[key].astype("<f4").tobytes(order="C"))


def load_checkpoint(source: BinaryIO) -> dict[str, np.ndarray]:
    magic = _read_exact(source, 4)
    if magic != CHECKPOINT_MAGIC:
        raise CorpusFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(source, 4))
    if version != FORMAT_VERSION:
        raise CorpusFormatError(f"unsupported version {version}")
    (count,) = struct.unpack("<I", _read_exact(source, 4))
    headers = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(source, 4))
        name = _read_exact(source, name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read_exact(source, 4))
        shape = struct.unpack(f"<{ndim}I", _read_exact(source, 4 * ndim))
        headers.append((name, shape))
    out: dict[str, np.ndarray] = {}
    for name, shape in headers:
        n = int(np.prod(shape)) if shape else 1
        raw = _read_exact(source, 4 * n)
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return out
