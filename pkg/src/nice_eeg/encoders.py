"""TSConv EEG encoder with optional self-attention / graph-attention front end."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view

from . import numerics as nm
from .numerics import DimensionError

SPATIAL_MODULES = ("none", "sa", "ga")
GA_SLOPE = 0.2
INIT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class HyperParams:
    C: int
    T: int
    D: int
    k: int = 40
    m1: int = 25
    m2: int = 51
    s2: int = 5
    spatial_module: str = "none"
    ga_residual: bool = True

    def __post_init__(self):
        for name in ("C", "T", "D", "k", "m1", "m2", "s2"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.spatial_module not in SPATIAL_MODULES:
            raise ValueError(f"spatial_module must be one of {SPATIAL_MODULES}")
        if self.m1 > self.T:
            raise ValueError(f"m1={self.m1} exceeds T={self.T}")
        if self.m2 > self.conv_length:
            raise ValueError(f"m2={self.m2} exceeds temporal conv output {self.conv_length}")

    @property
    def conv_length(self) -> int:
        return self.T - self.m1 + 1

    @property
    def pooled_length(self) -> int:
        return nm.pool_output_length(self.conv_length, self.m2, self.s2)

    @property
    def flat_dim(self) -> int:
        return self.k * self.pooled_length

    def to_dict(self):
        return asdict(self)


@dataclass
class EncoderParams:
    """Learnable tensors plus batch-norm running statistics.

    ``tensors["logit_scale"]`` holds the temperature on log scale; similarities
    are multiplied by ``exp`` of it.
    """
    hyper: HyperParams
    tensors: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return float(np.exp(self.tensors["logit_scale"]))

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.hyper,
                             {k: v.copy() for k, v in self.tensors.items()},
                             {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.hyper,
                             {k: v.astype(dtype) for k, v in self.tensors.items()},
                             {k: v.astype(dtype) for k, v in self.buffers.items()})


def param_shapes(h: HyperParams) -> dict[str, tuple]:
    shapes = {
        "temporal_w": (h.k, 1, 1, h.m1),
        "temporal_b": (h.k,),
        "bn1_gamma": (h.k,),
        "bn1_beta": (h.k,),
        "spatial_w": (h.k, h.k, h.C, 1),
        "spatial_b": (h.k,),
        "bn2_gamma": (h.k,),
        "bn2_beta": (h.k,),
        "proj_w": (h.flat_dim, h.D),
        "proj_b": (h.D,),
        "logit_scale": (),
    }
    if h.spatial_module == "sa":
        shapes.update(sa_wq=(h.T, h.T), sa_wk=(h.T, h.T), sa_wv=(h.T, h.T))
    elif h.spatial_module == "ga":
        shapes.update(ga_w=(h.T, h.T), ga_a=(2 * h.T,))
    return shapes


_FAN_IN = {
    "temporal": lambda h: h.m1,
    "spatial": lambda h: h.k * h.C,
    "proj": lambda h: h.flat_dim,
    "sa": lambda h: h.T,
    "ga_w": lambda h: h.T,
    "ga_a": lambda h: 2 * h.T,
}


def init_params(hyper: HyperParams, seed: int = 0, dtype=np.float32) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, unit BN scale, temperature 0.07."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(hyper).items():
        if name.startswith("bn"):
            value = np.ones(shape) if name.endswith("gamma") else np.zeros(shape)
        elif name == "logit_scale":
            value = np.array(np.log(1.0 / INIT_TEMPERATURE))
        else:
            key = name.split("_")[0]
            if name in ("ga_w", "ga_a"):
                key = name
            bound = 1.0 / np.sqrt(_FAN_IN[key](hyper))
            value = rng.uniform(-bound, bound, size=shape)
        tensors[name] = np.asarray(value, dtype=dtype)
    buffers = {
        "bn1_mean": np.zeros(hyper.k, dtype), "bn1_var": np.ones(hyper.k, dtype),
        "bn2_mean": np.zeros(hyper.k, dtype), "bn2_var": np.ones(hyper.k, dtype),
    }
    return EncoderParams(hyper, tensors, buffers)


# -- spatial plug-in modules -----------------------------------------------

def sa_forward(x, wq, wk, wv):
    """Self-attention across electrodes with a residual connection.

    x: (..., C, T). Each electrode row is a token; the (T, T) projections act
    along time, so the softmax runs over electrodes and is scaled by sqrt(T).
    """
    if x.shape[-1] != wq.shape[0]:
        raise DimensionError(f"SA projections {wq.shape} do not match input {x.shape}")
    d = x.shape[-1]
    q, k, v = x @ wq, x @ wk, x @ wv
    scores = (q @ np.swapaxes(k, -1, -2)) / math.sqrt(d)  # python float keeps float32
    attn = nm.softmax_rows(scores)
    out = x + attn @ v
    return out, (x, q, k, v, attn, wq, wk, wv)


def sa_backward(dout, cache):
    x, q, k, v, attn, wq, wk, wv = cache
    d = x.shape[-1]
    dv = np.swapaxes(attn, -1, -2) @ dout
    dattn = dout @ np.swapaxes(v, -1, -2)
    dscores = nm.softmax_rows_backward(dattn, attn) / math.sqrt(d)
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    xt = np.swapaxes(x, -1, -2)
    lead = tuple(range(x.ndim - 2))
    dwq = (xt @ dq).sum(axis=lead) if lead else xt @ dq
    dwk = (xt @ dk).sum(axis=lead) if lead else xt @ dk
    dwv = (xt @ dv).sum(axis=lead) if lead else xt @ dv
    dx = dout + dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx, dwq, dwk, dwv


def ga_attention(x, w, a):
    """Attention coefficients over the fully connected electrode graph."""
    T = w.shape[1]
    h = x @ w
    logits = (h @ a[:T])[..., :, None] + (h @ a[T:])[..., None, :]
    return nm.softmax_rows(nm.leaky_relu(logits, GA_SLOPE)), h, logits


def ga_forward(x, w, a, residual=True):
    """Graph attention: every electrode aggregates ``W n_j`` over all nodes including itself."""
    if x.shape[-1] != w.shape[0] or a.shape != (2 * w.shape[1],):
        raise DimensionError(f"GA weights {w.shape}/{a.shape} do not match input {x.shape}")
    alpha, h, logits = ga_attention(x, w, a)
    out = alpha @ h
    if residual:
        out = out + x
    return out, (x, h, logits, alpha, w, a, residual)


def ga_backward(dout, cache):
    x, h, logits, alpha, w, a, residual = cache
    T = w.shape[1]
    dalpha = dout @ np.swapaxes(h, -1, -2)
    dh = np.swapaxes(alpha, -1, -2) @ dout
    dz = nm.softmax_rows_backward(dalpha, alpha) * nm.leaky_relu_grad(logits, GA_SLOPE)
    ds_src = dz.sum(axis=-1)                  # d/d(h_i . a_src)
    ds_dst = dz.sum(axis=-2)                  # d/d(h_j . a_dst)
    dh = dh + ds_src[..., :, None] * a[:T] + ds_dst[..., :, None] * a[T:]
    lead = tuple(range(x.ndim - 2))
    h2 = h.reshape(-1, T)
    da_src = ds_src.reshape(-1) @ h2
    da_dst = ds_dst.reshape(-1) @ h2
    xt = np.swapaxes(x, -1, -2)
    dw = (xt @ dh).sum(axis=lead) if lead else xt @ dh
    dx = dh @ w.T
    if residual:
        dx = dx + dout
    return dx, dw, np.concatenate([da_src, da_dst])


# -- full encoder -----------------------------------------------------------

@dataclass
class ForwardCache:
    mode: str
    module: tuple | None
    module_out: np.ndarray
    layers: dict
    buffers: dict


def _as_batch(x, h: HyperParams):
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (h.C, h.T):
        raise DimensionError(f"encoder expects (b, 1, {h.C}, {h.T}), got {x.shape}")
    return x


# activations above this size are recomputed in the backward pass
CACHE_BUDGET = 320 * 2**20


class _TemporalBlock:
    """Temporal conv -> batch norm -> ELU -> average pool, evaluated in
    channels-last chunks of trials.

    Batch-norm statistics come from the Gram matrix of the convolution
    windows, so the (b, k, C, T - m1 + 1) activation is never held in memory
    at once; the backward pass recomputes it chunk by chunk and reduces the
    weight gradients to ``dY^T X`` products. The result equals the
    composition of the primitive layers in :mod:`nice_eeg.numerics` up to
    rounding.
    """

    def __init__(self, x, p, bufs, h: HyperParams, mode, chunk, keep_bytes=CACHE_BUDGET):
        self.xs = x[:, 0]
        self.keep_bytes = keep_bytes
        self.saved = None
        self.dtype = x.dtype
        self.mode = mode
        self.chunk = max(1, chunk)
        self.h = h
        b, C, T = self.xs.shape
        self.L = h.conv_length
        self.N = b * C * self.L
        self.W = p["temporal_w"].reshape(h.k, h.m1).astype(np.float64)
        self.b = p["temporal_b"].astype(np.float64)
        self.gamma = p["bn1_gamma"].astype(np.float64)
        self.beta = p["bn1_beta"].astype(np.float64)
        self.P = nm._pool_matrix(self.L, h.m2, h.s2, self.dtype)
        self.PT = np.ascontiguousarray(self.P.T)
        if mode == "train":
            if b < 2:
                raise nm.DegenerateBatchError("batch_norm in train mode needs batch >= 2")
            # window Gram from the signal's lagged cross-products: G[j, l] is the
            # trace of the (L, L) block of S^T S starting at (j, l)
            S = self.xs.reshape(-1, T).astype(np.float64)
            R = S.T @ S
            col = S.sum(axis=0)
            L = self.L
            G = np.empty((h.m1, h.m1))
            for j in range(h.m1):
                for l in range(j, h.m1):
                    G[j, l] = G[l, j] = np.trace(R[j:j + L, l:l + L])
            sx = np.array([col[j:j + L].sum() for j in range(h.m1)])
            self.G, self.sx = G, sx
            self.mx = sx / self.N
            cov = G / self.N - np.outer(self.mx, self.mx)
            self.mean = self.W @ self.mx + self.b
            self.var = np.maximum(np.einsum("kj,jl,kl->k", self.W, cov, self.W), 0.0)
            n = self.N
            self.new_stats = (
                ((1 - nm.BN_MOMENTUM) * bufs["bn1_mean"] + nm.BN_MOMENTUM * self.mean).astype(self.dtype),
                ((1 - nm.BN_MOMENTUM) * bufs["bn1_var"]
                 + nm.BN_MOMENTUM * self.var * n / max(n - 1, 1)).astype(self.dtype))
        elif mode == "eval":
            self.mean = bufs["bn1_mean"].astype(np.float64)
            self.var = bufs["bn1_var"].astype(np.float64)
            self.new_stats = (bufs["bn1_mean"], bufs["bn1_var"])
        else:
            raise ValueError(f"unknown batch_norm mode {mode!r}")
        self.inv = 1.0 / np.sqrt(self.var + nm.BN_EPS)
        self.a = self.gamma * self.inv
        # conv, normalisation and affine folded into one (m1, k) map
        self.Wf = (self.W * self.a[:, None]).T.astype(self.dtype)
        self.bf = (self.a * (self.b - self.mean) + self.beta).astype(self.dtype)

    def _windows(self):
        m1 = self.h.m1
        for s in range(0, self.xs.shape[0], self.chunk):
            win = sliding_window_view(self.xs[s:s + self.chunk], m1, axis=-1)
            yield np.ascontiguousarray(win).reshape(-1, m1)

    def forward(self):
        """Pooled activation laid out as (b, k, C, L_pool)."""
        b, C, _ = self.xs.shape
        Lp = self.P.shape[1]
        k = self.h.k
        out = np.empty((b, C, Lp, k), dtype=self.dtype)
        keep = self.N * k * self.dtype.itemsize <= self.keep_bytes
        self.saved = [] if keep else None
        for i, Xc in enumerate(self._windows()):
            pre = Xc @ self.Wf
            pre += self.bf
            slope = np.minimum(pre, 0)
            np.exp(slope, out=slope)                # ELU derivative
            y = slope - 1
            np.maximum(pre, y, out=y)
            if keep:
                self.saved.append((Xc, slope))
            s = i * self.chunk
            out[s:s + self.chunk] = np.matmul(self.PT, y.reshape(-1, self.L, k)).reshape(-1, C, Lp, k)
        return out.transpose(0, 3, 1, 2)

    def _upstream(self, dpool):
        """Yield (windows, dY) per chunk, dY being d(loss)/d(BN output)."""
        b, C, _ = self.xs.shape
        k = self.h.k
        Lp = self.P.shape[1]
        dcl = np.ascontiguousarray(dpool.transpose(0, 2, 3, 1))
        source = self.saved if self.saved is not None else (
            (Xc, None) for Xc in self._windows())
        for i, (Xc, slope) in enumerate(source):
            s = i * self.chunk
            if slope is None:
                slope = Xc @ self.Wf
                slope += self.bf
                np.minimum(slope, 0, out=slope)
                np.exp(slope, out=slope)
            dy = np.matmul(self.P, dcl[s:s + self.chunk].reshape(-1, Lp, k)).reshape(-1, k)
            dy *= slope
            yield Xc, dy

    def backward(self, dpool, need_dx=False):
        h = self.h
        k, m1 = h.k, h.m1
        s1 = np.zeros(k)
        M = np.zeros((k, m1))
        for Xc, dy in self._upstream(dpool):
            s1 += dy.sum(axis=0, dtype=np.float64)
            M += (dy.T @ Xc).astype(np.float64)
        W, inv, a, N = self.W, self.inv, self.a, self.N
        if self.mode == "train":
            dgamma = inv * np.einsum("kj,kj->k", W, M - np.outer(s1, self.mx))
            xhat_x = inv[:, None] * (W @ self.G - np.outer(W @ self.mx, self.sx))
            dW = a[:, None] * (M - np.outer(s1 / N, self.sx) - (dgamma / N)[:, None] * xhat_x)
            db = np.zeros(k)
            c_const = -a * s1 / N + a * inv * dgamma / N * (W @ self.mx)
            c_lin = -a * inv * dgamma / N
        else:
            dgamma = inv * (np.einsum("kj,kj->k", W, M) + (self.b - self.mean) * s1)
            dW = a[:, None] * M
            db = a * s1
            c_const = np.zeros(k)
            c_lin = np.zeros(k)
        grads = {
            "temporal_w": dW.reshape(k, 1, 1, m1).astype(self.dtype),
            "temporal_b": db.astype(self.dtype),
            "bn1_gamma": dgamma.astype(self.dtype),
            "bn1_beta": s1.astype(self.dtype),
        }
        if not need_dx:
            return grads, None
        b, C, T = self.xs.shape
        L = self.L
        dx = np.zeros((b, 1, C, T), dtype=self.dtype)
        # dZ = a*dY + c_lin * (X W^T) + c_const, then scattered back over windows
        back = (W * a[:, None]).astype(self.dtype)
        lin = (W.T * c_lin).T.astype(self.dtype)
        const_win = (c_const @ W).astype(self.dtype)
        mix = lin.T @ W.astype(self.dtype)
        for i, (Xc, dy) in enumerate(self._upstream(dpool)):
            dwin = dy @ back + Xc @ mix + const_win
            s = i * self.chunk
            dwin = dwin.reshape(-1, C, L, m1)
            for j in range(m1):
                dx[s:s + self.chunk, 0, :, j:j + L] += dwin[..., j]
        return grads, dx


def backbone_forward(x, params: EncoderParams, mode="train", chunk=8, fused=True):
    """The TSConv stack without any spatial module; x is (b, 1, C, T).

    ``fused=False`` evaluates the same network by composing the primitive
    layers, which is slower and holds every activation in memory.
    """
    h = params.hyper
    p = params.tensors
    bufs = params.buffers
    layers = {"fused": fused}
    if fused:
        block = _TemporalBlock(x, p, bufs, h, mode, chunk)
        z = block.forward()
        layers["temporal"] = block
        m1, v1 = block.new_stats
    else:
        z, layers["tconv"] = nm.temporal_conv_forward(x, p["temporal_w"], p["temporal_b"])
        z, layers["bn1"], (m1, v1) = nm.batch_norm_forward(
            z, p["bn1_gamma"], p["bn1_beta"], bufs["bn1_mean"], bufs["bn1_var"], mode)
        z, layers["elu1"] = nm.elu_forward(z)
        z, layers["pool"] = nm.avg_pool_forward(z, h.m2, h.s2)
    z, layers["sconv"] = nm.spatial_conv_forward(z, p["spatial_w"], p["spatial_b"])
    z, layers["bn2"], (m2, v2) = nm.batch_norm_forward(
        z, p["bn2_gamma"], p["bn2_beta"], bufs["bn2_mean"], bufs["bn2_var"], mode)
    z, layers["elu2"] = nm.elu_forward(z)
    layers["flat_shape"] = z.shape
    z, layers["proj"] = nm.linear_forward(z.reshape(z.shape[0], -1), p["proj_w"], p["proj_b"])
    buffers = {"bn1_mean": m1, "bn1_var": v1, "bn2_mean": m2, "bn2_var": v2}
    return z, layers, buffers


def backbone_backward(dfeat, layers, need_dx):
    g = {}
    dz, g["proj_w"], g["proj_b"] = nm.linear_backward(dfeat, layers["proj"])
    dz = dz.reshape(layers["flat_shape"])
    dz = nm.elu_backward(dz, layers["elu2"])
    dz, g["bn2_gamma"], g["bn2_beta"] = nm.batch_norm_backward(dz, layers["bn2"])
    dz, g["spatial_w"], g["spatial_b"] = nm.spatial_conv_backward(dz, layers["sconv"])
    if layers["fused"]:
        tg, dx = layers["temporal"].backward(dz, need_dx)
        g.update(tg)
        return g, dx
    dz = nm.avg_pool_backward(dz, layers["pool"])
    dz = nm.elu_backward(dz, layers["elu1"])
    dz, g["bn1_gamma"], g["bn1_beta"] = nm.batch_norm_backward(dz, layers["bn1"])
    dx, g["temporal_w"], g["temporal_b"] = nm.temporal_conv_backward(dz, layers["tconv"], need_dx)
    return g, dx


def tsconv_forward(x, params: EncoderParams, mode: str = "train", fused: bool = True):
    """Encode EEG trials (b, 1, C, T) into unnormalised features (b, D).

    Returns ``(features, cache)``. ``cache.buffers`` carries the batch-norm
    running statistics after this pass; the caller decides whether to keep them.
    """
    h = params.hyper
    p = params.tensors
    x = _as_batch(x, h)
    module = None
    if h.spatial_module == "sa":
        z, module = sa_forward(x[:, 0], p["sa_wq"], p["sa_wk"], p["sa_wv"])
        x = z[:, None]
    elif h.spatial_module == "ga":
        z, module = ga_forward(x[:, 0], p["ga_w"], p["ga_a"], h.ga_residual)
        x = z[:, None]
    feats, layers, buffers = backbone_forward(x, params, mode, fused=fused)
    return feats, ForwardCache(mode, module, x, layers, buffers)


def tsconv_backward(dfeat, cache: ForwardCache, hyper: HyperParams, need_input_grad=False):
    """Gradients of every encoder tensor (except ``logit_scale``) given d(features).

    With ``need_input_grad`` the result also holds ``"module_out"`` (gradient
    at the spatial module's output) and ``"x"`` (gradient at the raw input).
    """
    need_dx = need_input_grad or cache.module is not None
    g, dx = backbone_backward(dfeat, cache.layers, need_dx)
    if not need_dx:
        return g
    if need_input_grad:
        g["module_out"] = dx
    if hyper.spatial_module == "sa":
        d0, g["sa_wq"], g["sa_wk"], g["sa_wv"] = sa_backward(dx[:, 0], cache.module)
        dx = d0[:, None]
    elif hyper.spatial_module == "ga":
        d0, g["ga_w"], g["ga_a"] = ga_backward(dx[:, 0], cache.module)
        dx = d0[:, None]
    if need_input_grad:
        g["x"] = dx
    return g


def encode(x, params: EncoderParams, batch_size: int = 500):
    """Eval-mode features for a large stack of trials, in chunks."""
    x = np.asarray(x)
    dtype = params.tensors["proj_w"].dtype
    feats = []
    for start in range(0, len(x), batch_size):
        chunk = x[start:start + batch_size].astype(dtype, copy=False)
        f, _ = tsconv_forward(chunk, params, mode="eval")
        feats.append(f)
    return np.concatenate(feats, axis=0)


# -- checkpoint file --------------------------------------------------------

CHECKPOINT_MAGIC = b"NICE"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: EncoderParams, path) -> None:
    """Write ``NICE`` magic, u32 version, u64-prefixed JSON hyperparameters,
    u32 tensor count, then per tensor: u32 name length, name, u32 ndim,
    u64 dims, f32 little-endian payload."""
    named = [(k, v) for k, v in params.tensors.items()]
    named += [(f"buffer:{k}", v) for k, v in params.buffers.items()]
    header = json.dumps({"hyper": params.hyper.to_dict()}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(named)))
        for name, arr in named:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> EncoderParams:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a NICE checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        (hlen,) = struct.unpack_from("<Q", data, 8)
        pos = 16
        hyper = HyperParams(**json.loads(data[pos:pos + hlen])["hyper"])
        pos += hlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors, buffers = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(data, "<f4", count=nbytes // 4, offset=pos).reshape(shape)
            pos += nbytes
            arr = arr.astype(np.float32)
            if name.startswith("buffer:"):
                buffers[name[7:]] = arr
            else:
                tensors[name] = arr
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    expected = param_shapes(hyper)
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name!r} missing or mis-shaped")
    return EncoderParams(hyper, tensors, buffers)
