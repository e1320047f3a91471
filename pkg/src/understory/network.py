"""Trainable 3D convolutional regressor for per-layer reflectance correction.

Architecture: eight 3x3x3 conv stages with channel widths doubling every two
stages (32, 32, 64, 64, 128, 128, 256, 256 at full scale), stride 1 and zero
padding 1 so spatial dims are preserved, exact GELU after every conv stage
and hidden FC layer, then flatten -> 128 -> 64 -> 1. Trained with MSE loss
and Adam. Implemented directly on numpy (im2col + matmul); no autograd.
"""

from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erf

from .errors import InputFormatError, InvariantError

DEFAULT_CHANNELS = (32, 32, 64, 64, 128, 128, 256, 256)
REDUCED_CHANNELS = (4, 4, 8, 8, 16, 16, 32, 32)
FC_WIDTHS = (128, 64, 1)
_KERNEL = 3
_K3 = _KERNEL**3

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def param_count(pw: int, ph: int, pd: int, channels: tuple[int, ...] = DEFAULT_CHANNELS) -> int:
    """Total trainable parameter count for the given patch dims."""
    if min(pw, ph, pd) < 1:
        raise InvariantError("patch dims must be >= 1")
    n = 0
    c_in = 1
    for c_out in channels:
        n += _K3 * c_in * c_out + c_out
        c_in = c_out
    widths = (pw * ph * pd * c_in,) + FC_WIDTHS
    for a, b in zip(widths[:-1], widths[1:]):
        n += a * b + b
    return n


# Abramowitz-Stegun 7.1.26 rational-exponential erf; absolute error 1.5e-7,
# i.e. at float32 resolution. float64 arrays keep scipy's reference erf.
_AS_P = 0.3275911
_AS_COEF = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)


def _erf_fast32(x: np.ndarray) -> np.ndarray:
    # in-place on three buffers; fresh temporaries here are large enough to
    # make the allocator the bottleneck otherwise
    a1, a2, a3, a4, a5 = (np.float32(c) for c in _AS_COEF)
    ax = np.abs(x)
    t = ax * np.float32(_AS_P)
    t += np.float32(1.0)
    np.reciprocal(t, out=t)
    poly = t * a5
    poly += a4
    poly *= t
    poly += a3
    poly *= t
    poly += a2
    poly *= t
    poly += a1
    poly *= t
    ax *= ax
    np.negative(ax, out=ax)
    np.exp(ax, out=ax)
    poly *= ax
    np.subtract(np.float32(1.0), poly, out=poly)
    return np.copysign(poly, x, out=poly)


def _erf(x: np.ndarray) -> np.ndarray:
    if x.dtype == np.float32:
        return _erf_fast32(x)
    return erf(x)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF via erf.

    float64 arrays use scipy's erf; float32 arrays use a vectorized
    rational-exponential erf whose error sits at float32 resolution.
    """
    x = np.asarray(x)
    g = _erf(x * np.asarray(_INV_SQRT2, dtype=x.dtype))
    g += np.asarray(1.0, dtype=x.dtype)
    g *= x
    g *= np.asarray(0.5, dtype=x.dtype)
    return g


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx gelu(x) = Phi(x) + x * phi(x)."""
    x = np.asarray(x)
    one = np.asarray(1.0, dtype=x.dtype)
    g = _erf(x * np.asarray(_INV_SQRT2, dtype=x.dtype))
    g += one
    g *= np.asarray(0.5, dtype=x.dtype)
    phi = x * x
    phi *= np.asarray(-0.5, dtype=x.dtype)
    np.exp(phi, out=phi)
    phi *= np.asarray(_INV_SQRT2PI, dtype=x.dtype)
    phi *= x
    g += phi
    return g


@dataclass
class LayerModel:
    """Weights of one per-depth-layer corrector network.

    ``fallback`` marks an identity pass-through model for layers that had no
    trainable (non-void) points; it carries no weights and forward() returns
    the patch's own apex value unchanged.
    """

    dims: tuple[int, int, int]
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    conv_w: list[np.ndarray] = field(default_factory=list)  # (C_out, C_in, 3,3,3)
    conv_b: list[np.ndarray] = field(default_factory=list)  # (C_out,)
    fc_w: list[np.ndarray] = field(default_factory=list)  # (out, in)
    fc_b: list[np.ndarray] = field(default_factory=list)  # (out,)
    layer_index: int = -1
    fallback: bool = False

    def __post_init__(self):
        if self.fallback:
            return
        if len(self.conv_w) != len(self.channels):
            raise InvariantError("conv stage count does not match channel schedule")
        c_in = 1
        for w, b, c_out in zip(self.conv_w, self.conv_b, self.channels):
            if w.shape != (c_out, c_in, _KERNEL, _KERNEL, _KERNEL):
                raise InvariantError(f"conv weight shape {w.shape} is wrong")
            if b.shape != (c_out,):
                raise InvariantError(f"conv bias shape {b.shape} is wrong")
            c_in = c_out
        widths = (int(np.prod(self.dims)) * c_in,) + FC_WIDTHS
        for w, b, (n_in, n_out) in zip(self.fc_w, self.fc_b, zip(widths[:-1], widths[1:])):
            if w.shape != (n_out, n_in) or b.shape != (n_out,):
                raise InvariantError(f"fc shapes {w.shape}/{b.shape} are wrong")

    @property
    def dtype(self):
        return self.conv_w[0].dtype if self.conv_w else np.float32

    def param_count(self) -> int:
        return param_count(*self.dims, channels=self.channels)

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in canonical (layer) order."""
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out.extend([w, b])
        for w, b in zip(self.fc_w, self.fc_b):
            out.extend([w, b])
        return out

    def copy(self) -> "LayerModel":
        return LayerModel(
            dims=self.dims,
            channels=self.channels,
            conv_w=[w.copy() for w in self.conv_w],
            conv_b=[b.copy() for b in self.conv_b],
            fc_w=[w.copy() for w in self.fc_w],
            fc_b=[b.copy() for b in self.fc_b],
            layer_index=self.layer_index,
            fallback=self.fallback,
        )


def init_model(
    dims: tuple[int, int, int],
    channels: tuple[int, ...] = DEFAULT_CHANNELS,
    seed: int = 0,
    dtype=np.float32,
    layer_index: int = -1,
) -> LayerModel:
    """He-style initialization for conv kernels and hidden FC layers.

    The output layer uses a smaller 1/fan_in scale so freshly initialized
    models predict near zero with variance well below one.
    """
    rng = np.random.default_rng(seed)
    conv_w = []
    conv_b = []
    c_in = 1
    for c_out in channels:
        std = math.sqrt(2.0 / (c_in * _K3))
        conv_w.append(rng.normal(0.0, std, size=(c_out, c_in, _KERNEL, _KERNEL, _KERNEL)).astype(dtype))
        conv_b.append(np.zeros(c_out, dtype=dtype))
        c_in = c_out
    widths = (int(np.prod(dims)) * c_in,) + FC_WIDTHS
    fc_w = []
    fc_b = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(FC_WIDTHS) - 1
        std = math.sqrt((1.0 if last else 2.0) / n_in)
        fc_w.append(rng.normal(0.0, std, size=(n_out, n_in)).astype(dtype))
        fc_b.append(np.zeros(n_out, dtype=dtype))
    return LayerModel(
        dims=tuple(int(d) for d in dims), channels=tuple(channels),
        conv_w=conv_w, conv_b=conv_b, fc_w=fc_w, fc_b=fc_b,
        layer_index=layer_index,
    )


def make_fallback(dims: tuple[int, int, int], layer_index: int) -> LayerModel:
    return LayerModel(dims=tuple(int(d) for d in dims), channels=(), layer_index=layer_index, fallback=True)


_SHIFTS = [
    (a - 1, b - 1, c - 1) for a in range(_KERNEL) for b in range(_KERNEL) for c in range(_KERNEL)
]

# Patches are tiny, so a conv stage is also expressible as one dense
# (P*C_out, P*C_in) matrix; below this unrolled-matrix byte size we take that
# single-GEMM path, above it (paper-scale patches) the shift-accumulate path.
_MATRIX_BYTES_LIMIT = 64 * 1024 * 1024

_pair_cache: dict[tuple[int, int, int], list[tuple[np.ndarray, np.ndarray]]] = {}


def _shift_pairs(dims: tuple[int, int, int]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per kernel offset: (output position, input position) index pairs."""
    if dims in _pair_cache:
        return _pair_cache[dims]
    d, h, w = dims
    flat = np.arange(d * h * w).reshape(d, h, w)
    pairs = []
    for sd, sh, sw in _SHIFTS:
        od0, od1, id0, id1 = _axis_ranges(d, sd)
        oh0, oh1, ih0, ih1 = _axis_ranges(h, sh)
        ow0, ow1, iw0, iw1 = _axis_ranges(w, sw)
        o_idx = flat[od0:od1, oh0:oh1, ow0:ow1].ravel()
        i_idx = flat[id0:id1, ih0:ih1, iw0:iw1].ravel()
        pairs.append((o_idx, i_idx))
    _pair_cache[dims] = pairs
    return pairs


def _axis_ranges(n: int, s: int) -> tuple[int, int, int, int]:
    """Output/input index ranges of a shift-by-s accumulation along one axis."""
    o_lo = max(0, -s)
    o_hi = n - max(0, s)
    return o_lo, o_hi, o_lo + s, o_hi + s


def _matrix_bytes(p: int, c_in: int, c_out: int, itemsize: int) -> int:
    return p * p * c_in * c_out * itemsize


def _unrolled_matrix(weight: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Dense (P*C_out, P*C_in) matrix equivalent of the padded 3x3x3 conv."""
    c_out, c_in = weight.shape[:2]
    p = int(np.prod(dims))
    m4 = np.zeros((p, c_out, p, c_in), dtype=weight.dtype)
    w3 = weight.reshape(c_out, c_in, _K3)
    for idx, (o_idx, i_idx) in enumerate(_shift_pairs(dims)):
        m4[o_idx, :, i_idx, :] = w3[:, :, idx]
    return m4.reshape(p * c_out, p * c_in)


def _weight_cat(weight: np.ndarray) -> np.ndarray:
    """(C_out, C_in, 3,3,3) -> (C_in, 27*C_out): all offset kernels side by side."""
    c_out, c_in = weight.shape[:2]
    return np.ascontiguousarray(
        weight.reshape(c_out, c_in, _K3).transpose(1, 2, 0).reshape(c_in, _K3 * c_out)
    )


def _conv_forward_shift(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Shift-accumulate conv: one GEMM against the concatenated per-offset
    kernels, then 27 shifted view-adds (implicit zero padding)."""
    b, d, h, w, c_in = x.shape
    c_out = weight.shape[0]
    z = (x.reshape(-1, c_in) @ _weight_cat(weight)).reshape(b, d, h, w, _K3, c_out)
    y = np.empty((b, d, h, w, c_out), dtype=x.dtype)
    y[:] = bias
    for idx, (sd, sh, sw) in enumerate(_SHIFTS):
        od0, od1, id0, id1 = _axis_ranges(d, sd)
        oh0, oh1, ih0, ih1 = _axis_ranges(h, sh)
        ow0, ow1, iw0, iw1 = _axis_ranges(w, sw)
        y[:, od0:od1, oh0:oh1, ow0:ow1, :] += z[:, id0:id1, ih0:ih1, iw0:iw1, idx, :]
    return y


def _conv_backward_shift(
    x: np.ndarray, weight: np.ndarray, d_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    b, d, h, w, c_in = x.shape
    c_out = weight.shape[0]
    dz = np.zeros((b, d, h, w, _K3, c_out), dtype=d_y.dtype)
    for idx, (sd, sh, sw) in enumerate(_SHIFTS):
        od0, od1, id0, id1 = _axis_ranges(d, sd)
        oh0, oh1, ih0, ih1 = _axis_ranges(h, sh)
        ow0, ow1, iw0, iw1 = _axis_ranges(w, sw)
        dz[:, id0:id1, ih0:ih1, iw0:iw1, idx, :] = d_y[:, od0:od1, oh0:oh1, ow0:ow1, :]
    dz2d = dz.reshape(-1, _K3 * c_out)
    dw_cat = x.reshape(-1, c_in).T @ dz2d  # (C_in, 27*C_out)
    dw = dw_cat.reshape(c_in, _K3, c_out).transpose(2, 0, 1).reshape(
        c_out, c_in, _KERNEL, _KERNEL, _KERNEL
    )
    dx = (dz2d @ _weight_cat(weight).T).reshape(x.shape)
    db = d_y.sum(axis=(0, 1, 2, 3))
    return np.ascontiguousarray(dw), db, dx


def _conv_forward_matrix(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, d, h, w, c_in = x.shape
    c_out = weight.shape[0]
    p = d * h * w
    m = _unrolled_matrix(weight, (d, h, w))
    y2d = x.reshape(b, p * c_in) @ m.T + np.tile(bias, p)
    return y2d.reshape(b, d, h, w, c_out)


def _conv_backward_matrix(
    x: np.ndarray, weight: np.ndarray, d_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    b, d, h, w, c_in = x.shape
    c_out = weight.shape[0]
    p = d * h * w
    m = _unrolled_matrix(weight, (d, h, w))
    dz2d = d_y.reshape(b, p * c_out)
    x2d = x.reshape(b, p * c_in)
    dx = (dz2d @ m).reshape(x.shape)
    dm4 = (dz2d.T @ x2d).reshape(p, c_out, p, c_in)
    dw = np.empty_like(weight).reshape(c_out, c_in, _K3)
    for idx, (o_idx, i_idx) in enumerate(_shift_pairs((d, h, w))):
        dw[:, :, idx] = dm4[o_idx, :, i_idx, :].sum(axis=0)
    db = d_y.sum(axis=(0, 1, 2, 3))
    return dw.reshape(weight.shape), db, dx


def _conv_forward_cl(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3x3 conv, stride 1, zero padding 1, channels-last (B, D, H, W, C)."""
    b, d, h, w, c_in = x.shape
    if _matrix_bytes(d * h * w, c_in, weight.shape[0], x.itemsize) <= _MATRIX_BYTES_LIMIT:
        return _conv_forward_matrix(x, weight, bias)
    return _conv_forward_shift(x, weight, bias)


def _conv_backward_cl(
    x: np.ndarray, weight: np.ndarray, d_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of one conv stage given d(pre-activation): (dW, db, dX)."""
    b, d, h, w, c_in = x.shape
    if _matrix_bytes(d * h * w, c_in, d_y.shape[-1], x.itemsize) <= _MATRIX_BYTES_LIMIT:
        return _conv_backward_matrix(x, weight, d_y)
    return _conv_backward_shift(x, weight, d_y)


def _check_batch(model: LayerModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.shape[1:] != tuple(model.dims):
        raise InvariantError(
            f"patch dims {batch.shape[1:]} do not match model input {model.dims}"
        )
    return batch


def _forward_cached(model: LayerModel, batch: np.ndarray, keep_cache: bool):
    """Run the network; optionally keep per-stage caches for backward.

    Activations flow channels-last: (B, D, H, W, C) between conv stages, so
    the flatten order is (spatial, channel), matching param_count's
    Pw*Ph*Pd*C_last term.
    """
    b = batch.shape[0]
    d, h, w = model.dims  # stored (Pw, Ph, Pd); treated as the 3 spatial axes
    x = batch.reshape(b, d, h, w, 1).astype(model.dtype, copy=False)
    caches = []
    for wgt, bias in zip(model.conv_w, model.conv_b):
        z = _conv_forward_cl(x, wgt, bias)
        if keep_cache:
            caches.append(("conv", x, z, None))
        x = gelu(z)

    act = x.reshape(b, -1)
    n_fc = len(model.fc_w)
    for i, (wgt, bias) in enumerate(zip(model.fc_w, model.fc_b)):
        z = act @ wgt.T + bias
        a = gelu(z) if i < n_fc - 1 else z
        if keep_cache:
            caches.append(("fc", act, z, None))
        act = a
    preds = act[:, 0]
    return preds, caches


def forward(model: LayerModel, batch: np.ndarray) -> np.ndarray:
    """Predict corrected reflectance for a batch of patches, shape (B,).

    A single (Pw, Ph, Pd) patch is accepted and treated as a batch of one.
    Fallback models return the patch apex value unchanged.
    """
    squeeze = np.asarray(batch).ndim == 3
    batch = _check_batch(model, batch)
    if model.fallback:
        preds = np.asarray(batch[:, 0, 0, 0], dtype=np.float64)
    else:
        preds, _ = _forward_cached(model, batch, keep_cache=False)
    return preds[0] if squeeze else preds


@dataclass
class Gradients:
    conv_w: list[np.ndarray]
    conv_b: list[np.ndarray]
    fc_w: list[np.ndarray]
    fc_b: list[np.ndarray]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out.extend([w, b])
        for w, b in zip(self.fc_w, self.fc_b):
            out.extend([w, b])
        return out


def backward(model: LayerModel, batch: np.ndarray, targets: np.ndarray):
    """MSE loss and gradients w.r.t. every parameter.

    Returns (gradients, loss) with loss = mean((pred - target)^2) over the
    batch.
    """
    batch = _check_batch(model, batch)
    if model.fallback:
        raise InvariantError("fallback models cannot be trained")
    targets = np.asarray(targets, dtype=model.dtype).ravel()
    if batch.shape[0] == 0:
        raise InvariantError("backward requires a nonempty batch")
    if targets.shape[0] != batch.shape[0]:
        raise InvariantError("target count does not match batch size")

    preds, caches = _forward_cached(model, batch, keep_cache=True)
    b = batch.shape[0]
    resid = preds - targets.astype(preds.dtype)
    loss = float(np.mean(resid.astype(np.float64) ** 2))

    grads = Gradients(
        conv_w=[np.zeros_like(w) for w in model.conv_w],
        conv_b=[np.zeros_like(v) for v in model.conv_b],
        fc_w=[np.zeros_like(w) for w in model.fc_w],
        fc_b=[np.zeros_like(v) for v in model.fc_b],
    )

    delta = (2.0 / b) * resid.astype(model.dtype)
    d_act = delta[:, None]  # gradient w.r.t. the current activation
    n_fc = len(model.fc_w)
    for i in range(n_fc - 1, -1, -1):
        kind, act_in, z, _ = caches[len(model.conv_w) + i]
        dz = d_act if i == n_fc - 1 else d_act * gelu_grad(z)
        grads.fc_w[i][...] = dz.T @ act_in
        grads.fc_b[i][...] = dz.sum(axis=0)
        d_act = dz @ model.fc_w[i]

    d, h, w = model.dims
    d_y = d_act.reshape(b, d, h, w, model.channels[-1])
    for i in range(len(model.conv_w) - 1, -1, -1):
        kind, x_in, z, _ = caches[i]
        d_y = d_y * gelu_grad(z)
        dw, db, d_y = _conv_backward_cl(x_in, model.conv_w[i], d_y)
        grads.conv_w[i][...] = dw
        grads.conv_b[i][...] = db

    return grads, loss


@dataclass
class TrainState:
    """Adam optimizer state: first/second moment per parameter plus step."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: LayerModel, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        params = model.parameters()
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(state: TrainState, model: LayerModel, grads: Gradients) -> None:
    """One bias-corrected Adam update, in place."""
    params = model.parameters()
    gs = grads.parameters()
    if len(params) != len(state.m) or len(params) != len(gs):
        raise InvariantError("parameter/gradient/state shapes disagree")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, gs, state.m, state.v):
        if p.shape != g.shape:
            raise InvariantError("gradient shape does not match parameter shape")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


@dataclass(frozen=True)
class TrainConfig:
    """Adam + loop hyperparameters.

    ``max_train_samples``/``max_val_samples`` optionally cap the split sizes
    by a seeded subsample (deep layers carry far more patches than the model
    needs to converge); None trains on everything.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 30
    seed: int = 0
    max_train_samples: int | None = None
    max_val_samples: int | None = None


def fit(model: LayerModel, dataset, config: TrainConfig):
    """Train on the dataset's train split, track the val split per epoch.

    Deterministic for a fixed seed: shuffle order, batch boundaries, and
    accumulation order are all fixed. Returns (best-val-epoch model, history)
    where history rows are (epoch, train_mse, val_mse).
    """
    idx_train = dataset.indices(0)
    if idx_train.size == 0:
        raise InvariantError("training split is empty")
    idx_val = dataset.indices(1)
    sub_rng = np.random.default_rng([config.seed, 0x5AB5])
    if config.max_train_samples and idx_train.size > config.max_train_samples:
        idx_train = idx_train[
            np.sort(sub_rng.permutation(idx_train.size)[: config.max_train_samples])
        ]
    if config.max_val_samples and idx_val.size > config.max_val_samples:
        idx_val = idx_val[
            np.sort(sub_rng.permutation(idx_val.size)[: config.max_val_samples])
        ]
    x_train = dataset.tensors[idx_train]
    y_train = dataset.training_targets(idx_train)
    x_val = dataset.tensors[idx_val]
    y_val = dataset.training_targets(idx_val)

    state = TrainState.for_model(
        model, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps
    )
    rng = np.random.default_rng(config.seed)
    history: list[tuple[int, float, float]] = []
    best_val = math.inf
    best_model = model.copy()

    n = idx_train.size
    bs = max(1, min(config.batch_size, n))
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            sel = order[start : start + bs]
            grads, loss = backward(model, x_train[sel], y_train[sel])
            adam_step(state, model, grads)
            total += loss * sel.size
        train_mse = total / n
        if idx_val.size:
            val_pred = _predict_in_batches(model, x_val, bs)
            val_mse = float(np.mean((val_pred - y_val) ** 2))
        else:
            val_mse = train_mse
        history.append((epoch, train_mse, val_mse))
        if val_mse < best_val:
            best_val = val_mse
            best_model = model.copy()
    return best_model, history


def _predict_in_batches(model: LayerModel, tensors: np.ndarray, batch_size: int) -> np.ndarray:
    out = np.empty(tensors.shape[0], dtype=np.float64)
    for start in range(0, tensors.shape[0], batch_size):
        out[start : start + batch_size] = forward(model, tensors[start : start + batch_size])
    return out


def gradient_check(
    model: LayerModel, batch: np.ndarray, targets: np.ndarray, step: float = 1e-4
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The denominator is floored at 1e-3 so parameters with near-zero gradients
    are compared absolutely at that scale.
    """
    grads, _ = backward(model, batch, targets)
    worst = 0.0
    for p, g in zip(model.parameters(), grads.parameters()):
        flat_p = p.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            _, lo_p = backward(model, batch, targets)
            flat_p[i] = orig - step
            _, lo_m = backward(model, batch, targets)
            flat_p[i] = orig
            fd = (lo_p - lo_m) / (2.0 * step)
            denom = max(abs(fd), abs(flat_g[i]), 1e-3)
            worst = max(worst, abs(fd - flat_g[i]) / denom)
    return worst


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_mse", "val_mse"])
        for epoch, train_mse, val_mse in history:
            writer.writerow([epoch, repr(train_mse), repr(val_mse)])


# ---------------------------------------------------------------------------
# model file format: magic DFRM, little-endian float payload, trailing CRC32

_MODEL_MAGIC = b"DFRM"
_MODEL_VERSION = 1
_DTYPE_CODES = {4: np.float32, 8: np.float64}


def save_model(model: LayerModel, path) -> None:
    dtype_code = np.dtype(model.dtype).itemsize
    header = _MODEL_MAGIC + struct.pack(
        "<HBBiIIIB",
        _MODEL_VERSION,
        1,  # little-endian payload
        1 if model.fallback else 0,
        model.layer_index,
        *model.dims,
        dtype_code,
    )
    header += struct.pack("<H", len(model.channels))
    header += struct.pack(f"<{len(model.channels)}I", *model.channels) if model.channels else b""
    payload = b"".join(
        p.astype(f"<f{dtype_code}").tobytes() for p in model.parameters()
    )
    crc = zlib.crc32(header[4:] + payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_model(path) -> LayerModel:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise InputFormatError(f"cannot read model file: {exc}") from exc
    if len(blob) < 4 or blob[:4] != _MODEL_MAGIC:
        raise InputFormatError("not a model file (bad magic)")
    fixed = struct.calcsize("<HBBiIIIB")
    if len(blob) < 4 + fixed + 2 + 4:
        raise InputFormatError("model file truncated (checksum failed)")
    version, endian, fallback, layer_index, pw, ph, pd, dtype_code = struct.unpack(
        "<HBBiIIIB", blob[4 : 4 + fixed]
    )
    if version != _MODEL_VERSION:
        raise InputFormatError(f"unsupported model version {version}")
    if endian != 1:
        raise InputFormatError("model file is not little-endian")
    if dtype_code not in _DTYPE_CODES:
        raise InputFormatError(f"unknown dtype code {dtype_code}")
    off = 4 + fixed
    (n_ch,) = struct.unpack("<H", blob[off : off + 2])
    off += 2
    channels = struct.unpack(f"<{n_ch}I", blob[off : off + 4 * n_ch]) if n_ch else ()
    off += 4 * n_ch
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[4:-4]) & 0xFFFFFFFF != crc:
        raise InputFormatError("model file corrupt (checksum failed)")
    payload = blob[off:-4]

    if fallback:
        if payload:
            raise InputFormatError("fallback model must not carry weights")
        return make_fallback((pw, ph, pd), layer_index)

    dtype = _DTYPE_CODES[dtype_code]
    template = init_model((pw, ph, pd), tuple(channels), seed=0, dtype=dtype)
    want = sum(p.size for p in template.parameters()) * dtype_code
    if len(payload) != want:
        raise InputFormatError("model payload length does not match architecture")
    off = 0
    for p in template.parameters():
        nbytes = p.size * dtype_code
        arr = np.frombuffer(payload[off : off + nbytes], dtype=f"<f{dtype_code}")
        p[...] = arr.reshape(p.shape)
        off += nbytes
    template.layer_index = layer_index
    return template
