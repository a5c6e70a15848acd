"""
A small float64 CNN engine with a hand-derived backward pass.

Architecture (same padding, stride 1, ReLU)::

    conv(2 -> C1, k1) -> conv(C1 -> C2, k2) -> conv(C2 -> C3, k3)
    -> flatten(C3 L^2) -> linear(-> N_phi) -> [dropout] -> linear(-> M)

Activations are kept channels-last internally so im2col needs no
transposes; the flattened trunk output is ordered (row, column, channel).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

TRUNK = "trunk"
HEAD = "head"


@dataclass(frozen=True)
class ModelSpec:
    L: int
    M: int
    conv_channels: tuple[int, ...] = (6, 38, 40)
    kernel_sizes: tuple[int, ...] = (3, 5, 5)
    n_features: int = 256
    dropout: float = 0.0
    task: str = "classifier"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if len(self.conv_channels) != len(self.kernel_sizes):
            raise ValueError("one kernel size per conv layer")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError("same padding needs odd kernel sizes")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        if self.task not in ("classifier", "regressor"):
            raise ValueError(f"unknown task {self.task!r}")

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c_in = 2
        for n, (c_out, k) in enumerate(zip(self.conv_channels, self.kernel_sizes), start=1):
            shapes[f"conv{n}.weight"] = (c_out, c_in, k, k)
            shapes[f"conv{n}.bias"] = (c_out,)
            c_in = c_out
        shapes["fc.weight"] = (c_in * self.L * self.L, self.n_features)
        shapes["fc.bias"] = (self.n_features,)
        shapes["head.weight"] = (self.n_features, self.M)
        shapes["head.bias"] = (self.M,)
        return shapes


def group_of(name: str) -> str:
    return HEAD if name.startswith("head.") else TRUNK


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class ModelParameters:
    """Named tensors of one network plus per-group trainable flags and Adam state."""

    def __init__(self, spec: ModelSpec, tensors: dict[str, np.ndarray],
                 trainable: dict[str, bool] | None = None, adam: AdamState | None = None,
                 meta: dict | None = None):
        shapes = spec.tensor_shapes()
        if set(shapes) != set(tensors):
            raise ValueError("tensor names do not match the model spec")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.spec = spec
        self.tensors = {k: np.asarray(tensors[k], dtype=np.float64) for k in shapes}
        self.trainable = {TRUNK: True, HEAD: True} if trainable is None else dict(trainable)
        self.adam = adam if adam is not None else AdamState()
        self.meta = dict(meta or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in self.tensors if group is None or group_of(n) == group]

    def is_trainable(self, name: str) -> bool:
        return self.trainable[group_of(name)]

    def freeze(self, group: str) -> "ModelParameters":
        self.trainable[group] = False
        return self

    def unfreeze(self, group: str) -> "ModelParameters":
        self.trainable[group] = True
        return self

    def copy(self, with_optimizer: bool = True) -> "ModelParameters":
        adam = None
        if with_optimizer:
            adam = AdamState(self.adam.step, {k: v.copy() for k, v in self.adam.m.items()},
                             {k: v.copy() for k, v in self.adam.v.items()})
        return ModelParameters(self.spec, {k: v.copy() for k, v in self.tensors.items()},
                               dict(self.trainable), adam, json.loads(json.dumps(self.meta)))

    def reset_optimizer(self) -> None:
        self.adam = AdamState()

    def count(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.tensors.items() if k.startswith(prefix))


def init_params(spec: ModelSpec, seed: int = 0) -> ModelParameters:
    """Kaiming-uniform (fan-in) weights for ReLU layers, zero biases.

    The output layer uses the ``1/sqrt(fan_in)`` bound.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.tensor_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
        bound = np.sqrt(1.0 / fan_in) if name.startswith("head") else np.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParameters(spec, tensors)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _im2col(x, k):
    # x: (B, L, L, C) -> (B*L*L, C*k*k), column order (C, ky, kx)
    p = k // 2
    B, L, _, C = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, L, L, C, k, k)
    return win.reshape(B * L * L, C * k * k)


def _col2im(dcols, shape, k):
    # dcols: (B*L*L, k*k*C), column order (ky, kx, C)
    B, L, _, C = shape
    p = k // 2
    d = dcols.reshape(B, L, L, k, k, C)
    dxp = np.zeros((B, L + 2 * p, L + 2 * p, C))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + L, j:j + L, :] += d[:, :, :, i, j, :]
    return dxp[:, p:p + L, p:p + L, :]


def dropout_mask(shape, rate: float, seed) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``rate``, else ``1/(1-rate)``."""
    if rate == 0.0:
        return np.ones(shape)
    rng = np.random.default_rng(seed)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _as_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    L = params.spec.L
    if x.ndim != 4 or x.shape[1:] != (2, L, L):
        raise ValueError(f"expected input of shape (B, 2, {L}, {L}), got {x.shape}")
    return x, single


@dataclass
class ForwardResult:
    features: np.ndarray
    logits: np.ndarray
    cache: dict | None = None


def forward(params: ModelParameters, x, mode: str = "eval", dropout_seed=None,
            keep_cache: bool = False) -> ForwardResult:
    """Run the network on one ``(2, L, L)`` input or a batch of them.

    In ``train`` mode dropout (if configured) uses a mask drawn from
    ``dropout_seed``; in ``eval`` mode it is the identity.  ``features``
    are the post-activation trunk outputs, before dropout.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x, single = _as_batch(params, x)
    spec = params.spec
    T = params.tensors
    B, L = x.shape[0], spec.L
    h = x.transpose(0, 2, 3, 1)
    cache = {"layers": []} if keep_cache else None
    for n, k in enumerate(spec.kernel_sizes, start=1):
        W = T[f"conv{n}.weight"]
        cols = _im2col(h, k)
        z = cols @ W.reshape(W.shape[0], -1).T + T[f"conv{n}.bias"]
        if keep_cache:
            cache["layers"].append((cols, z > 0, h.shape))
        h = np.maximum(z, 0.0).reshape(B, L, L, W.shape[0])
    flat = h.reshape(B, -1)
    zf = flat @ T["fc.weight"] + T["fc.bias"]
    phi = np.maximum(zf, 0.0)
    if mode == "train" and spec.dropout > 0:
        mask = dropout_mask(phi.shape, spec.dropout, dropout_seed)
    else:
        mask = None
    phid = phi if mask is None else phi * mask
    logits = phid @ T["head.weight"] + T["head.bias"]
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite network output")
    if keep_cache:
        cache.update(flat=flat, fc_active=zf > 0, mask=mask, phid=phid)
    if single:
        return ForwardResult(phi[0], logits[0], cache)
    return ForwardResult(phi, logits, cache)


def backward(params: ModelParameters, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of trainable tensors given ``dL/dlogits`` for a cached forward pass."""
    spec = params.spec
    T = params.tensors
    dlogits = np.atleast_2d(dlogits)
    grads = {}
    if params.trainable[HEAD]:
        grads["head.weight"] = cache["phid"].T @ dlogits
        grads["head.bias"] = dlogits.sum(axis=0)
    if not params.trainable[TRUNK]:
        return grads
    dphi = dlogits @ T["head.weight"].T
    if cache["mask"] is not None:
        dphi = dphi * cache["mask"]
    dzf = dphi * cache["fc_active"]
    grads["fc.weight"] = cache["flat"].T @ dzf
    grads["fc.bias"] = dzf.sum(axis=0)
    dh = dzf @ T["fc.weight"].T
    n_conv = len(spec.kernel_sizes)
    for n in range(n_conv, 0, -1):
        cols, active, in_shape = cache["layers"][n - 1]
        W = T[f"conv{n}.weight"]
        dz = dh.reshape(-1, W.shape[0]) * active
        grads[f"conv{n}.weight"] = (dz.T @ cols).reshape(W.shape)
        grads[f"conv{n}.bias"] = dz.sum(axis=0)
        if n > 1:
            Wk = W.transpose(0, 2, 3, 1).reshape(W.shape[0], -1)
            dh = _col2im(dz @ Wk, in_shape, spec.kernel_sizes[n - 1])
    return grads


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    zmax = np.max(z, axis=-1, keepdims=True)
    return z - zmax - np.log(np.sum(np.exp(z - zmax), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    p = np.exp(log_softmax(z))
    return p / p.sum(axis=-1, keepdims=True)


def cross_entropy(targets: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Per-sample ``-sum_k y_k log softmax(z)_k`` evaluated in log space."""
    return -np.sum(targets * log_softmax(logits), axis=-1)


def entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def _accumulate(total, grads):
    for k, g in grads.items():
        if k in total:
            total[k] += g
        else:
            total[k] = g
    return total


def loss_and_gradients(params: ModelParameters, inputs, targets, loss: str = "ce",
                       mode: str = "eval", dropout_seed=None, chunk: int = 64):
    """Mean loss over a batch and its gradients for every trainable tensor.

    ``loss`` is ``"ce"`` (targets are PMFs, one row per sample) or
    ``"mse"`` (targets are scalars; output is the single regression unit).
    The batch is processed in chunks of ``chunk`` samples to bound memory;
    dropout masks are drawn per chunk from ``SeedSequence([seed, chunk])``.
    """
    x, _ = _as_batch(params, inputs)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape[0] != x.shape[0]:
        raise ValueError("inputs and targets differ in batch size")
    B = x.shape[0]
    total_loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for c, start in enumerate(range(0, B, chunk)):
        sl = slice(start, start + chunk)
        seed = None if dropout_seed is None else np.random.SeedSequence([int(dropout_seed), c])
        out = forward(params, x[sl], mode=mode, dropout_seed=seed, keep_cache=True)
        if loss == "ce":
            logp = log_softmax(out.logits)
            total_loss += float(-np.sum(y[sl] * logp))
            dlogits = (np.exp(logp) * y[sl].sum(axis=1, keepdims=True) - y[sl]) / B
        elif loss == "mse":
            err = out.logits[:, 0] - y[sl].reshape(-1)
            total_loss += float(np.sum(err**2))
            dlogits = (2.0 * err / B)[:, None]
        else:
            raise ValueError(f"unknown loss {loss!r}")
        _accumulate(grads, backward(params, out.cache, dlogits))
    return total_loss / B, grads


def objective_gradients(params: ModelParameters, inputs, objective, chunk: int = 64):
    """Gradients of an objective coupling the whole batch through its logits.

    ``objective(logits) -> (value, dvalue/dlogits)``.  Logits are first
    computed for the whole batch; each chunk is then re-run with a cache
    to back-propagate its slice of the logit gradient.
    """
    x, _ = _as_batch(params, inputs)
    logits = np.concatenate([forward(params, x[s:s + chunk]).logits
                             for s in range(0, x.shape[0], chunk)])
    value, dlogits = objective(logits)
    grads: dict[str, np.ndarray] = {}
    for s in range(0, x.shape[0], chunk):
        out = forward(params, x[s:s + chunk], keep_cache=True)
        _accumulate(grads, backward(params, out.cache, dlogits[s:s + chunk]))
    return value, grads


def predict_logits(params: ModelParameters, inputs, chunk: int = 128) -> np.ndarray:
    x, _ = _as_batch(params, inputs)
    if x.shape[0] == 0:
        return np.zeros((0, params.spec.M))
    return np.concatenate([forward(params, x[s:s + chunk]).logits
                           for s in range(0, x.shape[0], chunk)])


def predict_features(params: ModelParameters, inputs, chunk: int = 128) -> np.ndarray:
    x, _ = _as_batch(params, inputs)
    return np.concatenate([forward(params, x[s:s + chunk]).features
                           for s in range(0, x.shape[0], chunk)])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(params: ModelParameters, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ModelParameters:
    """One bias-corrected Adam update, in place; frozen groups are skipped."""
    st = params.adam
    st.step += 1
    bc1 = 1.0 - beta1**st.step
    bc2 = 1.0 - beta2**st.step
    for name, g in grads.items():
        if not params.is_trainable(name):
            continue
        p = params.tensors[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
        m = st.m.setdefault(name, np.zeros_like(p))
        v = st.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


# ---------------------------------------------------------------------------
# UWAM1 checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"UWAM1"


def save_checkpoint(params: ModelParameters, path, include_optimizer: bool = True) -> None:
    """Write ``params`` as magic, u32 header length, JSON header, float64 tensors.

    Tensors follow the header in the order listed there, little-endian;
    Adam moments (when included) follow as ``adam.m.<name>`` / ``adam.v.<name>``.
    """
    blobs = [(name, arr) for name, arr in params.tensors.items()]
    if include_optimizer:
        blobs += [(f"adam.m.{k}", v) for k, v in sorted(params.adam.m.items())]
        blobs += [(f"adam.v.{k}", v) for k, v in sorted(params.adam.v.items())]
    header = {
        "L": params.spec.L,
        "M": params.spec.M,
        "N_phi": params.spec.n_features,
        "spec": asdict(params.spec),
        "trainable": params.trainable,
        "adam_step": params.adam.step if include_optimizer else 0,
        "tensors": [[name, list(arr.shape)] for name, arr in blobs],
        "meta": params.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    for _, arr in blobs:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ModelParameters:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise ValueError(f"{path}: not a UWAM1 checkpoint")
    (hlen,) = struct.unpack_from("<I", data, 5)
    header = json.loads(data[9:9 + hlen])
    off = 9 + hlen
    arrays = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    spec_d = header["spec"]
    spec = ModelSpec(**{**spec_d, "conv_channels": tuple(spec_d["conv_channels"]),
                        "kernel_sizes": tuple(spec_d["kernel_sizes"])})
    tensors = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    adam = AdamState(header["adam_step"],
                     {k[7:]: v for k, v in arrays.items() if k.startswith("adam.m.")},
                     {k[7:]: v for k, v in arrays.items() if k.startswith("adam.v.")})
    return ModelParameters(spec, tensors, header["trainable"], adam, header["meta"])
