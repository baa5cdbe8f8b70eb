"""Dual-stream fully connected classifier, written directly in numpy.

Two encoders (HSI and ALS) map their inputs to latent vectors that are
concatenated and fed to a decoder producing class logits. Every hidden
block is linear -> batch norm -> GELU -> dropout; the last layer of each
encoder and of the decoder is a bare linear map.

Parameters live in one ordered dict keyed ``"<stream>.<layer>.<name>"`` with
streams ``hsi``, ``als`` and ``dec``; batch-norm running statistics are kept
in a separate buffer dict with the same naming scheme.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError, ValidationError

GELU_C = math.sqrt(2.0 / math.pi)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
STREAMS = ("hsi", "als", "dec")


@dataclass(frozen=True)
class NetworkConfig:
    hsi_dims: tuple[int, ...]
    als_dims: tuple[int, ...]
    decoder_dims: tuple[int, ...]
    dropout: float = 0.2
    batch_size: int = 512
    epochs: int = 300
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        for name in ("hsi_dims", "als_dims", "decoder_dims"):
            dims = tuple(int(d) for d in getattr(self, name))
            if len(dims) < 2 or min(dims) < 1:
                raise ValidationError(f"{name} needs an input and at least one layer, got {dims}")
            object.__setattr__(self, name, dims)
        if self.decoder_dims[0] != self.hsi_dims[-1] + self.als_dims[-1]:
            raise ValidationError(
                f"decoder input {self.decoder_dims[0]} != {self.hsi_dims[-1]} + {self.als_dims[-1]}"
            )
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be positive")

    @classmethod
    def for_data(cls, n_hsi: int, n_als: int, n_classes: int, **overrides) -> "NetworkConfig":
        """Default architecture (256-128-64 / 128-128-64 encoders, 128 hidden decoder)."""
        hsi_hidden = overrides.pop("hsi_hidden", (256, 128, 64))
        als_hidden = overrides.pop("als_hidden", (128, 128, 64))
        dec_hidden = overrides.pop("decoder_hidden", (128,))
        return cls(
            hsi_dims=(n_hsi, *hsi_hidden),
            als_dims=(n_als, *als_hidden),
            decoder_dims=(hsi_hidden[-1] + als_hidden[-1], *dec_hidden, n_classes),
            **overrides,
        )

    @property
    def n_classes(self) -> int:
        return self.decoder_dims[-1]

    def stream_dims(self, stream: str) -> tuple[int, ...]:
        return {"hsi": self.hsi_dims, "als": self.als_dims, "dec": self.decoder_dims}[stream]


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x):
    t = np.tanh(GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)


def cosine_lr(epoch: int, lr: float, epochs: int) -> float:
    return 0.5 * lr * (1.0 + math.cos(math.pi * epoch / epochs))


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


@dataclass
class DualStreamNet:
    cfg: NetworkConfig
    params: dict = field(repr=False)
    buffers: dict = field(repr=False)
    adam_m: dict = field(repr=False)
    adam_v: dict = field(repr=False)
    step: int = 0
    mode: str = "train"

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "DualStreamNet":
        conv = lambda d: {k: v.astype(dtype) for k, v in d.items()}
        return replace(self, params=conv(self.params), buffers=conv(self.buffers),
                       adam_m=conv(self.adam_m), adam_v=conv(self.adam_v))

    def copy(self) -> "DualStreamNet":
        return self.astype(self.dtype)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def init_model(cfg: NetworkConfig, seed: int | None = None, dtype=np.float32) -> DualStreamNet:
    """He-normal weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params, buffers = {}, {}
    for stream in STREAMS:
        dims = cfg.stream_dims(stream)
        n_layers = len(dims) - 1
        for i in range(n_layers):
            fan_in, fan_out = dims[i], dims[i + 1]
            key = f"{stream}.{i}"
            params[f"{key}.W"] = (rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)).astype(dtype)
            params[f"{key}.b"] = np.zeros(fan_out, dtype)
            if i < n_layers - 1:
                params[f"{key}.gamma"] = np.ones(fan_out, dtype)
                params[f"{key}.beta"] = np.zeros(fan_out, dtype)
                buffers[f"{key}.running_mean"] = np.zeros(fan_out, dtype)
                buffers[f"{key}.running_var"] = np.ones(fan_out, dtype)
    zeros = lambda: {k: np.zeros_like(v) for k, v in params.items()}
    return DualStreamNet(cfg, params, buffers, zeros(), zeros())


def _check_inputs(model, x_hsi, x_als):
    cfg = model.cfg
    if len(x_hsi) == 0:
        raise ValidationError("empty batch")
    if x_hsi.ndim != 2 or x_hsi.shape[1] != cfg.hsi_dims[0]:
        raise ValidationError(f"HSI features must be (n, {cfg.hsi_dims[0]}), got {x_hsi.shape}")
    if x_als.ndim != 2 or x_als.shape[1] != cfg.als_dims[0]:
        raise ValidationError(f"ALS features must be (n, {cfg.als_dims[0]}), got {x_als.shape}")
    if len(x_als) != len(x_hsi):
        raise ValidationError("HSI and ALS batches differ in length")


def _stream_forward(model, stream, x, train, rng, cache):
    p, buf = model.params, model.buffers
    n_layers = len(model.cfg.stream_dims(stream)) - 1
    drop = model.cfg.dropout
    h = x
    for i in range(n_layers):
        key = f"{stream}.{i}"
        a = h @ p[f"{key}.W"] + p[f"{key}.b"]
        if i == n_layers - 1:
            cache.append((key, "linear", h))
            h = a
            break
        if train:
            mu = a.mean(axis=0)
            var = a.var(axis=0)
            n = len(a)
            unbiased = var * (n / (n - 1)) if n > 1 else var
            buf[f"{key}.running_mean"] = ((1 - BN_MOMENTUM) * buf[f"{key}.running_mean"] + BN_MOMENTUM * mu).astype(a.dtype)
            buf[f"{key}.running_var"] = ((1 - BN_MOMENTUM) * buf[f"{key}.running_var"] + BN_MOMENTUM * unbiased).astype(a.dtype)
        else:
            mu, var = buf[f"{key}.running_mean"], buf[f"{key}.running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (a - mu) * inv_std
        bn = p[f"{key}.gamma"] * xhat + p[f"{key}.beta"]
        act = gelu(bn)
        mask = None
        if train and drop > 0:
            mask = (rng.random(act.shape) >= drop).astype(act.dtype) / (1.0 - drop)
            act = act * mask
        cache.append((key, "block", (h, xhat, inv_std, bn, mask)))
        h = act
    return h


def forward(model: DualStreamNet, x_hsi, x_als, train: bool = False, rng=None):
    """Logits for a batch; with ``train`` also returns the backward cache.

    Train mode normalizes with batch statistics (updating the running ones)
    and applies inverted dropout drawn from ``rng``. Eval mode is a pure
    function of the inputs.
    """
    dt = model.dtype
    x_hsi = np.asarray(x_hsi, dtype=dt)
    x_als = np.asarray(x_als, dtype=dt)
    _check_inputs(model, x_hsi, x_als)
    if train and rng is None:
        rng = np.random.default_rng(0)
    cache: list = []
    z_h = _stream_forward(model, "hsi", x_hsi, train, rng, cache)
    z_a = _stream_forward(model, "als", x_als, train, rng, cache)
    z = np.concatenate([z_h, z_a], axis=1)
    logits = _stream_forward(model, "dec", z, train, rng, cache)
    if train:
        return logits, cache
    return logits


def _stream_backward(model, entries, dh, grads):
    p = model.params
    for key, kind, data in reversed(entries):
        if kind == "linear":
            h = data
            da = dh
        else:
            h, xhat, inv_std, bn, mask = data
            if mask is not None:
                dh = dh * mask
            dbn = dh * gelu_grad(bn)
            grads[f"{key}.gamma"] = (dbn * xhat).sum(axis=0)
            grads[f"{key}.beta"] = dbn.sum(axis=0)
            dxhat = dbn * p[f"{key}.gamma"]
            n = len(dxhat)
            da = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        grads[f"{key}.W"] = h.T @ da
        grads[f"{key}.b"] = da.sum(axis=0)
        dh = da @ p[f"{key}.W"].T
    return dh


def cross_entropy(logits, labels):
    labels = np.asarray(labels)
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def loss_and_gradients(model: DualStreamNet, x_hsi, x_als, labels, rng=None):
    """Mean cross-entropy over the batch and its gradient for every parameter.

    Runs the forward pass in train mode, so running statistics are updated.
    """
    labels = np.asarray(labels, dtype=np.int64)
    c = model.cfg.n_classes
    if len(labels) and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(f"labels must lie in [0, {c})")
    logits, cache = forward(model, x_hsi, x_als, train=True, rng=rng)
    logp = log_softmax(logits)
    n = len(labels)
    loss = float(-logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    by_stream = {s: [e for e in cache if e[0].startswith(s + ".")] for s in STREAMS}
    grads: dict = {}
    dz = _stream_backward(model, by_stream["dec"], dlogits, grads)
    d_h = model.cfg.hsi_dims[-1]
    _stream_backward(model, by_stream["hsi"], dz[:, :d_h], grads)
    _stream_backward(model, by_stream["als"], dz[:, d_h:], grads)
    return loss, {k: grads[k].astype(model.dtype) for k in model.params}


def adam_step(model: DualStreamNet, grads: dict, lr: float, weight_decay: float | None = None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> DualStreamNet:
    """One Adam update in place, with L2 weight decay added to the gradient
    of weight matrices only (biases and batch-norm affines are not decayed)."""
    wd = model.cfg.weight_decay if weight_decay is None else weight_decay
    model.step += 1
    t = model.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, param in model.params.items():
        g = grads[k]
        if wd and k.endswith(".W"):
            g = g + wd * param
        m = model.adam_m[k] = beta1 * model.adam_m[k] + (1 - beta1) * g
        v = model.adam_v[k] = beta2 * model.adam_v[k] + (1 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        model.params[k] = (param - update).astype(param.dtype)
    return model


PREDICT_CHUNK = 1024


def predict_logits(model: DualStreamNet, x_hsi, x_als, chunk: int = PREDICT_CHUNK):
    """Eval-mode logits, computed in fixed-size zero-padded chunks so a
    pixel's output never depends on what else is in the batch."""
    dt = model.dtype
    x_hsi = np.asarray(x_hsi, dtype=dt)
    x_als = np.asarray(x_als, dtype=dt)
    _check_inputs(model, x_hsi, x_als)
    n = len(x_hsi)
    out = np.empty((n, model.cfg.n_classes), dtype=dt)
    buf_h = np.zeros((chunk, x_hsi.shape[1]), dt)
    buf_a = np.zeros((chunk, x_als.shape[1]), dt)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        buf_h[: e - s] = x_hsi[s:e]
        buf_a[: e - s] = x_als[s:e]
        buf_h[e - s :] = 0
        buf_a[e - s :] = 0
        out[s:e] = forward(model, buf_h, buf_a, train=False)[: e - s]
    return out


def predict_proba(model: DualStreamNet, x_hsi, x_als, chunk: int = PREDICT_CHUNK):
    return softmax(predict_logits(model, x_hsi, x_als, chunk).astype(np.float64))


def _macro_f1(y_true, y_pred, n_classes):
    from .metrics import confusion, report

    cm = confusion(y_true, y_pred, n_classes)
    if cm.counts.sum() == 0:
        return float("nan")
    return report(cm).macro_f1


def train(model: DualStreamNet, train_set, val_set=None, cfg: NetworkConfig | None = None, log=None):
    """Fit ``model`` in place and return the per-epoch history.

    ``train_set`` and ``val_set`` are ``(x_hsi, x_als, labels)`` triples of
    standardized features. Mini-batches come from a fresh seeded shuffle
    every epoch and the last partial batch is kept. The learning rate
    follows a per-epoch cosine schedule. The final-epoch weights are kept.
    """
    cfg = cfg or model.cfg
    x_h, x_a, y = (np.asarray(a) for a in train_set)
    if len(y) == 0:
        raise ValidationError("empty training set")
    x_h = x_h.astype(model.dtype)
    x_a = x_a.astype(model.dtype)
    y = y.astype(np.int64)
    rng = np.random.default_rng(cfg.seed)
    history = []
    model.mode = "train"
    for epoch in range(cfg.epochs):
        lr_t = cosine_lr(epoch, cfg.lr, cfg.epochs)
        order = rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(y), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            loss, grads = loss_and_gradients(model, x_h[idx], x_a[idx], y[idx], rng=rng)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            adam_step(model, grads, lr_t, cfg.weight_decay)
            total += loss * len(idx)
        rec = {"epoch": epoch, "lr": lr_t, "train_loss": total / len(y)}
        if val_set is not None and len(val_set[2]):
            logits = predict_logits(model, val_set[0], val_set[1]).astype(np.float64)
            rec["val_loss"] = cross_entropy(logits, val_set[2])
            rec["val_macro_f1"] = _macro_f1(np.asarray(val_set[2]), logits.argmax(axis=1), cfg.n_classes)
        history.append(rec)
        if log is not None:
            log(rec)
    model.mode = "eval"
    return history


# checkpoints ------------------------------------------------------------------

_MAGIC = b"TPLDSNN1"


def save_model(model: DualStreamNet, path, extra: dict | None = None) -> None:
    """Write ``magic | u64 header length | JSON header | float32 blob``.

    The header lists every tensor (parameters, running statistics, Adam
    moments) with its shape in blob order.
    """
    tensors = []
    for group, d in (("params", model.params), ("buffers", model.buffers),
                     ("adam_m", model.adam_m), ("adam_v", model.adam_v)):
        tensors += [(group, k, v) for k, v in d.items()]
    header = {
        "config": asdict(model.cfg),
        "step": model.step,
        "mode": model.mode,
        "tensors": [[g, k, list(v.shape)] for g, k, v in tensors],
        "extra": extra or {},
    }
    hbytes = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for _, _, v in tensors:
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_model(path) -> tuple[DualStreamNet, dict]:
    """Inverse of :func:`save_model`; returns ``(model, extra)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise FormatError(f"{path} is not a model checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    blob = np.frombuffer(raw, dtype="<f4", offset=16 + hlen)
    groups = {"params": {}, "buffers": {}, "adam_m": {}, "adam_v": {}}
    pos = 0
    for group, key, shape in header["tensors"]:
        size = int(np.prod(shape))
        if pos + size > len(blob):
            raise FormatError(f"{path}: parameter blob truncated")
        groups[group][key] = blob[pos : pos + size].reshape(shape).astype(np.float32)
        pos += size
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} unexpected trailing values")
    cfg = NetworkConfig(**header["config"])
    model = DualStreamNet(cfg, groups["params"], groups["buffers"], groups["adam_m"], groups["adam_v"],
                          step=header["step"], mode=header["mode"])
    return model, header.get("extra", {})
