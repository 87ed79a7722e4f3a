"""Encoder, projection heads, the contrastive image loss, SGD and checkpoints.

Everything here is plain numpy with hand-written backward passes. Layers use
explicit cache objects, so several forward passes can coexist (the two-view
contrastive objective needs that) and a stored cache can be reused for more
than one backward call.

Parameters are float32; loss arithmetic upcasts to float64 internally and
gradients are cast back at the optimizer step. Checkpoints serialize every
parameter, running statistic and velocity buffer as float32 tensors in
declaration order, so a save/load round trip is bitwise exact.
"""

from __future__ import annotations

import struct
from typing import Protocol

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    IoError,
    MathError,
    ShapeError,
    StateError,
)
from .util import STREAM_INIT, atomic_write_bytes, rng_stream

CHECKPOINT_MAGIC = b"HIRLCKPT"
CHECKPOINT_VERSION = 1
BN_EPS = 1e-5


class Linear:
    """Affine layer. Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias."""

    def __init__(self, in_dim, out_dim, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(in_dim)
        self.W = rng.uniform(-bound, bound, size=(in_dim, out_dim)).astype(dtype)
        self.b = np.zeros(out_dim, dtype=dtype)

    def forward(self, x, train):
        if x.shape[1] != self.W.shape[0]:
            raise ShapeError(
                f"input width {x.shape[1]} does not match layer fan-in {self.W.shape[0]}"
            )
        return x @ self.W + self.b, x

    def backward(self, cache, dy):
        x = cache
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.W.T, grads

    def param_items(self):
        return [("W", self.W), ("b", self.b)]

    def stat_items(self):
        return []


class BatchNorm:
    """Per-feature normalization with affine scale and shift.

    Train mode normalizes by batch statistics (biased variance) and folds
    them into the running averages with momentum 0.9; eval mode uses the
    frozen running statistics, which makes the layer a fixed affine map.
    """

    def __init__(self, dim, momentum=0.9, dtype=np.float32):
        self.gamma = np.ones(dim, dtype=dtype)
        self.beta = np.zeros(dim, dtype=dtype)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.momentum = momentum

    def forward(self, x, train):
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1.0 - m) * mu
            self.running_var[...] = m * self.running_var + (1.0 - m) * var
        else:
            mu = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv
        return self.gamma * xhat + self.beta, (xhat, inv, train)

    def backward(self, cache, dy):
        xhat, inv, train = cache
        grads = {"gamma": (dy * xhat).sum(axis=0), "beta": dy.sum(axis=0)}
        if train:
            dx = self.gamma * inv * (
                dy - dy.mean(axis=0) - xhat * (dy * xhat).mean(axis=0)
            )
        else:
            dx = dy * self.gamma * inv
        return dx, grads

    def param_items(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def stat_items(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class ReLU:
    def forward(self, x, train):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, dy):
        return dy * cache, {}

    def param_items(self):
        return []

    def stat_items(self):
        return []


class MLP:
    """Sequential stack with explicit-cache forward/backward."""

    def __init__(self, layers):
        self.layers = layers
        self._cache = None

    def forward_with_cache(self, x, train=False):
        x = np.asarray(x)
        if x.ndim != 2:
            raise ShapeError(f"expected a 2-d batch, got shape {x.shape}")
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train)
            caches.append(cache)
        return x, caches

    def forward(self, x, train=False):
        y, cache = self.forward_with_cache(x, train)
        self._cache = cache
        return y

    def backward_from(self, caches, dy):
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            dy, layer_grads = self.layers[i].backward(caches[i], dy)
            for name, g in layer_grads.items():
                grads[f"{i}.{name}"] = g
        return dy, grads

    def backward(self, dy):
        if self._cache is None:
            raise StateError("backward called with no cached forward pass")
        return self.backward_from(self._cache, dy)

    def param_items(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.param_items():
                out.append((f"{i}.{name}", arr))
        return out

    def stat_items(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.stat_items():
                out.append((f"{i}.{name}", arr))
        return out

    def set_param(self, name, value):
        idx, pname = name.split(".", 1)
        layer = self.layers[int(idx)]
        arr = dict(layer.param_items() + layer.stat_items())[pname]
        if arr.shape != value.shape:
            raise DataError(f"tensor {name}: shape {value.shape} != {arr.shape}")
        arr[...] = value


class Encoder(MLP):
    """Two affine layers with a ReLU between: raw input -> representation."""

    def __init__(self, in_dim, hidden, out_dim, rng, dtype=np.float32):
        if min(in_dim, hidden, out_dim) < 1:
            raise ConfigError("encoder dims must all be >= 1")
        super().__init__(
            [
                Linear(in_dim, hidden, rng, dtype),
                ReLU(),
                Linear(hidden, out_dim, rng, dtype),
            ]
        )


class ProjectionHead(MLP):
    """Per-level projection: affine layers with normalization + ReLU between.

    ``n_layers`` counts the affine layers (2 by default; deeper stacks just
    repeat the hidden block). ``use_norm=False`` drops the normalization,
    which keeps the map smooth for gradient checking.
    """

    def __init__(self, dim, hidden, n_layers=2, use_norm=True, rng=None, dtype=np.float32):
        if n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {n_layers}")
        if min(dim, hidden) < 1:
            raise ConfigError("head dims must be >= 1")
        layers = []
        width = dim
        for _ in range(n_layers - 1):
            layers.append(Linear(width, hidden, rng, dtype))
            if use_norm:
                layers.append(BatchNorm(hidden, dtype=dtype))
            layers.append(ReLU())
            width = hidden
        layers.append(Linear(width, dim, rng, dtype))
        super().__init__(layers)


def head_forward(head, z0_batch, mode):
    """Run a projection head. ``mode`` is ``"train"`` or ``"eval"``."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(z0_batch)
    if mode == "train" and x.shape[0] < 2:
        raise ConfigError("train mode needs a batch of at least 2 rows")
    return head.forward(x, train=mode == "train")


def head_backward(head, grad_out):
    """Backward through the last cached forward: (param grads, input grad)."""
    dx, grads = head.backward(np.asarray(grad_out))
    return grads, dx


def infonce_loss(anchors, positives, temperature):
    """In-batch contrastive loss on cosine similarities.

    Row i of ``anchors`` must pick out row i of ``positives`` among all rows;
    the loss is the mean cross-entropy of the similarity logits divided by
    ``temperature``. When every pairwise similarity is equal the logits carry
    no information and the loss is exactly ``log(batch)``. Returns
    ``(loss, (grad_anchors, grad_positives))`` with float64 gradients.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    if a.ndim != 2 or a.shape != p.shape:
        raise ShapeError(f"anchors {a.shape} and positives {p.shape} must match, 2-d")
    b = a.shape[0]
    if b < 2:
        raise ConfigError("contrastive loss needs a batch of at least 2")
    a_norm = np.sqrt((a * a).sum(axis=1, keepdims=True))
    p_norm = np.sqrt((p * p).sum(axis=1, keepdims=True))
    if (a_norm == 0).any() or (p_norm == 0).any():
        raise MathError("zero-norm row in contrastive input")
    an = a / a_norm
    pn = p / p_norm
    logits = an @ pn.T / temperature
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float((lse - np.diag(logits)).mean())

    soft = np.exp(logits - lse[:, None])
    dlogits = (soft - np.eye(b)) / b
    dan = dlogits @ pn / temperature
    dpn = dlogits.T @ an / temperature
    # undo the row normalization
    da = (dan - (dan * an).sum(axis=1, keepdims=True) * an) / a_norm
    dp = (dpn - (dpn * pn).sum(axis=1, keepdims=True) * pn) / p_norm
    return loss, (da, dp)


class FineGrainedObjective(Protocol):
    """Pluggable per-sample objective: loss plus encoder parameter grads."""

    def compute(self, encoder, x, rng):
        ...


class InfoNCEObjective:
    """Two-view contrastive objective over raw input rows.

    The second view is the input plus isotropic Gaussian noise drawn from
    the step RNG, a stand-in for a real augmentation pipeline. Both views
    pass through the encoder; gradients from both sides accumulate.
    """

    def __init__(self, temperature=0.2, view_noise=0.25):
        if not temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {temperature}")
        if not view_noise > 0:
            raise ConfigError(f"view_noise must be > 0, got {view_noise}")
        self.temperature = temperature
        self.view_noise = view_noise

    def compute(self, encoder, x, rng):
        noise = rng.standard_normal(x.shape).astype(x.dtype)
        x2 = x + np.asarray(self.view_noise, dtype=x.dtype) * noise
        z1, c1 = encoder.forward_with_cache(x, train=True)
        z2, c2 = encoder.forward_with_cache(x2, train=True)
        loss, (d1, d2) = infonce_loss(z1, z2, self.temperature)
        _, g1 = encoder.backward_from(c1, d1.astype(z1.dtype))
        _, g2 = encoder.backward_from(c2, d2.astype(z2.dtype))
        return loss, {k: g1[k] + g2[k] for k in g1}


class TrainState:
    """Model parameters plus optimizer state and the config that built them."""

    def __init__(self, encoder, heads, epoch, seed, config_text):
        self.encoder = encoder
        self.heads = heads
        self.epoch = epoch
        self.seed = seed
        self.config_text = config_text
        self.velocities = {
            name: np.zeros_like(arr) for name, arr in self.param_items()
        }

    def _modules(self):
        out = [("enc", self.encoder)]
        for i, head in enumerate(self.heads):
            out.append((f"head{i}", head))
        return out

    def param_items(self):
        out = []
        for prefix, module in self._modules():
            for name, arr in module.param_items():
                out.append((f"{prefix}.{name}", arr))
        return out

    def stat_items(self):
        out = []
        for prefix, module in self._modules():
            for name, arr in module.stat_items():
                out.append((f"{prefix}.{name}", arr))
        return out

    def tensor_items(self):
        """Checkpoint order: parameters, running stats, then velocities."""
        out = list(self.param_items()) + list(self.stat_items())
        for name, _ in self.param_items():
            out.append((f"vel.{name}", self.velocities[name]))
        return out

    def set_tensor(self, name, value):
        if name.startswith("vel."):
            target = self.velocities[name[4:]]
            if target.shape != value.shape:
                raise DataError(f"tensor {name}: shape {value.shape} != {target.shape}")
            target[...] = value
            return
        prefix, rest = name.split(".", 1)
        for mod_prefix, module in self._modules():
            if mod_prefix == prefix:
                module.set_param(rest, value)
                return
        raise DataError(f"unknown tensor {name}")

    def snapshot(self):
        """Deep copy for divergence retention; cheap at these sizes."""
        import copy

        return copy.deepcopy(self)


def build_state(config):
    """Construct a fresh TrainState from a resolved training config."""
    rng = rng_stream(config.seed, STREAM_INIT)
    dtype = np.float32
    encoder = Encoder(config.in_dim, config.encoder_hidden, config.dim, rng, dtype)
    heads = [
        ProjectionHead(
            config.dim,
            config.head_hidden,
            n_layers=config.head_layers,
            use_norm=config.use_norm,
            rng=rng,
            dtype=dtype,
        )
        for _ in range(len(config.level_sizes))
    ]
    return TrainState(
        encoder=encoder,
        heads=heads,
        epoch=0,
        seed=config.seed,
        config_text=config.to_text(),
    )


def sgd_step(state, gradients, lr, momentum=0.9, weight_decay=0.0):
    """Momentum SGD over the state's parameters, in declaration order.

    ``gradients`` maps parameter names to arrays; parameters without an
    entry are left untouched. ``v = momentum * v + g + wd * p; p -= lr * v``.
    """
    if lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
    params = dict(state.param_items())
    unknown = set(gradients) - set(params)
    if unknown:
        raise ConfigError(f"gradients for unknown parameters: {sorted(unknown)}")
    for name, p in state.param_items():
        if name not in gradients:
            continue
        g = np.asarray(gradients[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"gradient {name}: shape {g.shape} != {p.shape}")
        v = state.velocities[name]
        v *= p.dtype.type(momentum)
        v += g + p.dtype.type(weight_decay) * p
        p -= p.dtype.type(lr) * v
    return state


def save_checkpoint(state, path):
    """Serialize the full training state; see the module docstring for layout."""
    config_bytes = state.config_text.encode("utf-8")
    tensors = state.tensor_items()
    parts = [
        struct.pack("<8sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        struct.pack("<IQ", state.epoch, state.seed),
        struct.pack("<I", len(tensors)),
    ]
    for _, arr in tensors:
        dims = arr.shape
        parts.append(struct.pack("<I", len(dims)))
        parts.append(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    try:
        atomic_write_bytes(path, b"".join(parts))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path):
    """Rebuild a TrainState from a checkpoint file."""
    from .trainer import TrainConfig

    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise FormatError(f"{path}: truncated at offset {off}")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    magic, version = take("<8sI")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (config_len,) = take("<I")
    if off + config_len > len(raw):
        raise FormatError(f"{path}: truncated config block")
    config_text = raw[off : off + config_len].decode("utf-8")
    off += config_len
    epoch, seed = take("<IQ")
    (n_tensors,) = take("<I")

    config = TrainConfig.from_text(config_text)
    state = build_state(config)
    state.epoch = int(epoch)
    state.seed = int(seed)
    expected = state.tensor_items()
    if n_tensors != len(expected):
        raise DataError(
            f"{path}: {n_tensors} tensors, architecture expects {len(expected)}"
        )
    for name, target in expected:
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        size = count * 4
        if off + size > len(raw):
            raise FormatError(f"{path}: truncated tensor payload for {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims)
        off += size
        state.set_tensor(name, arr)
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")
    return state
