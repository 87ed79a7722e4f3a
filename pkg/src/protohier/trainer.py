"""Two-stage training loop.

Stage one runs the contrastive image objective alone for ``t1_epochs``. Each
of the ``t2_epochs`` stage-two epochs starts by re-extracting all
representations and rebuilding the prototype tree, then takes minibatch
steps on the joint objective: image loss plus path-discrimination loss,
summed with equal weight.

Determinism: all per-epoch randomness (shuffle order, view noise, negative
sampling, tree refresh) is derived from ``(config.seed, epoch)`` through
fixed stream tags, so a run is bitwise reproducible and a checkpoint resumed
at an epoch boundary continues exactly as the uninterrupted run would.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields, replace

import numpy as np

from .data_io import EmbeddingSet
from .errors import ConfigError, DivergenceError, StateError
from .hkmeans import extract_and_cluster, validate_level_sizes
from .model import (
    InfoNCEObjective,
    build_state,
    head_backward,
    head_forward,
    load_checkpoint,
    save_checkpoint,
)
from .model import sgd_step
from .prototree import all_paths_matrix, sample_negative_roots
from .spd import spd_loss_core
from .util import (
    STREAM_NEGATIVES,
    STREAM_REFRESH,
    STREAM_SHUFFLE,
    STREAM_VIEWS,
    atomic_write_text,
    rng_stream,
)

METRICS_COLUMNS = ("epoch", "img_loss", "spd_loss", "total", "refresh_wall_ms")


@dataclass
class TrainConfig:
    """Resolved training configuration; serializes to flat key=value text."""

    t1_epochs: int = 2
    t2_epochs: int = 8
    batch_size: int = 256
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    level_sizes: tuple = (24, 8, 4)
    n_neg: int = 16
    eps_clamp: float = 1e-7
    dim: int = 32
    encoder_hidden: int = 128
    head_hidden: int = 64
    head_layers: int = 2
    use_norm: bool = True
    temperature: float = 0.2
    view_noise: float = 0.25
    seed: int = 0
    spd_enabled: bool = True
    refresh_subsample: int = 0
    threads: int = 1
    in_dim: int = 0
    data_path: str = ""
    labels_path: str = ""
    ckpt_path: str = ""
    metrics_path: str = ""

    def validate(self):
        if self.t1_epochs < 0 or self.t2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.t1_epochs + self.t2_epochs < 1:
            raise ConfigError("at least one training epoch is required")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        validate_level_sizes(self.level_sizes[0] if self.level_sizes else 0, self.level_sizes)
        if self.n_neg < 1:
            raise ConfigError(f"n_neg must be >= 1, got {self.n_neg}")
        if not 0.0 < self.eps_clamp < 0.5:
            raise ConfigError(f"eps_clamp must lie in (0, 0.5), got {self.eps_clamp}")
        if min(self.dim, self.encoder_hidden, self.head_hidden) < 1:
            raise ConfigError("model widths must all be >= 1")
        if self.head_layers < 1:
            raise ConfigError(f"head_layers must be >= 1, got {self.head_layers}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not self.view_noise > 0:
            raise ConfigError(f"view_noise must be > 0, got {self.view_noise}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.refresh_subsample < 0:
            raise ConfigError("refresh_subsample must be >= 0")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.in_dim < 0:
            raise ConfigError(f"in_dim must be >= 0, got {self.in_dim}")
        return self

    def to_text(self):
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if f.name == "level_sizes":
                value = ",".join(str(int(m)) for m in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        """Parse flat ``key=value`` lines; '#' starts a comment."""
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = parse_config_value(cls, key, raw)
        return cls(**values)


def parse_config_value(cls, key, raw):
    """Parse one raw config string into the type of field ``key``."""
    field_map = {f.name: f for f in fields(cls)}
    if key not in field_map:
        raise ConfigError(f"unknown config key {key!r}")
    default = field_map[key].default
    try:
        if key == "level_sizes":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from exc


def default_epoch_split(total):
    """Default stage split: one tenth warmup, floor, at least one epoch."""
    if total < 1:
        raise ConfigError(f"total epochs must be >= 1, got {total}")
    t1 = max(1, total // 10)
    return t1, total - t1


def derived_seed(seed, tag, index):
    ss = np.random.SeedSequence([int(seed), int(tag), int(index)])
    return int(ss.generate_state(1)[0])


def joint_step(state, x, sample_idx, tree, paths, config, objective, rng_views, rng_neg):
    """One minibatch update; returns the loss breakdown.

    With ``tree=None`` the step is the image objective alone, which is
    exactly a stage-one step. Otherwise the path-discrimination loss is added
    with equal weight and every parameter receives a gradient.
    """
    img_loss, enc_grads = objective.compute(state.encoder, x, rng_views)
    grads = {f"enc.{name}": g for name, g in enc_grads.items()}
    spd_value = 0.0
    if tree is not None:
        z0, cache0 = state.encoder.forward_with_cache(x, train=True)
        z_levels = [head_forward(head, z0, "train") for head in state.heads]
        z = np.stack(z_levels, axis=1)
        pos_roots = tree.bottom_assign[sample_idx]
        neg_roots = sample_negative_roots(
            tree.levels[0].shape[0], pos_roots, config.n_neg, rng_neg
        )
        pos_vecs = paths[pos_roots]
        neg_vecs = paths[neg_roots]
        spd_value, grad_z, _, _ = spd_loss_core(
            z, pos_vecs, neg_vecs, eps=config.eps_clamp
        )
        dz0 = np.zeros_like(z0)
        for level, head in enumerate(state.heads):
            head_grads, dz0_l = head_backward(
                head, grad_z[:, level, :].astype(z0.dtype)
            )
            dz0 += dz0_l
            for name, g in head_grads.items():
                grads[f"head{level}.{name}"] = g
        _, enc_spd = state.encoder.backward_from(cache0, dz0)
        for name, g in enc_spd.items():
            grads[f"enc.{name}"] = grads[f"enc.{name}"] + g
        missing = {name for name, _ in state.param_items()} - set(grads)
        if missing:
            raise StateError(f"parameters received no gradient: {sorted(missing)}")
    sgd_step(state, grads, config.lr, config.momentum, config.weight_decay)
    return {"img": img_loss, "spd": spd_value, "total": img_loss + spd_value}


def metrics_csv_text(rows):
    lines = [",".join(METRICS_COLUMNS)]
    for row in rows:
        lines.append(
            ",".join(
                [str(row["epoch"])]
                + [repr(float(row[c])) for c in METRICS_COLUMNS[1:]]
            )
        )
    return "\n".join(lines) + "\n"


def train(config, data, resume_from=None, stop_after=None):
    """Run the full schedule; returns ``(state, metrics_rows)``.

    ``resume_from`` names a checkpoint written by a run with an identical
    config; training continues from its epoch counter and finishes
    bit-identically to the uninterrupted run. ``stop_after`` interrupts the
    run at that epoch boundary (checkpoint already written), which is how an
    interruption looks to the resume path. A non-finite loss aborts with
    :class:`DivergenceError`; the last finite state rides on the exception
    and the last epoch-boundary checkpoint file is left in place.
    """
    X = data.data if isinstance(data, EmbeddingSet) else np.asarray(data)
    if X.ndim != 2:
        raise ConfigError(f"training data must be 2-d, got shape {X.shape}")
    n = X.shape[0]
    if config.in_dim == 0:
        config = replace(config, in_dim=X.shape[1])
    elif config.in_dim != X.shape[1]:
        raise ConfigError(
            f"config in_dim={config.in_dim} does not match data width {X.shape[1]}"
        )
    config.validate()
    if config.batch_size > n:
        raise ConfigError(f"batch_size={config.batch_size} exceeds n={n}")
    if config.t2_epochs > 0 and config.spd_enabled:
        validate_level_sizes(n, config.level_sizes)

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.config_text != config.to_text():
            raise ConfigError("checkpoint config does not match the requested config")
    else:
        state = build_state(config)

    objective = InfoNCEObjective(config.temperature, config.view_noise)
    total_epochs = config.t1_epochs + config.t2_epochs
    if state.epoch > total_epochs:
        raise ConfigError(
            f"checkpoint is at epoch {state.epoch}, schedule has {total_epochs}"
        )
    X = np.ascontiguousarray(X, dtype=np.float32)

    rows = []
    last_good = state.snapshot()
    for epoch in range(state.epoch, total_epochs):
        tree = None
        paths = None
        refresh_ms = 0.0
        if epoch >= config.t1_epochs and config.spd_enabled:
            t0 = time.perf_counter()
            tree = extract_and_cluster(
                state,
                X,
                config.level_sizes,
                seed=derived_seed(config.seed, STREAM_REFRESH, epoch),
                n_threads=config.threads,
                subsample=config.refresh_subsample,
            )
            paths = all_paths_matrix(tree)
            refresh_ms = (time.perf_counter() - t0) * 1000.0

        perm = rng_stream(config.seed, STREAM_SHUFFLE, epoch).permutation(n)
        rng_views = rng_stream(config.seed, STREAM_VIEWS, epoch)
        rng_neg = rng_stream(config.seed, STREAM_NEGATIVES, epoch)
        img_sum = 0.0
        spd_sum = 0.0
        steps = 0
        for start in range(0, n - config.batch_size + 1, config.batch_size):
            idx = perm[start : start + config.batch_size]
            breakdown = joint_step(
                state, X[idx], idx, tree, paths, config, objective, rng_views, rng_neg
            )
            if not np.isfinite(breakdown["total"]):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch + 1}, step {steps + 1}",
                    last_state=last_good,
                )
            img_sum += breakdown["img"]
            spd_sum += breakdown["spd"]
            steps += 1
        img_mean = img_sum / steps
        spd_mean = spd_sum / steps
        rows.append(
            {
                "epoch": epoch + 1,
                "img_loss": img_mean,
                "spd_loss": spd_mean,
                "total": img_mean + spd_mean,
                "refresh_wall_ms": refresh_ms,
            }
        )
        state.epoch = epoch + 1
        last_good = state.snapshot()
        if config.ckpt_path:
            save_checkpoint(state, config.ckpt_path)
        if config.metrics_path:
            atomic_write_text(config.metrics_path, metrics_csv_text(rows))
        if stop_after is not None and state.epoch >= stop_after:
            break
    return state, rows
