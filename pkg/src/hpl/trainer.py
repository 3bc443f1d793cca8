"""Training orchestration: warmup on the base loss, then the hierarchical
loss with periodic pyramid refreshes, plus checkpointing.

Determinism contract: every random decision comes from a stream derived
from (seed, salt), so two runs with the same config are bit-identical, and
a resumed run needs no serialized RNG state. The per-epoch batch order is
derived from (seed, SALT_BATCH, epoch); net init, proxy init and pyramid
clustering each own a salt of their own, which keeps single-level and
multi-level runs on identical batch sequences.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Rng, normalize_rows
from .data import Dataset
from .errors import CheckpointError, CheckpointVersionError, ContractError, TrainingError
from .evaluation import embed_dataset, evaluate
from .losses import LossConfig, base_loss, hpl_loss
from .network import (
    DEFAULT_EMBED_DIM,
    DEFAULT_HIDDEN_DIM,
    AdamState,
    Mlp,
    adam_step,
    backward,
    forward,
)
from .pyramid import (
    ProxyPyramid,
    init_pyramid,
    propagate_labels,
    set_fixed_hierarchy,
    update_assignments,
    update_centroids,
)

SALT_NET = 1
SALT_PROXIES = 2
SALT_PYRAMID = 3
SALT_BATCH = 4

CHECKPOINT_MAGIC = b"HPL1"


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs besides the data.

    level_sizes[0] must equal the dataset's class count; a single entry
    trains the plain base loss. update_period None means one refresh per
    epoch.
    """

    level_sizes: tuple
    epochs: int = 30
    warmup_epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-4
    proxy_lr_multiplier: float = 1.0
    update_period: Optional[int] = None
    loss_weights: tuple = (1.0, 0.1)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    embed_dim: int = DEFAULT_EMBED_DIM
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    use_gt_hierarchy: bool = False
    epoch_metrics: bool = True

    def __post_init__(self):
        object.__setattr__(self, "level_sizes", tuple(int(s) for s in self.level_sizes))
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if not self.level_sizes:
            raise ContractError("level_sizes must not be empty")
        if any(s < 1 for s in self.level_sizes):
            raise ContractError("level sizes must be positive")
        if any(b > a for a, b in zip(self.level_sizes, self.level_sizes[1:])):
            raise ContractError(f"level sizes must be non-increasing, got {self.level_sizes}")
        if len(self.loss_weights) != len(self.level_sizes):
            raise ContractError("need exactly one loss weight per level")
        if not all(np.isfinite(w) and w >= 0.0 for w in self.loss_weights):
            raise ContractError("loss weights must be finite and non-negative")
        if self.loss_weights[0] <= 0.0:
            raise ContractError("the fine-level loss weight must be positive")
        if any(s < 2 and w > 0.0 for s, w in zip(self.level_sizes, self.loss_weights)):
            raise ContractError(
                "every level with a positive loss weight needs at least two "
                "proxies (a single proxy leaves no negatives to score against)"
            )
        if self.epochs < 0 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ContractError("need 0 <= warmup_epochs <= epochs")
        if self.batch_size < 2:
            raise ContractError("batch_size must be at least 2")
        if not (np.isfinite(self.lr) and self.lr > 0.0):
            raise ContractError("lr must be positive")
        if not (np.isfinite(self.proxy_lr_multiplier) and self.proxy_lr_multiplier > 0.0):
            raise ContractError("proxy_lr_multiplier must be positive")
        if self.update_period is not None and self.update_period < 1:
            raise ContractError("update_period must be at least 1")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ContractError("embed_dim and hidden_dim must be positive")
        if not isinstance(self.loss, LossConfig):
            raise ContractError("loss must be a LossConfig")
        if self.use_gt_hierarchy and len(self.level_sizes) != 2:
            raise ContractError("a fixed hierarchy needs exactly two levels")


@dataclass
class IterationRecord:
    epoch: int
    iteration: int
    level0_loss: float
    total_loss: float


@dataclass
class EpochRecord:
    epoch: int
    mean_total_loss: float
    recall_at_1: Optional[float] = None
    r_precision: Optional[float] = None
    map_at_r: Optional[float] = None


@dataclass
class TrainingLog:
    iterations: list = field(default_factory=list)
    epochs: list = field(default_factory=list)


def log_line(rec: IterationRecord) -> str:
    """The tab-separated per-iteration line: epoch, iter, level-0 loss, total."""
    return f"{rec.epoch}\t{rec.iteration}\t{rec.level0_loss!r}\t{rec.total_loss!r}"


@dataclass
class Checkpoint:
    """A resumable training state snapshot at an epoch boundary."""

    config: TrainConfig
    epoch: int  # completed epochs
    net: Mlp
    proxies: np.ndarray
    pyramid: Optional[ProxyPyramid]
    adam_net: AdamState
    adam_proxies: AdamState


@dataclass
class TrainResult:
    net: Mlp
    proxies: np.ndarray
    pyramid: Optional[ProxyPyramid]
    log: TrainingLog
    config: TrainConfig
    epochs_completed: int
    adam_net: AdamState
    adam_proxies: AdamState

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            epoch=self.epochs_completed,
            net=self.net,
            proxies=self.proxies,
            pyramid=self.pyramid,
            adam_net=self.adam_net,
            adam_proxies=self.adam_proxies,
        )


def sample_batch(dataset: Dataset, batch_size: int, rng: Rng):
    """Yield (inputs, labels) batches covering one epoch in shuffled order.

    Every sample appears exactly once per epoch; the final batch may be
    short when batch_size does not divide the dataset.
    """
    n = dataset.num_samples
    if not 1 <= batch_size <= n:
        raise ContractError(f"batch_size must be in [1, {n}], got {batch_size}")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.features[idx], dataset.labels[idx]


def iterations_per_epoch(num_samples: int, batch_size: int) -> int:
    return -(-num_samples // batch_size)


def _build_pyramid(proxies, cfg: TrainConfig, dataset: Dataset, rng: Rng) -> ProxyPyramid:
    pyramid = init_pyramid(proxies, cfg.level_sizes, cfg.loss_weights, rng)
    if cfg.use_gt_hierarchy:
        if dataset.gt_coarse is None:
            raise ContractError("dataset has no superclass ids for a fixed hierarchy")
        if cfg.level_sizes[1] != dataset.num_superclasses:
            raise ContractError(
                f"level_sizes[1] must equal the superclass count "
                f"{dataset.num_superclasses}, got {cfg.level_sizes[1]}"
            )
        set_fixed_hierarchy(pyramid, dataset.gt_coarse)
    return pyramid


def _epoch_metrics(net: Mlp, dataset: Dataset):
    # Same-set retrieval needs every class to have a partner.
    if np.bincount(dataset.labels).min() < 2:
        return None
    emb = embed_dataset(net, dataset.features)
    return evaluate(emb, dataset.labels, ks=(1,), same_set=True)


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    resume: Optional[Checkpoint] = None,
    iteration_hook: Optional[Callable[[IterationRecord], None]] = None,
    epoch_hook: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Run the full training loop.

    Warmup epochs optimize the network and fine proxies with the base loss;
    at warmup end the pyramid is built by clustering the fine proxies, and
    later epochs optimize the weighted multi-level loss, refreshing coarse
    assignments and centroids every update_period iterations. Fine proxies
    keep receiving gradients throughout; coarse levels move only at
    refreshes.
    """
    if cfg.level_sizes[0] != dataset.num_classes:
        raise ContractError(
            f"level_sizes[0] must equal the class count {dataset.num_classes}, "
            f"got {cfg.level_sizes[0]}"
        )
    if cfg.batch_size > dataset.num_samples:
        raise ContractError("batch_size exceeds the dataset size")

    root = Rng(cfg.seed)
    if resume is None:
        net = Mlp((dataset.dim, cfg.hidden_dim, cfg.embed_dim), root.derive(SALT_NET))
        draws = root.derive(SALT_PROXIES).normal(
            size=(dataset.num_classes, cfg.embed_dim)
        )
        proxies, _ = normalize_rows(draws, "initial proxy")
        pyramid = None
        adam_net = AdamState.for_params(net.parameters(), lr=cfg.lr)
        adam_prox = AdamState.for_params([proxies], lr=cfg.lr * cfg.proxy_lr_multiplier)
        start_epoch = 0
    else:
        expect = dataclasses.replace(resume.config, epochs=cfg.epochs)
        if expect != cfg:
            raise ContractError("resume checkpoint was trained under a different config")
        if resume.epoch > cfg.epochs:
            raise ContractError(
                f"checkpoint already has {resume.epoch} epochs, config asks for {cfg.epochs}"
            )
        net = resume.net
        proxies = resume.proxies
        pyramid = resume.pyramid
        adam_net = resume.adam_net
        adam_prox = resume.adam_proxies
        start_epoch = resume.epoch
    if net.input_dim != dataset.dim:
        raise ContractError(
            f"network input dim {net.input_dim} != feature dim {dataset.dim}"
        )

    per_epoch = iterations_per_epoch(dataset.num_samples, cfg.batch_size)
    period = cfg.update_period if cfg.update_period is not None else per_epoch
    # Refresh counter continues across resume: it is a pure function of the
    # epoch count, so no extra state needs to live in the checkpoint.
    steps_after_warmup = max(0, start_epoch - cfg.warmup_epochs) * per_epoch

    log = TrainingLog()
    for epoch in range(start_epoch, cfg.epochs):
        if epoch >= cfg.warmup_epochs and pyramid is None:
            pyramid = _build_pyramid(proxies, cfg, dataset, root.derive(SALT_PYRAMID))
        in_warmup = epoch < cfg.warmup_epochs
        epoch_total = 0.0
        count = 0
        batches = sample_batch(dataset, cfg.batch_size, root.derive(SALT_BATCH, epoch))
        for it, (xb, yb) in enumerate(batches):
            emb, tape = forward(net, xb)
            if in_warmup:
                out = base_loss(emb, yb, proxies, cfg.loss)
                level0 = out.value
            else:
                per_level = propagate_labels(yb, pyramid)
                out = hpl_loss(emb, per_level, pyramid.levels, pyramid.weights, cfg.loss)
                level0 = out.level_values[0]
            if not np.isfinite(out.value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} iteration {it}"
                )
            grads = backward(net, tape, out.d_embeddings)
            adam_step(net.parameters(), grads.flat(), adam_net)
            adam_step([proxies], [out.d_proxies], adam_prox)
            rec = IterationRecord(epoch, it, float(level0), float(out.value))
            log.iterations.append(rec)
            if iteration_hook is not None:
                iteration_hook(rec)
            epoch_total += float(out.value)
            count += 1
            if not in_warmup:
                steps_after_warmup += 1
                if steps_after_warmup % period == 0 and pyramid.num_levels > 1:
                    update_assignments(pyramid)
                    update_centroids(pyramid)
        report = _epoch_metrics(net, dataset) if cfg.epoch_metrics else None
        erec = EpochRecord(epoch, epoch_total / count)
        if report is not None:
            erec.recall_at_1 = report.recall_at[1]
            erec.r_precision = report.r_precision
            erec.map_at_r = report.map_at_r
        log.epochs.append(erec)
        if epoch_hook is not None:
            epoch_hook(erec)

    return TrainResult(
        net=net,
        proxies=proxies,
        pyramid=pyramid,
        log=log,
        config=cfg,
        epochs_completed=cfg.epochs,
        adam_net=adam_net,
        adam_proxies=adam_prox,
    )


def _config_meta(cfg: TrainConfig) -> list:
    return [
        ("cfg_level_sizes", ",".join(str(s) for s in cfg.level_sizes)),
        ("cfg_epochs", str(cfg.epochs)),
        ("cfg_warmup_epochs", str(cfg.warmup_epochs)),
        ("cfg_batch_size", str(cfg.batch_size)),
        ("cfg_lr", repr(cfg.lr)),
        ("cfg_proxy_lr_multiplier", repr(cfg.proxy_lr_multiplier)),
        ("cfg_update_period", "none" if cfg.update_period is None else str(cfg.update_period)),
        ("cfg_loss_weights", ",".join(repr(w) for w in cfg.loss_weights)),
        ("cfg_loss_kind", cfg.loss.kind),
        ("cfg_loss_alpha", repr(cfg.loss.alpha)),
        ("cfg_loss_delta", repr(cfg.loss.delta)),
        ("cfg_seed", str(cfg.seed)),
        ("cfg_embed_dim", str(cfg.embed_dim)),
        ("cfg_hidden_dim", str(cfg.hidden_dim)),
        ("cfg_use_gt_hierarchy", "1" if cfg.use_gt_hierarchy else "0"),
        ("cfg_epoch_metrics", "1" if cfg.epoch_metrics else "0"),
    ]


def _checkpoint_tensors(ckpt: Checkpoint) -> list:
    tensors = []
    for i in range(ckpt.net.num_layers):
        tensors.append((f"net_w{i}", ckpt.net.weights[i]))
        tensors.append((f"net_b{i}", ckpt.net.biases[i]))
    tensors.append(("proxies", ckpt.proxies))
    for j, (m, v) in enumerate(zip(ckpt.adam_net.m, ckpt.adam_net.v)):
        tensors.append((f"adam_net_m{j}", m))
        tensors.append((f"adam_net_v{j}", v))
    tensors.append(("adam_proxies_m", ckpt.adam_proxies.m[0]))
    tensors.append(("adam_proxies_v", ckpt.adam_proxies.v[0]))
    if ckpt.pyramid is not None:
        for l in range(1, ckpt.pyramid.num_levels):
            tensors.append((f"pyramid_level{l}", ckpt.pyramid.levels[l]))
        for l, q in enumerate(ckpt.pyramid.assignments):
            tensors.append((f"pyramid_assign{l}", q.astype(np.float64)))
    return tensors


def save_checkpoint(path: str, ckpt: Checkpoint):
    """Write the versioned binary container.

    Layout: magic "HPL1", an 8-byte little-endian metadata length, UTF-8
    key=value lines (tensor= lines declare name and shape in payload
    order), then the tensors as raw little-endian float64.
    """
    meta = _config_meta(ckpt.config)
    meta.append(("epoch", str(ckpt.epoch)))
    meta.append(("net_dims", ",".join(str(d) for d in ckpt.net.dims)))
    meta.append(("adam_net_t", str(ckpt.adam_net.t)))
    meta.append(("adam_proxies_t", str(ckpt.adam_proxies.t)))
    meta.append(("has_pyramid", "0" if ckpt.pyramid is None else "1"))
    if ckpt.pyramid is not None:
        meta.append(("pyramid_num_levels", str(ckpt.pyramid.num_levels)))
        meta.append(("pyramid_frozen", "1" if ckpt.pyramid.frozen_assignment else "0"))
        meta.append(("pyramid_normalized",
                     "1" if ckpt.pyramid.normalize_for_clustering else "0"))
    tensors = _checkpoint_tensors(ckpt)
    for name, arr in tensors:
        shape = ",".join(str(d) for d in arr.shape)
        meta.append(("tensor", f"{name}:{shape}"))
    blob = "".join(f"{k}={v}\n" for k, v in meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _meta_value(fields: dict, key: str) -> str:
    if key not in fields:
        raise CheckpointError(f"checkpoint metadata is missing {key!r}")
    return fields[key]


def _meta_int(fields: dict, key: str) -> int:
    try:
        return int(_meta_value(fields, key))
    except ValueError:
        raise CheckpointError(f"checkpoint metadata {key!r} is not an integer") from None


def _meta_float(fields: dict, key: str) -> float:
    try:
        return float(_meta_value(fields, key))
    except ValueError:
        raise CheckpointError(f"checkpoint metadata {key!r} is not a number") from None


def _config_from_meta(fields: dict) -> TrainConfig:
    period = _meta_value(fields, "cfg_update_period")
    try:
        return TrainConfig(
            level_sizes=tuple(
                int(t) for t in _meta_value(fields, "cfg_level_sizes").split(",")
            ),
            epochs=_meta_int(fields, "cfg_epochs"),
            warmup_epochs=_meta_int(fields, "cfg_warmup_epochs"),
            batch_size=_meta_int(fields, "cfg_batch_size"),
            lr=_meta_float(fields, "cfg_lr"),
            proxy_lr_multiplier=_meta_float(fields, "cfg_proxy_lr_multiplier"),
            update_period=None if period == "none" else int(period),
            loss_weights=tuple(
                float(t) for t in _meta_value(fields, "cfg_loss_weights").split(",")
            ),
            loss=LossConfig(
                kind=_meta_value(fields, "cfg_loss_kind"),
                alpha=_meta_float(fields, "cfg_loss_alpha"),
                delta=_meta_float(fields, "cfg_loss_delta"),
            ),
            seed=_meta_int(fields, "cfg_seed"),
            embed_dim=_meta_int(fields, "cfg_embed_dim"),
            hidden_dim=_meta_int(fields, "cfg_hidden_dim"),
            use_gt_hierarchy=_meta_value(fields, "cfg_use_gt_hierarchy") == "1",
            epoch_metrics=_meta_value(fields, "cfg_epoch_metrics") == "1",
        )
    except (ValueError, ContractError) as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from None


def load_checkpoint(path: str) -> Checkpoint:
    """Read a checkpoint; corruption and version mismatches raise eagerly."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise CheckpointError("file is too short to hold the magic bytes")
    if data[:3] != CHECKPOINT_MAGIC[:3]:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if data[3:4] != CHECKPOINT_MAGIC[3:4]:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {data[3:4]!r}"
        )
    if len(data) < 12:
        raise CheckpointError("truncated before the metadata length")
    (meta_len,) = struct.unpack("<Q", data[4:12])
    if len(data) < 12 + meta_len:
        raise CheckpointError("truncated inside the metadata block")
    try:
        text = data[12:12 + meta_len].decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("metadata block is not valid UTF-8") from None

    fields = {}
    declared = []
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed metadata line {line!r}")
        if key == "tensor":
            name, sep2, shape = value.partition(":")
            if not sep2 or not name:
                raise CheckpointError(f"malformed tensor declaration {value!r}")
            try:
                dims = tuple(int(t) for t in shape.split(","))
            except ValueError:
                raise CheckpointError(f"malformed tensor shape {shape!r}") from None
            if any(d < 0 for d in dims):
                raise CheckpointError(f"negative tensor dimension in {value!r}")
            declared.append((name, dims))
        else:
            fields[key] = value

    tensors = {}
    offset = 12 + meta_len
    for name, dims in declared:
        count = 1
        for d in dims:
            count *= d
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise CheckpointError(f"truncated inside tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        tensors[name] = arr.reshape(dims).copy()
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} unexpected trailing bytes")

    def tensor(name):
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        return tensors[name]

    cfg = _config_from_meta(fields)
    dims = tuple(int(t) for t in _meta_value(fields, "net_dims").split(","))
    n_layers = len(dims) - 1
    try:
        net = Mlp.from_arrays(
            [tensor(f"net_w{i}") for i in range(n_layers)],
            [tensor(f"net_b{i}") for i in range(n_layers)],
        )
    except ContractError as exc:
        raise CheckpointError(f"checkpoint network is invalid: {exc}") from None
    if net.dims != dims:
        raise CheckpointError("net_dims does not match the stored tensors")

    proxies = tensor("proxies")
    adam_net = AdamState(
        lr=cfg.lr,
        m=[tensor(f"adam_net_m{j}") for j in range(2 * n_layers)],
        v=[tensor(f"adam_net_v{j}") for j in range(2 * n_layers)],
        t=_meta_int(fields, "adam_net_t"),
    )
    adam_prox = AdamState(
        lr=cfg.lr * cfg.proxy_lr_multiplier,
        m=[tensor("adam_proxies_m")],
        v=[tensor("adam_proxies_v")],
        t=_meta_int(fields, "adam_proxies_t"),
    )

    pyramid = None
    if _meta_value(fields, "has_pyramid") == "1":
        num_levels = _meta_int(fields, "pyramid_num_levels")
        levels = [proxies]
        for l in range(1, num_levels):
            levels.append(tensor(f"pyramid_level{l}"))
        assignments = []
        for l in range(num_levels - 1):
            q = tensor(f"pyramid_assign{l}")
            as_int = q.astype(np.int64)
            if not np.array_equal(as_int.astype(np.float64), q):
                raise CheckpointError(f"assignment tensor pyramid_assign{l} is not integral")
            assignments.append(as_int)
        pyramid = ProxyPyramid(
            levels=levels,
            assignments=assignments,
            weights=np.asarray(cfg.loss_weights, dtype=np.float64),
            frozen_assignment=_meta_value(fields, "pyramid_frozen") == "1",
            normalize_for_clustering=_meta_value(fields, "pyramid_normalized") == "1",
        )
        try:
            pyramid.validate()
        except ContractError as exc:
            raise CheckpointError(f"checkpoint pyramid is invalid: {exc}") from None

    return Checkpoint(
        config=cfg,
        epoch=_meta_int(fields, "epoch"),
        net=net,
        proxies=proxies,
        pyramid=pyramid,
        adam_net=adam_net,
        adam_proxies=adam_prox,
    )
