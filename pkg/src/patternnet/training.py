"""Loss assembly, the optimization loop, evaluation metrics and checkpoints.

The total loss is the label-smoothed cross entropy plus ``lambda`` times
the linear-mapping loss: the population standard deviation of the
least-squares coefficients mapping the subset descriptor matrix onto the
global descriptor.  Driving that deviation to zero pushes every cloning
subset to describe the object the way the whole cloud does.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloning import Partition, clone_partition
from .geometry import PointCloud, add_gaussian_noise, augment
from .network import (
    Descriptor,
    PatternNetConfig,
    PatternNetParams,
    classify_logits,
    describe,
    describe_batch,
    head_forward,
    segment_logits,
)
from .ops import ridge_pinv_solve, softmax_cross_entropy_smoothed
from .tensor import Tensor, concat

RIDGE = 1e-6
_STD_FLOOR = 1e-24  # variance clamp so the std stays differentiable at 0

_CKPT_MAGIC = b"PNET"
_CKPT_VERSION = 1


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss; carries a checkpoint."""

    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    """Unreadable checkpoint file (bad magic, truncation)."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


def derive_seed(*parts) -> int:
    """Stable sub-seed from arbitrary labels (sha256, not Python hash)."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class LossBreakdown:
    total: Tensor
    ce: Tensor
    mapping: Tensor
    mapping_weight: float


@dataclass
class EvalReport:
    overall_accuracy: float
    per_class_accuracy: float
    mean_iou: float | None = None
    subset_consistency_rate: float | None = None
    mapping_loss_mean: float | None = None

    def __post_init__(self):
        for name in ("overall_accuracy", "per_class_accuracy", "mean_iou", "subset_consistency_rate"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass
class Checkpoint:
    config: PatternNetConfig
    params: PatternNetParams
    opt_state: dict
    epoch: int
    seed: int
    history: list[dict] = field(default_factory=list)


def linear_mapping_loss(subset_matrix: Tensor, global_vector: Tensor, ridge: float = RIDGE) -> Tensor:
    """Std of the least-squares coefficients mapping subset columns onto the global vector."""
    levels = subset_matrix.shape[1]
    if levels == 1:
        warnings.warn("linear mapping loss is zero for a single cloning level", stacklevel=2)
        return Tensor(np.zeros((), dtype=subset_matrix.dtype))
    weights = ridge_pinv_solve(subset_matrix, global_vector, ridge)
    centered = weights - weights.mean()
    return (centered * centered).mean().clamp_min(_STD_FLOOR).sqrt()


def total_loss(logits: Tensor, labels, descriptors: list[Descriptor], config: PatternNetConfig) -> LossBreakdown:
    """Cross entropy plus the batch-averaged linear-mapping loss."""
    ce = softmax_cross_entropy_smoothed(logits, labels, config.label_smoothing)
    lam = config.mapping_weight
    mapping_terms = [linear_mapping_loss(d.subset_matrix, d.global_vector) for d in descriptors]
    if mapping_terms:
        mapping = concat([t.reshape(1) for t in mapping_terms], axis=0).mean()
    else:
        mapping = Tensor(np.zeros((), dtype=logits.dtype))
    total = ce + lam * mapping if lam != 0.0 else ce
    return LossBreakdown(total=total, ce=ce, mapping=mapping, mapping_weight=lam)


class Adam:
    """Adam over named parameter tensors, with in-place updates."""

    def __init__(self, named_params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()


def _partition_for(cloud: PointCloud, config: PatternNetConfig, seed_parts: tuple) -> Partition:
    return clone_partition(cloud, config.levels, derive_seed(*seed_parts))


def _forward_cloud(
    cloud: PointCloud,
    partition: Partition,
    params: PatternNetParams,
    config: PatternNetConfig,
    training: bool,
) -> Descriptor:
    return describe(cloud.points, partition, params, config, training)


def fit(
    train_clouds: list[PointCloud],
    config: PatternNetConfig,
    seed: int,
    epochs: int,
    batch_size: int = 16,
    eval_clouds: list[PointCloud] | None = None,
    lr: float = 1e-3,
    lr_decay_every: int = 20,
    history_path=None,
    augment_data: bool = True,
    refresh_bn: bool = True,
    threads: int = 1,
    log=None,
) -> Checkpoint:
    """Train a classifier; deterministic given (data, config, seed) single-threaded.

    Each epoch repartitions (per config), augments, runs the forward pass in
    cloud minibatches and takes one Adam step per batch with a x0.5 learning
    rate decay every `lr_decay_every` epochs.
    """
    if not train_clouds:
        raise ValueError("empty training set")
    for c in train_clouds:
        if c.class_label is None:
            raise ValueError(f"cloud {c.id!r} has no class label")
    params = PatternNetParams.create(config, derive_seed(seed, "init"))
    optimizer = Adam(params.named_parameters(), lr=lr)
    checkpoint = Checkpoint(config, params, _opt_state(optimizer), 0, seed)
    history_file = open(history_path, "w") if history_path is not None else None

    fixed_partitions: dict[str, Partition] = {}
    try:
        for epoch in range(epochs):
            optimizer.lr = lr * (0.5 ** (epoch // lr_decay_every))
            order = np.random.default_rng(derive_seed(seed, "order", epoch)).permutation(len(train_clouds))
            ce_sum = mapping_sum = 0.0
            hit = total = 0
            for start in range(0, len(order), batch_size):
                batch_ids = order[start : start + batch_size]
                batch_points = []
                batch_parts = []
                labels = []
                for ci in batch_ids:
                    cloud = train_clouds[ci]
                    if config.repartition_every_epoch:
                        part = _partition_for(cloud, config, (seed, "part", epoch, cloud.id))
                    else:
                        if cloud.id not in fixed_partitions:
                            fixed_partitions[cloud.id] = _partition_for(cloud, config, (seed, "part", cloud.id))
                        part = fixed_partitions[cloud.id]
                    if augment_data:
                        cloud = augment(cloud, derive_seed(seed, "aug", epoch, cloud.id))
                    batch_points.append(cloud.points)
                    batch_parts.append(part)
                    labels.append(train_clouds[ci].class_label)
                descriptors = describe_batch(batch_points, batch_parts, params, config, training=True)
                batch = concat([d.combined.reshape(1, config.descriptor_dim) for d in descriptors], axis=0)
                rng = np.random.default_rng(derive_seed(seed, "dropout", epoch, start))
                logits = head_forward(batch, params, config, training=True, rng=rng)
                loss = total_loss(logits, np.asarray(labels), descriptors, config)
                if not np.isfinite(loss.total.data):
                    checkpoint.epoch = epoch
                    checkpoint.opt_state = _opt_state(optimizer)
                    raise DivergenceError(f"non-finite loss at epoch {epoch}", checkpoint)
                optimizer.zero_grad()
                loss.total.backward()
                optimizer.step()

                n = len(batch_ids)
                ce_sum += float(loss.ce.data) * n
                mapping_sum += float(loss.mapping.data) * n
                hit += int((np.argmax(logits.data, axis=1) == np.asarray(labels)).sum())
                total += n

            record = {
                "epoch": epoch + 1,
                "ce": ce_sum / total,
                "mapping": mapping_sum / total,
                "total": ce_sum / total + config.mapping_weight * mapping_sum / total,
                "train_acc": hit / total,
                "test_acc": None,
            }
            if eval_clouds:
                if refresh_bn:
                    refresh_bn_stats(train_clouds, params, config, seed, batch_size)
                checkpoint.epoch = epoch + 1
                record["test_acc"] = evaluate(eval_clouds, checkpoint, seed=seed, threads=threads).overall_accuracy
            checkpoint.history.append(record)
            if history_file is not None:
                history_file.write(json.dumps(record) + "\n")
                history_file.flush()
            if log is not None:
                log(record)
    finally:
        if history_file is not None:
            history_file.close()

    if refresh_bn and epochs > 0:
        refresh_bn_stats(train_clouds, params, config, seed, batch_size)
    checkpoint.epoch = epochs
    checkpoint.opt_state = _opt_state(optimizer)
    return checkpoint


def _opt_state(optimizer: Adam) -> dict:
    return {"t": optimizer.t, "lr": optimizer.lr, "m": optimizer.m, "v": optimizer.v}


def refresh_bn_stats(
    clouds: list[PointCloud],
    params: PatternNetParams,
    config: PatternNetConfig,
    seed: int,
    batch_size: int = 16,
) -> None:
    """Re-estimate batch-norm running statistics under the final weights.

    Runs forward passes in training mode (no gradients, no dropout) over the
    clean clouds; resetting the bootstrap counters first makes the first
    batch re-seed the statistics, so stale estimates from early training
    cannot linger.  This is what keeps eval mode usable after short runs.
    """
    for layer_name in ("branch", "global_mlp", "cls_head", "psi_layer", "seg_branch", "seg_head"):
        group = getattr(params, layer_name)
        if group is None:
            continue
        layers = group if isinstance(group, (list, tuple)) else [group]
        for layer in layers:
            if hasattr(layer, "bn_batches_seen"):
                layer.bn_batches_seen = 0
    quiet = PatternNetConfig.from_dict({**config.to_dict(), "dropout": 0.0})
    for start in range(0, len(clouds), batch_size):
        batch = clouds[start : start + batch_size]
        if len(batch) < 2:
            continue
        parts = [_partition_for(c, quiet, (seed, "bnref", c.id)) for c in batch]
        descriptors = describe_batch([c.points for c in batch], parts, params, quiet, training=True)
        stacked = concat([d.combined.reshape(1, quiet.descriptor_dim) for d in descriptors], axis=0)
        head_forward(stacked, params, quiet, training=True, rng=np.random.default_rng(0))


def _classify_cloud(
    cloud: PointCloud,
    checkpoint: Checkpoint,
    seed: int,
    noise_sigma: float,
    k_override: int | None = None,
) -> tuple[int, float]:
    config = checkpoint.config
    if k_override is not None:
        doc = config.to_dict()
        doc["neighbors"] = k_override
        config = PatternNetConfig.from_dict(doc)
    if noise_sigma > 0:
        cloud = add_gaussian_noise(cloud, noise_sigma, derive_seed(seed, "noise", cloud.id))
    part = _partition_for(cloud, config, (seed, "evalpart", cloud.id))
    desc = _forward_cloud(cloud, part, checkpoint.params, config, training=False)
    logits = classify_logits(desc.combined, checkpoint.params, config, training=False)
    if config.levels > 1:
        mapping = float(linear_mapping_loss(desc.subset_matrix.detach(), desc.global_vector.detach()).data)
    else:
        mapping = 0.0
    return int(np.argmax(logits.data)), mapping


def evaluate(
    clouds: list[PointCloud],
    checkpoint: Checkpoint,
    noise_sigma: float = 0.0,
    seed: int = 0,
    threads: int = 1,
    k_override: int | None = None,
) -> EvalReport:
    """Eval-mode accuracy over a labeled dataset, with optional test-time noise."""
    if noise_sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if not clouds:
        raise ValueError("empty evaluation set")
    labels = []
    for c in clouds:
        if c.class_label is None:
            raise ValueError(f"cloud {c.id!r} has no class label")
        if c.class_label >= checkpoint.config.num_classes:
            raise ValueError(
                f"label {c.class_label} outside the checkpoint's {checkpoint.config.num_classes}-class space"
            )
        labels.append(c.class_label)
    labels = np.asarray(labels)

    def job(cloud):
        return _classify_cloud(cloud, checkpoint, seed, noise_sigma, k_override)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, clouds))
    else:
        results = [job(c) for c in clouds]
    preds = np.asarray([r[0] for r in results])
    mapping_mean = float(np.mean([r[1] for r in results]))

    overall = float((preds == labels).mean())
    per_class = [float((preds[labels == c] == c).mean()) for c in np.unique(labels)]
    return EvalReport(
        overall_accuracy=overall,
        per_class_accuracy=float(np.mean(per_class)),
        mapping_loss_mean=mapping_mean,
    )


def subset_consistency(clouds: list[PointCloud], checkpoint: Checkpoint, seed: int = 0, threads: int = 1) -> float:
    """Fraction of clouds whose every cloning subset alone gets the full-cloud label."""
    config = checkpoint.config
    single = PatternNetConfig.from_dict({**config.to_dict(), "levels": 1})

    def job(cloud):
        part = _partition_for(cloud, config, (seed, "evalpart", cloud.id))
        desc = _forward_cloud(cloud, part, checkpoint.params, config, training=False)
        full_label = int(np.argmax(classify_logits(desc.combined, checkpoint.params, config, training=False).data))
        for idx in part.subsets():
            sub_points = cloud.points[idx]
            sub_part = Partition(
                np.zeros(len(idx), dtype=np.int64), 1, 0, np.full(1, np.nan), within_tolerance=True
            )
            sub_desc = describe(sub_points, sub_part, checkpoint.params, single, training=False)
            sub_label = int(
                np.argmax(classify_logits(sub_desc.combined, checkpoint.params, single, training=False).data)
            )
            if sub_label != full_label:
                return False
        return True

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flags = list(pool.map(job, clouds))
    else:
        flags = [job(c) for c in clouds]
    return float(np.mean(flags))


# -- segmentation metrics --------------------------------------------------------


def mean_iou(
    predictions: list[np.ndarray],
    ground_truth: list[np.ndarray],
    class_ids: list[int],
) -> tuple[float, dict[int, float]]:
    """Category-averaged intersection-over-union.

    Per shape, the IoU of each part in its category's part set is averaged
    (parts absent from both prediction and truth count as 1); shape IoUs are
    averaged per category, category IoUs are averaged for the overall score.
    """
    if not (len(predictions) == len(ground_truth) == len(class_ids)):
        raise ValueError("predictions, ground truth and class ids must align")
    class_ids = [int(c) for c in class_ids]
    part_sets: dict[int, set[int]] = {}
    for gt, cid in zip(ground_truth, class_ids):
        part_sets.setdefault(cid, set()).update(np.unique(gt).tolist())

    shape_ious: dict[int, list[float]] = {cid: [] for cid in part_sets}
    for pred, gt, cid in zip(predictions, ground_truth, class_ids):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth lengths differ")
        ious = []
        for part in sorted(part_sets[cid]):
            p = pred == part
            g = gt == part
            union = int(np.logical_or(p, g).sum())
            inter = int(np.logical_and(p, g).sum())
            ious.append(1.0 if union == 0 else inter / union)
        shape_ious[cid].append(sum(ious) / len(ious))

    per_category = {cid: sum(vals) / len(vals) for cid, vals in shape_ious.items()}
    return sum(per_category.values()) / len(per_category), per_category


def evaluate_iou(
    clouds: list[PointCloud],
    checkpoint: Checkpoint,
    seed: int = 0,
    threads: int = 1,
) -> tuple[float, dict[int, float]]:
    """Run the segmentation head over a part-labeled dataset and score IoU."""
    for c in clouds:
        if c.part_labels is None:
            raise ValueError(f"cloud {c.id!r} has no part labels")
    config = checkpoint.config

    def job(cloud):
        part = _partition_for(cloud, config, (seed, "evalpart", cloud.id))
        desc = _forward_cloud(cloud, part, checkpoint.params, config, training=False)
        logits = segment_logits(cloud.points, desc, checkpoint.params, config, training=False)
        return np.argmax(logits.data, axis=1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(job, clouds))
    else:
        preds = [job(c) for c in clouds]
    return mean_iou(preds, [c.part_labels for c in clouds], [c.class_label or 0 for c in clouds])


# -- checkpoint serialization ------------------------------------------------------


def _tensor_directory(checkpoint: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in checkpoint.params.named_parameters():
        entries.append((name, p.data))
    for name, buf in checkpoint.params.named_buffers():
        entries.append((name, buf))
    for name in sorted(checkpoint.opt_state["m"]):
        entries.append((f"opt.m.{name}", checkpoint.opt_state["m"][name]))
    for name in sorted(checkpoint.opt_state["v"]):
        entries.append((f"opt.v.{name}", checkpoint.opt_state["v"][name]))
    return entries


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    """Write magic + version + JSON header + little-endian f32 payloads."""
    entries = _tensor_directory(checkpoint)
    directory = []
    offset = 0
    for name, arr in entries:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "version": _CKPT_VERSION,
        "config": checkpoint.config.to_dict(),
        "epoch": checkpoint.epoch,
        "seed": checkpoint.seed,
        "opt": {"t": checkpoint.opt_state.get("t", 0), "lr": checkpoint.opt_state.get("lr", 0.0)},
        "history": checkpoint.history,
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic (expected PNET)")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated JSON header")
    try:
        header = json.loads(raw[12 : 12 + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt JSON header: {exc}") from None

    config = PatternNetConfig.from_dict(header["config"])
    params = PatternNetParams.create(config, seed=0)
    payload = raw[12 + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if len(payload) < start + count * 4:
            raise CheckpointError(f"{path}: truncated tensor payload for {entry['name']!r}")
        arrays[entry["name"]] = (
            np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape).astype(config.np_dtype)
        )

    for name, p in params.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        p.data = arrays[name].copy()
    for name, buf in params.named_buffers():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        buf[...] = arrays[name]

    opt_state = {
        "t": header["opt"]["t"],
        "lr": header["opt"]["lr"],
        "m": {n[len("opt.m.") :]: arrays[n].copy() for n in arrays if n.startswith("opt.m.")},
        "v": {n[len("opt.v.") :]: arrays[n].copy() for n in arrays if n.startswith("opt.v.")},
    }
    return Checkpoint(
        config=config,
        params=params,
        opt_state=opt_state,
        epoch=header["epoch"],
        seed=header["seed"],
        history=header["history"],
    )
