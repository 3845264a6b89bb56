"""Network assembly: per-subset relation branches, descriptors, and heads.

The classifier pipeline is: partition the cloud into L subsets, run every
subset through the same four edge-convolution stages (KNN graph -> stacked
edge features -> shared MLP -> max over neighbors), pool each subset's
concatenated stage outputs into a 256-d subset descriptor, pool an MLP of
all per-point features into a 256-d global descriptor, and feed the
concatenation of the pooled subset descriptors and the global descriptor
(512-d) into the classification head.  Segmentation reuses the 512-d
descriptor next to a point-wise feature chain.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .cloning import Partition
from .neighbors import METRICS, NeighborIndex, knn
from .ops import AffineParams, MlpLayerParams, affine_forward, dropout, max_pool_rows, shared_mlp_forward
from .tensor import Tensor, concat


@dataclass
class PatternNetConfig:
    num_classes: int
    num_parts: int | None = None
    levels: int = 4
    neighbors: int = 30
    branch_widths: tuple[int, ...] = (64, 64, 64, 64)
    psi_dim: int = 256
    global_dim: int = 256
    head_widths: tuple[int, ...] = (256, 256)
    mapping_weight: float = 0.2  # weight of the linear-mapping loss term
    label_smoothing: float = 0.2
    dropout: float = 0.5
    dynamic_graph: bool = True
    layer1_metric: str = "hilbert"
    psi_mlp: bool = False
    dtype: str = "float64"
    repartition_every_epoch: bool = True

    def __post_init__(self):
        self.branch_widths = tuple(self.branch_widths)
        self.head_widths = tuple(self.head_widths)
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.num_parts is not None and self.num_parts < 1:
            raise ValueError("num_parts must be positive")
        if self.levels < 1 or self.neighbors < 1:
            raise ValueError("levels and neighbors must be positive")
        if sum(self.branch_widths) != self.psi_dim:
            raise ValueError(
                f"psi_dim {self.psi_dim} must equal the sum of branch widths {self.branch_widths}"
            )
        if self.layer1_metric not in METRICS:
            raise ValueError(f"unknown layer1_metric {self.layer1_metric!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def descriptor_dim(self) -> int:
        return self.psi_dim + self.global_dim

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["branch_widths"] = list(self.branch_widths)
        doc["head_widths"] = list(self.head_widths)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PatternNetConfig":
        return cls(**doc)


@dataclass
class PatternNetParams:
    branch: list[MlpLayerParams]  # four edge layers, shared across subsets
    global_mlp: MlpLayerParams
    cls_head: tuple[MlpLayerParams, MlpLayerParams, AffineParams]
    psi_layer: MlpLayerParams | None = None
    seg_branch: list[MlpLayerParams] | None = None
    seg_head: tuple[MlpLayerParams, MlpLayerParams, AffineParams] | None = None

    @classmethod
    def create(cls, config: PatternNetConfig, seed: int) -> "PatternNetParams":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        dt = config.np_dtype
        widths = config.branch_widths
        branch = []
        f_in = 3
        for w in widths:
            branch.append(MlpLayerParams.create(2 * f_in, w, rng, dt))  # stacked (point, edge) input
            f_in = w
        global_mlp = MlpLayerParams.create(config.psi_dim, config.global_dim, rng, dt)
        h1, h2 = config.head_widths
        cls_head = (
            MlpLayerParams.create(config.descriptor_dim, h1, rng, dt),
            MlpLayerParams.create(h1, h2, rng, dt),
            AffineParams.create(h2, config.num_classes, rng, dt),
        )
        psi_layer = MlpLayerParams.create(config.psi_dim, config.psi_dim, rng, dt) if config.psi_mlp else None
        seg_branch = None
        seg_head = None
        if config.num_parts is not None:
            seg_branch = []
            f_in = 3
            for w in widths:
                seg_branch.append(MlpLayerParams.create(f_in, w, rng, dt))  # point-wise, no edges
                f_in = w
            seg_head = (
                MlpLayerParams.create(widths[-1] + config.descriptor_dim, h1, rng, dt),
                MlpLayerParams.create(h1, h2, rng, dt),
                AffineParams.create(h2, config.num_parts, rng, dt),
            )
        return cls(branch, global_mlp, cls_head, psi_layer, seg_branch, seg_head)

    def _groups(self):
        yield "branch", self.branch
        yield "global_mlp", [self.global_mlp]
        yield "cls_head", list(self.cls_head)
        if self.psi_layer is not None:
            yield "psi_layer", [self.psi_layer]
        if self.seg_branch is not None:
            yield "seg_branch", self.seg_branch
        if self.seg_head is not None:
            yield "seg_head", list(self.seg_head)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for group, layers in self._groups():
            for i, layer in enumerate(layers):
                if isinstance(layer, AffineParams):
                    out.append((f"{group}.{i}.weight", layer.weight))
                    out.append((f"{group}.{i}.bias", layer.bias))
                else:
                    out.append((f"{group}.{i}.weight", layer.weight))
                    out.append((f"{group}.{i}.bias", layer.bias))
                    out.append((f"{group}.{i}.bn_gamma", layer.bn_gamma))
                    out.append((f"{group}.{i}.bn_beta", layer.bn_beta))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for group, layers in self._groups():
            for i, layer in enumerate(layers):
                if isinstance(layer, MlpLayerParams):
                    out.append((f"{group}.{i}.bn_running_mean", layer.bn_running_mean))
                    out.append((f"{group}.{i}.bn_running_var", layer.bn_running_var))
        return out

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


@dataclass
class Descriptor:
    subset_matrix: Tensor  # (psi_dim, L): one pooled column per cloning subset
    global_vector: Tensor  # (global_dim,)
    combined: Tensor  # (psi_dim + global_dim,)


def edge_features(features: Tensor, nbrs: NeighborIndex) -> Tensor:
    """Stack each point with its neighbor edge responses: (N, K, 2F).

    Entry (i, k) is concat(f_i, f_j - f_i) for the k-th neighbor j of i.
    """
    idx = np.asarray(nbrs.indices)
    n, f = features.shape
    if idx.ndim != 2 or idx.shape[0] != n:
        raise ValueError(f"neighbor index shape {idx.shape} does not match {n} points")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError("neighbor index out of range")
    k = idx.shape[1]
    center = features.repeat_rows(k)
    neighbor = features.take_rows(idx.reshape(-1))
    return concat([center, neighbor - center], axis=1).reshape(n, k, 2 * f)


def _subset_graphs(features_np: np.ndarray, ranges: list[tuple[int, int]], k: int, metric: str) -> NeighborIndex:
    """KNN per subset slice, with indices offset into the stacked row space."""
    blocks = []
    for start, stop in ranges:
        local = knn(features_np[start:stop], k, metric=metric).indices
        blocks.append(local + start)
    return NeighborIndex(np.concatenate(blocks, axis=0), metric, k)


def _stage(features: Tensor, layer: MlpLayerParams, graph: NeighborIndex, training: bool) -> Tensor:
    n, f = features.shape
    k = graph.k
    edges = edge_features(features, graph).reshape(n * k, 2 * f)
    hidden = shared_mlp_forward(layer, edges, training)
    return hidden.reshape(n, k, layer.f_out).max(axis=1)


def _branch_stack(
    features: Tensor,
    ranges: list[tuple[int, int]],
    params: PatternNetParams,
    config: PatternNetConfig,
    training: bool,
) -> Tensor:
    """Run stacked subset rows through the four relation stages.

    Every subset keeps its own KNN graph, but the shared MLPs (and their
    batch statistics, in training mode) operate on all rows at once.
    """
    graph = _subset_graphs(features.data, ranges, config.neighbors, config.layer1_metric)
    stages = []
    for s, layer in enumerate(params.branch):
        if s > 0 and config.dynamic_graph:
            graph = _subset_graphs(features.data, ranges, config.neighbors, "hilbert")
        features = _stage(features, layer, graph, training)
        stages.append(features)
    return concat(stages, axis=1)


def branch_forward(
    subset_points: Tensor,
    params: PatternNetParams,
    config: PatternNetConfig,
    training: bool,
) -> tuple[Tensor, Tensor]:
    """Run one cloning subset through the four relation stages.

    Returns the per-point concatenated stage features (N_l, psi_dim) and the
    pooled subset descriptor (psi_dim,).
    """
    n = subset_points.shape[0]
    if n <= config.neighbors:
        raise ValueError(f"subset too small: {n} points but K={config.neighbors}")
    pointfeat = _branch_stack(subset_points, [(0, n)], params, config, training)
    return pointfeat, max_pool_rows(pointfeat)


def global_descriptor(all_pointfeat: Tensor, params: PatternNetParams, training: bool) -> Tensor:
    """Pool an MLP of all subsets' per-point features into one global vector."""
    return max_pool_rows(shared_mlp_forward(params.global_mlp, all_pointfeat, training))


def describe_batch(
    clouds_points: list[np.ndarray],
    partitions: list[Partition],
    params: PatternNetParams,
    config: PatternNetConfig,
    training: bool = False,
) -> list[Descriptor]:
    """Describe several clouds in one pass.

    All subsets of all clouds are stacked so each shared MLP runs once; in
    training mode the batch-norm statistics therefore pool over the whole
    minibatch, which is what makes the running statistics representative.
    Eval-mode results are row-wise and identical to per-cloud calls.
    """
    if len(clouds_points) != len(partitions):
        raise ValueError("need one partition per cloud")
    stacked = []
    subset_ranges: list[tuple[int, int]] = []
    cloud_ranges: list[tuple[int, int]] = []
    cloud_subsets: list[list[int]] = []
    offset = 0
    for points, partition in zip(clouds_points, partitions):
        points = np.asarray(points, dtype=config.np_dtype)
        if partition.assignment.shape[0] != points.shape[0]:
            raise ValueError("partition does not cover this cloud")
        start_cloud = offset
        subsets = []
        for idx in partition.subsets():
            if idx.size <= config.neighbors:
                raise ValueError(f"subset too small: {idx.size} points but K={config.neighbors}")
            stacked.append(points[idx])
            subsets.append(len(subset_ranges))
            subset_ranges.append((offset, offset + idx.size))
            offset += idx.size
        cloud_ranges.append((start_cloud, offset))
        cloud_subsets.append(subsets)

    rows = Tensor(np.concatenate(stacked, axis=0))
    pointfeat = _branch_stack(rows, subset_ranges, params, config, training)
    global_hidden = shared_mlp_forward(params.global_mlp, pointfeat, training)

    all_psi = [pointfeat.narrow_rows(a, b).max(axis=0) for a, b in subset_ranges]
    if params.psi_layer is not None:
        stacked_psi = concat([v.reshape(1, config.psi_dim) for v in all_psi], axis=0)
        mapped = shared_mlp_forward(params.psi_layer, stacked_psi, training)
        all_psi = [mapped.narrow_rows(i, i + 1).reshape(config.psi_dim) for i in range(len(all_psi))]

    out = []
    for (a, b), subset_ids in zip(cloud_ranges, cloud_subsets):
        subset_matrix = concat([all_psi[i].reshape(config.psi_dim, 1) for i in subset_ids], axis=1)
        phi = global_hidden.narrow_rows(a, b).max(axis=0)
        pooled = subset_matrix.max(axis=1)
        out.append(Descriptor(subset_matrix=subset_matrix, global_vector=phi, combined=concat([pooled, phi], axis=0)))
    return out


def describe(
    points: np.ndarray,
    partition: Partition,
    params: PatternNetParams,
    config: PatternNetConfig,
    training: bool = False,
) -> Descriptor:
    """Produce the subset matrix, global vector and combined 512-d descriptor."""
    return describe_batch([points], [partition], params, config, training)[0]


def head_forward(
    descriptors: Tensor,
    params: PatternNetParams,
    config: PatternNetConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Classification head over a batch of combined descriptors (B, 512) -> (B, C)."""
    mlp1, mlp2, out = params.cls_head
    h = dropout(shared_mlp_forward(mlp1, descriptors, training), config.dropout, training, rng)
    h = dropout(shared_mlp_forward(mlp2, h, training), config.dropout, training, rng)
    return affine_forward(out, h)


def classify_logits(
    descriptor: Tensor,
    params: PatternNetParams,
    config: PatternNetConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Raw class logits for a single combined descriptor."""
    return head_forward(descriptor.reshape(1, config.descriptor_dim), params, config, training, rng).reshape(
        config.num_classes
    )


def segment_logits(
    points: np.ndarray,
    descriptor: Descriptor,
    params: PatternNetParams,
    config: PatternNetConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-point part logits (M, S): point-wise chain + tiled cloud descriptor."""
    if params.seg_branch is None or params.seg_head is None:
        raise ValueError("this model was built without a segmentation head (num_parts unset)")
    feats = Tensor(np.asarray(points, dtype=config.np_dtype))
    m = feats.shape[0]
    for layer in params.seg_branch:
        feats = shared_mlp_forward(layer, feats, training)
    fused = concat([feats, descriptor.combined.tile_rows(m)], axis=1)
    mlp1, mlp2, out = params.seg_head
    h = dropout(shared_mlp_forward(mlp1, fused, training), config.dropout, training, rng)
    h = dropout(shared_mlp_forward(mlp2, h, training), config.dropout, training, rng)
    return affine_forward(out, h)


def count_params(config: PatternNetConfig) -> dict[str, int]:
    """Count trainable scalars per module group (running stats excluded)."""
    params = PatternNetParams.create(config, seed=0)
    breakdown: dict[str, int] = {}
    for name, p in params.named_parameters():
        group = name.split(".", 1)[0]
        breakdown[group] = breakdown.get(group, 0) + p.size
    breakdown["total"] = sum(breakdown.values())
    return breakdown
