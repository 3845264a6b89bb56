"""Losses, the fit loop, evaluation metrics and checkpoint persistence."""

import numpy as np
import pytest

from patternnet.cloning import clone_partition
from patternnet.geometry import gen_shape, normalize_unit_sphere
from patternnet.network import PatternNetConfig, PatternNetParams, describe
from patternnet.ops import grad_check, svd_pinv
from patternnet.tensor import Tensor
from patternnet.training import (
    Checkpoint,
    CheckpointError,
    CheckpointVersionError,
    derive_seed,
    evaluate,
    evaluate_iou,
    fit,
    linear_mapping_loss,
    load_checkpoint,
    mean_iou,
    save_checkpoint,
    subset_consistency,
    total_loss,
)


def tiny_config(**overrides):
    base = dict(
        num_classes=2,
        levels=2,
        neighbors=6,
        branch_widths=(8, 8, 8, 8),
        psi_dim=32,
        global_dim=32,
        head_widths=(16, 16),
        dtype="float32",
    )
    base.update(overrides)
    return PatternNetConfig(**base)


def two_class_set(n_per_class=10, n_points=64, seed=0):
    clouds = []
    for kind in ("sphere", "cube"):
        for i in range(n_per_class):
            c = gen_shape(kind, n_points, derive_seed(seed, kind, i), id=f"{kind}-{i}")
            c.class_label = 0 if kind == "sphere" else 1
            clouds.append(normalize_unit_sphere(c))
    return clouds


# -- linear mapping loss -----------------------------------------------------------


def test_mapping_loss_two_point_std():
    psi = Tensor(np.pad(np.eye(2), ((0, 4), (0, 0))), requires_grad=True)
    phi = Tensor(np.pad(np.array([3.0, 5.0]), (0, 4)), requires_grad=True)
    sigma = linear_mapping_loss(psi, phi)
    assert abs(float(sigma.data) - 1.0) <= 1e-5  # weights (3, 5): mean 4, std 1


def test_mapping_loss_identical_columns_zero():
    rng = np.random.default_rng(0)
    col = rng.standard_normal(16)
    psi = Tensor(np.stack([col, col, col], axis=1), requires_grad=True)
    phi = Tensor(col.copy(), requires_grad=True)
    assert float(linear_mapping_loss(psi, phi).data) <= 1e-9


def test_mapping_loss_single_level_warns_zero():
    psi = Tensor(np.ones((8, 1)), requires_grad=True)
    phi = Tensor(np.ones(8), requires_grad=True)
    with pytest.warns(UserWarning, match="single cloning level"):
        value = linear_mapping_loss(psi, phi)
    assert float(value.data) == 0.0


def test_mapping_loss_matches_svd_oracle_and_fd():
    rng = np.random.default_rng(1)
    psi_data = rng.standard_normal((32, 4))
    phi_data = rng.standard_normal(32)
    w_oracle = svd_pinv(psi_data) @ phi_data
    sigma_oracle = float(np.std(w_oracle))
    psi = Tensor(psi_data, requires_grad=True)
    phi = Tensor(phi_data, requires_grad=True)
    assert abs(float(linear_mapping_loss(psi, phi).data) - sigma_oracle) <= 1e-4
    err = grad_check(lambda p, f: linear_mapping_loss(p, f), [psi, phi], step=1e-6)
    assert err <= 1e-4


def test_mapping_loss_positive_when_one_column_scaled():
    rng = np.random.default_rng(2)
    psi_data = rng.standard_normal((16, 3))
    phi = Tensor(psi_data.sum(axis=1), requires_grad=True)
    scaled = psi_data.copy()
    scaled[:, 1] *= 2.0
    assert float(linear_mapping_loss(Tensor(scaled, requires_grad=True), phi).data) > 1e-4


# -- total_loss -----------------------------------------------------------------------


def fake_descriptor(cfg, rng):
    from patternnet.network import Descriptor
    from patternnet.tensor import concat

    psi = Tensor(rng.standard_normal((cfg.psi_dim, cfg.levels)), requires_grad=True)
    phi = Tensor(rng.standard_normal(cfg.global_dim), requires_grad=True)
    return Descriptor(psi, phi, concat([psi.max(axis=1), phi], axis=0))


def test_total_loss_lambda_zero_is_plain_ce():
    cfg = tiny_config(mapping_weight=0.0)
    rng = np.random.default_rng(3)
    logits = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    breakdown = total_loss(logits, np.array([0, 1, 0, 1]), [fake_descriptor(cfg, rng)], cfg)
    assert breakdown.total is breakdown.ce


def test_total_loss_recomposition():
    cfg = tiny_config(mapping_weight=0.2)
    rng = np.random.default_rng(4)
    logits = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    descriptors = [fake_descriptor(cfg, rng) for _ in range(3)]
    breakdown = total_loss(logits, np.array([0, 1, 1]), descriptors, cfg)
    sigmas = [float(linear_mapping_loss(d.subset_matrix, d.global_vector).data) for d in descriptors]
    recomposed = float(breakdown.ce.data) + 0.2 * float(np.mean(sigmas))
    assert abs(float(breakdown.total.data) - recomposed) <= 1e-12


def test_total_loss_perfect_prediction_near_zero():
    cfg = tiny_config(mapping_weight=0.2, label_smoothing=0.0)
    rng = np.random.default_rng(5)
    logits = Tensor(np.array([[80.0, 0.0], [0.0, 80.0]]), requires_grad=True)
    col = rng.standard_normal(cfg.psi_dim)
    from patternnet.network import Descriptor
    from patternnet.tensor import concat

    psi = Tensor(np.stack([col, col], axis=1), requires_grad=True)
    phi = Tensor(col.copy(), requires_grad=True)
    d = Descriptor(psi, phi, concat([psi.max(axis=1), phi], axis=0))
    breakdown = total_loss(logits, np.array([0, 1]), [d, d], cfg)
    assert float(breakdown.total.data) <= 1e-6


# -- IoU -------------------------------------------------------------------------------


def test_iou_perfect_and_complement():
    gt = [np.array([0, 0, 1, 1])]
    overall, per_cat = mean_iou([gt[0].copy()], gt, [0])
    assert overall == 1.0
    overall, _ = mean_iou([1 - gt[0]], gt, [0])
    assert overall == 0.0


def test_iou_matches_counting_oracle():
    rng = np.random.default_rng(6)
    preds, gts, cats = [], [], []
    for i in range(12):
        m = int(rng.integers(20, 60))
        gts.append(rng.integers(0, 3, m))
        preds.append(rng.integers(0, 3, m))
        cats.append(int(rng.integers(0, 2)))
    overall, per_cat = mean_iou(preds, gts, cats)

    # naive per-point counting oracle
    part_sets = {}
    for g, c in zip(gts, cats):
        part_sets.setdefault(c, set()).update(np.unique(g).tolist())
    cat_shape_ious = {}
    for p, g, c in zip(preds, gts, cats):
        ious = []
        for part in sorted(part_sets[c]):
            inter = sum(1 for a, b in zip(p, g) if a == part and b == part)
            union = sum(1 for a, b in zip(p, g) if a == part or b == part)
            ious.append(1.0 if union == 0 else inter / union)
        cat_shape_ious.setdefault(c, []).append(sum(ious) / len(ious))
    expected_percat = {c: sum(v) / len(v) for c, v in cat_shape_ious.items()}
    expected_overall = sum(expected_percat.values()) / len(expected_percat)
    assert per_cat == expected_percat
    assert overall == expected_overall


def test_iou_empty_union_scores_one():
    # part 2 exists in the category (other shape) but not in this shape
    gts = [np.array([0, 0]), np.array([2, 2])]
    preds = [np.array([0, 0]), np.array([2, 2])]
    overall, _ = mean_iou(preds, gts, [0, 0])
    assert overall == 1.0


def test_iou_validation():
    with pytest.raises(ValueError):
        mean_iou([np.zeros(3)], [np.zeros(4)], [0])
    with pytest.raises(ValueError):
        mean_iou([np.zeros(3)], [np.zeros(3), np.zeros(3)], [0, 1])


# -- fit / evaluate ---------------------------------------------------------------------


def test_fit_epochs_zero_returns_initial():
    clouds = two_class_set(3, 64, seed=1)
    cfg = tiny_config()
    ck = fit(clouds, cfg, seed=0, epochs=0)
    fresh = PatternNetParams.create(cfg, derive_seed(0, "init"))
    for (_, a), (_, b) in zip(ck.params.named_parameters(), fresh.named_parameters()):
        assert np.array_equal(a.data, b.data)
    assert ck.history == []


def test_fit_smoke_two_class():
    # linearly separable setup: clean shapes, no augmentation
    clouds = two_class_set(20, 128, seed=2)
    cfg = PatternNetConfig(num_classes=2, levels=2, neighbors=8, dtype="float32")
    ck = fit(clouds, cfg, seed=0, epochs=5, batch_size=4, augment_data=False, lr=3e-3)
    report = evaluate(clouds, ck)
    assert report.overall_accuracy >= 0.95


def test_fit_deterministic_same_seed():
    clouds = two_class_set(4, 64, seed=3)
    cfg = tiny_config()
    a = fit(clouds, cfg, seed=9, epochs=2, batch_size=4)
    b = fit(clouds, cfg, seed=9, epochs=2, batch_size=4)
    for (_, pa), (_, pb) in zip(a.params.named_parameters(), b.params.named_parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_fit_rejects_unlabeled():
    clouds = two_class_set(2, 64, seed=4)
    clouds[0].class_label = None
    with pytest.raises(ValueError, match="no class label"):
        fit(clouds, tiny_config(), seed=0, epochs=1)


def test_evaluate_untrained_chance_level():
    clouds = []
    for ci, kind in enumerate(("sphere", "cube", "torus", "cross-planes")):
        for i in range(10):
            c = gen_shape(kind, 64, derive_seed(5, kind, i), id=f"{kind}-{i}")
            clouds.append(normalize_unit_sphere(c))
    cfg = tiny_config(num_classes=4)
    ck = Checkpoint(cfg, PatternNetParams.create(cfg, seed=1), {"t": 0, "lr": 0, "m": {}, "v": {}}, 0, 0)
    report = evaluate(clouds, ck)
    assert 0.15 <= report.overall_accuracy <= 0.35  # 0.25 +- 0.1


def test_evaluate_order_invariant_and_threaded():
    clouds = two_class_set(5, 64, seed=6)
    cfg = tiny_config()
    ck = fit(clouds, cfg, seed=0, epochs=1, batch_size=4)
    a = evaluate(clouds, ck, seed=3)
    b = evaluate(list(reversed(clouds)), ck, seed=3)
    c = evaluate(clouds, ck, seed=3, threads=4)
    assert a.overall_accuracy == b.overall_accuracy
    assert a.overall_accuracy == c.overall_accuracy
    assert a.mapping_loss_mean == pytest.approx(b.mapping_loss_mean)


def test_evaluate_label_space_mismatch():
    clouds = two_class_set(2, 64, seed=7)
    clouds[0].class_label = 7
    cfg = tiny_config()
    ck = Checkpoint(cfg, PatternNetParams.create(cfg, seed=0), {"t": 0, "lr": 0, "m": {}, "v": {}}, 0, 0)
    with pytest.raises(ValueError, match="class space"):
        evaluate(clouds, ck)


def test_subset_consistency_constant_model_is_one():
    clouds = two_class_set(4, 64, seed=8)
    cfg = tiny_config()
    params = PatternNetParams.create(cfg, seed=2)
    # zero the head: logits constant regardless of input
    w1, w2, out = params.cls_head
    out.weight.data[...] = 0.0
    out.bias.data[...] = np.array([1.0, 0.0], dtype=np.float32)
    ck = Checkpoint(cfg, params, {"t": 0, "lr": 0, "m": {}, "v": {}}, 0, 0)
    assert subset_consistency(clouds, ck) == 1.0


def test_evaluate_iou_runs_with_seg_head():
    clouds = []
    for i in range(4):
        c = gen_shape("sphere", 64, derive_seed(9, i), id=f"s{i}")
        clouds.append(normalize_unit_sphere(c))
    cfg = tiny_config(num_parts=2)
    ck = Checkpoint(cfg, PatternNetParams.create(cfg, seed=3), {"t": 0, "lr": 0, "m": {}, "v": {}}, 0, 0)
    overall, per_cat = evaluate_iou(clouds, ck)
    assert 0.0 <= overall <= 1.0
    missing = [c.with_points(c.points) for c in clouds]
    for c in missing:
        c.part_labels = None
    with pytest.raises(ValueError, match="part labels"):
        evaluate_iou(missing, ck)


# -- checkpoints ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    clouds = two_class_set(4, 64, seed=10)
    cfg = tiny_config()
    ck = fit(clouds, cfg, seed=1, epochs=2, batch_size=4)
    path = tmp_path / "model.pnet"
    save_checkpoint(ck, path)
    loaded = load_checkpoint(path)
    assert loaded.config == cfg
    assert loaded.epoch == 2
    for (na, a), (nb, b) in zip(ck.params.named_parameters(), loaded.params.named_parameters()):
        assert na == nb
        assert np.array_equal(a.data, b.data)  # float32 training: lossless payload
    for (na, a), (nb, b) in zip(ck.params.named_buffers(), loaded.params.named_buffers()):
        assert np.array_equal(a, b)
    assert loaded.history == ck.history


def test_checkpoint_resave_byte_identical(tmp_path):
    clouds = two_class_set(3, 64, seed=11)
    ck = fit(clouds, tiny_config(), seed=2, epochs=1, batch_size=4)
    p1, p2 = tmp_path / "a.pnet", tmp_path / "b.pnet"
    save_checkpoint(ck, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_forward_identical_after_reload(tmp_path):
    clouds = two_class_set(3, 64, seed=12)
    cfg = tiny_config()
    ck = fit(clouds, cfg, seed=3, epochs=1, batch_size=4)
    path = tmp_path / "m.pnet"
    save_checkpoint(ck, path)
    loaded = load_checkpoint(path)
    cloud = clouds[0]
    part = clone_partition(cloud, cfg.levels, seed=0)
    a = describe(cloud.points, part, ck.params, cfg).combined.data
    b = describe(cloud.points, part, loaded.params, cfg).combined.data
    assert np.array_equal(a, b)


def test_checkpoint_corrupt_magic_and_version(tmp_path):
    path = tmp_path / "bad.pnet"
    path.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    clouds = two_class_set(2, 64, seed=13)
    ck = fit(clouds, tiny_config(), seed=0, epochs=0)
    good = tmp_path / "good.pnet"
    save_checkpoint(ck, good)
    blob = bytearray(good.read_bytes())
    blob[4] = 99  # version byte
    bad = tmp_path / "vers.pnet"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad)
    truncated = tmp_path / "trunc.pnet"
    truncated.write_bytes(good.read_bytes()[: len(good.read_bytes()) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(truncated)
