"""Network building blocks: shared MLP layer, pooling, losses, pseudoinverse.

A "shared MLP" here is the usual point-cloud primitive: one affine map
applied identically to every row, followed by batch normalization and a
ReLU.  Batch norm keeps running statistics for eval mode; the variance
entering the normalizer is floored (not offset) so that unit variance
passes through exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, solve

BN_MOMENTUM = 0.9
BN_VAR_FLOOR = 1e-5


@dataclass
class MlpLayerParams:
    """Weights for one shared MLP layer (affine + batch norm)."""

    weight: Tensor  # (f_in, f_out)
    bias: Tensor  # (f_out,)
    bn_gamma: Tensor  # (f_out,)
    bn_beta: Tensor  # (f_out,)
    bn_running_mean: np.ndarray  # (f_out,) non-trainable
    bn_running_var: np.ndarray  # (f_out,) non-trainable
    bn_batches_seen: int = 0  # first update bootstraps the running stats

    @classmethod
    def create(cls, f_in: int, f_out: int, rng: np.random.Generator, dtype=np.float64):
        scale = np.sqrt(2.0 / f_in)  # He init for the ReLU that follows
        return cls(
            weight=Tensor(rng.standard_normal((f_in, f_out)) * scale, requires_grad=True, dtype=dtype),
            bias=Tensor(np.zeros(f_out), requires_grad=True, dtype=dtype),
            bn_gamma=Tensor(np.ones(f_out), requires_grad=True, dtype=dtype),
            bn_beta=Tensor(np.zeros(f_out), requires_grad=True, dtype=dtype),
            bn_running_mean=np.zeros(f_out, dtype=dtype),
            bn_running_var=np.ones(f_out, dtype=dtype),
        )

    @property
    def f_in(self) -> int:
        return self.weight.shape[0]

    @property
    def f_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class AffineParams:
    """Plain affine output layer (no batch norm, no activation)."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, f_in: int, f_out: int, rng: np.random.Generator, dtype=np.float64):
        scale = np.sqrt(1.0 / f_in)
        return cls(
            weight=Tensor(rng.standard_normal((f_in, f_out)) * scale, requires_grad=True, dtype=dtype),
            bias=Tensor(np.zeros(f_out), requires_grad=True, dtype=dtype),
        )


def affine_forward(params: AffineParams, features: Tensor) -> Tensor:
    return features @ params.weight + params.bias


def shared_mlp_forward(params: MlpLayerParams, features: Tensor, training: bool) -> Tensor:
    """Apply affine + batch norm + ReLU identically to every row.

    Training mode normalizes with batch statistics and updates the running
    ones in place; eval mode normalizes with the stored running statistics.
    """
    if features.ndim != 2:
        raise ValueError(f"expected an N x F feature matrix, got shape {features.shape}")
    n, f_in = features.shape
    if f_in != params.f_in:
        raise ValueError(f"feature dimension {f_in} does not match layer input {params.f_in}")
    if n < 1:
        raise ValueError("empty feature batch")
    if training and n < 2:
        raise ValueError("degenerate batch: training-mode batch norm needs at least 2 rows")

    lin = features @ params.weight + params.bias
    if training:
        mu = lin.mean(axis=0)
        centered = lin - mu
        var = (centered * centered).mean(axis=0)
        if params.bn_batches_seen == 0:
            # bootstrap: the (0, 1) init carries no information about this model
            params.bn_running_mean[...] = mu.data
            params.bn_running_var[...] = np.maximum(var.data, BN_VAR_FLOOR)
        else:
            params.bn_running_mean *= BN_MOMENTUM
            params.bn_running_mean += (1.0 - BN_MOMENTUM) * mu.data
            params.bn_running_var *= BN_MOMENTUM
            params.bn_running_var += (1.0 - BN_MOMENTUM) * np.maximum(var.data, BN_VAR_FLOOR)
        params.bn_batches_seen += 1
        norm = centered * (var.clamp_min(BN_VAR_FLOOR) ** -0.5)
    else:
        denom = np.sqrt(np.maximum(params.bn_running_var, BN_VAR_FLOOR))
        norm = (lin - params.bn_running_mean) * (1.0 / denom)
    return (norm * params.bn_gamma + params.bn_beta).relu()


def max_pool_rows(features: Tensor) -> Tensor:
    """Column-wise max over rows; ties send the gradient to the lowest row."""
    if features.ndim != 2:
        raise ValueError(f"expected an N x F feature matrix, got shape {features.shape}")
    if features.shape[0] == 0:
        raise ValueError("cannot max-pool an empty feature matrix")
    return features.max(axis=0)


def dropout(features: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not training or rate == 0.0:
        return features
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = 1.0 - rate
    mask = (rng.random(features.shape) < keep).astype(features.dtype) / keep
    return features * mask


def softmax_cross_entropy_smoothed(logits: Tensor, labels, eps_ls: float) -> Tensor:
    """Mean label-smoothed cross entropy over a batch of logits.

    Targets are (1 - eps_ls) * onehot + eps_ls / C.  Stable log-softmax via
    the usual shift by the row max (a constant, so gradients are exact).
    """
    if logits.ndim != 2:
        raise ValueError(f"expected B x C logits, got shape {logits.shape}")
    b, c = logits.shape
    if c < 2:
        raise ValueError("need at least 2 classes")
    if not 0.0 <= eps_ls < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {eps_ls}")
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label out of range")

    shift = logits.data.max(axis=1, keepdims=True)
    z = logits - shift
    log_probs = z - z.exp().sum(axis=1, keepdims=True).log()
    target = np.full((b, c), eps_ls / c, dtype=logits.dtype)
    target[np.arange(b), labels] += 1.0 - eps_ls
    return -(Tensor(target) * log_probs).sum() * (1.0 / b)


def ridge_pinv_solve(psi: Tensor, phi: Tensor, ridge: float) -> Tensor:
    """Least-squares coefficients via the ridge-regularized normal equations.

    Returns (Psi^T Psi + ridge I)^{-1} Psi^T phi, differentiable in both
    arguments through the analytic solve.
    """
    if psi.ndim != 2 or phi.ndim != 1:
        raise ValueError("expected a D x L matrix and a length-D vector")
    d, l = psi.shape
    if phi.shape[0] != d:
        raise ValueError(f"vector length {phi.shape[0]} does not match matrix rows {d}")
    if not (d >= l >= 1):
        raise ValueError(f"need D >= L >= 1, got D={d}, L={l}")
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    if not (np.isfinite(psi.data).all() and np.isfinite(phi.data).all()):
        raise ArithmeticError("non-finite input to ridge_pinv_solve")
    psi_t = psi.T
    gram = psi_t @ psi + Tensor(ridge * np.eye(l, dtype=psi.dtype))
    return solve(gram, psi_t @ phi)


def svd_pinv(psi, rcond: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD; test oracle, not differentiable.

    Singular values below rcond * sigma_max are treated as zero.
    """
    mat = psi.data if isinstance(psi, Tensor) else np.asarray(psi, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    if s.size == 0:
        return np.zeros((mat.shape[1], mat.shape[0]), dtype=mat.dtype)
    inv_s = np.where(s > rcond * s.max(), 1.0 / np.where(s == 0, 1.0, s), 0.0)
    return (vt.T * inv_s) @ u.T


def grad_check(fn, inputs: list[Tensor], step: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    Returns the max over all coordinates of |analytic - numeric| / max(1, |numeric|).
    Perturbs the input arrays in place and restores them afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not all(t.requires_grad for t in inputs):
        raise ValueError("grad_check inputs must require gradients")
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = []
    for t in inputs:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise ValueError("non-finite analytic gradient")
        analytic.append(g.copy())

    # the finite-difference sweep only needs values, not graphs
    for t in inputs:
        t.requires_grad = False
    try:
        worst = 0.0
        for t, g in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            g_flat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = float(fn(*inputs).data)
                flat[i] = orig - step
                lo = float(fn(*inputs).data)
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * step)
                err = abs(float(g_flat[i]) - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    finally:
        for t in inputs:
            t.requires_grad = True
    return worst
