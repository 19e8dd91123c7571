"""Instance-discrimination losses over embedding batches.

Three objectives share one calling convention: given two (B, D)
embedding batches they return a LossReport carrying the scalar loss, a
per-term breakdown, and closed-form gradients with respect to both
batches. The gradients are hand-derived (softmax cross-entropy algebra
for the contrastive loss, quotient rule for the cosine terms, plain
linear algebra for the regularization terms) so they can serve as an
independent oracle against the network's reverse-mode pass.

Loss conventions:

* ``infonce_loss`` is the temperature-scaled cross entropy over the
  cosine similarity matrix, symmetrized over rows and columns
  (NT-Xent). It is minimized, i.e. the log-softmax diagonal enters
  with a leading minus.
* ``byol_loss`` scores matched pairs only, 2 - 2*cos per pair, and is
  one-directional: the target batch is treated as stop-gradient, so
  grad_b is identically zero.
* ``vicreg_loss`` is the weighted sum of an invariance term (mean
  squared pair distance), a variance hinge per dimension (unbiased
  variance, regularized std), and the squared off-diagonal covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LossReport:
    total: float
    terms: dict[str, float]
    grad_a: np.ndarray
    grad_b: np.ndarray


def _check_batch(z: np.ndarray, name: str, min_rows: int = 1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"{name} must be a (B, D) matrix, got shape {z.shape}")
    if z.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {z.shape[0]}")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{name} contains non-finite values")
    return z


def _row_norms(z: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"{name} contains a zero-norm row")
    return norms


def cosine_similarity_matrix(za: np.ndarray, zb: np.ndarray) -> np.ndarray:
    """s[i, j] = <za_i, zb_j> / (|za_i| |zb_j|)."""
    za = _check_batch(za, "za")
    zb = _check_batch(zb, "zb")
    if za.shape[1] != zb.shape[1]:
        raise ValueError(f"dimension mismatch: {za.shape[1]} vs {zb.shape[1]}")
    na = _row_norms(za, "za")
    nb = _row_norms(zb, "zb")
    return (za @ zb.T) / np.outer(na, nb)


def _cosine_grads(
    g_s: np.ndarray,
    za: np.ndarray,
    zb: np.ndarray,
    s: np.ndarray,
    na: np.ndarray,
    nb: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Pull a gradient on the similarity matrix back onto both batches.

    d s_ij / d za_i = zb_j / (|za_i||zb_j|) - s_ij za_i / |za_i|^2
    and symmetrically for zb_j.
    """
    grad_a = ((g_s / nb[None, :]) @ zb) / na[:, None]
    grad_a -= za * ((g_s * s).sum(axis=1) / na**2)[:, None]
    grad_b = ((g_s.T / na[None, :]) @ za) / nb[:, None]
    grad_b -= zb * ((g_s * s).sum(axis=0) / nb**2)[:, None]
    return grad_a, grad_b


def infonce_loss(za: np.ndarray, zb: np.ndarray, alpha: float = 0.1) -> LossReport:
    """Symmetric NT-Xent over the cosine similarity matrix.

    total = -(1/2B) sum_i log softmax_row(s/alpha)[i,i]
            -(1/2B) sum_i log softmax_col(s/alpha)[i,i]
    """
    if alpha <= 0.0:
        raise ValueError("temperature must be positive")
    za = _check_batch(za, "za", min_rows=2)
    zb = _check_batch(zb, "zb", min_rows=2)
    if za.shape != zb.shape:
        raise ValueError(f"shape mismatch: {za.shape} vs {zb.shape}")
    b = za.shape[0]
    na = _row_norms(za, "za")
    nb = _row_norms(zb, "zb")
    s = (za @ zb.T) / np.outer(na, nb)

    logits = s / alpha
    # row direction: each za_i classifies its positive among all zb_j
    row_shift = logits - logits.max(axis=1, keepdims=True)
    p_row = np.exp(row_shift)
    p_row /= p_row.sum(axis=1, keepdims=True)
    row_logp = row_shift.diagonal() - np.log(np.exp(row_shift).sum(axis=1))
    # column direction: each zb_i classifies its positive among all za_j
    col_shift = logits - logits.max(axis=0, keepdims=True)
    p_col = np.exp(col_shift)
    p_col /= p_col.sum(axis=0, keepdims=True)
    col_logp = col_shift.diagonal() - np.log(np.exp(col_shift).sum(axis=0))

    row_term = -row_logp.sum() / (2.0 * b)
    col_term = -col_logp.sum() / (2.0 * b)

    eye = np.eye(b)
    g_s = ((p_row - eye) + (p_col - eye)) / (2.0 * b * alpha)
    grad_a, grad_b = _cosine_grads(g_s, za, zb, s, na, nb)
    return LossReport(
        total=float(row_term + col_term),
        terms={"row": float(row_term), "col": float(col_term)},
        grad_a=grad_a,
        grad_b=grad_b,
    )


def byol_loss(online_pred: np.ndarray, target_proj: np.ndarray) -> LossReport:
    """total = (1/2B) sum_i (2 - 2 s_ii); gradient reaches online_pred only."""
    za = _check_batch(online_pred, "online_pred")
    zb = _check_batch(target_proj, "target_proj")
    if za.shape != zb.shape:
        raise ValueError(f"shape mismatch: {za.shape} vs {zb.shape}")
    b = za.shape[0]
    na = _row_norms(za, "online_pred")
    nb = _row_norms(zb, "target_proj")
    s_diag = (za * zb).sum(axis=1) / (na * nb)
    total = float((2.0 - 2.0 * s_diag).sum() / (2.0 * b))
    # d total / d s_ii = -1/B; target side is stop-gradient
    grad_a = -(zb / (na * nb)[:, None] - za * (s_diag / na**2)[:, None]) / b
    return LossReport(
        total=total,
        terms={"align": total},
        grad_a=grad_a,
        grad_b=np.zeros_like(zb),
    )


def vicreg_loss(
    za: np.ndarray,
    zb: np.ndarray,
    lam: float = 1.0,
    mu: float = 1.0,
    nu: float = 0.05,
    gamma: float = 1.0,
    eps: float = 1e-4,
) -> LossReport:
    """Invariance + variance hinge + covariance penalty.

    total = lam * inv + mu * (v(Z) + v(Z')) + nu * (c(Z) + c(Z'))
    with inv = (1/B) sum_i |z_i - z'_i|^2,
    v(Z) = (1/D) sum_j max(0, gamma - sqrt(Var(z^j) + eps)) using the
    unbiased (B-1) variance, and c(Z) = (1/D) sum_{i != j} C(Z)_ij^2
    for the (B-1)-normalized covariance matrix C(Z).
    """
    za = _check_batch(za, "za", min_rows=2)
    zb = _check_batch(zb, "zb", min_rows=2)
    if za.shape != zb.shape:
        raise ValueError(f"shape mismatch: {za.shape} vs {zb.shape}")
    b, d = za.shape

    inv = float(((za - zb) ** 2).sum() / b)
    g_inv_a = 2.0 * (za - zb) / b
    g_inv_b = -g_inv_a

    def variance_term(z: np.ndarray) -> tuple[float, np.ndarray]:
        centered = z - z.mean(axis=0)
        var = (centered**2).sum(axis=0) / (b - 1)
        std = np.sqrt(var + eps)
        hinge = np.maximum(0.0, gamma - std)
        active = (hinge > 0.0).astype(np.float64)
        # d std_j / d z_ij = (z_ij - mean_j) / ((B-1) std_j); the mean
        # correction drops because the centered column sums to zero.
        grad = -(active / ((b - 1) * std))[None, :] * centered / d
        return float(hinge.sum() / d), grad

    def covariance_term(z: np.ndarray) -> tuple[float, np.ndarray]:
        centered = z - z.mean(axis=0)
        cov = (centered.T @ centered) / (b - 1)
        off = cov - np.diag(np.diag(cov))
        value = float((off**2).sum() / d)
        # d value / d cov_ij = (2/D) off_ij; pulled back through
        # cov = Zc^T Zc / (B-1) with a symmetric upstream matrix.
        grad = (centered @ off) * (4.0 / (d * (b - 1)))
        return value, grad

    v_a, g_v_a = variance_term(za)
    v_b, g_v_b = variance_term(zb)
    c_a, g_c_a = covariance_term(za)
    c_b, g_c_b = covariance_term(zb)

    variance = v_a + v_b
    covariance = c_a + c_b
    total = lam * inv + mu * variance + nu * covariance
    grad_a = lam * g_inv_a + mu * g_v_a + nu * g_c_a
    grad_b = lam * g_inv_b + mu * g_v_b + nu * g_c_b
    return LossReport(
        total=float(total),
        terms={"invariance": inv, "variance": float(variance), "covariance": float(covariance)},
        grad_a=grad_a,
        grad_b=grad_b,
    )
