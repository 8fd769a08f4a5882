"""Quantitative evaluation: PSNR, confusion matrices, PCA, silhouette."""

from __future__ import annotations

import numpy as np

PSNR_CAP_DB = 100.0


class EvalError(ValueError):
    pass


def psnr(x: np.ndarray, x_hat: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; exact matches cap at 100 dB."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise EvalError(f"psnr shape mismatch: {x.shape} vs {x_hat.shape}")
    if peak <= 0:
        raise EvalError("peak must be positive")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, k: int):
    """(counts, row-normalized) confusion; entry (i,j) = true i predicted j."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise EvalError("predictions and labels must align")
    if (labels < 0).any() or (labels >= k).any() or (predictions < 0).any() or (predictions >= k).any():
        raise EvalError(f"classes must lie in [0,{k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    row_sums = counts.sum(axis=1, keepdims=True).astype(np.float64)
    normalized = np.divide(counts, row_sums, out=np.zeros((k, k)), where=row_sums > 0)
    return counts, normalized


def accuracy_stats(per_config_accuracies) -> tuple[float, float]:
    """(mean, population std) of accuracies over configurations."""
    acc = np.asarray(list(per_config_accuracies), dtype=np.float64)
    if acc.size == 0:
        raise EvalError("need at least one configuration accuracy")
    return float(acc.mean()), float(acc.std())


def jacobi_eigh(sym: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues desc, eigenvectors as columns). Off-diagonal mass is
    reduced below tol * frobenius norm.
    """
    a = np.array(sym, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise EvalError("jacobi_eigh needs a square matrix")
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a**2) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol * norm / (n * n):
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    eigvals = np.diag(a).copy()
    order = np.argsort(eigvals)[::-1]
    return eigvals[order], v[:, order]


def pca_project(vectors: np.ndarray, components: int = 3):
    """Project onto the top principal axes of the covariance.

    Returns (projection n x components, explained variance ratios). Each
    eigenvector's sign is fixed so its largest-magnitude entry is positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n, dim = x.shape
    if dim < components:
        raise EvalError(f"need at least {components} dimensions, got {dim}")
    if n < components:
        raise EvalError(f"need at least {components} points, got {n}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / n
    eigvals, eigvecs = jacobi_eigh(cov)
    eigvals = np.maximum(eigvals, 0.0)
    top = eigvecs[:, :components].copy()
    for j in range(components):
        lead = np.argmax(np.abs(top[:, j]))
        if top[lead, j] < 0:
            top[:, j] = -top[:, j]
    total = eigvals.sum()
    explained = eigvals[:components] / total if total > 0 else np.zeros(components)
    return centered @ top, explained


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distances."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise EvalError("silhouette needs at least 2 clusters")
    if counts.min() < 2:
        raise EvalError("silhouette needs at least 2 points per cluster")
    sq = np.sum(points**2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * points @ points.T, 0.0)
    dist = np.sqrt(d2)
    n = len(points)
    scores = np.zeros(n)
    masks = {c: labels == c for c in classes}
    for i in range(n):
        own = masks[labels[i]].copy()
        own[i] = False
        a = dist[i, own].mean()
        b = min(dist[i, masks[c]].mean() for c in classes if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())
