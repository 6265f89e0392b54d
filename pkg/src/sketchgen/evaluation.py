"""Recognition-style quality proxies: PCA features, cosine matching, CMS.

The eigensolver is a cyclic Jacobi rotation written out longhand so the
whole metric path stays dependency-free and auditable; tests compare it
against a dense library solver. When there are fewer samples than pixels
the decomposition runs on the small Gram matrix and maps back, which is
exact for the retained subspace.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvalues descending and
    eigenvectors in the matching columns. Off-diagonal mass is reduced
    below tol * frobenius_norm or a sweep budget is exhausted.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got shape {a.shape}")
    if not np.allclose(a, a.T, atol=1e-10):
        raise ValueError("matrix must be symmetric")
    n = a.shape[0]
    a = (a + a.T) / 2.0
    v = np.eye(n)
    scale = max(float(np.linalg.norm(a)), 1e-300)

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2.0)
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                # rotation angle that zeroes a[p, q]
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

    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    return eigenvalues[order], v[:, order]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), rows orthonormal
    k: int

    def __post_init__(self):
        if self.components.shape != (self.k, self.mean.shape[0]):
            raise ValueError(
                f"components {self.components.shape} inconsistent with "
                f"k={self.k}, d={self.mean.shape[0]}"
            )
        gram = self.components @ self.components.T
        if not np.allclose(gram, np.eye(self.k), atol=1e-8):
            raise ValueError("component rows are not orthonormal within 1e-8")

    def transform(self, x) -> np.ndarray:
        return self.components @ (np.asarray(x, dtype=np.float64) - self.mean)

    def reconstruct(self, z) -> np.ndarray:
        return self.mean + self.components.T @ np.asarray(z, dtype=np.float64)


def pca_fit(samples, k: int) -> PcaModel:
    """Top-k principal components of the sample covariance.

    Components come out with descending eigenvalue and a deterministic
    sign (first nonzero coefficient of each row positive). Needs at
    least 2 samples and 1 <= k <= min(n - 1, d).
    """
    x = np.asarray([np.asarray(s, dtype=np.float64).ravel() for s in samples])
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("PCA needs at least 2 flattened samples")
    n, d = x.shape
    limit = min(n - 1, d)
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} outside [1, {limit}] for {n} samples of dimension {d}")

    mean = x.mean(axis=0)
    xc = x - mean

    if n <= d:
        # Gram route: eigenvectors of the n x n matrix map through xc.T
        gram = xc @ xc.T
        mu, u = jacobi_eigh(gram)
        floor = 1e-12 * max(float(mu[0]), 1.0)
        if mu[k - 1] <= floor:
            raise ValueError(f"sample covariance rank is below k={k}")
        components = (xc.T @ u[:, :k]) / np.sqrt(mu[:k])
        components = components.T
    else:
        cov = (xc.T @ xc) / (n - 1)
        lam, vecs = jacobi_eigh(cov)
        floor = 1e-12 * max(float(lam[0]), 1.0)
        if lam[k - 1] <= floor:
            raise ValueError(f"sample covariance rank is below k={k}")
        components = vecs[:, :k].T

    for row in components:
        nz = np.nonzero(np.abs(row) > 1e-12)[0]
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return PcaModel(mean, components, k)


def cosine_match(query, gallery) -> np.ndarray:
    """Gallery indices sorted by descending cosine similarity to the query.

    Ties break toward the smaller index. Zero vectors have no direction
    and are rejected.
    """
    q = np.asarray(query, dtype=np.float64).ravel()
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ValueError("query vector is zero")
    sims = np.empty(len(gallery))
    for i, g in enumerate(gallery):
        g = np.asarray(g, dtype=np.float64).ravel()
        gn = np.linalg.norm(g)
        if gn == 0.0:
            raise ValueError(f"gallery vector {i} is zero")
        sims[i] = float(q @ g) / (qn * gn)
    return np.argsort(-sims, kind="stable")


@dataclass(frozen=True)
class CmsCurve:
    scores: tuple  # scores[r - 1] = match rate within top r

    def __post_init__(self):
        if not self.scores:
            raise ValueError("CMS curve needs at least rank 1")
        if any(b < a for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("CMS curve must be nondecreasing")
        if self.scores[0] < 0.0 or self.scores[-1] > 1.0:
            raise ValueError("CMS scores must lie in [0, 1]")

    @property
    def max_rank(self) -> int:
        return len(self.scores)

    def score(self, rank: int) -> float:
        if not 1 <= rank <= len(self.scores):
            raise ValueError(f"rank {rank} outside [1, {len(self.scores)}]")
        return self.scores[rank - 1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("rank", "score"))
            for r, s in enumerate(self.scores, start=1):
                writer.writerow((r, repr(s)))


def cms(queries, gallery, true_ids, max_rank: int) -> CmsCurve:
    """Cumulative match score: fraction of queries whose true gallery
    entry appears within the top n candidates, for n = 1..max_rank.

    `true_ids` maps query index to gallery index (mapping or sequence).
    """
    if not queries:
        raise ValueError("no queries")
    if not 1 <= max_rank <= len(gallery):
        raise ValueError(f"max_rank {max_rank} outside [1, {len(gallery)}]")

    hits = np.zeros(max_rank)
    for qi, q in enumerate(queries):
        try:
            true = true_ids[qi]
        except (KeyError, IndexError):
            raise ValueError(f"query {qi} has no true gallery identity") from None
        if not 0 <= true < len(gallery):
            raise ValueError(f"query {qi}: gallery identity {true} out of range")
        ranking = cosine_match(q, gallery)
        position = int(np.nonzero(ranking == true)[0][0]) + 1
        if position <= max_rank:
            hits[position - 1] += 1
    return CmsCurve(tuple(float(v) for v in np.cumsum(hits) / len(queries)))
