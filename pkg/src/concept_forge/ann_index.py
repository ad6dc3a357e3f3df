"""Inverted-file index over concept embeddings.

A coarse k-means quantizer (about sqrt(N) centroids) partitions the vectors;
residuals to the assigned centroid are stored either verbatim (``identity``)
or product-quantized (``pq``). Queries probe the ``nprobe`` nearest centroids
and rank the probed vectors by asymmetric distance.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._random import stream
from .encoder import ConceptEmbeddings
from .exceptions import DegenerateInput, ParseError
from .kb import ConceptId

KMEANS_ITERS = 25
INDEX_MAGIC = b"IVF1"
_FINE_CODES = {"identity": 0, "pq": 1}


@dataclass(frozen=True)
class SearchParams:
    k: int = 10
    nprobe: int | None = None  # None probes every list

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.nprobe is not None and self.nprobe < 1:
            raise ValueError("nprobe must be >= 1")


def n_coarse_centroids(n: int) -> int:
    return min(max(int(round(math.sqrt(n))), 1), n)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(X: np.ndarray, k: int, rng: np.random.Generator,
           iters: int = KMEANS_ITERS) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm from a farthest-point seeding.

    Returns (centroids, assignments). Empty clusters keep their centroid.
    """
    n = len(X)
    k = min(k, n)
    chosen = [int(rng.integers(n))]
    nearest = ((X - X[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, ((X - X[nxt]) ** 2).sum(1))
    centroids = X[chosen].copy()
    assign = np.argmin(_sq_dists(X, centroids), axis=1)
    for _ in range(iters):
        for j in range(k):
            members = X[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        new = np.argmin(_sq_dists(X, centroids), axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
    return centroids, assign


class ProductQuantizer:
    """Per-subspace codebooks; codeword 0 of every subspace is the origin, so
    encoding never moves a residual further from zero than it started."""

    def __init__(self, m: int = 4, ks: int = 16):
        if m < 1 or ks < 2:
            raise ValueError("need m >= 1 and ks >= 2")
        self.m = m
        self.ks = ks

    def fit(self, R: np.ndarray, rng: np.random.Generator) -> "ProductQuantizer":
        n, d = R.shape
        if d % self.m:
            raise ValueError(f"dimension {d} is not divisible by m={self.m}")
        self.sub = d // self.m
        self.codebooks = np.zeros((self.m, self.ks, self.sub))
        for j in range(self.m):
            part = R[:, j * self.sub:(j + 1) * self.sub]
            cents, _ = kmeans(part, self.ks - 1, rng)
            self.codebooks[j, 1:1 + len(cents)] = cents
        return self

    def encode(self, R: np.ndarray) -> np.ndarray:
        codes = np.empty((len(R), self.m), dtype=np.int64)
        for j in range(self.m):
            part = R[:, j * self.sub:(j + 1) * self.sub]
            codes[:, j] = np.argmin(_sq_dists(part, self.codebooks[j]), axis=1)
        return codes

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.atleast_2d(codes)
        return np.concatenate([self.codebooks[j][codes[:, j]] for j in range(self.m)], axis=1)

    def distance_table(self, y: np.ndarray) -> np.ndarray:
        """Squared distance from each query sub-vector to every codeword (m x ks)."""
        parts = y.reshape(self.m, 1, self.sub)
        return ((parts - self.codebooks) ** 2).sum(axis=2)


def _as_vectors(vectors) -> tuple[list[ConceptId], np.ndarray]:
    if isinstance(vectors, ConceptEmbeddings):
        return list(vectors.ids), np.asarray(vectors.matrix)
    if isinstance(vectors, dict):
        ids = list(vectors)
        return ids, np.array([vectors[i] for i in ids], dtype=float)
    ids, matrix = vectors
    return list(ids), np.asarray(matrix, dtype=float)


def _rank_by_distance(dist: np.ndarray, id_rank: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((id_rank, dist))
    return order[:k]


def exact_search(vectors, query: np.ndarray, k: int) -> list[tuple[ConceptId, float]]:
    """Brute-force L2 top-k; ties broken by concept id."""
    ids, X = _as_vectors(vectors)
    if not ids:
        return []
    dist = np.linalg.norm(X - np.asarray(query, dtype=float), axis=1)
    rank = np.argsort(np.argsort(np.array([str(i) for i in ids]), kind="stable"), kind="stable")
    top = _rank_by_distance(dist, rank, k)
    return [(ids[i], float(dist[i])) for i in top]


class IvfIndex(BaseEstimator):
    """IVF index with identity or product-quantized residual codes.

    Parameters
    ----------
    fine : {"identity", "pq"}
        Residual quantizer.
    m, ks : int
        Sub-quantizer count and codewords per sub-quantizer for ``pq``.
    n_centroids : int or None
        Coarse list count; defaults to ``round(sqrt(N))``.
    seed : int
    """

    def __init__(self, fine: str = "pq", m: int = 4, ks: int = 16,
                 n_centroids: int | None = None, seed: int = 0):
        self.fine = fine
        self.m = m
        self.ks = ks
        self.n_centroids = n_centroids
        self.seed = seed

    def fit(self, vectors, y=None) -> "IvfIndex":
        if self.fine not in _FINE_CODES:
            raise ValueError(f"unknown fine quantizer {self.fine!r}")
        ids, X = _as_vectors(vectors)
        if not ids:
            raise DegenerateInput("cannot index an empty collection")
        if not np.all(np.isfinite(X)):
            raise DegenerateInput("vectors contain non-finite entries")
        X = check_array(X, dtype=np.float64, copy=True)
        rng = stream(self.seed, "ivf")
        n_lists = self.n_centroids or n_coarse_centroids(len(X))
        self.centroids_, self.assignments_ = kmeans(X, n_lists, rng)
        residuals = X - self.centroids_[self.assignments_]
        if self.fine == "pq":
            self.pq_ = ProductQuantizer(self.m, self.ks).fit(residuals, rng)
            self.codes_ = self.pq_.encode(residuals)
        else:
            self.pq_ = None
            self.codes_ = X
        self._finish(ids)
        return self

    def _finish(self, ids: Sequence[ConceptId]) -> None:
        self.ids_ = list(ids)
        names = np.array([str(i) for i in self.ids_])
        self.id_rank_ = np.argsort(np.argsort(names, kind="stable"), kind="stable")
        self.lists_ = [np.flatnonzero(self.assignments_ == c)
                       for c in range(len(self.centroids_))]

    @property
    def n_lists(self) -> int:
        check_is_fitted(self, "centroids_")
        return len(self.centroids_)

    def reconstruct(self, rows: np.ndarray | None = None) -> np.ndarray:
        """Approximate vectors ``q1(x) + q2(x - q1(x))``."""
        check_is_fitted(self, "centroids_")
        rows = np.arange(len(self.ids_)) if rows is None else np.asarray(rows)
        if self.pq_ is None:
            return self.codes_[rows]
        return self.centroids_[self.assignments_[rows]] + self.pq_.decode(self.codes_[rows])

    def probe_order(self, query: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(self.centroids_ - query, axis=1)
        return np.argsort(d, kind="stable")

    def search(self, query: np.ndarray, k: int = 10,
               nprobe: int | None = None) -> list[tuple[ConceptId, float]]:
        check_is_fitted(self, "centroids_")
        query = np.asarray(query, dtype=np.float64)
        nprobe = self.n_lists if nprobe is None else min(max(nprobe, 1), self.n_lists)
        order = self.probe_order(query)
        probed, n_cand = [], 0
        for rank, c in enumerate(order):
            if rank >= nprobe and n_cand >= k:
                break
            probed.append(c)
            n_cand += len(self.lists_[c])
        rows = np.concatenate([self.lists_[c] for c in probed])
        if self.pq_ is None:
            dist = np.linalg.norm(self.codes_[rows] - query, axis=1)
        else:
            dist = np.empty(len(rows))
            pos = 0
            cols = np.arange(self.pq_.m)
            for c in probed:
                members = self.lists_[c]
                table = self.pq_.distance_table(query - self.centroids_[c])
                sq = table[cols, self.codes_[members]].sum(axis=1)
                dist[pos:pos + len(members)] = np.sqrt(np.maximum(sq, 0.0))
                pos += len(members)
        top = _rank_by_distance(dist, self.id_rank_[rows], k)
        return [(self.ids_[rows[i]], float(dist[i])) for i in top]

    def search_params(self, query: np.ndarray, params: SearchParams):
        return self.search(query, params.k, params.nprobe)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "centroids_")
        n, d = len(self.ids_), self.centroids_.shape[1]
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<IIIBII", n, d, self.n_lists, _FINE_CODES[self.fine],
                                 self.m, self.ks))
            for cid in self.ids_:
                raw = str(cid).encode("utf-8")
                fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(self.centroids_.astype("<f8").tobytes())
            fh.write(self.assignments_.astype("<u4").tobytes())
            if self.pq_ is None:
                fh.write(self.codes_.astype("<f8").tobytes())
            else:
                fh.write(self.pq_.codebooks.astype("<f8").tobytes())
                fh.write(self.codes_.astype("<u2").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "IvfIndex":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != INDEX_MAGIC:
            raise ParseError(f"{path} is not an IVF1 index")
        header = struct.Struct("<IIIBII")
        n, d, c, fine_code, m, ks = header.unpack_from(data, 4)
        pos = 4 + header.size
        ids = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            ids.append(ConceptId.parse(data[pos:pos + ln].decode("utf-8")))
            pos += ln

        def take(count, dtype):
            nonlocal pos
            size = np.dtype(dtype).itemsize * count
            if pos + size > len(data):
                raise ParseError(f"truncated index file {path}")
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
            pos += size
            return arr

        fine = {v: k for k, v in _FINE_CODES.items()}[fine_code]
        index = cls(fine=fine, m=m, ks=ks)
        index.centroids_ = take(c * d, "<f8").reshape(c, d).astype(np.float64)
        index.assignments_ = take(n, "<u4").astype(np.int64)
        if fine == "identity":
            index.pq_ = None
            index.codes_ = take(n * d, "<f8").reshape(n, d).astype(np.float64)
        else:
            pq = ProductQuantizer(m, ks)
            pq.sub = d // m
            pq.codebooks = take(m * ks * pq.sub, "<f8").reshape(m, ks, pq.sub).astype(np.float64)
            index.pq_ = pq
            index.codes_ = take(n * m, "<u2").reshape(n, m).astype(np.int64)
        index._finish(ids)
        return index


def recall_at_k(approx: Sequence[tuple[ConceptId, float]],
                exact: Sequence[tuple[ConceptId, float]]) -> float:
    truth = {cid for cid, _ in exact}
    if not truth:
        return 1.0
    return len(truth & {cid for cid, _ in approx}) / len(truth)
