"""Desk-scale text encoder shared by documents and concepts.

A text is embedded as the mean of its token vectors, multiplied by a square
projection and L2-normalized, so cosine similarity is a plain dot product.
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from .exceptions import ParseError, ZeroVector
from .kb import ConceptId, KnowledgeBase, surface_key

UNK = "<unk>"
DEFAULT_DIM = 64
INIT_SCALE = 0.1

CHECKPOINT_MAGIC = b"CFG1"
CONCEPT_MAGIC = b"CEMB"


def encoder_tokens(tokens: Sequence[str]) -> list[str]:
    """Normalize raw whitespace tokens into encoder vocabulary keys."""
    key = surface_key(" ".join(tokens))
    return key.split(" ") if key else []


def build_vocabulary(texts: Iterable[Sequence[str]]) -> dict[str, int]:
    words = set()
    for tokens in texts:
        words.update(encoder_tokens(tokens))
    words.discard(UNK)
    vocab = {UNK: 0}
    for w in sorted(words):
        vocab[w] = len(vocab)
    return vocab


@dataclass
class EncoderParams:
    token_embeddings: np.ndarray  # |V| x D
    projection: np.ndarray  # D x D
    vocabulary: dict[str, int]

    def __post_init__(self):
        n, d = self.token_embeddings.shape
        if self.projection.shape != (d, d):
            raise ValueError(f"projection must be {d}x{d}, got {self.projection.shape}")
        if len(self.vocabulary) != n or self.vocabulary.get(UNK) != 0:
            raise ValueError("vocabulary must map <unk> to 0 and match the table size")

    @classmethod
    def initialize(cls, vocabulary: dict[str, int], dim: int = DEFAULT_DIM,
                   rng: np.random.Generator | int = 0) -> "EncoderParams":
        rng = np.random.default_rng(rng)
        table = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(len(vocabulary), dim))
        proj = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(dim, dim))
        return cls(table, proj, dict(vocabulary))

    @property
    def dim(self) -> int:
        return self.token_embeddings.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.token_embeddings.copy(), self.projection.copy(),
                             dict(self.vocabulary))

    def token_ids(self, tokens: Sequence[str]) -> np.ndarray:
        get = self.vocabulary.get
        return np.fromiter((get(t, 0) for t in encoder_tokens(tokens)), dtype=np.int64)

    def equals(self, other: "EncoderParams") -> bool:
        return (
            self.vocabulary == other.vocabulary
            and self.token_embeddings.tobytes() == other.token_embeddings.tobytes()
            and self.projection.tobytes() == other.projection.tobytes()
        )


def _empty_embedding(dim: int) -> np.ndarray:
    return np.full(dim, 1.0 / np.sqrt(dim))


def embed_ids(params: EncoderParams, ids: np.ndarray) -> np.ndarray:
    if len(ids) == 0:
        return _empty_embedding(params.dim)
    z = params.token_embeddings[ids].mean(axis=0) @ params.projection
    norm = np.linalg.norm(z)
    if norm == 0.0:
        return _empty_embedding(params.dim)
    return z / norm


def embed_text(params: EncoderParams, tokens: Sequence[str]) -> np.ndarray:
    return embed_ids(params, params.token_ids(tokens))


def embed_many(params: EncoderParams, texts: Sequence[Sequence[str]]) -> np.ndarray:
    out = np.empty((len(texts), params.dim))
    for i, tokens in enumerate(texts):
        out[i] = embed_text(params, tokens)
    return out


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


class ConceptEmbeddings(Mapping):
    """Read-only concept id -> unit vector table."""

    def __init__(self, ids: Sequence[ConceptId], matrix: np.ndarray):
        if len(ids) != len(matrix):
            raise ValueError("ids and matrix rows differ")
        self.ids = tuple(ids)
        self.matrix = np.array(matrix, dtype=np.float64)
        self.matrix.setflags(write=False)
        self._row = {cid: i for i, cid in enumerate(self.ids)}

    def __getitem__(self, cid: ConceptId) -> np.ndarray:
        return self.matrix[self._row[cid]]

    def __iter__(self) -> Iterator[ConceptId]:
        return iter(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, cid: ConceptId) -> int:
        return self._row[cid]

    def tobytes(self) -> bytes:
        return "\n".join(map(str, self.ids)).encode() + b"\0" + self.matrix.tobytes()


def precompute_concept_embeddings(
    params: EncoderParams, kb: KnowledgeBase, ids: Sequence[ConceptId] | None = None
) -> ConceptEmbeddings:
    ids = kb.target_ids() if ids is None else list(ids)
    texts = [kb.concept_text(cid).text.split() for cid in ids]
    return ConceptEmbeddings(ids, embed_many(params, texts))


def _write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ParseError("truncated checkpoint")
    return data


def _read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def _read_matrix(fh: BinaryIO, rows: int, cols: int) -> np.ndarray:
    raw = _read_exact(fh, rows * cols * 8)
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)


def save_checkpoint(path: str | Path, params: EncoderParams,
                    concepts: ConceptEmbeddings | None = None) -> None:
    """Write params (and optionally the frozen concept table) as CFG1."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", params.dim, len(params.vocabulary)))
        for token, _ in sorted(params.vocabulary.items(), key=lambda kv: kv[1]):
            _write_str(fh, token)
        fh.write(params.token_embeddings.astype("<f8").tobytes())
        fh.write(params.projection.astype("<f8").tobytes())
        if concepts is not None:
            fh.write(CONCEPT_MAGIC)
            fh.write(struct.pack("<I", len(concepts)))
            for cid in concepts.ids:
                _write_str(fh, str(cid))
            fh.write(concepts.matrix.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, ConceptEmbeddings | None]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ParseError(f"{path} is not a CFG1 checkpoint")
        dim, nvocab = struct.unpack("<II", _read_exact(fh, 8))
        vocab = {_read_str(fh): i for i in range(nvocab)}
        table = _read_matrix(fh, nvocab, dim)
        proj = _read_matrix(fh, dim, dim)
        params = EncoderParams(table, proj, vocab)
        concepts = None
        tag = fh.read(4)
        if tag == CONCEPT_MAGIC:
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            ids = [ConceptId.parse(_read_str(fh)) for _ in range(n)]
            concepts = ConceptEmbeddings(ids, _read_matrix(fh, n, dim))
        elif tag:
            raise ParseError(f"unexpected trailing section {tag!r} in {path}")
    return params, concepts
