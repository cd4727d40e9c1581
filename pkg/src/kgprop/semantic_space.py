"""Label vocabulary with its seen/unseen split, and the word-vector table."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kgprop.errors import (
    DimensionMismatch,
    IndexOutOfRange,
    MissingToken,
    UnknownLabel,
    ValidationError,
)

SEPARATOR = "---"


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered labels; the first ``seen_count`` are seen, the rest unseen."""

    labels: tuple[str, ...]
    seen_count: int

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError("label names must be unique")
        if not 1 <= self.seen_count <= len(self.labels):
            raise ValidationError(
                f"seen_count={self.seen_count} outside [1, {len(self.labels)}]"
            )

    @classmethod
    def from_split(cls, seen, unseen=()) -> "LabelVocabulary":
        return cls(tuple(seen) + tuple(unseen), len(seen))

    @property
    def unseen_count(self) -> int:
        return len(self.labels) - self.seen_count

    @property
    def seen(self) -> tuple[str, ...]:
        return self.labels[: self.seen_count]

    @property
    def unseen(self) -> tuple[str, ...]:
        return self.labels[self.seen_count :]

    def __len__(self):
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownLabel(label) from None

    def is_seen(self, index: int) -> bool:
        return index < self.seen_count

    def seen_only(self) -> "LabelVocabulary":
        return LabelVocabulary(self.seen, self.seen_count)

    def save(self, path) -> None:
        lines = list(self.seen)
        if self.unseen_count:
            lines.append(SEPARATOR)
            lines.extend(self.unseen)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LabelVocabulary":
        seen, unseen = [], []
        target = seen
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if not line:
                continue
            if line == SEPARATOR:
                if target is unseen:
                    raise ValidationError("vocabulary has more than one separator")
                target = unseen
                continue
            target.append(line)
        return cls.from_split(seen, unseen)


@dataclass(frozen=True)
class EmbeddingTable:
    """One float64 vector per vocabulary label, rows in vocabulary order."""

    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise DimensionMismatch("embedding table must be 2-D")
        if not np.all(np.isfinite(vectors)):
            raise ValidationError("embedding vectors must be finite")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]

    def subset(self, count: int) -> "EmbeddingTable":
        """Table for the first ``count`` labels (e.g. the seen slice)."""
        return EmbeddingTable(self.vectors[:count])

    def save(self, path, vocab: LabelVocabulary) -> None:
        """Write rows as ``<label> v1 ... vd``; spaces in labels become underscores.

        Floats are written with ``repr`` so a reload is bit-exact.
        """
        if len(vocab) != len(self):
            raise DimensionMismatch("vocabulary and table sizes differ")
        with open(path, "w", encoding="utf-8") as fh:
            for label, vec in zip(vocab.labels, self.vectors):
                token = label.replace(" ", "_")
                fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def _read_rows(path, dim: int) -> dict[str, np.ndarray]:
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise DimensionMismatch(
                    f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}"
                )
            rows[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=np.float64)
    return rows


def load_embeddings(path, vocab: LabelVocabulary, dim: int, normalize: bool = False) -> EmbeddingTable:
    """Build the table for ``vocab`` from a GloVe-style text file.

    A label found verbatim (or with spaces replaced by underscores) uses that
    row. Otherwise the label is split on whitespace and the mean of its token
    vectors is used.
    """
    rows = _read_rows(path, dim)
    out = np.empty((len(vocab), dim), dtype=np.float64)
    for i, label in enumerate(vocab.labels):
        for key in (label, label.replace(" ", "_")):
            if key in rows:
                out[i] = rows[key]
                break
        else:
            tokens = label.split()
            missing = [t for t in tokens if t not in rows]
            if not tokens or missing:
                raise MissingToken(label)
            out[i] = np.mean([rows[t] for t in tokens], axis=0)
    if normalize:
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        out = out / np.where(norms > 0, norms, 1.0)
    return EmbeddingTable(out)


def embedding_of(table: EmbeddingTable, label_index: int) -> np.ndarray:
    if not 0 <= label_index < len(table):
        raise IndexOutOfRange(f"label index {label_index} outside [0, {len(table)})")
    return table.vectors[label_index]
