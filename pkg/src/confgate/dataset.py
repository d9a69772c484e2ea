"""In-memory batch dataset: one batch per query, one row per response."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import NDArray

from .alignment import BatchRecord, rescale_energy
from .conformal import ResidualBag
from .errors import DimensionMismatch, SeverityOutOfRange
from .geometry import batch_scores, loo_residuals


@dataclass
class Batch:
    query_id: str
    embeddings: NDArray[np.float64]
    response_ids: list[str] = field(default_factory=list)
    severities: NDArray[np.float64] | None = None
    texts: list[str | None] | None = None
    is_outlier: NDArray[np.bool_] | None = None

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        n = self.embeddings.shape[0]
        if not self.response_ids:
            self.response_ids = [f"{self.query_id}:{i}" for i in range(n)]
        if len(self.response_ids) != n:
            raise DimensionMismatch(f"batch {self.query_id!r}: {n} embeddings, {len(self.response_ids)} ids")
        if self.severities is not None:
            s = np.asarray(self.severities, dtype=np.float64)
            if s.shape != (n,):
                raise DimensionMismatch(f"batch {self.query_id!r}: severities do not match responses")
            for rid, v in zip(self.response_ids, s):
                if not 0.0 <= v <= 1.0:
                    raise SeverityOutOfRange(rid, float(v))
            self.severities = s

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def energies(self) -> NDArray[np.float64]:
        return batch_scores(self.embeddings)[0]

    def atypical(self) -> NDArray[np.float64]:
        return batch_scores(self.embeddings)[1]

    def residuals(self) -> ResidualBag:
        """Within-batch leave-one-out residuals (base size ``I - 1``)."""
        return ResidualBag(loo_residuals(self.embeddings), base_size=len(self) - 1)

    def record(self, with_severities: bool = True) -> BatchRecord:
        """Alignment record: rescaled energies plus, optionally, severities."""
        q = rescale_energy(self.energies(), len(self))
        return BatchRecord(q, self.severities if with_severities else None)


@dataclass
class BatchDataset:
    batches: list[Batch]

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self) -> Iterator[Batch]:
        return iter(self.batches)

    def __getitem__(self, i):
        return self.batches[i]

    @property
    def dim(self) -> int:
        return self.batches[0].embeddings.shape[1] if self.batches else 0

    @property
    def has_severities(self) -> bool:
        return bool(self.batches) and all(b.severities is not None for b in self.batches)

    def subset(self, idx: Sequence[int]) -> "BatchDataset":
        return BatchDataset([self.batches[i] for i in idx])

    def residual_bags(self) -> list[ResidualBag]:
        return [b.residuals() for b in self.batches]
