"""Modality availability sampling with exact per-modality missing rates.

The availability matrix is sampled once per corpus and persisted with it:
once a modality is masked for a sample it stays masked for the whole run
(imperfect-data training). Perfect-data training is the all-available
special case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

PDT = "pdt"
IDT = "idt"


class PresenceError(ValueError):
    """Raised for protocols that cannot yield a valid availability matrix."""


def missing_count(rate: float, n_samples: int) -> int:
    """Number of masked samples realizing `rate` exactly: round(rate * N), half up."""
    return int(math.floor(rate * n_samples + 0.5))


@dataclass(frozen=True)
class MissingProtocol:
    """How modality availability is drawn for a corpus."""

    mode: str = PDT
    target_rates: Tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (PDT, IDT):
            raise PresenceError(f"unknown mode {self.mode!r}; expected '{PDT}' or '{IDT}'")
        rates = tuple(float(r) for r in self.target_rates)
        object.__setattr__(self, "target_rates", rates)
        for r in rates:
            if not (0.0 <= r < 1.0):
                raise PresenceError(f"target rate {r} outside [0, 1)")
        if self.mode == PDT and any(r != 0.0 for r in rates):
            raise PresenceError("pdt mode requires all-zero target rates")

    @property
    def n_modalities(self) -> int:
        return len(self.target_rates)


@dataclass
class PresenceMatrix:
    """Binary N x M availability of modality m in sample n."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.int8)
        if entries.ndim != 2:
            raise PresenceError("presence matrix must be 2-D")
        if not np.isin(entries, (0, 1)).all():
            raise PresenceError("presence entries must be 0 or 1")
        if (entries.sum(axis=1) == 0).any():
            rows = np.flatnonzero(entries.sum(axis=1) == 0).tolist()
            raise PresenceError(f"rows with no present modality: {rows}")
        self.entries = entries

    @property
    def n_samples(self) -> int:
        return self.entries.shape[0]

    @property
    def n_modalities(self) -> int:
        return self.entries.shape[1]

    def missing_rates(self) -> np.ndarray:
        n = self.n_samples
        return (n - self.entries.sum(axis=0)) / float(n)

    def row(self, n: int) -> np.ndarray:
        return self.entries[n]


def sample_presence(protocol: MissingProtocol, n_samples: int, n_modalities: int) -> PresenceMatrix:
    """Draw an availability matrix realizing the protocol's rates exactly.

    Each column m masks exactly round(rate_m * N) rows, chosen by the
    protocol seed. Rows left with no modality are repaired by a seeded swap:
    the row is re-granted the available modality with the lowest target
    missing rate, and that modality is removed from a donor row keeping at
    least two modalities, so column counts stay exact. The swap always
    terminates when sum_m(N - masked_m) >= N; otherwise the unsatisfiable
    rows are reported.
    """
    if n_samples < 1:
        raise PresenceError("need at least one sample")
    if protocol.n_modalities != n_modalities:
        raise PresenceError(
            f"protocol has {protocol.n_modalities} rates but {n_modalities} modalities requested"
        )
    counts = [missing_count(r, n_samples) for r in protocol.target_rates]
    for m, k in enumerate(counts):
        if k >= n_samples:
            raise PresenceError(
                f"modality {m}: rate {protocol.target_rates[m]} rounds to a fully-missing column"
            )

    rng = np.random.default_rng(protocol.seed)
    entries = np.ones((n_samples, n_modalities), dtype=np.int8)
    for m, k in enumerate(counts):
        if k > 0:
            masked = rng.choice(n_samples, size=k, replace=False)
            entries[masked, m] = 0

    # Repair pass: fix all-absent rows without disturbing column counts.
    granting_order = sorted(range(n_modalities), key=lambda m: (protocol.target_rates[m], m))
    failed: List[int] = []
    for r in np.flatnonzero(entries.sum(axis=1) == 0):
        repaired = False
        for m in granting_order:
            donors = np.flatnonzero((entries[:, m] == 1) & (entries.sum(axis=1) >= 2))
            if donors.size:
                donor = int(rng.choice(donors))
                entries[r, m] = 1
                entries[donor, m] = 0
                repaired = True
                break
        if not repaired:
            failed.append(int(r))
    if failed:
        raise PresenceError(
            f"greedy repair cannot keep one modality per sample; failed rows: {failed} "
            f"(rates {protocol.target_rates} leave only {n_samples * n_modalities - sum(counts)} "
            f"present entries for {n_samples} samples)"
        )
    return PresenceMatrix(entries)
