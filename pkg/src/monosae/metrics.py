"""Neuron-label correlation, concept distributions and entropy.

A neuron's monosemanticity is read off the entropy (bits) of its absolute
Pearson correlations with each label, normalized to sum to one. The same
pipeline runs on raw embedding dimensions to give the baseline side of the
comparison.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding_io import LabelMatrix, as_matrix
from .errors import IndexOutOfRange, NoDefinedNeurons, ShapeMismatch
from .sae import SaeParams, encode


@dataclass(frozen=True)
class CorrelationMatrix:
    values: np.ndarray  # m x k; 0.0 where invalid
    valid: np.ndarray  # m x k bool

    @property
    def neuron_count(self) -> int:
        return self.values.shape[0]

    @property
    def label_count(self) -> int:
        return self.values.shape[1]


@dataclass
class NeuronProfile:
    neuron_id: int
    entropy: float | None
    distribution: list[float] | None
    best_label: int | None
    best_label_name: str | None
    best_abs_correlation: float
    alive: bool
    top_samples: list[int] = field(default_factory=list)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["best_label"] = None if self.best_label is None else {"index": self.best_label, "name": self.best_label_name}
        del rec["best_label_name"]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "NeuronProfile":
        best = rec.get("best_label")
        return cls(
            neuron_id=rec["neuron_id"],
            entropy=rec["entropy"],
            distribution=rec["distribution"],
            best_label=None if best is None else best["index"],
            best_label_name=None if best is None else best["name"],
            best_abs_correlation=rec["best_abs_correlation"],
            alive=rec["alive"],
            top_samples=list(rec["top_samples"]),
        )


@dataclass(frozen=True)
class EntropySummary:
    mean: float
    defined: int
    excluded: int


def activation_matrix(p: SaeParams, data: np.ndarray, chunk_size: int = 4096) -> np.ndarray:
    """Encode ``data`` chunk by chunk so memory stays bounded for large n."""
    data = as_matrix(data)
    out = np.empty((data.shape[0], p.m))
    for start in range(0, data.shape[0], max(1, chunk_size)):
        out[start : start + chunk_size] = encode(p, data[start : start + chunk_size])
    return out


def pearson(z: np.ndarray, labels: LabelMatrix | np.ndarray) -> CorrelationMatrix:
    """Population-moment Pearson correlation of every neuron with every label.

    Entries involving a constant neuron or constant label are flagged invalid
    and stored as 0.
    """
    z = as_matrix(z)
    y = as_matrix(labels.values if isinstance(labels, LabelMatrix) else labels)
    if z.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"{z.shape[0]} activation rows vs {y.shape[0]} label rows")
    n = z.shape[0]
    if n < 2:
        raise ShapeMismatch("need at least two samples for a correlation")
    # exact zero-variance test; a centered constant column can leave rounding residue
    z_const = (z.max(axis=0) == z.min(axis=0)) if z.shape[1] else np.zeros(0, dtype=bool)
    y_const = (y.max(axis=0) == y.min(axis=0)) if y.shape[1] else np.zeros(0, dtype=bool)
    zc = z - z.mean(axis=0)
    yc = y - y.mean(axis=0)
    cov = zc.T @ yc / n
    sz = np.sqrt(np.mean(zc * zc, axis=0))
    sy = np.sqrt(np.mean(yc * yc, axis=0))
    valid = ~z_const[:, None] & ~y_const[None, :]
    denom = np.outer(sz, sy)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(valid, cov / np.where(valid, denom, 1.0), 0.0)
    return CorrelationMatrix(values=np.clip(rho, -1.0, 1.0), valid=valid)


def concept_distribution(c: CorrelationMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized absolute correlations.

    Returns ``(dist, defined)``; rows with no valid entry or zero absolute
    sum are undefined and left as zeros.
    """
    a = np.where(c.valid, np.abs(c.values), 0.0)
    total = a.sum(axis=1)
    defined = c.valid.any(axis=1) & (total > 0)
    dist = np.zeros_like(a)
    dist[defined] = a[defined] / total[defined, None]
    return dist, defined


def entropy(dist: Sequence[float] | np.ndarray) -> float:
    p = np.asarray(dist, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz))) + 0.0


def top_activating(z: np.ndarray, neuron: int, count: int) -> list[int]:
    """Indices of the ``count`` largest activations, ties to the lower index."""
    z = as_matrix(z)
    if not 0 <= neuron < z.shape[1]:
        raise IndexOutOfRange(f"neuron {neuron} outside [0, {z.shape[1]})")
    if count < 1:
        raise IndexOutOfRange(f"count must be >= 1, got {count}")
    col = z[:, neuron]
    # lexsort keys: last is primary
    order = np.lexsort((np.arange(col.size), -col))
    return order[:count].tolist()


def build_profiles(
    z: np.ndarray,
    labels: LabelMatrix,
    alive: np.ndarray | None = None,
    top_count: int = 10,
) -> list[NeuronProfile]:
    """Per-neuron profiles; the same path serves SAE codes and raw embedding dimensions."""
    z = as_matrix(z)
    corr = pearson(z, labels)
    dist, defined = concept_distribution(corr)
    abs_rho = np.where(corr.valid, np.abs(corr.values), -1.0)
    if alive is None:
        alive = z.max(axis=0) > z.min(axis=0) if z.shape[0] else np.zeros(z.shape[1], dtype=bool)
    # stable sort on -z: descending, ties to the lower sample index
    order = np.argsort(-z, axis=0, kind="stable")[:top_count] if top_count > 0 else np.zeros((0, z.shape[1]), int)
    profiles = []
    for i in range(z.shape[1]):
        if defined[i]:
            best = int(np.argmax(abs_rho[i]))
            profiles.append(
                NeuronProfile(
                    neuron_id=i,
                    entropy=entropy(dist[i]),
                    distribution=dist[i].tolist(),
                    best_label=best,
                    best_label_name=labels.names[best],
                    best_abs_correlation=float(abs_rho[i, best]),
                    alive=bool(alive[i]),
                    top_samples=order[:, i].tolist(),
                )
            )
        else:
            profiles.append(
                NeuronProfile(
                    neuron_id=i,
                    entropy=None,
                    distribution=None,
                    best_label=None,
                    best_label_name=None,
                    best_abs_correlation=0.0,
                    alive=bool(alive[i]),
                    top_samples=order[:, i].tolist(),
                )
            )
    return profiles


def raw_feature_profiles(embeddings: np.ndarray, labels: LabelMatrix, top_count: int = 10) -> list[NeuronProfile]:
    return build_profiles(embeddings, labels, alive=None, top_count=top_count)


def mean_entropy(profiles: Iterable[NeuronProfile], include_dead: bool = False, k: int | None = None) -> EntropySummary:
    """Average entropy over neurons with a defined entropy.

    With ``include_dead`` the undefined neurons are counted at the maximum
    entropy ``log2(k)`` instead of being dropped.
    """
    profiles = list(profiles)
    values = [p.entropy for p in profiles if p.entropy is not None]
    excluded = len(profiles) - len(values)
    if include_dead and excluded:
        if k is None:
            raise ValueError("k is required to count undefined neurons at maximum entropy")
        values = values + [math.log2(k)] * excluded
        excluded = 0
    if not values:
        raise NoDefinedNeurons("no neuron has a defined entropy")
    return EntropySummary(mean=float(np.mean(values)), defined=len(values), excluded=excluded)


def write_profiles(profiles: Iterable[NeuronProfile], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in profiles:
            fh.write(json.dumps(p.to_record(), sort_keys=True) + "\n")


def read_profiles(path) -> list[NeuronProfile]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [NeuronProfile.from_record(json.loads(line)) for line in lines if line.strip()]
