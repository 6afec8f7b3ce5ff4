"""Synthetic superposition data with known features and labels.

Samples are sparse positive combinations of unit-norm feature directions in
R^d (usually more features than dimensions), plus isotropic noise. Each
feature belongs to one label, so label columns are known exactly and a
trained dictionary can be scored against the true one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding_io import LabelMatrix, as_matrix
from .errors import InvalidShape

COEF_LOW, COEF_HIGH = 0.5, 1.5


@dataclass(frozen=True)
class GroundTruth:
    dictionary: np.ndarray  # d x t, unit columns
    feature_labels: np.ndarray  # length t, label index per feature
    k: int
    sparsity: float
    seed: int

    @property
    def d(self) -> int:
        return self.dictionary.shape[0]

    @property
    def t(self) -> int:
        return self.dictionary.shape[1]

    def label_names(self) -> tuple[str, ...]:
        return tuple(f"label_{j}" for j in range(self.k))

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "t": self.t,
            "k": self.k,
            "sparsity": self.sparsity,
            "seed": self.seed,
            "feature_labels": self.feature_labels.tolist(),
            "dictionary": self.dictionary.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GroundTruth":
        return cls(
            dictionary=np.asarray(payload["dictionary"], dtype=np.float64),
            feature_labels=np.asarray(payload["feature_labels"], dtype=np.int64),
            k=int(payload["k"]),
            sparsity=float(payload["sparsity"]),
            seed=int(payload["seed"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def gen_ground_truth(d: int, t: int, k: int, sparsity: float, seed: int) -> GroundTruth:
    if d < 2:
        raise InvalidShape(f"d must be >= 2, got {d}")
    if k < 1 or t < k:
        raise InvalidShape(f"need t >= k >= 1, got t={t}, k={k}")
    if not 1 <= sparsity <= t:
        raise InvalidShape(f"sparsity must lie in [1, t], got {sparsity}")
    rng = np.random.default_rng(seed)
    dictionary = rng.standard_normal((d, t))
    dictionary /= np.linalg.norm(dictionary, axis=0, keepdims=True)
    return GroundTruth(
        dictionary=dictionary,
        feature_labels=np.arange(t) % k,
        k=k,
        sparsity=float(sparsity),
        seed=seed,
    )


def labels_from_codes(codes: np.ndarray, gt: GroundTruth) -> np.ndarray:
    active = np.asarray(codes) > 0
    out = np.zeros((active.shape[0], gt.k))
    for j in range(gt.k):
        out[:, j] = active[:, gt.feature_labels == j].any(axis=1)
    return out


def gen_samples(gt: GroundTruth, n: int, noise_sigma: float, seed: int) -> tuple[np.ndarray, LabelMatrix, np.ndarray]:
    """Draw ``n`` samples; returns ``(embeddings, labels, codes)``.

    Every feature fires independently with probability ``sparsity / t`` and a
    coefficient uniform in [0.5, 1.5].
    """
    if n < 1:
        raise InvalidShape(f"n must be >= 1, got {n}")
    if noise_sigma < 0:
        raise InvalidShape(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    mask = rng.random((n, gt.t)) < gt.sparsity / gt.t
    coef = rng.uniform(COEF_LOW, COEF_HIGH, size=(n, gt.t))
    codes = np.where(mask, coef, 0.0)
    x = codes @ gt.dictionary.T
    if noise_sigma > 0:
        x = x + noise_sigma * rng.standard_normal(x.shape)
    labels = LabelMatrix(values=labels_from_codes(codes, gt), names=gt.label_names())
    return x, labels, codes


def recovery_score(w_dec: np.ndarray, gt: GroundTruth, alive: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean over true features of the best absolute cosine with a decoder column.

    Returns ``(mean_score, per_feature_scores)``. Dead columns are skipped
    when an ``alive`` mask is given.
    """
    w_dec = as_matrix(w_dec)
    if alive is not None:
        w_dec = w_dec[:, np.asarray(alive, dtype=bool)]
    if w_dec.shape[1] == 0:
        raise InvalidShape("no decoder columns to score")
    norms = np.linalg.norm(w_dec, axis=0)
    cols = w_dec / np.where(norms > 0, norms, 1.0)
    cos = np.abs(gt.dictionary.T @ cols)  # t x m
    per_feature = cos.max(axis=1)
    return float(per_feature.mean()), per_feature


def random_unit_columns(d: int, m: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((d, m))
    return w / np.linalg.norm(w, axis=0, keepdims=True)


def render_image(sample: np.ndarray) -> bytes:
    """Grayscale PGM rendering of one embedding, padded to a square grid."""
    side = int(np.ceil(np.sqrt(sample.size)))
    grid = np.zeros(side * side)
    grid[: sample.size] = sample
    lo, hi = grid.min(), grid.max()
    pixels = np.zeros_like(grid) if hi == lo else (grid - lo) / (hi - lo)
    raw = np.round(pixels * 255).astype(np.uint8).tobytes()
    return f"P5\n{side} {side}\n255\n".encode("ascii") + raw
