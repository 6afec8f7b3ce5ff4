"""Single-layer ReLU sparse autoencoder trained with an L1 penalty.

    z     = ReLU(W_enc (x - b_pre) + b_enc)
    x_hat = W_dec z + b_pre
    loss  = mean_batch(||x - x_hat||^2 + l1 * ||z||_1)

Gradients are written out by hand; Adam is implemented directly on the four
parameter arrays so that decoder-column normalization can be folded into the
update.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .embedding_io import NormalizationStats, as_matrix, read_matrices, write_matrices
from .errors import ConfigError, DegenerateData, DimensionMismatch, NonFiniteLoss, ShapeMismatch

log = logging.getLogger(__name__)

PARAM_NAMES = ("w_enc", "w_dec", "b_pre", "b_enc")


@dataclass
class TrainConfig:
    learning_rate: float = 7e-6
    l1_coefficient: float = 3e-4
    expansion_factor: int = 16
    epochs: int = 200
    batch_size: int = 256
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    dead_threshold: float = 0.0
    normalize_decoder: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.l1_coefficient >= 0:
            raise ConfigError(f"l1_coefficient must be >= 0, got {self.l1_coefficient}")
        if int(self.expansion_factor) != self.expansion_factor or self.expansion_factor < 1:
            raise ConfigError(f"expansion_factor must be a positive integer, got {self.expansion_factor}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class SaeParams:
    w_enc: np.ndarray  # m x d
    w_dec: np.ndarray  # d x m
    b_pre: np.ndarray  # d
    b_enc: np.ndarray  # m

    @property
    def d(self) -> int:
        return self.w_dec.shape[0]

    @property
    def m(self) -> int:
        return self.w_dec.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "SaeParams":
        return SaeParams(**{k: v.copy() for k, v in self.arrays().items()})


SaeGrads = SaeParams


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, p: SaeParams) -> "AdamState":
        arrays = p.arrays()
        return cls(
            step=0,
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
        )


@dataclass
class LossBreakdown:
    reconstruction: float
    sparsity: float
    total: float


@dataclass
class TrainReport:
    losses: list[LossBreakdown] = field(default_factory=list)
    l0_rate: float = 0.0
    fve: float = 0.0
    dead_fraction: float = 0.0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(d: int, m: int, seed: int) -> SaeParams:
    if d < 1 or m < 1:
        raise ShapeMismatch(f"d and m must be >= 1, got d={d}, m={m}")
    rng = np.random.default_rng(seed)
    w_dec = rng.standard_normal((d, m))
    w_dec /= np.linalg.norm(w_dec, axis=0, keepdims=True)
    return SaeParams(
        w_enc=w_dec.T.copy(),
        w_dec=w_dec,
        b_pre=np.zeros(d),
        b_enc=np.zeros(m),
    )


def _check_cols(x: np.ndarray, want: int, what: str) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != want:
        raise DimensionMismatch(f"{what} has {x.shape[1]} columns, expected {want}")
    return x


def _rowwise(a: np.ndarray, w_t: np.ndarray) -> np.ndarray:
    # one BLAS call per row: results do not depend on how rows are batched
    return (a[:, None, :] @ w_t)[:, 0, :]


def preactivations(p: SaeParams, x: np.ndarray) -> np.ndarray:
    x = _check_cols(x, p.d, "input")
    return _rowwise(x - p.b_pre, p.w_enc.T) + p.b_enc


def encode(p: SaeParams, x: np.ndarray) -> np.ndarray:
    return np.maximum(preactivations(p, x), 0.0)


def decode(p: SaeParams, z: np.ndarray) -> np.ndarray:
    z = _check_cols(z, p.m, "code")
    return _rowwise(z, p.w_dec.T) + p.b_pre


def loss(p: SaeParams, x: np.ndarray, l1: float) -> LossBreakdown:
    z = encode(p, x)
    resid = decode(p, z) - x
    recon = float(np.mean(np.sum(resid * resid, axis=1)))
    sparsity = float(np.mean(np.sum(np.abs(z), axis=1)))
    return LossBreakdown(reconstruction=recon, sparsity=sparsity, total=recon + l1 * sparsity)


def _forward_backward(p: SaeParams, x: np.ndarray, l1: float):
    x = _check_cols(x, p.d, "input")
    n = x.shape[0]
    xc = x - p.b_pre
    pre = xc @ p.w_enc.T + p.b_enc
    active = pre > 0
    z = np.where(active, pre, 0.0)
    resid = z @ p.w_dec.T + p.b_pre - x

    recon = float(np.mean(np.sum(resid * resid, axis=1)))
    sparsity = float(np.mean(np.sum(z, axis=1)))
    parts = LossBreakdown(reconstruction=recon, sparsity=sparsity, total=recon + l1 * sparsity)

    d_xhat = (2.0 / n) * resid
    # L1 subgradient is 0 at z == 0, and z > 0 exactly where the ReLU is open
    d_pre = np.where(active, d_xhat @ p.w_dec + l1 / n, 0.0)
    grads = SaeParams(
        w_enc=d_pre.T @ xc,
        w_dec=d_xhat.T @ z,
        b_pre=d_xhat.sum(axis=0) - d_pre.sum(axis=0) @ p.w_enc,
        b_enc=d_pre.sum(axis=0),
    )
    return parts, grads, z


def grad(p: SaeParams, x: np.ndarray, l1: float) -> SaeGrads:
    """Gradients of the batch-mean loss with respect to every parameter."""
    return _forward_backward(p, x, l1)[1]


def remove_parallel_decoder_grad(w_dec: np.ndarray, g_dec: np.ndarray) -> np.ndarray:
    # keeps the update tangent to the unit-norm constraint on each column
    return g_dec - np.sum(g_dec * w_dec, axis=0, keepdims=True) * w_dec


def normalize_decoder_columns(w_dec: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(w_dec, axis=0, keepdims=True)
    return w_dec / np.where(norms > 0, norms, 1.0)


def adam_step(p: SaeParams, g: SaeGrads, state: AdamState, cfg: TrainConfig) -> tuple[SaeParams, AdamState]:
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon, cfg.learning_rate
    step = state.step + 1
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, value in p.arrays().items():
        gk = getattr(g, name)
        if name == "w_dec" and cfg.normalize_decoder:
            gk = remove_parallel_decoder_grad(value, gk)
        mk = b1 * state.m[name] + (1.0 - b1) * gk
        vk = b2 * state.v[name] + (1.0 - b2) * (gk * gk)
        m_hat = mk / bc1
        v_hat = vk / bc2
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = mk
        new_v[name] = vk
    if cfg.normalize_decoder:
        new_params["w_dec"] = normalize_decoder_columns(new_params["w_dec"])
    return SaeParams(**new_params), AdamState(step=step, m=new_m, v=new_v)


# ---- diagnostics -------------------------------------------------------------


def l0_rate(z: np.ndarray) -> float:
    z = as_matrix(z)
    if z.size == 0:
        return 0.0
    return float(np.mean(np.count_nonzero(z > 0, axis=1) / z.shape[1]))


def fve(x: np.ndarray, x_hat: np.ndarray) -> float:
    x, x_hat = as_matrix(x), as_matrix(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"shapes differ: {x.shape} vs {x_hat.shape}")
    total = float(np.sum((x - x.mean(axis=0)) ** 2))
    if total == 0.0:
        raise DegenerateData("input has zero total variance")
    return 1.0 - float(np.sum((x - x_hat) ** 2)) / total


def dead_neurons(z: np.ndarray, threshold: float = 0.0) -> tuple[np.ndarray, float]:
    """Return ``(alive_mask, dead_fraction)``; a unit is dead if it never exceeds threshold."""
    z = as_matrix(z)
    if z.shape[0] == 0:
        alive = np.zeros(z.shape[1], dtype=bool)
    else:
        alive = z.max(axis=0) > threshold
    m = z.shape[1]
    return alive, (float(np.count_nonzero(~alive)) / m if m else 0.0)


# ---- training ----------------------------------------------------------------


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    # Philox is counter-based; keying on (seed, epoch) makes each epoch's order independent
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))
    return rng.permutation(n)


def iter_batches(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    order = epoch_permutation(n, seed, epoch)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(
    cfg: TrainConfig,
    data: np.ndarray,
    *,
    on_epoch: Callable[[dict], None] | None = None,
    params: SaeParams | None = None,
) -> tuple[SaeParams, TrainReport]:
    """Train on already-normalized ``data``.

    ``on_epoch`` receives one progress record per epoch
    ``{epoch, reconstruction, sparsity, total, l0_rate, dead_fraction}``.
    """
    data = as_matrix(data)
    n, d = data.shape
    if n < cfg.batch_size:
        raise ShapeMismatch(f"{n} rows is fewer than batch_size {cfg.batch_size}")
    m = d * int(cfg.expansion_factor)
    p = params.copy() if params is not None else init_params(d, m, cfg.seed)
    state = AdamState.zeros_like(p)
    report = TrainReport()
    started = time.perf_counter()

    for epoch in range(cfg.epochs):
        recon_sum = sparsity_sum = 0.0
        active_count = 0
        fired = np.zeros(m, dtype=bool)
        for b, idx in enumerate(iter_batches(n, cfg.batch_size, cfg.seed, epoch)):
            batch = data[idx]
            parts, g, z = _forward_backward(p, batch, cfg.l1_coefficient)
            if not math.isfinite(parts.total):
                raise NonFiniteLoss(epoch, b)
            rows = batch.shape[0]
            recon_sum += parts.reconstruction * rows
            sparsity_sum += parts.sparsity * rows
            positive = z > cfg.dead_threshold
            fired |= positive.any(axis=0)
            active_count += int(np.count_nonzero(z))
            p, state = adam_step(p, g, state, cfg)
        recon, sparsity = recon_sum / n, sparsity_sum / n
        parts = LossBreakdown(recon, sparsity, recon + cfg.l1_coefficient * sparsity)
        report.losses.append(parts)
        record = {
            "epoch": epoch,
            "reconstruction": recon,
            "sparsity": sparsity,
            "total": parts.total,
            "l0_rate": active_count / (n * m),
            "dead_fraction": float(np.count_nonzero(~fired)) / m,
        }
        log.debug("epoch %d: %s", epoch, record)
        if on_epoch is not None:
            on_epoch(record)

    z = encode(p, data)
    report.l0_rate = l0_rate(z)
    report.fve = fve(data, decode(p, z))
    report.dead_fraction = dead_neurons(z, cfg.dead_threshold)[1]
    report.wall_time = time.perf_counter() - started
    return p, report


# ---- checkpoints -------------------------------------------------------------


def save_checkpoint(
    path,
    p: SaeParams,
    cfg: TrainConfig,
    stats: NormalizationStats | None,
    epoch: int,
) -> Path:
    """Write ``path`` (four concatenated SAEM matrices) plus a ``.json`` sidecar."""
    path = Path(path)
    write_matrices([p.w_enc, p.w_dec, p.b_pre[None, :], p.b_enc[None, :]], path)
    sidecar = {
        "d": p.d,
        "m": p.m,
        "expansion_factor": cfg.expansion_factor,
        "l1_coefficient": cfg.l1_coefficient,
        "seed": cfg.seed,
        "normalization": stats.to_dict() if stats is not None else None,
        "epoch": epoch,
        "train_config": asdict(cfg),
    }
    side = path.with_suffix(".json")
    side.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return side


def load_checkpoint(path) -> tuple[SaeParams, dict, NormalizationStats | None]:
    path = Path(path)
    mats = read_matrices(path)
    if len(mats) != 4:
        raise ShapeMismatch(f"checkpoint holds {len(mats)} matrices, expected 4")
    w_enc, w_dec, b_pre, b_enc = mats
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    d, m = sidecar["d"], sidecar["m"]
    if w_enc.shape != (m, d) or w_dec.shape != (d, m) or b_pre.shape != (1, d) or b_enc.shape != (1, m):
        raise ShapeMismatch(f"checkpoint matrix shapes disagree with sidecar d={d}, m={m}")
    stats = NormalizationStats.from_dict(sidecar["normalization"]) if sidecar.get("normalization") else None
    return SaeParams(w_enc=w_enc, w_dec=w_dec, b_pre=b_pre[0], b_enc=b_enc[0]), sidecar, stats
