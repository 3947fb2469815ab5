"""
Swapped-prediction objective: multi-view synthetic data, Sinkhorn codes and the cross-entropy
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.errors import InvalidArgumentError, InvalidConfigError, NumericError, ShapeError

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class SwavConfig:
    tau: float = 0.1
    epsilon: float = 0.03
    n_sinkhorn_iters: int = 10
    n_prototypes: int = 16
    n_global_views: int = 2
    n_local_views: int = 4
    global_noise_scale: float = 0.05
    local_noise_scale: float = 0.1
    local_mask_ratio: float = 0.6

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidConfigError(f"tau must be > 0, got {self.tau}")
        if not self.epsilon > 0:
            raise InvalidConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.n_sinkhorn_iters < 1:
            raise InvalidConfigError(f"n_sinkhorn_iters must be >= 1, got {self.n_sinkhorn_iters}")
        if self.n_prototypes < 1:
            raise InvalidConfigError(f"n_prototypes must be >= 1, got {self.n_prototypes}")
        if self.n_local_views < 0:
            raise InvalidConfigError(f"n_local_views must be >= 0, got {self.n_local_views}")
        if not 0 < self.local_mask_ratio <= 1:
            raise InvalidConfigError(f"local_mask_ratio must be in (0, 1], got {self.local_mask_ratio}")

    @property
    def n_views(self) -> int:
        return self.n_global_views + self.n_local_views


@dataclass(frozen=True)
class DatasetConfig:
    n_clusters: int = 4
    dim: int = 32
    n_samples: int = 2000
    spread: float = 0.1


@dataclass
class CodeMatrix:
    """K x B soft assignment of batch samples to prototypes"""
    Q: np.ndarray

    def targets(self) -> np.ndarray:
        """B x K per-sample probability vectors"""
        return (self.Q * self.Q.shape[1]).T


@dataclass
class SwavLoss:
    loss: float
    grad: np.ndarray
    codes: List[np.ndarray]
    pair_terms: dict


def logsumexp(x, axis=None) -> np.ndarray:
    """log(sum(exp(x))) along `axis`, dimensions kept for broadcasting"""
    peak = np.max(x, axis=axis, keepdims=True)
    return peak + np.log(np.sum(np.exp(x - peak), axis=axis, keepdims=True))


def sinkhorn(scores, cfg: SwavConfig) -> CodeMatrix:
    """
    Alternate row (1/K) and column (1/B) normalization, finishing on columns.
    Iterates on log Q so rows far below the global max never underflow to 0/0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"Scores must be K x B, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise NumericError("Sinkhorn received non-finite scores")
    n_protos, n_samples = scores.shape
    log_q = scores / cfg.epsilon
    log_q = log_q - logsumexp(log_q)
    for _ in range(cfg.n_sinkhorn_iters):
        log_q = log_q - (logsumexp(log_q, axis=1) + np.log(n_protos))
        log_q = log_q - (logsumexp(log_q, axis=0) + np.log(n_samples))
    return CodeMatrix(np.exp(log_q))


def log_softmax(x, axis=-1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def compute_codes(scores, cfg: SwavConfig) -> List[np.ndarray]:
    """B x K targets for each global view of a (views, B, K) score tensor"""
    return [sinkhorn(scores[g].T, cfg).targets() for g in range(cfg.n_global_views)]


def swav_loss_from_scores(scores, cfg: SwavConfig, codes: Optional[Sequence[np.ndarray]] = None) -> SwavLoss:
    """
    Every view predicts the codes of every other global view.
    Loss is the mean over (global view, other view) pairs; codes are constants.
    """
    scores = np.asarray(scores)
    if scores.ndim != 3:
        raise ShapeError(f"Scores must be (views, batch, K), got {scores.shape}")
    n_views, batch, n_protos = scores.shape
    if n_protos == 0:
        raise InvalidConfigError("Scores have zero prototypes")
    if cfg.n_global_views < 2 or n_views < cfg.n_global_views:
        raise InvalidConfigError(f"Need >= 2 global views, got {cfg.n_global_views} "
                                 f"of {n_views} views")
    if codes is None:
        codes = compute_codes(scores, cfg)

    log_probs = log_softmax(scores / cfg.tau)
    probs = np.exp(log_probs)
    weight = 1.0 / (cfg.n_global_views * (n_views - 1))
    grad = np.zeros_like(scores)
    terms = {}
    total = 0.0
    for g in range(cfg.n_global_views):
        q = codes[g]
        for v in range(n_views):
            if v == g:
                continue
            term = -float(np.mean(np.sum(q * log_probs[v], axis=1)))
            terms[(g, v)] = term
            total += term
            grad[v] += weight * (probs[v] - q) / (cfg.tau * batch)
    return SwavLoss(total * weight, grad, list(codes), terms)


def swav_loss(embeddings, prototypes, cfg: SwavConfig, codes=None) -> SwavLoss:
    """embeddings: (views, batch, D) normalized; prototypes: K x D"""
    embeddings = np.asarray(embeddings)
    if prototypes.shape[0] == 0:
        raise InvalidConfigError("Prototype matrix is empty")
    if embeddings.shape[-1] != prototypes.shape[1]:
        raise ShapeError(f"Embedding dim {embeddings.shape[-1]} does not match prototypes {prototypes.shape}")
    return swav_loss_from_scores(embeddings @ prototypes.T, cfg, codes)


def make_views(sample, cfg: SwavConfig, rng: np.random.Generator) -> List[np.ndarray]:
    """Global views: sample + noise. Local views: keep a random coordinate subset, zero the rest, add stronger noise."""
    sample = np.asarray(sample, dtype=np.float64)
    if not np.all(np.isfinite(sample)):
        raise InvalidArgumentError("Sample contains non-finite values")
    dim = sample.shape[0]
    views = []
    for _ in range(cfg.n_global_views):
        views.append(sample + cfg.global_noise_scale * rng.standard_normal(dim))
    n_keep = int(round(cfg.local_mask_ratio * dim))
    for _ in range(cfg.n_local_views):
        kept = rng.choice(dim, size=n_keep, replace=False)
        view = np.zeros(dim)
        view[kept] = sample[kept]
        views.append(view + cfg.local_noise_scale * rng.standard_normal(dim))
    return views


def synth_dataset(n_clusters: int, dim: int, n_samples: int, spread: float,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian clusters around unit-norm means; labels are for probing only"""
    if n_clusters < 2:
        raise InvalidArgumentError(f"n_clusters must be >= 2, got {n_clusters}")
    if dim < 1 or n_samples < 1:
        raise InvalidArgumentError(f"dim and n_samples must be positive, got {dim} and {n_samples}")
    means = rng.standard_normal((n_clusters, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n_samples) % n_clusters)
    samples = means[labels] + spread * rng.standard_normal((n_samples, dim))
    return samples, labels


def global_batch_indices(n_samples: int, step: int, world_size: int, batch: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step])
    size = world_size * batch
    return rng.choice(n_samples, size=size, replace=size > n_samples)


def microbatch_views(samples, step: int, rank: int, world_size: int, batch: int,
                     cfg: SwavConfig, seed: int) -> np.ndarray:
    """This rank's slice of the step's global batch as a (views, batch, dim) array"""
    indices = global_batch_indices(samples.shape[0], step, world_size, batch, seed)
    mine = indices[rank * batch:(rank + 1) * batch]
    rng = np.random.default_rng([seed, step, rank])
    per_sample = [make_views(samples[i], cfg, rng) for i in mine]
    return np.stack([np.stack(views) for views in per_sample], axis=1)


def assemble_global(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Rank-ordered (views, b, D) blocks into one (views, world*b, D) tensor"""
    return np.ascontiguousarray(np.concatenate(parts, axis=1))


def rank_rows(tensor, rank: int, batch: int) -> np.ndarray:
    """This rank's (views*batch, K) block of a global (views, B, K) tensor, view-major"""
    block = tensor[:, rank * batch:(rank + 1) * batch, :]
    return np.ascontiguousarray(block).reshape(-1, tensor.shape[-1])
