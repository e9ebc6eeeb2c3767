"""Synthetic VQ-video corpus.

A latent dynamical system emits per-frame-block latent sub-vectors which
are quantized against a fixed codebook into flat token sequences. The
per-sequence dynamics regime is stamped into block 1 only and afterwards
drives the transition map (rotation + drift + small noise), so long-range
context carries information that block-local context cannot recover.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import expm

from . import kernels
from .seeding import derive_seed, rng_for


def block_count(t: int, alpha: int) -> int:
    """Frame blocks for t frames at temporal compression alpha (first frame kept)."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    if (t - 1) % alpha != 0:
        raise ValueError(f"(t-1)={t - 1} not divisible by alpha={alpha}")
    return 1 + (t - 1) // alpha


@dataclass
class CorpusConfig:
    n_blocks: int = 16
    b_spatial: int = 16
    latent_dim: int = 8
    codebook_size: int = 256
    n_classes: int = 4
    n_regimes: int = 8
    motion_scale: float = 1.0
    noise_scale: float = 0.05
    amplitude: float = 3.0  # known max |latent| value R
    alpha: int = 4

    def __post_init__(self):
        if self.motion_scale < 0:
            raise ValueError("motion_scale must be >= 0")
        if self.n_blocks < 2 or self.b_spatial < 1:
            raise ValueError("need at least 2 blocks and 1 sub-vector")

    @property
    def tokens_per_sequence(self) -> int:
        return self.n_blocks * self.b_spatial


@dataclass
class LatentTrajectory:
    latents: np.ndarray  # (n_blocks, b_spatial, latent_dim)
    class_id: int
    regime: int
    motion_scale: float
    amplitude: float


@dataclass
class TokenSequence:
    condition: int
    tokens: np.ndarray  # flat, frame-block order, length n_blocks*b_spatial
    n_blocks: int
    b_spatial: int

    def blocks(self) -> np.ndarray:
        return self.tokens.reshape(self.n_blocks, self.b_spatial)


class CorpusModel:
    """Fixed per-config structures: codebook, regime stamps, transition maps."""

    def __init__(self, config: CorpusConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = rng_for(seed, "corpus-structure")
        d = config.latent_dim
        R = config.amplitude

        stamps = rng.normal(size=(config.n_regimes, d))
        stamps /= np.linalg.norm(stamps, axis=1, keepdims=True)
        self.stamps = stamps * (0.6 * R)

        # rotation generators and drift directions per (class, regime)
        self.omegas = np.empty((config.n_classes, config.n_regimes, d, d))
        self.drifts = np.empty((config.n_classes, config.n_regimes, d))
        for c in range(config.n_classes):
            for r in range(config.n_regimes):
                w = rng.normal(size=(d, d))
                w = w - w.T
                w /= np.linalg.norm(w, 2)
                self.omegas[c, r] = w
                drift = rng.normal(size=d)
                self.drifts[c, r] = drift / np.linalg.norm(drift)

        self.codebook = self._make_codebook(rng)

    def _make_codebook(self, rng) -> np.ndarray:
        cfg = self.config
        entries = [self.stamps + rng.normal(0, 0.05, self.stamps.shape)]
        rest = cfg.codebook_size - cfg.n_regimes
        entries.append(rng.normal(0, 0.5, (rest, cfg.latent_dim)))
        cb = np.concatenate(entries, axis=0)
        d2 = ((cb[:, None] - cb[None, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        if d2.min() <= 1e-18:
            raise ValueError("degenerate codebook: duplicate entries")
        return cb

    def rotation(self, class_id: int, regime: int) -> np.ndarray:
        angle = 0.25 * self.config.motion_scale
        return expm(angle * self.omegas[class_id, regime])


def gen_trajectory(corpus: CorpusModel, class_id: int, seed: int) -> LatentTrajectory:
    """Deterministic latent trajectory for one sequence."""
    cfg = corpus.config
    if not 0 <= class_id < cfg.n_classes:
        raise ValueError("invalid class id")
    rng = np.random.default_rng(seed)
    d, B, R = cfg.latent_dim, cfg.b_spatial, cfg.amplitude
    regime = int(rng.integers(cfg.n_regimes))
    z = np.empty((cfg.n_blocks, B, d))

    # regime stamp only in block 1
    z[0] = corpus.stamps[regime] + rng.normal(0, 0.05, (B, d))

    # fresh isotropic start for block 2: a single later block is regime-blind
    z[1] = rng.normal(0, 0.45, (B, d))

    rot = corpus.rotation(class_id, regime)
    drift = 0.04 * cfg.motion_scale * corpus.drifts[class_id, regime]
    sigma = cfg.noise_scale * cfg.motion_scale
    for k in range(2, cfg.n_blocks):
        z[k] = z[k - 1] @ rot.T + drift + rng.normal(0, 1, (B, d)) * sigma
        # rescale into the known amplitude ball
        norms = np.linalg.norm(z[k], axis=-1, keepdims=True)
        over = norms > 0.9 * R
        if np.any(over):
            z[k] = np.where(over, z[k] * (0.9 * R / norms), z[k])
    np.clip(z, -R, R, out=z)
    return LatentTrajectory(z, class_id, regime, cfg.motion_scale, R)


def quantize(traj: LatentTrajectory, codebook: np.ndarray, condition: int | None = None) -> TokenSequence:
    """Map every sub-vector to its nearest codebook entry (ties break low)."""
    n_blocks, b_spatial, d = traj.latents.shape
    if codebook.shape[1] != d:
        raise ValueError("codebook dimension mismatch")
    idx = kernels.nearest_codebook(traj.latents.reshape(-1, d), codebook)
    return TokenSequence(
        condition=traj.class_id if condition is None else condition,
        tokens=idx.astype(np.int64),
        n_blocks=n_blocks,
        b_spatial=b_spatial,
    )


def decode(tokens: np.ndarray, codebook: np.ndarray, n_blocks: int, b_spatial: int) -> np.ndarray:
    """Pure table lookup back to latents, shaped (n_blocks, b_spatial, d)."""
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= codebook.shape[0]):
        raise IndexError("token index out of codebook range")
    return codebook[tokens].reshape(n_blocks, b_spatial, codebook.shape[1])


@dataclass
class Dataset:
    config: CorpusConfig
    seed: int
    codebook: np.ndarray
    tokens: np.ndarray  # (n, N) int64
    conditions: np.ndarray  # (n,)
    regimes: np.ndarray  # (n,)
    train_idx: np.ndarray
    eval_idx: np.ndarray
    extra_meta: dict = field(default_factory=dict)

    @property
    def n_sequences(self) -> int:
        return self.tokens.shape[0]

    def decode_sequence(self, i: int) -> np.ndarray:
        return decode(self.tokens[i], self.codebook, self.config.n_blocks, self.config.b_spatial)

    def save(self, path) -> None:
        meta = {"config": asdict(self.config), "seed": self.seed, "format": 1}
        meta.update(self.extra_meta)
        np.savez(
            path,
            __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
            codebook=self.codebook,
            tokens=self.tokens,
            conditions=self.conditions,
            regimes=self.regimes,
            train_idx=self.train_idx,
            eval_idx=self.eval_idx,
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"].tobytes()).decode())
            cfg = CorpusConfig(**meta["config"])
            extra = {k: v for k, v in meta.items() if k not in ("config", "seed", "format")}
            return cls(
                config=cfg,
                seed=int(meta["seed"]),
                codebook=np.array(z["codebook"]),
                tokens=np.array(z["tokens"]),
                conditions=np.array(z["conditions"]),
                regimes=np.array(z["regimes"]),
                train_idx=np.array(z["train_idx"]),
                eval_idx=np.array(z["eval_idx"]),
                extra_meta=extra,
            )


def make_dataset(config: CorpusConfig, n_sequences: int, seed: int) -> Dataset:
    """Generate a balanced, deterministically split token dataset."""
    if n_sequences < 2:
        raise ValueError("need at least 2 sequences")
    corpus = CorpusModel(config, seed)
    tokens = np.empty((n_sequences, config.tokens_per_sequence), dtype=np.int64)
    conditions = np.empty(n_sequences, dtype=np.int64)
    regimes = np.empty(n_sequences, dtype=np.int64)
    for i in range(n_sequences):
        class_id = i % config.n_classes
        traj = gen_trajectory(corpus, class_id, derive_seed(seed, "sequence", i))
        seq = quantize(traj, corpus.codebook)
        tokens[i] = seq.tokens
        conditions[i] = class_id
        regimes[i] = traj.regime

    # deterministic 90/10 split: rank sequences by a per-index hash
    hashes = np.array([derive_seed(seed, "split", i) for i in range(n_sequences)])
    order = np.argsort(hashes, kind="stable")
    n_eval = max(1, n_sequences // 10)
    eval_idx = np.sort(order[:n_eval])
    train_idx = np.sort(order[n_eval:])
    return Dataset(
        config=config,
        seed=seed,
        codebook=corpus.codebook,
        tokens=tokens,
        conditions=conditions,
        regimes=regimes,
        train_idx=train_idx,
        eval_idx=eval_idx,
    )
