"""Training objectives and their sampling schedules.

Five strategies: full-sequence baseline, fewer-frames crops, windowed
local optimization with frozen context, its first-window-balanced
variant, and the continuity-regularized variant on top of balanced
sampling. Windows are block-aligned; all sequences in a batch share one
sampled window so batches stay rectangular.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Dataset
from .model import TransformerLM
from .optim import AdamW

STRATEGIES = ("baseline", "fewer_frames", "local_opt", "local_opt_balanced", "reco")


@dataclass
class WindowSpec:
    start: int  # 1-based token index
    width: int
    stride: int

    def validate(self, n_tokens: int) -> None:
        if self.start < 1 or self.start + self.width - 1 > n_tokens:
            raise ValueError(f"window [{self.start}, w={self.width}] invalid for N={n_tokens}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass
class StrategyConfig:
    name: str = "baseline"
    window_blocks: int = 4
    stride_blocks: int = 2
    k_blocks: int = 2
    p_first: float = 0.5
    lam: float = 0.1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    batch_size: int = 8
    log_timing: bool = False

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}")
        if not 0.0 <= self.p_first <= 1.0:
            raise ValueError("p_first must be in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


# -- window machinery --------------------------------------------------------


def enumerate_window_starts(n_tokens: int, width: int, stride: int) -> list[int]:
    """Valid 1-based start indices {1 + k*stride | start + width - 1 <= N}."""
    if width > n_tokens:
        raise ValueError("window wider than sequence")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return list(range(1, n_tokens - width + 2, stride))


def sample_window(starts: list[int], width: int, stride: int, p_first: float, rng: np.random.Generator) -> WindowSpec:
    """First start with probability p_first, else uniform over the rest."""
    if not starts:
        raise ValueError("empty start set")
    if not 0.0 <= p_first <= 1.0:
        raise ValueError("p_first must be in [0, 1]")
    u = rng.random()
    if u < p_first or len(starts) == 1:
        start = starts[0]
    else:
        start = starts[1 + int(rng.integers(0, len(starts) - 1))]
    return WindowSpec(start=start, width=width, stride=stride)


def fewer_frames_crop(tokens: np.ndarray, k_blocks: int, n_blocks: int, b_spatial: int, rng: np.random.Generator):
    """Contiguous run of k frame blocks at a uniform start; returns (crop, start_block)."""
    if k_blocks > n_blocks:
        raise ValueError("crop longer than sequence")
    start_block = int(rng.integers(0, n_blocks - k_blocks + 1))  # 0-based
    lo = start_block * b_spatial
    hi = lo + k_blocks * b_spatial
    tokens = np.atleast_2d(tokens)
    return tokens[:, lo:hi], start_block + 1


# -- losses ------------------------------------------------------------------


def baseline_loss(model: TransformerLM, tokens: np.ndarray, conditions) -> Tensor:
    """Teacher-forced mean cross-entropy over all token positions."""
    tokens = np.atleast_2d(tokens)
    n = tokens.shape[1]
    logits, _ = model.forward(tokens, conditions)
    pred = ad.getitem(logits, (slice(None), slice(0, n), slice(0, model.config.codebook_size)))
    return ad.cross_entropy(pred, tokens)


def local_opt_loss(model: TransformerLM, tokens: np.ndarray, conditions, window: WindowSpec):
    """Window CE with frozen cached context; returns (ce, window HiddenTrace)."""
    tokens = np.atleast_2d(tokens)
    n = tokens.shape[1]
    window.validate(n)
    ids = model.compose_ids(tokens, conditions)
    split = window.start - 1  # input positions before the window
    cache = model.build_context_cache(ids[:, :split]) if split > 0 else None
    logits, hidden, _ = model.forward_window(cache, ids[:, split : split + window.width])
    targets = tokens[:, window.start - 1 : window.start - 1 + window.width]
    pred = ad.getitem(logits, (slice(None), slice(None), slice(0, model.config.codebook_size)))
    ce = ad.cross_entropy(pred, targets)
    return ce, hidden


def reco_loss(trace) -> Tensor:
    """Mean squared distance between adjacent hidden states in a window."""
    t = trace if isinstance(trace, Tensor) else Tensor(np.asarray(trace, dtype=float))
    if t.data.ndim == 2:
        t = ad.reshape(t, (1,) + t.data.shape)
    w = t.data.shape[1]
    if w < 2:
        raise ValueError("continuity loss needs a window of at least 2 states")
    diff = ad.add(
        ad.getitem(t, (slice(None), slice(1, w))),
        ad.mul(ad.getitem(t, (slice(None), slice(0, w - 1))), -1.0),
    )
    sq = ad.tsum(ad.square(diff), axis=(1, 2))  # per-sample sum of ||.||^2
    return ad.tmean(ad.mul(sq, 1.0 / (w - 1)))


def total_loss(ce, reco, lam: float):
    """Weighted objective ce + lam * reco."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if isinstance(ce, Tensor) or isinstance(reco, Tensor):
        return ad.add(ce, ad.mul(reco, lam))
    return ce + lam * reco


# -- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    log_rows: list[dict]
    optimizer: AdamW
    rng: np.random.Generator


def uniform_share(n_starts: int) -> float:
    return 1.0 / n_starts


def train(
    model: TransformerLM,
    dataset: Dataset,
    config: StrategyConfig,
    steps: int,
    seed: int = 0,
    optimizer: AdamW | None = None,
    rng: np.random.Generator | None = None,
    start_step: int = 0,
) -> TrainResult:
    """Run `steps` optimization steps of the configured strategy."""
    cfg = dataset.config
    n = cfg.tokens_per_sequence
    w_tokens = config.window_blocks * cfg.b_spatial
    s_tokens = config.stride_blocks * cfg.b_spatial
    if optimizer is None:
        optimizer = AdamW(
            model.params,
            lr=config.lr,
            betas=(config.beta1, config.beta2),
            weight_decay=config.weight_decay,
        )
    if rng is None:
        rng = np.random.default_rng(seed)
    train_idx = dataset.train_idx
    log_rows: list[dict] = []

    for step in range(start_step, start_step + steps):
        t0 = time.perf_counter() if config.log_timing else 0.0
        pick = rng.integers(0, len(train_idx), size=config.batch_size)
        rows = dataset.tokens[train_idx[pick]]
        conds = dataset.conditions[train_idx[pick]]

        reco_val = 0.0
        if config.name == "baseline":
            loss = baseline_loss(model, rows, conds)
            ce_val = loss.item()
            window_start = 1
        elif config.name == "fewer_frames":
            crop, start_block = fewer_frames_crop(rows, config.k_blocks, cfg.n_blocks, cfg.b_spatial, rng)
            loss = baseline_loss(model, crop, conds)
            ce_val = loss.item()
            window_start = (start_block - 1) * cfg.b_spatial + 1
        else:
            starts = enumerate_window_starts(n, w_tokens, s_tokens)
            p_first = config.p_first if config.name in ("local_opt_balanced", "reco") else uniform_share(len(starts))
            window = sample_window(starts, w_tokens, s_tokens, p_first, rng)
            ce, trace = local_opt_loss(model, rows, conds, window)
            reco_t = reco_loss(trace)
            lam = config.lam if config.name == "reco" else 0.0
            loss = total_loss(ce, reco_t, lam)
            ce_val = ce.item()
            reco_val = reco_t.item()
            window_start = window.start

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        wall_ms = (time.perf_counter() - t0) * 1e3 if config.log_timing else 0.0
        log_rows.append(
            {
                "step": step,
                "strategy": config.name,
                "window_start": window_start,
                "ce": ce_val,
                "reco": reco_val,
                "total": loss.item(),
                "step_wall_ms": wall_ms,
            }
        )
    return TrainResult(log_rows, optimizer, rng)


TRAIN_LOG_COLUMNS = ["step", "strategy", "window_start", "ce", "reco", "total", "step_wall_ms"]
