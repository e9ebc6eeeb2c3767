"""Diagnostic measurements: per-position loss curves, consistency proxies
on decoded latents, hidden-state continuity, error-propagation traces,
and training throughput / activation-memory accounting.

Free-running per-position "loss" is self-surprisal: the negated
log-probability the model assigned to the token it itself emitted.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import Dataset, decode
from .inference import SamplingConfig, generate_batch
from .model import ModelConfig, TransformerLM
from .optim import AdamW
from .strategies import StrategyConfig, train


@dataclass
class LossCurve:
    values: np.ndarray  # per-token-position mean loss
    mode: str  # teacher_forced | free_running | first_frame_augmented
    block_size: int

    @property
    def block_markers(self) -> np.ndarray:
        return np.arange(0, len(self.values), self.block_size)

    def block_means(self) -> np.ndarray:
        return self.values.reshape(-1, self.block_size).mean(axis=1)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def teacher_forced_position_loss(model: TransformerLM, tokens: np.ndarray, conditions) -> np.ndarray:
    """Per-position mean negative log-likelihood of the true continuation."""
    tokens = np.atleast_2d(tokens)
    n = tokens.shape[1]
    with ad.no_grad():
        logits, _ = model.forward(tokens, conditions)
    lp = _log_softmax_np(logits.data[:, :n, : model.config.codebook_size])
    picked = np.take_along_axis(lp, tokens[..., None], axis=-1)[..., 0]
    return -picked.mean(axis=0)


def per_position_loss(
    model: TransformerLM,
    dataset: Dataset,
    mode: str,
    sampling: SamplingConfig | None = None,
    n_generations: int = 16,
    seed: int = 0,
) -> LossCurve:
    cfg = dataset.config
    if len(dataset.eval_idx) == 0:
        raise ValueError("empty evaluation set")
    if mode == "teacher_forced":
        rows = dataset.tokens[dataset.eval_idx]
        conds = dataset.conditions[dataset.eval_idx]
        values = teacher_forced_position_loss(model, rows, conds)
    elif mode == "free_running":
        sampling = sampling or SamplingConfig()
        rng = np.random.default_rng(seed)
        conds = dataset.conditions[dataset.eval_idx][
            np.arange(n_generations) % len(dataset.eval_idx)
        ]
        _, lps, _ = generate_batch(model, conds, cfg.tokens_per_sequence, sampling, rng)
        values = -lps.mean(axis=0)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return LossCurve(values=values, mode=mode, block_size=cfg.b_spatial)


def first_frame_augmented_eval(
    model: TransformerLM,
    dataset: Dataset,
    sampling: SamplingConfig | None = None,
    seed: int = 0,
) -> LossCurve:
    """Free-running curve with block 1 teacher-forced from ground truth."""
    cfg = dataset.config
    if len(dataset.eval_idx) == 0:
        raise ValueError("empty evaluation set")
    sampling = sampling or SamplingConfig()
    rng = np.random.default_rng(seed)
    rows = dataset.tokens[dataset.eval_idx]
    conds = dataset.conditions[dataset.eval_idx]
    b = cfg.b_spatial
    n = cfg.tokens_per_sequence

    block1 = rows[:, :b]
    ids_prefix = model.compose_ids(block1, conds)  # cond + ground-truth block 1
    with ad.no_grad():
        logits, _ = model.forward(block1, conds)
    lp = _log_softmax_np(logits.data[:, :b, : cfg.codebook_size])
    tf_part = -np.take_along_axis(lp, block1[..., None], axis=-1)[..., 0]

    cache = model.build_context_cache(ids_prefix[:, :-1])
    from .inference import _generate_from_cache  # shared incremental loop

    _, gen_lps = _generate_from_cache(model, cache, ids_prefix[:, -1:], n - b, sampling, rng)
    values = np.concatenate([tf_part.mean(axis=0), -gen_lps.mean(axis=0)])
    return LossCurve(values=values, mode="first_frame_augmented", block_size=b)


def augmented_generation(
    model: TransformerLM,
    condition,
    first_block: np.ndarray,
    total_tokens: int,
    sampling: SamplingConfig | None = None,
    rng: np.random.Generator | None = None,
    wgen: int | None = None,
    slide: int | None = None,
) -> np.ndarray:
    """Continue sequences whose first block is given as ground truth.

    `first_block` is (b,) with a scalar condition, or (G, b) with G
    conditions for a batched call; the result keeps the given block(s) in
    front of the generated remainder. With wgen/slide set, the continuation
    runs through the sliding re-feed scheme, so context older than
    wgen - slide tokens is discarded at each re-feed; otherwise the full
    history stays in context.
    """
    from .inference import _generate_from_cache

    first_block = np.asarray(first_block, dtype=np.int64)
    single = first_block.ndim == 1
    blocks = first_block[None, :] if single else first_block
    conds = np.atleast_1d(np.asarray(condition))
    G, b = blocks.shape
    if conds.shape != (G,):
        raise ValueError("need one condition per given block")
    if total_tokens <= b:
        raise ValueError("total_tokens must exceed the given block length")
    if (wgen is None) != (slide is None):
        raise ValueError("wgen and slide must be given together")
    sampling = sampling or SamplingConfig()
    cond_ids = model.condition_id(conds)[:, None]

    if wgen is None:
        ids = np.concatenate([cond_ids, blocks], axis=1)
        cache = model.build_context_cache(ids[:, :-1])
        gen, _ = _generate_from_cache(model, cache, ids[:, -1:], total_tokens - b, sampling, rng)
        out = np.concatenate([blocks, gen], axis=1)
        return out[0] if single else out

    if not 1 <= slide <= wgen or b > wgen:
        raise ValueError("need 1 <= slide <= wgen and a first block within wgen")
    toks = blocks.copy()
    while toks.shape[1] < total_tokens:
        if toks.shape[1] < wgen:
            carry = toks
            n_new = min(wgen - toks.shape[1], total_tokens - toks.shape[1])
        else:
            carry = toks[:, -(wgen - slide):]
            n_new = min(slide, total_tokens - toks.shape[1])
        if carry.shape[1]:
            prefix = np.concatenate([cond_ids, carry[:, :-1]], axis=1)
            last = carry[:, -1:]
        else:  # slide == wgen: each window restarts from the condition alone
            prefix = np.empty((G, 0), dtype=np.int64)
            last = cond_ids
        cache = model.build_context_cache(prefix)
        gen, _ = _generate_from_cache(model, cache, last, n_new, sampling, rng)
        toks = np.concatenate([toks, gen], axis=1)
    return toks[0] if single else toks


# -- consistency proxies -----------------------------------------------------

PSNR_INF = float("inf")


@dataclass
class ConsistencyReport:
    deltas: np.ndarray
    psnr: np.ndarray | None = None
    flow: np.ndarray | None = None


def psnr_proxy(
    gen_tokens: np.ndarray,
    ref_tokens: np.ndarray,
    codebook: np.ndarray,
    amplitude: float,
    n_blocks: int,
    b_spatial: int,
) -> ConsistencyReport:
    """PSNR analogue on decoded latents per source-target interval."""
    gen_tokens = np.asarray(gen_tokens)
    ref_tokens = np.asarray(ref_tokens)
    if gen_tokens.shape != ref_tokens.shape:
        raise ValueError("generated/reference layout mismatch")
    zg = decode(gen_tokens, codebook, n_blocks, b_spatial)
    zr = decode(ref_tokens, codebook, n_blocks, b_spatial)
    deltas = np.arange(1, n_blocks)
    psnr = np.empty(len(deltas))
    for i, dlt in enumerate(deltas):
        mse = float(((zg[dlt:] - zr[dlt:]) ** 2).mean())
        psnr[i] = PSNR_INF if mse == 0.0 else 10.0 * np.log10(amplitude**2 / mse)
    return ConsistencyReport(deltas=deltas, psnr=psnr)


def flow_proxy(tokens: np.ndarray, codebook: np.ndarray, n_blocks: int, b_spatial: int, delta: int) -> float:
    """Mean displacement of per-block mean decoded latents over interval delta."""
    if not 1 <= delta <= n_blocks - 1:
        raise ValueError("delta out of range")
    z = decode(np.asarray(tokens), codebook, n_blocks, b_spatial)
    zbar = z.mean(axis=1)  # (n_blocks, d)
    disp = np.linalg.norm(zbar[delta:] - zbar[:-delta], axis=-1)
    return float(disp.mean())


def flow_profile(tokens: np.ndarray, codebook: np.ndarray, n_blocks: int, b_spatial: int) -> ConsistencyReport:
    deltas = np.arange(1, n_blocks)
    flow = np.array([flow_proxy(tokens, codebook, n_blocks, b_spatial, int(d)) for d in deltas])
    return ConsistencyReport(deltas=deltas, flow=flow)


# -- hidden-state diagnostics ------------------------------------------------


def continuity_profile(trace: np.ndarray) -> np.ndarray:
    """Per-step squared distance between adjacent hidden states."""
    trace = np.asarray(trace)
    if trace.shape[0] < 2:
        raise ValueError("trace needs at least 2 states")
    d = trace[1:] - trace[:-1]
    return (d * d).sum(axis=-1)


def error_propagation_trace(
    model: TransformerLM,
    tokens: np.ndarray,
    condition: int,
    sampling: SamplingConfig | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Per-position hidden-state error between teacher-forced and free-running runs."""
    tokens = np.asarray(tokens)
    sampling = sampling or SamplingConfig(mode="greedy")
    rng = np.random.default_rng(seed)
    with ad.no_grad():
        _, h_true = model.forward(tokens[None, :], np.array([condition]))
    gen_toks, _, h_gen = generate_batch(model, np.array([condition]), len(tokens), sampling, rng)
    if h_gen.shape[1] != h_true.data.shape[1]:
        raise ValueError("length mismatch between runs")
    return np.linalg.norm(h_gen[0] - h_true.data[0], axis=-1)


# -- throughput & memory accounting ------------------------------------------


@dataclass
class BenchReport:
    strategy: str
    mean_step_ms: float
    std_step_ms: float
    activation_scalars: int
    activation_bytes: int
    param_count: int
    warmup: int
    reps: int
    extra: dict = field(default_factory=dict)


def bench_step(
    model_config: ModelConfig,
    dataset: Dataset,
    strategy_configs: list[StrategyConfig],
    warmup: int = 5,
    reps: int = 30,
    seed: int = 0,
) -> list[BenchReport]:
    """Wall-time and activation accounting per strategy, fresh model each."""
    if warmup < 5 or reps < 30:
        raise ValueError("need >= 5 warmup and >= 30 timed steps")
    bytes_per = np.dtype(model_config.np_dtype).itemsize
    reports = []
    for scfg in strategy_configs:
        model = TransformerLM(model_config, seed=seed)
        opt = AdamW(model.params, lr=scfg.lr, betas=(scfg.beta1, scfg.beta2), weight_decay=scfg.weight_decay)
        rng = np.random.default_rng(seed)
        train(model, dataset, scfg, warmup, optimizer=opt, rng=rng)
        ad.reset_graph_counter()
        times = np.empty(reps)
        peak = 0
        for r in range(reps):
            ad.reset_graph_counter()
            t0 = time.perf_counter()
            train(model, dataset, scfg, 1, optimizer=opt, rng=rng, start_step=warmup + r)
            times[r] = time.perf_counter() - t0
            peak = max(peak, ad.graph_scalars())
        if times.min() <= 0:
            raise RuntimeError("timer resolution insufficient for step timing")
        reports.append(
            BenchReport(
                strategy=scfg.name,
                mean_step_ms=float(times.mean() * 1e3),
                std_step_ms=float(times.std() * 1e3),
                activation_scalars=int(peak),
                activation_bytes=int(peak) * bytes_per,
                param_count=model.param_count(),
                warmup=warmup,
                reps=reps,
            )
        )
    return reports
