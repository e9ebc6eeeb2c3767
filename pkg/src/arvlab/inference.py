"""Generation procedures: full autoregressive decoding and the iterative
sliding-block scheme used by fewer-frames models.

Decoding is incremental over the model's no-grad context cache; cache
equivalence guarantees the emitted log-probabilities match a full
teacher-forced re-score of the generated tokens.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .model import ContextCache, TransformerLM

SAMPLING_MODES = ("greedy", "temperature", "topk")


@dataclass
class SamplingConfig:
    mode: str = "temperature"
    temperature: float = 1.0
    top_k: int = 0

    def __post_init__(self):
        if self.mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode != "greedy" and self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class GenerationRecord:
    condition: int
    tokens: np.ndarray  # (length,)
    logprobs: np.ndarray  # (length,) log-probability of each chosen token
    hidden: np.ndarray | None = None  # free-running final hidden trace (length+1, d)
    phases: list = field(default_factory=list)  # (context_len, n_generated) per iteration

    @property
    def n_iterations(self) -> int:
        return len(self.phases)


def sample_token(logits_row: np.ndarray, sampling: SamplingConfig, rng: np.random.Generator | None = None) -> int:
    """Pick one token from a logits row. Greedy breaks ties toward low index."""
    row = np.asarray(logits_row, dtype=np.float64)
    if not np.all(np.isfinite(row)):
        raise ValueError("non-finite logits")
    if sampling.mode == "greedy":
        return int(np.argmax(row))
    if rng is None:
        raise ValueError("stochastic sampling needs an rng")
    z = row / sampling.temperature
    if sampling.mode == "topk" and 0 < sampling.top_k < row.size:
        cutoff = np.sort(z)[-sampling.top_k]
        z = np.where(z >= cutoff, z, -np.inf)
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    u = rng.random()
    return int(np.searchsorted(np.cumsum(p), u, side="right").clip(0, row.size - 1))


def _log_softmax_row(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=-1, keepdims=True)
    s = rows - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _generate_from_cache(model, cache, last_ids, n_new, sampling, rng):
    """Emit n_new tokens per batch row, extending the cache as it goes."""
    vocab = model.config.codebook_size
    B = last_ids.shape[0]
    toks = np.empty((B, n_new), dtype=np.int64)
    lps = np.empty((B, n_new))
    with ad.no_grad():
        for t in range(n_new):
            logits, _, extras = model.forward_window(cache, last_ids, collect_kv=True)
            cache.extend(extras["new_ks"], extras["new_vs"])
            rows = logits.data[:, -1, :vocab]
            lp = _log_softmax_row(rows)
            for b in range(B):
                toks[b, t] = sample_token(rows[b], sampling, rng)
                lps[b, t] = lp[b, toks[b, t]]
            last_ids = toks[:, t : t + 1]
    return toks, lps


def generate_batch(model: TransformerLM, conditions: np.ndarray, length: int, sampling: SamplingConfig, rng=None):
    """Free-running generation for a batch of conditions; full history context."""
    if length < 1 or length > model.config.max_positions - 1:
        raise ValueError("requested length out of range")
    conditions = np.atleast_1d(np.asarray(conditions))
    B = conditions.shape[0]
    cond_ids = model.condition_id(conditions)[:, None]
    cache = ContextCache(length=0, batch=B)
    toks, lps = _generate_from_cache(model, cache, cond_ids, length, sampling, rng)
    with ad.no_grad():
        _, hidden = model.forward(toks, conditions)
    return toks, lps, hidden.data


def generate_full(model: TransformerLM, condition: int, length: int, sampling: SamplingConfig, rng=None) -> GenerationRecord:
    toks, lps, hidden = generate_batch(model, np.array([condition]), length, sampling, rng)
    return GenerationRecord(
        condition=int(condition),
        tokens=toks[0],
        logprobs=lps[0],
        hidden=hidden[0],
        phases=[(0, length)],
    )


def iterative_schedule(wgen: int, slide: int, total_length: int) -> list[tuple[int, int]]:
    """Phases of the sliding-block scheme as (carried context length, tokens generated)."""
    if slide > wgen or slide < 1:
        raise ValueError("need 1 <= slide <= wgen")
    phases = [(0, min(wgen, total_length))]
    generated = phases[0][1]
    while generated < total_length:
        n_new = min(slide, total_length - generated)
        phases.append((wgen - slide, n_new))
        generated += n_new
    return phases


def generate_iterative(
    model: TransformerLM,
    condition: int,
    wgen: int,
    slide: int,
    total_length: int,
    sampling: SamplingConfig,
    rng=None,
) -> GenerationRecord:
    """Sliding-block generation: after the first w_gen tokens, only the last
    (w_gen - slide) tokens are re-fed as context for each further batch."""
    if wgen > model.config.max_positions - 1:
        raise ValueError("wgen exceeds model context")
    phases = iterative_schedule(wgen, slide, total_length)
    cond_arr = np.array([condition])
    cond_ids = model.condition_id(cond_arr)[:, None]
    all_toks: list[np.ndarray] = []
    all_lps: list[np.ndarray] = []
    for carry_len, n_new in phases:
        if not all_toks:
            cache = ContextCache(length=0, batch=1)
            last_ids = cond_ids
        else:
            tail = np.concatenate(all_toks, axis=1)[:, -carry_len:] if carry_len > 0 else np.empty((1, 0), dtype=np.int64)
            prefix = np.concatenate([cond_ids, tail[:, :-1]], axis=1) if tail.shape[1] > 0 else cond_ids
            cache = model.build_context_cache(prefix)
            last_ids = tail[:, -1:] if tail.shape[1] > 0 else cond_ids
        toks, lps = _generate_from_cache(model, cache, last_ids, n_new, sampling, rng)
        all_toks.append(toks)
        all_lps.append(lps)
    tokens = np.concatenate(all_toks, axis=1)[0]
    logprobs = np.concatenate(all_lps, axis=1)[0]
    hidden = None
    if total_length <= model.config.max_positions - 1:
        with ad.no_grad():
            _, h = model.forward(tokens[None, :], cond_arr)
        hidden = h.data[0]
    return GenerationRecord(
        condition=int(condition),
        tokens=tokens,
        logprobs=logprobs,
        hidden=hidden,
        phases=phases,
    )


# -- generation dumps --------------------------------------------------------


def save_records(path, records: list[GenerationRecord], sampling: SamplingConfig, meta: dict | None = None) -> None:
    header = {"sampling": asdict(sampling), "format": 1}
    if meta:
        header.update(meta)
    payload = {
        "__meta__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        "conditions": np.array([r.condition for r in records], dtype=np.int64),
        "tokens": np.stack([r.tokens for r in records]),
        "logprobs": np.stack([r.logprobs for r in records]),
    }
    np.savez(path, **payload)


def load_records(path) -> tuple[dict, list[GenerationRecord]]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"].tobytes()).decode())
        records = [
            GenerationRecord(condition=int(c), tokens=t, logprobs=lp)
            for c, t, lp in zip(z["conditions"], z["tokens"], z["logprobs"])
        ]
    return meta, records
