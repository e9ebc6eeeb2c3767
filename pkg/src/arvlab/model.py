"""Minimal decoder-only causal transformer.

Exposes per-position final hidden states and a no-grad context cache so
training strategies can freeze everything before an optimization window.
The condition (class analogue) is a single prepended token drawn from a
separate slice of the embedding table; loss is never computed on it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_NEG = -1e30


@dataclass
class ModelConfig:
    codebook_size: int = 256
    condition_vocab: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_positions: int = 257
    dtype: str = "float64"
    # which hidden feeds the continuity loss: "final" is the post-norm state
    # consumed by the prediction head
    reco_layer: str = "final"

    @property
    def vocab_size(self) -> int:
        return self.codebook_size + self.condition_vocab

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class ContextCache:
    """Per-layer attention keys/values for a frozen prefix (no gradients)."""

    length: int
    batch: int
    ks: list[np.ndarray] = field(default_factory=list)  # each (B, H, T, dh)
    vs: list[np.ndarray] = field(default_factory=list)

    def extend(self, new_ks: list[np.ndarray], new_vs: list[np.ndarray]) -> None:
        if not self.ks:
            self.ks = [k.copy() for k in new_ks]
            self.vs = [v.copy() for v in new_vs]
        else:
            self.ks = [np.concatenate([a, b], axis=2) for a, b in zip(self.ks, new_ks)]
            self.vs = [np.concatenate([a, b], axis=2) for a, b in zip(self.vs, new_vs)]
        self.length += new_ks[0].shape[2]


class TransformerLM:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_params(seed)

    # -- parameters ----------------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data.astype(self.config.np_dtype), requires_grad=True)

    def _init_params(self, seed: int) -> None:
        cfg = self.config
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        std = 0.02
        self._add("tok_emb", rng.normal(0, std, (cfg.vocab_size, d)))
        self._add("pos_emb", rng.normal(0, std, (cfg.max_positions, d)))
        proj_std = std / np.sqrt(2 * cfg.n_layers)
        for layer in range(cfg.n_layers):
            p = f"layer{layer}"
            self._add(f"{p}/ln1_g", np.ones(d))
            self._add(f"{p}/ln1_b", np.zeros(d))
            self._add(f"{p}/wq", rng.normal(0, std, (d, d)))
            self._add(f"{p}/wk", rng.normal(0, std, (d, d)))
            self._add(f"{p}/wv", rng.normal(0, std, (d, d)))
            self._add(f"{p}/wo", rng.normal(0, proj_std, (d, d)))
            self._add(f"{p}/bo", np.zeros(d))
            self._add(f"{p}/ln2_g", np.ones(d))
            self._add(f"{p}/ln2_b", np.zeros(d))
            self._add(f"{p}/w1", rng.normal(0, std, (d, 4 * d)))
            self._add(f"{p}/b1", np.zeros(4 * d))
            self._add(f"{p}/w2", rng.normal(0, proj_std, (4 * d, d)))
            self._add(f"{p}/b2", np.zeros(d))
        self._add("lnf_g", np.ones(d))
        self._add("lnf_b", np.zeros(d))
        self._add("head_w", rng.normal(0, std, (d, cfg.vocab_size)))
        self._add("head_b", np.zeros(cfg.vocab_size))

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- id plumbing ---------------------------------------------------------

    def condition_id(self, condition) -> np.ndarray:
        cond = np.asarray(condition)
        if np.any(cond < 0) or np.any(cond >= self.config.condition_vocab):
            raise ValueError("condition out of vocabulary")
        return cond + self.config.codebook_size

    def compose_ids(self, tokens: np.ndarray, condition) -> np.ndarray:
        """Prepend the condition token; returns (B, N+1) input ids."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        cond = np.broadcast_to(np.atleast_1d(self.condition_id(condition)), (tokens.shape[0],))
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.codebook_size):
            raise ValueError("token out of codebook range")
        return np.concatenate([cond[:, None], tokens], axis=1)

    # -- forward -------------------------------------------------------------

    def _forward_ids(
        self,
        ids: np.ndarray,
        pos_offset: int = 0,
        cache: ContextCache | None = None,
        stopgrad_prefix: int = 0,
        collect_kv: bool = False,
        collect_hidden_layers: bool = False,
    ):
        """Core forward over raw input ids.

        With a cache, `ids` are the window inputs and attention also sees the
        cached keys/values as constants. `stopgrad_prefix` detaches the
        keys/values of the first positions inside a single full-graph forward
        (the oracle for the cached two-phase computation).
        """
        cfg = self.config
        B, T = ids.shape
        ctx_len = cache.length if cache is not None else 0
        if pos_offset + T > cfg.max_positions:
            raise ValueError("sequence exceeds max_positions")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError("input id out of vocabulary")
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        scale = 1.0 / np.sqrt(dh)

        x = ad.add(
            ad.embedding(self.params["tok_emb"], ids),
            ad.getitem(self.params["pos_emb"], slice(pos_offset, pos_offset + T)),
        )

        # additive causal mask over (window query, context+window key)
        q_pos = ctx_len + np.arange(T)
        k_pos = np.arange(ctx_len + T)
        mask = np.where(k_pos[None, :] <= q_pos[:, None], 0.0, MASK_NEG).astype(cfg.np_dtype)
        mask_t = Tensor(mask[None, None, :, :])

        new_ks, new_vs = [], []
        hidden_layers = []
        for layer in range(cfg.n_layers):
            p = f"layer{layer}"
            a = ad.layer_norm(x, self.params[f"{p}/ln1_g"], self.params[f"{p}/ln1_b"])
            q = ad.matmul(a, self.params[f"{p}/wq"])
            k = ad.matmul(a, self.params[f"{p}/wk"])
            v = ad.matmul(a, self.params[f"{p}/wv"])
            q = ad.transpose(ad.reshape(q, (B, T, H, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (B, T, H, dh)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (B, T, H, dh)), (0, 2, 1, 3))
            if collect_kv:
                new_ks.append(k.data.copy())
                new_vs.append(v.data.copy())
            if stopgrad_prefix > 0:
                s = stopgrad_prefix
                k = ad.concat([ad.stop_gradient(ad.getitem(k, (slice(None), slice(None), slice(0, s)))),
                               ad.getitem(k, (slice(None), slice(None), slice(s, T)))], axis=2)
                v = ad.concat([ad.stop_gradient(ad.getitem(v, (slice(None), slice(None), slice(0, s)))),
                               ad.getitem(v, (slice(None), slice(None), slice(s, T)))], axis=2)
            if cache is not None and cache.length > 0:
                k = ad.concat([Tensor(cache.ks[layer]), k], axis=2)
                v = ad.concat([Tensor(cache.vs[layer]), v], axis=2)
            scores = ad.add(ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale), mask_t)
            att = ad.softmax(scores, axis=-1)
            o = ad.matmul(att, v)
            o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (B, T, cfg.d_model))
            o = ad.add(ad.matmul(o, self.params[f"{p}/wo"]), self.params[f"{p}/bo"])
            x = ad.add(x, o)
            h = ad.layer_norm(x, self.params[f"{p}/ln2_g"], self.params[f"{p}/ln2_b"])
            m = ad.gelu(ad.add(ad.matmul(h, self.params[f"{p}/w1"]), self.params[f"{p}/b1"]))
            m = ad.add(ad.matmul(m, self.params[f"{p}/w2"]), self.params[f"{p}/b2"])
            x = ad.add(x, m)
            if collect_hidden_layers:
                hidden_layers.append(x)

        # h_t is the last block's residual output; the final norm belongs to
        # the prediction head and is not part of the exposed state
        hidden = x
        normed = ad.layer_norm(x, self.params["lnf_g"], self.params["lnf_b"])
        logits = ad.add(ad.matmul(normed, self.params["head_w"]), self.params["head_b"])
        extras = {"new_ks": new_ks, "new_vs": new_vs, "hidden_layers": hidden_layers}
        return logits, hidden, extras

    def forward(self, tokens, condition, stopgrad_prefix: int = 0):
        """Teacher-forced forward over condition + tokens.

        Returns logits (B, N+1, vocab) and final hidden states (B, N+1, d);
        row i predicts token i+1.
        """
        ids = self.compose_ids(tokens, condition)
        logits, hidden, _ = self._forward_ids(ids, stopgrad_prefix=stopgrad_prefix)
        return logits, hidden

    def build_context_cache(self, ids: np.ndarray) -> ContextCache:
        """Record per-layer K/V for a prefix of raw input ids, without grad."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        B, T = ids.shape
        cache = ContextCache(length=0, batch=B)
        if T == 0:
            cache.ks = []
            cache.vs = []
            return cache
        with ad.no_grad():
            _, _, extras = self._forward_ids(ids, pos_offset=0, collect_kv=True)
        cache.extend(extras["new_ks"], extras["new_vs"])
        return cache

    def forward_window(self, cache: ContextCache | None, window_ids: np.ndarray, collect_kv: bool = False):
        """Forward over window inputs on top of a frozen context cache."""
        window_ids = np.atleast_2d(np.asarray(window_ids, dtype=np.int64))
        offset = cache.length if cache is not None else 0
        logits, hidden, extras = self._forward_ids(
            window_ids, pos_offset=offset, cache=cache, collect_kv=collect_kv
        )
        return logits, hidden, extras

    # -- checkpointing -------------------------------------------------------

    def save_checkpoint(self, path, extra: dict | None = None) -> None:
        arrays = {f"param/{name}": p.data for name, p in self.params.items()}
        meta = {"config": asdict(self.config), "format": 1}
        payload = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
        payload.update(arrays)
        if extra:
            for k, v in extra.items():
                payload[f"extra/{k}"] = v
        np.savez(path, **payload)

    @classmethod
    def load_checkpoint(cls, path) -> tuple["TransformerLM", dict]:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"].tobytes()).decode())
            config = ModelConfig(**meta["config"])
            model = cls(config, seed=0)
            extra = {}
            for key in z.files:
                if key.startswith("param/"):
                    name = key[len("param/"):]
                    model.params[name].data = np.array(z[key])
                elif key.startswith("extra/"):
                    extra[key[len("extra/"):]] = np.array(z[key])
        return model, extra
