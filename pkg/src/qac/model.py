"""Intention-aware click ranker over (prefix, candidate, history) triples.

One scoring pass builds, per example:
  q   candidate encoding (token transformer, masked max pool)
  p   prefix encoding (char-CNN feature tokens, or token-level for ablations)
  h_v per-view history summary: element encodings t_i, reformulation deltas
      s_i = t_i - t_{i-1}, fused r_i, a context transformer giving c_i, and a
      candidate-conditioned attention pool (raw inner products, no scaling)
  e   evolution features comparing the view mixture h~ against p:
      ReLU((h~-p) || (h~*p) || cosine), cosine forced to 0 for near-zero norms
and feeds h_1..h_N, p, e, q, and a popularity scalar through a softmax MLP.

Variants toggle pieces for ablation:
  base            token prefix, histories mean-pooled, no evolution
  hist            + reformulation/attention history encoding
  hist-evolve     + evolution features
  hist-charprefix hist + character-CNN prefix (no evolution)
  full            everything
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tz
from .corpus import ConfigError
from .nn import (
    CharConvBank,
    Linear,
    ParamStore,
    TransformerEncoder,
    load_checkpoint,
    no_grad,
    save_checkpoint,
)
from .tensor import Tensor
from .text import PAD_ID, Vocab

VARIANTS = ("base", "hist", "hist-evolve", "hist-charprefix", "full")
COSINE_EPS = 1e-12
LOG_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    n_tokens: int
    n_chars: int
    variant: str = "full"
    token_dim: int = 64
    char_dim: int = 32
    hidden: int = 128
    char_widths: tuple[int, ...] = (1, 2, 3)
    char_counts: tuple[int, ...] = (50, 100, 100)
    history_blocks: int = 6
    history_heads: int = 8
    encoder_blocks: int = 4
    encoder_heads: int = 4
    mlp: tuple[int, ...] = (256, 128, 64)
    view_caps: tuple[int, ...] = (10, 15)
    view_pads: tuple[int, ...] = (8, 15)
    query_pad: int = 8
    prefix_max: int = 20
    ffn_mult: int = 4
    l2: float = 1e-6

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.hidden % self.encoder_heads or self.hidden % self.history_heads:
            raise ConfigError("hidden size must be divisible by head counts")
        if len(self.char_widths) != len(self.char_counts):
            raise ConfigError("char_widths and char_counts must align")
        if len(self.view_caps) != len(self.view_pads):
            raise ConfigError("view_caps and view_pads must align")
        for name in ("token_dim", "char_dim", "hidden", "query_pad", "prefix_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def n_views(self) -> int:
        return len(self.view_caps)

    def uses_char_prefix(self) -> bool:
        return self.variant in ("hist-charprefix", "full")

    def uses_history_attention(self) -> bool:
        return self.variant != "base"

    def uses_evolution(self) -> bool:
        return self.variant in ("hist-evolve", "full")

    def mlp_input_dim(self) -> int:
        dim = self.hidden * self.n_views + self.hidden * 2 + 1
        if self.uses_evolution():
            dim += 2 * self.hidden + 1
        return dim


def config_from_dict(d: dict) -> ModelConfig:
    coerced = dict(d)
    for key in ("char_widths", "char_counts", "mlp", "view_caps", "view_pads"):
        coerced[key] = tuple(coerced[key])
    return ModelConfig(**coerced)


@dataclass
class Batch:
    """Numpy-side model input; produced by the batching layer."""

    cand_tokens: np.ndarray  # (B, query_pad) int
    prefix_chars: np.ndarray  # (B, prefix_max) int
    prefix_lens: np.ndarray  # (B,) int, >= 1
    prefix_tokens: np.ndarray  # (B, query_pad) int
    history: list[np.ndarray]  # per view: (B, L_v, view_pad) int
    hist_counts: list[np.ndarray]  # per view: (B,) int
    popularity: np.ndarray  # (B,) float
    labels: np.ndarray  # (B,) int in {0,1}
    groups: np.ndarray  # (B,) int

    def __len__(self) -> int:
        return self.cand_tokens.shape[0]


@dataclass
class IntentVectors:
    """Intermediate vectors of one scoring pass, for inspection and tests."""

    q: np.ndarray
    p: np.ndarray
    view_t: list[np.ndarray]
    view_s: list[np.ndarray]
    view_r: list[np.ndarray]
    view_c: list[np.ndarray]
    view_alpha: list[np.ndarray]  # candidate-conditioned history attention
    view_h: list[np.ndarray]
    alpha_e: np.ndarray | None  # cross-view mixture weights
    h_mix: np.ndarray | None
    cosine: np.ndarray | None
    e: np.ndarray | None
    prob: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def empty(cls) -> "IntentVectors":
        return cls(
            q=np.zeros(0), p=np.zeros(0), view_t=[], view_s=[], view_r=[],
            view_c=[], view_alpha=[], view_h=[], alpha_e=None, h_mix=None,
            cosine=None, e=None,
        )


class _TokenSetEncoder:
    """Embedding projection + transformer + masked max pool, shared shape."""

    def __init__(self, store, name, cfg: ModelConfig, blocks, heads, max_len):
        self.proj = Linear(store, f"{name}.proj", cfg.token_dim, cfg.hidden)
        self.enc = TransformerEncoder(
            store, f"{name}.enc", cfg.hidden, blocks, heads, max_len, cfg.ffn_mult
        )

    def __call__(self, emb: Tensor, mask: np.ndarray) -> Tensor:
        x = self.enc(self.proj(emb), mask)
        return tz.masked_max(x, mask[:, :, None], axis=1)


class IntentModel:
    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.store = store if store is not None else ParamStore(seed)
        s = self.store
        self.tok_emb = s.param("tok_emb", (cfg.n_tokens, cfg.token_dim), "embedding")
        self.cand_enc = _TokenSetEncoder(
            s, "cand", cfg, cfg.encoder_blocks, cfg.encoder_heads, cfg.query_pad
        )
        if cfg.uses_char_prefix():
            self.char_emb = s.param("char_emb", (cfg.n_chars, cfg.char_dim), "embedding")
            self.char_bank = CharConvBank(
                s, "charconv", cfg.char_dim, cfg.char_widths, cfg.char_counts
            )
            self.char_proj = [
                Linear(s, f"prefchar.proj{w}", c, cfg.hidden)
                for w, c in zip(cfg.char_widths, cfg.char_counts)
            ]
            self.prefix_enc = TransformerEncoder(
                s,
                "prefchar.enc",
                cfg.hidden,
                cfg.encoder_blocks,
                cfg.encoder_heads,
                len(cfg.char_widths),
                cfg.ffn_mult,
            )
        else:
            self.prefix_tok_enc = _TokenSetEncoder(
                s, "pref", cfg, cfg.encoder_blocks, cfg.encoder_heads, cfg.query_pad
            )
        self.view_elem = []
        self.view_wts = []
        self.view_ctx = []
        self.view_wc = []
        for v, (cap, pad) in enumerate(zip(cfg.view_caps, cfg.view_pads)):
            self.view_elem.append(
                _TokenSetEncoder(
                    s, f"view{v}.elem", cfg, cfg.encoder_blocks, cfg.encoder_heads, pad
                )
            )
            if cfg.uses_history_attention():
                self.view_wts.append(Linear(s, f"view{v}.wts", cfg.hidden * 2, cfg.hidden))
                self.view_ctx.append(
                    TransformerEncoder(
                        s,
                        f"view{v}.ctx",
                        cfg.hidden,
                        cfg.history_blocks,
                        cfg.history_heads,
                        cap,
                        cfg.ffn_mult,
                    )
                )
                self.view_wc.append(Linear(s, f"view{v}.wc", cfg.hidden, cfg.hidden))
        dims = [cfg.mlp_input_dim(), *cfg.mlp, 2]
        self.mlp = [
            Linear(s, f"mlp.l{i}", d_in, d_out)
            for i, (d_in, d_out) in enumerate(zip(dims, dims[1:]))
        ]

    # -- encoders -----------------------------------------------------------

    def encode_candidate(self, ids: np.ndarray) -> Tensor:
        """(B, query_pad) token ids -> (B, hidden); all-PAD rows are invalid."""
        if not np.all((ids != PAD_ID).any(axis=1)):
            raise ValueError("candidate token list must be nonempty")
        mask = ids != PAD_ID
        return self.cand_enc(tz.embedding(self.tok_emb, ids), mask)

    def encode_prefix(self, batch: Batch) -> Tensor:
        if not self.cfg.uses_char_prefix():
            ids = batch.prefix_tokens
            mask = ids != PAD_ID
            if not mask.any(axis=1).all():
                raise ValueError("prefix must be nonempty")
            return self.prefix_tok_enc(tz.embedding(self.tok_emb, ids), mask)
        if np.any(batch.prefix_lens < 1):
            raise ValueError("prefix must be nonempty")
        emb = tz.embedding(self.char_emb, batch.prefix_chars)
        feats = self.char_bank(emb, batch.prefix_lens)
        tokens = [
            tz.reshape(proj(f), (len(batch), 1, self.cfg.hidden))
            for proj, f in zip(self.char_proj, feats)
        ]
        seq = tz.concat(tokens, axis=1)  # one feature token per kernel width
        mask = np.ones((len(batch), len(self.cfg.char_widths)), dtype=bool)
        out = self.prefix_enc(seq, mask)
        return tz.masked_max(out, mask[:, :, None], axis=1)

    def _encode_elements(self, view: int, ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """(B, L, pad) -> element vectors (B, L, hidden) and mask (B, L)."""
        b, l, pad = ids.shape
        if l == 0:
            return Tensor(np.zeros((b, 0, self.cfg.hidden))), np.zeros((b, 0), dtype=bool)
        flat = ids.reshape(b * l, pad)
        mask = flat != PAD_ID
        emb = tz.embedding(self.tok_emb, flat)
        t = self.view_elem[view](emb, mask)  # all-PAD rows pool to zero
        return tz.reshape(t, (b, l, self.cfg.hidden)), mask.any(axis=1).reshape(b, l)

    def encode_history_view(
        self, view: int, ids: np.ndarray, q: Tensor, vectors: IntentVectors | None
    ) -> tuple[Tensor, np.ndarray]:
        """Returns (h_view (B, hidden), view-nonempty mask (B,))."""
        t, mask = self._encode_elements(view, ids)
        nonempty = mask.any(axis=1)
        b, l, hidden = t.shape
        if l == 0:
            h = Tensor(np.zeros((b, hidden)))
            if vectors is not None:
                z = np.zeros((b, 0, hidden))
                vectors.view_t.append(z)
                vectors.view_s.append(z)
                vectors.view_r.append(z)
                vectors.view_c.append(z)
                vectors.view_alpha.append(np.zeros((b, 0)))
                vectors.view_h.append(h.data)
            return h, nonempty
        if not self.cfg.uses_history_attention():
            h = tz.masked_mean(t, mask[:, :, None], axis=1)
            if vectors is not None:
                vectors.view_t.append(t.data)
                vectors.view_s.append(np.zeros_like(t.data))
                vectors.view_r.append(np.zeros_like(t.data))
                vectors.view_c.append(np.zeros_like(t.data))
                alpha = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1)
                vectors.view_alpha.append(alpha)
                vectors.view_h.append(h.data)
            return h, nonempty
        if l > 1:
            diff = tz.sub(t[:, 1:, :], t[:, :-1, :])
            s = tz.concat([Tensor(np.zeros((b, 1, hidden))), diff], axis=1)
        else:
            s = Tensor(np.zeros((b, l, hidden)))  # first element has no delta
        r = tz.relu(self.view_wts[view](tz.concat([t, s], axis=-1)))
        c = self.view_ctx[view](r, mask)
        f = tz.tanh(self.view_wc[view](c))
        logits = tz.sum_(tz.mul(f, tz.reshape(q, (b, 1, hidden))), axis=-1)
        alpha = tz.softmax_masked(logits, mask)  # empty views get all-zero rows
        h = tz.sum_(tz.mul(tz.reshape(alpha, (b, l, 1)), c), axis=1)
        if vectors is not None:
            vectors.view_t.append(t.data)
            vectors.view_s.append(s.data)
            vectors.view_r.append(r.data)
            vectors.view_c.append(c.data)
            vectors.view_alpha.append(alpha.data)
            vectors.view_h.append(h.data)
        return h, nonempty

    def evolve(
        self, hs: list[Tensor], view_mask: np.ndarray, p: Tensor
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Mix views against the prefix; returns (h_mix, cosine, alpha_e)."""
        b, hidden = p.shape
        stacked = tz.concat(
            [tz.reshape(h, (b, 1, hidden)) for h in hs], axis=1
        )  # (B, N, hidden)
        logits = tz.sum_(tz.mul(stacked, tz.reshape(p, (b, 1, hidden))), axis=-1)
        alpha = tz.softmax_masked(logits, view_mask)
        h_mix = tz.sum_(tz.mul(tz.reshape(alpha, (b, self.cfg.n_views, 1)), stacked), axis=1)
        dot = tz.sum_(tz.mul(h_mix, p), axis=-1)
        nh = tz.sqrt(tz.add(tz.sum_(tz.square(h_mix), axis=-1), Tensor(1e-24)))
        np_ = tz.sqrt(tz.add(tz.sum_(tz.square(p), axis=-1), Tensor(1e-24)))
        denom = tz.clamp_min(tz.mul(nh, np_), COSINE_EPS)
        defined = ((nh.data >= COSINE_EPS) & (np_.data >= COSINE_EPS)).astype(float)
        cos = tz.mul(tz.div(dot, denom), Tensor(defined))
        cos = tz.clamp_max(tz.clamp_min(cos, -1.0), 1.0)
        return h_mix, cos, alpha

    def forward(
        self, batch: Batch, collect: bool = False
    ) -> tuple[Tensor, IntentVectors | None]:
        """Click probability for every example; optionally keep intermediates."""
        vectors = IntentVectors.empty() if collect else None
        b = len(batch)
        q = self.encode_candidate(batch.cand_tokens)
        p = self.encode_prefix(batch)
        hs: list[Tensor] = []
        view_mask = np.zeros((b, self.cfg.n_views), dtype=bool)
        for v in range(self.cfg.n_views):
            h, nonempty = self.encode_history_view(v, batch.history[v], q, vectors)
            hs.append(h)
            view_mask[:, v] = nonempty
        parts = list(hs) + [p]
        cos_data = None
        if self.cfg.uses_evolution():
            h_mix, cos, alpha_e = self.evolve(hs, view_mask, p)
            e = tz.relu(
                tz.concat(
                    [tz.sub(h_mix, p), tz.mul(h_mix, p), tz.reshape(cos, (b, 1))],
                    axis=-1,
                )
            )
            parts.append(e)
            cos_data = cos.data
            if vectors is not None:
                vectors.alpha_e = alpha_e.data
                vectors.h_mix = h_mix.data
                vectors.cosine = cos.data
                vectors.e = e.data
        parts.append(q)
        parts.append(Tensor(batch.popularity.reshape(b, 1)))
        x = tz.concat(parts, axis=-1)
        for layer in self.mlp[:-1]:
            x = tz.relu(layer(x))
        logits = self.mlp[-1](x)
        probs2 = tz.softmax_masked(logits)
        prob = probs2[:, 1]
        if vectors is not None:
            vectors.q = q.data
            vectors.p = p.data
            vectors.prob = prob.data
        return prob, vectors

    def loss(self, batch: Batch) -> Tensor:
        """Mean binary NLL (logs clamped at 1e-12) plus the L2 penalty value.

        The penalty enters as a constant: its gradient is applied inside the
        optimizer step, so backward through this tensor yields pure data
        gradients. Finite-difference checks should therefore run with l2=0.
        """
        prob, _ = self.forward(batch)
        y = batch.labels.astype(float)
        pos = tz.log(tz.clamp_min(prob, LOG_EPS))
        neg = tz.log(tz.clamp_min(tz.sub(Tensor(1.0), prob), LOG_EPS))
        data = tz.mul(
            tz.mean_(tz.add(tz.mul(Tensor(y), pos), tz.mul(Tensor(1.0 - y), neg))),
            Tensor(-1.0),
        )
        if self.cfg.l2:
            return tz.add(data, Tensor(self.cfg.l2 * self.store.l2_norm_sq()))
        return data

    def predict_probs(self, batch: Batch) -> np.ndarray:
        with no_grad(self.store):
            prob, _ = self.forward(batch)
        return prob.data

    def inspect(self, batch: Batch) -> IntentVectors:
        with no_grad(self.store):
            _, vectors = self.forward(batch, collect=True)
        return vectors


def build_variant(
    variant: str, n_tokens: int, n_chars: int, seed: int = 0, **overrides
) -> IntentModel:
    cfg = ModelConfig(n_tokens=n_tokens, n_chars=n_chars, variant=variant, **overrides)
    return IntentModel(cfg, seed=seed)


def save_model(path: str, model: IntentModel, vocab: Vocab) -> None:
    save_checkpoint(path, model.store, {"model": asdict(model.cfg), "vocab": vocab.to_dict()})


def load_model(path: str) -> tuple[IntentModel, Vocab]:
    config, arrays = load_checkpoint(path)
    cfg = config_from_dict(config["model"])
    model = IntentModel(cfg)
    model.store.load_arrays(arrays)
    return model, Vocab.from_dict(config["vocab"])
