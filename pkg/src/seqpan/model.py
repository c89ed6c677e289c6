"""The SeqPAN grounding network and its ablation variants."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .labeling import NUM_LABELS, sample_gumbel
from .layers import (
    AdditivePool,
    ConvBlock,
    EmbeddingTable,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    PositionalEmbedding,
    TransformerBlock,
    _keep,
    _param,
)


class AttentionVariant(str, enum.Enum):
    SGPA = "SGPA"
    PA = "PA"
    SE_TRM = "SE_TRM"
    CO_TRM = "CO_TRM"


class MatchMode(str, enum.Enum):
    SQ_MATCH = "SQ_MATCH"
    FB_MATCH = "FB_MATCH"
    GUMBEL_NO_EMB = "GUMBEL_NO_EMB"
    NONE = "NONE"


@dataclass
class ModelConfig:
    d: int = 128
    heads: int = 8
    n_sgpa: int = 2
    tau: float = 0.3
    N: int = 64
    M: int = 20
    dropout: float = 0.2
    attention_variant: AttentionVariant = AttentionVariant.SGPA
    match_mode: MatchMode = MatchMode.SQ_MATCH
    eta: float = 0.25
    video_dim: int = 1024
    word_dim: int = 300
    conv_kernel: int = 7
    conv_depth: int = 2
    attn_dropout: bool = True       # dropout on attention weights
    sublayer_dropout: bool = True   # dropout on sublayer outputs
    share_cqa_weight: bool = True
    eval_sampling: bool = False     # Gumbel-Max sampling (not plain argmax) at eval
    relaxed_labels: bool = False    # forward the soft relaxation instead of hard labels

    def __post_init__(self):
        self.attention_variant = AttentionVariant(self.attention_variant)
        self.match_mode = MatchMode(self.match_mode)
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.n_sgpa < 1:
            raise ValueError("n_sgpa must be at least 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["attention_variant"] = self.attention_variant.value
        out["match_mode"] = self.match_mode.value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in names})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class Batch:
    """Padded model inputs plus ground truth.

    ``video`` is ``(B, d_v, N)``, ``query_ids`` ``(B, M)`` token ids into the
    model's frozen word table, masks are boolean ``(B, N)`` / ``(B, M)``.
    """

    video: np.ndarray
    video_mask: np.ndarray
    query_ids: np.ndarray
    query_mask: np.ndarray
    start: np.ndarray | None = None
    end: np.ndarray | None = None
    bieo: np.ndarray | None = None   # (B, N) class ids, padded frames O
    fb: np.ndarray | None = None     # (B, N) 1 on foreground
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.video.shape[0]

    def start_onehot(self, dtype) -> np.ndarray:
        return np.eye(self.video.shape[-1], dtype=dtype)[self.start]

    def end_onehot(self, dtype) -> np.ndarray:
        return np.eye(self.video.shape[-1], dtype=dtype)[self.end]


@dataclass
class ForwardTrace:
    v_enc: Tensor
    q_enc: Tensor
    v_bar: Tensor
    q_bar: Tensor
    h_bar: Tensor
    h_tilde: Tensor
    p_start: Tensor
    p_end: Tensor
    h_seq: Tensor | None = None
    s_seq: Tensor | None = None
    labels_soft: Tensor | None = None   # tau-relaxation (what the label loss sees)
    labels_hard: np.ndarray | None = None
    labels: Tensor | None = None         # what was actually added to H-bar
    noise: np.ndarray | None = None


# -- attention blocks --------------------------------------------------

class ParallelStream(Module):
    """One modality of a parallel-attention block.

    Self- and cross-attention run side by side on the same input, are
    fused by mutual sigmoid gates, then re-weighted by a self-guided head
    (or a plain FFN when ``guided`` is False).
    """

    def __init__(self, d, heads, rng, dropout, attn_dropout, guided=True, dtype=np.float64):
        self.self_attn = MultiHeadAttention(d, heads, rng, attn_dropout, dtype)
        self.cross_attn = MultiHeadAttention(d, heads, rng, attn_dropout, dtype)
        self.norm_self = LayerNorm(d, dtype)
        self.norm_cross = LayerNorm(d, dtype)
        self.gate_from_cross = Linear(d, d, rng, dtype=dtype)
        self.gate_from_self = Linear(d, d, rng, dtype=dtype)
        self.head = Linear(d, d, rng, dtype=dtype)
        self.head_gate = Linear(d, d, rng, dtype=dtype) if guided else None
        self.dropout = dropout

    def branches(self, x, mask, other, other_mask, rng=None):
        keep = _keep(mask)
        a_s = ag.dropout(self.self_attn(x, x, mask, rng), self.dropout, rng, self.training)
        a_c = ag.dropout(self.cross_attn(x, other, other_mask, rng), self.dropout, rng, self.training)
        v_s = ag.mask_fill(self.norm_self(x + a_s), keep)
        v_c = ag.mask_fill(self.norm_cross(x + a_c), keep)
        return v_s, v_c

    def gate(self, v_s: Tensor, v_c: Tensor) -> Tensor:
        return (ag.sigmoid(self.gate_from_cross(v_c)) * v_s
                + ag.sigmoid(self.gate_from_self(v_s)) * v_c)

    def guide(self, v_hat: Tensor) -> Tensor:
        out = self.head(v_hat)
        if self.head_gate is not None:
            out = ag.sigmoid(self.head_gate(v_hat)) * out
        return out

    def __call__(self, x, mask, other, other_mask, rng=None):
        v_s, v_c = self.branches(x, mask, other, other_mask, rng)
        out = self.guide(self.gate(v_s, v_c))
        return ag.mask_fill(ag.dropout(out, self.dropout, rng, self.training), _keep(mask))


class ParallelAttentionBlock(Module):
    def __init__(self, d, heads, rng, dropout, attn_dropout, guided=True, dtype=np.float64):
        self.video = ParallelStream(d, heads, rng, dropout, attn_dropout, guided, dtype)
        self.query = ParallelStream(d, heads, rng, dropout, attn_dropout, guided, dtype)

    def __call__(self, v, q, v_mask, q_mask, rng=None):
        return self.video(v, v_mask, q, q_mask, rng), self.query(q, q_mask, v, v_mask, rng)


class TransformerPairBlock(Module):
    """Standard transformer per modality: self-attention (Se-TRM) or co-attention (Co-TRM)."""

    def __init__(self, d, heads, rng, dropout, attn_dropout, cross=False, dtype=np.float64):
        self.video = TransformerBlock(d, heads, rng, dropout, attn_dropout, dtype)
        self.query = TransformerBlock(d, heads, rng, dropout, attn_dropout, dtype)
        self.cross = cross

    def __call__(self, v, q, v_mask, q_mask, rng=None):
        if self.cross:
            return self.video(v, v_mask, q, q_mask, rng), self.query(q, q_mask, v, v_mask, rng)
        return self.video(v, v_mask, rng=rng), self.query(q, q_mask, rng=rng)


def make_block(cfg: ModelConfig, rng, dtype) -> Module:
    drop = cfg.dropout if cfg.sublayer_dropout else 0.0
    attn_drop = cfg.dropout if cfg.attn_dropout else 0.0
    v = cfg.attention_variant
    if v in (AttentionVariant.SGPA, AttentionVariant.PA):
        return ParallelAttentionBlock(cfg.d, cfg.heads, rng, drop, attn_drop, v is AttentionVariant.SGPA, dtype)
    return TransformerPairBlock(cfg.d, cfg.heads, rng, drop, attn_drop, v is AttentionVariant.CO_TRM, dtype)


# -- video/query integration -------------------------------------------

class ContextQueryAttention(Module):
    """Bidirectional similarity fusion of two sequences, both directions."""

    def __init__(self, d, rng, shared=True, dtype=np.float64):
        bound = np.sqrt(6.0 / (2 * d))
        self.w = _param(rng.uniform(-bound, bound, (d, d)).astype(dtype))
        self.w_rev = None if shared else _param(rng.uniform(-bound, bound, (d, d)).astype(dtype))
        self.fuse_vq = Linear(4 * d, d, rng, dtype=dtype)
        self.fuse_qv = Linear(4 * d, d, rng, dtype=dtype)

    @staticmethod
    def attend(x, y, x_mask, y_mask, w, fuse):
        """Fuse ``y`` into ``x``; returns ``(B, d, N_x)``."""
        sim = ag.transpose(x) @ (w @ y)  # (B, Nx, Ny)
        s_row = ag.softmax(ag.mask_fill(sim, y_mask[:, None, :], ag.MASK_VALUE), axis=2)
        s_col = ag.softmax(ag.mask_fill(sim, x_mask[:, :, None], ag.MASK_VALUE), axis=1)
        a_xy = y @ ag.transpose(s_row)                       # (B, d, Nx)
        a_yx = x @ (s_col @ ag.transpose(s_row))             # (B, d, Nx)
        out = fuse(ag.concat([x, a_xy, x * a_xy, x * a_yx], axis=1))
        return ag.mask_fill(out, _keep(x_mask))

    def __call__(self, v, q, v_mask, q_mask):
        w_rev = self.w if self.w_rev is None else self.w_rev
        return (self.attend(v, q, v_mask, q_mask, self.w, self.fuse_vq),
                self.attend(q, v, q_mask, v_mask, w_rev, self.fuse_qv))


# -- full model --------------------------------------------------------

class SeqPAN(Module):
    def __init__(self, config: ModelConfig, word_vectors: np.ndarray, rng: np.random.Generator | int = 0,
                 dtype=np.float64):
        cfg = config
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        if word_vectors.shape[0] != cfg.word_dim:
            raise ValueError(f"word vectors have dim {word_vectors.shape[0]}, config says {cfg.word_dim}")
        self.config = cfg
        self.dtype = np.dtype(dtype)
        # frozen: a plain array, never a parameter
        self.word_vectors = np.asarray(word_vectors, dtype=dtype)
        d = cfg.d
        drop = cfg.dropout if cfg.sublayer_dropout else 0.0
        attn_drop = cfg.dropout if cfg.attn_dropout else 0.0

        self.ffn_v = Linear(cfg.video_dim, d, rng, dtype=dtype)
        self.ffn_q = Linear(cfg.word_dim, d, rng, dtype=dtype)
        self.pos = PositionalEmbedding(d, max(cfg.N, cfg.M), rng, dtype)
        self.conv = ConvBlock(d, rng, cfg.conv_kernel, cfg.conv_depth, dtype)
        self.blocks = [make_block(cfg, rng, dtype) for _ in range(cfg.n_sgpa)]
        self.cqa = ContextQueryAttention(d, rng, cfg.share_cqa_weight, dtype)
        self.pool = AdditivePool(d, rng, dtype)
        self.fuse = Linear(2 * d, d, rng, dtype=dtype)

        mm = cfg.match_mode
        self.seq_head = None
        self.label_emb = None
        if mm is MatchMode.FB_MATCH:
            self.seq_head = Linear(d, 2, rng, dtype=dtype)
        elif mm in (MatchMode.SQ_MATCH, MatchMode.GUMBEL_NO_EMB):
            self.seq_head = Linear(d, NUM_LABELS, rng, dtype=dtype)
        if mm is MatchMode.SQ_MATCH:
            self.label_emb = EmbeddingTable(d, NUM_LABELS, rng, dtype)

        self.trm_start = TransformerBlock(d, cfg.heads, rng, drop, attn_drop, dtype)
        self.trm_end = TransformerBlock(d, cfg.heads, rng, drop, attn_drop, dtype)
        self.score_start = Linear(2 * d, 1, rng, dtype=dtype)
        self.score_end = Linear(2 * d, 1, rng, dtype=dtype)
        self.drop = drop

    # -- stages --------------------------------------------------------
    def embed_query(self, query_ids: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(self.word_vectors[:, query_ids].transpose(1, 0, 2))

    def encode(self, video, query, v_mask, q_mask):
        cfg = self.config
        if video.shape[1] != cfg.video_dim:
            raise ValueError(f"video features have dim {video.shape[1]}, config says {cfg.video_dim}")
        if query.shape[1] != cfg.word_dim:
            raise ValueError(f"query features have dim {query.shape[1]}, config says {cfg.word_dim}")
        v = ag.mask_fill(self.pos(self.ffn_v(ag.as_tensor(video))), _keep(v_mask))
        q = ag.mask_fill(self.pos(self.ffn_q(ag.as_tensor(query))), _keep(q_mask))
        return self.conv(v, v_mask), self.conv(q, q_mask)

    def attend(self, v, q, v_mask, q_mask, rng=None):
        for block in self.blocks:
            v, q = block(v, q, v_mask, q_mask, rng)
        return v, q

    def integrate(self, v_bar, q_bar, v_mask, q_mask):
        v_q, q_v = self.cqa(v_bar, q_bar, v_mask, q_mask)
        sent = self.pool(q_v, q_mask)  # (B, d, 1)
        n = v_q.shape[-1]
        spread = sent @ ag.Tensor(np.ones((1, n), dtype=self.dtype))
        h = self.fuse(ag.concat([v_q, spread], axis=1))
        return ag.mask_fill(h, _keep(v_mask))

    def seq_match(self, h_bar, v_mask, rng=None, noise=None):
        """Region-label head; returns (h_tilde, extras for the trace)."""
        cfg = self.config
        mm = cfg.match_mode
        if mm is MatchMode.NONE:
            return h_bar, {}
        h_seq = self.seq_head(h_bar)  # (B, C, N)
        s_seq = ag.softmax(h_seq, axis=1)
        extras = {"h_seq": h_seq, "s_seq": s_seq}
        if mm is MatchMode.FB_MATCH:
            extras["labels_soft"] = s_seq
            extras["labels_hard"] = ag.one_hot(s_seq.data.argmax(axis=1), 2, axis=1, dtype=self.dtype)
            return h_bar, extras

        if noise is None and (self.training or cfg.eval_sampling):
            noise = sample_gumbel(h_seq.shape, rng if rng is not None else np.random.default_rng(),
                                  self.dtype)
        perturbed = h_seq if noise is None else h_seq + ag.Tensor(np.asarray(noise, dtype=self.dtype))
        soft = ag.softmax(ag.scale(perturbed, 1.0 / cfg.tau), axis=1)
        hard = ag.one_hot(perturbed.data.argmax(axis=1), NUM_LABELS, axis=1, dtype=self.dtype)
        labels = soft if cfg.relaxed_labels else ag.straight_through(hard, soft)
        extras.update(labels_soft=soft, labels_hard=hard, labels=labels, noise=noise)
        if mm is MatchMode.GUMBEL_NO_EMB:
            return h_bar, extras
        h_tilde = ag.mask_fill(self.label_emb.table @ labels + h_bar, _keep(v_mask))
        return h_tilde, extras

    def localize(self, h_tilde, v_mask, rng=None):
        keep = np.asarray(v_mask, dtype=bool)
        h_s = self.trm_start(h_tilde, v_mask, rng=rng)
        h_e = self.trm_end(h_s, v_mask, rng=rng)
        probs = []
        for h, head in ((h_s, self.score_start), (h_e, self.score_end)):
            score = head(ag.concat([h, h_tilde], axis=1))
            score = ag.mask_fill(score.reshape(score.shape[0], score.shape[-1]), keep, ag.MASK_VALUE)
            probs.append(ag.softmax(score, axis=-1))
        return probs[0], probs[1]

    def forward(self, batch: Batch, rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None) -> ForwardTrace:
        v_mask = np.asarray(batch.video_mask, dtype=bool)
        q_mask = np.asarray(batch.query_mask, dtype=bool)
        video = np.asarray(batch.video, dtype=self.dtype)
        query = self.embed_query(batch.query_ids)
        v_enc, q_enc = self.encode(video, query, v_mask, q_mask)
        v_bar, q_bar = self.attend(v_enc, q_enc, v_mask, q_mask, rng)
        h_bar = self.integrate(v_bar, q_bar, v_mask, q_mask)
        h_tilde, extras = self.seq_match(h_bar, v_mask, rng, noise)
        p_s, p_e = self.localize(h_tilde, v_mask, rng)
        return ForwardTrace(v_enc, q_enc, v_bar, q_bar, h_bar, h_tilde, p_s, p_e, **extras)

    __call__ = forward

    # -- persistence -----------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out["buffer.word_vectors"] = self.word_vectors
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=self.dtype)
        if "buffer.word_vectors" in state:
            self.word_vectors = np.asarray(state["buffer.word_vectors"], dtype=self.dtype)
