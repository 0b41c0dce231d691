"""Two-stream co-attention transformer with a joint classification/regression head.

Visual and text streams are embedded by summing per-token components, then
passed through ``n_blocks`` co-attention blocks. In each block the visual
stream queries the text keys/values and vice versa, and each stream then
runs a self-attention encoder of its own. Row 0 of each final stream (the
global visual token and [CLS]) feeds two MLP heads: an alignment classifier
on their elementwise product and a regressor on their concatenation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .featurize import D_DET, MAX_TEXT, N_TEXT_CLASSES, N_VISUAL_CLASSES, AblationFlags, Batch
from .tensor import Tensor

STREAM_ENCODERS = ("co_v", "co_t", "self_v", "self_t")


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_blocks: int = 2
    n_heads: int = 4
    d_ff: int = 0  # 0 means 4 * d_model
    d_det: int = D_DET
    n_visual_classes: int = N_VISUAL_CLASSES
    n_text_classes: int = N_TEXT_CLASSES
    max_positions: int = MAX_TEXT
    lambda_cls: float = 1.0
    lambda_reg: float = 1.0
    embed_std: float = 1.0
    ablation: AblationFlags = field(default_factory=AblationFlags)
    two_pipelines: bool = False

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags.from_dict(self.ablation)
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ModelConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.lambda_cls < 0 or self.lambda_reg < 0:
            raise ModelConfigError("loss weights must be non-negative")
        if self.n_blocks < 0 or self.vocab_size < 1:
            raise ModelConfigError("n_blocks must be >= 0 and vocab_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = self.ablation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ModelConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


class PooledPair(NamedTuple):
    h_v0: Tensor  # (B, d)
    h_w0: Tensor  # (B, d)


class HeadOutputs(NamedTuple):
    align_logit: Tensor  # (B,)
    reg_value: Tensor  # (B,)

    @property
    def align_score(self) -> np.ndarray:
        return T._sigmoid(self.align_logit.data)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff
    p: dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out):
        p[f"{name}.w"] = _xavier(rng, fan_in, fan_out)
        p[f"{name}.b"] = np.zeros(fan_out)

    def emb(name, n):
        p[name] = rng.normal(0.0, cfg.embed_std, size=(n, d))

    linear("vis.bbox", 4, d)
    emb("vis.cls", cfg.n_visual_classes)
    linear("vis.det", cfg.d_det, d)
    emb("txt.word", cfg.vocab_size)
    emb("txt.pos", cfg.max_positions)
    linear("txt.bbox", 4, d)
    emb("txt.cls", cfg.n_text_classes)
    for i in range(cfg.n_blocks):
        for enc in STREAM_ENCODERS:
            pre = f"blk{i}.{enc}"
            for proj in ("q", "k", "v", "o"):
                linear(f"{pre}.{proj}", d, d)
            linear(f"{pre}.ff1", d, f)
            linear(f"{pre}.ff2", f, d)
            for ln in ("ln1", "ln2"):
                p[f"{pre}.{ln}.g"] = np.ones(d)
                p[f"{pre}.{ln}.b"] = np.zeros(d)
    linear("head_cls.l1", d, d)
    linear("head_cls.l2", d, 1)
    linear("head_reg.l1", 2 * d, d)
    linear("head_reg.l2", d, 1)
    return {k: T.parameter(v) for k, v in p.items()}


class CRCT:
    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.record_attention = False
        self.attention_maps: list[tuple[str, np.ndarray]] = []

    # ------------------------------------------------------------ helpers

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return T.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def active_params(self) -> dict[str, Tensor]:
        """Parameters that take part in the forward pass under the configured ablation."""
        ab = self.cfg.ablation
        skip = set()
        if ab.drop_visual_class_emb:
            skip.add("vis.cls")
        if ab.visual_bbox_only:
            skip |= {"vis.det.w", "vis.det.b"}
        if ab.drop_text_class_emb:
            skip.add("txt.cls")
        return {k: v for k, v in self.params.items() if k not in skip}

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    # ------------------------------------------------------------ embeddings

    def embed_visual(self, batch: Batch) -> Tensor:
        ab = self.cfg.ablation
        if batch.vis_class.size and batch.vis_class.max() >= self.cfg.n_visual_classes:
            raise IndexError(f"visual class id {batch.vis_class.max()} out of range")
        x = self._lin(Tensor(batch.vis_bbox), "vis.bbox")
        if not ab.drop_visual_class_emb:
            x = x + T.embedding(self.params["vis.cls"], batch.vis_class)
        if not ab.visual_bbox_only:
            x = x + self._lin(Tensor(batch.vis_feat), "vis.det")
        return x

    def embed_text(self, batch: Batch) -> Tensor:
        ab = self.cfg.ablation
        if batch.txt_class.size and batch.txt_class.max() >= self.cfg.n_text_classes:
            raise IndexError(f"text class id {batch.txt_class.max()} out of range")
        x = T.embedding(self.params["txt.word"], batch.txt_ids)
        x = x + T.embedding(self.params["txt.pos"], batch.txt_pos)
        x = x + self._lin(Tensor(batch.txt_bbox), "txt.bbox")
        if not ab.drop_text_class_emb:
            x = x + T.embedding(self.params["txt.cls"], batch.txt_class)
        return x

    # ------------------------------------------------------------ transformer

    def attention(self, xq: Tensor, xkv: Tensor, kv_mask: np.ndarray, name: str) -> Tensor:
        B, nq, d = xq.shape
        nk = xkv.shape[1]
        if kv_mask.shape != (B, nk):
            raise T.ShapeError(f"{name}: key mask {kv_mask.shape} does not match keys {(B, nk)}")
        h = self.cfg.n_heads
        dh = d // h

        def heads(x, n):
            return x.reshape(B, n, h, dh).transpose(0, 2, 1, 3)

        q = heads(self._lin(xq, f"{name}.q"), nq)
        k = heads(self._lin(xkv, f"{name}.k"), nk)
        v = heads(self._lin(xkv, f"{name}.v"), nk)
        scores = (q @ k.transpose()) / math.sqrt(dh)
        scores = T.masked_fill(scores, ~kv_mask[:, None, None, :], T.MASK_VALUE)
        probs = T.softmax(scores, axis=-1)
        if self.record_attention:
            self.attention_maps.append((name, probs.data.copy()))
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, nq, d)
        return self._lin(ctx, f"{name}.o")

    def encoder(self, xq: Tensor, xkv: Tensor, kv_mask: np.ndarray, name: str) -> Tensor:
        p = self.params
        x = T.layer_norm(xq + self.attention(xq, xkv, kv_mask, name), p[f"{name}.ln1.g"], p[f"{name}.ln1.b"])
        ff = self._lin(T.gelu(self._lin(x, f"{name}.ff1")), f"{name}.ff2")
        return T.layer_norm(x + ff, p[f"{name}.ln2.g"], p[f"{name}.ln2.b"])

    def co_attention_block(
        self, h_v: Tensor, h_t: Tensor, v_mask: np.ndarray, t_mask: np.ndarray, i: int
    ) -> tuple[Tensor, Tensor]:
        if h_v.shape[:2] != v_mask.shape or h_t.shape[:2] != t_mask.shape:
            raise T.ShapeError(f"mask shapes {v_mask.shape}/{t_mask.shape} vs streams {h_v.shape}/{h_t.shape}")
        # keys/values exchanged: each stream keeps its own queries and rows
        z_v = self.encoder(h_v, h_t, t_mask, f"blk{i}.co_v")
        z_t = self.encoder(h_t, h_v, v_mask, f"blk{i}.co_t")
        o_v = self.encoder(z_v, z_v, v_mask, f"blk{i}.self_v")
        o_t = self.encoder(z_t, z_t, t_mask, f"blk{i}.self_t")
        return o_v, o_t

    def encode_embeddings(self, e_v: Tensor, e_t: Tensor, v_mask: np.ndarray, t_mask: np.ndarray) -> PooledPair:
        h_v, h_t = e_v, e_t
        for i in range(self.cfg.n_blocks):
            h_v, h_t = self.co_attention_block(h_v, h_t, v_mask, t_mask, i)
        return PooledPair(h_v[:, 0, :], h_t[:, 0, :])

    def encode(self, batch: Batch) -> PooledPair:
        return self.encode_embeddings(self.embed_visual(batch), self.embed_text(batch), batch.vis_mask, batch.txt_mask)

    # ------------------------------------------------------------ heads and loss

    def heads(self, pair: PooledPair) -> HeadOutputs:
        fused = pair.h_w0 * pair.h_v0
        logit = self._lin(T.gelu(self._lin(fused, "head_cls.l1")), "head_cls.l2")
        cat = T.concat([pair.h_w0, pair.h_v0], axis=-1)
        reg = self._lin(T.gelu(self._lin(cat, "head_reg.l1")), "head_reg.l2")
        B = logit.shape[0]
        return HeadOutputs(logit.reshape(B), reg.reshape(B))

    def forward(self, batch: Batch) -> HeadOutputs:
        return self.heads(self.encode(batch))

    def loss(self, out: HeadOutputs, batch: Batch) -> Tensor:
        return combined_loss(
            out, batch.class_target, batch.reg_target, batch.is_reg, self.cfg.lambda_cls, self.cfg.lambda_reg
        )

    # ------------------------------------------------------------ state

    def state_arrays(self, prefix: str = "model.") -> dict[str, np.ndarray]:
        return {prefix + k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "model.") -> None:
        names = {k[len(prefix):] for k in arrays if k.startswith(prefix)}
        if names != set(self.params):
            missing, extra = set(self.params) - names, names - set(self.params)
            raise ModelConfigError(f"checkpoint parameters mismatch: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
        for k, p in self.params.items():
            a = arrays[prefix + k]
            if a.shape != p.shape:
                raise ModelConfigError(f"parameter {k}: checkpoint shape {a.shape} vs model {p.shape}")
            p.data = np.array(a, dtype=np.float64)


def combined_loss(
    out: HeadOutputs,
    target_c: np.ndarray,
    target_r: np.ndarray | None,
    is_reg: np.ndarray,
    lambda_cls: float = 1.0,
    lambda_reg: float = 1.0,
) -> Tensor:
    """Batch mean of ``l1 * BCE + l2 * |reg - target|``, the L1 term kept only for positive <R> samples."""
    target_c = np.asarray(target_c, dtype=float).reshape(-1)
    is_reg = np.asarray(is_reg, dtype=bool).reshape(-1)
    if is_reg.any() and target_r is None:
        raise ValueError("regression target missing for is_reg samples")
    B = target_c.shape[0]
    bce = T.bce_with_logits(out.align_logit, target_c)
    keep = (is_reg & (target_c == 1)).astype(float)
    r = np.zeros(B) if target_r is None else np.where(keep > 0, np.asarray(target_r, dtype=float).reshape(-1), 0.0)
    l1 = T.absolute(out.reg_value - Tensor(r)) * Tensor(keep)
    per = T.scale(bce, lambda_cls) + T.scale(l1, lambda_reg)
    return T.mean(per)
