"""Decoder stack: pre-norm blocks with gated-SiLU MLPs and optional adapters.

Block layout: the attention residual comes first, the adapter (when
enabled) rewrites its output, and the pre-MLP RMS norm then regulates the
adapter's output before the gated MLP residual:

    h   = x + attention(rms_norm(x, norm_attn_gain))
    a   = adapter(h)                      # identity when disabled
    out = a + mlp(rms_norm(a, norm_mlp_gain))

Attention and MLP projections carry no biases. Positions are rotary by
default; a learned absolute table is available for sweeps. The visual
prefix participates in attention like any other rows but only text tokens
are ever loss targets.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .adapter import AdapterWeights, adapter_forward, init_adapter
from .tensor import ShapeError, Tensor
from .vision import VisionBridge, image_to_prefix

ROTARY_BASE = 10000.0

POSITIONAL_MODES = ("rotary", "absolute")


class ConfigError(ValueError):
    """A model or training configuration violates its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 2
    hidden: int = 16
    n_heads: int = 2
    mlp_inner: int = 64
    vocab_size: int = 32
    max_seq: int = 16
    adapters_enabled: bool = True
    positional_mode: str = "rotary"
    vis_width: int = 8
    n_query: int = 4

    def __post_init__(self):
        if self.n_blocks < 1 or self.hidden < 4 or self.n_heads < 1:
            raise ConfigError("n_blocks, hidden and n_heads must be positive")
        if self.hidden % 4 != 0:
            raise ConfigError(f"hidden {self.hidden} must be divisible by 4")
        if self.hidden % self.n_heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by {self.n_heads} heads")
        if (self.hidden // self.n_heads) % 2 != 0:
            raise ConfigError("head dim must be even for the rotary twist")
        if self.mlp_inner < 1 or self.vocab_size < 2 or self.max_seq < 1:
            raise ConfigError("mlp_inner, vocab_size and max_seq must be positive")
        if self.positional_mode not in POSITIONAL_MODES:
            raise ConfigError(f"positional_mode must be one of {POSITIONAL_MODES}")
        if self.vis_width < 1 or self.n_query < 1:
            raise ConfigError("vis_width and n_query must be positive")


@dataclass
class BlockWeights:
    norm_attn_gain: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    adapter: Optional[AdapterWeights]
    norm_mlp_gain: Tensor
    w_gate: Tensor
    w_up_mlp: Tensor
    w_down_mlp: Tensor


def _init_block(cfg: ModelConfig, rng_backbone, rng_adapters) -> BlockWeights:
    h, inner = cfg.hidden, cfg.mlp_inner
    sh = 1.0 / np.sqrt(h)
    return BlockWeights(
        norm_attn_gain=Tensor(np.ones(h)),
        wq=Tensor(rng_backbone.normal(0.0, sh, size=(h, h))),
        wk=Tensor(rng_backbone.normal(0.0, sh, size=(h, h))),
        wv=Tensor(rng_backbone.normal(0.0, sh, size=(h, h))),
        wo=Tensor(rng_backbone.normal(0.0, sh, size=(h, h))),
        adapter=init_adapter(h, rng_adapters) if cfg.adapters_enabled else None,
        norm_mlp_gain=Tensor(np.ones(h)),
        w_gate=Tensor(rng_backbone.normal(0.0, sh, size=(h, inner))),
        w_up_mlp=Tensor(rng_backbone.normal(0.0, sh, size=(h, inner))),
        w_down_mlp=Tensor(rng_backbone.normal(0.0, 1.0 / np.sqrt(inner), size=(inner, h))),
    )


@dataclass
class Model:
    config: ModelConfig
    embedding: Tensor            # [vocab, hidden]
    blocks: list[BlockWeights]
    final_norm_gain: Tensor      # [hidden]
    unembed: Tensor              # [hidden, vocab]
    vision: VisionBridge
    pos_table: Optional[Tensor]  # [max_seq, hidden] when positional_mode == absolute

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Model":
        # Independent streams so toggling adapters_enabled cannot shift the
        # backbone or vision draws.
        rng_backbone = np.random.default_rng([seed, 0])
        rng_adapters = np.random.default_rng([seed, 1])
        rng_vision = np.random.default_rng([seed, 2])
        h = config.hidden
        embedding = Tensor(rng_backbone.normal(0.0, 1.0, size=(config.vocab_size, h)))
        blocks = [_init_block(config, rng_backbone, rng_adapters)
                  for _ in range(config.n_blocks)]
        final_norm_gain = Tensor(np.ones(h))
        unembed = Tensor(rng_backbone.normal(0.0, 1.0 / np.sqrt(h), size=(h, config.vocab_size)))
        pos_table = None
        if config.positional_mode == "absolute":
            pos_table = Tensor(rng_backbone.normal(0.0, 0.02, size=(config.max_seq, h)))
        vision = VisionBridge.init(config.vis_width, config.n_query, h, rng_vision)
        return cls(config=config, embedding=embedding, blocks=blocks,
                   final_norm_gain=final_norm_gain, unembed=unembed,
                   vision=vision, pos_table=pos_table)

    def named_params(self) -> dict[str, Tensor]:
        """Every parameter tensor under a stable dotted path, in fixed order."""
        params: dict[str, Tensor] = {"embedding": self.embedding}
        for i, b in enumerate(self.blocks):
            p = f"blocks.{i}"
            params[f"{p}.norm_attn_gain"] = b.norm_attn_gain
            params[f"{p}.wq"] = b.wq
            params[f"{p}.wk"] = b.wk
            params[f"{p}.wv"] = b.wv
            params[f"{p}.wo"] = b.wo
            if b.adapter is not None:
                params[f"{p}.adapter.w_down"] = b.adapter.w_down
                params[f"{p}.adapter.b_down"] = b.adapter.b_down
                params[f"{p}.adapter.w_up"] = b.adapter.w_up
                params[f"{p}.adapter.b_up"] = b.adapter.b_up
            params[f"{p}.norm_mlp_gain"] = b.norm_mlp_gain
            params[f"{p}.w_gate"] = b.w_gate
            params[f"{p}.w_up_mlp"] = b.w_up_mlp
            params[f"{p}.w_down_mlp"] = b.w_down_mlp
        params["final_norm_gain"] = self.final_norm_gain
        params["unembed"] = self.unembed
        if self.pos_table is not None:
            params["pos_table"] = self.pos_table
        params["vision.patch_w"] = self.vision.stub.patch_w
        params["vision.patch_b"] = self.vision.stub.patch_b
        params["vision.queries"] = self.vision.queries
        params["vision.proj_w"] = self.vision.proj_w
        params["vision.proj_b"] = self.vision.proj_b
        return params

    def prefix_from_image(self, img) -> Tensor:
        return image_to_prefix(img, self.vision)

    def forward(self, token_ids, prefix: Optional[Tensor] = None,
                prefix_row: int = 0) -> Tensor:
        """Logits [rows, vocab] for text tokens with an optional visual prefix.

        The prefix block is inserted before the token at index
        ``prefix_row`` (0 puts it first). Rows are positions 0..R-1.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise ShapeError("token_ids must be a non-empty 1-D sequence")
        if not 0 <= prefix_row <= ids.size:
            raise ShapeError(f"prefix_row {prefix_row} out of range for {ids.size} tokens")
        emb = T.embedding(self.embedding, ids)
        if prefix is not None and prefix.shape[0] > 0:
            if prefix.ndim != 2 or prefix.shape[1] != self.config.hidden:
                raise ShapeError(
                    f"prefix width {prefix.shape} does not match hidden {self.config.hidden}"
                )
            parts = []
            if prefix_row > 0:
                parts.append(T.slice_rows(emb, 0, prefix_row))
            parts.append(prefix)
            if prefix_row < ids.size:
                parts.append(T.slice_rows(emb, prefix_row, ids.size))
            x = T.concat_rows(parts)
        else:
            x = emb
        rows = x.shape[0]
        if rows > self.config.max_seq:
            raise ShapeError(f"sequence of {rows} rows exceeds max_seq {self.config.max_seq}")
        if self.pos_table is not None:
            x = x + T.slice_rows(self.pos_table, 0, rows)
        for block in self.blocks:
            x = block_forward(x, block, self.config)
        x = T.rms_norm(x, self.final_norm_gain)
        return x @ self.unembed

    def forward_loss(self, token_ids, prefix: Optional[Tensor] = None,
                     prefix_row: int = 0, loss_start: int = 0) -> tuple[Tensor, Tensor]:
        """Logits plus mean next-token cross-entropy over text targets.

        Targets are the tokens after index ``loss_start``; each is predicted
        from the preceding row, so prefix rows are never loss positions and
        with no prefix this is the ordinary shifted LM loss.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        logits = self.forward(ids, prefix, prefix_row)
        n_prefix = 0 if prefix is None else prefix.shape[0]
        rows = logits.shape[0]
        targets = np.zeros(rows, dtype=np.int64)
        mask = np.zeros(rows, dtype=bool)
        for t in range(loss_start + 1, ids.size):
            row = (t if t < prefix_row else t + n_prefix) - 1
            targets[row] = ids[t]
            mask[row] = True
        loss = T.cross_entropy_rows(logits, targets, mask)
        return logits, loss


def causal_attention(x: Tensor, w: BlockWeights, cfg: ModelConfig) -> Tensor:
    """Strictly causal multi-head self-attention over pre-normed rows."""
    rows = x.shape[0]
    if rows > cfg.max_seq:
        raise ShapeError(f"sequence of {rows} rows exceeds max_seq {cfg.max_seq}")
    if x.ndim != 2 or x.shape[1] != cfg.hidden:
        raise ShapeError(f"attention expects [seq, {cfg.hidden}] input, got {x.shape}")
    dh = cfg.hidden // cfg.n_heads
    q, k, v = x @ w.wq, x @ w.wk, x @ w.wv
    heads = []
    for h in range(cfg.n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = T.slice_cols(q, lo, hi)
        kh = T.slice_cols(k, lo, hi)
        vh = T.slice_cols(v, lo, hi)
        if cfg.positional_mode == "rotary":
            qh = T.rotary(qh, base=ROTARY_BASE)
            kh = T.rotary(kh, base=ROTARY_BASE)
        scores = (qh @ kh.T) * (1.0 / np.sqrt(dh))
        heads.append(T.causal_softmax(scores) @ vh)
    return T.concat_cols(heads) @ w.wo


def block_forward(x: Tensor, w: BlockWeights, cfg: ModelConfig) -> Tensor:
    h = x + causal_attention(T.rms_norm(x, w.norm_attn_gain), w, cfg)
    a = adapter_forward(h, w.adapter) if cfg.adapters_enabled else h
    u = T.rms_norm(a, w.norm_mlp_gain)
    mlp = (T.silu(u @ w.w_gate) * (u @ w.w_up_mlp)) @ w.w_down_mlp
    return a + mlp


def toy_config(**overrides) -> ModelConfig:
    """The 2-block desk-scale configuration used for gradient checking."""
    return ModelConfig(**overrides) if overrides else ModelConfig()


def policy_reference_config(**overrides) -> ModelConfig:
    """The 4-block configuration whose trainable counts are 832 / 144."""
    base = dict(n_blocks=4)
    base.update(overrides)
    return ModelConfig(**base)


def strip_adapters_config(cfg: ModelConfig) -> ModelConfig:
    return replace(cfg, adapters_enabled=False)
