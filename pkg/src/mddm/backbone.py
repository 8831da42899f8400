"""Denoiser network: a small bidirectional transformer over the joint vocabulary.

Three conditioning designs are toggleable so the architecture grid is
runnable: plain layer norm with the timestep added once to the token stream
("none"), adaptive layer norm whose scale/shift are predicted from the
timestep ("adaln"), and the variant with zero-initialized residual gates
("adaln_zero"). Attention is bidirectional by default; a causal flag
restores the autoregressive mask for comparison runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .vocab import SequenceLayout

ADALN_MODES = ("none", "adaln", "adaln_zero")

MLP_RATIO = 4
TIME_SCALE = 1000.0
INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 8
    vocab_out: int = 7
    adaln_mode: str = "adaln_zero"
    causal: bool = False
    use_modality_embed: bool = True
    use_timestep_embed: bool = True
    t_embed_dim: int = 64

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.adaln_mode not in ADALN_MODES:
            raise ValueError(f"unknown adaln_mode {self.adaln_mode!r}")
        if self.t_embed_dim % 2 != 0:
            raise ValueError("t_embed_dim must be even (sin/cos halves)")
        if not self.use_timestep_embed and self.adaln_mode != "none":
            raise ValueError(
                "adaln modes need a timestep embedding; use adaln_mode='none'"
            )
        if self.vocab_out < 2:
            raise ValueError("vocab_out must cover at least one token plus mask")
        if self.max_len < 1 or self.n_layers < 1:
            raise ValueError("max_len and n_layers must be >= 1")


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of t in [0, 1], scaled by 1000 before the frequency ladder.

    Output is [sin block | cos block]; at t = 0 that is all zeros followed by
    all ones.
    """
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=t.dtype, device=t.device)
        / half
    )
    angles = TIME_SCALE * t[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def _modulate(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + gamma.unsqueeze(1)) + beta.unsqueeze(1)


class Attention(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.d_model // config.n_heads
        self.causal = config.causal
        self.qkv = nn.Linear(config.d_model, 3 * config.d_model)
        self.proj = nn.Linear(config.d_model, config.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, length, d = x.shape
        q, k, v = (
            self.qkv(x)
            .reshape(b, length, 3, self.n_heads, self.head_dim)
            .permute(2, 0, 3, 1, 4)
        )
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if self.causal:
            mask = torch.triu(
                torch.ones(length, length, dtype=torch.bool, device=x.device),
                diagonal=1,
            )
            scores = scores.masked_fill(mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, length, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block with mode-dependent norm conditioning."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        d = config.d_model
        self.mode = config.adaln_mode
        affine = self.mode == "none"
        self.norm1 = nn.LayerNorm(d, elementwise_affine=affine)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=affine)
        self.attn = Attention(config)
        self.mlp_fc1 = nn.Linear(d, MLP_RATIO * d)
        self.mlp_fc2 = nn.Linear(MLP_RATIO * d, d)
        if self.mode in ("adaln", "adaln_zero"):
            self.mod_proj = nn.Linear(d, 4 * d)
        if self.mode == "adaln_zero":
            self.gate_proj = nn.Linear(d, 2 * d)

    def _mlp(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp_fc2(F.gelu(self.mlp_fc1(x)))

    def forward(self, h: torch.Tensor, cond: torch.Tensor | None) -> torch.Tensor:
        if self.mode == "none":
            h = h + self.attn(self.norm1(h))
            return h + self._mlp(self.norm2(h))
        g1, b1, g2, b2 = self.mod_proj(cond).chunk(4, dim=-1)
        attn_out = self.attn(_modulate(self.norm1(h), g1, b1))
        if self.mode == "adaln_zero":
            gate1, gate2 = self.gate_proj(cond).chunk(2, dim=-1)
            h = h + gate1.unsqueeze(1) * attn_out
            return h + gate2.unsqueeze(1) * self._mlp(
                _modulate(self.norm2(h), g2, b2)
            )
        h = h + attn_out
        return h + self._mlp(_modulate(self.norm2(h), g2, b2))


class Denoiser(nn.Module):
    """Maps a corrupted sequence and a time to per-position logits.

    The output has vocab_out columns including one for the mask symbol;
    samplers must suppress that column, since predicting mask as a clean
    token is never valid.
    """

    def __init__(self, config: BackboneConfig, layout: SequenceLayout):
        super().__init__()
        if layout.len_total > config.max_len:
            raise ValueError(
                f"layout length {layout.len_total} exceeds max_len {config.max_len}"
            )
        self.config = config
        self.layout = layout
        d = config.d_model
        self.token_emb = nn.Embedding(config.vocab_out, d)
        self.pos_emb = nn.Embedding(config.max_len, d)
        if config.use_modality_embed:
            self.modality_emb = nn.Embedding(2, d)
        if config.use_timestep_embed:
            self.time_fc1 = nn.Linear(config.t_embed_dim, d)
            self.time_fc2 = nn.Linear(d, d)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        affine = config.adaln_mode == "none"
        self.final_norm = nn.LayerNorm(d, elementwise_affine=affine)
        if config.adaln_mode in ("adaln", "adaln_zero"):
            self.final_mod = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, config.vocab_out)
        self.register_buffer(
            "modality_idx",
            torch.from_numpy(layout.modality_indicator()),
            persistent=False,
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def timestep_embedding(self, t: torch.Tensor) -> torch.Tensor:
        """Two-layer MLP over the sinusoidal features; [B] -> [B, d_model]."""
        feats = timestep_features(t.to(self.dtype), self.config.t_embed_dim)
        return self.time_fc2(F.silu(self.time_fc1(feats)))

    def _check_ids(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if ids.dim() != 2:
            raise ValueError(f"ids must be [B, L] or [L], got shape {tuple(ids.shape)}")
        if ids.shape[1] > self.config.max_len:
            raise ValueError(
                f"sequence length {ids.shape[1]} exceeds max_len {self.config.max_len}"
            )
        if ids.shape[1] != self.layout.len_total:
            raise ValueError(
                f"sequence length {ids.shape[1]} != layout length {self.layout.len_total}"
            )
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.config.vocab_out):
            raise ValueError(f"token id outside [0, {self.config.vocab_out})")
        return ids

    def _broadcast_t(self, t, batch: int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=self.dtype, device=self.head.weight.device)
        if t.dim() == 0:
            t = t.expand(batch)
        if t.shape != (batch,):
            raise ValueError(f"t must be scalar or [batch], got {tuple(t.shape)}")
        return t

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        """Token + positional (+ modality) embedding stream, before any block."""
        ids = self._check_ids(ids)
        length = ids.shape[1]
        h = self.token_emb(ids) + self.pos_emb.weight[:length]
        if self.config.use_modality_embed:
            h = h + self.modality_emb(self.modality_idx[:length])
        return h

    def forward(
        self,
        ids: torch.Tensor,
        t,
        embed_offset: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Per-position logits over the extended vocabulary, shape [B, L, vocab_out].

        embed_offset, when given, is added to the embedding stream; it exists
        for sensitivity probes against continuous inputs.
        """
        out = self._run(ids, t, embed_offset)
        return out["logits"]

    def trace(
        self,
        ids: torch.Tensor,
        t,
        embed_offset: torch.Tensor | None = None,
    ) -> dict[str, torch.Tensor]:
        """Like forward, but also exposes the embedding and post-block streams."""
        return self._run(ids, t, embed_offset)

    def _run(self, ids, t, embed_offset):
        ids = self._check_ids(torch.as_tensor(ids, dtype=torch.long))
        h0 = self.embed(ids)
        if embed_offset is not None:
            h0 = h0 + embed_offset.to(self.dtype)
        cond = None
        if self.config.use_timestep_embed:
            cond = self.timestep_embedding(self._broadcast_t(t, ids.shape[0]))
            if self.config.adaln_mode == "none":
                h0 = h0 + cond.unsqueeze(1)
        h = h0
        for block in self.blocks:
            h = block(h, cond)
        post_blocks = h
        if self.config.adaln_mode == "none":
            h = self.final_norm(h)
        else:
            gamma, beta = self.final_mod(cond).chunk(2, dim=-1)
            h = _modulate(self.final_norm(h), gamma, beta)
        return {"embedded": h0, "post_blocks": post_blocks, "logits": self.head(h)}


def _trunc_normal_(tensor: torch.Tensor, std: float, gen: torch.Generator) -> None:
    # Inverse-CDF truncated normal on (-2, 2) sigma, scaled by std.
    lo = 0.5 * (1.0 + math.erf(-2.0 / math.sqrt(2.0)))
    hi = 0.5 * (1.0 + math.erf(2.0 / math.sqrt(2.0)))
    u = torch.empty_like(tensor).uniform_(lo, hi, generator=gen)
    tensor.copy_(torch.erfinv(2.0 * u - 1.0) * math.sqrt(2.0) * std)


def init_params(model: Denoiser, seed: int) -> Denoiser:
    """Deterministic in-place initialization.

    Matrix weights and embeddings are truncated-normal (std 0.02), biases
    zero, layer-norm scales one, and the residual-gate projections of
    adaln_zero exactly zero.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("gate_proj.weight") or name.endswith("gate_proj.bias"):
                param.zero_()
            elif param.dim() >= 2:
                _trunc_normal_(param, INIT_STD, gen)
            elif "norm" in name and name.endswith("weight"):
                param.fill_(1.0)
            else:
                param.zero_()
    return model


def build_denoiser(config: BackboneConfig, layout: SequenceLayout, seed: int) -> Denoiser:
    return init_params(Denoiser(config, layout), seed)


def parameter_count(config: BackboneConfig) -> int:
    """Closed-form parameter count; must match the instantiated module exactly."""
    d = config.d_model
    total = config.vocab_out * d  # token embedding
    total += config.max_len * d  # positions
    if config.use_modality_embed:
        total += 2 * d
    if config.use_timestep_embed:
        total += config.t_embed_dim * d + d  # time_fc1
        total += d * d + d  # time_fc2
    per_block = (d * 3 * d + 3 * d) + (d * d + d)  # attention qkv + out proj
    per_block += (d * MLP_RATIO * d + MLP_RATIO * d) + (MLP_RATIO * d * d + d)
    if config.adaln_mode == "none":
        per_block += 4 * d  # two affine layer norms
    else:
        per_block += 4 * d * d + 4 * d  # scale/shift projection
    if config.adaln_mode == "adaln_zero":
        per_block += 2 * d * d + 2 * d  # residual gates
    total += config.n_layers * per_block
    if config.adaln_mode == "none":
        total += 2 * d  # affine final norm
    else:
        total += 2 * d * d + 2 * d  # final modulation
    total += d * config.vocab_out + config.vocab_out  # head
    return total


def named_parameter_arrays(model: Denoiser) -> dict[str, np.ndarray]:
    """Parameters as float32 numpy arrays, in module definition order."""
    return {
        name: p.detach().to(torch.float32).numpy().copy()
        for name, p in model.named_parameters()
    }
