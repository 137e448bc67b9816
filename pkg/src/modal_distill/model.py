"""Shared-class-token ViT encoder, global layer norm and multi-modal fusion.

The teacher embeds each modality with its own linear projection, encodes all
sequences of a bag with one encoder, normalises them jointly (global layer
norm) and fuses the class tokens: IHC weights are predicted from the HES
class token by a linear layer and the weighted IHC sum is mixed with HES by
``fusion_lambda``. The student keeps only the HES projection, uses per-token
layer norm and classifies its class token directly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data.sampling import Bag, Sequence

FUSION_MODES = ("learnable", "dot_product")
NORM_EPS = 1e-5


@dataclass
class ModelConfig:
    d: int = 128
    n: int = 3
    h: int = 2
    S: int = 256
    p: int = 32
    k: int = 3
    fusion_lambda: float = 0.5
    softmax_mlp: bool = True
    fusion_mode: str = "learnable"
    normalize_fusion_weights: bool = False
    mlp_ratio: int = 3
    init_std: float = 0.02
    modalities: tuple[str, ...] = ("HES", "BCL6", "CD10", "MUM1")

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if self.d % self.h:
            raise ValueError(f"d={self.d} must be divisible by h={self.h}")
        if not 0.0 <= self.fusion_lambda <= 1.0:
            raise ValueError("fusion_lambda must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.modalities[0] != "HES" or len(self.modalities) != self.k + 1:
            raise ValueError("modalities must be HES followed by exactly k IHC stains")
        if self.n < 0 or self.S < 1 or self.p < 1 or self.mlp_ratio < 1:
            raise ValueError("n >= 0, S >= 1, p >= 1 and mlp_ratio >= 1 are required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    def geometry(self) -> tuple[int, int, int]:
        return self.d, self.S, self.p


@dataclass
class ForwardTrace:
    tokens: torch.Tensor  # normalised encoder output, (..., S + 1, d)
    class_tokens: torch.Tensor  # (B, M, d) for the teacher, (B, d) for the student
    probs: torch.Tensor  # (B, 2)
    weights: torch.Tensor | None = None  # (B, k) fusion weights
    bag_embedding: torch.Tensor | None = None  # (B, d)
    attention: torch.Tensor | None = None  # last block, (N, h, S + 1, S + 1)
    stats: tuple[torch.Tensor, torch.Tensor] | None = field(default=None, repr=False)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(d, eps=NORM_EPS)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n, t, d = x.shape
        dh = d // self.heads
        qkv = self.qkv(self.norm(x)).reshape(n, t, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, t, d)
        return self.proj(out), attn


class MLP(nn.Module):
    def __init__(self, d: int, hidden: int, softmax_out: bool):
        super().__init__()
        self.softmax_out = softmax_out
        self.norm = nn.LayerNorm(d, eps=NORM_EPS)
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.fc2(F.gelu(self.fc1(self.norm(x))))
        # softmax over features, before the residual add
        return torch.softmax(out, dim=-1) if self.softmax_out else out


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = Attention(cfg.d, cfg.h)
        self.mlp = MLP(cfg.d, cfg.mlp_ratio * cfg.d, cfg.softmax_mlp)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a, attn = self.attn(x)
        x = x + a
        return x + self.mlp(x), attn


class GlobalNorm(nn.Module):
    """Per-feature gain and bias; statistics are chosen by the caller."""

    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))


class Fusion(nn.Module):
    def __init__(self, d: int, k: int):
        super().__init__()
        self.A = nn.Parameter(torch.zeros(k, d))
        self.b = nn.Parameter(torch.zeros(k))


class SubtypeClassifier(nn.Module):
    """Teacher (``role="teacher"``) or HES-only student sequence classifier."""

    def __init__(self, cfg: ModelConfig, role: str = "teacher", generator: torch.Generator | None = None):
        super().__init__()
        if role not in ("teacher", "student"):
            raise ValueError(f"role must be teacher or student, got {role!r}")
        self.cfg = cfg
        self.role = role
        self.modalities = cfg.modalities if role == "teacher" else ("HES",)
        in_dim = 3 * cfg.p * cfg.p
        self.proj = nn.ModuleDict({m: nn.Linear(in_dim, cfg.d) for m in self.modalities})
        self.cls_token = nn.Parameter(torch.zeros(cfg.d))
        for i in range(cfg.n):
            self.add_module(f"block{i}", Block(cfg))
        self.gln = GlobalNorm(cfg.d)
        if role == "teacher":
            self.fusion = Fusion(cfg.d, cfg.k)
        self.head = nn.Linear(cfg.d, 2)
        self.reset_parameters(generator)

    @property
    def blocks(self) -> list[Block]:
        return [getattr(self, f"block{i}") for i in range(self.cfg.n)]

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        std = self.cfg.init_std
        with torch.no_grad():
            for name, param in self.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                if leaf in ("weight", "A", "cls_token") and not _is_norm(name):
                    nn.init.trunc_normal_(param, std=std, a=-2 * std, b=2 * std, generator=generator)
                elif leaf == "gain" or (_is_norm(name) and leaf == "weight"):
                    param.fill_(1.0)
                else:
                    param.zero_()

    def embed(self, x: torch.Tensor, modality: str) -> torch.Tensor:
        """Project ``(B, S, p, p, 3)`` pixels in [0, 255] and prepend the class token."""
        if modality not in self.proj:
            raise KeyError(f"no projection for modality {modality!r}")
        dtype = self.cls_token.dtype
        flat = x.to(dtype).reshape(*x.shape[:-3], -1) / 255.0
        tokens = self.proj[modality](flat)
        cls = self.cls_token.expand(*tokens.shape[:-2], 1, -1)
        return torch.cat([cls, tokens], dim=-2)

    def encode(self, tokens: torch.Tensor, return_attention: bool = False):
        attn = None
        x = tokens
        for i, block in enumerate(self.blocks):
            x, attn = block(x)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after encoder block {i}")
        return (x, attn) if return_attention else x

    def global_layer_norm(
        self, z: torch.Tensor, stats: tuple[torch.Tensor, torch.Tensor] | None = None
    ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        """Normalise ``(B, M, T, d)`` with moments pooled over everything but the bag axis."""
        if stats is None:
            mean = z.mean(dim=(1, 2, 3), keepdim=True)
            var = z.var(dim=(1, 2, 3), keepdim=True, unbiased=False)
            stats = (mean, var)
        mean, var = stats
        return (z - mean) / torch.sqrt(var + NORM_EPS) * self.gln.gain + self.gln.bias, stats

    def token_layer_norm(self, z: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(z, (self.cfg.d,), self.gln.gain, self.gln.bias, eps=NORM_EPS)

    def fusion_weights(self, z_hes: torch.Tensor, z_ihc: torch.Tensor) -> torch.Tensor:
        if self.cfg.fusion_mode == "dot_product":
            scores = (z_ihc @ z_hes.unsqueeze(-1)).squeeze(-1) / math.sqrt(self.cfg.d)
            return torch.softmax(scores, dim=-1)
        w = z_hes @ self.fusion.A.T + self.fusion.b
        return torch.softmax(w, dim=-1) if self.cfg.normalize_fusion_weights else w

    def fuse(self, z_hes: torch.Tensor, z_ihc: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``z_hes``: (B, d), ``z_ihc``: (B, k, d) -> bag embedding (B, d), weights (B, k)."""
        if z_ihc.shape[-2] != self.cfg.k or z_ihc.shape[-1] != z_hes.shape[-1]:
            raise ValueError(f"fusion expects (B, {self.cfg.k}, d) IHC tokens, got {tuple(z_ihc.shape)}")
        w = self.fusion_weights(z_hes, z_ihc)
        lam = self.cfg.fusion_lambda
        return lam * z_hes + (1.0 - lam) * (w.unsqueeze(-1) * z_ihc).sum(dim=-2), w

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.head(z), dim=-1)

    def forward_bags(
        self,
        x: torch.Tensor,
        *,
        norm: str = "global",
        stats: tuple[torch.Tensor, torch.Tensor] | None = None,
        return_attention: bool = False,
    ) -> ForwardTrace:
        """Teacher pass over ``(B, M, S, p, p, 3)`` bags, modalities in config order."""
        if self.role != "teacher":
            raise RuntimeError("bag forward requires the teacher")
        if x.shape[1] != len(self.modalities):
            raise ValueError(f"expected {len(self.modalities)} modalities per bag, got {x.shape[1]}")
        b, m = x.shape[:2]
        tokens = torch.stack([self.embed(x[:, j], mod) for j, mod in enumerate(self.modalities)], 1)
        encoded, attn = self.encode(tokens.reshape(b * m, *tokens.shape[2:]), return_attention=True)
        encoded = encoded.reshape(b, m, *encoded.shape[1:])
        if norm == "global":
            z, stats = self.global_layer_norm(encoded, stats)
        else:
            z = self.token_layer_norm(encoded)
        cls = z[:, :, 0]
        bag, w = self.fuse(cls[:, 0], cls[:, 1:])
        return ForwardTrace(
            tokens=z,
            class_tokens=cls,
            probs=self.classify(bag),
            weights=w,
            bag_embedding=bag,
            attention=attn if return_attention else None,
            stats=stats,
        )

    def forward_sequences(self, x: torch.Tensor, *, return_attention: bool = False) -> ForwardTrace:
        """Student pass over ``(B, S, p, p, 3)`` HES sequences."""
        encoded, attn = self.encode(self.embed(x, "HES"), return_attention=True)
        z = self.token_layer_norm(encoded)
        return ForwardTrace(
            tokens=z,
            class_tokens=z[:, 0],
            probs=self.classify(z[:, 0]),
            attention=attn if return_attention else None,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.role == "teacher":
            return self.forward_bags(x).probs
        return self.forward_sequences(x).probs


def _is_norm(name: str) -> bool:
    return ".norm." in name or name.startswith("norm.")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_model(cfg: ModelConfig, role: str, generator: torch.Generator | None = None,
                dtype: torch.dtype = torch.float32) -> SubtypeClassifier:
    return SubtypeClassifier(cfg, role, generator).to(dtype)


def _as_tensor(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels))


def teacher_forward(bag: Bag, model: SubtypeClassifier, **kwargs) -> ForwardTrace:
    missing = [m for m in model.modalities if m not in bag.sequences]
    if missing:
        raise ValueError(f"bag is missing modalities {missing}")
    x = np.stack([bag.sequences[m].pixels for m in model.modalities])[None]
    return model.forward_bags(_as_tensor(x), **kwargs)


def student_forward(seq: Sequence, model: SubtypeClassifier, **kwargs) -> ForwardTrace:
    if seq.modality != "HES":
        raise ValueError(f"the student reads HES sequences only, got {seq.modality!r}")
    return model.forward_sequences(_as_tensor(seq.pixels[None]), **kwargs)


def attention_from_trace(attn: torch.Tensor) -> torch.Tensor:
    """Class-token attention over patch tokens, head-averaged and renormalised."""
    cls_row = attn[..., 0, 1:].mean(dim=-2)
    return cls_row / cls_row.sum(dim=-1, keepdim=True)


@torch.no_grad()
def attention_scores(seq_pixels: np.ndarray | torch.Tensor, model: SubtypeClassifier) -> np.ndarray:
    """Per-patch scores for ``(S, p, p, 3)`` or ``(B, S, p, p, 3)`` HES pixels."""
    if model.cfg.n == 0:
        raise ValueError("attention scores need at least one encoder block")
    x = seq_pixels if isinstance(seq_pixels, torch.Tensor) else _as_tensor(seq_pixels)
    single = x.dim() == 4
    if single:
        x = x[None]
    if model.role == "teacher":
        _, attn = model.encode(model.embed(x, "HES"), return_attention=True)
    else:
        attn = model.forward_sequences(x, return_attention=True).attention
    scores = attention_from_trace(attn).cpu().numpy()
    return scores[0] if single else scores
