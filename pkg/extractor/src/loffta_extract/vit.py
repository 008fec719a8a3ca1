"""Frozen vision transformer backbones.

The module builds standard pre-norm ViT encoders sized from a small named
registry. Weights come from a local state-dict file when one is supplied;
otherwise parameters are filled deterministically from a seeded generator,
so extraction stays reproducible in environments where no pretrained
checkpoint can be fetched. Either way the model is inference-only: every
parameter is frozen and forward runs under no_grad.

Patch tokens and the CLS token are taken after the final encoder norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import InvalidValue


@dataclass(frozen=True)
class ViTSpec:
    patch_size: int
    embed_dim: int
    depth: int
    heads: int
    mlp_ratio: int = 4
    # channel statistics applied during preprocessing
    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)


MODELS: dict[str, ViTSpec] = {
    "vit-mini14": ViTSpec(patch_size=14, embed_dim=128, depth=4, heads=4),
    "vit-t16": ViTSpec(patch_size=16, embed_dim=192, depth=12, heads=3),
    "vit-s14": ViTSpec(patch_size=14, embed_dim=384, depth=12, heads=6),
    "vit-b14": ViTSpec(patch_size=14, embed_dim=768, depth=12, heads=12),
}


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x):
        y = self.ln1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class FrozenViT(nn.Module):
    """Encoder that exposes post-norm CLS and patch tokens."""

    def __init__(self, spec: ViTSpec, image_size: int):
        super().__init__()
        if image_size % spec.patch_size != 0:
            raise InvalidValue(
                f"image size {image_size} is not a multiple of patch size "
                f"{spec.patch_size}")
        self.spec = spec
        self.image_size = image_size
        grid = image_size // spec.patch_size
        m = spec.embed_dim
        self.patch_embed = nn.Conv2d(3, m, spec.patch_size, spec.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, m))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + grid * grid, m))
        self.blocks = nn.ModuleList(
            [_Block(m, spec.heads, spec.mlp_ratio) for _ in range(spec.depth)])
        self.norm = nn.LayerNorm(m, eps=1e-6)

    @torch.no_grad()
    def forward_features(self, x: torch.Tensor):
        """(B, 3, S, S) -> (cls (B, m), tokens (B, k, m), (gh, gw))."""
        t = self.patch_embed(x)
        gh, gw = int(t.shape[-2]), int(t.shape[-1])
        t = t.flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(t.shape[0], -1, -1)
        seq = torch.cat([cls, t], dim=1) + self.pos_embed
        for blk in self.blocks:
            seq = blk(seq)
        seq = self.norm(seq)
        return seq[:, 0], seq[:, 1:], (gh, gw)


def _seeded_init(model: nn.Module, seed: int) -> None:
    # fill every tensor from one generator, in name order, so the result
    # depends only on the seed and the architecture
    gen = torch.Generator().manual_seed(seed)
    for name, p in sorted(model.named_parameters()):
        with torch.no_grad():
            if name.endswith("bias") or ".ln" in name or name.startswith("norm"):
                if name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)


def load_model(model_id: str, image_size: int, weights: str | None = None,
               seed: int = 0) -> tuple[FrozenViT, ViTSpec, int, str]:
    """Build a frozen backbone; returns (model, spec, param_count, note).

    note records the weight provenance and the token capture point so the
    cache manifest can carry it.
    """
    spec = MODELS.get(model_id)
    if spec is None:
        raise InvalidValue(
            f"unknown model {model_id!r}; available: {sorted(MODELS)}")
    model = FrozenViT(spec, image_size)
    if weights is not None:
        state = torch.load(weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        note = f"weights from {weights}"
    else:
        _seeded_init(model, seed)
        note = f"seeded-random weights (seed {seed}), no pretrained checkpoint"
    model.eval()
    model.requires_grad_(False)
    param_count = sum(p.numel() for p in model.parameters())
    return model, spec, param_count, (
        f"{note}; cached tokens are final-block outputs after the "
        f"encoder norm")
