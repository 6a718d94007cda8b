"""Image and point-cloud transformer encoders sharing one cosine classifier.

Each branch maps tokens to a unit-norm joint-space embedding through its [CLS]
output and a projection head. Masked token slots are filled with a learned [MSK]
embedding (positional embedding kept); their outputs feed the linear
reconstruction decoders and the local-global alignment term.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .errors import ConfigurationError


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        # no qkv bias: a key bias cancels in the softmax and would never get a gradient
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        q, k, v = self.qkv(x).reshape(b, t, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


@dataclass
class BranchOutput:
    embed: torch.Tensor  # (B, d_embed), unit norm
    cls_raw: torch.Tensor  # (B, d_model)
    tokens: torch.Tensor  # (B, K, d_model)
    mask: torch.Tensor | None  # (B, K) bool

    @property
    def msk_out(self) -> torch.Tensor:
        """Outputs of masked slots, (M, d_model), batch-major order."""
        return self.tokens[self.mask]

    @property
    def msk_owner(self) -> torch.Tensor:
        """Batch index of each row of ``msk_out``."""
        return self.mask.nonzero()[:, 0]


class _Branch(nn.Module):
    """Shared trunk: [CLS] + tokens -> blocks -> norm -> projection."""

    def __init__(self, cfg: ModelConfig, n_tokens: int, target_dim: int):
        super().__init__()
        d = cfg.d_model
        self.n_tokens = n_tokens
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.msk_token = nn.Parameter(torch.zeros(1, 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(d)
        self.proj = nn.Linear(d, cfg.d_embed)
        self.decoder = nn.Linear(d, target_dim)
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.msk_token, std=0.02)

    def _run(self, tok, pos, mask, cls_pos):
        b = tok.shape[0]
        if mask is not None:
            tok = torch.where(mask[..., None], self.msk_token.expand_as(tok), tok)
        x = torch.cat([self.cls_token.expand(b, -1, -1) + cls_pos, tok + pos], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        cls_raw = x[:, 0]
        return BranchOutput(self.project(cls_raw), cls_raw, x[:, 1:], mask)

    def project(self, h: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.proj(h), dim=-1)

    def decode(self, h: torch.Tensor) -> torch.Tensor:
        return self.decoder(h)


class ImageBranch(_Branch):
    def __init__(self, cfg: ModelConfig, n_patches: int, patch_dim: int):
        super().__init__(cfg, n_patches, patch_dim)
        self.patch_embed = nn.Linear(patch_dim, cfg.d_model)
        self.pos_embed = nn.Parameter(torch.randn(1, n_patches + 1, cfg.d_model) * 0.02)

    @staticmethod
    def standardize(patches: torch.Tensor) -> torch.Tensor:
        """Zero mean, unit variance, positive skew per image.

        Brightness and contrast changes drop out, and so does inversion: a depth
        view is mostly background, so its standardized pixels are right-skewed
        and an inverted copy is left-skewed.
        """
        mean = patches.mean(dim=(1, 2), keepdim=True)
        std = patches.std(dim=(1, 2), keepdim=True, unbiased=False)
        z = (patches - mean) / (std + 1e-3)
        sign = torch.where(z.pow(3).mean(dim=(1, 2), keepdim=True) < 0, -1.0, 1.0).to(z.dtype)
        return z * sign

    def forward(self, patches: torch.Tensor, mask: torch.Tensor | None = None) -> BranchOutput:
        if patches.shape[1:] != (self.n_tokens, self.patch_embed.in_features):
            raise ConfigurationError(f"image tokens {tuple(patches.shape)} do not match the model")
        x = self.standardize(patches)
        return self._run(self.patch_embed(x), self.pos_embed[:, 1:], mask, self.pos_embed[:, :1])


class MiniPointNet(nn.Module):
    """Shared per-point MLP, max-pooled over the group, then a linear map."""

    def __init__(self, d_model: int):
        super().__init__()
        self.point_mlp = nn.Sequential(nn.Linear(3, 32), nn.GELU(), nn.Linear(32, 64))
        self.out = nn.Linear(128, d_model)

    def forward(self, groups):  # (B, K, G, 3)
        h = self.point_mlp(groups)
        pooled = h.max(dim=2).values
        return self.out(torch.cat([pooled, h.mean(dim=2)], dim=-1))


class PointBranch(_Branch):
    def __init__(self, cfg: ModelConfig, n_groups: int, group_size: int):
        super().__init__(cfg, n_groups, 3 * group_size)
        self.group_size = group_size
        self.group_encoder = MiniPointNet(cfg.d_model)
        self.center_embed = nn.Sequential(nn.Linear(3, cfg.d_model), nn.GELU(), nn.Linear(cfg.d_model, cfg.d_model))
        self.cls_pos = nn.Parameter(torch.randn(1, 1, cfg.d_model) * 0.02)

    @staticmethod
    def standardize(groups: torch.Tensor, centers: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Re-center on the mean center and rescale to unit max radius (translation and scale drop out)."""
        mid = centers.mean(dim=1, keepdim=True)
        radius = (centers - mid).square().sum(-1).amax(dim=1).sqrt().clamp_min(1e-6)
        return groups / radius[:, None, None, None], (centers - mid) / radius[:, None, None]

    def forward(self, groups: torch.Tensor, centers: torch.Tensor, mask: torch.Tensor | None = None) -> BranchOutput:
        if groups.shape[1:] != (self.n_tokens, self.group_size, 3):
            raise ConfigurationError(f"point tokens {tuple(groups.shape)} do not match the model")
        groups, centers = self.standardize(groups, centers)
        return self._run(self.group_encoder(groups), self.center_embed(centers), mask, self.cls_pos)


class CrossModalModel(nn.Module):
    def __init__(self, cfg: ModelConfig, n_classes: int, n_patches: int, patch_dim: int, n_groups: int, group_size: int):
        super().__init__()
        if cfg.d_model % cfg.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        self.cfg = cfg
        self.image = ImageBranch(cfg, n_patches, patch_dim)
        self.point = PointBranch(cfg, n_groups, group_size)
        self.classifier = nn.Parameter(F.normalize(torch.randn(n_classes, cfg.d_embed), dim=-1))
        self.logit_scale = cfg.logit_scale

    @classmethod
    def from_config(cls, run_cfg) -> "CrossModalModel":
        t, d = run_cfg.tokenizer, run_cfg.data
        n_patches = (d.pixels // t.patch_size) ** 2
        return cls(run_cfg.model, d.n_classes, n_patches, t.patch_size**2, t.n_groups, t.group_size)

    def encode_image(self, patches, mask=None) -> BranchOutput:
        return self.image(patches, mask)

    def encode_points(self, groups, centers, mask=None) -> BranchOutput:
        return self.point(groups, centers, mask)

    def classify(self, e: torch.Tensor) -> torch.Tensor:
        return classify(e, self.classifier, self.logit_scale)

    @torch.no_grad()
    def set_classifier(self, prototypes: torch.Tensor) -> None:
        self.classifier.copy_(prototypes)

    @property
    def depth(self) -> int:
        """Number of layer-decay levels minus one (embeddings 0, blocks 1..L-1, heads L)."""
        return self.cfg.n_layers + 1

    def layer_id(self, name: str) -> int:
        m = re.search(r"\.blocks\.(\d+)\.", name)
        if m:
            return int(m.group(1)) + 1
        if name == "classifier" or re.fullmatch(r"(image|point)\.(norm|proj|decoder)\.(weight|bias)", name):
            return self.depth
        return 0

    def clone(self) -> "CrossModalModel":
        twin = copy.deepcopy(self)
        for p in twin.parameters():
            p.requires_grad_(False)
        return twin


def classify(e: torch.Tensor, weights: torch.Tensor, logit_scale: float) -> torch.Tensor:
    return logit_scale * e @ weights.t()


def decode_image_patch(model: CrossModalModel, msk_out: torch.Tensor) -> torch.Tensor:
    return model.image.decode(msk_out)


def decode_point_group(model: CrossModalModel, msk_out: torch.Tensor) -> torch.Tensor:
    return model.point.decode(msk_out)


def project_masked(branch: _Branch, msk_out: torch.Tensor) -> torch.Tensor:
    return branch.project(msk_out)


def prototypes_from_embeddings(embeddings: np.ndarray | torch.Tensor, labels, n_classes: int) -> torch.Tensor:
    """Row c = normalized mean of the embeddings labelled c."""
    e = torch.as_tensor(np.asarray(embeddings) if not torch.is_tensor(embeddings) else embeddings)
    labels = torch.as_tensor(np.asarray(labels))
    rows = []
    for c in range(n_classes):
        sel = e[labels == c]
        if sel.shape[0] == 0:
            raise ConfigurationError(f"no exemplar for class {c}")
        rows.append(sel.mean(dim=0))
    return F.normalize(torch.stack(rows), dim=-1)
