"""Frozen encoders behind one interface, plus deterministic toy backbones.

A real deployment plugs pretrained CLIP/DINO weights in through
:mod:`nola.hf_adapters`; the toy encoders here have the same surface and
run on a laptop in milliseconds.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageBatch
from .errors import EmptyInput, ShapeMismatch, WidthMismatch

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass
class EmbeddingBatch:
    vectors: torch.Tensor  # [B, d]
    normalized: bool

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass
class ImageTokens:
    cls_token: torch.Tensor  # [B, width]
    patch_tokens: torch.Tensor  # [B, M, width]


@dataclass
class PromptSet:
    tokens: torch.Tensor  # [V, width]

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError("prompt tokens must be a [V, width] matrix")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("prompt tokens contain NaN/Inf")

    @property
    def V(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def init(cls, V: int, width: int, seed: int, dtype=torch.float32) -> "PromptSet":
        """Uniform in [-r, r], r = sqrt(6 / (width + V))."""
        if V < 0:
            raise ValueError("V must be >= 0")
        g = torch.Generator().manual_seed(seed)
        r = math.sqrt(6.0 / (width + V)) if V else 0.0
        tokens = (torch.rand(V, width, generator=g, dtype=torch.float64) * 2 - 1) * r
        return cls(tokens.to(dtype))

    @classmethod
    def empty(cls, width: int, dtype=torch.float32) -> "PromptSet":
        return cls(torch.zeros(0, width, dtype=dtype))


class TextEncoder(Protocol):
    out_dim: int

    def encode(self, texts: Sequence[str]) -> torch.Tensor: ...


class VisionEncoder(Protocol):
    out_dim: int
    width: int
    image_size: int

    def __call__(self, pixels: torch.Tensor, prompts: torch.Tensor | None = None) -> torch.Tensor: ...


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def parameter_checksum(module: nn.Module) -> str:
    """sha256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- toy text encoder ---------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@lru_cache(maxsize=200_000)
def token_vector(token: str, seed: int, dim: int) -> np.ndarray:
    """Seeded hash of ``token`` expanded to a fixed Gaussian vector."""
    digest = hashlib.blake2b(f"{seed}:{token}".encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(dim)
    v.setflags(write=False)
    return v


class ToyTextEncoder(nn.Module):
    """Bag of hashed tokens followed by a fixed random projection.

    ``encode(text) = W.T @ sum_t token_vector(t)`` where the token list is
    truncated to ``context_length``; the caller normalizes.
    """

    def __init__(self, out_dim: int, hash_dim: int = 64, context_length: int = 77, seed: int = 0):
        super().__init__()
        self.out_dim = out_dim
        self.hash_dim = hash_dim
        self.context_length = context_length
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("proj", torch.randn(hash_dim, out_dim, generator=g, dtype=torch.float64)
                             / math.sqrt(hash_dim))
        self.truncated = 0

    def bag(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if len(tokens) > self.context_length:
            self.truncated += 1
            tokens = tokens[: self.context_length]
        acc = np.zeros(self.hash_dim)
        for t in tokens:
            acc = acc + token_vector(t, self.seed, self.hash_dim)
        return acc

    def encode(self, texts: Sequence[str]) -> torch.Tensor:
        bags = torch.from_numpy(np.stack([self.bag(t) for t in texts]))
        return (bags @ self.proj).float()


# -- toy vision transformer ---------------------------------------------------


class _Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width, elementwise_affine=False)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width, elementwise_affine=False)
        self.fc1 = nn.Linear(width, 2 * width)
        self.fc2 = nn.Linear(2 * width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, W = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln1(x)).split(W, dim=-1)
        q, k, v = (t.reshape(B, T, h, W // h).transpose(1, 2) for t in (q, k, v))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(W // h), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, W)
        x = x + self.out(y)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ToyViT(nn.Module):
    """Patch embedding, CLS + positional embeddings, pre-LN blocks, projected CLS readout.

    Prompts, when given, are inserted between CLS and the patch tokens after
    positional embeddings have been added, i.e. they carry no position.
    """

    def __init__(self, image_size: int, patch_size: int, channels: int, width: int, out_dim: int,
                 depth: int = 1, heads: int = 1, seed: int = 0):
        super().__init__()
        if image_size % patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.image_size = image_size
        self.patch_size = patch_size
        self.channels = channels
        self.width = width
        self.out_dim = out_dim
        self.num_patches = (image_size // patch_size) ** 2
        patch_dim = patch_size * patch_size * channels

        self.patch_embed = nn.Linear(patch_dim, width)
        self.cls = nn.Parameter(torch.empty(width))
        self.pos = nn.Parameter(torch.empty(1 + self.num_patches, width))
        self.blocks = nn.ModuleList(_Block(width, heads) for _ in range(depth))
        self.ln_post = nn.LayerNorm(width, elementwise_affine=False)
        self.proj = nn.Parameter(torch.empty(width, out_dim))
        self._init(seed)
        freeze(self)

    def _init(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                fan_in = p.shape[-1] if p.ndim > 1 else p.shape[0]
                if name.endswith("bias"):
                    p.copy_(torch.randn(p.shape, generator=g) * 0.02)
                elif name in ("cls", "pos"):
                    p.copy_(torch.randn(p.shape, generator=g) * 0.5)
                elif name == "proj":
                    p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(p.shape[0]))
                else:
                    p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(fan_in))

    def patchify(self, pixels: torch.Tensor) -> torch.Tensor:
        """[B, H, W, C] -> [B, M, patch*patch*C] in row-major patch order."""
        B, H, W, C = pixels.shape
        p = self.patch_size
        x = pixels.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, (H // p) * (W // p), p * p * C)

    def tokens(self, pixels: torch.Tensor) -> ImageTokens:
        x = (pixels - 0.5) / 0.25
        patches = self.patch_embed(self.patchify(x)) + self.pos[1:]
        cls = (self.cls + self.pos[0]).expand(pixels.shape[0], -1)
        return ImageTokens(cls, patches)

    def sequence(self, pixels: torch.Tensor, prompts: torch.Tensor | None = None) -> torch.Tensor:
        """Input token sequence [B, 1 + V + M, width]."""
        t = self.tokens(pixels)
        parts = [t.cls_token[:, None]]
        if prompts is not None:
            parts.append(prompts.to(t.patch_tokens.dtype).expand(pixels.shape[0], -1, -1))
        parts.append(t.patch_tokens)
        return torch.cat(parts, dim=1)

    def forward(self, pixels: torch.Tensor, prompts: torch.Tensor | None = None) -> torch.Tensor:
        x = self.sequence(pixels, prompts)
        for blk in self.blocks:
            x = blk(x)
        return self.ln_post(x[:, 0]) @ self.proj


class VisionAsSSL(nn.Module):
    """Expose a vision-language image encoder through the SSL slot."""

    def __init__(self, vision: nn.Module):
        super().__init__()
        self.inner = vision
        self.out_dim = vision.out_dim
        self.image_size = vision.image_size

    def forward(self, pixels: torch.Tensor, prompts=None) -> torch.Tensor:
        return self.inner(pixels)


# -- bundle -------------------------------------------------------------------


@dataclass(frozen=True)
class ToyEncoderConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    vlm_width: int = 16
    ssl_width: int = 24
    d_vlm: int = 32
    d_ssl: int = 48
    depth: int = 1
    ssl_depth: int = 1
    heads: int = 1
    text_hash_dim: int = 64
    context_length: int = 77

    def __post_init__(self):
        for k in ("image_size", "patch_size", "channels", "vlm_width", "ssl_width", "d_vlm", "d_ssl",
                  "depth", "ssl_depth", "heads", "text_hash_dim", "context_length"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")


@dataclass
class EncoderBundle:
    text_encoder: nn.Module
    vision_encoder: nn.Module
    ssl_encoder: nn.Module
    d_vlm: int
    d_ssl: int

    def __post_init__(self):
        if self.text_encoder.out_dim != self.vision_encoder.out_dim:
            raise WidthMismatch("text and vision encoders must share an output dimension")
        for m in (self.text_encoder, self.vision_encoder, self.ssl_encoder):
            freeze(m)

    @property
    def image_size(self) -> int:
        return self.vision_encoder.image_size

    @property
    def width(self) -> int:
        return self.vision_encoder.width

    def checksums(self) -> dict[str, str]:
        return {
            "text": parameter_checksum(self.text_encoder),
            "vision": parameter_checksum(self.vision_encoder),
            "ssl": parameter_checksum(self.ssl_encoder),
        }

    def with_vision_as_ssl(self) -> "EncoderBundle":
        """Same bundle with the vision-language image encoder in the SSL slot."""
        ssl = VisionAsSSL(self.vision_encoder)
        return EncoderBundle(self.text_encoder, self.vision_encoder, ssl, self.d_vlm, ssl.out_dim)

    def to(self, dtype: torch.dtype) -> "EncoderBundle":
        for m in (self.text_encoder, self.vision_encoder, self.ssl_encoder):
            m.to(dtype)
        return self


def make_toy_encoders(config: ToyEncoderConfig = ToyEncoderConfig(), seed: int = 0) -> EncoderBundle:
    # distinct derived seeds keep the VLM and SSL geometries independent
    text = ToyTextEncoder(config.d_vlm, config.text_hash_dim, config.context_length, seed=seed * 3 + 1)
    vision = ToyViT(config.image_size, config.patch_size, config.channels, config.vlm_width,
                    config.d_vlm, config.depth, config.heads, seed=seed * 3 + 2)
    ssl = ToyViT(config.image_size, config.patch_size, config.channels, config.ssl_width,
                 config.d_ssl, config.ssl_depth, config.heads, seed=seed * 3 + 3)
    return EncoderBundle(text, vision, ssl, config.d_vlm, config.d_ssl)


# -- operations -----------------------------------------------------------------


def _pixels(bundle: EncoderBundle, batch: ImageBatch | torch.Tensor, encoder) -> torch.Tensor:
    px = batch.pixels if isinstance(batch, ImageBatch) else batch
    size = encoder.image_size
    if px.ndim != 4 or px.shape[1] != size or px.shape[2] != size:
        raise ShapeMismatch(f"expected [B, {size}, {size}, C] pixels, got {tuple(px.shape)}")
    dtype = next(iter(encoder.parameters()), px).dtype
    return px.to(dtype)


def encode_text(bundle: EncoderBundle, texts: Sequence[str]) -> EmbeddingBatch:
    if not texts:
        raise EmptyInput("no texts to encode")
    with torch.no_grad():
        out = bundle.text_encoder.encode(list(texts))
    return EmbeddingBatch(l2_normalize(out), normalized=True)


def encode_image(bundle: EncoderBundle, batch: ImageBatch | torch.Tensor) -> EmbeddingBatch:
    px = _pixels(bundle, batch, bundle.vision_encoder)
    with torch.no_grad():
        out = bundle.vision_encoder(px)
    return EmbeddingBatch(l2_normalize(out), normalized=True)


def encode_image_prompted(bundle: EncoderBundle, batch: ImageBatch | torch.Tensor,
                          prompts: PromptSet | torch.Tensor | None) -> EmbeddingBatch:
    """Differentiable in the prompt tokens only; encoder weights stay frozen."""
    tokens = prompts.tokens if isinstance(prompts, PromptSet) else prompts
    if tokens is not None and tokens.shape[-1] != bundle.width:
        raise WidthMismatch(f"prompt width {tokens.shape[-1]} != encoder width {bundle.width}")
    px = _pixels(bundle, batch, bundle.vision_encoder)
    out = bundle.vision_encoder(px, tokens)
    return EmbeddingBatch(l2_normalize(out), normalized=True)


def encode_ssl(bundle: EncoderBundle, batch: ImageBatch | torch.Tensor) -> EmbeddingBatch:
    px = _pixels(bundle, batch, bundle.ssl_encoder)
    with torch.no_grad():
        out = bundle.ssl_encoder(px)
    return EmbeddingBatch(out, normalized=False)
