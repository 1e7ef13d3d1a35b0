"""Pretrained CLIP and DINO backbones behind the toy-encoder interface.

Requires the optional ``transformers`` dependency. Pixels arrive as
[B, H, W, C] floats in [0, 1] and are normalized here with each backbone's
published mean and std.
"""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn

from .encoders import EncoderBundle, VisionAsSSL
from .errors import ConfigError

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class _Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = pixels.permute(0, 3, 1, 2)
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)


class CLIPVision(nn.Module):
    """CLIP image tower; prompts go between the CLS embedding and the patch embeddings."""

    def __init__(self, clip_model: nn.Module):
        super().__init__()
        cfg = clip_model.config
        self.vision = clip_model.vision_model
        self.projection = clip_model.visual_projection
        self.norm = _Normalize(CLIP_MEAN, CLIP_STD)
        self.image_size = cfg.vision_config.image_size
        self.width = cfg.vision_config.hidden_size
        self.out_dim = cfg.projection_dim

    def forward(self, pixels: torch.Tensor, prompts: torch.Tensor | None = None) -> torch.Tensor:
        h = self.vision.embeddings(self.norm(pixels))
        if prompts is not None and prompts.shape[0]:
            p = prompts.to(h.dtype).expand(h.shape[0], -1, -1)
            h = torch.cat([h[:, :1], p, h[:, 1:]], dim=1)
        h = self.vision.pre_layrnorm(h)
        h = self.vision.encoder(inputs_embeds=h).last_hidden_state
        return self.projection(self.vision.post_layernorm(h[:, 0]))


class CLIPText(nn.Module):
    def __init__(self, clip_model: nn.Module, tokenizer: Callable[[list[str]], dict]):
        super().__init__()
        self.text = clip_model.text_model
        self.projection = clip_model.text_projection
        self.tokenizer = tokenizer
        self.out_dim = clip_model.config.projection_dim

    def encode(self, texts: Sequence[str]) -> torch.Tensor:
        tok = self.tokenizer(list(texts))
        pooled = self.text(input_ids=tok["input_ids"], attention_mask=tok.get("attention_mask")).pooler_output
        return self.projection(pooled)


class DINOEncoder(nn.Module):
    """Self-supervised ViT; the final-layer CLS token is the feature."""

    def __init__(self, vit_model: nn.Module):
        super().__init__()
        self.model = vit_model
        self.norm = _Normalize(IMAGENET_MEAN, IMAGENET_STD)
        self.image_size = vit_model.config.image_size
        self.out_dim = vit_model.config.hidden_size

    def forward(self, pixels: torch.Tensor, prompts=None) -> torch.Tensor:
        return self.model(pixel_values=self.norm(pixels)).last_hidden_state[:, 0]


def clip_tokenizer(path: str | Path, max_length: int = 77) -> Callable[[list[str]], dict]:
    from transformers import CLIPTokenizer

    tok = CLIPTokenizer.from_pretrained(str(path))

    def run(texts: list[str]) -> dict:
        return tok(texts, padding=True, truncation=True, max_length=max_length, return_tensors="pt")

    return run


def bundle_from_models(clip_model: nn.Module, tokenizer: Callable, ssl_model: nn.Module | None = None) -> EncoderBundle:
    vision = CLIPVision(clip_model)
    text = CLIPText(clip_model, tokenizer)
    ssl = DINOEncoder(ssl_model) if ssl_model is not None else VisionAsSSL(vision)
    if ssl.image_size != vision.image_size:
        raise ConfigError(f"SSL input size {ssl.image_size} != VLM input size {vision.image_size}")
    for m in (vision, text, ssl):
        m.eval()
    return EncoderBundle(text, vision, ssl, vision.out_dim, ssl.out_dim)


def load_pretrained_bundle(vlm_checkpoint: str | Path, ssl_checkpoint: str | Path | None = None) -> EncoderBundle:
    """Load CLIP (and optionally DINO) from local directories or hub names.

    Without an SSL checkpoint the CLIP image tower also fills the SSL slot.
    """
    try:
        from transformers import CLIPModel, ViTModel
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ConfigError("pretrained encoders need the 'transformers' package") from exc
    clip = CLIPModel.from_pretrained(str(vlm_checkpoint))
    ssl = ViTModel.from_pretrained(str(ssl_checkpoint), add_pooling_layer=False) if ssl_checkpoint else None
    return bundle_from_models(clip, clip_tokenizer(vlm_checkpoint), ssl)
