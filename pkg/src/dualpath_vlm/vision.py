"""Frozen toy ViT: patchify, linear patch projection, learned positions, encoder blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn import EncoderBlock, Linear, Module, _param
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class VisionConfig:
    patch_size: int = 8
    d_v: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    mlp_ratio: int = 4
    image_size: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.d_v % self.n_heads:
            raise ShapeError(f"d_v={self.d_v} not divisible by n_heads={self.n_heads}")
        if self.image_size % self.patch_size:
            raise ShapeError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def num_patches(self) -> int:
        r, c = self.grid
        return r * c


@dataclass
class PatchEmbeddings:
    values: Tensor  # [N, d_v]
    source_grid: tuple[int, int]

    @property
    def num_patches(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def validate_image(image: np.ndarray, patch_size: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be H x W x 3, got {image.shape}")
    H, W, _ = image.shape
    if H % patch_size or W % patch_size:
        raise ShapeError(f"image {H}x{W} not divisible by patch size {patch_size}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return image


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """[H, W, C] -> [N, p*p*C]; patches ordered left-to-right, top-to-bottom,
    each flattened row-major over (row, col, channel)."""
    image = validate_image(image, patch_size)
    H, W, C = image.shape
    p = patch_size
    rows, cols = H // p, W // p
    return image.reshape(rows, p, cols, p, C).transpose(0, 2, 1, 3, 4).reshape(rows * cols, p * p * C)


class VisionEncoder(Module):
    """All parameters are created frozen and stay frozen."""

    def __init__(self, config: VisionConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 1])
        p = config.patch_size
        self.patch_proj = Linear(rng, p * p * 3, config.d_v)
        self.pos = _param(rng, (config.num_patches, config.d_v), 0.02)
        self.blocks = [EncoderBlock(rng, config.d_v, config.n_heads, config.mlp_ratio) for _ in range(config.n_blocks)]
        for par in self.parameters():
            par.freeze()

    def forward(self, images: np.ndarray) -> Tensor:
        """[B, H, W, 3] -> [B, N, d_v]."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        patches = np.stack([patchify(img, self.config.patch_size) for img in images])
        if patches.shape[1] != self.config.num_patches:
            raise ShapeError(f"expected {self.config.num_patches} patches, got {patches.shape[1]}")
        x = self.patch_proj(Tensor(patches)) + self.pos.tensor
        for block in self.blocks:
            x = block(x)
        return x

    def encode_images(self, images: np.ndarray) -> Tensor:
        with no_grad():
            return self.forward(images)

    def encode_image(self, image: np.ndarray) -> PatchEmbeddings:
        out = self.encode_images(np.asarray(image)[None])
        H, W = np.asarray(image).shape[:2]
        p = self.config.patch_size
        return PatchEmbeddings(Tensor(out.data[0]), (H // p, W // p))
