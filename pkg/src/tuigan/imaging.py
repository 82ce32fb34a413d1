"""Image I/O, normalization, resampling and pyramid construction.

An image is a float tensor of shape ``(1, 3, H, W)`` with values in [-1, 1].
Every other module passes images around in this form.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import ConfigError, ImageFormatError, ShapeError

MIN_SIZE = 16

Image = torch.Tensor


def check_image(img: torch.Tensor, name: str = "image") -> torch.Tensor:
    if not isinstance(img, torch.Tensor) or img.dim() != 4:
        raise ShapeError(f"{name} must be a (1, 3, H, W) tensor")
    if img.shape[0] != 1 or img.shape[1] != 3:
        raise ShapeError(f"{name} must have batch 1 and 3 channels, got {tuple(img.shape)}")
    if img.shape[2] < 1 or img.shape[3] < 1:
        raise ShapeError(f"{name} has empty spatial dims {tuple(img.shape[2:])}")
    return img


def image_size(img: torch.Tensor) -> tuple[int, int]:
    return int(img.shape[2]), int(img.shape[3])


def from_uint8(array: np.ndarray) -> torch.Tensor:
    """Map an ``(H, W, 3)`` uint8 array to a normalized image."""
    data = torch.from_numpy(np.array(array, dtype=np.float32))
    data = data / 127.5 - 1.0
    return data.permute(2, 0, 1).unsqueeze(0).contiguous()


def to_uint8(img: torch.Tensor) -> np.ndarray:
    check_image(img)
    data = img.detach().to(torch.float64).clamp(-1.0, 1.0)
    data = torch.round((data + 1.0) * 127.5)
    return data[0].permute(1, 2, 0).cpu().numpy().astype(np.uint8)


def load_image(path: str | os.PathLike) -> torch.Tensor:
    """Read an 8-bit PNG/JPEG (grayscale is promoted to RGB) as an image in [-1, 1]."""
    try:
        with PILImage.open(path) as pil:
            if pil.format not in ("PNG", "JPEG"):
                raise ImageFormatError(f"{path}: unsupported format {pil.format}")
            if pil.mode not in ("1", "L", "P", "RGB", "RGBA", "LA"):
                raise ImageFormatError(f"{path}: unsupported pixel mode {pil.mode}")
            array = np.asarray(pil.convert("RGB"))
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a decodable image") from exc
    return from_uint8(array)


def save_image(img: torch.Tensor, path: str | os.PathLike) -> None:
    """Write ``img`` as a lossless 8-bit RGB PNG."""
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def resample(img: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Bicubic resize to ``(target_h, target_w)``, clamped back into [-1, 1]."""
    check_image(img)
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target size must be positive, got {target_h}x{target_w}")
    if image_size(img) == (target_h, target_w):
        return img.clone()
    out = F.interpolate(img, size=(target_h, target_w), mode="bicubic", align_corners=True)
    return out.clamp(-1.0, 1.0)


def scaled_size(h: int, w: int, s: float, n: int) -> tuple[int, int]:
    # round half up
    factor = (1.0 / s) ** n
    return int(math.floor(h * factor + 0.5)), int(math.floor(w * factor + 0.5))


@dataclass(frozen=True)
class ImagePyramid:
    levels: tuple[torch.Tensor, ...]
    scale_factor: float

    @property
    def N(self) -> int:
        return len(self.levels) - 1

    def __getitem__(self, n: int) -> torch.Tensor:
        return self.levels[n]

    def __len__(self) -> int:
        return len(self.levels)

    def sizes(self) -> list[tuple[int, int]]:
        return [image_size(level) for level in self.levels]


def pyramid_sizes(h: int, w: int, N: int, s: float, min_size: int = MIN_SIZE) -> list[tuple[int, int]]:
    if N < 0:
        raise ConfigError(f"number of scales N must be >= 0, got {N}")
    if s <= 1:
        raise ConfigError(f"scale factor s must be > 1, got {s}")
    sizes = [scaled_size(h, w, s, n) for n in range(N + 1)]
    coarsest = sizes[-1]
    if min(coarsest) < min_size:
        raise ConfigError(
            f"coarsest pyramid level {coarsest[0]}x{coarsest[1]} is below the minimum size "
            f"{min_size}; use a smaller N (got {N}) or a larger input ({h}x{w})"
        )
    return sizes


def build_pyramid(img: torch.Tensor, N: int, s: float, min_size: int = MIN_SIZE) -> ImagePyramid:
    """Downsample ``img`` to ``N + 1`` scales; level 0 is the input itself."""
    check_image(img)
    h, w = image_size(img)
    sizes = pyramid_sizes(h, w, N, s, min_size)
    levels = [img] + [resample(img, th, tw) for th, tw in sizes[1:]]
    return ImagePyramid(levels=tuple(levels), scale_factor=float(s))


def fit_max_size(img: torch.Tensor, max_size: int) -> torch.Tensor:
    """Shrink so the longer side is at most ``max_size``; never enlarges."""
    h, w = image_size(img)
    longer = max(h, w)
    if longer <= max_size:
        return img
    ratio = max_size / longer
    return resample(img, max(1, int(math.floor(h * ratio + 0.5))), max(1, int(math.floor(w * ratio + 0.5))))
