"""Latent codec: an exact, parameter-free stand-in for a learned VAE.

Pixels are rearranged space-to-depth so every latent-space computation has a
bit-exact pixel oracle: ``decode(encode(x)) == x`` with no tolerance, and the
map is linear. A learned codec can be swapped in behind the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InputError


class CodecError(ValueError):
    """Latent metadata is inconsistent with its data array."""


@dataclass(frozen=True)
class LatentImage:
    """Codec latent of one image plus what decoding needs to restore it.

    ``seq_index`` is the image's order of appearance in its sequence; the
    generation head's temporal axis is built from these.
    """

    data: np.ndarray  # [h_lat, w_lat, c_lat]
    height_px: int
    width_px: int
    seq_index: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise CodecError(f"latent must be rank 3, got shape {self.data.shape}")
        if self.seq_index < 0:
            raise CodecError("seq_index must be >= 0")

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def patch(self) -> int:
        p2 = self.channels // 3
        p = int(round(p2**0.5))
        if 3 * p * p != self.channels:
            raise CodecError(f"latent channels {self.channels} is not 3*patch^2")
        return p

    @property
    def tokens(self) -> int:
        return self.data.shape[0] * self.data.shape[1]


def encode(pixels: np.ndarray, patch: int, seq_index: int = 0) -> LatentImage:
    """Space-to-depth: [H, W, 3] -> [H/patch, W/patch, 3*patch^2], lossless."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise InputError(f"expected [H, W, 3] pixels, got shape {pixels.shape}")
    h, w = pixels.shape[0], pixels.shape[1]
    if h % patch != 0:
        raise InputError(f"height {h} not divisible by patch {patch}")
    if w % patch != 0:
        raise InputError(f"width {w} not divisible by patch {patch}")
    hl, wl = h // patch, w // patch
    lat = pixels.reshape(hl, patch, wl, patch, 3).transpose(0, 2, 1, 3, 4).reshape(hl, wl, 3 * patch * patch)
    return LatentImage(data=np.ascontiguousarray(lat), height_px=h, width_px=w, seq_index=seq_index)


def decode(latent: LatentImage) -> np.ndarray:
    """Exact inverse of :func:`encode`; output is [height_px, width_px, 3]."""
    hl, wl = latent.grid
    c = latent.channels
    p = latent.patch  # raises CodecError when c != 3*patch^2
    if hl * p != latent.height_px or wl * p != latent.width_px:
        raise CodecError(
            f"latent grid {hl}x{wl} with patch {p} does not match recorded size "
            f"{latent.height_px}x{latent.width_px}"
        )
    pix = latent.data.reshape(hl, wl, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(hl * p, wl * p, 3)
    return np.ascontiguousarray(pix)
