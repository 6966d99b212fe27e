"""Encoder registry.

Encoders are versioned; jobs pin the version they ran with in a lock file
so silent encoder drift cannot invalidate downstream caches. The built-in
encoders are deterministic and fully offline: pixel statistics under a
seeded random projection for images, hashed bag-of-words for texts. Heavier
encoders register through the same interface.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image


class EncoderError(ValueError):
    pass


class PixelStatEncoder:
    """Downsampled RGB pixels through a fixed seeded projection."""

    name = "pixelstat"
    version = "1"

    def __init__(self, dim: int = 256, grid: int = 16, seed: int = 0):
        self.dim = dim
        self.grid = grid
        rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
        raw = 3 * grid * grid
        self.projection = (
            rng.standard_normal((raw, dim)) / np.sqrt(raw)
        ).astype(np.float32)

    def encode_image(self, path) -> np.ndarray:
        try:
            with Image.open(path) as img:
                pixels = np.asarray(
                    img.convert("RGB").resize((self.grid, self.grid)),
                    dtype=np.float32,
                )
        except (OSError, ValueError) as exc:
            raise EncoderError(f"cannot read image {path}: {exc}")
        flat = (pixels / 255.0 - 0.5).reshape(-1)
        return flat @ self.projection


class HashBowEncoder:
    """Hashed bag-of-words text features, 4 slots per token."""

    name = "hashbow"
    version = "1"

    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def encode_text(self, text: str) -> np.ndarray:
        tokens = text.split()
        if not tokens:
            raise EncoderError(f"cannot embed empty text {text!r}")
        vec = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            digest = hashlib.sha256(f"{self.seed}:{tok}".encode("utf-8")).digest()
            for slot in range(4):
                idx = int.from_bytes(digest[4 * slot:4 * slot + 2], "little") % self.dim
                sign = 1.0 if digest[4 * slot + 2] & 1 else -1.0
                vec[idx] += sign
        return vec.astype(np.float32)


IMAGE_ENCODERS = {"pixelstat": PixelStatEncoder}
TEXT_ENCODERS = {"hashbow": HashBowEncoder}


def make_image_encoder(name: str, dim: int):
    if name not in IMAGE_ENCODERS:
        raise EncoderError(f"unknown image encoder {name!r} "
                           f"(available: {sorted(IMAGE_ENCODERS)})")
    return IMAGE_ENCODERS[name](dim=dim)


def make_text_encoder(name: str, dim: int):
    if name not in TEXT_ENCODERS:
        raise EncoderError(f"unknown text encoder {name!r} "
                           f"(available: {sorted(TEXT_ENCODERS)})")
    return TEXT_ENCODERS[name](dim=dim)


def pin_encoder_version(lock_path, encoder) -> None:
    """Record the encoder version; refuse to run against a different pin."""
    lock_path = Path(lock_path)
    locked = {}
    if lock_path.exists():
        with open(lock_path, "r", encoding="utf-8") as fh:
            locked = json.load(fh)
    pinned = locked.get(encoder.name)
    if pinned is not None and pinned != encoder.version:
        raise EncoderError(
            f"encoder {encoder.name!r} is pinned to version {pinned} in "
            f"{lock_path}, but version {encoder.version} is installed"
        )
    if pinned is None:
        locked[encoder.name] = encoder.version
        with open(lock_path, "w", encoding="utf-8") as fh:
            json.dump(locked, fh, indent=2, sort_keys=True)
            fh.write("\n")
