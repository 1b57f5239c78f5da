"""Pluggable image/text encoder pairs.

An encoder pair maps preprocessed images and raw texts into one shared
feature space (the engine requires equal dimensions on both sides).

"patch-stat" is the offline default: deterministic block statistics over the
preprocessed image and hashed bag-of-words for text.  It needs no model
weights, so exports are reproducible byte-for-byte anywhere.  "st:<name>"
wraps a sentence-transformers contrastive vision-language model (e.g.
"st:clip-ViT-B-32") when its weights are available locally.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from PIL import Image

PREPROCESS = {"pad_ratio": 1.25, "size": 224, "fill": 255}


def preprocess_image(path) -> Image.Image:
    """Pad to a square 1.25x the longer side, centered, then resize to 224."""
    with Image.open(path) as raw:
        img = raw.convert("RGB")
    side = max(1, int(round(PREPROCESS["pad_ratio"] * max(img.size))))
    canvas = Image.new("RGB", (side, side), (PREPROCESS["fill"],) * 3)
    canvas.paste(img, ((side - img.width) // 2, (side - img.height) // 2))
    return canvas.resize((PREPROCESS["size"], PREPROCESS["size"]), Image.BILINEAR)


class PatchStatEncoder:
    """Deterministic offline encoder: block means + grayscale block stds.

    dim = 3 * grid^2 (channel means) + grid^2 (gray stds); grid=8 gives 256.
    """

    def __init__(self, grid: int = 8):
        self.grid = grid
        self.dim = 4 * grid * grid
        self.name = f"patch-stat-g{grid}"

    def encode_images(self, paths) -> np.ndarray:
        out = np.empty((len(paths), self.dim), dtype=np.float32)
        for i, path in enumerate(paths):
            img = preprocess_image(path)
            arr = np.asarray(img, dtype=np.float32) / 255.0  # (224, 224, 3)
            g = self.grid
            block = arr.reshape(g, 224 // g, g, 224 // g, 3)
            means = block.mean(axis=(1, 3))  # (g, g, 3)
            gray = arr.mean(axis=2).reshape(g, 224 // g, g, 224 // g)
            stds = gray.std(axis=(1, 3))  # (g, g)
            out[i] = np.concatenate(
                [means.reshape(-1) - 0.5, stds.reshape(-1)]
            ).astype(np.float32)
        return out

    def encode_texts(self, texts) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            tokens = [t for t in "".join(
                c.lower() if c.isalnum() else " " for c in text
            ).split() if t]
            for token in tokens:
                digest = hashlib.sha256(token.encode("utf-8")).digest()
                index = int.from_bytes(digest[:4], "little") % self.dim
                sign = 1.0 if digest[4] % 2 == 0 else -1.0
                out[i, index] += sign
            if tokens:
                out[i] /= math.sqrt(len(tokens))
            else:
                out[i, 0] = 1e-6  # keep the vector nonzero for empty text
        return out


class SentenceTransformerEncoder:
    """Contrastive vision-language encoder via sentence-transformers."""

    def __init__(self, model_name: str, device: str = "cpu", batch_size: int = 32):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise RuntimeError(
                "sentence-transformers is not installed; "
                "install embexport[clip] or use the patch-stat encoder"
            ) from exc
        self.model = SentenceTransformer(model_name, device=device)
        self.dim = int(self.model.get_sentence_embedding_dimension())
        self.name = f"st:{model_name}"
        self.batch_size = batch_size

    def encode_images(self, paths) -> np.ndarray:
        images = [preprocess_image(p) for p in paths]
        return np.asarray(
            self.model.encode(images, batch_size=self.batch_size, convert_to_numpy=True),
            dtype=np.float32,
        )

    def encode_texts(self, texts) -> np.ndarray:
        return np.asarray(
            self.model.encode(list(texts), batch_size=self.batch_size, convert_to_numpy=True),
            dtype=np.float32,
        )


def build_encoder(name: str, device: str = "cpu", batch_size: int = 32):
    if name.startswith("st:"):
        return SentenceTransformerEncoder(name[3:], device=device, batch_size=batch_size)
    if name.startswith("patch-stat"):
        grid = 8
        if "-g" in name:
            grid = int(name.rsplit("-g", 1)[1])
        return PatchStatEncoder(grid=grid)
    raise ValueError(f"unknown encoder {name!r} (use 'patch-stat' or 'st:<model>')")
