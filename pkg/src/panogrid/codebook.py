"""Codebook management, token/pixel conversion, and boundary-token blending.

The codebook is a stand-in for a trained VQ tokenizer: K embedding vectors in
[0, 1]^d whose first three components define the flat RGB color each token
renders to. Rendering is exactly invertible (up to 8-bit rounding), which makes
encode/decode a testable pair without any learned weights.

Embeddings are built as per-dimension Gaussian random walks rescaled to [0, 1],
so nearby token ids map to nearby colors. Generators that prefer small id steps
therefore produce images whose smoothness is visible to pixel metrics.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import CodebookError, ConfigError, InputError, ShapeError
from .grid import TokenGrid

PCBK_MAGIC = b"PCBK"
PCBK_VERSION = 1

DEFAULT_PATCH_SIZE = 16  # pixels per token side; 512-px blocks / 32-token side


@dataclass(frozen=True)
class Codebook:
    """K embedding vectors of dimension d plus the patch size q."""

    embeddings: np.ndarray  # (K, d) float64, components in [0, 1]
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ConfigError("embeddings must be a (K, d) matrix")
        if emb.shape[0] < 2:
            raise ConfigError(f"codebook needs K >= 2 entries, got {emb.shape[0]}")
        if emb.shape[1] < 3:
            raise ConfigError(f"embedding dimension must be >= 3, got {emb.shape[1]}")
        if not np.isfinite(emb).all():
            raise ConfigError("embeddings must be finite")
        if self.patch_size < 1:
            raise ConfigError(f"patch size must be >= 1, got {self.patch_size}")
        emb.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def colors(self) -> np.ndarray:
        """Rendered uint8 RGB color of every entry (first 3 dims, half-up)."""
        return np.floor(self.embeddings[:, :3] * 255.0 + 0.5).astype(np.uint8)


def build_codebook(
    size: int, dim: int, seed: int, patch_size: int = DEFAULT_PATCH_SIZE
) -> Codebook:
    """Deterministic codebook from a seed.

    Each dimension is a cumulative sum of standard normals over the K entries,
    min-max rescaled into [0, 1]; adjacent ids end up with similar embeddings.
    """
    if size < 2:
        raise ConfigError(f"codebook needs K >= 2 entries, got {size}")
    if dim < 3:
        raise ConfigError(f"embedding dimension must be >= 3, got {dim}")
    rng = np.random.default_rng(seed)
    walk = np.cumsum(rng.standard_normal((size, dim)), axis=0)
    lo = walk.min(axis=0)
    span = walk.max(axis=0) - lo
    span[span == 0.0] = 1.0
    return Codebook((walk - lo) / span, patch_size)


def decode_tokens(grid: TokenGrid, codebook: Codebook) -> np.ndarray:
    """Render a token grid to an RGB image, one flat q x q patch per token.

    Returns a (rows*q, cols*q, 3) uint8 array.
    """
    arr = grid.to_array()
    if arr.size and int(arr.max()) >= codebook.size:
        raise CodebookError(
            f"token id {int(arr.max())} outside codebook of size {codebook.size}"
        )
    q = codebook.patch_size
    patch_colors = codebook.colors()[arr]  # (rows, cols, 3)
    return np.repeat(np.repeat(patch_colors, q, axis=0), q, axis=1)


def encode_image(image: np.ndarray, codebook: Codebook) -> TokenGrid:
    """Quantize an RGB image back to tokens, nearest entry per q x q patch.

    Patch means (in [0, 1]) are matched against the first three embedding
    dimensions by squared Euclidean distance; ties go to the lowest index.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {image.shape}")
    q = codebook.patch_size
    h, w = image.shape[:2]
    if h % q or w % q:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {q}")
    means = (
        image.astype(np.float64).reshape(h // q, q, w // q, q, 3).mean(axis=(1, 3)) / 255.0
    )  # (rows, cols, 3)
    refs = codebook.embeddings[:, :3]
    d2 = ((means[:, :, None, :] - refs[None, None, :, :]) ** 2).sum(axis=-1)
    ids = np.argmin(d2, axis=-1)  # argmin takes the first (lowest) index on ties
    return TokenGrid.from_array(ids)


def blend_boundary(
    e_prev: np.ndarray, e_cur: np.ndarray, lam: float, codebook: Codebook
) -> int:
    """Re-quantize a boundary-token pair through a convex embedding blend.

    Computes lam * e_cur + (1 - lam) * e_prev and returns the codebook index
    nearest to it in squared Euclidean distance (lowest index on ties). lam=1
    keeps the current-side token, lam=0 keeps the previous-side one.
    """
    e_prev = np.asarray(e_prev, dtype=np.float64)
    e_cur = np.asarray(e_cur, dtype=np.float64)
    if e_prev.shape != (codebook.dim,) or e_cur.shape != (codebook.dim,):
        raise ShapeError(
            f"boundary embeddings must have dimension {codebook.dim}, "
            f"got {e_prev.shape} and {e_cur.shape}"
        )
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"transition factor must be in [0, 1], got {lam}")
    blended = lam * e_cur + (1.0 - lam) * e_prev
    d2 = ((codebook.embeddings - blended) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def write_pcbk(codebook: Codebook, path) -> None:
    """PCBK v1: magic, version, u32-LE K/d/q, then K*d float64-LE embeddings."""
    payload = bytearray()
    payload += PCBK_MAGIC
    payload += struct.pack("<B", PCBK_VERSION)
    payload += struct.pack("<III", codebook.size, codebook.dim, codebook.patch_size)
    payload += codebook.embeddings.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(payload))


def read_pcbk(path) -> Codebook:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 17 or data[:4] != PCBK_MAGIC:
        raise InputError(f"{path}: not a PCBK file")
    if data[4] != PCBK_VERSION:
        raise InputError(f"{path}: unsupported PCBK version {data[4]}")
    k, d, q = struct.unpack_from("<III", data, 5)
    expected = 17 + 8 * k * d
    if len(data) != expected:
        raise InputError(f"{path}: expected {expected} bytes, found {len(data)}")
    emb = np.frombuffer(data, dtype="<f8", count=k * d, offset=17).reshape(k, d)
    return Codebook(emb.copy(), q)


def write_png(image: np.ndarray, path) -> None:
    """8-bit RGB PNG, no alpha."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ShapeError("PNG output expects an (H, W, 3) uint8 image")
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: cannot read PNG ({exc})") from exc
