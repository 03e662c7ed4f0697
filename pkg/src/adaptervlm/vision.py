"""Frozen vision stand-ins and the trainable projection into the decoder.

A 16x16 single-channel image is cut into sixteen 4x4 patches; a frozen
seeded linear map turns each flattened patch into a feature row. A single
frozen cross-attention (fixed learned-query style) condenses the sixteen
patch features into n_query visual tokens, and a trainable affine
projection lifts those tokens into the decoder's hidden space. Only the
projection ever receives gradients.

Feature files are a tiny binary format: 8-byte magic ``AG4FEAT1``, two
little-endian uint32 dims (rows, cols), then row-major float64 data.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor, row_softmax

IMAGE_SIDE = 16
PATCH_SIDE = 4
N_PATCHES = (IMAGE_SIDE // PATCH_SIDE) ** 2   # 16
PATCH_PIXELS = PATCH_SIDE * PATCH_SIDE        # 16

FEATURE_MAGIC = b"AG4FEAT1"


class FeatureFileError(ValueError):
    """A feature file is malformed or truncated."""


@dataclass(frozen=True)
class SyntheticImage:
    pixels: np.ndarray  # [16, 16], values in [0, 1]
    class_id: int
    intensity_id: int


@dataclass
class VisionStub:
    """Frozen seeded patch encoder standing in for a pretrained backbone."""

    patch_w: Tensor  # [PATCH_PIXELS, vis_width]
    patch_b: Tensor  # [vis_width]

    @classmethod
    def seeded(cls, vis_width: int, rng: np.random.Generator) -> "VisionStub":
        w = rng.normal(0.0, 1.0 / np.sqrt(PATCH_PIXELS), size=(PATCH_PIXELS, vis_width))
        # Center columns so a constant patch maps to zero: features carry
        # within-patch structure, not the shared brightness offset.
        w -= w.mean(axis=0, keepdims=True)
        return cls(patch_w=Tensor(w), patch_b=Tensor(np.zeros(vis_width)))

    @property
    def vis_width(self) -> int:
        return self.patch_w.shape[1]


@dataclass
class VisionBridge:
    """Patch stub + frozen query set + trainable projection."""

    stub: VisionStub
    queries: Tensor  # [n_query, vis_width], frozen
    proj_w: Tensor   # [vis_width, hidden], trainable
    proj_b: Tensor   # [hidden], trainable

    @classmethod
    def init(cls, vis_width: int, n_query: int, hidden: int,
             rng: np.random.Generator) -> "VisionBridge":
        stub = VisionStub.seeded(vis_width, rng)
        # Sharp frozen queries so each one selects patches instead of
        # averaging them all; averaging would wash out class structure.
        queries = Tensor(rng.normal(0.0, 4.0, size=(n_query, vis_width)))
        bound = 1.0 / np.sqrt(vis_width)
        proj_w = Tensor(rng.uniform(-bound, bound, size=(vis_width, hidden)))
        proj_b = Tensor(np.zeros(hidden))
        return cls(stub=stub, queries=queries, proj_w=proj_w, proj_b=proj_b)


def _to_pixels(img) -> np.ndarray:
    pixels = img.pixels if isinstance(img, SyntheticImage) else np.asarray(img, dtype=np.float64)
    if pixels.shape != (IMAGE_SIDE, IMAGE_SIDE):
        raise ShapeError(f"expected a {IMAGE_SIDE}x{IMAGE_SIDE} pixel grid, got {pixels.shape}")
    return pixels


def encode_image(img, stub: VisionStub) -> Tensor:
    """Frozen patch features [N_PATCHES, vis_width] for one image."""
    pixels = _to_pixels(img)
    g = IMAGE_SIDE // PATCH_SIDE
    patches = (
        pixels.reshape(g, PATCH_SIDE, g, PATCH_SIDE)
        .transpose(0, 2, 1, 3)
        .reshape(N_PATCHES, PATCH_PIXELS)
    )
    return Tensor(patches) @ stub.patch_w + stub.patch_b


def qformer_stub(features: Tensor, queries: Tensor) -> Tensor:
    """One frozen cross-attention: each query softmax-attends over all patches."""
    if features.ndim != 2 or features.shape[1] != queries.shape[1]:
        raise ShapeError(
            f"feature width {features.shape} does not match query width {queries.shape}"
        )
    scale = 1.0 / np.sqrt(queries.shape[1])
    attn = row_softmax((queries @ features.T) * scale)
    return attn @ features


def project_visual(tokens: Tensor, proj_w: Tensor, proj_b: Tensor) -> Tensor:
    """Trainable affine bridge from vis_width to the decoder hidden size."""
    if tokens.ndim != 2 or tokens.shape[1] != proj_w.shape[0]:
        raise ShapeError(f"cannot project tokens {tokens.shape} with {proj_w.shape}")
    return tokens @ proj_w + proj_b


def image_to_prefix(img, bridge: VisionBridge) -> Tensor:
    """Full image -> visual prefix pipeline [n_query, hidden]."""
    features = encode_image(img, bridge.stub)
    tokens = qformer_stub(features, bridge.queries)
    return project_visual(tokens, bridge.proj_w, bridge.proj_b)


# -- feature file round trip ------------------------------------------------


def write_features(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeError(f"feature files hold 2-D arrays, got shape {array.shape}")
    rows, cols = array.shape
    payload = FEATURE_MAGIC + struct.pack("<II", rows, cols)
    payload += np.ascontiguousarray(array, dtype="<f8").tobytes()
    Path(path).write_bytes(payload)


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < len(FEATURE_MAGIC) + 8:
        raise FeatureFileError(f"{path}: truncated header")
    if raw[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {raw[:8]!r}")
    rows, cols = struct.unpack_from("<II", raw, len(FEATURE_MAGIC))
    body = raw[len(FEATURE_MAGIC) + 8:]
    expected = rows * cols * 8
    if len(body) != expected:
        raise FeatureFileError(
            f"{path}: expected {expected} data bytes for {rows}x{cols}, got {len(body)}"
        )
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
