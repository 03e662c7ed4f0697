"""Deterministic synthetic image-caption pairs plus manifest I/O.

Each item is a 16x16 parametric pattern: the class id picks the pattern
family, the intensity id scales its amplitude, and the caption is the
fixed 4-token sentence [BOS, class token, level token, EOS]. Captions are
a pure function of the image parameters, so the image -> caption mapping
is learnable by construction.

Manifests are JSON Lines with keys exactly ``id``, ``feature_file``,
``caption_tokens``, ``split``; feature files use the binary format owned
by the vision module. A deterministic quarter of the items form the
stage2 split and reuse a stage1 item's image and caption (they exist to
be wrapped in instruction templates at training time).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vision import IMAGE_SIDE, SyntheticImage, VisionStub, encode_image, write_features

BOS = 0
EOS = 1

SPLITS = ("stage1", "stage2")
MANIFEST_KEYS = ("id", "feature_file", "caption_tokens", "split")

_N_FAMILIES = 8


class ManifestError(ValueError):
    """A manifest file or entry violates the schema."""


def class_token(class_id: int) -> int:
    return 2 + class_id

def level_token(intensity_id: int, n_classes: int) -> int:
    return 2 + n_classes + intensity_id


def caption_for(class_id: int, intensity_id: int, n_classes: int) -> list[int]:
    return [BOS, class_token(class_id), level_token(intensity_id, n_classes), EOS]


def render_image(class_id: int, intensity_id: int, n_levels: int) -> np.ndarray:
    """Pixels in [0, 1]; class selects the pattern family, level its amplitude.

    Each family is a localized envelope times an oriented sub-patch-scale
    carrier wave, so classes differ both in where the texture sits and in
    its orientation/frequency; amplitude scales the whole texture.
    """
    if class_id < 0 or intensity_id < 0 or intensity_id >= n_levels:
        raise ValueError(f"bad image parameters ({class_id}, {intensity_id}, {n_levels})")
    coord = (np.arange(IMAGE_SIDE) + 0.5) / IMAGE_SIDE
    yy, xx = np.meshgrid(coord, coord, indexing="ij")
    freq = 1 + class_id // _N_FAMILIES
    family = class_id % _N_FAMILIES

    angle = family * np.pi / _N_FAMILIES
    u = xx * np.cos(angle) + yy * np.sin(angle)
    carrier = np.sin(2.0 * np.pi * (3 + family % 4) * freq * u)

    def bump(cy, cx, s=0.25):
        return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * s * s))

    envelopes = (
        bump(0.25, 0.25), bump(0.25, 0.75), bump(0.75, 0.25), bump(0.75, 0.75),
        bump(0.5, 0.5, s=0.3), np.ones_like(xx),
        np.exp(-((yy - 0.25) ** 2) / 0.08), np.exp(-((xx - 0.75) ** 2) / 0.08),
    )
    amplitude = (intensity_id + 1) / n_levels
    return 0.5 + 0.5 * amplitude * envelopes[family] * carrier


def make_image(class_id: int, intensity_id: int, n_levels: int) -> SyntheticImage:
    return SyntheticImage(pixels=render_image(class_id, intensity_id, n_levels),
                          class_id=class_id, intensity_id=intensity_id)


@dataclass(frozen=True)
class ManifestItem:
    id: str
    feature_file: str
    caption_tokens: tuple[int, ...]
    split: str


@dataclass
class DatasetManifest:
    items: list[ManifestItem]
    base_dir: Path

    def split_items(self, split: str) -> list[ManifestItem]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [it for it in self.items if it.split == split]

    def feature_path(self, item: ManifestItem) -> Path:
        return self.base_dir / item.feature_file


def generate_dataset(out_dir, *, seed: int, n_items: int, n_classes: int,
                     n_levels: int, vocab_size: int = 32, vis_width: int = 8,
                     stage2_fraction: float = 0.25) -> DatasetManifest:
    """Write feature files plus manifest.jsonl; byte-identical per (seed, args)."""
    if n_items < 1:
        raise ValueError(f"n_items must be positive, got {n_items}")
    if n_classes * n_levels < 2:
        raise ValueError("need at least two distinct (class, level) pairs")
    if 2 + n_classes + n_levels > vocab_size:
        raise ValueError(
            f"vocab of {vocab_size} cannot hold {n_classes} classes + "
            f"{n_levels} levels + 2 specials"
        )
    n_stage2 = int(n_items * stage2_fraction)
    n_stage1 = n_items - n_stage2
    if n_stage1 < 1:
        raise ValueError("stage2_fraction leaves no stage1 items")

    out_dir = Path(out_dir)
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng([seed, 0])
    stub = VisionStub.seeded(vis_width, np.random.default_rng([seed, 1]))

    items: list[ManifestItem] = []
    stage1: list[tuple[str, list[int]]] = []
    for i in range(n_stage1):
        class_id = int(rng.integers(0, n_classes))
        intensity_id = int(rng.integers(0, n_levels))
        img = make_image(class_id, intensity_id, n_levels)
        rel = f"features/item-{i:04d}.feat"
        write_features(out_dir / rel, encode_image(img, stub).data)
        caption = caption_for(class_id, intensity_id, n_classes)
        items.append(ManifestItem(id=f"item-{i:04d}", feature_file=rel,
                                  caption_tokens=tuple(caption), split="stage1"))
        stage1.append((rel, caption))
    for j in range(n_stage2):
        rel, caption = stage1[j % n_stage1]
        items.append(ManifestItem(id=f"stage2-{j:04d}", feature_file=rel,
                                  caption_tokens=tuple(caption), split="stage2"))

    manifest = DatasetManifest(items=items, base_dir=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    lines = []
    for it in manifest.items:
        lines.append(json.dumps({
            "id": it.id,
            "feature_file": it.feature_file,
            "caption_tokens": list(it.caption_tokens),
            "split": it.split,
        }))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, vocab_size: int | None = None) -> DatasetManifest:
    """Parse and fully validate a manifest; errors name the offending item."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base_dir = path.parent
    items: list[ManifestItem] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict) or tuple(sorted(raw)) != tuple(sorted(MANIFEST_KEYS)):
            raise ManifestError(
                f"line {lineno}: keys must be exactly {sorted(MANIFEST_KEYS)}"
            )
        item_id = raw["id"]
        if not isinstance(item_id, str):
            raise ManifestError(f"line {lineno}: id must be a string")
        if item_id in seen:
            raise ManifestError(f"duplicate id {item_id!r}")
        seen.add(item_id)
        if raw["split"] not in SPLITS:
            raise ManifestError(f"{item_id}: split {raw['split']!r} not in {SPLITS}")
        tokens = raw["caption_tokens"]
        if (not isinstance(tokens, list) or not tokens
                or any(not isinstance(t, int) or isinstance(t, bool) for t in tokens)):
            raise ManifestError(f"{item_id}: caption_tokens must be a non-empty int list")
        if any(t < 0 for t in tokens):
            raise ManifestError(f"{item_id}: negative caption token")
        if vocab_size is not None and any(t >= vocab_size for t in tokens):
            bad = next(t for t in tokens if t >= vocab_size)
            raise ManifestError(
                f"{item_id}: caption token {bad} outside vocabulary of size {vocab_size}"
            )
        if not isinstance(raw["feature_file"], str):
            raise ManifestError(f"{item_id}: feature_file must be a string")
        if not (base_dir / raw["feature_file"]).exists():
            raise ManifestError(f"{item_id}: missing feature file {raw['feature_file']}")
        items.append(ManifestItem(id=item_id, feature_file=raw["feature_file"],
                                  caption_tokens=tuple(tokens), split=raw["split"]))
    return DatasetManifest(items=items, base_dir=base_dir)
