"""Dataset manifests, identity-disjoint splits, raw-pixel embeddings and
the synthetic identity-cluster generator.

Manifest files are UTF-8::

    #manifest v1
    <id>,<relative path>[,<label>]

Paths are relative to the directory holding the manifest. Identity labels
normally live in a separate ``id,identity`` sidecar that only evaluation and
tests read.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image, UnidentifiedImageError

from .embeddings import EmbeddingStore, validate_id

logger = logging.getLogger(__name__)

MANIFEST_HEADER = "#manifest v1"


class ManifestError(ValueError):
    pass


class DuplicateIdError(ManifestError):
    pass


class MissingImageError(ManifestError):
    pass


class ImageDecodeError(ManifestError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    label: str | None = None


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def resolve(self, record: ManifestRecord) -> Path:
        return self.root / record.path

    def without_labels(self) -> "Manifest":
        return Manifest([replace(r, label=None) for r in self.records], self.root)

    def write(self, path) -> None:
        path = Path(path)
        lines = [MANIFEST_HEADER]
        for r in self.records:
            rel = Path(os.path.relpath(self.root / r.path, path.parent)).as_posix()
            lines.append(f"{r.id},{rel}" + (f",{r.label}" if r.label is not None else ""))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, check_images: bool = True) -> Manifest:
    """Parse and validate a manifest.

    Raises ``FileNotFoundError`` for a missing manifest, ``DuplicateIdError``
    naming the repeated id, ``MissingImageError`` naming an unresolvable
    path and, with ``check_images``, ``ImageDecodeError`` for files PIL
    cannot identify.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"{path}: first line must be {MANIFEST_HEADER!r}")
    manifest = Manifest([], path.parent)
    seen = set()
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) not in (2, 3):
            raise ManifestError(f"{path}:{n}: expected id,path[,label]")
        image_id = validate_id(fields[0])
        if image_id in seen:
            raise DuplicateIdError(f"{path}:{n}: duplicate id {image_id!r}")
        seen.add(image_id)
        label = fields[2] if len(fields) == 3 else None
        if label is not None and not label:
            raise ManifestError(f"{path}:{n}: empty label")
        record = ManifestRecord(image_id, fields[1], label)
        target = manifest.resolve(record)
        if not target.is_file():
            raise MissingImageError(f"image not found: {target}")
        if check_images:
            try:
                with Image.open(target) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError, SyntaxError) as exc:
                raise ImageDecodeError(f"cannot decode image {target}: {exc}") from exc
        manifest.records.append(record)
    return manifest


def read_labels(path) -> dict[str, str]:
    labels = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 2 or not parts[1]:
            raise ManifestError(f"{path}:{n}: expected id,identity")
        labels[parts[0]] = parts[1]
    return labels


def write_labels(labels: Mapping[str, str], path) -> None:
    Path(path).write_text("".join(f"{i},{labels[i]}\n" for i in sorted(labels)), encoding="utf-8")


def attach_labels(manifest: Manifest, labels: Mapping[str, str]) -> Manifest:
    missing = [r.id for r in manifest.records if r.id not in labels]
    if missing:
        raise ManifestError(f"{len(missing)} ids lack a label, e.g. {missing[0]!r}")
    return Manifest([replace(r, label=labels[r.id]) for r in manifest.records], manifest.root)


def decode_image(path, height: int, width: int, channels: int = 3) -> np.ndarray:
    """Decode to ``(height, width, channels)`` float32 in [0, 1], bilinear resize."""
    mode = {1: "L", 3: "RGB"}.get(channels)
    if mode is None:
        raise ValueError("channels must be 1 or 3")
    try:
        with Image.open(path) as im:
            im = im.convert(mode)
            if im.size != (width, height):
                im = im.resize((width, height), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise MissingImageError(f"image not found: {path}") from None
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr.reshape(height, width, channels)


def load_images(manifest: Manifest, height: int, width: int, channels: int = 3) -> np.ndarray:
    out = np.empty((len(manifest), height, width, channels), dtype=np.float32)
    for n, record in enumerate(manifest.records):
        out[n] = decode_image(manifest.resolve(record), height, width, channels)
    return out


def split_disjoint(manifest: Manifest, fraction: float = 0.5, seed: int = 0) -> tuple[Manifest, Manifest]:
    """Partition identities (not images) into two label-free manifests.

    Identities are shuffled and assigned to A until A holds the image count
    closest to ``fraction`` of the total; every identity lands wholly on one
    side and both sides are non-empty.
    """
    if any(r.label is None for r in manifest.records):
        raise ManifestError("split_disjoint needs a label on every record")
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    groups: dict[str, list] = {}
    for r in manifest.records:
        groups.setdefault(r.label, []).append(r)
    idents = sorted(groups)
    if len(idents) < 2:
        raise ManifestError("split_disjoint needs at least 2 identities")
    order = [idents[i] for i in np.random.default_rng(seed).permutation(len(idents))]
    target = fraction * len(manifest)
    count, cut = 0, 0
    for ident in order:
        size = len(groups[ident])
        if cut and abs(count + size - target) > abs(count - target):
            break
        count += size
        cut += 1
    cut = min(max(cut, 1), len(order) - 1)
    side_a = set(order[:cut])
    a = [r for r in manifest.records if r.label in side_a]
    b = [r for r in manifest.records if r.label not in side_a]
    return Manifest(a, manifest.root).without_labels(), Manifest(b, manifest.root).without_labels()


def raw_features(manifest: Manifest, thumb: int = 8, channels: int = 3) -> np.ndarray:
    """Unit-norm flattened ``thumb x thumb x channels`` thumbnails, one row per record."""
    vectors = load_images(manifest, thumb, thumb, channels).reshape(len(manifest), -1).astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return np.divide(vectors, norms, out=np.zeros_like(vectors), where=norms > 0)


def raw_embed(manifest: Manifest, dim: int = 300, seed: int = 0, thumb: int = 8,
              channels: int = 3) -> EmbeddingStore:
    """Thumbnail -> flatten -> L2-normalise -> seeded Gaussian projection to ``dim``."""
    vectors = raw_features(manifest, thumb, channels)
    proj = np.random.default_rng(seed).standard_normal((vectors.shape[1], dim)) / np.sqrt(dim)
    return EmbeddingStore.from_arrays(manifest.ids, (vectors @ proj).astype(np.float32), source="raw-pixel")


def encoder_embed(manifest: Manifest, params, batch_size: int = 128) -> EmbeddingStore:
    from .encoder import encoder_forward

    enc = params.encoder
    images = load_images(manifest, enc.input_height, enc.input_width, enc.input_channels)
    out = [encoder_forward(params, images[s:s + batch_size]) for s in range(0, len(images), batch_size)]
    values = np.concatenate(out) if out else np.zeros((0, enc.embedding_dim), np.float32)
    return EmbeddingStore.from_arrays(manifest.ids, values.astype(np.float32), source="encoder")


@dataclass(frozen=True)
class SyntheticSpec:
    num_identities: int = 20
    images_per_identity: int = 20
    image_size: int = 32
    channels: int = 3
    separation: float = 0.25
    noise: float = 0.05
    template_grid: int = 4
    seed: int = 0
    id_prefix: str = "img"

    def __post_init__(self):
        if self.num_identities < 2:
            raise ValueError("num_identities must be >= 2")
        if self.images_per_identity < 1:
            raise ValueError("images_per_identity must be >= 1")
        if self.separation <= 0:
            raise ValueError("separation must be > 0")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.channels not in (1, 3) or self.image_size < 1:
            raise ValueError("channels must be 1 or 3 and image_size positive")


def _upsample(grid: np.ndarray, size: int) -> np.ndarray:
    chans = [np.asarray(Image.fromarray(grid[..., c].astype(np.float32), mode="F")
                        .resize((size, size), Image.BILINEAR)) for c in range(grid.shape[-1])]
    return np.stack(chans, axis=-1)


def synth_images(spec: SyntheticSpec):
    """In-memory synthetic faces: ``(ids, images, labels)``.

    Each identity is a smooth random template around mid-grey with per-pixel
    spread ``separation``; each image adds i.i.d. Gaussian noise of scale
    ``noise`` and is clamped to [0, 1]. Ids are opaque: they are assigned in
    a shuffled order and carry no identity information.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.num_identities * spec.images_per_identity
    images = np.empty((n, spec.image_size, spec.image_size, spec.channels), dtype=np.float32)
    identity = np.repeat(np.arange(spec.num_identities), spec.images_per_identity)
    for k in range(spec.num_identities):
        grid = rng.standard_normal((spec.template_grid, spec.template_grid, spec.channels))
        template = 0.5 + spec.separation * _upsample(grid, spec.image_size)
        for j in range(spec.images_per_identity):
            noise = rng.standard_normal(template.shape) if spec.noise > 0 else 0.0
            images[k * spec.images_per_identity + j] = np.clip(template + spec.noise * noise, 0.0, 1.0)
    order = rng.permutation(n)
    width = max(5, len(str(n - 1)))
    ids = [f"{spec.id_prefix}{i:0{width}d}" for i in range(n)]
    labels = {ids[slot]: f"person{identity[src]:04d}" for slot, src in enumerate(order)}
    return ids, images[order], labels


def synth_generate(spec: SyntheticSpec, out_dir) -> tuple[Path, Path]:
    """Write PNGs, ``manifest.txt`` (label-free) and ``labels.txt`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ids, images, labels = synth_images(spec)
    records = []
    for image_id, img in zip(ids, images):
        rel = f"images/{image_id}.png"
        pixels = np.round(img * 255).astype(np.uint8)
        Image.fromarray(pixels[..., 0] if spec.channels == 1 else pixels).save(out / rel, optimize=False)
        records.append(ManifestRecord(image_id, rel))
    manifest_path = out / "manifest.txt"
    Manifest(records, out).write(manifest_path)
    labels_path = out / "labels.txt"
    write_labels(labels, labels_path)
    logger.info("wrote %d synthetic images to %s", len(ids), out)
    return manifest_path, labels_path
