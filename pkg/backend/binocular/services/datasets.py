"""
Dataset ingestion: on-disk `root/<split>/<class>/<image>` layouts, the seeded
synthetic texture dataset used for desk-scale runs, and the source resolver the
commands go through.
"""

import logging
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import yaml

from ..domain import SPLIT_ROLES, DatasetSplit, ImageRecord
from ..exceptions import DatasetError
from .image_storage import is_image_file, load_pixels, store_png

logger = logging.getLogger(__name__)

SYNTHETIC_SCHEME = "synthetic://"
MANIFEST_NAME = "manifest.yaml"


def _read_manifest(manifest: Union[str, Path, dict[str, Any]]) -> dict[str, str]:
    if isinstance(manifest, dict):
        document = manifest
    else:
        try:
            with open(manifest, encoding="utf-8") as handle:
                document = yaml.safe_load(handle) or {}
        except (OSError, yaml.YAMLError) as e:
            raise DatasetError(f"Cannot read split manifest {manifest}: {e}") from e
    membership = document.get("classes")
    if not isinstance(membership, dict) or not membership:
        raise DatasetError("Manifest must hold a non-empty 'classes' mapping of class -> split")
    for class_name, role in membership.items():
        if role not in SPLIT_ROLES:
            raise DatasetError(f"Manifest assigns {class_name!r} to unknown split {role!r}")
    return {str(k): str(v) for k, v in membership.items()}


def _class_images(class_dir: Path) -> list[ImageRecord]:
    files = sorted(p for p in class_dir.iterdir() if is_image_file(p))
    if not files:
        raise DatasetError(f"Class directory {class_dir} holds no images")
    return [ImageRecord(ref=str(p)) for p in files]


def load_dataset(
    root_path: Union[str, Path],
    split_manifest: Optional[Union[str, Path, dict[str, Any]]] = None,
    image_size: int = 84,
) -> dict[str, DatasetSplit]:
    """
    Load the base/val/novel splits below `root_path`.

    With a manifest, only the classes it lists are loaded and every split it
    names must have a directory. Without one, every split directory present
    defines its classes. Classes are ordered lexicographically.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"Dataset root {root} is not a directory")

    if split_manifest is not None:
        membership = _read_manifest(split_manifest)
        wanted: dict[str, list[str]] = {}
        for class_name, role in membership.items():
            wanted.setdefault(role, []).append(class_name)
    else:
        wanted = {
            role: sorted(p.name for p in (root / role).iterdir() if p.is_dir())
            for role in SPLIT_ROLES
            if (root / role).is_dir()
        }
        if not wanted:
            raise DatasetError(f"No split directory ({', '.join(SPLIT_ROLES)}) under {root}")

    for role in wanted:
        if not (root / role).is_dir():
            raise DatasetError(f"Missing split directory {root / role}")

    # a class directory present under two splits violates disjointness even if
    # the manifest only assigns it once
    seen: dict[str, str] = {}
    for role in SPLIT_ROLES:
        if not (root / role).is_dir():
            continue
        for class_dir in (root / role).iterdir():
            if not class_dir.is_dir():
                continue
            if class_dir.name in seen:
                raise DatasetError(
                    f"Class {class_dir.name!r} appears in both {seen[class_dir.name]!r} "
                    f"and {role!r} splits"
                )
            seen[class_dir.name] = role

    splits = {}
    for role, class_names in wanted.items():
        classes = sorted(class_names)
        images = {}
        for class_name in classes:
            class_dir = root / role / class_name
            if not class_dir.is_dir():
                raise DatasetError(f"Manifest lists {class_name!r} but {class_dir} is missing")
            images[class_name] = _class_images(class_dir)
        splits[role] = DatasetSplit(
            name=f"{root.name}/{role}",
            role=role,  # type: ignore[arg-type]
            classes=classes,
            images=images,
            image_size=image_size,
        )
        logger.info(
            f"Loaded split {role}: {len(classes)} classes, {splits[role].num_images} images"
        )
    return splits


def _class_family(seed: int, class_id: int) -> dict[str, Any]:
    rng = np.random.default_rng([seed, class_id])
    return {
        "theta": rng.uniform(0.0, np.pi),
        "frequency": rng.uniform(1.5, 5.0),
        "color": rng.uniform(0.2, 0.8, size=3),
        "blob_color": rng.uniform(0.0, 1.0, size=3),
        "center": rng.uniform(0.25, 0.75, size=2),
        "radius": rng.uniform(0.08, 0.2),
    }


def _render(
    family: dict[str, Any], rng: np.random.Generator, size: int, variation: float
) -> np.ndarray:
    axis = np.linspace(0.0, 1.0, size, dtype=np.float64)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    theta = family["theta"] + variation * rng.uniform(-0.15, 0.15)
    frequency = family["frequency"] * (1.0 + variation * rng.uniform(-0.1, 0.1))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    center = family["center"] + variation * rng.uniform(-0.08, 0.08, size=2)
    radius = family["radius"] * (1.0 + variation * rng.uniform(-0.2, 0.2))
    color = family["color"] + variation * rng.uniform(-0.05, 0.05, size=3)

    grating = np.sin(2.0 * np.pi * frequency * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    blob = np.exp(-((xx - center[0]) ** 2 + (yy - center[1]) ** 2) / (2.0 * radius**2))
    image = (
        color[:, None, None]
        + 0.2 * grating[None]
        + 0.5 * blob[None] * (family["blob_color"][:, None, None] - color[:, None, None])
        + 0.03 * variation * rng.standard_normal((3, size, size))
    )
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def generate_synthetic(
    num_classes: int,
    images_per_class: int,
    image_size: int,
    seed: int,
    role: str = "base",
    class_offset: int = 0,
    variation: float = 1.0,
) -> DatasetSplit:
    """
    Build a split of parametric texture classes: each class is an oriented
    grating with its own frequency and colour plus a coloured blob; images of a
    class jitter phase, orientation, blob position and add pixel noise.

    Class `class_offset + c` always renders the same family for a given seed,
    so splits built with disjoint offsets hold disjoint families. The same
    arguments reproduce bit-identical pixels.
    """
    if num_classes < 2:
        raise DatasetError(f"A synthetic split needs at least 2 classes, got {num_classes}")
    if images_per_class < 1 or image_size < 8:
        raise DatasetError("images_per_class must be >= 1 and image_size >= 8")

    classes, images = [], {}
    for c in range(num_classes):
        class_id = class_offset + c
        class_name = f"synthetic_{class_id:04d}"
        family = _class_family(seed, class_id)
        records = []
        for i in range(images_per_class):
            rng = np.random.default_rng([seed, class_id, i])
            records.append(
                ImageRecord(
                    ref=f"{SYNTHETIC_SCHEME}{seed}/{class_name}/{i:04d}",
                    pixels=_render(family, rng, image_size, variation),
                )
            )
        classes.append(class_name)
        images[class_name] = records
    return DatasetSplit(
        name=f"synthetic-{role}",
        role=role,  # type: ignore[arg-type]
        classes=classes,
        images=images,
        image_size=image_size,
    )


def parse_synthetic_uri(source: str) -> dict[str, int]:
    """`synthetic://classes=8,per=50,size=32,seed=7[,val=8,novel=8]` -> parameters."""
    body = source[len(SYNTHETIC_SCHEME) :]
    params = {"classes": 8, "per": 50, "size": 32, "seed": 0}
    for part in filter(None, body.split(",")):
        key, sep, value = part.partition("=")
        key = key.strip()
        if not sep or key not in ("classes", "per", "size", "seed", "val", "novel"):
            raise DatasetError(f"Bad synthetic source component {part!r} in {source!r}")
        try:
            params[key] = int(value)
        except ValueError as e:
            raise DatasetError(f"Non-integer value for {key!r} in {source!r}") from e
    params.setdefault("val", params["classes"])
    params.setdefault("novel", params["classes"])
    return params


def resolve_source(
    source: str,
    manifest: Optional[Union[str, Path]] = None,
    image_size: Optional[int] = None,
) -> dict[str, DatasetSplit]:
    """Turn a dataset path or synthetic URI into its base/val/novel splits."""
    if source.startswith(SYNTHETIC_SCHEME):
        params = parse_synthetic_uri(source)
        size = params["size"]
        if image_size is not None and image_size != size:
            raise DatasetError(f"Synthetic source renders {size}px images, model expects {image_size}px")
        offsets = {
            "base": 0,
            "val": params["classes"],
            "novel": params["classes"] + params["val"],
        }
        counts = {"base": params["classes"], "val": params["val"], "novel": params["novel"]}
        return {
            role: generate_synthetic(
                counts[role], params["per"], size, params["seed"], role, offsets[role]
            )
            for role in SPLIT_ROLES
        }
    return load_dataset(source, manifest, image_size or 84)


def write_dataset(splits: dict[str, DatasetSplit], root: Union[str, Path]) -> Path:
    """Materialize splits as `root/<split>/<class>/<n>.png` plus a manifest."""
    root = Path(root)
    membership = {}
    for role, split in splits.items():
        for class_name in split.classes:
            for index, record in enumerate(split.images[class_name]):
                pixels = load_pixels(record, split.image_size)
                store_png(pixels, root / role / class_name / f"{index:04d}.png")
            membership[class_name] = role
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as handle:
        yaml.safe_dump({"classes": membership}, handle, sort_keys=True)
    logger.info(f"Wrote {len(membership)} classes to {root}")
    return root
