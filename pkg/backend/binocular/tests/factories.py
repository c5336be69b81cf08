"""Small datasets, stub embedders and run documents shared by the tests."""

from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
import yaml

from binocular.domain import DatasetSplit, ImageRecord

TINY_SOURCE = "synthetic://classes=5,per=12,size=16,seed=3"


def constant_split(
    num_classes: int = 4, per_class: int = 6, size: int = 16, role: str = "novel"
) -> DatasetSplit:
    """Every image of class c is the constant (c + 1) / (num_classes + 1)."""
    classes, images = [], {}
    for c in range(num_classes):
        name = f"const_{c}"
        value = (c + 1) / (num_classes + 1)
        classes.append(name)
        images[name] = [
            ImageRecord(f"{name}/{i}", np.full((3, size, size), value, dtype=np.float32))
            for i in range(per_class)
        ]
    return DatasetSplit(f"constant-{role}", role, classes, images, size)  # type: ignore[arg-type]


def noise_split(
    num_classes: int = 10, per_class: int = 20, size: int = 16, seed: int = 0, role: str = "novel"
) -> DatasetSplit:
    """I.i.d. uniform noise images; class membership carries no signal."""
    rng = np.random.default_rng(seed)
    classes, images = [], {}
    for c in range(num_classes):
        name = f"noise_{c}"
        classes.append(name)
        images[name] = [
            ImageRecord(f"{name}/{i}", rng.random((3, size, size), dtype=np.float32))
            for i in range(per_class)
        ]
    return DatasetSplit(f"noise-{role}", role, classes, images, size)  # type: ignore[arg-type]


class PixelEmbedder:
    """Embeds an image as its own pixels, channel-last; both views agree."""

    def __init__(self, scale: float = 1.0) -> None:
        self.scale = scale

    def embed(self, images: torch.Tensor, branch: str) -> torch.Tensor:
        return images.permute(0, 2, 3, 1) * self.scale


class CollapsingEmbedder:
    """Maps every image to the same point."""

    def embed(self, images: torch.Tensor, branch: str) -> torch.Tensor:
        return torch.zeros(images.shape[0], 1, 1, 4, dtype=images.dtype)


def _deep_update(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def tiny_document(**overrides: Any) -> dict[str, Any]:
    """A run document that trains in a couple of seconds on CPU."""
    document: dict[str, Any] = {
        "name": "tiny",
        "source": TINY_SOURCE,
        "seed": 0,
        "model": {"desk_scale": True, "input_size": 16},
        "train": {
            "epochs": 2,
            "lr_schedule": [[0, 0.1], [1, 0.01]],
            "episodes_per_epoch": 2,
            "train_spec": {"n_way": 5, "k_shot": 1, "q_query": 2},
            "val_spec": {"n_way": 3, "k_shot": 1, "q_query": 2},
            "val_episodes": 2,
        },
        "evaluation": {
            "specs": [{"n_way": 3, "k_shot": 1, "q_query": 2}],
            "n_episodes": 3,
        },
    }
    return _deep_update(document, overrides)


def write_config(directory: Path, document: Optional[dict[str, Any]] = None) -> Path:
    path = Path(directory) / "run.yaml"
    path.write_text(yaml.safe_dump(document or tiny_document()), encoding="utf-8")
    return path
