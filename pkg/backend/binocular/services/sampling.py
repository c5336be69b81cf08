"""
Episodic sampling.

Every episode is a pure function of (split, spec, seed). Training and
evaluation derive one seed per step/episode from a base seed, so prefetching
workers produce exactly what a sequential loop would.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from django.conf import settings
from torch.utils.data import DataLoader, Dataset

from ..domain import DatasetSplit, Degradation, Episode, EpisodeItem, EpisodeSpec
from ..exceptions import EpisodeSamplingError
from .degradations import apply_degradation
from .image_storage import load_pixels

logger = logging.getLogger(__name__)

DEFAULT_TRAIN_SPEC = EpisodeSpec(n_way=15, k_shot=1, q_query=6)
CROP_PADDING = 4


def derive_seed(*parts: int) -> int:
    """Mix non-negative integers into an independent 32-bit seed."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def sample_episode(split: DatasetSplit, spec: EpisodeSpec, rng_seed: int) -> Episode:
    n, k, q = spec.n_way, spec.k_shot, spec.q_query
    if len(split.classes) < n:
        logger.error(f"{split.name}: {len(split.classes)} classes cannot form a {n}-way episode")
        raise EpisodeSamplingError(
            f"Split {split.name} has {len(split.classes)} classes, {n}-way episode requested"
        )
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(split.classes), size=n, replace=False)

    support, query, class_map = [], [], {}
    for local_label, class_idx in enumerate(chosen):
        class_name = split.classes[int(class_idx)]
        records = split.images[class_name]
        if len(records) < k + q:
            raise EpisodeSamplingError(
                f"Class {class_name!r} has {len(records)} images, {k}+{q} needed"
            )
        picks = rng.choice(len(records), size=k + q, replace=False)
        items = [EpisodeItem(records[int(i)], local_label, int(class_idx)) for i in picks]
        support.extend(items[:k])
        query.extend(items[k:])
        class_map[local_label] = class_name
    return Episode(tuple(support), tuple(query), class_map, spec)


def sample_training_batch(
    base: DatasetSplit, train_spec: EpisodeSpec = DEFAULT_TRAIN_SPEC, rng_seed: int = 0
) -> Episode:
    """
    One training step's batch: an episode over `train_spec.n_way` base classes.
    Global labels index the base split's class list, which is what the
    point-wise classifier predicts.
    """
    if base.role != "base":
        logger.warning(f"Training batch drawn from a {base.role!r} split")
    return sample_episode(base, train_spec, rng_seed)


@dataclass
class EpisodeBatch:
    """Tensors of one episode, images as [B, 3, S, S] floats in [0, 1]."""

    support_images: torch.Tensor
    support_labels: torch.Tensor
    support_global: torch.Tensor
    query_images: torch.Tensor
    query_labels: torch.Tensor
    query_global: torch.Tensor
    class_map: dict[int, str]
    seed: int

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    @property
    def images(self) -> torch.Tensor:
        return torch.cat([self.support_images, self.query_images])

    @property
    def global_labels(self) -> torch.Tensor:
        return torch.cat([self.support_global, self.query_global])

    def to(self, device: torch.device | str) -> "EpisodeBatch":
        return EpisodeBatch(
            self.support_images.to(device),
            self.support_labels.to(device),
            self.support_global.to(device),
            self.query_images.to(device),
            self.query_labels.to(device),
            self.query_global.to(device),
            self.class_map,
            self.seed,
        )


def augment_images(images: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Random horizontal flip plus a random crop from a 4-pixel zero-padded canvas."""
    size = images.shape[-1]
    padded = TF.pad(images, [CROP_PADDING] * 4)
    flips = torch.rand(images.shape[0], generator=generator) < 0.5
    offsets = torch.randint(0, 2 * CROP_PADDING + 1, (images.shape[0], 2), generator=generator)
    out = torch.empty_like(images)
    for i in range(images.shape[0]):
        crop = TF.crop(padded[i], int(offsets[i, 0]), int(offsets[i, 1]), size, size)
        out[i] = TF.horizontal_flip(crop) if flips[i] else crop
    return out


def materialize(
    episode: Episode,
    image_size: int,
    seed: int = 0,
    augment: bool = False,
    degradations: Sequence[Degradation] = (),
) -> EpisodeBatch:
    """
    Decode the episode's images into tensors. Augmentation (training) and
    degradations (evaluation) draw their randomness from `seed` only.
    """

    def stack(items: Sequence[EpisodeItem]) -> torch.Tensor:
        return torch.from_numpy(np.stack([load_pixels(i.record, image_size) for i in items]))

    support, query = stack(episode.support), stack(episode.query)
    if augment:
        generator = torch.Generator().manual_seed(seed)
        support = augment_images(support, generator)
        query = augment_images(query, generator)
    for position, degradation in enumerate(degradations):
        support = torch.stack(
            [
                apply_degradation(img, degradation, derive_seed(seed, position, 0, i))
                for i, img in enumerate(support)
            ]
        )
        query = torch.stack(
            [
                apply_degradation(img, degradation, derive_seed(seed, position, 1, i))
                for i, img in enumerate(query)
            ]
        )

    def labels(items: Sequence[EpisodeItem], attr: str) -> torch.Tensor:
        return torch.tensor([getattr(i, attr) for i in items], dtype=torch.long)

    return EpisodeBatch(
        support_images=support,
        support_labels=labels(episode.support, "local_label"),
        support_global=labels(episode.support, "global_label"),
        query_images=query,
        query_labels=labels(episode.query, "local_label"),
        query_global=labels(episode.query, "global_label"),
        class_map=dict(episode.class_map),
        seed=seed,
    )


class EpisodeDataset(Dataset):
    """Index i -> the materialized episode seeded by derive_seed(base_seed, epoch, i)."""

    def __init__(
        self,
        split: DatasetSplit,
        spec: EpisodeSpec,
        num_episodes: int,
        base_seed: int,
        epoch: int = 0,
        image_size: Optional[int] = None,
        augment: bool = False,
        degradations: Sequence[Degradation] = (),
    ) -> None:
        self.split = split
        self.spec = spec
        self.num_episodes = num_episodes
        self.base_seed = base_seed
        self.epoch = epoch
        self.image_size = image_size or split.image_size
        self.augment = augment
        self.degradations = tuple(degradations)

    def __len__(self) -> int:
        return self.num_episodes

    def seed_for(self, index: int) -> int:
        return derive_seed(self.base_seed, self.epoch, index)

    def __getitem__(self, index: int) -> EpisodeBatch:
        seed = self.seed_for(index)
        episode = sample_episode(self.split, self.spec, seed)
        return materialize(
            episode,
            self.image_size,
            seed=seed,
            augment=self.augment,
            degradations=self.degradations,
        )


def episode_loader(dataset: EpisodeDataset, num_workers: Optional[int] = None) -> DataLoader:
    """Ordered loader over an EpisodeDataset; workers only prefetch."""
    workers = settings.BML_NUM_WORKERS if num_workers is None else num_workers
    return DataLoader(
        dataset,
        batch_size=None,
        shuffle=False,
        num_workers=workers,
        persistent_workers=False,
        # the loader draws its worker base seed from here, not from the global RNG
        generator=torch.Generator().manual_seed(dataset.base_seed),
    )
