"""
Meta-test protocol.

Both views embed support and query images; maps are flattened (no pooling),
prototypes are per-class means and logits are negative (squared) distances.
The fused prediction adds the two views' logits. Everything here depends on
the `Embedder` protocol only, so stub embedders can stand in for a network.
"""

import logging
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from django.conf import settings
from torch import nn

from ..domain import (
    Branch,
    DatasetSplit,
    Degradation,
    EpisodeSpec,
    EvalResult,
    QueryRanking,
    RankingReport,
)
from ..exceptions import ConfigurationError, ShapeMismatchError
from .backbone import Embedder, flatten_features
from .image_storage import load_pixels
from .losses import compute_prototypes, distance_logits
from .sampling import EpisodeBatch, EpisodeDataset, episode_loader

logger = logging.getLogger(__name__)

Fusion = Literal["sum", "softmax"]
VIEWS: tuple[Branch, ...] = ("global", "local")


def _expected_size(model: Embedder) -> Optional[int]:
    config = getattr(model, "config", None)
    return getattr(config, "input_size", None)


def _eval_mode(model: Embedder) -> None:
    if isinstance(model, nn.Module):
        model.eval()


def episode_logits(
    model: Embedder,
    batch: EpisodeBatch,
    branch: Branch,
    squared: bool = True,
    expected_size: Optional[int] = None,
) -> torch.Tensor:
    """[N*Q, N] nearest-prototype logits of one view."""
    if expected_size is not None and batch.support_images.shape[-1] != expected_size:
        raise ShapeMismatchError(
            f"Episode images are {batch.support_images.shape[-1]}px, model expects {expected_size}px"
        )
    with torch.no_grad():
        support = flatten_features(model.embed(batch.support_images, branch))
        query = flatten_features(model.embed(batch.query_images, branch))
    prototypes = compute_prototypes(support, batch.support_labels)
    return distance_logits(query, prototypes, squared)


def fuse_logits(
    global_logits: torch.Tensor, local_logits: torch.Tensor, mode: Fusion = "sum"
) -> torch.Tensor:
    if global_logits.shape != local_logits.shape:
        raise ShapeMismatchError(
            f"Cannot fuse logits of shapes {tuple(global_logits.shape)} and {tuple(local_logits.shape)}"
        )
    if mode == "sum":
        return global_logits + local_logits
    if mode == "softmax":
        return global_logits.softmax(dim=-1) + local_logits.softmax(dim=-1)
    raise ConfigurationError(f"Unknown fusion mode: {mode}")


def branch_logits(
    model: Embedder,
    batch: EpisodeBatch,
    fusion: Fusion = "sum",
    squared: bool = True,
    expected_size: Optional[int] = None,
) -> dict[Branch, torch.Tensor]:
    logits: dict[Branch, torch.Tensor] = {
        view: episode_logits(model, batch, view, squared, expected_size) for view in VIEWS
    }
    logits["fused"] = fuse_logits(logits["global"], logits["local"], fusion)
    return logits


def _accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((logits.argmax(dim=-1) == labels).double().mean()) * 100.0


def meta_test(
    model: Embedder,
    split: DatasetSplit,
    spec: EpisodeSpec,
    n_episodes: int,
    seed: int,
    degradations: Sequence[Degradation] = (),
    fusion: Fusion = "sum",
    squared: bool = True,
    device: Optional[Union[str, torch.device]] = None,
    num_workers: Optional[int] = None,
) -> dict[Branch, EvalResult]:
    """
    Accuracy of the fused, global and local predictions over `n_episodes`
    seeded episodes; all three branches see exactly the same episodes.
    """
    if split.role not in ("val", "novel"):
        raise ConfigurationError(f"Meta-test runs on val or novel splits, got {split.role!r}")
    device = device or settings.BML_DEVICE
    resized = any(d.kind == "resize" for d in degradations)
    expected_size = None if resized else _expected_size(model)
    _eval_mode(model)

    dataset = EpisodeDataset(
        split, spec, n_episodes, base_seed=seed, degradations=degradations
    )
    accuracies: dict[Branch, list[float]] = {"fused": [], "global": [], "local": []}
    for batch in episode_loader(dataset, num_workers):
        batch = batch.to(device)
        for branch, logits in branch_logits(model, batch, fusion, squared, expected_size).items():
            accuracies[branch].append(_accuracy(logits, batch.query_labels))

    results = {
        branch: EvalResult.from_accuracies(values, spec, branch)
        for branch, values in accuracies.items()
    }
    logger.info(
        f"Meta-test {split.name} {spec.label()} x{n_episodes}: "
        + ", ".join(f"{b}={r.mean_accuracy:.2f}+-{r.ci95:.2f}" for b, r in results.items())
    )
    return results


def similarity_ranking(
    model: Embedder,
    batch: EpisodeBatch,
    fusion: Fusion = "sum",
    squared: bool = True,
    branch: Branch = "fused",
) -> RankingReport:
    """
    Per query, classes ordered by descending score of `branch` (fused by
    default). Ties go to the lower class id. Ranks are 1-based.
    """
    _eval_mode(model)
    scores = branch_logits(model, batch, fusion, squared)[branch].cpu().tolist()
    labels = batch.query_labels.cpu().tolist()
    queries = []
    for index, (row, truth) in enumerate(zip(scores, labels)):
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        queries.append(
            QueryRanking(
                query_index=index,
                true_class=int(truth),
                ranking=tuple((c, float(row[c])) for c in order),
                true_rank=order.index(int(truth)) + 1,
            )
        )
    return RankingReport(queries=tuple(queries), class_names=dict(batch.class_map))


def mean_pairwise_distance(prototypes: torch.Tensor, squared: bool = False) -> float:
    n = prototypes.shape[0]
    if n < 2:
        return 0.0
    distances = -distance_logits(prototypes, prototypes, squared=True)
    if not squared:
        distances = distances.clamp_min(0.0).sqrt()
    upper = torch.triu_indices(n, n, offset=1)
    return float(distances[upper[0], upper[1]].mean())


def prototype_dispersion(
    model: Embedder,
    split: DatasetSplit,
    spec: EpisodeSpec,
    n_episodes: int,
    seed: int,
    branch: Branch = "local",
    squared: bool = False,
    device: Optional[Union[str, torch.device]] = None,
) -> float:
    """Mean pairwise distance between an episode's flattened prototypes, averaged over episodes."""
    device = device or settings.BML_DEVICE
    _eval_mode(model)
    dataset = EpisodeDataset(split, spec, n_episodes, base_seed=seed)
    values = []
    for batch in episode_loader(dataset):
        batch = batch.to(device)
        with torch.no_grad():
            support = flatten_features(model.embed(batch.support_images, branch))
        values.append(
            mean_pairwise_distance(compute_prototypes(support, batch.support_labels), squared)
        )
    return float(np.mean(values)) if values else 0.0


def export_embeddings(
    model: Embedder,
    split: DatasetSplit,
    max_per_class: int,
    path: Union[str, Path],
    seed: int = 0,
    branches: Sequence[Branch] = VIEWS,
    device: Optional[Union[str, torch.device]] = None,
) -> Path:
    """
    Write a CSV with one row per (image, branch): `image_id`, `class`,
    `branch`, then the flattened embedding as columns `f0 .. f{D-1}` with
    D = h * w * m. Images per class are a seeded sample of `max_per_class`.
    """
    device = device or settings.BML_DEVICE
    _eval_mode(model)
    rng = np.random.default_rng(seed)
    meta: list[dict[str, str]] = []
    vectors: list[np.ndarray] = []
    for class_name in split.classes:
        records = split.images[class_name]
        count = min(max_per_class, len(records))
        picks = sorted(int(i) for i in rng.choice(len(records), size=count, replace=False))
        chosen = [records[i] for i in picks]
        images = torch.from_numpy(
            np.stack([load_pixels(r, split.image_size) for r in chosen])
        ).to(device)
        with torch.no_grad():
            embedded = {b: flatten_features(model.embed(images, b)).cpu().numpy() for b in branches}
        for position, record in enumerate(chosen):
            for branch in branches:
                meta.append({"image_id": record.ref, "class": class_name, "branch": branch})
                vectors.append(embedded[branch][position])

    matrix = np.stack(vectors) if vectors else np.zeros((0, 0), dtype=np.float32)
    table = pd.concat(
        [
            pd.DataFrame(meta, columns=["image_id", "class", "branch"]),
            pd.DataFrame(matrix, columns=[f"f{j}" for j in range(matrix.shape[1])]),
        ],
        axis=1,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)
    logger.info(f"Exported {len(table)} embeddings from {split.name} to {path}")
    return path
