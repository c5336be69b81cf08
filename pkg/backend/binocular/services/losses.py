"""
Training objectives of the two views and their weighted total.

Scores are "logits" in the prototypical sense: negative (squared) Euclidean
distances to class prototypes. Feature maps are channel-last [batch, h, w, m].
"""

import logging
from typing import Optional, Union

import torch
import torch.nn.functional as F

from ..domain import ElasticConfig, LossReport, LossWeights
from ..exceptions import DivergenceError, LossComputationError, ShapeMismatchError

logger = logging.getLogger(__name__)

Scalar = Union[torch.Tensor, float]


def _check_labels(labels: torch.Tensor, num_classes: int) -> None:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise LossComputationError(
            f"Labels must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )


def global_pointwise_loss(scores: torch.Tensor, global_labels: torch.Tensor) -> torch.Tensor:
    """
    Cross-entropy of every spatial point against its image's base-class label,
    averaged over points and then over images.
    """
    if scores.dim() != 4 or scores.shape[0] != global_labels.shape[0]:
        raise ShapeMismatchError(
            f"Scores {tuple(scores.shape)} do not match {global_labels.shape[0]} labels"
        )
    _check_labels(global_labels, scores.shape[-1])
    batch, height, width, _ = scores.shape
    log_probs = F.log_softmax(scores, dim=-1)
    index = global_labels.view(batch, 1, 1, 1).expand(batch, height, width, 1)
    return -log_probs.gather(-1, index).mean()


def compute_prototypes(support: torch.Tensor, support_labels: torch.Tensor) -> torch.Tensor:
    """
    Per-class mean of support embeddings. Works on flat vectors [N*K, D] as
    well as on maps [N*K, h, w, m], where it averages each spatial point.
    """
    if support.shape[0] != support_labels.shape[0]:
        raise ShapeMismatchError(
            f"{support.shape[0]} support rows but {support_labels.shape[0]} labels"
        )
    n_way = int(support_labels.max()) + 1 if support_labels.numel() else 0
    prototypes = []
    for c in range(n_way):
        rows = support[support_labels == c]
        if rows.shape[0] == 0:
            raise LossComputationError(f"Class {c} has no support rows")
        prototypes.append(rows.mean(dim=0))
    if not prototypes:
        raise LossComputationError("Empty support set")
    return torch.stack(prototypes)


def distance_logits(
    query: torch.Tensor, prototypes: torch.Tensor, squared: bool = True
) -> torch.Tensor:
    """[Q, D] x [N, D] -> [Q, N] negative (squared) Euclidean distances."""
    if query.shape[-1] != prototypes.shape[-1]:
        raise ShapeMismatchError(
            f"Query dim {query.shape[-1]} != prototype dim {prototypes.shape[-1]}"
        )
    distances = ((query.unsqueeze(1) - prototypes.unsqueeze(0)) ** 2).sum(dim=-1)
    if not squared:
        distances = distances.clamp_min(1e-12).sqrt()
    return -distances


def pointwise_logits(
    query_maps: torch.Tensor, prototype_maps: torch.Tensor, squared: bool = True
) -> torch.Tensor:
    """[Q, h, w, m] x [N, h, w, m] -> [Q, h, w, N], distances taken per spatial point."""
    if query_maps.shape[1:] != prototype_maps.shape[1:]:
        raise ShapeMismatchError(
            f"Query maps {tuple(query_maps.shape)} vs prototype maps {tuple(prototype_maps.shape)}"
        )
    distances = ((query_maps.unsqueeze(1) - prototype_maps.unsqueeze(0)) ** 2).sum(dim=-1)
    if not squared:
        distances = distances.clamp_min(1e-12).sqrt()
    return -distances.permute(0, 2, 3, 1)


def local_proto_loss(
    query_flat: torch.Tensor,
    prototypes: torch.Tensor,
    local_labels: torch.Tensor,
    squared: bool = True,
) -> torch.Tensor:
    if prototypes.shape[0] < 2:
        raise LossComputationError("Prototype matching needs at least 2 classes")
    _check_labels(local_labels, prototypes.shape[0])
    return F.cross_entropy(distance_logits(query_flat, prototypes, squared), local_labels)


def elastic_terms(
    logits: torch.Tensor, positive_idx: Union[torch.Tensor, int], cfg: ElasticConfig
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Margin and elastic push for scores [..., N] with positive class indices [...].

    The margin is the positive score minus the best negative score (the nearest
    negative prototype); the push is (alpha1 * e / E) * sigmoid(alpha2 * margin).
    Both come back detached.
    """
    n_way = logits.shape[-1]
    if n_way < 2:
        raise LossComputationError("The elastic constraint needs at least 2 classes")
    scores = logits.detach()
    positive = torch.as_tensor(positive_idx, device=scores.device, dtype=torch.long)
    positive = positive.expand(scores.shape[:-1])
    _check_labels(positive, n_way)

    is_positive = F.one_hot(positive, n_way).bool()
    dis_p = scores.gather(-1, positive.unsqueeze(-1)).squeeze(-1)
    dis_n = scores.masked_fill(is_positive, float("-inf")).max(dim=-1).values
    delta = dis_p - dis_n
    scale = cfg.alpha1 * cfg.progress if cfg.enabled else 0.0
    return delta, scale * torch.sigmoid(cfg.alpha2 * delta)


def elastic_constraint(
    logits_point: torch.Tensor, positive_idx: Union[torch.Tensor, int], cfg: ElasticConfig
) -> torch.Tensor:
    return elastic_terms(logits_point, positive_idx, cfg)[1]


def _pointwise_matching(
    query_maps: torch.Tensor,
    prototype_maps: torch.Tensor,
    local_labels: torch.Tensor,
    cfg: Optional[ElasticConfig],
    squared: bool,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    logits = pointwise_logits(query_maps, prototype_maps, squared)
    n_way = logits.shape[-1]
    if n_way < 2:
        raise LossComputationError("Prototype matching needs at least 2 classes")
    _check_labels(local_labels, n_way)
    queries, height, width, _ = logits.shape
    labels = local_labels.view(queries, 1, 1).expand(queries, height, width)

    if cfg is None:
        delta = torch.zeros(labels.shape, dtype=logits.dtype, device=logits.device)
        d_el = torch.zeros_like(delta)
    else:
        delta, d_el = elastic_terms(logits, labels, cfg)
    # the push only shrinks the positive numerator; the denominator sees the
    # modified positive score
    modified = logits - d_el.unsqueeze(-1) * F.one_hot(labels, n_way).to(logits.dtype)
    loss = F.cross_entropy(modified.reshape(-1, n_way), labels.reshape(-1))
    return loss, delta.mean(), d_el.mean()


def pointwise_proto_loss(
    query_maps: torch.Tensor,
    prototype_maps: torch.Tensor,
    local_labels: torch.Tensor,
    squared: bool = True,
) -> torch.Tensor:
    """Prototype matching evaluated independently at every spatial point, then averaged."""
    return _pointwise_matching(query_maps, prototype_maps, local_labels, None, squared)[0]


def elastic_local_loss_with_terms(
    query_maps: torch.Tensor,
    prototype_maps: torch.Tensor,
    local_labels: torch.Tensor,
    cfg: ElasticConfig,
    squared: bool = True,
) -> tuple[torch.Tensor, float, float]:
    """Elastic local loss plus the mean margin and mean push over query points."""
    loss, delta, d_el = _pointwise_matching(
        query_maps, prototype_maps, local_labels, cfg, squared
    )
    return loss, float(delta), float(d_el)


def elastic_local_loss(
    query_maps: torch.Tensor,
    prototype_maps: torch.Tensor,
    local_labels: torch.Tensor,
    cfg: ElasticConfig,
    squared: bool = True,
) -> torch.Tensor:
    return _pointwise_matching(query_maps, prototype_maps, local_labels, cfg, squared)[0]


def mutual_loss(
    global_map: torch.Tensor, local_map: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """
    Symmetric KL between the softmax distributions of the two views' flattened
    features, summed over both directions and averaged over images. Gradients
    reach both views.
    """
    if global_map.shape != local_map.shape:
        raise ShapeMismatchError(
            f"Mutual loss needs equal shapes, got {tuple(global_map.shape)} and {tuple(local_map.shape)}"
        )
    batch = global_map.shape[0]
    log_g = F.log_softmax(global_map.reshape(batch, -1) / temperature, dim=-1)
    log_l = F.log_softmax(local_map.reshape(batch, -1) / temperature, dim=-1)
    # kl_div(input, target) = KL(target || input)
    kl_l_g = F.kl_div(log_g, log_l, reduction="batchmean", log_target=True)
    kl_g_l = F.kl_div(log_l, log_g, reduction="batchmean", log_target=True)
    return (kl_l_g + kl_g_l) * temperature**2


def _scalar(value: Scalar) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def total_loss(
    global_loss: Scalar,
    local_loss: Scalar,
    mutual: Scalar,
    weights: LossWeights = LossWeights(),
    mean_delta: float = 0.0,
    mean_d_el: float = 0.0,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum of the three objectives and the report logged for the step."""
    g, l, m = global_loss, local_loss, mutual
    total = torch.as_tensor(weights.alpha * g + weights.beta * l + weights.gamma * m)
    report = LossReport(
        global_loss=_scalar(g),
        local_loss=_scalar(l),
        mutual_loss=_scalar(m),
        total_loss=_scalar(total),
        mean_delta=mean_delta,
        mean_d_el=mean_d_el,
    )
    if not report.is_finite:
        logger.error(f"Non-finite loss: {report.to_dict()}")
        raise DivergenceError(f"Loss diverged: {report.to_dict()}", report=report)
    return total, report
