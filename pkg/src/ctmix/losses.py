"""Joint training objective: contrastive + mixup + classification terms.

The contrastive term treats every same-label row in the two-view batch as a
positive of its anchor, normalizes each anchor by its positive count (or by
the literal batch-count reading, behind ``count_mode``), and scores
similarities as dot products of unit-norm projections divided by the
temperature. Anchors with no positives contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgument

COUNT_MODE_VIEWS = "views"  # normalizer = number of positives of the anchor
COUNT_MODE_BATCH = "batch"  # normalizer = 2 * same-label rows - 1

ROW_NORM_TOLERANCE = 1e-4


@dataclass
class BatchEmbedding:
    """Forward outputs for the 2N raw (two-view) rows of a training step."""

    z: torch.Tensor  # (2N, d_p) unit rows
    r: torch.Tensor  # (2N, d_e)
    logits: torch.Tensor  # (2N, 2)
    labels: torch.Tensor  # (2N,) int class indices

    def __post_init__(self):
        if not torch.isfinite(self.logits).all():
            raise InvalidArgument("logits contain non-finite values")


@dataclass
class LossReport:
    """Scalar components plus per-sample breakdown; ``total`` keeps the graph."""

    l_con: float
    l_mix: float
    l_clf: float
    l_total: float
    per_sample: dict[str, np.ndarray]
    total: torch.Tensor = field(repr=False)


def supcon_loss(
    z: torch.Tensor,
    labels: torch.Tensor,
    tau: float,
    count_mode: str = COUNT_MODE_VIEWS,
) -> torch.Tensor:
    """Per-anchor supervised contrastive losses over a batch of unit rows.

    For anchor i with positives P(i) = {j != i : label_j == label_i}:
    -1/|coeff| * sum_{j in P(i)} log( exp(z_i.z_j/tau) / sum_{k != i} exp(z_i.z_k/tau) ).
    """
    if tau <= 0:
        raise InvalidArgument(f"temperature must be positive, got {tau}")
    if count_mode not in (COUNT_MODE_VIEWS, COUNT_MODE_BATCH):
        raise InvalidArgument(f"unknown count_mode {count_mode!r}")
    if z.ndim != 2 or len(z) < 2:
        raise InvalidArgument(f"z must be (2N, d_p) with 2N >= 2, got {tuple(z.shape)}")
    norms = z.detach().norm(dim=1)
    if (norms - 1.0).abs().max().item() > ROW_NORM_TOLERANCE:
        raise InvalidArgument("projection rows must be unit-norm")

    labels = labels.reshape(-1)
    n = len(z)
    sim = (z @ z.T) / tau
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    log_denom = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    log_prob = sim - log_denom

    positives = (labels.unsqueeze(0) == labels.unsqueeze(1)) & ~eye
    pos_counts = positives.sum(dim=1)
    if count_mode == COUNT_MODE_VIEWS:
        coeff = pos_counts
    else:
        coeff = 2 * (pos_counts + 1) - 1
    pos_sum = (log_prob * positives).sum(dim=1)
    safe_coeff = coeff.clamp(min=1).to(z.dtype)
    out = -pos_sum / safe_coeff
    return torch.where(pos_counts > 0, out, torch.zeros_like(out))


def soft_cross_entropy(logits: torch.Tensor, soft_labels: torch.Tensor) -> torch.Tensor:
    """Per-sample -sum_c y_c * log softmax(logits)_c; one-hot rows reduce to CE."""
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits.unsqueeze(0)
        soft_labels = soft_labels.unsqueeze(0)
    if logits.shape != soft_labels.shape:
        raise InvalidArgument(f"shape mismatch: logits {tuple(logits.shape)} vs labels {tuple(soft_labels.shape)}")
    checked = soft_labels.detach()
    if checked.min().item() < -1e-6 or (checked.sum(dim=1) - 1.0).abs().max().item() > 1e-6:
        raise InvalidArgument("soft labels must be nonnegative rows summing to 1")
    out = -(soft_labels * F.log_softmax(logits, dim=1)).sum(dim=1)
    return out[0] if squeeze else out


def one_hot(labels: torch.Tensor, num_classes: int = 2) -> torch.Tensor:
    return F.one_hot(labels.reshape(-1).long(), num_classes)


def total_loss(
    raw: BatchEmbedding,
    mixed_logits: torch.Tensor,
    mixed_soft_labels: torch.Tensor,
    tau: float,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    count_mode: str = COUNT_MODE_VIEWS,
) -> LossReport:
    """Mean over the 2N rows of contrastive + mixup + classification terms.

    Row i contributes its contrastive term and raw-label cross-entropy from
    the raw view plus the soft cross-entropy of its mixed counterpart.
    """
    if len(mixed_logits) != len(raw.z):
        raise InvalidArgument(
            f"raw rows ({len(raw.z)}) and mixed rows ({len(mixed_logits)}) must match"
        )
    con = supcon_loss(raw.z, raw.labels, tau, count_mode=count_mode)
    clf = soft_cross_entropy(raw.logits, one_hot(raw.labels).to(raw.logits.dtype))
    mix = soft_cross_entropy(mixed_logits, mixed_soft_labels)
    w_con, w_mix, w_clf = (float(w) for w in weights)
    per_sample_total = w_con * con + w_mix * mix + w_clf * clf
    total = per_sample_total.mean()
    return LossReport(
        l_con=con.detach().mean().item(),
        l_mix=mix.detach().mean().item(),
        l_clf=clf.detach().mean().item(),
        l_total=total.detach().item(),
        per_sample={
            "con": con.detach().cpu().numpy(),
            "mix": mix.detach().cpu().numpy(),
            "clf": clf.detach().cpu().numpy(),
            "total": per_sample_total.detach().cpu().numpy(),
        },
        total=total,
    )
