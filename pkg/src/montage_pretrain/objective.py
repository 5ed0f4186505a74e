"""Classification objectives over a Montage feature map.

* ERF-adaptive dense classification: per-position cross-entropy against
  soft labels mixed by ERF mass, averaged per region, then over regions.
* Block-wise: pool each region, classify, hard labels.
* Global: pool the whole canvas, classify against the area-mixed label.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .montage import MontageTemplate
from .network import FeatureGeometry

OBJECTIVES = ("erf_adaptive", "blockwise", "global")
OBJECTIVE_ALIASES = {"erf": "erf_adaptive", "block": "blockwise", "global": "global",
                     "erf_adaptive": "erf_adaptive", "blockwise": "blockwise"}


def label_weights(rho, home: int, tau: float) -> np.ndarray:
    """Mixing weights over the four region labels for one feature position.

    The home region gets ``max(tau, rho[home])``; the remainder is shared among
    the other regions in proportion to their ERF mass. If the ERF lies entirely
    in the home region the others get 0.
    """
    rho = np.asarray(rho, dtype=np.float64)
    return label_weights_grid(rho[None, None], np.array([[home]]), tau)[0, 0]


def label_weights_grid(rho: np.ndarray, home: np.ndarray, tau: float) -> np.ndarray:
    """Vectorized :func:`label_weights` for (..., 4) mass fractions and (...) home indices."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    rho = np.asarray(rho, dtype=np.float64)
    home = np.asarray(home)
    is_home = np.arange(4) == home[..., None]
    rho_home = np.take_along_axis(rho, home[..., None], axis=-1)
    w_home = np.maximum(tau, rho_home)
    rest = np.where(is_home, 0.0, rho)
    denom = rest.sum(axis=-1, keepdims=True)
    safe = np.where(denom > 0, denom, 1.0)
    others = np.where(denom > 0, (1.0 - w_home) * rest / safe, 0.0)
    if np.any(denom <= 0):
        # all mass at home: weight 1 at home, whatever tau says
        w_home = np.where(denom > 0, w_home, 1.0)
    return np.where(is_home, w_home, others)


def home_regions(template: MontageTemplate, geo: FeatureGeometry) -> np.ndarray:
    """(fh, fw) region index containing each feature cell's centre."""
    out = np.empty((geo.feature_h, geo.feature_w), dtype=int)
    for j in range(geo.feature_h):
        for k in range(geo.feature_w):
            x, y = geo.cell_center(j, k)
            try:
                out[j, k] = template.region_of(x, y)
            except ValueError as e:
                raise RuntimeError(f"feature cell ({j}, {k}) maps outside the canvas") from e
    return out


@dataclass
class SoftLabelField:
    weights: np.ndarray  # (fh, fw, 4)
    home: np.ndarray  # (fh, fw)
    tau: float
    stamp: int = 0
    labels: np.ndarray | None = None  # (fh, fw, C+1) when composed for one image

    def compose(self, region_labels: np.ndarray) -> np.ndarray:
        """Soft targets for region labels (4, K) -> (fh, fw, K), or (N, 4, K) -> (N, K, fh, fw)."""
        region_labels = np.asarray(region_labels, dtype=np.float64)
        if region_labels.ndim == 2:
            return np.einsum("jki,ic->jkc", self.weights, region_labels)
        return np.einsum("jki,nic->ncjk", self.weights, region_labels)


def soft_label_field(mass_grid: np.ndarray, template: MontageTemplate, geo: FeatureGeometry, tau: float,
                     labels: np.ndarray | None = None, stamp: int = 0) -> SoftLabelField:
    if mass_grid.shape != (geo.feature_h, geo.feature_w, 4):
        raise ShapeError(f"mass grid {mass_grid.shape} does not cover the {geo.feature_h}x{geo.feature_w} grid")
    home = home_regions(template, geo)
    field = SoftLabelField(label_weights_grid(mass_grid, home, tau), home, float(tau), stamp)
    if labels is not None:
        field.labels = field.compose(labels)
    return field


def hard_label_field(template: MontageTemplate, geo: FeatureGeometry, stamp: int = 0) -> SoftLabelField:
    home = home_regions(template, geo)
    return SoftLabelField((np.arange(4) == home[..., None]).astype(float), home, 1.0, stamp)


@dataclass
class LossReport:
    loss: Tensor
    region_losses: np.ndarray  # (4,)
    loss_map: np.ndarray | None = None

    @property
    def value(self) -> float:
        return self.loss.item()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _batched(x: Tensor, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.float64)
    if x.data.ndim == 3:
        x = Tensor(x.data[None]) if not x.requires_grad else _unsqueeze(x)
    if labels.ndim == 2:
        labels = labels[None]
    return x, labels


def _unsqueeze(x: Tensor) -> Tensor:
    return ad._result(x.data[None], (x,), lambda g: (g[0],))


def erf_adaptive_loss(logits, field: SoftLabelField, labels: np.ndarray) -> LossReport:
    """Region-balanced mean of the per-position soft-label cross-entropy map.

    ``logits`` (N, K, fh, fw) or (K, fh, fw); ``labels`` (N, 4, K) or (4, K).
    """
    logits, labels = _batched(_as_tensor(logits), labels)
    n, kc, fh, fw = logits.shape
    if field.weights.shape[:2] != (fh, fw) or labels.shape[1:] != (4, kc):
        raise ShapeError(f"logits {logits.shape}, labels {labels.shape} and field {field.weights.shape} disagree")
    ce = ad.softmax_cross_entropy(logits, field.compose(labels), axis=1)
    counts = np.bincount(field.home.ravel(), minlength=4)
    present = counts > 0
    region_losses = np.array([ce.data[:, field.home == i].mean() if present[i] else np.nan for i in range(4)])
    per_pos = 1.0 / (present.sum() * n * counts[field.home])
    loss = ad.weighted_sum(ce, np.broadcast_to(per_pos, ce.shape))
    return LossReport(loss, region_losses, ce.data)


def region_pool_weights(home: np.ndarray) -> np.ndarray:
    """(4, fh, fw) averaging weights over each region's feature cells."""
    masks = (np.arange(4)[:, None, None] == home[None]).astype(float)
    counts = masks.sum(axis=(1, 2), keepdims=True)
    return masks / np.where(counts > 0, counts, 1.0)


def blockwise_loss(features, head_w, head_b, labels: np.ndarray, home: np.ndarray) -> LossReport:
    """Average-pool each region of X, apply the 1x1 head, hard-label CE, mean over regions."""
    x, labels = _batched(_as_tensor(features), labels)
    if x.shape[2:] != home.shape:
        raise ShapeError(f"feature map {x.shape[2:]} does not match region grid {home.shape}")
    pooled = ad.region_pool(x, region_pool_weights(home))
    logits = ad.linear(pooled, _as_tensor(head_w), _as_tensor(head_b))
    ce = ad.softmax_cross_entropy(logits, labels, axis=2)  # (N, 4)
    present = np.bincount(home.ravel(), minlength=4) > 0
    coeff = np.where(present, 1.0 / (present.sum() * ce.shape[0]), 0.0)
    loss = ad.weighted_sum(ce, np.broadcast_to(coeff, ce.shape))
    region_losses = np.where(present, ce.data.mean(axis=0), np.nan)
    return LossReport(loss, region_losses)


def global_label(labels: np.ndarray, template: MontageTemplate) -> np.ndarray:
    """Region labels mixed by region area share of the canvas."""
    share = template.region_areas() / (template.canvas_w * template.canvas_h)
    return np.einsum("i,...ic->...c", share, np.asarray(labels, dtype=np.float64))


def global_loss(features, head_w, head_b, labels: np.ndarray, template: MontageTemplate) -> LossReport:
    """Global average pool, 1x1 head, CE against the area-mixed label."""
    x, labels = _batched(_as_tensor(features), labels)
    fh, fw = x.shape[2:]
    pooled = ad.region_pool(x, np.full((1, fh, fw), 1.0 / (fh * fw)))
    logits = ad.linear(pooled, _as_tensor(head_w), _as_tensor(head_b))  # (N, 1, K)
    target = global_label(labels, template)[:, None, :]
    ce = ad.softmax_cross_entropy(logits, target, axis=2)
    loss = ad.weighted_sum(ce, np.full(ce.shape, 1.0 / ce.data.size))
    return LossReport(loss, np.full(4, np.nan))


def objective_loss(objective: str, graph, labels: np.ndarray, template: MontageTemplate,
                   field: SoftLabelField | None = None) -> LossReport:
    """Dispatch on objective name for a recorded network forward pass."""
    objective = OBJECTIVE_ALIASES.get(objective, objective)
    if objective == "erf_adaptive":
        if field is None:
            raise ValueError("erf_adaptive objective needs a soft-label field")
        return erf_adaptive_loss(graph.logits, field, labels)
    geo_home = field.home if field is not None else None
    if objective == "blockwise":
        if geo_home is None:
            raise ValueError("blockwise objective needs the region grid (pass a hard label field)")
        return blockwise_loss(graph.features, graph.params["head.weight"], graph.params["head.bias"],
                              labels, geo_home)
    if objective == "global":
        return global_loss(graph.features, graph.params["head.weight"], graph.params["head.bias"],
                           labels, template)
    raise ValueError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
