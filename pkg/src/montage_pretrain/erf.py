"""Effective receptive fields measured by input-gradient backprop."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .montage import MontageTemplate
from .network import Architecture, FeatureGeometry, NetworkParams, build_graph


class DegenerateERFError(ArithmeticError):
    pass


def region_masks(template: MontageTemplate, height: int, width: int) -> np.ndarray:
    """(4, H, W) binary masks, one per template region."""
    if (template.canvas_w, template.canvas_h) != (width, height):
        raise ValueError(f"template canvas {template.canvas_w}x{template.canvas_h} != input {width}x{height}")
    masks = np.zeros((4, height, width))
    for i in range(4):
        rows, cols = template.region_slices(i)
        masks[i, rows, cols] = 1.0
    return masks


def _as_probe_batch(probe: np.ndarray) -> np.ndarray:
    probe = np.asarray(probe, dtype=np.float64)
    return probe[None] if probe.ndim == 3 else probe


def erf_maps(params: NetworkParams, probe: np.ndarray, positions, mode: str = "abs",
             chunk: int = 32) -> np.ndarray:
    """ERF maps (P, H, W) for feature positions ``[(j, k), ...]``.

    Upstream gradient 1 on every feature channel at (j, k), 0 elsewhere. The
    per-pixel value is the channel sum of |d/dinput| (``mode="abs"``) or of
    its square (``mode="sq"``). A probe batch is averaged over.
    """
    if mode not in ("abs", "sq"):
        raise ValueError(f"unknown ERF mode {mode!r}")
    probes = _as_probe_batch(probe)
    b, _, h, w = probes.shape
    geo = FeatureGeometry.for_input(params.arch, h, w)
    positions = list(positions)
    for j, k in positions:
        if not (0 <= j < geo.feature_h and 0 <= k < geo.feature_w):
            raise ValueError(f"position ({j}, {k}) outside the {geo.feature_h}x{geo.feature_w} feature grid")
    out = np.empty((len(positions), h, w))
    per_chunk = max(1, chunk // b)
    cf = params.arch.feature_channels
    for start in range(0, len(positions), per_chunk):
        batch_pos = positions[start:start + per_chunk]
        x = np.repeat(probes[None], len(batch_pos), axis=0).reshape(-1, *probes.shape[1:])
        g = build_graph(params, x, input_grad=True, param_grad=False)
        up = np.zeros((len(batch_pos), b, cf, geo.feature_h, geo.feature_w))
        for p, (j, k) in enumerate(batch_pos):
            up[p, :, :, j, k] = 1.0
        ad.weighted_sum(g.features, up.reshape(g.features.shape)).backward()
        gin = g.input.grad.reshape(len(batch_pos), b, *probes.shape[1:])
        mag = np.abs(gin) if mode == "abs" else gin * gin
        out[start:start + len(batch_pos)] = mag.sum(axis=2).mean(axis=1)
    return out


def compute_erf(params: NetworkParams, probe: np.ndarray, position: tuple[int, int],
                mode: str = "abs") -> np.ndarray:
    g = erf_maps(params, probe, [position], mode=mode)[0]
    if not g.sum() > 0:
        raise DegenerateERFError(f"ERF at {position} has zero mass")
    return g


def erf_mass(g: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Fraction of ERF mass inside each region mask."""
    total = g.sum()
    if not total > 0:
        raise DegenerateERFError("ERF has zero mass")
    return (masks * g).sum(axis=(1, 2)) / total


def _nearest_computed(fh: int, fw: int, stride: int) -> np.ndarray:
    rows = np.arange(0, fh, stride)
    cols = np.arange(0, fw, stride)
    comp = np.array([(r, c) for r in rows for c in cols])  # row-major, so argmin breaks ties row-major
    src = np.empty((fh, fw, 2), dtype=int)
    for j in range(fh):
        for k in range(fw):
            d = (comp[:, 0] - j) ** 2 + (comp[:, 1] - k) ** 2
            src[j, k] = comp[int(np.argmin(d))]
    return src


def erf_grid(params: NetworkParams, probe: np.ndarray, masks: np.ndarray, stride: int = 1,
             mode: str = "abs", fallback: str | None = None, chunk: int = 32) -> np.ndarray:
    """Region mass fractions (fh, fw, 4) for every feature position.

    Only every ``stride``-th row/column is measured; the rest copy their nearest
    measured neighbour. ``fallback="uniform"`` replaces a zero-mass ERF by a
    uniform one (mask area fractions) instead of raising.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    probes = _as_probe_batch(probe)
    geo = FeatureGeometry.for_input(params.arch, probes.shape[2], probes.shape[3])
    fh, fw = geo.feature_h, geo.feature_w
    src = _nearest_computed(fh, fw, stride)
    positions = [(int(j), int(k)) for j in range(0, fh, stride) for k in range(0, fw, stride)]
    maps = erf_maps(params, probes, positions, mode=mode, chunk=chunk)
    uniform = masks.sum(axis=(1, 2)) / masks.sum()
    measured = {}
    for pos, g in zip(positions, maps):
        if g.sum() > 0:
            measured[pos] = erf_mass(g, masks)
        elif fallback == "uniform":
            measured[pos] = uniform
        else:
            raise DegenerateERFError(f"ERF at {pos} has zero mass")
    out = np.empty((fh, fw, 4))
    for j in range(fh):
        for k in range(fw):
            out[j, k] = measured[tuple(int(v) for v in src[j, k])]
    return out


def receptive_cone(arch: Architecture, j: int, k: int, height: int, width: int) -> tuple[int, int, int, int]:
    """Inclusive input (row_lo, row_hi, col_lo, col_hi) that can influence feature (j, k)."""
    lo_r, hi_r, lo_c, hi_c = j, j, k, k
    for layer in reversed(arch.layers()):
        if layer["type"] == "conv" and layer["name"] == "head":
            continue
        if layer["type"] == "relu":
            continue
        s, kk = layer["stride"], layer["kernel"]
        p = layer.get("pad", 0)
        lo_r, hi_r = s * lo_r - p, s * hi_r - p + kk - 1
        lo_c, hi_c = s * lo_c - p, s * hi_c - p + kk - 1
    return max(lo_r, 0), min(hi_r, height - 1), max(lo_c, 0), min(hi_c, width - 1)


def heatmap(g: np.ndarray) -> np.ndarray:
    """Max-normalized uint8 grayscale view of an ERF map."""
    m = g.max()
    scaled = g / m if m > 0 else g
    return np.clip(np.rint(scaled * 255), 0, 255).astype(np.uint8)


def region_center_positions(template: MontageTemplate, geo: FeatureGeometry) -> list[tuple[int, int]]:
    """Feature cell containing the centre of each template region."""
    out = []
    for r in template.regions:
        cx, cy = (r.x_min + r.x_max) / 2, (r.y_min + r.y_max) / 2
        j = min(geo.feature_h - 1, int(cy * geo.alpha))
        k = min(geo.feature_w - 1, int(cx * geo.alpha))
        out.append((j, k))
    return out
