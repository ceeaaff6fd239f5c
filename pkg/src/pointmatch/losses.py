"""Scale-normalized regression and temporal-consistency losses.

Every loss here normalizes each stream by its own mean distance-to-origin, so
predictions are compared up to global scale. Window losses pool that factor
over all frames of a window per stream, which is what links the frames: a
per-pair scale wobble can no longer cancel out frame by frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyDomainError
from .geometry import ConfidenceMap, Pointmap

ALPHA_CONF = 0.2

_DEGENERATE_NORM = 1e-12


def norm_factor(pm: Pointmap) -> float:
    """Mean distance-to-origin over the map's valid pixels.

    All-zero maps (degenerate) normalize by 1 instead; empty validity raises
    EmptyDomainError.
    """
    if not pm.valid.any():
        raise EmptyDomainError("norm factor needs at least one valid pixel")
    z = float(np.linalg.norm(pm.points[pm.valid], axis=-1).mean())
    return z if z > _DEGENERATE_NORM else 1.0


def norm_factor_window(maps: Sequence[Pointmap]) -> float:
    """Norm factor pooled over every valid pixel of a window of maps."""
    if not maps:
        raise ValueError("need at least one map")
    total, count = 0.0, 0
    for m in maps:
        if m.valid.any():
            total += float(np.linalg.norm(m.points[m.valid], axis=-1).sum())
            count += int(m.valid.sum())
    if count == 0:
        raise EmptyDomainError("norm factor needs at least one valid pixel")
    z = total / count
    return z if z > _DEGENERATE_NORM else 1.0


@dataclass
class PixelLoss:
    """Per-pixel loss grid (zero outside valid) with its mean."""

    values: np.ndarray
    valid: np.ndarray
    mean: float


def regression_loss(pred: Pointmap, gt: Pointmap) -> PixelLoss:
    """Scale-normalized pointmap regression: || pred/z - gt/z_bar || per pixel.

    Each side is normalized by its own norm_factor over its own validity; the
    per-pixel grid and mean run over the joint validity.
    """
    if pred.resolution != gt.resolution:
        raise ValueError("pred and gt must share resolution")
    z = norm_factor(pred)
    z_bar = norm_factor(gt)
    valid = pred.valid & gt.valid
    diff = pred.points / z - gt.points / z_bar
    values = np.linalg.norm(diff, axis=-1)
    values[~valid] = 0.0
    if not valid.any():
        raise EmptyDomainError("no jointly-valid pixels")
    return PixelLoss(values=values, valid=valid, mean=float(values[valid].mean()))


def confidence_loss(
    conf: ConfidenceMap,
    pixel_loss: PixelLoss,
    alpha_conf: float = ALPHA_CONF,
) -> float:
    """Confidence-weighted loss: mean over valid pixels of C*l - alpha*log C.

    C = 1 + exp(raw) > 1, so log C > 0 and the penalty term is bounded.
    """
    if conf.raw.shape != pixel_loss.values.shape:
        raise ValueError("confidence and loss grids must share resolution")
    if not pixel_loss.valid.any():
        raise EmptyDomainError("no valid pixels")
    c = conf.values[pixel_loss.valid]
    l = pixel_loss.values[pixel_loss.valid]
    return float((c * l - alpha_conf * np.log(c)).mean())


def confidence_optimum(residual: float, alpha_conf: float = ALPHA_CONF) -> tuple[float, float]:
    """Per-pixel minimizer of C*r - alpha*log C over C >= 1 and its loss value.

    Unconstrained optimum alpha/r clamps to the C > 1 floor when r >= alpha.
    """
    if residual <= 0:
        raise ValueError("residual must be positive")
    c_star = max(alpha_conf / residual, 1.0)
    return c_star, c_star * residual - alpha_conf * float(np.log(c_star))


@dataclass
class WindowPredictions:
    """A window of predicted maps with their targets (one stream).

    preds[i] aligns with gts[i]; all maps share one resolution.
    """

    preds: list[Pointmap]
    gts: list[Pointmap]

    def __post_init__(self):
        if len(self.preds) != len(self.gts):
            raise ValueError("pred/gt window lengths differ")
        if not self.preds:
            raise ValueError("empty window")
        res = self.preds[0].resolution
        for m in list(self.preds) + list(self.gts):
            if m.resolution != res:
                raise ValueError("window maps must share resolution")

    @property
    def frames(self) -> int:
        return len(self.preds)


def _stream_terms(stream: WindowPredictions) -> list[float]:
    """Per-frame mean normalized error with window-pooled norm factors.

    Frames with empty joint validity contribute zero (nothing to compare);
    a stream with no valid pixels at all raises via norm_factor_window.
    """
    z = norm_factor_window(stream.preds)
    z_bar = norm_factor_window(stream.gts)
    terms = []
    for p, g in zip(stream.preds, stream.gts):
        valid = p.valid & g.valid
        if not valid.any():
            terms.append(0.0)
            continue
        diff = p.points[valid] / z - g.points[valid] / z_bar
        terms.append(float(np.linalg.norm(diff, axis=-1).mean()))
    return terms


def _two_stream_loss(a: WindowPredictions, b: WindowPredictions) -> float:
    if a.frames != b.frames:
        raise ValueError("streams must cover the same window")
    ta, tb = _stream_terms(a), _stream_terms(b)
    return float(np.mean([x + y for x, y in zip(ta, tb)]))


def temporal_tracking_loss(matched: WindowPredictions, ego: WindowPredictions) -> float:
    """Window tracking loss: matched-map stream plus ego-map stream.

    matched holds the keyframe-content maps in each frame's camera; ego holds
    each frame's own-view maps. Norm factors pool over the window per stream.
    """
    return _two_stream_loss(matched, ego)


def temporal_depth_loss(head1: WindowPredictions, head2: WindowPredictions) -> float:
    """Window depth loss over identical-view pairs.

    Both heads see the same geometry; each stream is normalized by its own
    pooled factor.
    """
    return _two_stream_loss(head1, head2)


def temporal_recon_loss(keyframe: WindowPredictions, refs: WindowPredictions) -> float:
    """Window reconstruction loss.

    keyframe is the keyframe-anchored stream (same keyframe content seen from
    every frame of the window), refs the per-frame reference stream.
    """
    return _two_stream_loss(keyframe, refs)
