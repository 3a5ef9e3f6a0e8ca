"""Dual-head inference: combining calibrated and original head predictions."""

import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core_types import (
    BACKGROUND,
    ClassStats,
    ConfigError,
    DegeneratePredictionError,
    PredictionVector,
    ShapeError,
)

logger = logging.getLogger(__name__)

ORIG_ONLY = "orig_only"
CAL_ONLY = "cal_only"
AVG = "avg"
DET = "det"
SEL = "sel"
SEL_THR = "sel_thr"
SEL_SCALE = "sel_scale"
SEL_NORM = "sel_norm"
SCHEMES = (ORIG_ONLY, CAL_ONLY, AVG, DET, SEL, SEL_THR, SEL_SCALE, SEL_NORM)

BG_FROM_ORIG = "orig"
BG_FROM_CAL = "cal"


@dataclass(frozen=True)
class CombineConfig:
    """How two heads' scores are merged.

    ``T`` is the training-instance boundary: classes with ``N_z <= T`` are
    served by the calibrated head. ``det_top_k`` limits the per-class union
    of the ``det`` scheme; ``None`` keeps every proposal.
    """

    scheme: str = SEL
    T: int = 300
    thr: float = 0.05
    sel_bg: str = BG_FROM_ORIG
    det_top_k: Optional[int] = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown combination scheme: {self.scheme!r}")
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")
        if not 0.0 <= self.thr < 1.0:
            raise ConfigError(f"thr must be in [0, 1), got {self.thr}")
        if self.sel_bg not in (BG_FROM_ORIG, BG_FROM_CAL):
            raise ConfigError(f"sel_bg must be 'orig' or 'cal', got {self.sel_bg!r}")
        if self.det_top_k is not None and self.det_top_k < 1:
            raise ConfigError("det_top_k must be positive")


def calibrated_mask(stats: ClassStats, T: int, sel_bg: str = BG_FROM_ORIG) -> np.ndarray:
    """Length C+1 mask, True where the calibrated head serves the entry."""
    mask = stats.instance_array() <= T
    mask[BACKGROUND] = sel_bg == BG_FROM_CAL
    return mask


def _check_pair(p_cal: np.ndarray, p_orig: np.ndarray, stats: ClassStats) -> None:
    if p_cal.shape != p_orig.shape:
        raise ShapeError(f"prediction shapes differ: {p_cal.shape} vs {p_orig.shape}")
    if p_cal.shape[-1] != stats.num_classes + 1:
        raise ShapeError(f"predictions have {p_cal.shape[-1]} entries, expected {stats.num_classes + 1}")


def _select(p_cal: np.ndarray, p_orig: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, p_cal, p_orig)


def _normalize(scores: np.ndarray) -> np.ndarray:
    totals = scores.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise DegeneratePredictionError("degenerate prediction: scores sum to zero")
    return scores / totals


def background_ratio(p_cal: np.ndarray, p_orig: np.ndarray) -> float:
    """Mean original background score over mean calibrated background score."""
    cal_bg = float(np.mean(p_cal[..., BACKGROUND]))
    if cal_bg <= 0:
        raise DegeneratePredictionError("degenerate prediction: calibrated background scores are all zero")
    return float(np.mean(p_orig[..., BACKGROUND])) / cal_bg


def _det_union(p_cal: np.ndarray, p_orig: np.ndarray, cfg: CombineConfig) -> np.ndarray:
    n = len(p_cal)
    k = n if cfg.det_top_k is None else min(cfg.det_top_k, n)
    out = np.zeros_like(p_cal)
    source = p_cal if cfg.sel_bg == BG_FROM_CAL else p_orig
    out[:, BACKGROUND] = source[:, BACKGROUND]
    if k == n:
        out[:, 1:] = np.maximum(p_cal[:, 1:], p_orig[:, 1:])
        return out
    for scores in (p_cal, p_orig):
        top = np.argsort(-scores[:, 1:], axis=0, kind="stable")[:k]
        cols = np.arange(1, scores.shape[1])[None, :]
        picked = np.zeros_like(out, dtype=bool)
        picked[top, np.broadcast_to(cols, top.shape)] = True
        out = np.where(picked, np.maximum(out, scores), out)
    return out


def batch_combine(
    p_cal: np.ndarray,
    p_orig: np.ndarray,
    stats: ClassStats,
    cfg: CombineConfig,
    ids_cal: Optional[Sequence[int]] = None,
    ids_orig: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Combine two aligned (n, C+1) prediction arrays under ``cfg``.

    Raises:
        ShapeError: if the arrays or their proposal ids are not aligned.
        DegeneratePredictionError: for sel_norm rows summing to zero.
    """
    p_cal = np.asarray(p_cal, dtype=np.float64)
    p_orig = np.asarray(p_orig, dtype=np.float64)
    _check_pair(p_cal, p_orig, stats)
    if ids_cal is not None or ids_orig is not None:
        if ids_cal is None or ids_orig is None or not np.array_equal(np.asarray(ids_cal), np.asarray(ids_orig)):
            raise ShapeError("proposal order differs between the two heads")
    if len(p_cal) == 0:
        return np.empty_like(p_cal)

    scheme = cfg.scheme
    if scheme == ORIG_ONLY:
        return p_orig.copy()
    if scheme == CAL_ONLY:
        return p_cal.copy()
    if scheme == AVG:
        return (p_cal + p_orig) / 2.0
    if scheme == DET:
        return _det_union(p_cal, p_orig, cfg)

    mask = calibrated_mask(stats, cfg.T, cfg.sel_bg)
    if scheme == SEL_THR:
        p_cal = np.where(p_cal < cfg.thr, 0.0, p_cal)
    elif scheme == SEL_SCALE:
        ratio = background_ratio(p_cal, p_orig)
        logger.debug("sel_scale background ratio %.6f", ratio)
        p_cal = p_cal * ratio
    combined = _select(p_cal, p_orig, mask)
    if scheme == SEL_NORM:
        combined = _normalize(combined)
    return combined


def combine(
    p_cal: PredictionVector, p_orig: PredictionVector, stats: ClassStats, cfg: CombineConfig
) -> PredictionVector:
    """Combine one proposal's two prediction vectors.

    ``sel_scale`` on a single pair uses that pair's background ratio.
    """
    if p_cal.num_classes != p_orig.num_classes:
        raise ShapeError(f"prediction lengths differ: {len(p_cal.scores)} vs {len(p_orig.scores)}")
    out = batch_combine(p_cal.as_array()[None, :], p_orig.as_array()[None, :], stats, cfg)
    return PredictionVector(tuple(out[0]))


def predictions_to_list(proposal_ids: Sequence[int], scores: np.ndarray) -> List[Dict[str, Any]]:
    scores = np.asarray(scores, dtype=np.float64)
    if len(proposal_ids) != len(scores):
        raise ShapeError(f"{len(proposal_ids)} ids for {len(scores)} prediction rows")
    return [{"proposal_id": int(i), "scores": row.tolist()} for i, row in zip(proposal_ids, scores)]


def predictions_from_list(entries: Sequence[Dict[str, Any]]) -> Tuple[np.ndarray, np.ndarray]:
    """(proposal ids, (n, C+1) scores) from the JSON prediction format."""
    if not entries:
        return np.empty(0, dtype=np.int64), np.empty((0, 0))
    ids = np.asarray([e["proposal_id"] for e in entries], dtype=np.int64)
    widths = {len(e["scores"]) for e in entries}
    if len(widths) != 1:
        raise ShapeError(f"prediction rows have differing lengths: {sorted(widths)}")
    return ids, np.asarray([e["scores"] for e in entries], dtype=np.float64)


def save_predictions(proposal_ids: Sequence[int], scores: np.ndarray, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(predictions_to_list(proposal_ids, scores), f)


def load_predictions(path: str) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, "r", encoding="utf-8") as f:
        return predictions_from_list(json.load(f))
