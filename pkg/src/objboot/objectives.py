"""Self-distillation losses: global cross-view, object cross-view, object cross-image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, LossConfig
from .encoder import NumericError, log_softmax, softmax


def cross_entropy(p_teacher: np.ndarray, p_student: np.ndarray) -> np.ndarray | float:
    """-sum(teacher * log(student)) over the last axis."""
    p_student = np.asarray(p_student)
    if np.any(p_student <= 0):
        raise NumericError("cross_entropy", "non-positive student probability")
    out = -(np.asarray(p_teacher) * np.log(p_student)).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def loss_global(pt1: np.ndarray, pt2: np.ndarray, ps1: np.ndarray, ps2: np.ndarray) -> float:
    """H(pt1, ps2) + H(pt2, ps1); leading batch axes are averaged."""
    return float(np.mean(cross_entropy(pt1, ps2) + cross_entropy(pt2, ps1)))


def loss_cv_object(pt1: np.ndarray, pt2: np.ndarray, ps1: np.ndarray, ps2: np.ndarray) -> tuple[float, bool]:
    """Mean over the valid objects of one image of H(pt1^k, ps2^k) + H(pt2^k, ps1^k).

    Inputs are (K_valid, L). Returns ``(value, has_objects)``; 0 when there are none.
    """
    if len(pt1) == 0:
        return 0.0, False
    return float(np.mean(cross_entropy(pt1, ps2) + cross_entropy(pt2, ps1))), True


def loss_ci_object(nn_t1: np.ndarray, nn_t2: np.ndarray, ps1: np.ndarray, ps2: np.ndarray,
                   consistent1: np.ndarray, consistent2: np.ndarray) -> tuple[float, int, int]:
    """Cross-image term over the batch's valid objects.

    ``nn_t1[m]`` is the teacher projection of the bank neighbour of object m's
    view-1 representation; it supervises ``ps2[m]``, the student projection of
    the same object in view 2 (and symmetrically). Only cycle-consistent
    objects contribute; each half is normalised by its own count.
    """
    consistent1 = np.asarray(consistent1, dtype=bool)
    consistent2 = np.asarray(consistent2, dtype=bool)
    z1, z2 = int(consistent1.sum()), int(consistent2.sum())
    value = 0.0
    if z1:
        value += float(cross_entropy(nn_t1[consistent1], ps2[consistent1]).sum()) / z1
    if z2:
        value += float(cross_entropy(nn_t2[consistent2], ps1[consistent2]).sum()) / z2
    return value, z1, z2


@dataclass
class LossReport:
    l_cv_g: float = 0.0
    l_cv_o: float = 0.0
    l_ci_o: float = 0.0
    l_total: float = 0.0
    z1: int = 0
    z2: int = 0
    valid_object_count: int = 0  # per view
    bootstrap_ratio: float = 0.0
    match_cosine: float = float("nan")
    warmup: bool = False


def loss_total(cfg: LossConfig, parts: dict) -> LossReport:
    """Unweighted sum of the enabled terms; ``parts`` holds l_cv_g / l_cv_o / l_ci_o and counts."""
    if not (cfg.enable_global or cfg.enable_cv_object or cfg.enable_ci_object):
        raise ConfigError("all loss terms disabled")
    report = LossReport(
        l_cv_g=float(parts.get("l_cv_g", 0.0)) if cfg.enable_global else 0.0,
        l_cv_o=float(parts.get("l_cv_o", 0.0)) if cfg.enable_cv_object else 0.0,
        l_ci_o=float(parts.get("l_ci_o", 0.0)) if cfg.enable_ci_object else 0.0,
        z1=int(parts.get("z1", 0)),
        z2=int(parts.get("z2", 0)),
        valid_object_count=int(parts.get("valid_object_count", 0)),
    )
    total = 0.0
    if cfg.enable_global:
        total += report.l_cv_g
    if cfg.enable_cv_object:
        total += report.l_cv_o
    if cfg.enable_ci_object:
        total += report.l_ci_o
    report.l_total = total
    return report


def weighted_ce_and_grad(targets: np.ndarray, logits: np.ndarray, temperature: float,
                         weights: np.ndarray) -> tuple[np.floating, np.ndarray]:
    """sum_m w_m H(targets[m], softmax(logits[m] / T)) and its gradient w.r.t. ``logits``.

    Rows with zero weight contribute nothing. Used by the training step, where
    one student row may appear in several terms (rows are repeated in that case).
    """
    logp = log_softmax(logits / temperature)
    ce = -(targets * logp).sum(axis=-1)
    value = (weights * ce).sum()  # stays in the input dtype for extended-precision checks
    grad = weights[:, None] * (softmax(logits / temperature) * targets.sum(axis=-1, keepdims=True) - targets)
    return value, grad / temperature
