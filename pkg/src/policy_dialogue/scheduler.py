"""Adaptive weight schedule: time trend plus behaviour-based correction."""

from __future__ import annotations

from .domain import WEIGHT_MAX, WEIGHT_MIN, AdaptiveConfig, BehaviorFeedback, WeightVector

__all__ = ["AdaptiveConfig", "trend_weights", "correct_weights", "weights_for_round"]


def _clamp(x: float) -> float:
    return min(max(x, WEIGHT_MIN), WEIGHT_MAX)


def trend_weights(initial: WeightVector, k: int, cfg: AdaptiveConfig) -> WeightVector:
    """Shift emphasis from knowledge to memory as rounds progress.

    ``w_M = min(w_M0 + step*k, m_cap)``, ``w_D = max(w_D0 - step*k, d_floor)``,
    ``w_T`` constant. ``k`` is the 1-based round number (minus
    ``cfg.trend_offset``).
    """
    if k < 1:
        raise ValueError("round index must be >= 1")
    step = k - cfg.trend_offset
    w_m = min(initial.w_M + cfg.trend_step * step, cfg.m_cap)
    w_d = max(initial.w_D - cfg.trend_step * step, cfg.d_floor)
    return WeightVector(_clamp(initial.w_T), _clamp(w_m), _clamp(w_d))


def correct_weights(
    current: WeightVector, feedback: BehaviorFeedback, cfg: AdaptiveConfig
) -> WeightVector:
    w_m, w_d = current.w_M, current.w_D
    if not feedback.used_evidence:
        w_d = min(w_d + cfg.alpha, WEIGHT_MAX)
    if not feedback.responded_to_memory:
        w_m = min(w_m + cfg.alpha, WEIGHT_MAX)
    return WeightVector(current.w_T, w_m, w_d)


def weights_for_round(
    initial: WeightVector,
    k: int,
    feedback: BehaviorFeedback | None,
    cfg: AdaptiveConfig,
) -> WeightVector:
    """Weights in effect for round ``k``: trend first, then correction."""
    if k < 1:
        raise ValueError("round index must be >= 1")
    if not cfg.enabled:
        return initial
    w = trend_weights(initial, k, cfg) if cfg.trend_enabled else initial
    if k >= 2 and feedback is not None:
        w = correct_weights(w, feedback, cfg)
    return WeightVector(_clamp(w.w_T), _clamp(w.w_M), _clamp(w.w_D))
