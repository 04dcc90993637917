"""Dice, cross-entropy and their 50/50 combination, with gradients.

``probs`` and ``labels`` are (n, classes, h, w); labels are one-hot.
Dice uses the foreground channel for 2 classes and the mean over the
non-background channels for 3. Sums run over the whole batch.
Cross-entropy is averaged over pixels.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .tensor import ShapeError, check_tensor

DICE_EPS = 1e-6
PROB_FLOOR = 1e-7
LOSS_MODES = ("combined", "ce", "dice")


class LossBreakdown(NamedTuple):
    ce: float
    dice: float
    combined: float


def _check(probs, labels):
    check_tensor(probs, "probs")
    check_tensor(labels, "labels")
    if probs.shape != labels.shape:
        raise ShapeError(f"probs {probs.shape} and labels {labels.shape} differ")
    if probs.shape[1] < 2:
        raise ShapeError("need at least 2 classes")


def _fg_channels(classes):
    return list(range(1, classes))


def combine(ce, dice):
    return ce * 0.5 + dice * 0.5


def dice_loss(probs, labels, eps=DICE_EPS) -> float:
    _check(probs, labels)
    losses = []
    for c in _fg_channels(probs.shape[1]):
        p = probs[:, c].astype(np.float64)
        y = labels[:, c].astype(np.float64)
        losses.append(1.0 - (2.0 * (y * p).sum() + eps) / (y.sum() + p.sum() + eps))
    return float(np.mean(losses))


def dice_loss_grad(probs, labels, eps=DICE_EPS):
    """Gradient of :func:`dice_loss` wrt ``probs``."""
    _check(probs, labels)
    grad = np.zeros_like(probs)
    fg = _fg_channels(probs.shape[1])
    for c in fg:
        p = probs[:, c].astype(np.float64)
        y = labels[:, c].astype(np.float64)
        inter = 2.0 * (y * p).sum() + eps
        denom = y.sum() + p.sum() + eps
        grad[:, c] = -(2.0 * y * denom - inter) / denom**2 / len(fg)
    return grad


def cross_entropy(probs, labels, floor=PROB_FLOOR) -> float:
    _check(probs, labels)
    n, _, h, w = probs.shape
    p = np.clip(probs.astype(np.float64), floor, 1.0 - floor)
    return float(-(labels * np.log(p)).sum() / (n * h * w))


def cross_entropy_grad(probs, labels, floor=PROB_FLOOR):
    """Gradient of :func:`cross_entropy` wrt ``probs`` (zero where the clamp is active)."""
    _check(probs, labels)
    n, _, h, w = probs.shape
    active = (probs > floor) & (probs < 1.0 - floor)
    safe = np.where(active, probs, 1.0)
    return (-labels / safe * active / (n * h * w)).astype(probs.dtype)


def cross_entropy_grad_logits(probs, labels, floor=PROB_FLOOR):
    """Fused softmax + cross-entropy gradient wrt the logits.

    ``(p - y) / N_pixels`` for one-hot labels, masked wherever the probability
    clamp is active so it stays the exact derivative of :func:`cross_entropy`.
    """
    _check(probs, labels)
    n, _, h, w = probs.shape
    active = (probs > floor) & (probs < 1.0 - floor)
    ya = labels * active
    return (probs * ya.sum(axis=1, keepdims=True) - ya) / (n * h * w)


def combined_loss(probs, labels, eps=DICE_EPS) -> LossBreakdown:
    ce = cross_entropy(probs, labels)
    dice = dice_loss(probs, labels, eps)
    return LossBreakdown(ce, dice, combine(ce, dice))


def loss_value(breakdown: LossBreakdown, mode: str) -> float:
    if mode == "combined":
        return breakdown.combined
    if mode == "ce":
        return breakdown.ce
    if mode == "dice":
        return breakdown.dice
    raise ValueError(f"unknown loss mode {mode!r}")


def loss_backward(probs, labels, mode="combined", fused=True, eps=DICE_EPS):
    """Gradient of the chosen loss.

    Returns ``(grad_probs, grad_logits)``. With ``fused=True`` the
    cross-entropy part is returned at the logits via ``(p - y) / N``; the
    dice part is always wrt the probabilities. Either entry may be None.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    w_ce = {"combined": 0.5, "ce": 1.0, "dice": 0.0}[mode]
    w_dice = {"combined": 0.5, "ce": 0.0, "dice": 1.0}[mode]
    grad_probs = None
    grad_logits = None
    if w_dice:
        grad_probs = w_dice * dice_loss_grad(probs, labels, eps)
    if w_ce:
        if fused:
            grad_logits = w_ce * cross_entropy_grad_logits(probs, labels)
        else:
            g = w_ce * cross_entropy_grad(probs, labels)
            grad_probs = g if grad_probs is None else grad_probs + g
    return grad_probs, grad_logits
