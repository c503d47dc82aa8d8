"""Keyword-conditioned Grad-CAM, shared-mask fusion and mask application.

A model usable by :func:`gradcam` exposes ``cam_score(main, ref, questions,
targets) -> (score, feat_main, feat_ref)``: a scalar target score and the two
conv feature maps as leaf tensors that require grad.  Models with a
``frozen()`` context have their parameters held constant for the whole pass.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

SOURCES = ("main", "ref", "shared")


@dataclass(frozen=True)
class CamTarget:
    keyword_ids: tuple[int, ...]
    answer_ids: tuple[int, ...]
    positions: tuple[int, ...]

    def __post_init__(self):
        if not self.positions or len(self.positions) != len(self.keyword_ids):
            raise ValueError("one position per keyword token is required")
        for p, k in zip(self.positions, self.keyword_ids):
            if not 0 <= p < len(self.answer_ids):
                raise IndexError(f"keyword position {p} outside the answer")
            if self.answer_ids[p] != k:
                raise ValueError(f"answer token at {p} is not the keyword token")


@dataclass
class SaliencyMap:
    values: np.ndarray
    source: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("saliency maps are H×W")
        if self.source not in SOURCES:
            raise ValueError(f"unknown saliency source {self.source!r}")
        if self.values.min() < 0 or self.values.max() > 1:
            raise ValueError("saliency values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def upsample_bilinear(m: np.ndarray, H: int, W: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a ...×h×w array, edges clamped."""
    h, w = m.shape[-2:]

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_weights(h, H)
    x0, x1, fx = axis_weights(w, W)
    rows = m[..., y0, :] * (1 - fy)[:, None] + m[..., y1, :] * fy[:, None]
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx


def cam_from_grads(feat: np.ndarray, grad: np.ndarray, H: int, W: int) -> np.ndarray:
    """B×C×h×w activations and gradients -> B×H×W max-normalized maps."""
    alpha = grad.mean(axis=(2, 3))
    raw = np.maximum(np.einsum("bc,bchw->bhw", alpha, feat), 0.0)
    up = upsample_bilinear(raw, H, W)
    peak = up.reshape(up.shape[0], -1).max(axis=1)
    out = np.ones_like(up)
    ok = peak > 0
    out[ok] = np.clip(up[ok] / peak[ok, None, None], 0.0, 1.0)
    return out


def gradcam_batch(model, main: Tensor, ref: Tensor, questions: Sequence[Sequence[int]],
                  targets: Sequence[CamTarget]) -> tuple[np.ndarray, np.ndarray]:
    """Grad-CAM maps for both images of every sample in one backward pass.

    The target score is the sum over samples, which leaves each sample's
    gradients unchanged because samples do not interact.
    """
    if not hasattr(model, "cam_score"):
        raise TypeError("model does not expose a conv feature map (cam_score)")
    if len(targets) != main.shape[0]:
        raise ValueError("one CamTarget per sample is required")
    H, W = main.shape[-2:]
    frozen = model.frozen() if hasattr(model, "frozen") else contextlib.nullcontext()
    with frozen:
        score, feat_main, feat_ref = model.cam_score(main, ref, questions, targets)
        T.backward(score)
    maps = []
    for feat in (feat_main, feat_ref):
        grad = feat.grad if feat.grad is not None else np.zeros_like(feat.data)
        maps.append(cam_from_grads(feat.data, grad, H, W))
    return maps[0], maps[1]


def gradcam(model, main: Tensor, ref: Tensor, question: Sequence[int], target: CamTarget,
            which: str) -> SaliencyMap:
    if which not in ("main", "ref"):
        raise ValueError("which must be 'main' or 'ref'")
    m_main, m_ref = gradcam_batch(model, main, ref, [question], [target])
    return SaliencyMap((m_main if which == "main" else m_ref)[0], which)


def minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.ones_like(a, dtype=float)
    return (a - lo) / (hi - lo)


def shared_mask(s_main: SaliencyMap, s_ref: SaliencyMap) -> SaliencyMap:
    if s_main.shape != s_ref.shape:
        raise ValueError(f"saliency shapes differ: {s_main.shape} vs {s_ref.shape}")
    return SaliencyMap(minmax(np.maximum(s_main.values, s_ref.values)), "shared")


def apply_mask(img: Tensor, s: SaliencyMap) -> Tensor:
    """Multiply every channel by ``s``; the mask is a constant."""
    if img.shape[-2:] != s.shape:
        raise ValueError(f"image {img.shape} and mask {s.shape} differ spatially")
    return T.mul(img, Tensor(np.broadcast_to(s.values, img.shape)))


def apply_masks(imgs: Tensor, masks: Sequence[SaliencyMap]) -> Tensor:
    """Batched :func:`apply_mask` over B×C×H×W with one map per sample."""
    if len(masks) != imgs.shape[0]:
        raise ValueError("one mask per sample is required")
    stack = np.stack([m.values for m in masks])
    if stack.shape[1:] != imgs.shape[-2:]:
        raise ValueError("mask and image spatial shapes differ")
    return T.mul(imgs, Tensor(np.broadcast_to(stack[:, None], imgs.shape)))
