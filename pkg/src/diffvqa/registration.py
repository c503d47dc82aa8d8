"""Near-identity affine pre-alignment of the main image.

Coordinates are normalized to [-1, 1] with the align-corners convention shared
by :func:`diffvqa.tensor.grid_sample_bilinear`: -1 is the first pixel centre
and +1 the last.  A source location is ``A @ x_tgt + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Adam, Conv2d, Linear, Module, parameter
from .tensor import Tensor

IDENTITY = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class RegLossWeights:
    w_small: float = 1e-4
    w_det: float = 1e-5
    w_trans: float = 1e-6

    def __post_init__(self):
        if min(self.w_small, self.w_det, self.w_trans) < 0:
            raise ValueError("registration loss weights must be non-negative")


class AffineParams:
    """Batched 2×3 affine blocks ``[A t]`` held as a B×2×3 tensor."""

    def __init__(self, theta):
        theta = theta if isinstance(theta, Tensor) else Tensor(theta)
        if theta.ndim == 2:
            theta = T.reshape(theta, (1, 2, 3))
        if theta.shape[1:] != (2, 3):
            raise ValueError(f"affine params must be B×2×3, got {theta.shape}")
        self.theta = theta

    @classmethod
    def identity(cls, batch: int = 1) -> "AffineParams":
        return cls(np.repeat(IDENTITY[None], batch, axis=0))

    @property
    def A(self) -> np.ndarray:
        return self.theta.data[:, :, :2]

    @property
    def t(self) -> np.ndarray:
        return self.theta.data[:, :, 2]

    def det(self) -> np.ndarray:
        A = self.A
        return A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]

    def __len__(self) -> int:
        return self.theta.shape[0]


def invert_affine(theta: np.ndarray) -> np.ndarray:
    """Analytic inverse of a 2×3 (or B×2×3) affine block."""
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 2
    th = theta[None] if single else theta
    A_inv = np.linalg.inv(th[:, :, :2])
    t_inv = -np.einsum("bij,bj->bi", A_inv, th[:, :, 2])
    out = np.concatenate([A_inv, t_inv[:, :, None]], axis=2)
    return out[0] if single else out


def normalized_lattice(H: int, W: int) -> np.ndarray:
    """H×W×2 grid of (x, y) target coordinates under align-corners."""
    if H < 2 or W < 2:
        raise ValueError("affine_grid needs H, W >= 2")
    xs = np.linspace(-1.0, 1.0, W)
    ys = np.linspace(-1.0, 1.0, H)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def affine_grid(theta: AffineParams | Tensor, H: int, W: int) -> Tensor:
    """Sampling grid B×H×W×2 with ``grid[b, i, j] = A_b @ x_tgt(i, j) + t_b``."""
    th = theta.theta if isinstance(theta, AffineParams) else theta
    B = th.shape[0]
    lat = normalized_lattice(H, W).reshape(H * W, 2)
    homog = np.concatenate([lat, np.ones((H * W, 1))], axis=1)
    coords = Tensor(np.broadcast_to(homog, (B, H * W, 3)))
    grid = T.matmul(coords, T.transpose(th, (0, 2, 1)))
    return T.reshape(grid, (B, H, W, 2))


def warp_main(main: Tensor, theta: AffineParams) -> Tensor:
    """Resample the main image; the reference image is never warped."""
    if len(theta) != main.shape[0]:
        raise ValueError("theta batch does not match image batch")
    return T.grid_sample_bilinear(main, affine_grid(theta, main.shape[2], main.shape[3]))


def reg_loss(theta: AffineParams, w: RegLossWeights = RegLossWeights()) -> Tensor:
    """``w_small‖Θ−I‖² + w_det(det A − 1)² + w_trans‖t‖²``, averaged over the batch.

    ``I`` is the 2×3 identity block, so ``t`` is penalized by both the first
    and the last term.
    """
    th = theta.theta
    B = th.shape[0]
    diff = th - Tensor(np.repeat(IDENTITY[None], B, axis=0))
    frob = T.tsum(diff * diff, axis=(1, 2))
    det = th[:, 0, 0] * th[:, 1, 1] - th[:, 0, 1] * th[:, 1, 0]
    det_dev = det - Tensor(np.ones(B))
    t = th[:, :, 2]
    trans = T.tsum(t * t, axis=1)
    per_item = T.scale(frob, w.w_small) + T.scale(det_dev * det_dev, w.w_det) + T.scale(trans, w.w_trans)
    return T.mean(per_item)


class AffinePredictor(Module):
    """Shallow CNN over the channel-stacked pair -> 6 affine parameters.

    The head starts at zero weights and identity bias, so an untrained
    predictor emits exactly the identity warp.
    """

    def __init__(self, in_channels: int = 1, channels: tuple[int, ...] = (8, 16),
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        convs = []
        c_prev = 2 * in_channels
        for c in channels:
            convs.append(Conv2d(c_prev, c, 3, rng, stride=2, pad=1))
            c_prev = c
        self.convs = convs
        self.head = Linear(c_prev, 6, rng)
        self.head.weight = parameter(np.zeros((c_prev, 6)))
        self.head.bias = parameter(IDENTITY.reshape(-1).copy())

    def __call__(self, main: Tensor, ref: Tensor) -> AffineParams:
        if main.shape != ref.shape:
            raise ValueError(f"main {main.shape} and ref {ref.shape} differ in shape")
        h = T.concat([main, ref], axis=1)
        for conv in self.convs:
            h = T.relu(conv(h))
        pooled = T.mean(h, axis=(2, 3))
        return AffineParams(T.reshape(self.head(pooled), (main.shape[0], 2, 3)))


def predict_affine(predictor: AffinePredictor, main: Tensor, ref: Tensor) -> AffineParams:
    return predictor(main, ref)


def translation_px(theta: np.ndarray, H: int, W: int) -> np.ndarray:
    """Translation component of a 2×3 block expressed in pixels (x, y)."""
    theta = np.asarray(theta)
    return theta[..., :, 2] * np.array([(W - 1) / 2.0, (H - 1) / 2.0])


def fit_affine(main: np.ndarray, ref: np.ndarray, steps: int = 300, lr: float = 0.01,
               w: RegLossWeights = RegLossWeights(), border: int = 6,
               keep: np.ndarray | None = None) -> np.ndarray:
    """Directly optimize Θ so the warped main image matches ``ref`` in pixel MSE.

    A stand-in for the language-model loss when only alignment is being
    tested.  ``main``/``ref`` are H×W arrays.  ``keep`` (H×W bool, reference
    frame) restricts the MSE, e.g. to pixels outside a true anatomical change
    that no rigid warp should explain.  Returns the fitted 2×3 block.
    """
    H, W = ref.shape
    m = Tensor(main.reshape(1, 1, H, W))
    region = np.zeros((1, 1, H, W))
    region[..., border:H - border, border:W - border] = 1.0
    if keep is not None:
        region = region * np.asarray(keep, dtype=float).reshape(1, 1, H, W)
    target = Tensor(ref.reshape(1, 1, H, W) * region)
    weight = Tensor(region)
    n = region.sum()
    theta = parameter(IDENTITY[None].copy())
    opt = Adam([theta], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        params = AffineParams(theta)
        resid = warp_main(m, params) * weight - target
        loss = T.scale(T.tsum(resid * resid), 1.0 / n) + reg_loss(params, w)
        loss.backward()
        opt.step()
    return theta.data[0].copy()
