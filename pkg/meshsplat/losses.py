"""Training objectives, their gradients, and image metrics."""
from __future__ import annotations

from functools import lru_cache
from typing import Mapping, Union

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .config import Stage2Weights
from .errors import DegenerateInputError, ShapeError
from .nn import sigmoid
from .quadtree import GaussianQuadTree, child_opacity, child_opacity_grad

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 99.0

STAGE2_TERMS = ("l1", "ssim", "edge", "lap", "alpha", "normal", "flow")


def robust_chamfer(V: np.ndarray, U: np.ndarray, d: float, return_grad: bool = False):
    """Symmetric Chamfer where every squared nearest-neighbour distance is capped at d^2.

    The gradient is taken with respect to V; truncated terms contribute nothing.
    """
    V = np.asarray(V, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    if not len(V) or not len(U):
        raise DegenerateInputError("robust chamfer needs two nonempty point sets")
    if not d > 0:
        raise DegenerateInputError(f"truncation must be positive, got {d}")
    cap = float(d) * float(d)

    _, nearest_u = cKDTree(U).query(V)
    diff_v = V - U[nearest_u]
    sq_v = np.sum(diff_v * diff_v, axis=1)
    _, nearest_v = cKDTree(V).query(U)
    diff_u = U - V[nearest_v]
    sq_u = np.sum(diff_u * diff_u, axis=1)

    value = float(np.mean(np.minimum(sq_v, cap)) + np.mean(np.minimum(sq_u, cap)))
    if not return_grad:
        return value
    grad = np.where((sq_v < cap)[:, None], 2.0 * diff_v / len(V), 0.0)
    pulled = np.where((sq_u < cap)[:, None], -2.0 * diff_u / len(U), 0.0)
    np.add.at(grad, nearest_v, pulled)
    return value, grad


def alpha_loss(tree: GaussianQuadTree, return_grad: bool = False):
    """Mean opacity over active parents and their non-deactivated children.

    The gradient is with respect to ``tree.opacity_logits``.
    """
    faces = np.flatnonzero(tree.active)
    grad = np.zeros_like(tree.opacity_logits)
    if not len(faces):
        return (0.0, grad) if return_grad else 0.0
    alpha = sigmoid(tree.opacity_logits[faces])
    children = np.sum(~tree.deactivated[faces], axis=1)
    count = len(faces) + int(children.sum())
    value = float((alpha.sum() + np.sum(children * child_opacity(alpha, tree.beta))) / count)
    if not return_grad:
        return value
    slope = 1.0 + children * child_opacity_grad(alpha, tree.beta)
    grad[faces] = slope * alpha * (1.0 - alpha) / count
    return value, grad


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


def l1_loss(rendered: np.ndarray, target: np.ndarray, return_grad: bool = False):
    _check_pair(rendered, target)
    diff = rendered - target
    value = float(np.mean(np.abs(diff)))
    if not return_grad:
        return value
    return value, np.sign(diff) / diff.size


def _window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return g / g.sum()


@lru_cache(maxsize=32)
def _blur_matrix(n: int) -> np.ndarray:
    """Row-stochastic n x n operator of the reflect-padded 1D window."""
    return correlate1d(np.eye(n), _window(), axis=0, mode="reflect")


def _along(matrix: np.ndarray, image: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(matrix, image, axes=([1], [axis])), 0, axis)


def _blur(image: np.ndarray) -> np.ndarray:
    out = _along(_blur_matrix(image.shape[0]), image, 0)
    return _along(_blur_matrix(image.shape[1]), out, 1)


def _blur_adjoint(image: np.ndarray) -> np.ndarray:
    out = _along(_blur_matrix(image.shape[0]).T, image, 0)
    return _along(_blur_matrix(image.shape[1]).T, out, 1)


def ssim(image_a: np.ndarray, image_b: np.ndarray, return_grad: bool = False):
    """Mean SSIM over pixels and channels, Gaussian 11x11 window, reflected borders.

    The gradient is with respect to ``image_a``.
    """
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    _check_pair(a, b)
    mu_a, mu_b = _blur(a), _blur(b)
    e_aa, e_bb, e_ab = _blur(a * a), _blur(b * b), _blur(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num_l = 2.0 * mu_a * mu_b + SSIM_C1
    num_c = 2.0 * cov + SSIM_C2
    den_l = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    den_c = var_a + var_b + SSIM_C2
    smap = num_l * num_c / (den_l * den_c)
    value = float(smap.mean())
    if not return_grad:
        return value
    n = smap.size
    d_mu = (2.0 * mu_b * (num_c - num_l) / (den_l * den_c) - 2.0 * mu_a * smap * (1.0 / den_l - 1.0 / den_c)) / n
    d_eaa = -smap / den_c / n
    d_eab = 2.0 * num_l / (den_l * den_c) / n
    grad = _blur_adjoint(d_mu) + 2.0 * a * _blur_adjoint(d_eaa) + b * _blur_adjoint(d_eab)
    return value, grad


def psnr(image_a: np.ndarray, image_b: np.ndarray) -> float:
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def photometric_loss(rendered: np.ndarray, target: np.ndarray, w_l1: float = 0.8, w_ssim: float = 0.2,
                     return_grad: bool = False):
    """w_l1 * L1 + w_ssim * (1 - SSIM)."""
    l1, g_l1 = l1_loss(rendered, target, return_grad=True)
    s, g_s = ssim(rendered, target, return_grad=True)
    value = w_l1 * l1 + w_ssim * (1.0 - s)
    if not return_grad:
        return value
    return value, w_l1 * g_l1 - w_ssim * g_s


def _masked_count(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


def flow_loss(rendered_flow: np.ndarray, target_flow: np.ndarray, mask: np.ndarray, return_grad: bool = False):
    """Mean absolute flow difference over valid pixels and both channels."""
    _check_pair(rendered_flow, target_flow)
    valid = np.asarray(mask, dtype=bool)
    count = _masked_count(valid)
    grad = np.zeros_like(rendered_flow)
    if count == 0:
        return (0.0, grad) if return_grad else 0.0
    diff = rendered_flow - target_flow
    channels = rendered_flow.shape[-1]
    value = float(np.sum(np.abs(diff[valid])) / (count * channels))
    if not return_grad:
        return value
    grad[valid] = np.sign(diff[valid]) / (count * channels)
    return value, grad


def normal_loss(rendered_normals: np.ndarray, target_normals: np.ndarray, mask: np.ndarray,
                return_grad: bool = False):
    """Mean squared L2 distance between normals over valid pixels."""
    _check_pair(rendered_normals, target_normals)
    valid = np.asarray(mask, dtype=bool)
    count = _masked_count(valid)
    grad = np.zeros_like(rendered_normals)
    if count == 0:
        return (0.0, grad) if return_grad else 0.0
    diff = rendered_normals - target_normals
    value = float(np.sum(diff[valid] ** 2) / count)
    if not return_grad:
        return value
    grad[valid] = 2.0 * diff[valid] / count
    return value, grad


def stage2_term_weights(weights: Stage2Weights, camera_mode: str = "static") -> dict[str, float]:
    return {
        "l1": weights.w_l1,
        "ssim": weights.w_ssim,
        "edge": weights.w_edge,
        "lap": weights.w_lap,
        "alpha": weights.w_alpha,
        "normal": weights.normal_weight(camera_mode),
        "flow": weights.w_flow,
    }


def stage2_total(components: Mapping[str, float], weights: Union[Stage2Weights, Mapping[str, float]],
                 camera_mode: str = "static") -> float:
    """Flat weighted sum of the stage-two terms; ``ssim`` holds 1 - SSIM."""
    if isinstance(weights, Stage2Weights):
        weights = stage2_term_weights(weights, camera_mode)
    unknown = set(components) - set(STAGE2_TERMS)
    if unknown:
        raise ShapeError(f"unknown loss terms: {sorted(unknown)}")
    return float(sum(weights[name] * float(components.get(name, 0.0)) for name in STAGE2_TERMS))
