"""Evaluation metrics and BRDF-sphere re-rendering."""

import math

import numpy as np

from . import autodiff as ad
from .render import VIEW_DIR, half_vector


def mae(pred, gt, mask):
    """Mean angular error in degrees between unit-normal fields."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mae: empty mask")
    dots = (np.asarray(pred)[mask] * np.asarray(gt)[mask]).sum(axis=-1)
    return float(np.degrees(np.arccos(np.clip(dots, -1.0, 1.0))).mean())


def psnr(pred, gt, mask, peak=None):
    """Peak signal-to-noise ratio in dB over the mask.

    peak defaults to the masked maximum of gt; identical inputs report the
    +inf sentinel.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("psnr: empty mask")
    p = np.asarray(pred)[mask]
    g = np.asarray(gt)[mask]
    mse = float(((p - g) ** 2).mean())
    if peak is None:
        peak = float(g.max())
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def mean_rerender_psnr(rerendered, images, mask):
    """Per-image PSNR of re-renders against observations, and their mean."""
    per_image = [psnr(rerendered[i], images[i], mask)
                 for i in range(images.shape[0])]
    finite = [v for v in per_image if math.isfinite(v)]
    mean = float(np.mean(finite)) if finite else math.inf
    return mean, per_image


def render_brdf_sphere(rho_d, c, basis_net, light, resolution=128,
                       normalize=False):
    """Re-render a unit sphere with one surface point's material under `light`.

    The sphere is convex, so no cast shadows apply; the mask is the inscribed
    disk. With c = 0 this reduces to the Lambertian cosine image.
    """
    rho_d = np.atleast_1d(np.asarray(rho_d, dtype=np.float64))
    c = np.asarray(c, dtype=np.float64)
    res = int(resolution)
    xs = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    X, Y = np.meshgrid(xs, xs)
    r2 = X ** 2 + Y ** 2
    inside = r2 < 1.0
    n = np.zeros((res, res, 3))
    n[..., 0] = np.where(inside, X, 0.0)
    n[..., 1] = np.where(inside, Y, 0.0)
    n[..., 2] = np.where(inside, -np.sqrt(np.maximum(1.0 - r2, 0.0)), -1.0)

    shading = np.maximum((n * light.direction).sum(axis=-1), 0.0)
    spec = 0.0
    if basis_net is not None and c.any():
        h = half_vector(light.direction)
        nh = (n * h).sum(axis=-1)[inside]
        p = np.stack([nh, np.full_like(nh, h @ VIEW_DIR)], axis=-1)
        responses = basis_net.forward(ad.constant(p)).data
        spec_in = responses @ c
        spec = np.zeros((res, res))
        spec[inside] = spec_in
        spec = spec[..., None]

    img = (rho_d[None, None, :] + spec) * shading[..., None]
    img[~inside] = 0.0
    if normalize and img.max() > 0:
        img = img / img.max()
    return img
