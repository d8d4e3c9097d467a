"""Physically-based forward model: shading, shadow ray-marching, shadow guidance.

Internal axis convention (documented in the README): x right, y down, z
increasing away from the camera. The camera views along +z, so the viewing
direction is v = [0, 0, -1] and light directions point from the surface
toward the light with a negative z component. Dataset-convention vectors are
flipped at I/O boundaries only.

The per-pixel shadow march is the hot loop of the renderer; it runs through a
numba kernel when available and falls back to a vectorized numpy path. Set
NEURALPS_NUMBA=0 to force the numpy path.
"""

import os
from dataclasses import dataclass, field

import numpy as np

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap(args[0]) if args and callable(args[0]) else wrap


VIEW_DIR = np.array([0.0, 0.0, -1.0])


def numba_enabled():
    """True when the njit shadow kernels are active (env flag NEURALPS_NUMBA)."""
    if os.environ.get("NEURALPS_NUMBA", "1").lower() in ("0", "false", "no"):
        return False
    return _HAS_NUMBA


@dataclass(frozen=True)
class Light:
    """Directional light in the internal convention (z component < 0)."""

    direction: np.ndarray
    intensity: np.ndarray = field(default_factory=lambda: np.array(1.0))

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError(f"Light direction must be a unit 3-vector, got {d}")
        object.__setattr__(self, "direction", d)
        li = np.asarray(self.intensity, dtype=np.float64)
        if (li <= 0).any():
            raise ValueError("Light intensity must be positive")
        object.__setattr__(self, "intensity", li)


@dataclass(frozen=True)
class ShadowMarchConfig:
    """Logspace sampling along the ray toward the light.

    t is measured in pixel widths; t_max always runs to the image boundary.
    """

    samples: int = 32
    t_min: float = 0.5

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("shadow march needs at least 2 samples")
        if self.t_min <= 0:
            raise ValueError("t_min must be positive")


def half_vector(l, v=VIEW_DIR):
    """h = (l + v) / ||l + v||."""
    s = np.asarray(l, dtype=np.float64) + np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(s)
    if n < 1e-8:
        raise ValueError("half_vector: light and view directions are antiparallel")
    return s / n


def render_pixel(n, rho_d, c, basis, light, s):
    """I = s * (rho_d + c.basis) * max(l.n, 0), per channel."""
    shading = max(float(np.dot(light.direction, np.asarray(n, dtype=np.float64))), 0.0)
    spec = float(np.dot(np.asarray(c, dtype=np.float64),
                        np.asarray(basis, dtype=np.float64)))
    return float(s) * (np.asarray(rho_d, dtype=np.float64) + spec) * shading


def render_image(n, rho_d, spec, light, s):
    """Vectorized rendering equation over leading axes.

    n: (..., 3) unit normals; rho_d: (..., C); spec: channel-shared specular
    BRDF value, (..., 1) or scalar; s: (...) binary shadow factor.
    """
    n = np.asarray(n, dtype=np.float64)
    shading = np.maximum((n * light.direction).sum(axis=-1, keepdims=True), 0.0)
    return np.asarray(s, dtype=np.float64)[..., None] * (rho_d + spec) * shading


# ---------------------------------------------------------------------------
# shadow marching


def _log_ts(t_min, t_max, samples):
    return t_min * np.exp(np.linspace(0.0, np.log(t_max / t_min), samples))


def _t_boundary(x, y, lx, ly, W, H):
    t = np.inf
    if lx > 0:
        t = min(t, (W - 1 - x) / lx)
    elif lx < 0:
        t = min(t, -x / lx)
    if ly > 0:
        t = min(t, (H - 1 - y) / ly)
    elif ly < 0:
        t = min(t, -y / ly)
    return t


def render_shadow(x, light, depth_query, bounds, cfg=None):
    """Shadow factor at one pixel from a continuous depth field.

    depth_query maps an (S, 2) array of pixel-unit (x, y) positions to depths;
    it may return +inf where the field is undefined (treated as unoccluded).
    bounds is the (H, W) image extent used for the boundary t_max policy.
    Returns 1 when every logspace sample satisfies Z(x(t)) - L_z(t) >= 0.
    """
    cfg = cfg or ShadowMarchConfig()
    H, W = bounds
    lx, ly, lz = light.direction
    if np.hypot(lx, ly) < 1e-12:
        return 1  # head-on light: no in-plane traversal possible
    px, py = float(x[0]), float(x[1])
    t_max = _t_boundary(px, py, lx, ly, W, H)
    if t_max <= cfg.t_min:
        return 1
    ts = _log_ts(cfg.t_min, t_max, cfg.samples)
    pts = np.stack([px + ts * lx, py + ts * ly], axis=-1)
    z0 = float(depth_query(np.array([[px, py]]))[0])
    zq = np.asarray(depth_query(pts), dtype=np.float64)
    ray_z = z0 + ts * lz
    return int(not (zq - ray_z < 0).any())


@njit(cache=True)
def _bilinear_masked(depth, mask, y, x):
    H, W = depth.shape
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    if x0 < 0:
        x0 = 0
    if x0 > W - 2:
        x0 = W - 2
    if y0 < 0:
        y0 = 0
    if y0 > H - 2:
        y0 = H - 2
    fx = x - x0
    fy = y - y0
    acc = 0.0
    wsum = 0.0
    for dy in range(2):
        wy = fy if dy == 1 else 1.0 - fy
        for dx in range(2):
            wx = fx if dx == 1 else 1.0 - fx
            if mask[y0 + dy, x0 + dx]:
                w = wy * wx
                acc += w * depth[y0 + dy, x0 + dx]
                wsum += w
    if wsum <= 1e-12:
        return np.inf
    return acc / wsum


@njit(cache=True)
def _march_kernel(depth, mask, ys, xs, lx, ly, lz, t_min, samples, out):
    H, W = depth.shape
    for p in range(ys.size):
        y = float(ys[p])
        x = float(xs[p])
        t_max = 1e30
        if lx > 0:
            t_max = min(t_max, (W - 1 - x) / lx)
        elif lx < 0:
            t_max = min(t_max, -x / lx)
        if ly > 0:
            t_max = min(t_max, (H - 1 - y) / ly)
        elif ly < 0:
            t_max = min(t_max, -y / ly)
        if t_max <= t_min:
            out[p] = 1
            continue
        step = np.log(t_max / t_min) / (samples - 1)
        z0 = depth[ys[p], xs[p]]
        lit = 1
        for k in range(samples):
            t = t_min * np.exp(step * k)
            zq = _bilinear_masked(depth, mask, y + t * ly, x + t * lx)
            if zq - (z0 + t * lz) < 0.0:
                lit = 0
                break
        out[p] = lit


def _bilinear_masked_np(depth, mask, ys, xs):
    H, W = depth.shape
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, W - 2)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, H - 2)
    fx = xs - x0
    fy = ys - y0
    acc = np.zeros_like(xs)
    wsum = np.zeros_like(xs)
    for dy in (0, 1):
        wy = fy if dy else 1.0 - fy
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            m = mask[y0 + dy, x0 + dx]
            w = wy * wx * m
            acc += w * depth[y0 + dy, x0 + dx]
            wsum += w
    out = np.full_like(xs, np.inf)
    ok = wsum > 1e-12
    out[ok] = acc[ok] / wsum[ok]
    return out


def _march_numpy(depth, mask, ys, xs, lx, ly, lz, t_min, samples):
    H, W = depth.shape
    x = xs.astype(np.float64)
    y = ys.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(lx > 0, (W - 1 - x) / lx, np.where(lx < 0, -x / lx, np.inf))
        ty = np.where(ly > 0, (H - 1 - y) / ly, np.where(ly < 0, -y / ly, np.inf))
    t_max = np.minimum(tx, ty)
    lit = np.ones(x.size, dtype=np.uint8)
    active = t_max > t_min
    if not active.any():
        return lit
    idx = np.nonzero(active)[0]
    steps = np.log(t_max[idx] / t_min) / (samples - 1)
    ts = t_min * np.exp(steps[:, None] * np.arange(samples))
    sx = x[idx, None] + ts * lx
    sy = y[idx, None] + ts * ly
    zq = _bilinear_masked_np(depth, mask.astype(np.float64), sy, sx)
    ray = depth[ys[idx], xs[idx]][:, None] + ts * lz
    occluded = (zq - ray < 0).any(axis=1)
    lit[idx[occluded]] = 0
    return lit


def render_shadow_map(depth, mask, light, cfg=None):
    """Binary shadow map over the grid; pixels outside the mask are returned lit.

    Equivalent to render_shadow at every masked pixel with the masked bilinear
    interpolant of `depth` as the continuous field (out-of-mask samples never
    occlude).
    """
    cfg = cfg or ShadowMarchConfig()
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    mask = np.ascontiguousarray(mask).astype(bool)
    H, W = depth.shape
    out = np.ones((H, W), dtype=np.uint8)
    lx, ly, lz = light.direction
    if np.hypot(lx, ly) < 1e-12:
        return out
    ys, xs = np.nonzero(mask)
    if numba_enabled():
        res = np.empty(ys.size, dtype=np.uint8)
        _march_kernel(depth, mask, ys, xs, lx, ly, lz, cfg.t_min, cfg.samples, res)
    else:
        res = _march_numpy(depth, mask, ys, xs, lx, ly, lz, cfg.t_min, cfg.samples)
    out[ys, xs] = res
    return out


def shadow_guidance_mask(images, threshold=0.1):
    """Per-image binary mask; 0 where intensity falls below 0.1x the pixel mean.

    images: (n, H, W, C) intensity-normalized stack (or an object carrying an
    `images` attribute). Intensities are channel-averaged before thresholding.
    """
    arr = np.asarray(getattr(images, "images", images), dtype=np.float64)
    lum = arr.mean(axis=-1)
    lam = lum.mean(axis=0, keepdims=True)
    return lum >= threshold * lam
