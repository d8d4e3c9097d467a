"""Dataset ingestion, synthetic scene generation with exact oracles, map export.

Dataset directory layout (the loader also reads DiLiGenT-style drops):

    img_000.png ...          observation images, 8- or 16-bit PNG, linear
    light_directions.txt     n rows "lx ly lz", dataset convention (z toward camera)
    light_intensities.txt    n rows, 1 or 3 values per row
    mask.png                 optional 8-bit object mask
    filenames.txt            optional explicit image ordering

Synthetic scenes additionally write ground truth next to the observations:
normal_gt.png, depth_gt.f32/.json, shadow_gt_XXX.png.
"""

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .render import Light, half_vector, render_image

# dataset <-> internal vector convention: flip y and z (180 deg rotation about x)
_FLIP = np.array([1.0, -1.0, -1.0])

RESERVED_NAMES = ("mask.png",)


def to_internal(v):
    return np.asarray(v, dtype=np.float64) * _FLIP


to_dataset = to_internal  # the flip is an involution


@dataclass
class ObservationStack:
    """Intensity-normalized images with lights in the internal convention."""

    images: np.ndarray  # (n, H, W, C), linear, divided by light intensity
    lights: np.ndarray  # (n, 3) unit vectors, internal convention
    mask: np.ndarray  # (H, W) bool
    names: list = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, H, W, C), got {self.images.shape}")
        if len(self.lights) != len(self.images):
            raise ValueError(
                f"count mismatch: {len(self.images)} images vs "
                f"{len(self.lights)} light rows")
        if not np.isfinite(self.images).all() or (self.images < 0).any():
            raise ValueError("normalized intensities must be finite and >= 0")

    @property
    def n_images(self):
        return self.images.shape[0]

    @property
    def channels(self):
        return self.images.shape[-1]

    @property
    def shape(self):
        return self.images.shape[1:3]

    def color_stats(self):
        """Per-channel mean and standard deviation over masked pixels, all images."""
        px = self.images[:, self.mask, :]
        return np.concatenate([px.mean(axis=(0, 1)), px.std(axis=(0, 1))])

    def drop_images(self, indices):
        """Remove the listed image indices (saturated-frame handling)."""
        keep = np.setdiff1d(np.arange(self.n_images), np.asarray(indices, int))
        return ObservationStack(self.images[keep], self.lights[keep], self.mask,
                                [self.names[i] for i in keep])


@dataclass
class SyntheticScene:
    """Ground-truth scene; shadow maps come from the exact ray-cast oracle."""

    depth: np.ndarray  # (H, W), pixel units, increasing away from the camera
    normals: np.ndarray  # (H, W, 3), unit, internal convention
    albedo: np.ndarray  # (H, W, C)
    spec_strength: float
    spec_exponent: float
    lights: np.ndarray  # (n, 3), internal convention
    shadow_maps: np.ndarray  # (n, H, W) bool
    mask: np.ndarray  # (H, W) bool
    depth_fn: object = None  # analytic continuous depth field z(x, y)

    @property
    def shape(self):
        return self.depth.shape

    def specular_term(self, light):
        """Channel-shared Blinn-Phong lobe value per pixel, (H, W, 1)."""
        if self.spec_strength == 0.0:
            return np.zeros(self.shape + (1,))
        h = half_vector(light.direction)
        nh = np.maximum((self.normals * h).sum(axis=-1, keepdims=True), 0.0)
        return self.spec_strength * nh ** self.spec_exponent

    def render_stack(self, quantize=16):
        """Render the observation stack through the rendering equation.

        Images are quantized to the PNG bit depth at generation time so a
        save/load round trip is bit-exact.
        """
        images = []
        for i, l in enumerate(self.lights):
            light = Light(l)
            img = render_image(self.normals, self.albedo,
                               self.specular_term(light), light,
                               self.shadow_maps[i])
            images.append(img)
        stack = np.clip(np.stack(images), 0.0, 1.0)
        if quantize:
            levels = 2 ** quantize - 1
            stack = np.round(stack * levels) / levels
        names = [f"img_{i:03d}.png" for i in range(len(images))]
        return ObservationStack(stack, self.lights.copy(), self.mask.copy(), names)


# ---------------------------------------------------------------------------
# exact shadow oracle


def exact_shadow_map(depth_fn, light_dir, H, W, samples=1024, t_min=0.5,
                     chunk=4096):
    """Dense uniform ray cast against the analytic depth field.

    Independent of the renderer's logspace march: uniform t spacing, direct
    evaluation of the continuous field, no grid interpolation.
    """
    lx, ly, lz = np.asarray(light_dir, dtype=np.float64)
    lit = np.ones(H * W, dtype=bool)
    if np.hypot(lx, ly) < 1e-12:
        return lit.reshape(H, W)
    ys, xs = np.mgrid[0:H, 0:W]
    xs = xs.reshape(-1).astype(np.float64)
    ys = ys.reshape(-1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(lx > 0, (W - 1 - xs) / lx, np.where(lx < 0, -xs / lx, np.inf))
        ty = np.where(ly > 0, (H - 1 - ys) / ly, np.where(ly < 0, -ys / ly, np.inf))
    t_max = np.minimum(tx, ty)
    z0 = depth_fn(xs, ys)
    for lo in range(0, xs.size, chunk):
        hi = min(lo + chunk, xs.size)
        tm = t_max[lo:hi]
        run = tm > t_min
        if not run.any():
            continue
        frac = np.linspace(0.0, 1.0, samples)
        ts = t_min + (tm[run, None] - t_min) * frac
        px = xs[lo:hi][run, None] + ts * lx
        py = ys[lo:hi][run, None] + ts * ly
        zq = depth_fn(px, py)
        ray = z0[lo:hi][run, None] + ts * lz
        occ = (zq - ray < 0).any(axis=1)
        block = lit[lo:hi]
        sel = np.nonzero(run)[0]
        block[sel[occ]] = False
        lit[lo:hi] = block
    return lit.reshape(H, W)


# ---------------------------------------------------------------------------
# synthetic scenes


def _ring_lights(count, zeniths, seed=0):
    rng = np.random.default_rng(seed)
    phis = 2 * np.pi * np.arange(count) / count + rng.uniform(0, 2 * np.pi)
    out = []
    for i, phi in enumerate(phis):
        th = np.radians(zeniths[i % len(zeniths)])
        out.append([np.sin(th) * np.cos(phi), np.sin(th) * np.sin(phi),
                    -np.cos(th)])
    return np.asarray(out)


def _two_tone_albedo(H, W, seed, channels=3):
    rng = np.random.default_rng(seed)
    base = np.array([0.55, 0.42, 0.3]) + rng.uniform(-0.05, 0.05, 3)
    alt = np.array([0.28, 0.45, 0.55]) + rng.uniform(-0.05, 0.05, 3)
    ys, xs = np.mgrid[0:H, 0:W]
    stripe = ((xs + ys) // max(H // 4, 4)) % 2 == 0
    alb = np.where(stripe[..., None], base, alt)
    if channels == 1:
        alb = alb.mean(axis=-1, keepdims=True)
    return np.clip(alb, 0.05, 0.6)


def make_sphere_scene(H, W, lights=16, material="lambertian", seed=0):
    """Hemisphere on a plane. Mask covers the (eroded) sphere disk, so the
    masked region carries no cast shadows; the plane still occludes rays in
    the stored full-image shadow maps."""
    if H < 16 or W < 16 or lights < 4:
        raise ValueError("sphere scene needs H, W >= 16 and >= 4 lights")
    if material not in ("lambertian", "specular"):
        raise ValueError(f"unknown material {material!r}")
    R = 0.35 * min(H, W)
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0

    def depth_fn(x, y):
        r2 = (x - cx) ** 2 + (y - cy) ** 2
        return R - np.sqrt(np.maximum(R * R - r2, 0.0))

    ys, xs = np.mgrid[0:H, 0:W]
    r2 = (xs - cx) ** 2 + (ys - cy) ** 2
    depth = depth_fn(xs.astype(float), ys.astype(float))
    dome = np.sqrt(np.maximum(R * R - r2, 0.0))
    on_dome = r2 < R * R
    normals = np.zeros((H, W, 3))
    normals[..., 0] = np.where(on_dome, (xs - cx) / R, 0.0)
    normals[..., 1] = np.where(on_dome, (ys - cy) / R, 0.0)
    normals[..., 2] = np.where(on_dome, -dome / R, -1.0)
    mask = r2 <= (R - 1.5) ** 2

    strength, exponent = (0.4, 32.0) if material == "specular" else (0.0, 1.0)
    light_dirs = _ring_lights(lights, (20.0, 32.0, 45.0), seed)
    shadows = np.stack([exact_shadow_map(depth_fn, l, H, W) for l in light_dirs])
    scene = SyntheticScene(depth, normals, _two_tone_albedo(H, W, seed),
                           strength, exponent, light_dirs, shadows, mask,
                           depth_fn)
    return scene, scene.render_stack()


def make_step_scene(H, W, block_height, lights=8, seed=0):
    """Raised block next to a low floor; the shadow stress test."""
    if block_height <= 0:
        raise ValueError("block_height must be positive")
    edge = 0.38 * W

    def depth_fn(x, y):
        return np.where(np.asarray(x) < edge, 0.0, float(block_height))

    ys, xs = np.mgrid[0:H, 0:W]
    depth = depth_fn(xs.astype(float), ys.astype(float))
    normals = np.zeros((H, W, 3))
    normals[..., 2] = -1.0
    mask = np.ones((H, W), dtype=bool)
    light_dirs = _ring_lights(lights, (40.0, 52.0), seed)
    shadows = np.stack([exact_shadow_map(depth_fn, l, H, W) for l in light_dirs])
    albedo = np.full((H, W, 3), 0.55)
    return SyntheticScene(depth, normals, albedo, 0.0, 1.0, light_dirs, shadows,
                          mask, depth_fn)


def make_composite_scene(H, W, lights=12, seed=0, material="lambertian"):
    """Block strip plus a hemisphere on a shared floor; cast shadows fall on
    masked floor pixels. Used by the shadow/TV ablation checks."""
    edge = 0.22 * W
    bh = 0.18 * min(H, W)
    R = 0.24 * min(H, W)
    cx, cy = 0.62 * (W - 1), 0.5 * (H - 1)
    zref = max(bh, R)

    def height(x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        r2 = (x - cx) ** 2 + (y - cy) ** 2
        dome = np.sqrt(np.maximum(R * R - r2, 0.0))
        return np.maximum(np.where(x < edge, bh, 0.0), dome)

    def depth_fn(x, y):
        return zref - height(x, y)

    ys, xs = np.mgrid[0:H, 0:W]
    xf, yf = xs.astype(float), ys.astype(float)
    depth = depth_fn(xf, yf)
    r2 = (xf - cx) ** 2 + (yf - cy) ** 2
    dome = np.sqrt(np.maximum(R * R - r2, 0.0))
    on_dome = r2 < R * R
    normals = np.zeros((H, W, 3))
    normals[..., 0] = np.where(on_dome, (xf - cx) / R, 0.0)
    normals[..., 1] = np.where(on_dome, (yf - cy) / R, 0.0)
    normals[..., 2] = np.where(on_dome, -dome / R, -1.0)
    # score neither the block cliff nor the dome rim: normals jump there
    mask = np.ones((H, W), dtype=bool)
    mask &= np.abs(xf - edge) > 1.6
    mask &= np.abs(np.sqrt(r2) - R) > 1.6

    strength, exponent = (0.4, 32.0) if material == "specular" else (0.0, 1.0)
    light_dirs = _ring_lights(lights, (35.0, 48.0), seed)
    shadows = np.stack([exact_shadow_map(depth_fn, l, H, W) for l in light_dirs])
    scene = SyntheticScene(depth, normals, _two_tone_albedo(H, W, seed),
                           strength, exponent, light_dirs, shadows, mask,
                           depth_fn)
    return scene, scene.render_stack()


# ---------------------------------------------------------------------------
# image helpers


def _write_png(path, img01, bits=16):
    levels = 2 ** bits - 1
    arr = np.round(np.clip(img01, 0.0, 1.0) * levels)
    arr = arr.astype(np.uint16 if bits == 16 else np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 3:
        arr = arr[..., ::-1]  # RGB -> BGR for cv2
    elif arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"failed to write {path}")


def _read_png(path):
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise OSError(f"failed to read {path}")
    if arr.ndim == 3:
        arr = arr[..., :3][..., ::-1]  # BGR -> RGB, drop alpha
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    out = arr.astype(np.float64) / scale
    if out.ndim == 2:
        out = out[..., None]
    return out


def encode_normal_map(normals, mask):
    """Internal-convention normals -> dataset-convention (n+1)/2 image."""
    n = np.asarray(normals) * _FLIP
    img = (n + 1.0) / 2.0
    img[~mask] = 0.0
    return img


def decode_normal_map(img01, mask):
    n = img01 * 2.0 - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(norm > 1e-6, n / np.maximum(norm, 1e-12), 0.0)
    n[~mask] = 0.0
    return n * _FLIP


def write_depth(path_f32, depth):
    """Row-major little-endian float32 grid with a JSON sidecar."""
    path_f32 = Path(path_f32)
    arr = np.ascontiguousarray(depth, dtype="<f4")
    path_f32.write_bytes(arr.tobytes())
    path_f32.with_suffix(".json").write_text(
        json.dumps({"H": arr.shape[0], "W": arr.shape[1], "dtype": "<f4"}))


def read_depth(path_f32):
    path_f32 = Path(path_f32)
    hdr = json.loads(path_f32.with_suffix(".json").read_text())
    arr = np.frombuffer(path_f32.read_bytes(), dtype=hdr["dtype"])
    return arr.reshape(hdr["H"], hdr["W"]).copy()


# ---------------------------------------------------------------------------
# dataset directory IO


def save_scene(scene, stack, out_dir):
    """Write a synthetic scene in the dataset layout, plus ground-truth files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(stack.names):
        _write_png(out / name, stack.images[i], bits=16)
    (out / "filenames.txt").write_text("\n".join(stack.names) + "\n")
    ds_lights = stack.lights * _FLIP
    np.savetxt(out / "light_directions.txt", ds_lights, fmt="%.17g")
    ones = np.ones((stack.n_images, stack.channels))
    np.savetxt(out / "light_intensities.txt", ones, fmt="%.17g")
    _write_png(out / "mask.png", stack.mask.astype(np.float64), bits=8)
    # ground truth for evaluation
    _write_png(out / "normal_gt.png", encode_normal_map(scene.normals, scene.mask),
               bits=16)
    write_depth(out / "depth_gt.f32", scene.depth)
    for i in range(len(scene.lights)):
        _write_png(out / f"shadow_gt_{i:03d}.png",
                   scene.shadow_maps[i].astype(np.float64), bits=8)
    meta = {"spec_strength": scene.spec_strength,
            "spec_exponent": scene.spec_exponent}
    (out / "scene_gt.json").write_text(json.dumps(meta))


def load_dataset(dir_path, apply_gamma=False, grayscale=False):
    """Load a dataset directory into an ObservationStack.

    Images are linearized to [0, 1] and divided per channel by the light
    intensity; light directions are normalized and converted to the internal
    convention. apply_gamma linearizes gamma-2.2 sources (DiLiGenT is linear).
    """
    d = Path(dir_path)
    if not d.is_dir():
        raise ValueError(f"not a dataset directory: {d}")
    list_file = d / "filenames.txt"
    if list_file.exists():
        names = [ln.strip() for ln in list_file.read_text().splitlines() if ln.strip()]
    else:
        names = sorted(p.name for p in d.glob("*.png")
                       if p.name not in RESERVED_NAMES and "_gt" not in p.name
                       and not p.name.startswith("gt_"))
    dirs = np.loadtxt(d / "light_directions.txt", ndmin=2)
    if len(names) != len(dirs):
        raise ValueError(
            f"count mismatch: {len(names)} images vs {len(dirs)} light rows")
    inten = np.loadtxt(d / "light_intensities.txt", ndmin=2)
    if len(inten) != len(names):
        raise ValueError(
            f"count mismatch: {len(names)} images vs {len(inten)} intensity rows")

    images = []
    for i, name in enumerate(names):
        img = _read_png(d / name)
        if apply_gamma:
            img = img ** 2.2
        images.append(img / inten[i].reshape(1, 1, -1))
    images = np.stack(images)
    if grayscale and images.shape[-1] > 1:
        images = images.mean(axis=-1, keepdims=True)

    norms = np.linalg.norm(dirs, axis=1)
    if (np.abs(norms - 1.0) > 1e-3).any():
        warnings.warn("light_directions.txt rows deviate from unit length; "
                      "normalizing")
    fix = np.abs(norms - 1.0) > 1e-12
    dirs[fix] = dirs[fix] / norms[fix, None]
    lights = dirs * _FLIP

    mask_path = d / "mask.png"
    if mask_path.exists():
        mask = _read_png(mask_path)[..., 0] > 0.5
    else:
        mask = np.ones(images.shape[1:3], dtype=bool)
    return ObservationStack(images, lights, mask, names)


def load_gt(dir_path):
    """Ground-truth normals/mask/depth written by save_scene, if present."""
    d = Path(dir_path)
    mask = _read_png(d / "mask.png")[..., 0] > 0.5
    normals = decode_normal_map(_read_png(d / "normal_gt.png"), mask)
    depth = read_depth(d / "depth_gt.f32") if (d / "depth_gt.f32").exists() else None
    return normals, mask, depth


# ---------------------------------------------------------------------------
# estimate export


@dataclass
class SceneEstimate:
    """Fitted per-pixel maps (internal convention, full grid, zero off-mask)."""

    normals: np.ndarray  # (H, W, 3)
    albedo: np.ndarray  # (H, W, C)
    coeffs: np.ndarray  # (H, W, k)
    depth: np.ndarray  # (H, W)
    shadow_maps: np.ndarray  # (n, H, W)
    specular_maps: np.ndarray  # (n, H, W) channel-shared specular intensity
    rerendered: np.ndarray  # (n, H, W, C)
    mask: np.ndarray


def export_maps(est, out_dir, metrics=None):
    """Write the estimate maps; layout documented in the README."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    _write_png(out / "normal.png", encode_normal_map(est.normals, est.mask), bits=8)
    write_depth(out / "depth.f32", est.depth)
    _write_png(out / "albedo.png", est.albedo, bits=8)
    spec_peak = max(float(est.specular_maps.max()), 1e-12)
    for i in range(est.shadow_maps.shape[0]):
        _write_png(out / f"specular_{i:02d}.png",
                   est.specular_maps[i] / spec_peak, bits=8)
        _write_png(out / f"shadow_{i:02d}.png",
                   (est.shadow_maps[i] & est.mask).astype(np.float64), bits=8)
        _write_png(out / f"rerender_{i:02d}.png", est.rerendered[i], bits=16)
    if metrics is not None:
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
