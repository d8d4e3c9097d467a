"""Losses, the two-phase schedule (guidance -> rendered shadows), fit driver.

Phase 1 (iteration < guidance_end * iterations): pixels falling below the
shadow-guidance threshold are excluded from the reconstruction loss and the
smoothness weight beta is active. Phase 2: shadows are rendered by marching
the fitted depth field (no gradient through the binary factor) and beta
drops to zero. The geometry constraint runs in both phases.
"""

import csv
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .nets import init_params
from .render import (Light, ShadowMarchConfig, half_vector, render_image,
                     render_shadow_map, shadow_guidance_mask, VIEW_DIR)
from .sceneio import SceneEstimate


class FitDivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class FitConfig:
    iterations: int = 6000
    batch_images: int = 8
    learning_rate: float = 5e-4
    beta: float = 0.01  # TV weight; forced to 0 after the guidance phase
    guidance_end: float = 0.5
    seed: int = 0
    use_shadow: bool = True
    use_specular: bool = True
    use_tv: bool = True
    k: int = 9
    dtype: str = "float32"
    drop_images: tuple = ()  # saturated frames to discard before fitting
    shadow_samples: int = 32
    shadow_t_min: float = 0.5
    log_every: int = 0

    def __post_init__(self):
        if not (0 < self.guidance_end <= 1):
            raise ValueError("guidance_end must be in (0, 1]")
        if self.iterations <= 0 or self.batch_images <= 0:
            raise ValueError("iterations and batch_images must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        self.drop_images = tuple(int(i) for i in self.drop_images)

    def march_config(self):
        return ShadowMarchConfig(self.shadow_samples, self.shadow_t_min)

    def to_file(self, path):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "drop_images":
                v = ",".join(str(i) for i in v)
            lines.append(f"{f.name} = {v}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path):
        raw = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            raw[key.strip()] = val.strip()
        kwargs = {}
        by_name = {f.name: f for f in fields(cls)}
        for key, val in raw.items():
            if key not in by_name:
                raise ValueError(f"unknown config key {key!r}")
            ftype = by_name[key].type
            if key == "drop_images":
                kwargs[key] = tuple(int(s) for s in val.split(",") if s.strip())
            elif ftype is bool or ftype == "bool":
                kwargs[key] = val.lower() in ("1", "true", "yes")
            elif ftype is int or ftype == "int":
                kwargs[key] = int(val)
            elif ftype is float or ftype == "float":
                kwargs[key] = float(val)
            else:
                kwargs[key] = val
        return cls(**kwargs)


@dataclass
class LossReport:
    iteration: int
    rec: float
    geo: float
    tv: float
    total: float
    beta: float


def write_history(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "rec", "geo", "tv", "total"])
        for r in history:
            w.writerow([r.iteration, repr(r.rec), repr(r.geo), repr(r.tv),
                        repr(r.total)])


# ---------------------------------------------------------------------------
# losses


def loss_rec(pred, obs, mask):
    """Mean absolute error over mask-1 entries (mask broadcasts over channels)."""
    m = mask.data
    count = float(np.broadcast_to(m, pred.shape).sum())
    if count == 0:
        raise ValueError("loss_rec: empty mask")
    diff = ad.absolute(ad.add(pred, ad.scale(obs, -1.0)))
    return ad.scale(ad.reduce_sum(ad.mul(diff, mask)), 1.0 / count)


class GeoIndex:
    """Finite-difference stencils over the masked pixel set.

    Central differences where both neighbours are masked, one-sided at mask
    borders; pixels lacking a derivative in either direction are skipped.
    """

    def __init__(self, mask):
        H, W = mask.shape
        ys, xs = np.nonzero(mask)
        P = ys.size
        grid = np.full((H, W), -1, dtype=np.int64)
        grid[ys, xs] = np.arange(P)

        def neighbour(dy, dx):
            yy, xx = ys + dy, xs + dx
            ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            out = np.full(P, -1, dtype=np.int64)
            out[ok] = grid[yy[ok], xx[ok]]
            return out

        me = np.arange(P)

        def stencil(plus, minus):
            a = np.where(plus >= 0, plus, me)
            b = np.where(minus >= 0, minus, me)
            have = (plus >= 0) | (minus >= 0)
            w = np.where((plus >= 0) & (minus >= 0), 0.5, 1.0)
            return a, b, np.where(have, w, 0.0)[:, None], have

        self.ax, self.bx, self.wx, have_x = stencil(neighbour(0, 1),
                                                    neighbour(0, -1))
        self.ay, self.by, self.wy, have_y = stencil(neighbour(1, 0),
                                                    neighbour(-1, 0))
        valid = have_x & have_y
        self.valid = valid[:, None].astype(np.float64)
        self.count = int(valid.sum())
        self.size = P


def loss_geo(n_map, z, gi):
    """Mean over masked pixels of 1 - n . g(depth).

    g is the camera-facing unit normal of the depth field under the internal
    axis convention: normalize(dz/dx, dz/dy, -1).
    """
    if gi.count == 0:
        return ad.constant(np.zeros(()))
    dt = z.data.dtype
    zx = ad.mul(ad.add(ad.gather_rows(z, gi.ax), ad.scale(ad.gather_rows(z, gi.bx), -1.0)),
                ad.constant(gi.wx.astype(dt)))
    zy = ad.mul(ad.add(ad.gather_rows(z, gi.ay), ad.scale(ad.gather_rows(z, gi.by), -1.0)),
                ad.constant(gi.wy.astype(dt)))
    minus_one = ad.constant(np.full((gi.size, 1), -1.0, dtype=dt))
    g = ad.l2_normalize(ad.concat([zx, zy, minus_one], axis=-1))
    agree = ad.dot(n_map, g)
    ones = ad.constant(np.ones((gi.size, 1), dtype=dt))
    piece = ad.mul(ad.add(ones, ad.scale(agree, -1.0)),
                   ad.constant(gi.valid.astype(dt)))
    return ad.scale(ad.reduce_sum(piece), 1.0 / gi.count)


class TvPairs:
    """Right and down neighbour pairs with both endpoints masked."""

    def __init__(self, mask):
        H, W = mask.shape
        ys, xs = np.nonzero(mask)
        grid = np.full((H, W), -1, dtype=np.int64)
        grid[ys, xs] = np.arange(ys.size)
        pairs_i, pairs_j = [], []
        for dy, dx in ((0, 1), (1, 0)):
            yy, xx = ys + dy, xs + dx
            ok = (yy < H) & (xx < W)
            nb = np.full(ys.size, -1, dtype=np.int64)
            nb[ok] = grid[yy[ok], xx[ok]]
            sel = nb >= 0
            pairs_i.append(np.nonzero(sel)[0])
            pairs_j.append(nb[sel])
        self.i = np.concatenate(pairs_i)
        self.j = np.concatenate(pairs_j)
        self.count = self.i.size


def loss_tv(rho_d, c, n_map, pairs):
    """V_l1 over albedo and basis-weight differences plus V_l2 over normals."""
    if pairs.count == 0:
        return ad.constant(np.zeros(()))

    def diff(f):
        return ad.add(ad.gather_rows(f, pairs.i),
                      ad.scale(ad.gather_rows(f, pairs.j), -1.0))

    l1 = ad.add(ad.reduce_mean(ad.absolute(diff(rho_d))),
                ad.reduce_mean(ad.absolute(diff(c))))
    return ad.add(l1, ad.reduce_mean(ad.square(diff(n_map))))


# ---------------------------------------------------------------------------
# fit driver


def _normalized_coords(ys, xs, H, W):
    return np.stack([(xs + 0.5) / W * 2.0 - 1.0,
                     (ys + 0.5) / H * 2.0 - 1.0], axis=-1)


def fit(stack, cfg):
    """Optimize the three MLPs against an observation stack.

    Returns (SceneEstimate, history, model); the model carries the fitted
    parameter store for checkpointing. Aborts with FitDivergenceError if the
    loss stops being finite.
    """
    if cfg.drop_images:
        stack = stack.drop_images(cfg.drop_images)
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    H, W = stack.shape
    C = stack.channels
    n_img = stack.n_images
    batch = min(cfg.batch_images, n_img)
    mask = stack.mask
    ys, xs = np.nonzero(mask)
    P = ys.size
    if P == 0:
        raise ValueError("fit: empty mask")

    rng = np.random.default_rng(cfg.seed)
    model = init_params(cfg.seed, channels=C, k=cfg.k, dtype=dtype)
    color_stats = stack.color_stats()
    model.store.meta.update({
        "color_stats": [float(v) for v in color_stats],
        "H": H, "W": W, "k": cfg.k, "channels": C,
    })

    coords = _normalized_coords(ys, xs, H, W)
    enc_m = ad.constant(model.surface.encode_input(coords, color_stats).astype(dtype))
    enc_z = ad.constant(model.depth.encoder.encode(coords).astype(dtype))
    obs = np.ascontiguousarray(stack.images[:, mask, :].astype(dtype))
    guidance = shadow_guidance_mask(stack.images)[:, mask]

    lights = [Light(l) for l in stack.lights]
    l_cols = [ad.constant(l.direction.reshape(3, 1).astype(dtype)) for l in lights]
    h_vecs = [half_vector(l.direction) for l in lights]
    h_cols = [ad.constant(h.reshape(3, 1).astype(dtype)) for h in h_vecs]
    vh_cols = [ad.constant(np.full((P, 1), float(h @ VIEW_DIR), dtype=dtype))
               for h in h_vecs]

    gi = GeoIndex(mask)
    tv_pairs = TvPairs(mask)
    march = cfg.march_config()

    train_prefixes = ("surface.", "depth.") + (("basis.",) if cfg.use_specular else ())
    params = [t for name, t in model.store.tensors.items()
              if name.startswith(train_prefixes)]
    opt = ad.AdamState(params, learning_rate=cfg.learning_rate)

    ones_col = ad.constant(np.ones((P, 1), dtype=dtype))
    zgrid = np.zeros((H, W))

    def predict(n_t, rho_t, c_t, i, s_col):
        shading = ad.relu(ad.matmul(n_t, l_cols[i]))
        if cfg.use_specular:
            p = ad.concat([ad.matmul(n_t, h_cols[i]), vh_cols[i]], axis=-1)
            spec = ad.dot(c_t, model.basis.forward(p))
            bright = ad.add(rho_t, spec)
        else:
            bright = rho_t
        pred = ad.mul(bright, shading)
        if s_col is not None:
            pred = ad.mul(pred, s_col)
        return pred

    history = []
    for it in range(cfg.iterations):
        sel = rng.choice(n_img, size=batch, replace=False)
        phase1 = it < cfg.guidance_end * cfg.iterations
        beta_t = cfg.beta if (phase1 and cfg.use_tv) else 0.0

        with ad.record() as tape:
            n_t, rho_t, c_t = model.surface.forward(enc_m)
            z_t = model.depth.forward(enc_z)

            shadow_cols = {}
            if not phase1 and cfg.use_shadow:
                zgrid[mask] = z_t.data[:, 0]
                for i in sel:
                    s = render_shadow_map(zgrid, mask, lights[i], march)
                    shadow_cols[i] = ad.constant(
                        s[mask][:, None].astype(dtype))

            preds, obs_parts, mask_parts = [], [], []
            for i in sel:
                preds.append(predict(n_t, rho_t, c_t, i, shadow_cols.get(i)))
                obs_parts.append(obs[i])
                if phase1 and cfg.use_shadow:
                    mask_parts.append(guidance[i][:, None].astype(dtype))
                else:
                    mask_parts.append(np.ones((P, 1), dtype=dtype))
            rec_t = loss_rec(ad.concat(preds, axis=0),
                             ad.constant(np.concatenate(obs_parts)),
                             ad.constant(np.concatenate(mask_parts)))
            geo_t = loss_geo(n_t, z_t, gi)
            loss = ad.add(rec_t, geo_t)
            if beta_t > 0 and tv_pairs.count > 0:
                tv_t = loss_tv(rho_t, c_t, n_t, tv_pairs)
                loss = ad.add(loss, ad.scale(tv_t, beta_t))
                tv_val = tv_t.item()
            else:
                tv_val = 0.0

        rec_val, geo_val, total = rec_t.item(), geo_t.item(), loss.item()
        if not np.isfinite(total):
            raise FitDivergenceError(
                f"non-finite loss at iteration {it}: rec={rec_val} "
                f"geo={geo_val} tv={tv_val}")
        ad.backward(tape, loss)
        ad.adam_step(params, opt)
        history.append(LossReport(it, rec_val, geo_val, tv_val, total, beta_t))
        if cfg.log_every and it % cfg.log_every == 0:
            print(f"iter {it:5d} rec {rec_val:.5f} geo {geo_val:.5f} "
                  f"tv {tv_val:.5f}")

    est = _final_estimate(model, stack, cfg, ys, xs)
    return est, history, model


def _final_estimate(model, stack, cfg, ys, xs):
    """Evaluate the fitted maps over the full stack (no tape)."""
    H, W = stack.shape
    C = stack.channels
    mask = stack.mask
    coords = _normalized_coords(ys, xs, H, W)
    stats = np.array(model.store.meta["color_stats"])
    n_px, rho_px, c_px = model.eval_surface(coords, stats)
    z_px = model.eval_depth(coords)

    normals = np.zeros((H, W, 3))
    normals[mask] = n_px
    albedo = np.zeros((H, W, C))
    albedo[mask] = rho_px
    coeffs = np.zeros((H, W, model.k))
    coeffs[mask] = c_px
    depth = np.zeros((H, W))
    depth[mask] = z_px

    march = cfg.march_config()
    n_img = stack.n_images
    shadows = np.ones((n_img, H, W), dtype=np.uint8)
    speculars = np.zeros((n_img, H, W))
    rerendered = np.zeros((n_img, H, W, C))
    for i in range(n_img):
        light = Light(stack.lights[i])
        shadows[i] = render_shadow_map(depth, mask, light, march)
        s_px = shadows[i][mask].astype(np.float64) if cfg.use_shadow else 1.0
        shading = np.maximum(n_px @ light.direction, 0.0)
        if cfg.use_specular:
            h = half_vector(light.direction)
            p = np.stack([n_px @ h, np.full(n_px.shape[0], h @ VIEW_DIR)],
                         axis=-1)
            spec = (c_px * model.eval_basis(p)).sum(axis=-1)
        else:
            spec = np.zeros(n_px.shape[0])
        speculars[i][mask] = s_px * spec * shading
        rerendered[i][mask] = (s_px * shading)[:, None] * (rho_px + spec[:, None])
    return SceneEstimate(normals, albedo, coeffs, depth, shadows, speculars,
                         rerendered, mask.copy())


def config_echo(cfg):
    d = asdict(cfg)
    d["drop_images"] = list(d["drop_images"])
    return d
