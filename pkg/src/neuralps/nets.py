"""Positional encoding and the three coordinate MLPs.

- surface net: pixel coords (+ per-channel color statistics) -> unit normal,
  diffuse albedo, nonnegative specular-basis weights
- basis net: (n.h, v.h) -> k nonnegative specular basis responses
- depth net: pixel coords -> scalar depth (pixel units, increasing away from
  the camera)

Coordinates are expected pre-normalized to (-1, 1).
"""

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad


class PositionalEncoder:
    """Sinusoidal embedding at frequencies 2^j * pi for j in [0, m).

    The raw input is kept and concatenated with its embeddings, so the
    output dimension is input_dim * (1 + 2 * m).
    """

    def __init__(self, m, input_dim):
        self.m = m
        self.input_dim = input_dim

    @property
    def out_dim(self):
        return self.input_dim * (1 + 2 * self.m)

    def encode(self, x):
        x = np.asarray(x, dtype=np.float64)
        parts = [x]
        for j in range(self.m):
            f = (2.0 ** j) * np.pi
            parts.append(np.sin(f * x))
            parts.append(np.cos(f * x))
        return np.concatenate(parts, axis=-1)

    def encode_tensor(self, t):
        """Differentiable version for inputs that live on the tape."""
        parts = [t]
        for j in range(self.m):
            s = ad.scale(t, (2.0 ** j) * np.pi)
            parts.append(ad.sin(s))
            parts.append(ad.cos(s))
        return ad.concat(parts, axis=-1)


def encode(x, m):
    """Encode a coordinate vector: returns (x, gamma(x))."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return PositionalEncoder(m, x.shape[-1]).encode(x)


class ParamStore:
    """Named map of trainable tensors. Every tensor is registered exactly once."""

    def __init__(self):
        self.tensors = {}
        self.meta = {}

    def register(self, name, array):
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        t = ad.parameter(array, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name):
        return self.tensors[name]

    def parameters(self):
        return list(self.tensors.values())

    def total_params(self):
        return sum(t.data.size for t in self.tensors.values())

    def save(self, bin_path):
        """Flat binary of all tensors plus a JSON index next to it."""
        bin_path = Path(bin_path)
        index = {"tensors": {}, "meta": self.meta}
        blobs = []
        offset = 0
        for name, t in self.tensors.items():
            raw = np.ascontiguousarray(t.data)
            blob = raw.tobytes()
            index["tensors"][name] = {
                "shape": list(t.shape),
                "dtype": str(raw.dtype),
                "offset": offset,
            }
            blobs.append(blob)
            offset += len(blob)
        bin_path.write_bytes(b"".join(blobs))
        bin_path.with_suffix(".json").write_text(json.dumps(index, indent=2))

    @classmethod
    def load(cls, bin_path):
        bin_path = Path(bin_path)
        index = json.loads(bin_path.with_suffix(".json").read_text())
        raw = bin_path.read_bytes()
        store = cls()
        store.meta = index.get("meta", {})
        for name, rec in index["tensors"].items():
            dt = np.dtype(rec["dtype"])
            n = int(np.prod(rec["shape"])) if rec["shape"] else 1
            arr = np.frombuffer(
                raw, dtype=dt, count=n, offset=rec["offset"]
            ).reshape(rec["shape"])
            store.register(name, arr)
        return store


def _he_uniform(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class _Mlp:
    """Shared trunk machinery: relu layers with an optional mid-trunk skip concat."""

    def __init__(self, store, prefix, n_layers, skip_at):
        self.prefix = prefix
        self.n_layers = n_layers
        self.skip_at = skip_at
        self.layers = [
            (store[f"{prefix}.l{i:02d}.w"], store[f"{prefix}.l{i:02d}.b"])
            for i in range(1, n_layers + 1)
        ]

    @staticmethod
    def _register_trunk(store, rng, prefix, in_dim, width, n_layers, skip_at,
                        dtype):
        d = in_dim
        for i in range(1, n_layers + 1):
            store.register(f"{prefix}.l{i:02d}.w", _he_uniform(rng, d, width, dtype))
            store.register(f"{prefix}.l{i:02d}.b", np.zeros(width, dtype=dtype))
            d = width
            if skip_at is not None and i == skip_at:
                d = width + in_dim

    def trunk(self, x_enc, tap=None):
        """Run the relu trunk; optionally return the features after layer `tap` too."""
        h = x_enc
        tapped = None
        for i, (w, b) in enumerate(self.layers, start=1):
            if self.skip_at is not None and i == self.skip_at + 1:
                h = ad.concat([h, x_enc], axis=-1)
            h = ad.relu(ad.add(ad.matmul(h, w), b))
            if tap is not None and i == tap:
                tapped = h
        return h, tapped


class SurfaceNet(_Mlp):
    """Coordinate MLP for normal, diffuse albedo and specular-basis weights."""

    WIDTH = 256
    DEPTH = 12
    SKIP_AT = 4
    NORMAL_AT = 8

    def __init__(self, store, channels, k, m=10):
        super().__init__(store, "surface", self.DEPTH, self.SKIP_AT)
        self.encoder = PositionalEncoder(m, input_dim=2)
        self.channels = channels
        self.k = k
        self.in_dim = self.encoder.out_dim + 2 * channels
        self.w_normal = store["surface.normal.w"]
        self.b_normal = store["surface.normal.b"]
        self.w_rho = store["surface.rho.w"]
        self.b_rho = store["surface.rho.b"]
        self.w_c = store["surface.coef.w"]
        self.b_c = store["surface.coef.b"]

    @classmethod
    def create(cls, store, rng, channels, k, m=10, dtype=np.float64):
        enc = PositionalEncoder(m, input_dim=2)
        in_dim = enc.out_dim + 2 * channels
        cls._register_trunk(store, rng, "surface", in_dim, cls.WIDTH, cls.DEPTH,
                            cls.SKIP_AT, dtype)
        store.register("surface.normal.w", _he_uniform(rng, cls.WIDTH, 3, dtype))
        store.register("surface.normal.b", np.zeros(3, dtype=dtype))
        # small positive head bias so albedo/coefficients start alive under relu
        store.register("surface.rho.w", _he_uniform(rng, cls.WIDTH, channels, dtype))
        store.register("surface.rho.b", np.full(channels, 0.1, dtype=dtype))
        # damped so the specular term starts well below the diffuse one
        store.register("surface.coef.w",
                       (0.1 * _he_uniform(rng, cls.WIDTH, k, dtype)).astype(dtype))
        store.register("surface.coef.b", np.full(k, 0.05, dtype=dtype))
        return cls(store, channels, k, m)

    def encode_input(self, coords, color_stats):
        """Numpy-side input assembly: (gamma(x), color mean/std) per row."""
        coords = np.asarray(coords, dtype=np.float64)
        enc = self.encoder.encode(coords)
        stats = np.broadcast_to(np.asarray(color_stats, dtype=np.float64),
                                enc.shape[:-1] + (2 * self.channels,))
        return np.concatenate([enc, stats], axis=-1)

    def forward(self, x_enc):
        """x_enc -> (unit normal, albedo >= 0, basis weights >= 0)."""
        h_last, h_tap = self.trunk(x_enc, tap=self.NORMAL_AT)
        n = ad.l2_normalize(ad.add(ad.matmul(h_tap, self.w_normal), self.b_normal))
        rho = ad.relu(ad.add(ad.matmul(h_last, self.w_rho), self.b_rho))
        c = ad.relu(ad.add(ad.matmul(h_last, self.w_c), self.b_c))
        return n, rho, c


class BasisNet(_Mlp):
    """Specular basis MLP over p = (n.h, v.h)."""

    WIDTH = 64
    DEPTH = 3

    def __init__(self, store, k, m=3):
        super().__init__(store, "basis", self.DEPTH, skip_at=None)
        self.encoder = PositionalEncoder(m, input_dim=2)
        self.k = k
        self.w_out = store["basis.out.w"]
        self.b_out = store["basis.out.b"]

    @classmethod
    def create(cls, store, rng, k, m=3, dtype=np.float64):
        enc = PositionalEncoder(m, input_dim=2)
        cls._register_trunk(store, rng, "basis", enc.out_dim, cls.WIDTH, cls.DEPTH,
                            None, dtype)
        store.register("basis.out.w", _he_uniform(rng, cls.WIDTH, k, dtype))
        store.register("basis.out.b", np.full(k, 0.1, dtype=dtype))
        return cls(store, k, m)

    def forward(self, p):
        """p: tensor of (n.h, v.h) pairs -> k nonnegative responses per row."""
        h, _ = self.trunk(self.encoder.encode_tensor(p))
        return ad.relu(ad.add(ad.matmul(h, self.w_out), self.b_out))


class DepthNet(_Mlp):
    """Depth MLP; continuous queries at non-pixel locations are fine."""

    WIDTH = 256
    DEPTH = 8
    SKIP_AT = 4

    def __init__(self, store, m=10):
        super().__init__(store, "depth", self.DEPTH, self.SKIP_AT)
        self.encoder = PositionalEncoder(m, input_dim=2)
        self.w_out = store["depth.out.w"]
        self.b_out = store["depth.out.b"]

    @classmethod
    def create(cls, store, rng, m=10, dtype=np.float64):
        enc = PositionalEncoder(m, input_dim=2)
        cls._register_trunk(store, rng, "depth", enc.out_dim, cls.WIDTH, cls.DEPTH,
                            cls.SKIP_AT, dtype)
        # near-flat initial depth: keeps early shadow marching benign
        store.register("depth.out.w",
                       (0.1 * _he_uniform(rng, cls.WIDTH, 1, dtype)).astype(dtype))
        store.register("depth.out.b", np.zeros(1, dtype=dtype))
        return cls(store, m)

    def forward(self, x_enc):
        h, _ = self.trunk(x_enc)
        return ad.add(ad.matmul(h, self.w_out), self.b_out)


class Model:
    """The three networks sharing one parameter store."""

    def __init__(self, store, surface, basis, depth):
        self.store = store
        self.surface = surface
        self.basis = basis
        self.depth = depth

    @property
    def channels(self):
        return self.surface.channels

    @property
    def k(self):
        return self.surface.k

    def parameters(self):
        return self.store.parameters()

    # --- no-grad numpy evaluation helpers (export / inspection) ---

    def eval_surface(self, coords, color_stats):
        x = ad.constant(self.surface.encode_input(coords, color_stats))
        n, rho, c = self.surface.forward(x)
        return n.data, rho.data, c.data

    def eval_depth(self, coords):
        enc = self.depth.encoder.encode(np.asarray(coords, dtype=np.float64))
        z = self.depth.forward(ad.constant(enc))
        return z.data[..., 0]

    def eval_basis(self, p):
        return self.basis.forward(ad.constant(np.asarray(p, dtype=np.float64))).data

    def save(self, bin_path):
        self.store.meta.setdefault("k", self.k)
        self.store.meta.setdefault("channels", self.channels)
        self.store.save(bin_path)

    @classmethod
    def load(cls, bin_path):
        store = ParamStore.load(bin_path)
        channels = int(store.meta["channels"])
        k = int(store.meta["k"])
        return cls(store, SurfaceNet(store, channels, k), BasisNet(store, k),
                   DepthNet(store))


def init_params(seed, channels=3, k=9, dtype=np.float64):
    """Deterministically initialize all three MLPs; returns the model bundle."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    surface = SurfaceNet.create(store, rng, channels, k, dtype=dtype)
    basis = BasisNet.create(store, rng, k, dtype=dtype)
    depth = DepthNet.create(store, rng, dtype=dtype)
    return Model(store, surface, basis, depth)
