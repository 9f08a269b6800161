"""Implicit map parametrizations: close-range SDF field, distant radiance
field, and the view-dependent color head.

The close-range map is a multiresolution feature grid decoded by a small
MLP into one signed distance plus a geometry feature vector. Levels whose
vertex lattice fits the table are indexed densely (injective by
construction); finer levels fall back to an XOR spatial hash. The decoder
additionally receives the query position normalized to the grid box as a
positional skip.

All query paths are dual mode: pass a Tape to record gradients, or nothing
for plain numpy evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Var
from .errors import EmptyField, NonUnitDirection, PlaneOutsideBox
from .geometry import Box, Plane

HASH_PRIMES = (1, 2654435761, 805459861, 3674653429)


# ----------------------------------------------------------- fused gather


def _hash_gather_fwd(table: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("pcf,pc->pf", table[idx], w)


def _bw_hash_gather(ctx, g):
    idx, w, rows = ctx["idx"], ctx["w"], ctx["rows"]
    contrib = (w[:, :, None] * g[:, None, :]).reshape(-1, g.shape[-1])
    flat = idx.ravel()
    cols = [np.bincount(flat, weights=contrib[:, c], minlength=rows) for c in range(g.shape[-1])]
    return (np.stack(cols, axis=-1),)


ad.register_primitive("hash_gather", _bw_hash_gather)


def hash_gather(table, idx: np.ndarray, w: np.ndarray):
    """Weighted corner-feature sum: (rows, F) table -> (P, F) features."""
    tape = table.tape if isinstance(table, Var) else None
    tv = ad.value_of(table)
    out = _hash_gather_fwd(tv, idx, w)
    if tape is None:
        return out
    return tape.record("hash_gather", (table,), out, {"idx": idx, "w": w, "rows": tv.shape[0]})


# -------------------------------------------------------------------- grid


@dataclass
class HashGridConfig:
    box: Box | tuple
    levels: int = 8
    base_resolution: int = 16
    per_level_scale: float = 1.5
    table_size_log2: int = 19
    feature_dim: int = 2
    dims: int = 3

    def __post_init__(self) -> None:
        if isinstance(self.box, Box):
            lo, hi = self.box.lo, self.box.hi
        else:
            lo, hi = (np.asarray(v, dtype=np.float64) for v in self.box)
        if lo.size != self.dims or np.any(hi <= lo):
            raise ValueError("grid box must have positive extent matching dims")
        self.lo, self.hi = lo, hi
        if self.levels < 1 or self.per_level_scale <= 1 or self.feature_dim not in (2, 4, 8):
            raise ValueError("bad grid config")

    def resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.per_level_scale**level))

    def rows(self, level: int) -> int:
        dense = (self.resolution(level) + 1) ** self.dims
        return min(dense, 2**self.table_size_log2)

    def is_dense(self, level: int) -> bool:
        return (self.resolution(level) + 1) ** self.dims <= 2**self.table_size_log2


class HashGrid:
    def __init__(self, config: HashGridConfig, prefix: str) -> None:
        self.config = config
        self.prefix = prefix
        c = config
        self.names = [f"{prefix}.l{i}" for i in range(c.levels)]
        offsets = np.stack(np.meshgrid(*([np.array([0, 1])] * c.dims), indexing="ij"), axis=-1)
        self._corners = offsets.reshape(-1, c.dims).astype(np.int64)
        self._primes = np.array(HASH_PRIMES[: c.dims], dtype=np.uint64)
        self._mask = np.uint64(2**c.table_size_log2 - 1)

    def init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        c = self.config
        for level, name in enumerate(self.names):
            store.add(name, rng.uniform(-1e-4, 1e-4, size=(c.rows(level), c.feature_dim)), "grid")

    def corner_data(self, x: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per level: (corner row indices (P, 2^dims), trilinear weights).

        Indices are composed per axis (stride or hash contributions of the
        cell plus the 0/1 corner offset), which is exact and avoids the
        (P, 2^dims, dims) intermediates of the direct formulation.
        """
        c = self.config
        u = (np.asarray(x, dtype=np.float64) - c.lo) / (c.hi - c.lo)
        u = np.clip(u, 0.0, 1.0)
        bits = self._corners
        out = []
        for level in range(c.levels):
            res = c.resolution(level)
            g = u * res
            cell = np.minimum(np.floor(g), res - 1).astype(np.int64)
            frac = g - cell
            w = None
            for d in range(c.dims):
                wd = np.where(bits[:, d] == 1, frac[:, d, None], 1.0 - frac[:, d, None])
                w = wd if w is None else w * wd
            if c.is_dense(level):
                strides = (res + 1) ** np.arange(c.dims, dtype=np.int64)
                base = cell[:, 0] * strides[0]
                for d in range(1, c.dims):
                    base = base + cell[:, d] * strides[d]
                idx = base[:, None] + (bits @ strides)[None, :]
            else:
                h = None
                for d in range(c.dims):
                    hd = cell[:, d, None].astype(np.uint64) * self._primes[d] + (
                        bits[:, d].astype(np.uint64) * self._primes[d]
                    )
                    h = hd if h is None else h ^ hd
                idx = (h & self._mask).astype(np.int64)
            out.append((idx, w))
        return out

    def encode(self, store: ParamStore, x: np.ndarray, tape: Tape | None = None, return_oob: bool = False):
        """Concatenated per-level interpolated features, (P, levels*F).

        Queries outside the box are clamped onto it; pass return_oob to also
        get the mask of clamped rows.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[0] == 0:
            raise EmptyField("encode on an empty batch")
        parts = []
        for name, (idx, w) in zip(self.names, self.corner_data(x)):
            table = tape.param(store, name) if tape is not None else store[name]
            parts.append(hash_gather(table, idx, w))
        feats = ad.concat(parts, axis=1)
        if return_oob:
            oob = ~np.all((x >= self.config.lo) & (x <= self.config.hi), axis=-1)
            return feats, oob
        return feats


# --------------------------------------------------------------------- mlp


class Mlp:
    """Dense layers with softplus hidden activations."""

    def __init__(self, prefix: str, layer_dims: list[int], beta: float = 100.0) -> None:
        self.prefix = prefix
        self.layer_dims = list(layer_dims)
        self.beta = beta
        self.weight_names = [f"{prefix}.w{i}" for i in range(len(layer_dims) - 1)]
        self.bias_names = [f"{prefix}.b{i}" for i in range(len(layer_dims) - 1)]

    def init_params(self, store: ParamStore, rng: np.random.Generator, geometric_radius: float | None = None) -> None:
        dims = self.layer_dims
        last = len(dims) - 2
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if geometric_radius is not None and i == last:
                # sphere-like start: positive mean weights into the sdf output,
                # small everywhere else, bias pushes the level set outward
                w *= 0.1
                w[:, 0] = rng.normal(np.sqrt(np.pi / fan_in), 1e-4, size=fan_in)
                b[0] = -geometric_radius
            store.add(self.weight_names[i], w, "decoder")
            store.add(self.bias_names[i], b, "decoder")

    def forward(self, store: ParamStore, x, tape: Tape | None = None):
        h = x
        n = len(self.weight_names)
        for i in range(n):
            w = tape.param(store, self.weight_names[i]) if tape is not None else store[self.weight_names[i]]
            b = tape.param(store, self.bias_names[i]) if tape is not None else store[self.bias_names[i]]
            h = ad.add(ad.matmul(h, w), b)
            if i < n - 1:
                h = ad.softplus(h, beta=self.beta)
        return h


# ------------------------------------------------------------- close field


class SdfField:
    """Close-range signed distance map with a geometry feature head."""

    def __init__(
        self,
        config: HashGridConfig,
        store: ParamStore,
        feature_dim: int = 15,
        hidden: int = 64,
        hidden_layers: int = 2,
    ) -> None:
        if config.dims != 3:
            raise ValueError("close-range field is 3-D")
        self.config = config
        self.store = store
        self.feature_dim = feature_dim
        self.grid = HashGrid(config, "sdf.grid")
        in_dim = config.levels * config.feature_dim + 3
        dims = [in_dim] + [hidden] * hidden_layers + [1 + feature_dim]
        self.decoder = Mlp("sdf.dec", dims)
        self.sharpness_name = "sharpness"

    @classmethod
    def create(
        cls,
        config: HashGridConfig,
        seed: int,
        store: ParamStore | None = None,
        feature_dim: int = 15,
        hidden: int = 64,
        hidden_layers: int = 2,
        initial_sharpness: float = 10.0,
        geometric_radius: float = 0.5,
    ) -> "SdfField":
        store = store if store is not None else ParamStore()
        field = cls(config, store, feature_dim, hidden, hidden_layers)
        rng = np.random.default_rng(seed)
        field.grid.init_params(store, rng)
        field.decoder.init_params(store, rng, geometric_radius=geometric_radius)
        store.add("sharpness", np.array([np.log(initial_sharpness)]), "sharpness")
        return field

    def _skip(self, x: np.ndarray) -> np.ndarray:
        c = self.config
        return (x - 0.5 * (c.lo + c.hi)) / (0.5 * (c.hi - c.lo))

    def sdf_and_feature(self, x: np.ndarray, tape: Tape | None = None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        feats = self.grid.encode(self.store, x, tape)
        h = ad.concat([feats, self._skip(np.clip(x, self.config.lo, self.config.hi))], axis=1)
        out = self.decoder.forward(self.store, h, tape)
        return ad.getitem(out, (slice(None), 0)), ad.getitem(out, (slice(None), slice(1, None)))

    def sdf(self, x: np.ndarray, tape: Tape | None = None):
        return self.sdf_and_feature(x, tape)[0]

    def gradient(self, x: np.ndarray, tape: Tape | None = None, h: float = 1e-3):
        """Central-difference spatial gradient, itself differentiable."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        p = x.shape[0]
        shifted = np.concatenate([x + off for off in h * np.vstack([np.eye(3), -np.eye(3)])])
        s = self.sdf(shifted, tape)
        axes = [
            ad.div(ad.sub(ad.getitem(s, slice(a * p, (a + 1) * p)), ad.getitem(s, slice((a + 3) * p, (a + 4) * p))), 2.0 * h)
            for a in range(3)
        ]
        return ad.stack_last(axes)

    def sharpness(self, tape: Tape | None = None):
        raw = tape.param(self.store, self.sharpness_name) if tape is not None else self.store[self.sharpness_name]
        return ad.exp(raw)


def query_sdf(field: SdfField, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Plain evaluation: (sdf values, geometry features)."""
    sdf, feat = field.sdf_and_feature(x)
    return sdf, feat


def sdf_gradient(field: SdfField, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    return field.gradient(x, h=h)


def init_to_plane(
    field: SdfField,
    plane: Plane,
    box: Box,
    steps: int,
    seed: int,
    batch: int = 2048,
    holdout: int = 10000,
) -> float:
    """Pretrain the field toward the analytic signed distance of a plane.

    Minimizes mean squared error on uniform box samples; returns the RMSE
    on a fresh held-out sample set. Points on the normal side of the plane
    come out positive.
    """
    corners = box.lo + box.extent * np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"), -1).reshape(-1, 3)
    d = plane.signed_distance(corners)
    if np.all(d > 0) or np.all(d < 0):
        raise PlaneOutsideBox("plane does not intersect the box")

    rng = np.random.default_rng(seed)
    trainable = [n for n in field.store.names() if n.startswith(("sdf.grid", "sdf.dec"))]
    # decoder needs the larger step here: pretraining must rotate the
    # geometric (spherical) init into a linear ramp within a few hundred steps
    state = ad.AdamState.for_store(
        field.store, {"grid": 1e-2, "decoder": 1e-2, "sharpness": 0.0, "pose": 0.0}
    )
    for _ in range(steps):
        x = box.sample_uniform(batch, rng)
        target = plane.signed_distance(x)
        tape = Tape()
        err = ad.sub(field.sdf(x, tape), target)
        loss = ad.vmean(ad.mul(err, err))
        grads = ad.backward(tape, loss)
        grads = {n: grads[n] for n in trainable}
        ad.adam_step(field.store, grads, state)

    x = box.sample_uniform(holdout, rng)
    err = field.sdf(x) - plane.signed_distance(x)
    return float(np.sqrt(np.mean(err**2)))


# ----------------------------------------------------------- distant field


class DistantField:
    """4-D hashed radiance field for content beyond the close-range box."""

    def __init__(self, config: HashGridConfig, store: ParamStore, hidden: int = 32) -> None:
        if config.dims != 4:
            raise ValueError("distant field is 4-D")
        self.config = config
        self.store = store
        self.grid = HashGrid(config, "distant.grid")
        in_dim = config.levels * config.feature_dim + 4
        self.decoder = Mlp("distant.dec", [in_dim, hidden, 4])

    @classmethod
    def create(cls, config: HashGridConfig, seed: int, store: ParamStore | None = None, hidden: int = 32) -> "DistantField":
        store = store if store is not None else ParamStore()
        field = cls(config, store, hidden)
        rng = np.random.default_rng(seed)
        field.grid.init_params(store, rng)
        field.decoder.init_params(store, rng)
        return field

    def query(self, x4: np.ndarray, tape: Tape | None = None):
        """(density, rgb) at warped 4-vectors; density >= 0, rgb in [0,1]."""
        x4 = np.atleast_2d(np.asarray(x4, dtype=np.float64))
        feats = self.grid.encode(self.store, x4, tape)
        c = self.config
        skip = (np.clip(x4, c.lo, c.hi) - 0.5 * (c.lo + c.hi)) / (0.5 * (c.hi - c.lo))
        out = self.decoder.forward(self.store, ad.concat([feats, skip], axis=1), tape)
        sigma = ad.softplus(ad.getitem(out, (slice(None), 0)), beta=1.0)
        rgb = ad.sigmoid(ad.getitem(out, (slice(None), slice(1, 4))))
        return sigma, rgb


def query_distant(field: DistantField, x_warped: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return field.query(x_warped)


# -------------------------------------------------------------- color head


class ColorHead:
    """Maps (view direction, geometry feature) to rgb in [0,1]^3."""

    def __init__(self, store: ParamStore, feature_dim: int = 15, hidden: int = 64) -> None:
        self.store = store
        self.mlp = Mlp("color", [3 + feature_dim, hidden, hidden, 3])

    @classmethod
    def create(cls, seed: int, store: ParamStore | None = None, feature_dim: int = 15, hidden: int = 64) -> "ColorHead":
        store = store if store is not None else ParamStore()
        head = cls(store, feature_dim, hidden)
        head.mlp.init_params(store, np.random.default_rng(seed))
        return head

    def query(self, v: np.ndarray, z, tape: Tape | None = None):
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        norms = np.linalg.norm(v, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise NonUnitDirection("view directions must be unit length")
        zv = z if isinstance(z, Var) else np.atleast_2d(np.asarray(z, dtype=np.float64))
        return ad.sigmoid(self.mlp.forward(self.store, ad.concat([v, zv], axis=1), tape))


def query_color(head: ColorHead, v: np.ndarray, z: np.ndarray) -> np.ndarray:
    return head.query(v, z)
