"""Scene parametrization: shape image, texture, background, mesh topology.

A scene is three arrays. The *shape image* is a 3 x N x N array whose pixel
(i, j) holds the 3D world coordinates of grid vertex (i, j); only vertices
inside the inscribed circle of the grid are referenced by triangles. The
*texture* is 3 x 2N x 2N, addressed through per-vertex UV coordinates, and
the *background* is 3 x 2N x 2N, of which a random N x N window is cropped
behind the object at render time.

Grid conventions used throughout the package:
  - vertex (i, j) means row i, column j; flat vertex id = i * n + j
  - UV of vertex (i, j) is (i / (n-1), j / (n-1))
  - in world space the grid maps columns to +X (right) and rows to -Y
    (a row increase moves down), with +Z toward the camera
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Fraction of the polar angle left open at the back pole by the sphere
# mapping; the disc mesh cannot close into a watertight sphere.
SPHERE_POLE_GAP = 0.05

# Below this per-vertex norm the factor tanh(|s|)/|s| is evaluated by series
# to keep forward and backward finite at the origin.
_TANH_SERIES_CUTOFF = 1e-4


@dataclass(frozen=True)
class ShapeImage:
    """3 x n x n array of per-vertex world coordinates."""

    data: np.ndarray
    n: int

    def __post_init__(self):
        if self.data.shape != (3, self.n, self.n):
            raise ValueError(f"shape image must be (3, {self.n}, {self.n}), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("shape image contains non-finite values")


@dataclass(frozen=True)
class TextureImage:
    """3 x n_t x n_t color image, n_t = 2N; channels clamped to [0,1] at render time."""

    data: np.ndarray
    n_t: int

    def __post_init__(self):
        if self.data.shape != (3, self.n_t, self.n_t):
            raise ValueError(f"texture must be (3, {self.n_t}, {self.n_t}), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("texture contains non-finite values")


@dataclass(frozen=True)
class Background:
    """3 x 2N x 2N color image cropped behind the object at render time."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3 or self.data.shape[1] != self.data.shape[2]:
            raise ValueError(f"background must be (3, side, side), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("background contains non-finite values")

    @property
    def side(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SceneRepresentation:
    """The renderer's input m = [shape, texture, background]."""

    shape: ShapeImage
    texture: TextureImage
    background: Background

    def __post_init__(self):
        n = self.shape.n
        if self.texture.n_t != 2 * n:
            raise ValueError(f"texture side {self.texture.n_t} != 2N = {2 * n}")
        if self.background.side != 2 * n:
            raise ValueError(f"background side {self.background.side} != 2N = {2 * n}")

    @property
    def n(self) -> int:
        return self.shape.n


@dataclass(frozen=True)
class MeshTopology:
    """Fixed triangulation of the circular region of the n x n grid.

    triangles: (M, 3) int32 flat vertex ids, consistent winding.
    uv: (n*n, 2) per-vertex texture coordinates in [0,1]^2.
    """

    n: int
    triangles: np.ndarray
    uv: np.ndarray


def make_scene(shape: np.ndarray, texture: np.ndarray, background: np.ndarray) -> SceneRepresentation:
    """Wrap raw arrays into a validated SceneRepresentation."""
    n = shape.shape[1]
    return SceneRepresentation(
        ShapeImage(np.asarray(shape, dtype=np.float64), n),
        TextureImage(np.asarray(texture, dtype=np.float64), 2 * n),
        Background(np.asarray(background, dtype=np.float64)),
    )


def build_topology(n: int) -> MeshTopology:
    """Triangulate the middle circular region of the n x n grid.

    Each grid cell is split into two triangles; a triangle is kept iff all
    three of its vertices (i, j) satisfy
    (i - (n-1)/2)^2 + (j - (n-1)/2)^2 <= ((n-1)/2)^2.
    Deterministic: cells scanned row-major, lower-left triangle first.
    """
    if n < 4:
        raise ValueError(f"grid side must be >= 4, got {n}")
    c = (n - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    in_region = (ii - c) ** 2 + (jj - c) ** 2 <= c**2

    cell_i, cell_j = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="ij")
    cell_i = cell_i.ravel()
    cell_j = cell_j.ravel()
    v00 = cell_i * n + cell_j
    v10 = (cell_i + 1) * n + cell_j
    v01 = cell_i * n + (cell_j + 1)
    v11 = (cell_i + 1) * n + (cell_j + 1)

    # Two triangles per cell, interleaved so the scan order is cell-major.
    tri_a = np.stack([v00, v10, v01], axis=1)
    tri_b = np.stack([v10, v11, v01], axis=1)
    tris = np.empty((2 * len(cell_i), 3), dtype=np.int64)
    tris[0::2] = tri_a
    tris[1::2] = tri_b

    flat_in = in_region.ravel()
    keep = flat_in[tris].all(axis=1)
    triangles = np.ascontiguousarray(tris[keep].astype(np.int32))

    uv = np.stack([(ii / (n - 1)).ravel(), (jj / (n - 1)).ravel()], axis=1)
    return MeshTopology(n=n, triangles=triangles, uv=uv)


def initial_sphere(n: int, r: float = 0.5) -> ShapeImage:
    """Map the grid disc onto a sphere of radius r centered at the origin.

    Azimuthal equidistant mapping: normalized grid radius rho in [0, 1] maps
    to polar angle theta = rho * pi * (1 - SPHERE_POLE_GAP) measured from the
    +Z pole (toward the camera), so the disc center sits at (0, 0, +r) and
    the disc boundary lands near the back pole, leaving a small hole.
    Out-of-region vertices get values from the same formula; no triangle
    references them.
    """
    if n < 4:
        raise ValueError(f"grid side must be >= 4, got {n}")
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    c = (n - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    ux = (jj - c) / c
    uy = -(ii - c) / c
    rho = np.hypot(ux, uy)
    theta = rho * np.pi * (1.0 - SPHERE_POLE_GAP)
    safe_rho = np.where(rho > 0, rho, 1.0)
    dir_x = ux / safe_rho
    dir_y = uy / safe_rho
    sin_t = np.sin(theta)
    data = np.stack([r * sin_t * dir_x, r * sin_t * dir_y, r * np.cos(theta)])
    return ShapeImage(data, n)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    # Truncated at radius ceil(3*sigma), renormalized to sum 1 so constant
    # images are preserved exactly.
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _blur_axis(data: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Correlate one spatial axis with the kernel under replicate padding."""
    radius = (len(kernel) - 1) // 2
    n = data.shape[axis]
    pad = [(0, 0)] * data.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(data, pad, mode="edge")
    out = np.zeros_like(data)
    sl = [slice(None)] * data.ndim
    for m, km in enumerate(kernel):
        sl[axis] = slice(m, m + n)
        out += km * padded[tuple(sl)]
    return out


def _blur_axis_adjoint(grad: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Exact transpose of _blur_axis as a linear map."""
    radius = (len(kernel) - 1) // 2
    n = grad.shape[axis]
    pad_shape = list(grad.shape)
    pad_shape[axis] = n + 2 * radius
    pad_bar = np.zeros(pad_shape, dtype=grad.dtype)
    sl = [slice(None)] * grad.ndim
    for m, km in enumerate(kernel):
        sl[axis] = slice(m, m + n)
        pad_bar[tuple(sl)] += km * grad
    # Transpose of replicate padding: fold border contributions onto edges.
    sl_core = [slice(None)] * grad.ndim
    sl_core[axis] = slice(radius, radius + n)
    out = pad_bar[tuple(sl_core)].copy()
    sl_lo = [slice(None)] * grad.ndim
    sl_lo[axis] = slice(0, radius)
    sl_hi = [slice(None)] * grad.ndim
    sl_hi[axis] = slice(radius + n, None)
    idx_first = [slice(None)] * grad.ndim
    idx_first[axis] = 0
    idx_last = [slice(None)] * grad.ndim
    idx_last[axis] = n - 1
    out[tuple(idx_first)] += pad_bar[tuple(sl_lo)].sum(axis=axis)
    out[tuple(idx_last)] += pad_bar[tuple(sl_hi)].sum(axis=axis)
    return out


def gaussian_blur(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable channelwise Gaussian blur with replicate-edge padding."""
    k = _gaussian_kernel(sigma)
    return _blur_axis(_blur_axis(data, k, axis=1), k, axis=2)


def gaussian_blur_vjp(grad: np.ndarray, sigma: float) -> np.ndarray:
    """Adjoint of gaussian_blur (exact transpose of the linear map)."""
    k = _gaussian_kernel(sigma)
    return _blur_axis_adjoint(_blur_axis_adjoint(grad, k, axis=2), k, axis=1)


def shape_pyramid(levels: list[ShapeImage]) -> ShapeImage:
    """Sum of K shape images blurred at dyadic scales.

    Level k contributes blur(s_k, sigma=2^k) / 2^k; a single level reduces
    to blur(s_0, sigma=1). Biases learned shape updates toward low spatial
    frequencies.
    """
    if len(levels) < 1:
        raise ValueError("pyramid needs at least one level")
    n = levels[0].n
    for lv in levels:
        if lv.n != n:
            raise ValueError("pyramid levels must share the grid side")
    out = np.zeros_like(levels[0].data)
    for k, lv in enumerate(levels):
        out += gaussian_blur(lv.data, sigma=float(2**k)) / float(2**k)
    return ShapeImage(out, n)


def shape_pyramid_vjp(grad: np.ndarray, k_levels: int) -> list[np.ndarray]:
    """Per-level co-tangents of shape_pyramid for an upstream grad array."""
    return [gaussian_blur_vjp(grad, sigma=float(2**k)) / float(2**k) for k in range(k_levels)]


def _tanh_factor(norms: np.ndarray) -> np.ndarray:
    # tanh(n)/n, series 1 - n^2/3 below the cutoff (continuous at 0).
    small = norms < _TANH_SERIES_CUTOFF
    safe = np.where(small, 1.0, norms)
    return np.where(small, 1.0 - norms**2 / 3.0, np.tanh(safe) / safe)


def _tanh_factor_slope(norms: np.ndarray) -> np.ndarray:
    # f'(n)/n where f(n) = tanh(n)/n; series limit -2/3 at n -> 0.
    small = norms < _TANH_SERIES_CUTOFF
    safe = np.where(small, 1.0, norms)
    t = np.tanh(safe)
    general = (safe * (1.0 - t**2) - t) / safe**3
    return np.where(small, -2.0 / 3.0 + (8.0 / 15.0) * norms**2, general)


def size_constraint(s: ShapeImage, s_max: float = 1.3) -> ShapeImage:
    """Squash per-vertex coordinates so every norm stays strictly below s_max.

    out = s * tanh(|s|)/|s| * s_max per vertex, with the factor extended to 1
    at |s| = 0. Direction-preserving and differentiable everywhere.
    """
    if s_max <= 0:
        raise ValueError(f"s_max must be positive, got {s_max}")
    norms = np.sqrt((s.data**2).sum(axis=0))
    out = s.data * _tanh_factor(norms)[None] * s_max
    return ShapeImage(out, s.n)


def size_constraint_vjp(s: np.ndarray, grad: np.ndarray, s_max: float = 1.3) -> np.ndarray:
    """Jacobian-transpose product of size_constraint at s for co-tangent grad."""
    norms = np.sqrt((s**2).sum(axis=0))
    f = _tanh_factor(norms)
    h = _tanh_factor_slope(norms)
    dot = (s * grad).sum(axis=0)
    return s_max * (f[None] * grad + h[None] * dot[None] * s)


def apply_generator_head(
    raw: list[ShapeImage],
    scale: float = 0.002,
    s0: ShapeImage | None = None,
    s_max: float = 1.3,
) -> ShapeImage:
    """Generator-side shaping: pyramid, scale, add the initial sphere, squash.

    Returns size_constraint(s0 + scale * shape_pyramid(raw), s_max). The
    scale factor acts as a relative learning rate on the shape path.
    """
    pyr = shape_pyramid(raw)
    if s0 is None:
        s0 = initial_sphere(pyr.n)
    if s0.n != pyr.n:
        raise ValueError("s0 grid side does not match pyramid levels")
    combined = ShapeImage(s0.data + scale * pyr.data, pyr.n)
    return size_constraint(combined, s_max)


def apply_generator_head_vjp(
    raw: list[ShapeImage],
    grad: np.ndarray,
    scale: float = 0.002,
    s0: ShapeImage | None = None,
    s_max: float = 1.3,
) -> list[np.ndarray]:
    """Per-level co-tangents of apply_generator_head w.r.t. the raw levels."""
    pyr = shape_pyramid(raw)
    if s0 is None:
        s0 = initial_sphere(pyr.n)
    combined = s0.data + scale * pyr.data
    g = size_constraint_vjp(combined, grad, s_max) * scale
    return shape_pyramid_vjp(g, len(raw))


def crop_background(b: Background, offset: tuple[int, int], n: int) -> np.ndarray:
    """Pure n x n slice of the background at (x, y) = (column, row) offset."""
    ox, oy = int(offset[0]), int(offset[1])
    side = b.side
    if not (0 <= ox <= side - n and 0 <= oy <= side - n):
        raise ValueError(f"crop offset {offset} out of range for side {side}, crop {n}")
    return b.data[:, oy : oy + n, ox : ox + n].copy()
