"""Forward rendering: crisp z-buffer pass, soft triangle extensions, compositing.

The crisp pass is a conventional rasterizer: per pixel, the triangle with the
smallest barycentric-interpolated depth wins, attributes are interpolated with
screen-space barycentric coordinates, and coverage is binary. The soft pass
renders a band of width `b_extend` pixels around every triangle: a triangle
contributes to a pixel at distance 0 < d < B from it when its extension depth
(depth at the closest boundary point plus `lambda_slope * d`) beats the crisp
winner; the soft attribute is the unweighted mean over contributors and the
soft alpha is max(1 - d/B). The two passes are blended as a nested convex
combination with the cropped background, so per pixel the three blend weights
form an exact partition of unity.

Implementation notes. All per-(triangle, pixel) work runs over flat candidate
pair arrays built from per-triangle bounding boxes expanded by the band width.
Reductions use stable lexicographic sorts with ties broken by lowest triangle
index, and grouped `reduceat` sums, so outputs are bit-identical across runs
and independent of any internal chunking. Everything is float64.

Pixel (row r, column c) has its center at continuous coordinates
(c + 0.5, r + 0.5); images are indexed [row, col, channel].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, ViewPose, project, rotate_scene
from .scene import Background, MeshTopology, SceneRepresentation, crop_background

Z_FAR = 1.0e6

# Projected triangles with |signed area| below this (px^2) are skipped in
# both passes; barycentric coordinates are undefined on them.
DEGENERATE_AREA_EPS = 1e-12

CLAMP_INTERIOR = 0
CLAMP_START = 1
CLAMP_END = 2


class DegenerateTriangleError(ValueError):
    """Raised by point_triangle_distance for near-zero-area triangles."""


@dataclass
class CrispBuffers:
    """Hard z-buffer pass results; winner is -1 where nothing is hit."""

    depth: np.ndarray
    attr: np.ndarray
    alpha: np.ndarray
    winner: np.ndarray


@dataclass
class SoftBuffers:
    """Triangle-extension pass results plus the discrete selections.

    pair_* arrays list the contributing (pixel, triangle) pairs in canonical
    pixel-major order (ties in triangle order); they are the selections the
    backward pass holds fixed. argmax_pair indexes into them per pixel (-1
    where the contributing set is empty).
    """

    alpha: np.ndarray
    attr: np.ndarray
    count: np.ndarray
    pair_pixel: np.ndarray
    pair_tri: np.ndarray
    pair_edge: np.ndarray
    pair_clamp: np.ndarray
    argmax_pair: np.ndarray


@dataclass
class RenderInputs:
    """Everything the full scene render consumes; reused by the backward pass."""

    scene: SceneRepresentation
    topology: MeshTopology
    pose: ViewPose
    crop_offset: tuple[int, int]
    intrinsics: CameraIntrinsics
    b_extend: float = 2.0
    lambda_slope: float = 1.0
    uv_mode: bool = True
    literal_blend: bool = False


@dataclass
class RenderOutput:
    """Composed image plus every buffer the backward pass needs."""

    color: np.ndarray
    crisp: CrispBuffers
    soft: SoftBuffers
    uv_crisp: np.ndarray | None
    uv_soft: np.ndarray | None
    color_crisp: np.ndarray | None
    color_soft: np.ndarray | None
    background_crop: np.ndarray
    tex_pass_mask: np.ndarray
    bcg_pass_mask: np.ndarray
    degenerate: np.ndarray
    vertex_attrs: np.ndarray
    image_side: int
    uv_mode: bool


def point_triangle_distance(p, tri) -> tuple[float, np.ndarray, np.ndarray]:
    """Distance from a 2D point to a triangle (interior included).

    Returns (d, p_star, bary): the minimum Euclidean distance, the closest
    point in the triangle, and the barycentric coordinates of that closest
    point. Raises DegenerateTriangleError when the triangle's area is below
    DEGENERATE_AREA_EPS so callers can skip it.
    """
    p = np.asarray(p, dtype=np.float64)
    tri = np.asarray(tri, dtype=np.float64)
    a, b, c = tri[0], tri[1], tri[2]
    s = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if abs(s) / 2.0 < DEGENERATE_AREA_EPS:
        raise DegenerateTriangleError("projected triangle area below threshold")
    w0 = (b[0] - p[0]) * (c[1] - p[1]) - (b[1] - p[1]) * (c[0] - p[0])
    w1 = (c[0] - p[0]) * (a[1] - p[1]) - (c[1] - p[1]) * (a[0] - p[0])
    w2 = (a[0] - p[0]) * (b[1] - p[1]) - (a[1] - p[1]) * (b[0] - p[0])
    sgn = np.sign(s)
    if w0 * sgn >= 0 and w1 * sgn >= 0 and w2 * sgn >= 0:
        return 0.0, p.copy(), np.array([w0 / s, w1 / s, w2 / s])
    best = None
    for edge, (va, vb) in enumerate(((a, b), (b, c), (c, a))):
        e = vb - va
        t = float(np.dot(p - va, e) / np.dot(e, e))
        t = min(max(t, 0.0), 1.0)
        q = va + t * e
        d2 = float(np.dot(p - q, p - q))
        if best is None or d2 < best[0]:
            best = (d2, q, edge, t)
    d2, q, edge, t = best
    bary = np.zeros(3)
    bary[edge] = 1.0 - t
    bary[(edge + 1) % 3] = t
    return float(np.sqrt(d2)), q, bary


def _candidate_pairs(verts_px, tris, image_side, margin):
    """Enumerate (local triangle, pixel row, pixel col) pairs whose pixel
    center may lie within `margin` px of the triangle (conservative)."""
    tv = verts_px[tris]
    lo = tv.min(axis=1) - margin
    hi = tv.max(axis=1) + margin
    c_lo = np.maximum(np.ceil(lo[:, 0] - 0.5).astype(np.int64), 0)
    c_hi = np.minimum(np.floor(hi[:, 0] - 0.5).astype(np.int64), image_side - 1)
    r_lo = np.maximum(np.ceil(lo[:, 1] - 0.5).astype(np.int64), 0)
    r_hi = np.minimum(np.floor(hi[:, 1] - 0.5).astype(np.int64), image_side - 1)
    w = c_hi - c_lo + 1
    h = r_hi - r_lo + 1
    valid = (w > 0) & (h > 0)
    idx = np.flatnonzero(valid)
    if len(idx) == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    counts = w[idx] * h[idx]
    offsets = np.concatenate(([0], np.cumsum(counts)))
    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(offsets[-1]) - offsets[owner]
    ww = w[idx][owner]
    pr = r_lo[idx][owner] + local // ww
    pc = c_lo[idx][owner] + local % ww
    return idx[owner], pr, pc


def _pair_inside(verts_px, tris, pair_tri, px, py, depths):
    """Barycentric inside test and interpolated depth for candidate pairs.

    The arithmetic deliberately matches the brute-force reference expression
    for expression (per pixel and triangle) so the two agree bitwise.
    """
    tv = verts_px[tris[pair_tri]]
    ax, ay = tv[:, 0, 0], tv[:, 0, 1]
    bx, by = tv[:, 1, 0], tv[:, 1, 1]
    cx, cy = tv[:, 2, 0], tv[:, 2, 1]
    w0 = (bx - px) * (cy - py) - (by - py) * (cx - px)
    w1 = (cx - px) * (ay - py) - (cy - py) * (ax - px)
    w2 = (ax - px) * (by - py) - (ay - py) * (bx - px)
    s = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    sgn = np.sign(s)
    inside = (w0 * sgn >= 0) & (w1 * sgn >= 0) & (w2 * sgn >= 0)
    b0, b1, b2 = w0 / s, w1 / s, w2 / s
    zv = depths[tris[pair_tri]]
    z = b0 * zv[:, 0] + b1 * zv[:, 1] + b2 * zv[:, 2]
    return inside, (b0, b1, b2), z


def _pair_band(verts_px, tris, pair_tri, px, py):
    """Closest-edge classification for pairs outside their triangle.

    Returns per-pair distance d, edge index (argmin over the three edges,
    lowest index wins ties), clamped edge parameter t, and clamp code.
    """
    tv = verts_px[tris[pair_tri]]
    n_pairs = len(pair_tri)
    d2 = np.empty((n_pairs, 3))
    t_all = np.empty((n_pairs, 3))
    for edge in range(3):
        va = tv[:, edge]
        vb = tv[:, (edge + 1) % 3]
        ex = vb[:, 0] - va[:, 0]
        ey = vb[:, 1] - va[:, 1]
        ux = px - va[:, 0]
        uy = py - va[:, 1]
        q = ex * ex + ey * ey
        t_raw = (ux * ex + uy * ey) / q
        t = np.clip(t_raw, 0.0, 1.0)
        dx = ux - t * ex
        dy = uy - t * ey
        d2[:, edge] = dx * dx + dy * dy
        t_all[:, edge] = t_raw
    edge_id = np.argmin(d2, axis=1)
    rows = np.arange(n_pairs)
    t_raw = t_all[rows, edge_id]
    t = np.clip(t_raw, 0.0, 1.0)
    clamp = np.full(n_pairs, CLAMP_INTERIOR, dtype=np.int8)
    clamp[t_raw <= 0.0] = CLAMP_START
    clamp[t_raw >= 1.0] = CLAMP_END
    d = np.sqrt(d2[rows, edge_id])
    return d, edge_id.astype(np.int8), t, clamp


def _first_of_group(sorted_keys):
    firsts = np.ones(len(sorted_keys), dtype=bool)
    if len(sorted_keys):
        firsts[1:] = sorted_keys[1:] != sorted_keys[:-1]
    return firsts


def _empty_soft(image_side, n_channels):
    return SoftBuffers(
        alpha=np.zeros((image_side, image_side)),
        attr=np.zeros((image_side, image_side, n_channels)),
        count=np.zeros((image_side, image_side), dtype=np.int32),
        pair_pixel=np.empty(0, dtype=np.int64),
        pair_tri=np.empty(0, dtype=np.int32),
        pair_edge=np.empty(0, dtype=np.int8),
        pair_clamp=np.empty(0, dtype=np.int8),
        argmax_pair=np.full((image_side, image_side), -1, dtype=np.int64),
    )


def _degenerate_mask(verts_px, tris):
    tv = verts_px[tris]
    area2 = (tv[:, 1, 0] - tv[:, 0, 0]) * (tv[:, 2, 1] - tv[:, 0, 1]) - (
        tv[:, 1, 1] - tv[:, 0, 1]
    ) * (tv[:, 2, 0] - tv[:, 0, 0])
    return np.abs(area2) / 2.0 < DEGENERATE_AREA_EPS


def _crisp_pass(verts_px, depths, tris, attrs, image_side, live):
    n_channels = attrs.shape[1]
    n_pix = image_side * image_side
    crisp = CrispBuffers(
        depth=np.full((image_side, image_side), Z_FAR),
        attr=np.zeros((image_side, image_side, n_channels)),
        alpha=np.zeros((image_side, image_side)),
        winner=np.full((image_side, image_side), -1, dtype=np.int32),
    )
    if len(live) == 0:
        return crisp
    owner, pr, pc = _candidate_pairs(verts_px, tris[live], image_side, margin=0.0)
    if len(owner) == 0:
        return crisp
    pair_tri = live[owner]
    px = pc + 0.5
    py = pr + 0.5
    pix_lin = pr * image_side + pc
    inside, (b0, b1, b2), z_in = _pair_inside(verts_px, tris, pair_tri, px, py, depths)
    ci = np.flatnonzero(inside)
    if len(ci) == 0:
        return crisp
    # Winner: smallest interpolated depth, ties to lowest triangle id.
    order = np.lexsort((pair_tri[ci], z_in[ci], pix_lin[ci]))
    rows = ci[order]
    win = rows[_first_of_group(pix_lin[rows])]
    wpix = pix_lin[win]
    hit = z_in[win] < Z_FAR
    crisp.depth.reshape(-1)[wpix] = np.where(hit, z_in[win], Z_FAR)
    crisp.winner.reshape(-1)[wpix] = np.where(hit, pair_tri[win], -1).astype(np.int32)
    crisp.alpha.reshape(-1)[wpix] = hit.astype(np.float64)
    av = attrs[tris[pair_tri[win]]]
    interp = b0[win, None] * av[:, 0] + b1[win, None] * av[:, 1] + b2[win, None] * av[:, 2]
    crisp.attr.reshape(n_pix, n_channels)[wpix] = np.where(hit[:, None], interp, 0.0)
    return crisp


def _soft_pass(verts_px, depths, tris, attrs, image_side, crisp_depth, live, b_extend, lambda_slope):
    n_channels = attrs.shape[1]
    n_pix = image_side * image_side
    soft = _empty_soft(image_side, n_channels)
    if len(live) == 0:
        return soft
    owner, pr, pc = _candidate_pairs(verts_px, tris[live], image_side, margin=b_extend)
    if len(owner) == 0:
        return soft
    pair_tri = live[owner]
    px = pc + 0.5
    py = pr + 0.5
    pix_lin = pr * image_side + pc

    inside, _, _ = _pair_inside(verts_px, tris, pair_tri, px, py, depths)
    bi = np.flatnonzero(~inside)
    if len(bi) == 0:
        return soft
    d, edge_id, t, clamp = _pair_band(verts_px, tris, pair_tri[bi], px[bi], py[bi])
    in_band = (d > 0.0) & (d < b_extend)
    bi = bi[in_band]
    if len(bi) == 0:
        return soft
    d, edge_id, t, clamp = d[in_band], edge_id[in_band], t[in_band], clamp[in_band]

    tri_b = tris[pair_tri[bi]]
    e0 = np.take_along_axis(tri_b, edge_id[:, None].astype(np.int64), axis=1)[:, 0]
    e1 = np.take_along_axis(tri_b, ((edge_id + 1) % 3)[:, None].astype(np.int64), axis=1)[:, 0]
    z_star = (1.0 - t) * depths[e0] + t * depths[e1]
    z_soft = z_star + lambda_slope * d
    contrib = z_soft < crisp_depth.reshape(-1)[pix_lin[bi]]
    bi = bi[contrib]
    if len(bi) == 0:
        return soft
    d, edge_id, t, clamp = d[contrib], edge_id[contrib], t[contrib], clamp[contrib]
    e0, e1 = e0[contrib], e1[contrib]

    # Canonical pixel-major order (triangle id breaks ties) fixes the
    # accumulation order for both the forward means and backward scatters.
    order = np.lexsort((pair_tri[bi], pix_lin[bi]))
    bi = bi[order]
    d, edge_id, t, clamp = d[order], edge_id[order], t[order], clamp[order]
    e0, e1 = e0[order], e1[order]
    cpix = pix_lin[bi]
    ctri = pair_tri[bi].astype(np.int32)

    soft.pair_pixel = cpix
    soft.pair_tri = ctri
    soft.pair_edge = edge_id
    soft.pair_clamp = clamp

    counts = np.bincount(cpix, minlength=n_pix)
    soft.count = counts.reshape(image_side, image_side).astype(np.int32)

    attr_star = (1.0 - t)[:, None] * attrs[e0] + t[:, None] * attrs[e1]
    starts = np.flatnonzero(_first_of_group(cpix))
    sums = np.add.reduceat(attr_star, starts, axis=0)
    group_pix = cpix[starts]
    soft.attr.reshape(n_pix, n_channels)[group_pix] = sums / counts[group_pix][:, None]

    # alpha = max over contributors of 1 - d/B  <=>  min d; ties to lowest id.
    amax_order = np.lexsort((ctri, d, cpix))
    amax_rows = amax_order[_first_of_group(cpix[amax_order])]
    soft.alpha.reshape(-1)[cpix[amax_rows]] = 1.0 - d[amax_rows] / b_extend
    soft.argmax_pair.reshape(-1)[cpix[amax_rows]] = amax_rows
    return soft


def rasterize(verts_px, depths, tris, attrs, image_side, b_extend=2.0, lambda_slope=1.0):
    """Run both passes over a projected mesh.

    verts_px: (V, 2) pixel coordinates; depths: (V,) camera depths > 0;
    tris: (M, 3) vertex indices; attrs: (V, C). Returns (CrispBuffers,
    SoftBuffers, degenerate_mask).
    """
    verts_px = np.asarray(verts_px, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    attrs = np.asarray(attrs, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.int32)
    if b_extend <= 0:
        raise ValueError(f"extension width must be positive, got {b_extend}")
    if lambda_slope <= 0:
        raise ValueError(f"lambda_slope must be positive, got {lambda_slope}")
    degenerate = _degenerate_mask(verts_px, tris) if len(tris) else np.zeros(0, dtype=bool)
    live = np.flatnonzero(~degenerate)
    crisp = _crisp_pass(verts_px, depths, tris, attrs, image_side, live)
    soft = _soft_pass(
        verts_px, depths, tris, attrs, image_side, crisp.depth, live, b_extend, lambda_slope
    )
    return crisp, soft, degenerate


def render_crisp(verts_px, depths, tris, attrs, image_side):
    """Crisp pass only (classic z-buffer over the projected mesh)."""
    verts_px = np.asarray(verts_px, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    attrs = np.asarray(attrs, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.int32)
    degenerate = _degenerate_mask(verts_px, tris) if len(tris) else np.zeros(0, dtype=bool)
    return _crisp_pass(verts_px, depths, tris, attrs, image_side, np.flatnonzero(~degenerate))


def render_soft(verts_px, depths, tris, attrs, image_side, crisp, b_extend=2.0, lambda_slope=1.0):
    """Soft pass of the triangle extensions against an existing crisp pass."""
    if b_extend <= 0:
        raise ValueError(f"extension width must be positive, got {b_extend}")
    if lambda_slope <= 0:
        raise ValueError(f"lambda_slope must be positive, got {lambda_slope}")
    verts_px = np.asarray(verts_px, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    attrs = np.asarray(attrs, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.int32)
    degenerate = _degenerate_mask(verts_px, tris) if len(tris) else np.zeros(0, dtype=bool)
    return _soft_pass(
        verts_px, depths, tris, attrs, image_side, crisp.depth,
        np.flatnonzero(~degenerate), b_extend, lambda_slope,
    )


def compose(crisp: CrispBuffers, soft: SoftBuffers, bcg, literal_blend=False):
    """Blend soft over crisp over background.

    Nested convex form: a = alpha_s*a_s + (1-alpha_s)*(alpha_c*a_c +
    (1-alpha_c)*bcg); the three weights are nonnegative and sum to 1. The
    literal form alpha_s*a_s + (1-alpha_s)*alpha_c*a_c + (1-alpha_c)*bcg is
    kept behind a debug flag for comparison; it double-counts background
    where alpha_c = 0 and alpha_s > 0.
    """
    a_s = soft.alpha[..., None]
    a_c = crisp.alpha[..., None]
    if literal_blend:
        return a_s * soft.attr + (1.0 - a_s) * a_c * crisp.attr + (1.0 - a_c) * bcg
    return a_s * soft.attr + (1.0 - a_s) * (a_c * crisp.attr + (1.0 - a_c) * bcg)


def sample_texture(texture, uv):
    """Bilinearly sample a (3, Nt, Nt) texture at (..., 2) UV coordinates.

    Clamp-to-edge addressing: u indexes texture rows as u*(Nt-1), v indexes
    columns as v*(Nt-1). Returns (..., 3) colors.
    """
    n_t = texture.shape[1]
    ty = np.clip(uv[..., 0], 0.0, 1.0) * (n_t - 1)
    tx = np.clip(uv[..., 1], 0.0, 1.0) * (n_t - 1)
    y0 = np.minimum(np.floor(ty), n_t - 2).astype(np.int64)
    x0 = np.minimum(np.floor(tx), n_t - 2).astype(np.int64)
    fy = ty - y0
    fx = tx - x0
    t00 = texture[:, y0, x0]
    t01 = texture[:, y0, x0 + 1]
    t10 = texture[:, y0 + 1, x0]
    t11 = texture[:, y0 + 1, x0 + 1]
    val = (1 - fy) * (1 - fx) * t00 + (1 - fy) * fx * t01 + fy * (1 - fx) * t10 + fy * fx * t11
    return np.moveaxis(val, 0, -1)


def _clamp_unit(data):
    """Clamp colors to [0,1]; the mask marks entries whose gradient passes."""
    mask = (data >= 0.0) & (data <= 1.0)
    return np.clip(data, 0.0, 1.0), mask


def render_from_inputs(inputs: RenderInputs) -> RenderOutput:
    """Full scene render; retains every buffer the backward pass needs."""
    scene = inputs.scene
    topo = inputs.topology
    side = inputs.intrinsics.image_side

    tex, tex_mask = _clamp_unit(scene.texture.data)
    bcg, bcg_mask = _clamp_unit(scene.background.data)

    rotated = rotate_scene(scene.shape, inputs.pose)
    verts = rotated.data.reshape(3, -1).T
    verts_px, depths = project(verts, inputs.intrinsics)

    if inputs.uv_mode:
        attrs = topo.uv
    else:
        attrs = sample_texture(tex, topo.uv)

    crisp, soft, degenerate = rasterize(
        verts_px,
        depths,
        topo.triangles,
        attrs,
        side,
        b_extend=inputs.b_extend,
        lambda_slope=inputs.lambda_slope,
    )

    crop = crop_background(Background(bcg), inputs.crop_offset, side)
    crop_img = np.moveaxis(crop, 0, -1)

    if inputs.uv_mode:
        uv_crisp = crisp.attr
        uv_soft = soft.attr
        color_crisp = sample_texture(tex, uv_crisp) * crisp.alpha[..., None]
        color_soft = sample_texture(tex, uv_soft) * (soft.count > 0)[..., None]
        crisp_rgb = CrispBuffers(crisp.depth, color_crisp, crisp.alpha, crisp.winner)
        soft_rgb = SoftBuffers(
            soft.alpha, color_soft, soft.count,
            soft.pair_pixel, soft.pair_tri, soft.pair_edge, soft.pair_clamp, soft.argmax_pair,
        )
        color = compose(crisp_rgb, soft_rgb, crop_img, literal_blend=inputs.literal_blend)
    else:
        uv_crisp = uv_soft = color_crisp = color_soft = None
        color = compose(crisp, soft, crop_img, literal_blend=inputs.literal_blend)

    return RenderOutput(
        color=color,
        crisp=crisp,
        soft=soft,
        uv_crisp=uv_crisp,
        uv_soft=uv_soft,
        color_crisp=color_crisp,
        color_soft=color_soft,
        background_crop=crop_img,
        tex_pass_mask=tex_mask,
        bcg_pass_mask=bcg_mask,
        degenerate=degenerate,
        vertex_attrs=attrs,
        image_side=side,
        uv_mode=inputs.uv_mode,
    )


def render(
    scene: SceneRepresentation,
    topology: MeshTopology,
    pose: ViewPose,
    crop_offset: tuple[int, int] = (0, 0),
    intrinsics: CameraIntrinsics | None = None,
    b_extend: float = 2.0,
    lambda_slope: float = 1.0,
    uv_mode: bool = True,
    literal_blend: bool = False,
) -> RenderOutput:
    """Convenience wrapper building RenderInputs; see render_from_inputs."""
    if intrinsics is None:
        intrinsics = CameraIntrinsics(image_side=scene.n)
    inputs = RenderInputs(
        scene, topology, pose, crop_offset, intrinsics, b_extend, lambda_slope, uv_mode, literal_blend
    )
    return render_from_inputs(inputs)
