"""Exact backward pass of the full render, plus a finite-difference oracle.

Given an upstream co-tangent on the composed image, `backward` returns the
Jacobian-transpose product with respect to the shape image (through the
blend weights, barycentric coordinates, closest boundary points, projection,
and rotation), the texture (through bilinear sampling), and the background
(through the crop window).

All discrete selections made by the forward pass are held fixed at their
forward values: crisp winners, soft contributing sets and their closest-edge
classifications, the soft-alpha argmax, texel cells of the bilinear lookup,
and the color clamp masks. The composed image is piecewise smooth in the
inputs, and the returned gradient is the exact gradient of the active piece
(one-sided at the measure-zero switching configurations).

Accumulation runs in float64, in pixel-major order for crisp pixels and in
the soft pass's canonical pair order, so results are bit-identical across
runs and thread counts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .camera import project, project_vjp, rotation_matrix
from .raster import RenderInputs, RenderOutput, render_from_inputs, _clamp_unit
from .scene import SceneRepresentation, make_scene


@dataclass
class GradientSet:
    """Co-tangents w.r.t. the three scene components."""

    d_shape: np.ndarray
    d_texture: np.ndarray
    d_background: np.ndarray

    def dot(self, other: "GradientSet") -> float:
        return float(
            (self.d_shape * other.d_shape).sum()
            + (self.d_texture * other.d_texture).sum()
            + (self.d_background * other.d_background).sum()
        )


def _sample_texture_vjp(texture, uv, d_out):
    """VJP of raster.sample_texture: returns (d_texture, d_uv).

    Texel cells (floors) and the [0,1] clip masks are taken from the given
    uv values, i.e. from the forward pass.
    """
    n_t = texture.shape[1]
    u = uv[..., 0]
    v = uv[..., 1]
    pass_u = (u >= 0.0) & (u <= 1.0)
    pass_v = (v >= 0.0) & (v <= 1.0)
    ty = np.clip(u, 0.0, 1.0) * (n_t - 1)
    tx = np.clip(v, 0.0, 1.0) * (n_t - 1)
    y0 = np.minimum(np.floor(ty), n_t - 2).astype(np.int64)
    x0 = np.minimum(np.floor(tx), n_t - 2).astype(np.int64)
    fy = ty - y0
    fx = tx - x0

    g = np.moveaxis(d_out, -1, 0)  # (3, ...)
    lin00 = (y0 * n_t + x0).ravel()
    w00 = ((1 - fy) * (1 - fx)).ravel()
    w01 = ((1 - fy) * fx).ravel()
    w10 = (fy * (1 - fx)).ravel()
    w11 = (fy * fx).ravel()
    d_tex = np.zeros_like(texture)
    flat = d_tex.reshape(3, -1)
    for c in range(3):
        gc = g[c].ravel()
        flat[c] += np.bincount(lin00, weights=w00 * gc, minlength=n_t * n_t)
        flat[c] += np.bincount(lin00 + 1, weights=w01 * gc, minlength=n_t * n_t)
        flat[c] += np.bincount(lin00 + n_t, weights=w10 * gc, minlength=n_t * n_t)
        flat[c] += np.bincount(lin00 + n_t + 1, weights=w11 * gc, minlength=n_t * n_t)

    t00 = texture[:, y0, x0]
    t01 = texture[:, y0, x0 + 1]
    t10 = texture[:, y0 + 1, x0]
    t11 = texture[:, y0 + 1, x0 + 1]
    d_fy = (g * ((t10 - t00) * (1 - fx) + (t11 - t01) * fx)).sum(axis=0)
    d_fx = (g * ((t01 - t00) * (1 - fy) + (t11 - t10) * fy)).sum(axis=0)
    d_u = d_fy * (n_t - 1) * pass_u
    d_v = d_fx * (n_t - 1) * pass_v
    return d_tex, np.stack([d_u, d_v], axis=-1)


def _crisp_backward(verts_px, depths, tris, attrs, crisp, d_attr_img, d_verts_px, d_attrs):
    """Accumulate gradients for crisp-covered pixels (pixel-major order)."""
    side = crisp.alpha.shape[0]
    pix = np.flatnonzero(crisp.winner.reshape(-1) >= 0)
    if len(pix) == 0:
        return
    tri = crisp.winner.reshape(-1)[pix].astype(np.int64)
    px = (pix % side) + 0.5
    py = (pix // side) + 0.5
    tv = verts_px[tris[tri]]
    ax, ay = tv[:, 0, 0], tv[:, 0, 1]
    bx, by = tv[:, 1, 0], tv[:, 1, 1]
    cx, cy = tv[:, 2, 0], tv[:, 2, 1]
    w0 = (bx - px) * (cy - py) - (by - py) * (cx - px)
    w1 = (cx - px) * (ay - py) - (cy - py) * (ax - px)
    w2 = (ax - px) * (by - py) - (ay - py) * (bx - px)
    s = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    b0, b1, b2 = w0 / s, w1 / s, w2 / s

    av = attrs[tris[tri]]  # (K, 3, C)
    da = d_attr_img.reshape(-1, av.shape[2])[pix]
    ids = tris[tri]
    np.add.at(d_attrs, ids[:, 0], b0[:, None] * da)
    np.add.at(d_attrs, ids[:, 1], b1[:, None] * da)
    np.add.at(d_attrs, ids[:, 2], b2[:, None] * da)

    db0 = (da * av[:, 0]).sum(axis=1)
    db1 = (da * av[:, 1]).sum(axis=1)
    db2 = (da * av[:, 2]).sum(axis=1)
    dw0 = db0 / s
    dw1 = db1 / s
    dw2 = db2 / s
    ds = -(db0 * w0 + db1 * w1 + db2 * w2) / s**2

    ga_x = dw1 * (-(cy - py)) + dw2 * (by - py) + ds * (by - cy)
    ga_y = dw1 * (cx - px) + dw2 * (-(bx - px)) + ds * (cx - bx)
    gb_x = dw0 * (cy - py) + dw2 * (-(ay - py)) + ds * (cy - ay)
    gb_y = dw0 * (-(cx - px)) + dw2 * (ax - px) + ds * (ax - cx)
    gc_x = dw0 * (-(by - py)) + dw1 * (ay - py) + ds * (ay - by)
    gc_y = dw0 * (bx - px) + dw1 * (-(ax - px)) + ds * (bx - ax)

    np.add.at(d_verts_px, ids[:, 0], np.stack([ga_x, ga_y], axis=1))
    np.add.at(d_verts_px, ids[:, 1], np.stack([gb_x, gb_y], axis=1))
    np.add.at(d_verts_px, ids[:, 2], np.stack([gc_x, gc_y], axis=1))


def _soft_backward(
    verts_px, tris, attrs, soft, d_attr_img, d_alpha_img, b_extend, d_verts_px, d_attrs
):
    """Accumulate gradients for contributing soft pairs (canonical order)."""
    if len(soft.pair_pixel) == 0:
        return
    from .raster import CLAMP_INTERIOR, CLAMP_START, CLAMP_END

    side = soft.alpha.shape[0]
    n_channels = attrs.shape[1]
    pix = soft.pair_pixel
    tri = soft.pair_tri.astype(np.int64)
    edge = soft.pair_edge.astype(np.int64)
    clamp = soft.pair_clamp
    px = (pix % side) + 0.5
    py = (pix // side) + 0.5

    tri_v = tris[tri]
    e0 = np.take_along_axis(tri_v, edge[:, None], axis=1)[:, 0]
    e1 = np.take_along_axis(tri_v, ((edge + 1) % 3)[:, None], axis=1)[:, 0]
    va = verts_px[e0]
    vb = verts_px[e1]
    ux = px - va[:, 0]
    uy = py - va[:, 1]
    ex = vb[:, 0] - va[:, 0]
    ey = vb[:, 1] - va[:, 1]
    q = ex * ex + ey * ey
    interior = clamp == CLAMP_INTERIOR
    t = np.where(interior, (ux * ex + uy * ey) / q, np.where(clamp == CLAMP_END, 1.0, 0.0))
    rx = ux - t * ex
    ry = uy - t * ey
    d = np.sqrt(rx * rx + ry * ry)

    counts = soft.count.reshape(-1)[pix].astype(np.float64)
    d_mean = d_attr_img.reshape(-1, n_channels)[pix] / counts[:, None]

    # Attribute path: attr* = (1-t) A[e0] + t A[e1].
    np.add.at(d_attrs, e0, (1.0 - t)[:, None] * d_mean)
    np.add.at(d_attrs, e1, t[:, None] * d_mean)
    dt = (d_mean * (attrs[e1] - attrs[e0])).sum(axis=1)

    # Alpha path: only the per-pixel argmax pair receives -d_alpha / B.
    dd = np.zeros(len(pix))
    amax = soft.argmax_pair.reshape(-1)
    sel = np.flatnonzero(amax >= 0)
    dd[amax[sel]] = -d_alpha_img.reshape(-1)[sel] / b_extend

    rhat_x = rx / d
    rhat_y = ry / d
    re = rhat_x * ex + rhat_y * ey

    # t gradients (interior pairs only; clamped t is constant).
    gat_x = np.where(interior, (-ex - ux) / q + 2.0 * t * ex / q, 0.0)
    gat_y = np.where(interior, (-ey - uy) / q + 2.0 * t * ey / q, 0.0)
    gbt_x = np.where(interior, ux / q - 2.0 * t * ex / q, 0.0)
    gbt_y = np.where(interior, uy / q - 2.0 * t * ey / q, 0.0)

    # d gradients: interior uses the edge-parameter chain, clamped cases
    # reduce to the point-to-vertex direction.
    start = clamp == CLAMP_START
    end = clamp == CLAMP_END
    gad_x = np.where(interior, (t - 1.0) * rhat_x - re * gat_x, np.where(start, -rhat_x, 0.0))
    gad_y = np.where(interior, (t - 1.0) * rhat_y - re * gat_y, np.where(start, -rhat_y, 0.0))
    gbd_x = np.where(interior, -t * rhat_x - re * gbt_x, np.where(end, -rhat_x, 0.0))
    gbd_y = np.where(interior, -t * rhat_y - re * gbt_y, np.where(end, -rhat_y, 0.0))

    ga = np.stack([dt * gat_x + dd * gad_x, dt * gat_y + dd * gad_y], axis=1)
    gb = np.stack([dt * gbt_x + dd * gbd_x, dt * gbt_y + dd * gbd_y], axis=1)
    np.add.at(d_verts_px, e0, ga)
    np.add.at(d_verts_px, e1, gb)


def backward(
    output: RenderOutput,
    upstream: np.ndarray,
    inputs: RenderInputs,
    return_internals: bool = False,
):
    """Jacobian-transpose product of the composed image.

    `upstream` is an (N, N, 3) co-tangent on output.color. Returns a
    GradientSet; with return_internals=True also returns a dict holding the
    per-vertex pixel-space and world-space gradients (before the rotation
    adjoint), used by tests.
    """
    scene = inputs.scene
    topo = inputs.topology
    side = inputs.intrinsics.image_side
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != output.color.shape:
        raise ValueError(f"upstream shape {upstream.shape} != image shape {output.color.shape}")

    tex, _ = _clamp_unit(scene.texture.data)
    rot = rotation_matrix(inputs.pose)
    world = (rot @ scene.shape.data.reshape(3, -1)).T
    verts_px, _ = project(world, inputs.intrinsics)
    tris = topo.triangles
    attrs = output.vertex_attrs

    alpha_s = output.soft.alpha[..., None]
    alpha_c = output.crisp.alpha[..., None]
    if output.uv_mode:
        a_s_color = output.color_soft
        a_c_color = output.color_crisp
    else:
        a_s_color = output.soft.attr
        a_c_color = output.crisp.attr
    bcg = output.background_crop

    # compose: a = alpha_s*a_s + (1-alpha_s)*(alpha_c*a_c + (1-alpha_c)*bcg)
    d_as_color = upstream * alpha_s
    d_ac_color = upstream * (1.0 - alpha_s) * alpha_c
    d_crop = upstream * (1.0 - alpha_s) * (1.0 - alpha_c)
    d_alpha_s = (upstream * (a_s_color - (alpha_c * a_c_color + (1.0 - alpha_c) * bcg))).sum(-1)

    n_verts = len(verts_px)
    d_verts_px = np.zeros((n_verts, 2))
    d_attrs = np.zeros((n_verts, attrs.shape[1]))
    d_texture = np.zeros_like(scene.texture.data)

    if output.uv_mode:
        # Color buffers are bilinear texture lookups at the rasterized UV
        # maps; the crisp/soft coverage masks are constants.
        d_tex_c, d_uv_c = _sample_texture_vjp(tex, output.uv_crisp, d_ac_color)
        d_tex_s, d_uv_s = _sample_texture_vjp(tex, output.uv_soft, d_as_color)
        d_texture += d_tex_c + d_tex_s
        d_crisp_attr = d_uv_c
        d_soft_attr = d_uv_s
    else:
        d_crisp_attr = d_ac_color
        d_soft_attr = d_as_color

    _crisp_backward(verts_px, None, tris, attrs, output.crisp, d_crisp_attr, d_verts_px, d_attrs)
    _soft_backward(
        verts_px, tris, attrs, output.soft, d_soft_attr, d_alpha_s,
        inputs.b_extend, d_verts_px, d_attrs,
    )

    if output.uv_mode:
        pass  # vertex attrs are the fixed UV coordinates; d_attrs is discarded
    else:
        d_tex_v, _ = _sample_texture_vjp(tex, topo.uv, d_attrs)
        d_texture += d_tex_v
    d_texture *= output.tex_pass_mask

    d_world = project_vjp(world, d_verts_px, inputs.intrinsics)
    d_shape = (rot.T @ d_world.T).reshape(scene.shape.data.shape)

    d_background = np.zeros_like(scene.background.data)
    ox, oy = int(inputs.crop_offset[0]), int(inputs.crop_offset[1])
    d_background[:, oy : oy + side, ox : ox + side] = np.moveaxis(d_crop, -1, 0)
    d_background *= output.bcg_pass_mask

    grads = GradientSet(d_shape=d_shape, d_texture=d_texture, d_background=d_background)
    if return_internals:
        return grads, {"d_verts_px": d_verts_px, "d_world": d_world, "d_attrs": d_attrs}
    return grads


def selection_fingerprint(output: RenderOutput) -> str:
    """Digest of every discrete selection made by a forward pass.

    Two forward passes made the same selections iff their fingerprints are
    equal; the finite-difference oracle uses this to reject trials that
    straddle a discontinuity.
    """
    h = hashlib.sha256()
    h.update(output.crisp.winner.tobytes())
    h.update(output.soft.pair_pixel.tobytes())
    h.update(output.soft.pair_tri.tobytes())
    h.update(output.soft.pair_edge.tobytes())
    h.update(output.soft.pair_clamp.tobytes())
    h.update(output.soft.argmax_pair.tobytes())
    h.update(output.degenerate.tobytes())
    h.update(output.tex_pass_mask.tobytes())
    h.update(output.bcg_pass_mask.tobytes())
    if output.uv_mode:
        n_t = output.tex_pass_mask.shape[1]
        for uv in (output.uv_crisp, output.uv_soft):
            ty = np.clip(uv[..., 0], 0.0, 1.0) * (n_t - 1)
            tx = np.clip(uv[..., 1], 0.0, 1.0) * (n_t - 1)
            h.update(np.minimum(np.floor(ty), n_t - 2).astype(np.int64).tobytes())
            h.update(np.minimum(np.floor(tx), n_t - 2).astype(np.int64).tobytes())
            h.update(((uv >= 0.0) & (uv <= 1.0)).tobytes())
    return h.hexdigest()


def _perturbed_inputs(inputs: RenderInputs, direction: GradientSet, step: float) -> RenderInputs:
    scene = inputs.scene
    moved = make_scene(
        scene.shape.data + step * direction.d_shape,
        scene.texture.data + step * direction.d_texture,
        scene.background.data + step * direction.d_background,
    )
    return RenderInputs(
        moved, inputs.topology, inputs.pose, inputs.crop_offset, inputs.intrinsics,
        inputs.b_extend, inputs.lambda_slope, inputs.uv_mode, inputs.literal_blend,
    )


def finite_difference_oracle(
    inputs: RenderInputs,
    direction: GradientSet,
    h: float,
    functional,
) -> tuple[float, bool]:
    """Central difference of a scalar functional of the composed image.

    Returns (estimate, selection_changed): the directional-derivative
    estimate (f(x + h*dir) - f(x - h*dir)) / (2h) and whether any discrete
    selection differed between the two evaluations.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    out_plus = render_from_inputs(_perturbed_inputs(inputs, direction, +h))
    out_minus = render_from_inputs(_perturbed_inputs(inputs, direction, -h))
    estimate = (functional(out_plus.color) - functional(out_minus.color)) / (2.0 * h)
    changed = selection_fingerprint(out_plus) != selection_fingerprint(out_minus)
    return float(estimate), changed


def _zero_direction_like(scene: SceneRepresentation) -> GradientSet:
    return GradientSet(
        d_shape=np.zeros_like(scene.shape.data),
        d_texture=np.zeros_like(scene.texture.data),
        d_background=np.zeros_like(scene.background.data),
    )


def random_gradcheck_scene(rng: np.random.Generator, n: int) -> SceneRepresentation:
    """A smooth random scene: perturbed sphere, random texture and background."""
    from .scene import gaussian_blur, initial_sphere, size_constraint, ShapeImage

    bump = gaussian_blur(rng.normal(size=(3, n, n)), sigma=2.0)
    shape = size_constraint(ShapeImage(initial_sphere(n, 0.5).data + 0.4 * bump, n), 1.3)
    texture = rng.uniform(0.05, 0.95, size=(3, 2 * n, 2 * n))
    background = rng.uniform(0.05, 0.95, size=(3, 2 * n, 2 * n))
    return make_scene(shape.data, texture, background)


@dataclass
class GradcheckReport:
    lines: list[str]
    accepted: int
    passed: int
    rejected: int
    max_rel_err: float

    @property
    def ok(self) -> bool:
        return self.passed == self.accepted

    def summary(self) -> str:
        return f"pass {self.passed}/{self.accepted} max_rel_err {self.max_rel_err:.3e}"


def run_gradcheck(
    seed: int = 0,
    trials: int = 200,
    res: int = 32,
    eps_vertex: float = 1e-3,
    eps_color: float = 1e-4,
    tol: float = 1e-4,
) -> GradcheckReport:
    """Compare analytic directional derivatives against central differences.

    Trials cycle through shape / texture / background probes; each probe is
    a random canonical coordinate direction (one vertex coordinate of a
    referenced vertex, or one texel channel), so the finite-difference
    window moves a single scene entry and the selection-change rejection
    stays local. eps_vertex is the vertex step measured in projected pixels
    (converted to world units through the camera scale at the origin, where
    the object lives); eps_color is the color step in color units.

    Trials whose two evaluations made different discrete selections are
    reported but excluded from pass/fail accounting.
    """
    from .camera import CameraIntrinsics, ViewPose
    from .scene import build_topology

    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if eps_vertex <= 0 or eps_color <= 0:
        raise ValueError("finite-difference steps must be positive")
    rng = np.random.default_rng(seed)
    topo = build_topology(res)
    intr = CameraIntrinsics(image_side=res)
    referenced = np.unique(topo.triangles)
    # px per world unit for a point near the origin
    px_per_world = intr.pixel_scale / intr.distance
    components = ("shape", "texture", "background")

    lines: list[str] = []
    accepted = passed = rejected = 0
    max_rel_err = 0.0
    for k in range(trials):
        scene = random_gradcheck_scene(rng, res)
        pose = ViewPose(
            yaw=rng.uniform(-np.pi / 4, np.pi / 4),
            pitch=rng.uniform(-np.pi / 12, np.pi / 12),
        )
        crop = (int(rng.integers(0, res + 1)), int(rng.integers(0, res + 1)))
        inputs = RenderInputs(scene, topo, pose, crop, intr)
        upstream = rng.normal(size=(res, res, 3))

        component = components[k % 3]
        direction = _zero_direction_like(scene)
        if component == "shape":
            vid = int(rng.choice(referenced))
            axis = int(rng.integers(0, 3))
            direction.d_shape[axis, vid // res, vid % res] = 1.0
            h = eps_vertex / px_per_world
        else:
            target = getattr(direction, f"d_{component}")
            c = int(rng.integers(0, 3))
            ty = int(rng.integers(0, target.shape[1]))
            tx = int(rng.integers(0, target.shape[2]))
            target[c, ty, tx] = 1.0
            h = eps_color

        output = render_from_inputs(inputs)
        grads = backward(output, upstream, inputs)
        analytic = grads.dot(direction)
        fd, changed = finite_difference_oracle(
            inputs, direction, h, functional=lambda img: float((img * upstream).sum())
        )
        rel_err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-12)
        lines.append(f"trial {k} rel_err {rel_err:.3e} selection_change {int(changed)}")
        if changed:
            rejected += 1
            continue
        accepted += 1
        max_rel_err = max(max_rel_err, rel_err)
        if rel_err <= tol:
            passed += 1
    return GradcheckReport(lines, accepted, passed, rejected, max_rel_err)
