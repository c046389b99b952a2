"""softmesh: a differentiable triangle-mesh renderer with exact boundary
gradients, and a desk-scale unsupervised 3D shape learning pipeline on top.

The renderer blends a conventional crisp z-buffer pass with a soft pass that
extends triangles by a fixed pixel-space band, making the composed image
continuous in the vertex coordinates; the backward pass returns exact
gradients of the active smooth piece w.r.t. shape, texture and background.
"""

from .camera import CameraIntrinsics, DegenerateInputError, ViewPose, project, rotate_scene
from .grad import (
    GradientSet,
    backward,
    finite_difference_oracle,
    run_gradcheck,
    selection_fingerprint,
)
from .raster import (
    CrispBuffers,
    DegenerateTriangleError,
    RenderInputs,
    RenderOutput,
    SoftBuffers,
    Z_FAR,
    compose,
    point_triangle_distance,
    render,
    render_crisp,
    render_from_inputs,
    render_soft,
    sample_texture,
)
from .scene import (
    Background,
    MeshTopology,
    SceneRepresentation,
    ShapeImage,
    TextureImage,
    apply_generator_head,
    build_topology,
    crop_background,
    initial_sphere,
    make_scene,
    shape_pyramid,
    size_constraint,
)

__version__ = "0.1.0"

__all__ = [
    "Background",
    "CameraIntrinsics",
    "CrispBuffers",
    "DegenerateInputError",
    "DegenerateTriangleError",
    "GradientSet",
    "MeshTopology",
    "RenderInputs",
    "RenderOutput",
    "SceneRepresentation",
    "ShapeImage",
    "SoftBuffers",
    "TextureImage",
    "ViewPose",
    "Z_FAR",
    "apply_generator_head",
    "backward",
    "build_topology",
    "compose",
    "crop_background",
    "finite_difference_oracle",
    "initial_sphere",
    "make_scene",
    "point_triangle_distance",
    "project",
    "render",
    "render_crisp",
    "render_from_inputs",
    "render_soft",
    "rotate_scene",
    "run_gradcheck",
    "sample_texture",
    "selection_fingerprint",
    "shape_pyramid",
    "size_constraint",
]
