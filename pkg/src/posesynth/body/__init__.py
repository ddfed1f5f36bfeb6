"""Toy parametric articulated body: skinning, rasterisation and UV textures."""

from posesynth.body.lbs import PosedBody, forward_lbs, inverse_lbs, rodrigues
from posesynth.body.raster import rasterize
from posesynth.body.template import make_template, single_joint_template
from posesynth.body.texture import (
    TextureCompleter,
    complete_texture,
    correspondence_map,
    part_palette,
    project_to_uv,
    rasterize_condition_maps,
    warp_texture,
)
from posesynth.body.types import (
    BodyPose,
    BodyShape,
    CameraSpec,
    ConditionMapSet,
    TemplateMesh,
    UVTexture,
)


def save_template(path, template):
    from posesynth.archive import save_arrays

    save_arrays(path, template.arrays(), {"kind": "template"})


def load_template(path):
    from posesynth.archive import load_arrays

    arrays, _ = load_arrays(path)
    return TemplateMesh(**arrays)


__all__ = [
    "BodyPose",
    "BodyShape",
    "CameraSpec",
    "ConditionMapSet",
    "PosedBody",
    "TemplateMesh",
    "TextureCompleter",
    "UVTexture",
    "complete_texture",
    "correspondence_map",
    "forward_lbs",
    "inverse_lbs",
    "load_template",
    "make_template",
    "part_palette",
    "project_to_uv",
    "rasterize",
    "rasterize_condition_maps",
    "rodrigues",
    "save_template",
    "single_joint_template",
    "warp_texture",
]
