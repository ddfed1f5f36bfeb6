"""Synthetic subject generation and dataset loading."""

from posesynth.data.dataset import (
    DataLoadError,
    DatasetManifest,
    SequenceSample,
    ViewRecord,
    crop_and_resize,
    load_sequence,
)
from posesynth.data.generator import (
    GeneratorConfig,
    generate_dataset,
    generate_subject,
    orbit_cameras,
    render_subject_view,
)
from posesynth.data.normals import DepthGradientNormals, MeshNormals, NormalSource, make_normal_source

__all__ = [
    "DataLoadError",
    "DatasetManifest",
    "DepthGradientNormals",
    "MeshNormals",
    "NormalSource",
    "GeneratorConfig",
    "SequenceSample",
    "ViewRecord",
    "crop_and_resize",
    "generate_dataset",
    "generate_subject",
    "load_sequence",
    "make_normal_source",
    "orbit_cameras",
    "render_subject_view",
]
