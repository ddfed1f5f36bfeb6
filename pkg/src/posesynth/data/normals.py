"""Normal maps for coarse renders.

Ground-truth normals come straight from the mesh at generation time; coarse
renders only carry rgb, alpha and depth, so their normals have to be
estimated. Two sources share one call signature: re-rendering the posed
body mesh inside the coarse mask, and finite differences of the rendered
depth. Output encoding matches the dataset: ``0.5 * n + 0.5`` on foreground,
zero elsewhere.
"""

from typing import Protocol

import numpy as np

from posesynth.body import PosedBody, rasterize
from posesynth.body.texture import view_normals


class NormalSource(Protocol):
    def __call__(self, render, camera, body=None) -> np.ndarray: ...


def _encode(normals, mask):
    out = np.zeros(mask.shape + (3,))
    out[mask] = 0.5 * normals[mask] + 0.5
    return out


class DepthGradientNormals:
    """Normals from central differences of back-projected depth."""

    def __call__(self, render, camera, body=None):
        r = render.numpy() if hasattr(render, "numpy") else render
        mask = np.asarray(r.mask, dtype=bool)
        depth = np.where(mask, r.depth, np.nan)
        H, W = depth.shape
        K = camera.K
        ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
        pts = np.stack([(xs - K[0, 2]) / K[0, 0] * depth, (ys - K[1, 2]) / K[1, 1] * depth, depth], axis=-1)
        dx = _diff(pts, axis=1)
        dy = _diff(pts, axis=0)
        n = np.cross(dx, dy)
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        ok = mask & np.isfinite(norm[..., 0]) & (norm[..., 0] > 0)
        n = np.where(ok[..., None], n / np.where(norm > 0, norm, 1.0), 0.0)
        # face the camera (camera looks down +z), then convert to the view frame
        n = np.where(n[..., 2:3] > 0, -n, n)
        n = n * np.array([1.0, -1.0, -1.0])
        return _encode(n, ok)


def _diff(pts, axis):
    """Central difference with one-sided fallback where a neighbour is missing."""
    fwd = np.roll(pts, -1, axis=axis) - pts
    bwd = pts - np.roll(pts, 1, axis=axis)
    edge = [slice(None)] * 3
    edge[axis] = -1
    fwd[tuple(edge)] = np.nan
    edge[axis] = 0
    bwd[tuple(edge)] = np.nan
    central = 0.5 * (fwd + bwd)
    return np.where(np.isfinite(central), central, np.where(np.isfinite(fwd), fwd, bwd))


class MeshNormals:
    """Re-render the posed body and keep its normals inside the coarse mask."""

    def __init__(self, template):
        self.template = template

    def __call__(self, render, camera, body=None):
        if body is None:
            raise ValueError("mesh normals need the posed body")
        r = render.numpy() if hasattr(render, "numpy") else render
        if not isinstance(body, PosedBody):
            body = PosedBody(self.template, *body)
        frags = rasterize(body.vertices, self.template.faces, camera)
        mask = np.asarray(r.mask, dtype=bool) & frags.mask
        n = frags.interpolate(view_normals(body.vertex_normals(), camera), self.template.faces)
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        n = n / np.where(norm > 0, norm, 1.0)
        return _encode(n, mask)


def make_normal_source(kind, template=None):
    if kind == "mesh":
        return MeshNormals(template)
    if kind == "depth":
        return DepthGradientNormals()
    raise ValueError(f"unknown normal source {kind!r}")
