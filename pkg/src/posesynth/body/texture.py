"""UV texture projection, completion and re-rendering of the posed body."""

import colorsys
from typing import Protocol

import numpy as np

from posesynth._validation import InvalidArgumentError, check_image, check_shape
from posesynth.body.lbs import PosedBody
from posesynth.body.raster import rasterize
from posesynth.body.types import ConditionMapSet, UVTexture


def part_palette(n_parts):
    """RGB colour per part label 1..P: hue ``k * 360 / P``, full saturation and value."""
    colors = np.zeros((n_parts + 1, 3))
    for k in range(1, n_parts + 1):
        colors[k] = colorsys.hsv_to_rgb((k / n_parts) % 1.0, 1.0, 1.0)
    return colors


def texel_index(uv, size):
    """Nearest texel (row, col) for UV coordinates; rows follow v, columns follow u."""
    uv = np.asarray(uv, dtype=np.float64)
    col = np.clip(np.floor(uv[..., 0] * size), 0, size - 1).astype(np.int64)
    row = np.clip(np.floor(uv[..., 1] * size), 0, size - 1).astype(np.int64)
    return row, col


def sample_texture(texels, uv):
    row, col = texel_index(uv, texels.shape[0])
    return texels[row, col]


def correspondence_map(template, pose, shape, camera):
    """Pixel-to-UV map, silhouette and depth of the posed body seen from ``camera``."""
    body = pose if isinstance(pose, PosedBody) else PosedBody(template, pose, shape)
    frags = rasterize(body.vertices, template.faces, camera)
    uv = frags.interpolate(template.uv, template.faces)
    return uv, frags.mask, frags.depth


def project_to_uv(image, correspondence, silhouette, tex_size=64, depth=None):
    """Scatter silhouette pixels into a UV texture.

    When several pixels land on one texel the one with the smallest
    ``depth`` wins; without depth the first pixel in row-major order wins.
    """
    image = check_image(image)
    H, W = image.shape[:2]
    correspondence = check_shape(correspondence, (H, W, 2), "correspondence")
    silhouette = check_shape(np.asarray(silhouette, dtype=bool), (H, W), "silhouette")
    texels = np.zeros((tex_size, tex_size, 3))
    validity = np.zeros((tex_size, tex_size), dtype=bool)
    m = silhouette & np.all(np.isfinite(correspondence), axis=-1)
    if not m.any():
        return UVTexture(texels, validity)
    row, col = texel_index(correspondence[m], tex_size)
    key = row * tex_size + col
    d = np.zeros(key.size) if depth is None else np.asarray(depth, dtype=np.float64)[m]
    order = np.lexsort((np.arange(key.size), d, key))
    first = np.ones(order.size, dtype=bool)
    first[1:] = key[order][1:] != key[order][:-1]
    win = order[first]
    texels.reshape(-1, 3)[key[win]] = image[m][win]
    validity.reshape(-1)[key[win]] = True
    return UVTexture(texels, validity)


class TextureCompleter(Protocol):
    def __call__(self, partial: UVTexture) -> UVTexture: ...


_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def complete_texture(partial):
    """Fill invalid texels by iterative 4-neighbour dilation.

    Every filled texel receives the colour of the valid texel closest in
    Manhattan distance, ties going to the lowest row-major seed index.
    Seed identities travel with the dilation front, so the result equals
    an exhaustive nearest-seed search.
    """
    valid = partial.validity
    if not valid.any():
        raise InvalidArgumentError("texture has no valid texels to complete from")
    if valid.all():
        return UVTexture(partial.texels.copy(), valid.copy())
    U = partial.size
    rows, cols = np.mgrid[0:U, 0:U]
    seed = np.where(valid, rows * U + cols, -1)
    big = np.iinfo(np.int64).max
    while (seed < 0).any():
        best_d = np.full((U, U), big)
        best_s = np.full((U, U), big)
        for dr, dc in _NEIGHBOURS:
            nb = np.full((U, U), -1)
            r0, r1 = max(dr, 0), U + min(dr, 0)
            c0, c1 = max(dc, 0), U + min(dc, 0)
            nb[r0 - dr : r1 - dr, c0 - dc : c1 - dc] = seed[r0:r1, c0:c1]
            has = nb >= 0
            d = np.where(has, np.abs(nb // U - rows) + np.abs(nb % U - cols), big)
            s = np.where(has, nb, big)
            better = (d < best_d) | ((d == best_d) & (s < best_s))
            best_d = np.where(better, d, best_d)
            best_s = np.where(better, s, best_s)
        fill = (seed < 0) & (best_s < big)
        seed = np.where(fill, best_s, seed)
    texels = partial.texels.reshape(-1, 3)[seed.reshape(-1)].reshape(U, U, 3)
    return UVTexture(texels, np.ones((U, U), dtype=bool))


def view_normals(normals_world, camera):
    """World normals to a y-up, z-towards-viewer frame (a surface facing the camera is +z)."""
    n = normals_world @ camera.R.T
    return n * np.array([1.0, -1.0, -1.0])


def rasterize_condition_maps(template, pose_tgt, shape_tgt, camera, uv_inpaint):
    """Texture, normal and semantic maps sharing a single depth test."""
    body = pose_tgt if isinstance(pose_tgt, PosedBody) else PosedBody(template, pose_tgt, shape_tgt)
    frags = rasterize(body.vertices, template.faces, camera)
    m = frags.mask
    H, W = m.shape
    texture = np.zeros((H, W, 3))
    normal = np.zeros((H, W, 3))
    semantic = np.zeros((H, W, 3))
    if m.any():
        faces = template.faces
        uv = frags.interpolate(template.uv, faces)
        texture[m] = sample_texture(uv_inpaint.texels, uv[m])
        n = frags.interpolate(view_normals(body.vertex_normals(), camera), faces)[m]
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        normal[m] = n * 0.5 + 0.5
        # part label of the vertex with the largest barycentric weight
        corner = np.argmax(frags.bary[m], axis=1)
        vid = faces[frags.face[m], corner]
        semantic[m] = part_palette(template.n_parts)[template.part_labels[vid]]
    return ConditionMapSet(texture=texture, normal=normal, semantic=semantic, mask=m)


def warp_texture(uv_inpaint, shape_tgt, pose_tgt, camera, template):
    """Render the completed texture on the posed body; background is 0."""
    return rasterize_condition_maps(template, pose_tgt, shape_tgt, camera, uv_inpaint).texture
