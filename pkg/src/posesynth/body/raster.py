"""Vectorised software z-buffer rasteriser.

Depth ties go to the lower face index, which keeps renders bit-reproducible.
"""

from dataclasses import dataclass

import numpy as np

NEAR = 1e-4


@dataclass
class Fragments:
    face: np.ndarray  # (H, W) int, -1 for background
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics
    depth: np.ndarray  # (H, W) camera z, +inf for background

    @property
    def mask(self):
        return self.face >= 0

    def interpolate(self, attr, faces):
        """Interpolate per-vertex attributes (V, C) over covered pixels; background is 0."""
        attr = np.asarray(attr, dtype=np.float64)
        H, W = self.face.shape
        out = np.zeros((H, W, attr.shape[1]))
        m = self.mask
        tri = attr[faces[self.face[m]]]  # (n, 3, C)
        out[m] = np.einsum("nk,nkc->nc", self.bary[m], tri)
        return out


def rasterize(vertices, faces, camera):
    """Rasterise a triangle mesh given in world coordinates."""
    H, W = camera.height, camera.width
    face_buf = np.full((H, W), -1, dtype=np.int64)
    bary_buf = np.zeros((H, W, 3))
    depth_buf = np.full((H, W), np.inf)
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return Fragments(face_buf, bary_buf, depth_buf)

    pix, z = camera.project(vertices)
    tri_pix = pix[faces]  # (F, 3, 2)
    tri_z = z[faces]
    ok = np.all(tri_z > NEAR, axis=1)
    x0, y0 = tri_pix[:, 0, 0], tri_pix[:, 0, 1]
    e1 = tri_pix[:, 1] - tri_pix[:, 0]
    e2 = tri_pix[:, 2] - tri_pix[:, 0]
    area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    ok &= np.abs(area) > 1e-12
    with np.errstate(invalid="ignore"):
        lo = np.floor(tri_pix.min(axis=1)).astype(np.float64)
        hi = np.ceil(tri_pix.max(axis=1)).astype(np.float64)
    ok &= np.all(np.isfinite(lo), axis=1) & np.all(np.isfinite(hi), axis=1)
    lo = np.clip(np.nan_to_num(lo), [0, 0], [W - 1, H - 1]).astype(np.int64)
    hi = np.clip(np.nan_to_num(hi), [0, 0], [W - 1, H - 1]).astype(np.int64)
    ok &= np.all(hi >= lo, axis=1)
    fids = np.flatnonzero(ok)
    if fids.size == 0:
        return Fragments(face_buf, bary_buf, depth_buf)

    nx = hi[fids, 0] - lo[fids, 0] + 1
    ny = hi[fids, 1] - lo[fids, 1] + 1
    counts = nx * ny
    cand_face = np.repeat(fids, counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    nx_r = np.repeat(nx, counts)
    px = np.repeat(lo[fids, 0], counts) + local % nx_r
    py = np.repeat(lo[fids, 1], counts) + local // nx_r

    dx = px - x0[cand_face]
    dy = py - y0[cand_face]
    a = area[cand_face]
    b1 = (dx * e2[cand_face, 1] - dy * e2[cand_face, 0]) / a
    b2 = (e1[cand_face, 0] * dy - e1[cand_face, 1] * dx) / a
    b0 = 1.0 - b1 - b2
    eps = -1e-9
    inside = (b0 >= eps) & (b1 >= eps) & (b2 >= eps)
    cand_face, px, py = cand_face[inside], px[inside], py[inside]
    screen = np.stack([b0[inside], b1[inside], b2[inside]], axis=1).clip(0.0, 1.0)
    screen /= screen.sum(axis=1, keepdims=True)
    inv_z = screen / tri_z[cand_face]
    depth = 1.0 / inv_z.sum(axis=1)
    persp = inv_z * depth[:, None]

    pixel = py * W + px
    order = np.lexsort((cand_face, depth, pixel))
    pixel_sorted = pixel[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pixel_sorted[1:] != pixel_sorted[:-1]
    win = order[first]
    face_buf.reshape(-1)[pixel[win]] = cand_face[win]
    bary_buf.reshape(-1, 3)[pixel[win]] = persp[win]
    depth_buf.reshape(-1)[pixel[win]] = depth[win]
    return Fragments(face_buf, bary_buf, depth_buf)
