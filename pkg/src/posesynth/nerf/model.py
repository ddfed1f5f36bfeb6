"""Single-reference articulated radiance field.

A target-space sample is mapped to the shape-free canonical frame by inverse
skinning, re-posed into the reference frame, and projected into the
reference feature map. A second feature comes from a dense voxel volume
built by splatting the reference features of every template vertex at its
canonical position. Samples farther than ``radius`` from the posed surface
are empty space: zero features and zero density.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from posesynth._validation import InvalidArgumentError, check_image
from posesynth.body import PosedBody
from posesynth.nerf.networks import (
    NeRFMLP,
    ReferenceEncoder,
    VoxelFeatureNet,
    sample_feature_map,
    sample_grid,
    splat_to_grid,
)
from posesynth.nerf.render import CoarseRender, ray_box, sample_depths, volume_render


@dataclass
class NeRFConfig:
    feature_channels: int = 32
    encoder_width: int = 32
    stride: int = 4
    grid_size: int = 16
    voxel_channels: int = 16
    voxel_layers: int = 2
    hidden: int = 128
    depth: int = 4
    pe_x: int = 6
    pe_d: int = 4
    samples_train: int = 64
    samples_eval: int = 128
    radius: float = 0.05
    bbox_pad: float = 0.1
    zero_heads: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class ReferenceFeatureMap:
    features: torch.Tensor  # (C, Hf, Wf)
    camera: object
    body: PosedBody
    voxels: torch.Tensor = None  # (C3, G, G, G) over the canonical box


class CoarseHumanNeRF(nn.Module):
    def __init__(self, template, config=None):
        super().__init__()
        self.config = config or NeRFConfig()
        c = self.config
        self.template = template
        self.encoder = ReferenceEncoder(c.feature_channels, c.encoder_width, c.stride)
        self.voxel_net = VoxelFeatureNet(c.feature_channels, c.voxel_channels, c.voxel_layers)
        self.mlp = NeRFMLP(
            c.feature_channels + c.voxel_channels, c.hidden, c.depth, c.pe_x, c.pe_d, c.zero_heads
        )
        margin = c.radius + 0.02
        self.register_buffer("box_lo", torch.tensor(template.vertices.min(0) - margin))
        self.register_buffer("box_hi", torch.tensor(template.vertices.max(0) + margin))

    @property
    def dtype(self):
        return self.mlp.sigma_head.weight.dtype

    @property
    def feature_dim(self):
        return self.config.feature_channels + self.config.voxel_channels

    def _tensor(self, x):
        return torch.as_tensor(np.asarray(x), dtype=self.dtype)

    def encode_reference(self, image, camera=None, pose=None, shape=None):
        """Feature map of a reference image (H, W, 3) in [0, 1].

        With a camera, the reference body (``pose`` may be a ready ``PosedBody``)
        is attached and the voxel volume is built.
        """
        if torch.is_tensor(image):
            img = image.to(self.dtype)
            if not torch.isfinite(img).all():
                raise InvalidArgumentError("reference image contains non-finite values")
        else:
            arr = np.asarray(image, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError("reference image contains non-finite values")
            img = self._tensor(check_image(arr))
        fmap = self.encoder(img.permute(2, 0, 1)[None])[0]
        if camera is None:
            body = None
        else:
            body = pose if isinstance(pose, PosedBody) else PosedBody(self.template, pose, shape)
        ref = ReferenceFeatureMap(fmap, camera, body)
        if body is not None:
            ref.voxels = self._voxelize(ref)
        return ref

    def _voxelize(self, ref):
        pix, _ = ref.camera.project(ref.body.vertices)
        feats = sample_feature_map(ref.features, self._tensor(pix), self.config.stride)
        canon = self._tensor(self.template.vertices)
        grid = splat_to_grid(canon, feats, self.box_lo.to(self.dtype), self.box_hi.to(self.dtype), self.config.grid_size)
        return self.voxel_net(grid[None])[0]

    def query_point_features(self, x_tgt, target_body, ref):
        """Point features (N, D) plus ``(canonical, valid)`` for target-space points.

        Invalid points (off the body shell) get an all-zero feature vector.
        """
        canonical, valid, nn_idx = target_body.to_canonical(x_tgt, self.config.radius)
        rho = torch.zeros(len(canonical), self.feature_dim, dtype=self.dtype)
        vi = np.flatnonzero(valid)
        if vi.size == 0:
            return rho, canonical, valid
        x_ref = ref.body.from_canonical(canonical[vi], nn_idx[vi])
        pix, _ = ref.camera.project(x_ref)
        pixel_feat = sample_feature_map(ref.features, self._tensor(pix), self.config.stride)
        canon_t = self._tensor(canonical[vi])
        voxel_feat = sample_grid(ref.voxels, canon_t, self.box_lo.to(self.dtype), self.box_hi.to(self.dtype))
        rho = rho.index_put((torch.as_tensor(vi),), torch.cat([pixel_feat, voxel_feat], dim=1))
        return rho, canonical, valid

    def render_rays(self, origins, directions, target_body, ref, n_samples, rng=None):
        """Composite ``n_samples`` per ray; returns rgb (N, 3), alpha (N,), depth (N,)."""
        N = origins.shape[0]
        verts = target_body.vertices
        centre = 0.5 * (verts.min(0) + verts.max(0))
        half = 0.5 * (verts.max(0) - verts.min(0)) * (1.0 + self.config.bbox_pad) + self.config.radius
        near, far, hit = ray_box(origins, directions, centre - half, centre + half)
        rgb = torch.zeros(N, 3, dtype=self.dtype)
        alpha = torch.zeros(N, dtype=self.dtype)
        depth = torch.zeros(N, dtype=self.dtype)
        idx = np.flatnonzero(hit)
        if idx.size == 0:
            return rgb, alpha, depth
        t = sample_depths(near[idx], far[idx], n_samples, rng)
        pts = origins[idx, None] + t[..., None] * directions[idx, None]
        flat = pts.reshape(-1, 3)
        rho, canonical, valid = self.query_point_features(flat, target_body, ref)
        sigma = torch.zeros(flat.shape[0], dtype=self.dtype)
        color = torch.zeros(flat.shape[0], 3, dtype=self.dtype)
        vi = np.flatnonzero(valid)
        if vi.size:
            d = np.repeat(directions[idx], n_samples, axis=0)[vi]
            s, c = self.mlp(self._tensor(canonical[vi]), self._tensor(d), rho[torch.as_tensor(vi)])
            sigma = sigma.index_put((torch.as_tensor(vi),), s)
            color = color.index_put((torch.as_tensor(vi),), c)
        r, a, dep, _ = volume_render(
            sigma.view(-1, n_samples), color.view(-1, n_samples, 3), self._tensor(t), self._tensor(far[idx])
        )
        ti = torch.as_tensor(idx)
        return rgb.index_put((ti,), r), alpha.index_put((ti,), a), depth.index_put((ti,), dep)

    def render_view(self, ref, pose_tgt, shape_tgt, camera, n_samples=None, seed=None, chunk=2048):
        """Render a full view; stratified jitter is seeded when ``seed`` is given."""
        n_samples = n_samples or self.config.samples_eval
        body = pose_tgt if isinstance(pose_tgt, PosedBody) else PosedBody(self.template, pose_tgt, shape_tgt)
        origins, dirs = camera.pixel_rays()
        rng = None if seed is None else np.random.default_rng(seed)
        outs = [self.render_rays(origins[i : i + chunk], dirs[i : i + chunk], body, ref, n_samples, rng)
                for i in range(0, len(origins), chunk)]
        rgb, alpha, depth = (torch.cat(x) for x in zip(*outs))
        H, W = camera.height, camera.width
        return CoarseRender(rgb.view(H, W, 3), alpha.view(H, W), depth.view(H, W))
