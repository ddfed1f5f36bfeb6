"""Synthetic multi-view, multi-pose subjects rendered from the toy body.

Layout of one subject directory::

    subject_0003/
        cameras.txt        one line per view
        body_params.txt    one line per frame
        template.npz       named-array archive of the template mesh
        texture.png        ground-truth UV texture
        view_00/frame_0000.img.png
        view_00/frame_0000.mask.png
        view_00/frame_0000.normal.png

``cameras.txt`` fields: ``view width height K[9] R[9] t[3]`` (row-major).
``body_params.txt`` fields: ``frame beta[10] theta[3J]``. Floats use 9
significant digits.
"""

import colorsys
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from posesynth.body import (
    CameraSpec,
    PosedBody,
    make_template,
    rasterize,
    save_template,
)
from posesynth.body.texture import sample_texture, view_normals
from posesynth.imageio import write_mask, write_rgb

logger = logging.getLogger(__name__)

CAMERA_DISTANCE = 2.6
FOCAL_AT_64 = 80.0


@dataclass
class GeneratorConfig:
    resolution: int = 64
    n_views: int = 4
    n_frames: int = 6
    tex_size: int = 64
    n_joints: int = 8
    pose_scale: float = 0.25
    shape_scale: float = 0.8


def orbit_cameras(n_views, resolution, distance=CAMERA_DISTANCE, height=0.1):
    """Cameras evenly spaced in azimuth, view 0 looking at the body's front."""
    cams = []
    focal = FOCAL_AT_64 * resolution / 64.0
    for v in range(n_views):
        az = 2.0 * np.pi * v / n_views
        eye = (distance * np.sin(az), height, distance * np.cos(az))
        cams.append(CameraSpec.look_at(eye, (0.0, -0.05, 0.0), focal=focal, width=resolution, height=resolution))
    return cams


def a_pose(n_joints):
    theta = np.zeros((n_joints, 3))
    if n_joints == 8:
        theta[4] = (0.0, 0.0, -1.1)
        theta[5] = (0.0, 0.0, 1.1)
    else:
        theta[16] = (0.0, 0.0, -1.1)
        theta[17] = (0.0, 0.0, 1.1)
    return theta.reshape(-1)


def random_poses(rng, n_frames, n_joints, scale):
    """Frame 0 is a plain A-pose; later frames perturb limbs and turn the root."""
    base = a_pose(n_joints)
    poses = [base.copy()]
    for _ in range(1, n_frames):
        theta = base + rng.normal(0.0, scale, base.shape)
        theta[:3] = (rng.normal(0, 0.05), rng.uniform(-0.6, 0.6), rng.normal(0, 0.05))
        poses.append(theta)
    return np.stack(poses)


def procedural_texture(rng, size, template):
    """Per-part base colours with a low-frequency band pattern."""
    grid = int(np.ceil(np.sqrt(template.n_joints)))
    rows, cols = np.mgrid[0:size, 0:size]
    v = (rows + 0.5) / size
    u = (cols + 0.5) / size
    tile = (np.floor(v * grid) * grid + np.floor(u * grid)).astype(int)
    lu = u * grid % 1.0
    lv = v * grid % 1.0
    tex = np.zeros((size, size, 3))
    n_tiles = grid * grid
    for k in range(n_tiles):
        h = rng.uniform()
        base = np.array(colorsys.hsv_to_rgb(h, rng.uniform(0.3, 0.8), rng.uniform(0.5, 0.95)))
        accent = np.array(colorsys.hsv_to_rgb((h + 0.5) % 1.0, 0.6, 0.8))
        freq = rng.integers(1, 3)
        band = 0.5 + 0.5 * np.cos(2 * np.pi * freq * lv + rng.uniform(0, 2 * np.pi))
        band *= 0.8 + 0.2 * np.cos(2 * np.pi * lu)
        m = tile == k
        tex[m] = (1 - 0.5 * band[m, None]) * base + 0.5 * band[m, None] * accent
    return np.clip(tex, 0.05, 1.0)


def render_subject_view(template, texels, pose, shape, camera):
    """Unlit albedo render with binary coverage, analytic normals and depth."""
    body = pose if isinstance(pose, PosedBody) else PosedBody(template, pose, shape)
    frags = rasterize(body.vertices, template.faces, camera)
    m = frags.mask
    H, W = m.shape
    image = np.zeros((H, W, 3))
    normal = np.zeros((H, W, 3))
    if m.any():
        uv = frags.interpolate(template.uv, template.faces)
        image[m] = sample_texture(texels, uv[m])
        n = frags.interpolate(view_normals(body.vertex_normals(), camera), template.faces)[m]
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        normal[m] = 0.5 * n + 0.5
    alpha = m.astype(np.float64)
    return {"image": image, "alpha": alpha, "mask": alpha > 0.5, "normal": normal, "depth": frags.depth}


def _fmt(values):
    return " ".join(f"{x:.9g}" for x in np.asarray(values, dtype=np.float64).reshape(-1))


def write_cameras(path, cameras):
    with open(path, "w") as f:
        f.write("# view width height K[9] R[9] t[3]\n")
        for v, c in enumerate(cameras):
            f.write(f"{v} {c.width} {c.height} {_fmt(c.K)} {_fmt(c.R)} {_fmt(c.t)}\n")


def read_cameras(path):
    cams = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        vals = np.array(parts[3:], dtype=np.float64)
        R = vals[9:18].reshape(3, 3)
        # re-orthonormalise after 9-digit rounding
        U, _, Vt = np.linalg.svd(R)
        cams[int(parts[0])] = CameraSpec(
            K=vals[:9].reshape(3, 3), R=U @ Vt, t=vals[18:21], width=int(parts[1]), height=int(parts[2])
        )
    return [cams[k] for k in sorted(cams)]


def write_body_params(path, betas, thetas):
    with open(path, "w") as f:
        f.write("# frame beta[10] theta[3J]\n")
        for i, (b, t) in enumerate(zip(betas, thetas)):
            f.write(f"{i} {_fmt(b)} {_fmt(t)}\n")


def read_body_params(path):
    betas, thetas = {}, {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        vals = np.array(parts[1:], dtype=np.float64)
        betas[int(parts[0])] = vals[:10]
        thetas[int(parts[0])] = vals[10:]
    keys = sorted(betas)
    return np.stack([betas[k] for k in keys]), np.stack([thetas[k] for k in keys])


def subject_dir(root, subject):
    return Path(root) / f"subject_{subject:04d}"


def frame_stem(view, frame):
    return Path(f"view_{view:02d}") / f"frame_{frame:04d}"


def generate_subject(root, subject, seed, config=None):
    """Render one subject to ``root/subject_XXXX``; deterministic in ``seed``."""
    config = config or GeneratorConfig()
    rng = np.random.default_rng(seed)
    template = make_template(n_joints=config.n_joints)
    beta = rng.normal(0.0, config.shape_scale, 10)
    thetas = random_poses(rng, config.n_frames, config.n_joints, config.pose_scale)
    texels = procedural_texture(rng, config.tex_size, template)
    cameras = orbit_cameras(config.n_views, config.resolution)

    out = subject_dir(root, subject)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_template(out / "template.npz", template)
        write_rgb(out / "texture.png", texels)
        write_cameras(out / "cameras.txt", cameras)
        write_body_params(out / "body_params.txt", [beta] * config.n_frames, thetas)
        for f, theta in enumerate(thetas):
            body = PosedBody(template, theta, beta)
            for v, cam in enumerate(cameras):
                r = render_subject_view(template, texels, body, None, cam)
                stem = out / frame_stem(v, f)
                stem.parent.mkdir(exist_ok=True)
                write_rgb(f"{stem}.img.png", r["image"])
                write_mask(f"{stem}.mask.png", r["mask"])
                write_rgb(f"{stem}.normal.png", r["normal"])
    except OSError as exc:
        raise OSError(f"failed writing subject {subject} under {out}: {exc}") from exc
    logger.info("wrote subject %d to %s", subject, out)
    return out


def generate_dataset(root, n_train=2, n_test=1, seed=0, config=None):
    """Generate train and test subjects plus ``manifest.txt``; returns the manifest."""
    from posesynth.data.dataset import DatasetManifest

    config = config or GeneratorConfig()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = list(range(n_train + n_test))
    for sid in ids:
        generate_subject(root, sid, seed * 100003 + sid, config)
    manifest = DatasetManifest(
        root=root,
        train=ids[:n_train],
        test=ids[n_train:],
        resolution=config.resolution,
        seed=seed,
        n_views=config.n_views,
        n_frames=config.n_frames,
    )
    manifest.save()
    return manifest
