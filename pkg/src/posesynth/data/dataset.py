"""Reading generated subjects back as reference + target sequences."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from posesynth._validation import InvalidArgumentError
from posesynth.body import CameraSpec, load_template
from posesynth.data.generator import (
    frame_stem,
    read_body_params,
    read_cameras,
    subject_dir,
)
from posesynth.imageio import read_mask, read_rgb


class DataLoadError(FileNotFoundError):
    pass


def _ids(text):
    return [int(x) for x in text.split(",") if x.strip()]


@dataclass
class DatasetManifest:
    root: Path
    train: list
    test: list
    resolution: int = 64
    seed: int = 0
    n_views: int = 4
    n_frames: int = 6

    def __post_init__(self):
        self.root = Path(self.root)
        if set(self.train) & set(self.test):
            raise InvalidArgumentError("train and test subjects overlap")

    def subjects(self, split):
        if split not in ("train", "test"):
            raise InvalidArgumentError(f"unknown split {split!r}")
        return list(self.train if split == "train" else self.test)

    def save(self):
        lines = [
            f"seed = {self.seed}",
            f"resolution = {self.resolution}",
            f"n_views = {self.n_views}",
            f"n_frames = {self.n_frames}",
            f"train = {','.join(map(str, self.train))}",
            f"test = {','.join(map(str, self.test))}",
        ]
        (self.root / "manifest.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, root):
        root = Path(root)
        path = root / "manifest.txt"
        if not path.exists():
            raise DataLoadError(f"no dataset manifest at {path}")
        kv = {}
        for line in path.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        return cls(
            root=root,
            train=_ids(kv.get("train", "")),
            test=_ids(kv.get("test", "")),
            resolution=int(kv["resolution"]),
            seed=int(kv["seed"]),
            n_views=int(kv["n_views"]),
            n_frames=int(kv["n_frames"]),
        )


@dataclass
class ViewRecord:
    view: int
    frame: int
    image: np.ndarray
    mask: np.ndarray
    normal: np.ndarray
    camera: CameraSpec
    pose: np.ndarray
    shape: np.ndarray


@dataclass
class SequenceSample:
    subject: int
    reference: ViewRecord
    targets: list = field(default_factory=list)
    template: object = None
    n_views: int = 0
    n_frames: int = 0

    def grid(self):
        """Targets grouped by frame: ``{frame: [record per view]}``."""
        out = {}
        for r in self.targets:
            out.setdefault(r.frame, []).append(r)
        return {f: sorted(rs, key=lambda r: r.view) for f, rs in sorted(out.items())}


def crop_box(mask):
    """Largest square centred on the mask centroid that fits in the image."""
    H, W = mask.shape
    side = min(H, W)
    if mask.any():
        ys, xs = np.nonzero(mask)
        cy, cx = ys.mean(), xs.mean()
    else:
        cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    top = int(np.clip(round(cy - (side - 1) / 2.0), 0, H - side))
    left = int(np.clip(round(cx - (side - 1) / 2.0), 0, W - side))
    return top, left, side


def crop_and_resize(image, mask, normal, camera, resolution):
    """Centre-crop to a square around the subject and resize to ``resolution``.

    The camera intrinsics are adjusted to the new pixel grid. A square image
    already at ``resolution`` passes through unchanged.
    """
    top, left, side = crop_box(mask)
    H, W = mask.shape
    if (top, left, side, H, W) == (0, 0, resolution, resolution, resolution):
        return image, mask, normal, camera

    def _resize(a, resample):
        a = a[top : top + side, left : left + side]
        if side == resolution:
            return a
        im = Image.fromarray(a.astype(np.float32)) if a.ndim == 2 else None
        if a.ndim == 3:
            chans = [np.asarray(Image.fromarray(a[..., c].astype(np.float32)).resize((resolution, resolution), resample)) for c in range(a.shape[2])]
            return np.stack(chans, -1).astype(np.float64)
        return np.asarray(im.resize((resolution, resolution), resample), dtype=np.float64)

    scale = resolution / side
    K = camera.K.copy()
    K[0, 2] -= left
    K[1, 2] -= top
    # pixel centres on integer coordinates: x' = (x + 0.5) * s - 0.5
    K[:2] *= scale
    K[0, 2] += 0.5 * scale - 0.5
    K[1, 2] += 0.5 * scale - 0.5
    cam = CameraSpec(K=K, R=camera.R, t=camera.t, width=resolution, height=resolution)
    img = np.clip(_resize(image, Image.BILINEAR), 0.0, 1.0)
    nrm = np.clip(_resize(normal, Image.BILINEAR), 0.0, 1.0)
    msk = _resize(mask.astype(np.float64), Image.BILINEAR) > 0.5
    return img, msk, nrm, cam


def _load_record(sdir, view, frame, cameras, betas, thetas, resolution):
    stem = sdir / frame_stem(view, frame)
    paths = [Path(f"{stem}.{kind}.png") for kind in ("img", "mask", "normal")]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise DataLoadError(f"missing files: {', '.join(missing)}")
    image, mask, normal = read_rgb(paths[0]), read_mask(paths[1]), read_rgb(paths[2])
    image, mask, normal, cam = crop_and_resize(image, mask, normal, cameras[view], resolution)
    return ViewRecord(view, frame, image, mask, normal, cam, thetas[frame], betas[frame])


def load_sequence(manifest, subject, frames=None, views=None, reference=(0, 0), resolution=None):
    """Reference record plus the (views x frames) target grid for one subject.

    ``frames`` defaults to the first five frames and ``views`` to every view.
    """
    sdir = subject_dir(manifest.root, subject)
    for name in ("cameras.txt", "body_params.txt", "template.npz"):
        if not (sdir / name).exists():
            raise DataLoadError(f"missing {sdir / name}")
    cameras = read_cameras(sdir / "cameras.txt")
    betas, thetas = read_body_params(sdir / "body_params.txt")
    frames = list(range(min(5, len(thetas)))) if frames is None else list(frames)
    views = list(range(len(cameras))) if views is None else list(views)
    res = resolution or manifest.resolution
    ref = _load_record(sdir, reference[0], reference[1], cameras, betas, thetas, res)
    targets = [_load_record(sdir, v, f, cameras, betas, thetas, res) for f in frames for v in views]
    return SequenceSample(
        subject=subject,
        reference=ref,
        targets=targets,
        template=load_template(sdir / "template.npz"),
        n_views=len(views),
        n_frames=len(frames),
    )
