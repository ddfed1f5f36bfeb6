"""Protocol evaluation of an inference run against the dataset.

A run directory mirrors the dataset layout::

    run/manifest.txt                                   key = value, includes config_hash
    run/subject_XXXX/view_YY/frame_ZZZZ.img.png        refined rgb
    run/subject_XXXX/view_YY/frame_ZZZZ.normal.png     refined normals

Protocols follow the reference choice (view 0, frame 0 by default):
``novel_view`` scores the reference frame from the other views, ``novel_pose``
scores every other frame from every view.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from posesynth._validation import InvalidArgumentError, MissingPrerequisiteError
from posesynth.data.dataset import load_sequence
from posesynth.data.generator import frame_stem, subject_dir
from posesynth.imageio import read_rgb
from posesynth.metrics import psnr, ssim

PROTOCOLS = ("novel_view", "novel_pose")
COLUMNS = ("PSNR", "SSIM", "LPIPS", "FID")
RUN_MANIFEST = "manifest.txt"


class MissingOutputsError(MissingPrerequisiteError):
    def __init__(self, missing):
        self.missing = list(missing)
        listing = "\n  ".join(str(p) for p in self.missing)
        super().__init__(f"{len(self.missing)} required outputs are missing:\n  {listing}")


def read_kv(path):
    kv = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line and not line.lstrip().startswith("#"):
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    return kv


def write_kv(path, kv):
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in kv.items()))


def in_protocol(record, protocol, reference=(0, 0)):
    ref_view, ref_frame = reference
    if protocol == "novel_view":
        return record.frame == ref_frame and record.view != ref_view
    if protocol == "novel_pose":
        return record.frame != ref_frame
    raise InvalidArgumentError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def output_path(run_dir, subject, view, frame, kind="img"):
    return Path(f"{subject_dir(run_dir, subject) / frame_stem(view, frame)}.{kind}.png")


@dataclass
class EvalReport:
    """Mean metrics per protocol plus a per-subject breakdown.

    Optional columns (LPIPS, FID) are ``None`` when their plugin is off.
    """

    tasks: dict
    per_subject: dict
    config_hash: str
    masked: bool = False
    n_images: dict = field(default_factory=dict)

    def rows(self):
        return [(task, [self.tasks[task].get(c) for c in COLUMNS]) for task in self.tasks]

    def to_kv(self):
        kv = {"config_hash": self.config_hash, "masked": str(self.masked).lower()}
        for task, vals in self.rows():
            kv[f"{task}.n"] = self.n_images.get(task, 0)
            for col, v in zip(COLUMNS, vals):
                kv[f"{task}.{col.lower()}"] = "absent" if v is None else f"{v:.6f}"
        for subj in sorted(self.per_subject):
            for task, m in self.per_subject[subj].items():
                kv[f"subject_{subj:04d}.{task}.psnr"] = f"{m['PSNR']:.6f}"
                kv[f"subject_{subj:04d}.{task}.ssim"] = f"{m['SSIM']:.6f}"
        return kv

    def table(self):
        head = f"{'Task':<12}" + "".join(f"{c + (' (up)' if c in ('PSNR', 'SSIM') else ' (down)'):>14}" for c in COLUMNS)
        lines = [head, "-" * len(head)]
        for task, vals in self.rows():
            cells = "".join(f"{'--' if v is None else f'{v:.4f}':>14}" for v in vals)
            lines.append(f"{task:<12}{cells}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_kv(out_dir / "report.txt", self.to_kv())
        (out_dir / "table.txt").write_text(self.table())


def _composite(img, mask):
    return img * mask[..., None]


def evaluate(run_dir, manifest, protocol="all", split="test", masked=False, perceptual=None, reference=(0, 0),
             frames=None):
    """Score a run's refined rgb images against the dataset.

    ``protocol`` is ``novel_view``, ``novel_pose`` or ``all``. Full-frame by
    default; ``masked`` composites both images onto black with the ground
    truth mask first. ``frames`` is the target frame list (loader default
    when None). Raises ``MissingOutputsError`` listing every absent
    output before computing anything.
    """
    run_dir = Path(run_dir)
    tasks = PROTOCOLS if protocol == "all" else (protocol,)
    for t in tasks:
        if t not in PROTOCOLS:
            raise InvalidArgumentError(f"unknown protocol {t!r}; expected one of {PROTOCOLS} or 'all'")
    if not (run_dir / RUN_MANIFEST).exists():
        raise MissingOutputsError([run_dir / RUN_MANIFEST])
    config_hash = read_kv(run_dir / RUN_MANIFEST).get("config_hash", "unknown")

    sequences = [load_sequence(manifest, s, frames=frames, reference=reference) for s in manifest.subjects(split)]
    jobs = []
    for seq in sequences:
        for rec in seq.targets:
            for t in tasks:
                if in_protocol(rec, t, reference):
                    jobs.append((t, seq.subject, rec))
    missing = [output_path(run_dir, s, r.view, r.frame) for _, s, r in jobs
               if not output_path(run_dir, s, r.view, r.frame).exists()]
    if missing:
        raise MissingOutputsError(missing)

    scores = {t: {"PSNR": [], "SSIM": [], "LPIPS": []} for t in tasks}
    per_subject = {}
    for t, subj, rec in jobs:
        pred = read_rgb(output_path(run_dir, subj, rec.view, rec.frame))
        gt = rec.image
        if pred.shape != gt.shape:
            raise InvalidArgumentError(f"output {output_path(run_dir, subj, rec.view, rec.frame)} has shape {pred.shape}, expected {gt.shape}")
        if masked:
            pred, gt = _composite(pred, rec.mask), _composite(gt, rec.mask)
        p, s = psnr(pred, gt), ssim(pred, gt)
        scores[t]["PSNR"].append(p)
        scores[t]["SSIM"].append(s)
        if perceptual is not None:
            with torch.no_grad():
                to_t = lambda x: torch.as_tensor(x.transpose(2, 0, 1)[None], dtype=torch.float32)
                scores[t]["LPIPS"].append(float(perceptual(to_t(pred), to_t(gt))))
        bucket = per_subject.setdefault(subj, {}).setdefault(t, {"PSNR": [], "SSIM": []})
        bucket["PSNR"].append(p)
        bucket["SSIM"].append(s)

    means = {}
    for t in tasks:
        means[t] = {
            "PSNR": float(np.mean(scores[t]["PSNR"])) if scores[t]["PSNR"] else float("nan"),
            "SSIM": float(np.mean(scores[t]["SSIM"])) if scores[t]["SSIM"] else float("nan"),
            "LPIPS": float(np.mean(scores[t]["LPIPS"])) if scores[t]["LPIPS"] else None,
            "FID": None,
        }
    breakdown = {s: {t: {k: float(np.mean(v)) for k, v in m.items()} for t, m in d.items()} for s, d in per_subject.items()}
    counts = {t: len(scores[t]["PSNR"]) for t in tasks}
    return EvalReport(means, breakdown, config_hash, masked, counts)
