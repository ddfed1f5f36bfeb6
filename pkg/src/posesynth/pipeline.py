"""The seven pipeline commands, as plain functions of a ``RunConfig``.

Output tree under ``config.run.out``::

    data/                 generated dataset (manifest.txt, subject_XXXX/...)
    nerf/latest.zip       stage-1 checkpoint (resumable)
    coarse/               stage-1 renders: .img/.alpha/.mask/.normal.png + .meta.txt per view
    refiner/              phase1.zip, phase2.zip (the codec travels inside)
    infer/                refined rgb + normal images and manifest.txt
    eval/                 report.txt and table.txt
    ablate/<axis>/        one run per axis value plus table.txt

Each artifact directory holds ``config_hash.txt`` with the hash of the config
sections it depends on; work is refused when an existing hash differs.
"""

import logging
import shutil
from pathlib import Path

import numpy as np
import torch

from posesynth._validation import InvalidArgumentError, MissingPrerequisiteError
from posesynth.archive import read_manifest
from posesynth.body import CameraSpec, PosedBody
from posesynth.data import DatasetManifest, GeneratorConfig, generate_dataset, load_sequence, make_normal_source
from posesynth.data.generator import _fmt, frame_stem, subject_dir
from posesynth.evaluation import RUN_MANIFEST, evaluate, output_path, read_kv, write_kv
from posesynth.imageio import read_rgb, write_gray, write_mask, write_rgb
from posesynth.nerf import (
    CoarseHumanNeRF,
    LossWeights,
    NeRFConfig,
    NeRFTrainConfig,
    fit_nerf,
    load_nerf,
    save_nerf,
)
from posesynth.refiner import (
    DualBranchRefiner,
    RefinerConfig,
    RefinerTrainConfig,
    UNetConfig,
    build_examples,
    calibrate_codec,
    encode_examples,
    load_refiner,
    make_codec,
    refine,
    save_refiner,
    train_refiner,
)

log = logging.getLogger(__name__)

ABLATION_AXES = {
    "cond_strategy": ("conv_add", "concat"),
    "camera_inputs": ("rotation_only", "rotation_translation"),
    "mlgf_inputs": ("full", "no_texture", "no_normal_semantic"),
    "use_nerf_coarse": (True, False),
    "use_normal_branch": (True, False),
}


class Paths:
    def __init__(self, out):
        self.root = Path(out)
        self.data = self.root / "data"
        self.nerf = self.root / "nerf"
        self.nerf_ckpt = self.nerf / "latest.zip"
        self.coarse = self.root / "coarse"
        self.refiner = self.root / "refiner"
        self.infer = self.root / "infer"
        self.eval = self.root / "eval"
        self.ablate = self.root / "ablate"

    def phase(self, p):
        return self.refiner / f"phase{p}.zip"


def _claim(directory, digest, what):
    """Create ``directory`` stamped with ``digest``; refuse if stamped differently."""
    directory = Path(directory)
    stamp = directory / "config_hash.txt"
    if stamp.exists():
        old = stamp.read_text().strip()
        if old != digest:
            raise InvalidArgumentError(
                f"{directory} holds {what} from config {old}, current config is {digest}; "
                "use a fresh --out or restore the original config"
            )
    directory.mkdir(parents=True, exist_ok=True)
    stamp.write_text(digest + "\n")


def _require(path, what, command):
    if not Path(path).exists():
        raise MissingPrerequisiteError(f"{what} not found at {path}; run `posesynth {command}` first")


def _check_stamp(directory, digest, what):
    stamp = Path(directory) / "config_hash.txt"
    if stamp.exists() and stamp.read_text().strip() != digest:
        raise InvalidArgumentError(f"{directory} holds {what} from config {stamp.read_text().strip()}, current config is {digest}")


def generator_config(cfg):
    d = cfg.data
    return GeneratorConfig(d.resolution, d.n_views, d.n_frames, d.tex_size, d.n_joints, d.pose_scale, d.shape_scale)


def load_manifest(cfg):
    paths = Paths(cfg.run.out)
    _require(paths.data / "manifest.txt", "dataset", "gen-data")
    _check_stamp(paths.data, cfg.hash("data"), "a dataset")
    return DatasetManifest.load(paths.data)


def load_sequences(cfg, manifest, split, reference=(0, 0), views=None):
    frames = range(cfg.data.target_frames)
    if views is not None and max(views) >= cfg.data.n_views:
        raise InvalidArgumentError(f"views {list(views)} exceed the dataset's {cfg.data.n_views} views")
    return [load_sequence(manifest, s, frames=frames, views=views, reference=reference) for s in manifest.subjects(split)]


def first_views(cfg, n):
    if n is None:
        return None
    if not 1 <= n <= cfg.data.n_views:
        raise InvalidArgumentError(f"--views must lie in [1, {cfg.data.n_views}], got {n}")
    return list(range(n))


def _finished(ckpt):
    m = read_manifest(ckpt)
    return m.get("step", 0) >= m.get("target_steps", 0), m


# gen-data ----------------------------------------------------------------


def cmd_gen_data(cfg):
    paths = Paths(cfg.run.out)
    digest = cfg.hash("data")
    if (paths.data / "manifest.txt").exists():
        _check_stamp(paths.data, digest, "a dataset")
        log.info("dataset already present at %s", paths.data)
        return DatasetManifest.load(paths.data)
    _claim(paths.data, digest, "a dataset")
    return generate_dataset(paths.data, cfg.data.n_train, cfg.data.n_test, cfg.run.seed, generator_config(cfg))


# train-nerf --------------------------------------------------------------


def nerf_configs(cfg):
    n = cfg.nerf
    model_cfg = NeRFConfig(
        feature_channels=n.feature_channels, grid_size=n.grid_size, voxel_channels=n.voxel_channels,
        hidden=n.hidden, depth=n.depth, samples_train=n.samples_train, samples_eval=n.samples_eval, radius=n.radius,
    )
    train_cfg = NeRFTrainConfig(
        iterations=n.iterations, lr=n.lr, lr_final=n.lr_final, warmup=n.warmup, samples=n.samples_train,
        perceptual=n.perceptual, weights=LossWeights(n.lambda_mask, n.lambda_ssim, n.lambda_lpips), seed=cfg.run.seed,
    )
    return model_cfg, train_cfg


def cmd_train_nerf(cfg):
    paths = Paths(cfg.run.out)
    manifest = load_manifest(cfg)
    digest = cfg.hash("nerf")
    _claim(paths.nerf, digest, "a stage-1 model")
    sequences = load_sequences(cfg, manifest, "train")
    template = sequences[0].template
    model_cfg, train_cfg = nerf_configs(cfg)
    start, optimizer = 0, None
    if paths.nerf_ckpt.exists():
        model, start, optimizer = load_nerf(paths.nerf_ckpt, template, digest, with_optimizer=True)
        log.info("resuming stage-1 training at step %d", start)
    else:
        torch.manual_seed(cfg.run.seed)
        model = CoarseHumanNeRF(template, model_cfg)
    if start >= train_cfg.iterations:
        log.info("stage-1 training already complete (%d steps)", start)
        return model

    def checkpoint(step, m, opt):
        done = step + 1
        if done % max(cfg.nerf.checkpoint_every, 1) == 0 or done == train_cfg.iterations:
            save_nerf(paths.nerf_ckpt, m, done, digest, opt, target_steps=train_cfg.iterations)

    if optimizer is not None:
        optimizer.param_groups[0]["lr"] = train_cfg.lr
    _, history = fit_nerf(model, sequences, train_cfg, optimizer=optimizer, start_step=start, callback=checkpoint)
    with open(paths.nerf / "history.txt", "a") as f:
        for rec in history:
            f.write(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()) + "\n")
    return model


def load_trained_nerf(cfg, template):
    paths = Paths(cfg.run.out)
    _require(paths.nerf_ckpt, "stage-1 checkpoint", "train-nerf")
    done, meta = _finished(paths.nerf_ckpt)
    if not done:
        raise MissingPrerequisiteError(
            f"stage-1 checkpoint stopped at step {meta['step']} of {meta['target_steps']}; rerun `posesynth train-nerf` to finish"
        )
    model, _, _ = load_nerf(paths.nerf_ckpt, template, cfg.hash("nerf"))
    return model


# render-coarse -----------------------------------------------------------


def write_view_meta(path, view, frame, camera, pose, shape, reference=(0, 0)):
    lines = [
        f"view = {view}",
        f"frame = {frame}",
        f"reference = {reference[0]} {reference[1]}",
        f"width = {camera.width}",
        f"height = {camera.height}",
        f"K = {_fmt(camera.K)}",
        f"R = {_fmt(camera.R)}",
        f"t = {_fmt(camera.t)}",
        f"beta = {_fmt(shape)}",
        f"theta = {_fmt(pose)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_view_meta(path):
    kv = read_kv(path)
    arr = lambda k: np.array([float(x) for x in kv[k].split()])
    cam = CameraSpec(arr("K").reshape(3, 3), arr("R").reshape(3, 3), arr("t"), int(kv["width"]), int(kv["height"]))
    return {
        "view": int(kv["view"]), "frame": int(kv["frame"]), "reference": tuple(int(x) for x in kv["reference"].split()),
        "camera": cam, "beta": arr("beta"), "theta": arr("theta"),
    }


def coarse_stem(cfg, subject, view, frame):
    return subject_dir(Paths(cfg.run.out).coarse, subject) / frame_stem(view, frame)


def _coarse_current(stem, reference):
    meta = Path(f"{stem}.meta.txt")
    return meta.exists() and read_view_meta(meta)["reference"] == tuple(reference)


def cmd_render_coarse(cfg, reference=(0, 0)):
    """Render every train and test target from its subject's reference view."""
    paths = Paths(cfg.run.out)
    manifest = load_manifest(cfg)
    digest = cfg.hash("nerf")
    _check_stamp(paths.nerf, digest, "a stage-1 model")
    sequences = load_sequences(cfg, manifest, "train", reference) + load_sequences(cfg, manifest, "test", reference)
    model = load_trained_nerf(cfg, sequences[0].template)
    _claim(paths.coarse, f"{digest}-{cfg.refiner.normal_source}-{cfg.nerf.samples_eval}", "coarse renders")
    normals = make_normal_source(cfg.refiner.normal_source, sequences[0].template)
    written = 0
    for seq in sequences:
        ref = seq.reference
        with torch.no_grad():
            refmap = model.encode_reference(ref.image, ref.camera, ref.pose, ref.shape)
        for rec in seq.targets:
            stem = coarse_stem(cfg, seq.subject, rec.view, rec.frame)
            if _coarse_current(stem, reference):
                continue
            stem.parent.mkdir(parents=True, exist_ok=True)
            body = PosedBody(seq.template, rec.pose, rec.shape)
            with torch.no_grad():
                out = model.render_view(refmap, body, None, rec.camera, n_samples=cfg.nerf.samples_eval).numpy()
            write_rgb(f"{stem}.img.png", out.rgb)
            write_gray(f"{stem}.alpha.png", out.alpha)
            write_mask(f"{stem}.mask.png", out.mask)
            write_rgb(f"{stem}.normal.png", normals(out, rec.camera, body))
            # the sidecar goes last so its presence marks a complete record
            write_view_meta(f"{stem}.meta.txt", rec.view, rec.frame, rec.camera, rec.pose, rec.shape, reference)
            written += 1
    log.info("wrote %d coarse renders", written)
    return written


def load_coarse(cfg, sequence, reference=(0, 0)):
    """(view, frame) -> {"rgb", "normal"} from the coarse render directory."""
    out, missing = {}, []
    for rec in sequence.targets:
        stem = coarse_stem(cfg, sequence.subject, rec.view, rec.frame)
        if not _coarse_current(stem, reference):
            missing.append(f"{stem}.meta.txt")
            continue
        out[(rec.view, rec.frame)] = {"rgb": read_rgb(f"{stem}.img.png"), "normal": read_rgb(f"{stem}.normal.png")}
    if missing:
        ref = f" --reference {reference[0]},{reference[1]}" if tuple(reference) != (0, 0) else ""
        raise MissingPrerequisiteError(
            f"{len(missing)} coarse renders missing or made from another reference (first: {missing[0]}); "
            f"run `posesynth render-coarse{ref}` first"
        )
    return out


# train-refiner -----------------------------------------------------------


def refiner_model_config(cfg):
    r = cfg.refiner
    unet = UNetConfig(
        base_channels=r.base_channels, n_views=cfg.data.n_views, sparse_stride=r.sparse_stride,
        cond_strategy=r.cond_strategy, use_normal_branch=r.use_normal_branch,
    )
    return RefinerConfig(
        unet=unet, camera_inputs=12 if r.camera_inputs == "rotation_translation" else 9,
        mlgf_inputs=r.mlgf_inputs, reference_dropout=r.reference_dropout, guidance_scale=r.guidance_scale,
    )


def refiner_examples(cfg, manifest, split, reference=(0, 0), views=None, use_nerf_coarse=None):
    use_coarse = cfg.refiner.use_nerf_coarse if use_nerf_coarse is None else use_nerf_coarse
    examples = []
    for seq in load_sequences(cfg, manifest, split, reference, views):
        coarse = load_coarse(cfg, seq, reference) if use_coarse else {}
        examples += build_examples(seq, coarse, use_nerf_coarse=use_coarse, tex_size=cfg.data.tex_size)
    return examples


def make_run_codec(cfg, examples):
    """Codec for a refiner run, its latent scale fitted on the training targets."""
    codec = make_codec(cfg.refiner.codec)
    scale = calibrate_codec(codec, examples)
    log.info("%s codec latent scale %.4g", codec.kind, scale)
    return codec


def cmd_train_refiner(cfg, phase, views=None, refiner_dir=None):
    paths = Paths(cfg.run.out)
    refiner_dir = Path(refiner_dir or paths.refiner)
    phase = int(phase)
    if phase not in (1, 2):
        raise InvalidArgumentError(f"--phase must be 1 or 2, got {phase}")
    manifest = load_manifest(cfg)
    digest = cfg.hash("refiner")
    ckpt1, ckpt = refiner_dir / "phase1.zip", refiner_dir / f"phase{phase}.zip"
    if phase == 2:
        if not ckpt1.exists():
            raise MissingPrerequisiteError(
                f"phase 2 needs the phase 1 checkpoint {ckpt1}; run `posesynth train-refiner --phase 1` first"
            )
        done, m1 = _finished(ckpt1)
        if not done:
            raise MissingPrerequisiteError(
                f"phase 1 stopped at step {m1['step']} of {m1['target_steps']}; finish `posesynth train-refiner --phase 1` first"
            )
    _claim(refiner_dir, digest, "refiner checkpoints")
    examples = refiner_examples(cfg, manifest, "train", views=first_views(cfg, views))
    steps = cfg.refiner.phase1_steps if phase == 1 else cfg.refiner.phase2_steps
    train_cfg = RefinerTrainConfig(steps=steps, lr=cfg.refiner.lr, T=cfg.refiner.T, seed=cfg.run.seed * 10 + phase)

    start, optimizer, codec = 0, None, None
    if ckpt.exists():
        model, codec, meta, optimizer = load_refiner(ckpt, digest, with_optimizer=True)
        start = meta["step"]
        log.info("resuming refiner phase %d at step %d", phase, start)
    elif phase == 2:
        model, codec, _, _ = load_refiner(ckpt1, digest)
    else:
        torch.manual_seed(cfg.run.seed)
        model = DualBranchRefiner(refiner_model_config(cfg))
    # phase 2 and resumed runs keep the latent scale the model was trained with
    codec = codec or make_run_codec(cfg, examples)
    latents = encode_examples(codec, examples)
    if start >= steps:
        log.info("refiner phase %d already complete", phase)
        return model
    if optimizer is not None:
        for g in optimizer.param_groups:
            g["lr"] = train_cfg.lr

    def checkpoint(step, m, opt):
        done = step + 1
        if done % max(cfg.refiner.checkpoint_every, 1) == 0 or done == steps:
            save_refiner(ckpt, m, phase, done, digest, opt, codec, T=cfg.refiner.T,
                         target_steps=steps, use_nerf_coarse=cfg.refiner.use_nerf_coarse)

    _, history = train_refiner(model, latents, phase, train_cfg, optimizer=optimizer, start_step=start,
                               phase1_done=phase == 2, callback=checkpoint)
    with open(refiner_dir / f"history_phase{phase}.txt", "a") as f:
        for rec in history:
            f.write(f"step={rec['step']} loss={rec['loss']:.6g}\n")
    return model


def latest_refiner(cfg, refiner_dir=None):
    refiner_dir = Path(refiner_dir or Paths(cfg.run.out).refiner)
    for phase in (2, 1):
        ckpt = refiner_dir / f"phase{phase}.zip"
        if ckpt.exists() and _finished(ckpt)[0]:
            return ckpt
    raise MissingPrerequisiteError(f"no finished refiner checkpoint in {refiner_dir}; run `posesynth train-refiner --phase 1` first")


def make_toy_checkpoint(path, cfg, codec="linear"):
    """Seeded, untrained refiner checkpoint that runs without stage-1 renders.

    Stands in for a shipped toy checkpoint: it is regenerated on demand and
    bit-identical for a given config and seed.
    """
    torch.manual_seed(cfg.run.seed)
    model = DualBranchRefiner(refiner_model_config(cfg))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_refiner(path, model, 1, 0, cfg.hash("refiner"), codec=make_codec(codec), T=cfg.refiner.T,
                 target_steps=0, use_nerf_coarse=False, toy=True)
    return path


# infer -------------------------------------------------------------------


def cmd_infer(cfg, reference=(0, 0), targets=None, checkpoint=None, split=None, refiner_dir=None, out_dir=None):
    """Refine the target grid of ``split`` and write rgb + normal images with a run manifest.

    ``targets`` restricts the views per frame (default: all views). The
    checkpoint defaults to the latest finished phase in the run directory;
    an explicit checkpoint is used as-is and needs no config hash match.
    """
    paths = Paths(cfg.run.out)
    split = split or cfg.eval.split
    manifest = load_manifest(cfg)
    if checkpoint is None:
        checkpoint = latest_refiner(cfg, refiner_dir)
        model, codec, meta, _ = load_refiner(checkpoint, cfg.hash("refiner"))
    else:
        _require(checkpoint, "refiner checkpoint", "train-refiner")
        model, codec, meta, _ = load_refiner(checkpoint)
    codec = codec or make_codec("linear")
    use_coarse = meta.get("use_nerf_coarse", cfg.refiner.use_nerf_coarse)
    out_dir = Path(out_dir or paths.infer)
    out_dir.mkdir(parents=True, exist_ok=True)
    # outputs of an earlier run would otherwise be scored as if they were ours
    (out_dir / RUN_MANIFEST).unlink(missing_ok=True)
    for old in out_dir.glob("subject_*"):
        shutil.rmtree(old)
    examples = refiner_examples(cfg, manifest, split, reference, targets, use_nerf_coarse=use_coarse)
    n_written = 0
    for lat in encode_examples(codec, examples):
        ex = lat.example
        seed = cfg.run.seed * 1_000_003 + ex.subject * 1009 + ex.frame
        imgs = refine(model, codec, lat, n_steps=cfg.refiner.sample_steps, seed=seed, T=meta["schedule"]["T"],
                      view_attention=meta["phase"] == 2)
        for k, view in enumerate(ex.views):
            p = output_path(out_dir, ex.subject, view, ex.frame)
            p.parent.mkdir(parents=True, exist_ok=True)
            write_rgb(p, imgs["rgb"][k])
            # a single-branch model has no normal head; the coarse normal stands in
            normal = imgs["normal"][k] if "normal" in imgs else ex.coarse_normal[k].permute(1, 2, 0).numpy()
            write_rgb(output_path(out_dir, ex.subject, view, ex.frame, "normal"), normal)
            n_written += 1
    write_kv(out_dir / RUN_MANIFEST, {
        "config_hash": meta["config_hash"],
        "checkpoint": Path(checkpoint).name,
        "phase": meta["phase"],
        "seed": cfg.run.seed,
        "split": split,
        "reference": f"{reference[0]} {reference[1]}",
        "sample_steps": cfg.refiner.sample_steps,
        "images": n_written,
        "subjects": " ".join(str(s) for s in manifest.subjects(split)),
    })
    return out_dir


# eval --------------------------------------------------------------------


def cmd_eval(cfg, run=None, out_dir=None):
    paths = Paths(cfg.run.out)
    manifest = load_manifest(cfg)
    run = Path(run or paths.infer)
    reference = (0, 0)
    if (run / RUN_MANIFEST).exists():
        kv = read_kv(run / RUN_MANIFEST)
        if "reference" in kv:
            reference = tuple(int(x) for x in kv["reference"].split())
    report = evaluate(run, manifest, cfg.eval.protocol, cfg.eval.split, cfg.eval.masked, reference=reference,
                      frames=range(cfg.data.target_frames))
    report.write(out_dir or paths.eval)
    return report


# ablate ------------------------------------------------------------------


def axis_values(axis):
    if axis not in ABLATION_AXES:
        raise InvalidArgumentError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    return ABLATION_AXES[axis]


def ablation_configs(cfg, axis):
    """One config per axis value, identical to ``cfg`` elsewhere."""
    return [(v, cfg.override("refiner", **{axis: v})) for v in axis_values(axis)]


def _label(v):
    return ("on" if v else "off") if isinstance(v, bool) else str(v)


def cmd_ablate(cfg, axis):
    """Train, infer and evaluate one refiner per axis value; data and stage 1 are shared."""
    paths = Paths(cfg.run.out)
    load_manifest(cfg)
    root = paths.ablate / axis
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for value, sub in ablation_configs(cfg, axis):
        run = root / _label(value)
        run.mkdir(parents=True, exist_ok=True)
        sub.save(run / "config.ini")
        cmd_train_refiner(sub, 1, refiner_dir=run / "refiner")
        if sub.refiner.phase2_steps > 0:
            cmd_train_refiner(sub, 2, refiner_dir=run / "refiner")
        cmd_infer(sub, refiner_dir=run / "refiner", out_dir=run / "infer")
        report = cmd_eval(sub, run=run / "infer", out_dir=run / "eval")
        model, _, _, _ = load_refiner(latest_refiner(sub, run / "refiner"))
        rows.append((_label(value), model.camera_embed.in_dim, report))
    tasks = list(rows[0][2].tasks)
    head = f"{axis:<22}{'cam_in':>8}" + "".join(f"{t + ' PSNR':>18}{t + ' SSIM':>18}" for t in tasks)
    lines = [head, "-" * len(head)]
    for label, cam_in, rep in rows:
        cells = "".join(f"{rep.tasks[t]['PSNR']:>18.4f}{rep.tasks[t]['SSIM']:>18.4f}" for t in tasks)
        lines.append(f"{label:<22}{cam_in:>8}{cells}")
    table = "\n".join(lines) + "\n"
    (root / "table.txt").write_text(table)
    return table
