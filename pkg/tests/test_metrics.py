import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from posesynth._validation import InvalidArgumentError
from posesynth.evaluation import (
    MissingOutputsError,
    evaluate,
    in_protocol,
    output_path,
    read_kv,
    write_kv,
)
from posesynth.imageio import write_rgb
from posesynth.metrics import PSNR_CAP, LUMA, RandomConvPerceptual, psnr, ssim

import torch

images = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s).random((16, 16, 3)))


def test_psnr_closed_form_and_cap():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 1e-7) == PSNR_CAP
    with pytest.raises(InvalidArgumentError):
        psnr(a, np.zeros((4, 4)))
    with pytest.raises(InvalidArgumentError):
        psnr(a, a * np.nan)


@settings(max_examples=30, deadline=None)
@given(images, st.floats(0.01, 0.3), st.floats(1.1, 3.0))
def test_psnr_decreases_with_error(img, scale, factor):
    noise = np.random.default_rng(1).normal(size=img.shape)
    assert psnr(img, img + scale * noise) > psnr(img, img + factor * scale * noise)


@settings(max_examples=20, deadline=None)
@given(images, images)
def test_ssim_matches_reference_implementation(a, b):
    la, lb = a @ np.array(LUMA), b @ np.array(LUMA)
    ref = structural_similarity(la, lb, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(images, images)
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= s <= 1.0
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_ssim_of_constant_images(p, q):
    a, b = np.full((12, 12, 3), p), np.full((12, 12, 3), q)
    c1 = 0.01**2
    assert ssim(a, b) == pytest.approx((2 * p * q + c1) / (p * p + q * q + c1), abs=1e-9)


def test_ssim_ignores_channel_order_of_gray_images():
    g = np.random.default_rng(0).random((16, 16, 1)).repeat(3, -1)
    h = np.random.default_rng(1).random((16, 16, 1)).repeat(3, -1)
    assert ssim(g, h) == pytest.approx(ssim(g[..., ::-1], h[..., ::-1]), abs=1e-12)


def test_ssim_needs_a_full_window():
    with pytest.raises(InvalidArgumentError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_perceptual_distance_is_a_frozen_deterministic_distance():
    d = RandomConvPerceptual(seed=0)
    a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    assert float(d(a, a)) == 0.0
    assert float(d(a, b)) > 0 and float(d(a, b)) == pytest.approx(float(RandomConvPerceptual(seed=0)(a, b)))
    assert not any(p.requires_grad for p in d.parameters())


# evaluation --------------------------------------------------------------------


def test_protocol_membership():
    from types import SimpleNamespace as R
    assert in_protocol(R(view=1, frame=0), "novel_view") and not in_protocol(R(view=0, frame=0), "novel_view")
    assert in_protocol(R(view=0, frame=2), "novel_pose") and not in_protocol(R(view=1, frame=0), "novel_pose")
    assert in_protocol(R(view=0, frame=0), "novel_view", reference=(1, 0))
    with pytest.raises(InvalidArgumentError):
        in_protocol(R(view=0, frame=0), "other")


def _fake_run(run, manifest, fill):
    from posesynth.data import load_sequence
    run.mkdir(parents=True, exist_ok=True)
    write_kv(run / "manifest.txt", {"config_hash": "abc"})
    for s in manifest.subjects("test"):
        for rec in load_sequence(manifest, s, frames=[0, 1]).targets:
            p = output_path(run, s, rec.view, rec.frame)
            p.parent.mkdir(parents=True, exist_ok=True)
            write_rgb(p, fill(rec))


def test_evaluating_the_ground_truth_is_perfect(tiny_manifest, tmp_path):
    _fake_run(tmp_path, tiny_manifest, lambda r: r.image)
    rep = evaluate(tmp_path, tiny_manifest, frames=[0, 1])
    for task in ("novel_view", "novel_pose"):
        assert rep.tasks[task]["PSNR"] == PSNR_CAP
        assert rep.tasks[task]["SSIM"] == pytest.approx(1.0, abs=1e-12)
        assert rep.tasks[task]["LPIPS"] is None and rep.tasks[task]["FID"] is None
    assert rep.n_images == {"novel_view": 1, "novel_pose": 2}
    rep.write(tmp_path / "eval")
    kv = read_kv(tmp_path / "eval" / "report.txt")
    assert kv["config_hash"] == "abc" and kv["novel_view.lpips"] == "absent" and kv["novel_pose.fid"] == "absent"
    assert kv["subject_0001.novel_pose.psnr"] == "99.000000"
    table = (tmp_path / "eval" / "table.txt").read_text().splitlines()
    assert table[0].split()[0] == "Task" and len({len(l) for l in table}) == 1
    assert table[2].split()[-2:] == ["--", "--"]


def test_gray_prediction_matches_oracle(tiny_manifest, tmp_path):
    _fake_run(tmp_path, tiny_manifest, lambda r: np.full_like(r.image, 0.5))
    rep = evaluate(tmp_path, tiny_manifest, protocol="novel_view", frames=[0, 1])
    from posesynth.data import load_sequence
    rec = load_sequence(tiny_manifest, 1, frames=[0]).targets[1]
    assert rep.tasks["novel_view"]["PSNR"] == pytest.approx(psnr(np.full_like(rec.image, 128 / 255), rec.image))
    masked = evaluate(tmp_path, tiny_manifest, protocol="novel_view", frames=[0, 1], masked=True)
    gt = rec.image * rec.mask[..., None]
    pred = np.full_like(rec.image, 128 / 255) * rec.mask[..., None]
    assert masked.tasks["novel_view"]["PSNR"] == pytest.approx(psnr(pred, gt))
    assert masked.masked and set(masked.tasks) == {"novel_view"}


def test_perceptual_column_present_when_enabled(tiny_manifest, tmp_path):
    _fake_run(tmp_path, tiny_manifest, lambda r: r.image)
    rep = evaluate(tmp_path, tiny_manifest, frames=[0, 1], perceptual=RandomConvPerceptual())
    assert rep.tasks["novel_pose"]["LPIPS"] == pytest.approx(0.0, abs=1e-6)


def test_missing_outputs_are_listed(tiny_manifest, tmp_path):
    _fake_run(tmp_path, tiny_manifest, lambda r: r.image)
    output_path(tmp_path, 1, 1, 1).unlink()
    output_path(tmp_path, 1, 0, 1).unlink()
    with pytest.raises(MissingOutputsError) as err:
        evaluate(tmp_path, tiny_manifest, frames=[0, 1])
    assert len(err.value.missing) == 2 and "frame_0001" in str(err.value)
    with pytest.raises(MissingOutputsError):
        evaluate(tmp_path / "nope", tiny_manifest)
    with pytest.raises(InvalidArgumentError):
        evaluate(tmp_path, tiny_manifest, protocol="bogus")
