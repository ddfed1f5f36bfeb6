import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from posesynth._validation import InvalidArgumentError
from posesynth.body import CameraSpec
from posesynth.refiner import (
    CallCounter,
    CameraEmbedding,
    ConditionEncoder,
    DualBranchRefiner,
    MultiLayerGeometryFusion,
    MultiViewAttention,
    ReferenceAttention,
    RefinerConfig,
    RefinerTrainConfig,
    UNetConfig,
    ViewAttention1D,
    add_noise,
    attention,
    build_examples,
    calibrate_codec,
    camera_vector,
    combine_embeddings,
    ddim_step,
    encode_examples,
    load_refiner,
    make_codec,
    make_schedule,
    predict_clean,
    refine,
    sample,
    sampling_times,
    save_refiner,
    train_refiner,
    unet_forward,
    v_target,
    vpred_loss,
)
from posesynth.refiner.blocks import sparse_views
from posesynth.refiner.train import frozen_digests

TINY_UNET = UNetConfig(base_channels=8, n_views=2, groups=4)


def tiny_refiner(seed=0, **kw):
    torch.manual_seed(seed)
    return DualBranchRefiner(RefinerConfig(unet=kw.pop("unet", TINY_UNET), **kw))


def randomize(module, seed=0, std=0.1):
    """Fill every parameter (including zero-initialised ones) with noise."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * std)
    return module


@pytest.fixture(scope="module")
def examples(tiny_sequence):
    rng = np.random.default_rng(0)
    coarse = {}
    for r in tiny_sequence.targets:
        noisy = np.clip(r.image + rng.normal(0, 0.05, r.image.shape), 0, 1)
        coarse[(r.view, r.frame)] = {"rgb": noisy, "normal": r.normal}
    return build_examples(tiny_sequence, coarse, tex_size=32)


@pytest.fixture(scope="module")
def latents(examples):
    codec = make_codec("residual")
    calibrate_codec(codec, examples)
    return codec, encode_examples(codec, examples)


# schedule ---------------------------------------------------------------------


def test_schedule_is_variance_preserving():
    s = make_schedule(1000)
    assert np.abs(s.alpha**2 + s.sigma**2 - 1).max() < 1e-6
    assert np.all(np.diff(s.alpha) < 0) and np.all(np.diff(s.sigma) > 0)
    assert s.alpha[-1] < 1e-12


def test_schedule_rejects_bad_timesteps():
    s = make_schedule(100)
    for t in (0, 101, 2.5):
        with pytest.raises(InvalidArgumentError):
            s.coefficients(t)
    assert s.coefficients(0, allow_zero=True) == (1.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        make_schedule(1)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**31 - 1))
def test_velocity_identities(t, seed):
    s = make_schedule(1000)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(3, 4, 2, 2, generator=gen, dtype=torch.float64)
    eps = torch.randn(3, 4, 2, 2, generator=gen, dtype=torch.float64)
    x_t = add_noise(x, eps, t, s)
    v = v_target(x, eps, t, s)
    x0, e0 = predict_clean(x_t, v, t, s)
    assert float((x0 - x).abs().max()) < 1e-6 and float((e0 - eps).abs().max()) < 1e-6


def test_sampling_grid():
    g = sampling_times(1000, 50)
    assert len(g) == 51 and g[0] == 1000 and g[-2] == 1 and g[-1] == 0
    assert np.all(np.diff(g) < 0)
    assert list(sampling_times(10, 1)) == [10, 0]
    with pytest.raises(InvalidArgumentError):
        sampling_times(10, 11)


def test_ddim_with_oracle_velocity_recovers_data():
    s = make_schedule(1000)
    x = torch.randn(2, 4, 3, 3, dtype=torch.float64)
    x_t = torch.randn(2, 4, 3, 3, dtype=torch.float64)
    times = sampling_times(1000, 7)
    for t, t_next in zip(times[:-1], times[1:]):
        a, sg = s.coefficients(int(t))
        eps = (x_t - a * x) / sg
        x_t = ddim_step(x_t, v_target(x, eps, int(t), s), int(t), int(t_next), s)
    assert float((x_t - x).abs().max()) < 1e-9


# conditioning blocks ------------------------------------------------------------


def test_condition_encoder_channels_and_zero_output():
    enc = ConditionEncoder()
    assert enc.channel_sequence == (16, 16, 32, 32, 96, 96, 256, 320)
    assert enc.convs[0].in_channels == 4
    assert bool((enc.convs[-1].weight == 0).all()) and bool((enc.convs[-1].bias == 0).all())
    out = enc(torch.randn(2, 4, 8, 8))
    assert out.shape == (2, 320, 8, 8) and bool((out == 0).all())
    with pytest.raises(InvalidArgumentError):
        enc(torch.randn(2, 3, 8, 8))


def test_geometry_fusion_is_a_sum_of_branches():
    torch.manual_seed(0)
    mlgf = randomize(MultiLayerGeometryFusion(32), std=0.05)
    maps = {k: torch.rand(2, 3, 32, 32) for k in ("texture", "normal", "semantic")}
    total = mlgf(maps)
    assert total.shape == (2, 32, 4, 4)
    parts = sum(mlgf.branches[k](maps[k]) for k in maps)
    torch.testing.assert_close(total, parts)
    with pytest.raises(InvalidArgumentError):
        mlgf({"texture": maps["texture"]})


def test_geometry_fusion_subset_ignores_other_maps():
    mlgf = randomize(MultiLayerGeometryFusion(16, kinds=("texture",)))
    maps = {"texture": torch.rand(1, 3, 16, 16)}
    a = mlgf(maps)
    b = mlgf({**maps, "normal": torch.rand(1, 3, 16, 16)})
    assert torch.equal(a, b)


def test_geometry_fusion_starts_at_zero():
    out = MultiLayerGeometryFusion(8)({k: torch.rand(1, 3, 16, 16) for k in ("texture", "normal", "semantic")})
    assert bool((out == 0).all())


def test_camera_vector_layout():
    R = CameraSpec.look_at([0.3, -0.2, 2.0], [0, 0, 0]).R
    t = np.array([0.1, 0.2, 0.3])
    v = camera_vector(R, t)
    np.testing.assert_array_equal(v, np.concatenate([R, t[:, None]], 1).ravel())
    np.testing.assert_array_equal(camera_vector(R, t, rotation_only=True), R.ravel())
    with pytest.raises(InvalidArgumentError):
        camera_vector(R * 1.1, t)


def test_camera_embedding_widths():
    assert CameraEmbedding(9).fc1.in_features == 9
    assert CameraEmbedding(12).fc1.in_features == 12
    with pytest.raises(InvalidArgumentError):
        CameraEmbedding(10)
    with pytest.raises(InvalidArgumentError):
        CameraEmbedding(12)(torch.zeros(2, 9))
    with pytest.raises(InvalidArgumentError):
        combine_embeddings(torch.zeros(2, 8), torch.zeros(2, 4))


# attention ---------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 1000))
def test_attention_rows_sum_to_one(n, c, seed):
    gen = torch.Generator().manual_seed(seed)
    q, k, v = (torch.randn(2, n, c, generator=gen, dtype=torch.float64) for _ in range(3))
    _, w = attention(q, k, v, return_weights=True)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, n, dtype=torch.float64))


@pytest.mark.parametrize("perm", list(itertools.permutations(range(3)))[1:])
def test_view_attention_is_permutation_equivariant(perm):
    attn = randomize(ViewAttention1D(8), std=0.3).double()
    feat = torch.randn(3, 8, 4, 4, dtype=torch.float64)
    with torch.no_grad():
        a = attn(feat)[list(perm)]
        b = attn(feat[list(perm)])
    torch.testing.assert_close(a, b)


def test_view_attention_keeps_pixels_apart():
    attn = randomize(ViewAttention1D(8), std=0.3).double()
    feat = torch.randn(3, 8, 4, 4, dtype=torch.float64)
    pert = feat.clone()
    pert[1, :, 2, 3] += 1.0
    with torch.no_grad():
        d = (attn(pert) - attn(feat)).abs().sum((0, 1))
    mask = torch.ones(4, 4, dtype=torch.bool)
    mask[2, 3] = False
    assert float(d[2, 3]) > 0 and float(d[mask].max()) == 0.0


def test_view_attention_copies_identical_views():
    attn = randomize(ViewAttention1D(8), std=0.3)
    one = torch.randn(1, 8, 4, 4)
    with torch.no_grad():
        out = attn(one.expand(3, -1, -1, -1).contiguous())
    torch.testing.assert_close(out[0], out[1])
    torch.testing.assert_close(out[0], out[2])


def test_multiview_attention_sparse_subset():
    assert sparse_views(4, 2) == [0, 2] and sparse_views(5, 2) == [0, 2, 4] and sparse_views(3, 1) == [0, 1, 2]
    attn = randomize(MultiViewAttention(8, stride=2), std=0.3)
    feat = torch.randn(4, 8, 3, 3)
    with torch.no_grad():
        out = attn(feat)
    assert torch.equal(out[1], feat[1]) and torch.equal(out[3], feat[3])
    assert not torch.equal(out[0], feat[0]) and not torch.equal(out[2], feat[2])


def test_reference_attention_shapes():
    attn = ReferenceAttention(8)
    feat = torch.randn(2, 8, 4, 4)
    assert torch.equal(attn(feat, None), attn(feat, torch.zeros(1, 8, 4, 4)))
    with pytest.raises(InvalidArgumentError):
        attn(feat, torch.zeros(1, 4, 4, 4))


def test_zero_initialised_attention_is_identity():
    feat = torch.randn(4, 8, 3, 3)
    with torch.no_grad():
        assert torch.equal(ViewAttention1D(8)(feat), feat)
        assert torch.equal(MultiViewAttention(8)(feat), feat)
        assert torch.equal(ReferenceAttention(8)(feat, torch.randn(1, 8, 3, 3)), feat)


# full model ----------------------------------------------------------------------


def _bundle(model, lat):
    return model.build_bundle(lat.coarse, lat.example.geo, lat.example.cameras, lat.ref)


def test_reference_cache_routing(latents):
    _, lats = latents
    model = tiny_refiner()
    with torch.no_grad():
        raw = model.reference_network_forward(lats[0].ref["rgb"])
        b1, b2 = _bundle(model, lats[0]), _bundle(model, lats[0])
    assert set(raw) == {"down0", "down1", "mid", "up1", "up0"}
    assert raw["down0"].shape == (1, 8, 8, 8) and raw["down1"].shape == (1, 16, 4, 4)
    assert set(b1.ref_cache) == set(model.unet.site_names)
    assert len(model.unet.site_names) == 7
    for k in b1.ref_cache:
        assert torch.equal(b1.ref_cache[k], b2.ref_cache[k])


def test_zeroed_conditioning_is_a_no_op_at_init(latents):
    _, lats = latents
    model = tiny_refiner().eval()
    lat = lats[0]
    noisy = {d: torch.randn_like(lat.latents[d]) for d in model.domains}
    with torch.no_grad():
        bundle = _bundle(model, lat)
        a = model(noisy, bundle, 500)
        b = model(noisy, bundle.zeroed(), 500)
    for d in model.domains:
        assert torch.equal(a[d], b[d])


def test_domains_swap_with_identical_branches(latents):
    _, lats = latents
    model = tiny_refiner()
    randomize(model.unet, std=0.05)
    model.unet.branches["normal"].load_state_dict(model.unet.branches["rgb"].state_dict())
    lat = lats[0]
    with torch.no_grad():
        bundle = _bundle(model, lat)
        bundle.features["normal"] = bundle.features["rgb"]
        for k in ("down0", "up0"):
            bundle.ref_cache[f"{k}.normal"] = bundle.ref_cache[f"{k}.rgb"]
        x, y = torch.randn_like(lat.latents["rgb"]), torch.randn_like(lat.latents["rgb"])
        a_rgb, a_nrm = unet_forward(model, x, y, bundle, 300)
        b_rgb, b_nrm = unet_forward(model, y, x, bundle, 300)
    torch.testing.assert_close(a_rgb, b_nrm)
    torch.testing.assert_close(a_nrm, b_rgb)


def test_camera_changes_output(latents):
    _, lats = latents
    model = tiny_refiner()
    lat = lats[0]
    noisy = {d: torch.randn_like(lat.latents[d]) for d in model.domains}
    with torch.no_grad():
        b1 = _bundle(model, lat)
        b2 = model.build_bundle(lat.coarse, lat.example.geo, lat.example.cameras[::-1], lat.ref)
        a, b = model(noisy, b1, 200), model(noisy, b2, 200)
    assert not torch.equal(a["rgb"], b["rgb"])


def test_bundle_view_count_checked(latents):
    _, lats = latents
    model = tiny_refiner()
    lat = lats[0]
    with torch.no_grad():
        bundle = _bundle(model, lat)
        noisy = {d: torch.randn(3, 4, 8, 8) for d in model.domains}
        with pytest.raises(InvalidArgumentError):
            model(noisy, bundle, 10)


def test_concat_strategy_and_single_branch(latents):
    _, lats = latents
    lat = lats[0]
    for unet in (UNetConfig(base_channels=8, groups=4, cond_strategy="concat"),
                 UNetConfig(base_channels=8, groups=4, use_normal_branch=False)):
        model = tiny_refiner(unet=unet)
        with torch.no_grad():
            out = model({d: lat.latents[d] for d in model.domains}, _bundle(model, lat), 10)
        assert set(out) == set(model.domains)
        assert all(v.shape == lat.latents["rgb"].shape for v in out.values())


# loss and sampling ----------------------------------------------------------------


class _ZeroModel(torch.nn.Module):
    def forward(self, noisy, bundle, t, **kw):
        return {d: torch.zeros_like(x) for d, x in noisy.items()}


class _AffineHead(torch.nn.Module):
    """Ten parameters: per-channel gain and bias plus two cross terms."""

    def __init__(self):
        super().__init__()
        gen = torch.Generator().manual_seed(3)
        self.w = torch.nn.Parameter(torch.randn(4, generator=gen, dtype=torch.float64))
        self.b = torch.nn.Parameter(torch.randn(4, generator=gen, dtype=torch.float64))
        self.c = torch.nn.Parameter(torch.randn(2, generator=gen, dtype=torch.float64))

    def forward(self, noisy, bundle, t, **kw):
        out = {}
        for d, x in noisy.items():
            y = x * self.w.view(1, 4, 1, 1) + self.b.view(1, 4, 1, 1)
            out[d] = torch.tanh(y) + self.c[0] * x.roll(1, 1) * self.c[1]
        return out


def test_vpred_loss_with_zero_model_is_mean_square_velocity():
    s = make_schedule(1000)
    x = {"rgb": torch.randn(2, 4, 3, 3, dtype=torch.float64), "normal": torch.randn(2, 4, 3, 3, dtype=torch.float64)}
    gen = torch.Generator().manual_seed(5)
    loss = vpred_loss({"latents": x, "bundle": None}, _ZeroModel(), s, t=250, generator=gen)
    gen = torch.Generator().manual_seed(5)
    expect = []
    for d in x:
        eps = torch.randn(x[d].shape, generator=gen, dtype=torch.float64)
        expect.append(float((v_target(x[d], eps, 250, s) ** 2).mean()))
    assert float(loss) == pytest.approx(np.mean(expect), rel=1e-12)


def test_vpred_loss_gradient_matches_finite_differences():
    s = make_schedule(1000)
    head = _AffineHead()
    x = {"rgb": torch.randn(2, 4, 3, 3, dtype=torch.float64)}

    def loss():
        return vpred_loss({"latents": x, "bundle": None}, head, s, t=400, generator=torch.Generator().manual_seed(9))

    params = list(head.parameters())
    grads = torch.autograd.grad(loss(), params)
    analytic = torch.cat([g.reshape(-1) for g in grads]).numpy()
    flat = torch.nn.utils.parameters_to_vector(params).detach()
    fd = np.zeros(flat.numel())
    h = 1e-6
    with torch.no_grad():
        for i in range(flat.numel()):
            for sign in (1, -1):
                v = flat.clone()
                v[i] += sign * h
                torch.nn.utils.vector_to_parameters(v, params)
                fd[i] += sign * float(loss())
            fd[i] /= 2 * h
    assert flat.numel() == 10
    assert np.linalg.norm(analytic - fd) / np.linalg.norm(fd) < 1e-3


class _OracleModel(torch.nn.Module):
    """Velocity that points every noisy latent at a fixed clean target."""

    def __init__(self, target, sched):
        super().__init__()
        self.target, self.sched = target, sched

    def forward(self, noisy, bundle, t, **kw):
        a, s = self.sched.coefficients(t)
        out = {}
        for d, x_t in noisy.items():
            eps = (x_t - a * self.target[d]) / s
            out[d] = a * eps - s * self.target[d]
        return out


def test_one_step_sampling_with_oracle_hits_target():
    s = make_schedule(1000)
    target = {"rgb": torch.randn(2, 4, 8, 8), "normal": torch.randn(2, 4, 8, 8)}
    out = sample(_OracleModel(target, s), None, s, n_steps=1, seed=0, shape=(2, 4, 8, 8))
    for d in target:
        torch.testing.assert_close(out[d], target[d], atol=1e-5, rtol=0)


def test_sampling_is_seeded(latents):
    codec, lats = latents
    model = tiny_refiner()
    a = refine(model, codec, lats[0], n_steps=3, seed=1, view_attention=False)
    b = refine(model, codec, lats[0], n_steps=3, seed=1, view_attention=False)
    c = refine(model, codec, lats[0], n_steps=3, seed=2, view_attention=False)
    assert np.array_equal(a["rgb"], b["rgb"]) and np.array_equal(a["normal"], b["normal"])
    assert not np.array_equal(a["rgb"], c["rgb"])


# codec ---------------------------------------------------------------------------


def test_linear_codec_is_linear_and_invertible_on_latents():
    codec = make_codec("linear")
    x, y = torch.rand(2, 3, 16, 16, dtype=torch.float64), torch.rand(2, 3, 16, 16, dtype=torch.float64)
    torch.testing.assert_close(codec.encode(2 * x - 0.5 * y), 2 * codec.encode(x) - 0.5 * codec.encode(y))
    z = torch.randn(2, 4, 2, 2, dtype=torch.float64)
    torch.testing.assert_close(codec.encode(codec.decode(z)), z)


def test_linear_codec_colour_rows_are_block_means():
    codec = make_codec("linear")
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    z = codec.encode(x)
    means = x.unfold(2, 8, 8).unfold(3, 8, 8).mean((-1, -2))
    torch.testing.assert_close(z[:, :3], means)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_anchored_codec_never_worse_than_anchor(seed):
    gen = torch.Generator().manual_seed(seed)
    codec = make_codec("residual")
    x = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    anchor = (x + 0.2 * torch.randn(x.shape, generator=gen, dtype=torch.float64)).clamp(0, 1)
    rec = codec.decode(codec.encode(x, anchor), anchor)
    assert float(((rec - x) ** 2).sum()) <= float(((anchor - x) ** 2).sum()) + 1e-12


def test_codec_calibration_gives_unit_variance(examples):
    codec = make_codec("residual")
    scale = calibrate_codec(codec, examples)
    assert scale > 0
    z = torch.cat([codec.encode(e.target_rgb, e.coarse_rgb) for e in examples]
                  + [codec.encode(e.target_normal, e.coarse_normal) for e in examples])
    assert float(z.std()) == pytest.approx(1.0, rel=1e-4)


def test_codec_rejects_bad_sizes():
    with pytest.raises(InvalidArgumentError):
        make_codec("linear").encode(torch.rand(1, 3, 12, 16))
    with pytest.raises(InvalidArgumentError):
        make_codec("learned")


# two-phase training ----------------------------------------------------------------


def test_phase_one_never_touches_view_attention(latents):
    _, lats = latents
    model = tiny_refiner()
    CallCounter.reset()
    train_refiner(model, lats, 1, RefinerTrainConfig(steps=2, T=100))
    assert CallCounter.total() == 0
    train_refiner(model, lats, 2, RefinerTrainConfig(steps=1, T=100), phase1_done=True)
    assert CallCounter.calls["view_1d"] > 0 and CallCounter.calls["multiview"] > 0


def test_phase_two_freezes_fusion_encoders_and_reference(latents):
    _, lats = latents
    model = tiny_refiner()
    randomize(model.cond_encoders, std=0.02)
    randomize(model.mlgf, std=0.02)
    before = frozen_digests(model)
    unet_before = [p.detach().clone() for p in model.denoiser_parameters()]
    train_refiner(model, lats, 2, RefinerTrainConfig(steps=2, T=100), phase1_done=True)
    assert frozen_digests(model) == before
    changed = [not torch.equal(a, b) for a, b in zip(unet_before, model.denoiser_parameters())]
    assert any(changed)
    assert model.camera_embed.fc1.weight.grad is not None


def test_phase_two_needs_phase_one(latents):
    _, lats = latents
    with pytest.raises(InvalidArgumentError, match="phase 1"):
        train_refiner(tiny_refiner(), lats, 2, RefinerTrainConfig(steps=1))


def test_refiner_checkpoint_round_trip(latents, tmp_path):
    codec, lats = latents
    model = tiny_refiner()
    opt, _ = train_refiner(model, lats, 1, RefinerTrainConfig(steps=1, T=100))
    save_refiner(tmp_path / "r.zip", model, 1, 1, "h", opt, codec, T=100)
    loaded, codec2, meta, opt2 = load_refiner(tmp_path / "r.zip", "h", with_optimizer=True)
    assert meta["phase"] == 1 and meta["step"] == 1 and meta["schedule"]["T"] == 100
    assert float(codec2.scale) == float(codec.scale) and codec2.kind == "residual"
    for (k, a), b in zip(model.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(a, b), k
    assert opt2.state_dict()["state"].keys() == opt.state_dict()["state"].keys()
    with pytest.raises(InvalidArgumentError):
        load_refiner(tmp_path / "r.zip", "other")
