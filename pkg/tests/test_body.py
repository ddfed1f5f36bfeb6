import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posesynth._validation import InvalidArgumentError
from posesynth.body import (
    BodyPose,
    BodyShape,
    CameraSpec,
    PosedBody,
    UVTexture,
    complete_texture,
    correspondence_map,
    forward_lbs,
    inverse_lbs,
    load_template,
    make_template,
    part_palette,
    project_to_uv,
    rasterize,
    rasterize_condition_maps,
    rodrigues,
    save_template,
    single_joint_template,
    warp_texture,
)


@pytest.fixture(scope="module")
def template():
    return make_template()


def random_pose(rng, n_joints=8, scale=0.4):
    return rng.normal(0.0, scale, 3 * n_joints)


def naive_lbs(template, theta, beta):
    """Per-vertex loop: sum_j w_vj G_j(theta) x_v, built from scratch."""
    shaped = template.vertices + np.tensordot(beta, template.shape_basis, axes=1)
    W = template.skin_weights
    reg = W.T / W.T.sum(1, keepdims=True)
    joints = template.joints + reg @ (shaped - template.vertices)
    G = []
    for j in range(template.n_joints):
        angle = np.linalg.norm(theta[3 * j : 3 * j + 3])
        if angle == 0:
            R = np.eye(3)
        else:
            k = theta[3 * j : 3 * j + 3] / angle
            Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
            R = np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * Kx @ Kx
        M = np.eye(4)
        M[:3, :3] = R
        p = template.parents[j]
        M[:3, 3] = joints[j] - (joints[p] if p >= 0 else 0)
        G.append(M if p < 0 else G[p] @ M)
    out = np.zeros_like(shaped)
    for v in range(template.n_vertices):
        acc = np.zeros(3)
        for j in range(template.n_joints):
            x = np.append(shaped[v] - joints[j], 1.0)
            acc += W[v, j] * (G[j] @ x)[:3]
        out[v] = acc
    return out


class TestTemplate:
    def test_skin_weights_partition_of_unity(self, template):
        assert np.abs(template.skin_weights.sum(1) - 1).max() < 1e-6
        assert template.skin_weights.min() >= 0

    def test_shape_basis_orthogonal(self, template):
        B = template.shape_basis.reshape(10, -1)
        G = B @ B.T
        assert np.allclose(G, np.diag(np.diag(G)), atol=1e-9)

    def test_twenty_four_joint_skeleton(self):
        t = make_template(n_joints=24)
        assert t.n_joints == 24
        v = forward_lbs(t, np.zeros(72))
        assert np.array_equal(v, t.vertices)

    def test_rejects_cycle_and_bad_faces(self, template):
        arrays = template.arrays()
        arrays["parents"] = np.array([-1, 0, 1, 2, 2, 2, 0, 7])
        with pytest.raises(InvalidArgumentError):
            type(template)(**arrays)
        arrays = template.arrays()
        arrays["faces"] = arrays["faces"].copy()
        arrays["faces"][0, 0] = template.n_vertices
        with pytest.raises(InvalidArgumentError):
            type(template)(**arrays)

    def test_archive_round_trip(self, template, tmp_path):
        save_template(tmp_path / "t.npz", template)
        loaded = load_template(tmp_path / "t.npz")
        for k, v in template.arrays().items():
            assert np.array_equal(v, getattr(loaded, k))

    def test_types_validate(self):
        with pytest.raises(InvalidArgumentError):
            BodyShape(np.zeros(9))
        with pytest.raises(InvalidArgumentError):
            BodyPose(np.zeros(7))
        with pytest.raises(InvalidArgumentError):
            BodyShape([np.nan] + [0] * 9)


class TestForwardLBS:
    def test_rest_pose_fixed_point(self, template):
        assert np.array_equal(forward_lbs(template, BodyPose.zeros(8), BodyShape.zeros()), template.vertices)

    def test_single_joint_rigid_rotation(self):
        rng = np.random.default_rng(1)
        verts = rng.normal(size=(30, 3))
        t = single_joint_template(verts, [[0, 1, 2]])
        out = forward_lbs(t, [0, 0, np.pi / 2])
        Rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
        assert np.allclose(out, verts @ Rz.T, atol=1e-12)

    def test_matches_naive_per_vertex_loop(self, template):
        rng = np.random.default_rng(2)
        theta, beta = random_pose(rng), rng.normal(size=10)
        assert np.allclose(forward_lbs(template, theta, beta), naive_lbs(template, theta, beta), atol=1e-10)

    def test_dimension_mismatch(self, template):
        with pytest.raises(InvalidArgumentError):
            forward_lbs(template, np.zeros(72))

    def test_root_rotation_is_rigid(self, template):
        rng = np.random.default_rng(3)
        rotvec = rng.normal(size=3)
        theta = np.zeros(24)
        theta[:3] = rotvec
        R = rodrigues(rotvec)[0]
        assert np.abs(forward_lbs(template, theta) - template.vertices @ R.T).max() < 1e-6


class TestInverseLBS:
    def test_identity_pose(self, template):
        rng = np.random.default_rng(4)
        pts = template.vertices[rng.choice(template.n_vertices, 50)] + rng.normal(0, 0.01, (50, 3))
        canon, valid = inverse_lbs(pts, None, None, template)
        assert np.array_equal(canon, pts)
        assert valid.all()

    def test_round_trip_on_vertices(self, template):
        rng = np.random.default_rng(5)
        for _ in range(5):
            theta, beta = random_pose(rng), rng.normal(size=10)
            canon, valid = inverse_lbs(forward_lbs(template, theta, beta), theta, beta, template)
            assert valid.all()
            assert np.abs(canon - template.vertices).max() < 1e-5

    def test_off_surface_matches_exhaustive_nearest_vertex(self, template):
        rng = np.random.default_rng(6)
        theta, beta = random_pose(rng), rng.normal(size=10)
        body = PosedBody(template, theta, beta)
        pts = body.vertices[rng.choice(template.n_vertices, 40)] + rng.normal(0, 0.015, (40, 3))
        canon, valid = inverse_lbs(pts, theta, beta, template)
        d = np.linalg.norm(pts[:, None] - body.vertices[None], axis=-1)
        nn = d.argmin(1)
        T = body.vertex_transforms[nn]
        expected = np.stack(
            [np.linalg.inv(T[i])[:3] @ np.append(pts[i], 1) for i in range(len(pts))]
        ) - body.displacement[nn]
        assert np.allclose(canon, expected, atol=1e-10)
        assert np.array_equal(valid, d.min(1) <= 0.05)

    def test_far_point_flagged(self, template):
        _, valid = inverse_lbs(np.array([[5.0, 5.0, 5.0]]), None, None, template)
        assert not valid[0]


@st.composite
def small_images(draw):
    H = draw(st.integers(2, 6))
    W = draw(st.integers(2, 6))
    seed = draw(st.integers(0, 2**16))
    return H, W, np.random.default_rng(seed)


class TestProjectToUV:
    def test_empty_silhouette(self):
        img = np.random.default_rng(0).random((5, 5, 3))
        tex = project_to_uv(img, np.full((5, 5, 2), 0.3), np.zeros((5, 5), bool), tex_size=8)
        assert not tex.validity.any()
        assert not tex.texels.any()

    def test_single_pixel(self):
        tex = project_to_uv(np.array([[[0.2, 0.4, 0.6]]]), np.array([[[0.3, 0.7]]]), np.ones((1, 1), bool), 10)
        assert tex.validity.sum() == 1 and tex.validity[7, 3]
        assert np.allclose(tex.texels[7, 3], [0.2, 0.4, 0.6])

    def test_collision_keeps_nearest_depth(self):
        img = np.array([[[1.0, 0, 0], [0, 1.0, 0]]])
        d = np.full((1, 2, 2), 0.5)
        tex = project_to_uv(img, d, np.ones((1, 2), bool), 4, depth=np.array([[2.0, 1.0]]))
        assert np.allclose(tex.texels[2, 2], [0, 1, 0])

    @settings(max_examples=30, deadline=None)
    @given(small_images())
    def test_pixels_outside_silhouette_are_ignored(self, params):
        H, W, rng = params
        img = rng.random((H, W, 3))
        d = rng.random((H, W, 2))
        s = rng.random((H, W)) < 0.5
        base = project_to_uv(img, d, s, 8)
        img2 = img.copy()
        img2[~s] = rng.random(((~s).sum(), 3))
        d2 = d.copy()
        d2[~s] = rng.random(((~s).sum(), 2))
        other = project_to_uv(img2, d2, s, 8)
        assert np.array_equal(base.texels, other.texels)
        assert np.array_equal(base.validity, other.validity)


def nearest_seed_oracle(tex):
    U = tex.size
    seeds = np.argwhere(tex.validity)
    out = tex.texels.copy()
    for r in range(U):
        for c in range(U):
            if tex.validity[r, c]:
                continue
            d = np.abs(seeds[:, 0] - r) + np.abs(seeds[:, 1] - c)
            best = seeds[d == d.min()]
            idx = best[:, 0] * U + best[:, 1]
            sr, sc = divmod(idx.min(), U)
            out[r, c] = tex.texels[sr, sc]
    return out


class TestCompleteTexture:
    def test_fully_valid_unchanged(self):
        rng = np.random.default_rng(0)
        tex = UVTexture(rng.random((8, 8, 3)), np.ones((8, 8), bool))
        out = complete_texture(tex)
        assert np.array_equal(out.texels, tex.texels)

    def test_single_seed_floods(self):
        valid = np.zeros((9, 9), bool)
        valid[4, 2] = True
        texels = np.zeros((9, 9, 3))
        texels[4, 2] = [0.1, 0.5, 0.9]
        out = complete_texture(UVTexture(texels, valid))
        assert out.validity.all()
        assert np.allclose(out.texels, [0.1, 0.5, 0.9])

    def test_checkerboard_matches_oracle(self):
        rng = np.random.default_rng(1)
        U = 12
        rr, cc = np.mgrid[0:U, 0:U]
        valid = ((rr // 3 + cc // 3) % 2) == 0
        tex = UVTexture(rng.random((U, U, 3)), valid)
        assert np.array_equal(complete_texture(tex).texels, nearest_seed_oracle(tex))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**16), st.floats(0.02, 0.6))
    def test_random_masks_match_oracle_and_idempotent(self, seed, p):
        rng = np.random.default_rng(seed)
        valid = rng.random((10, 10)) < p
        valid[rng.integers(10), rng.integers(10)] = True
        tex = UVTexture(rng.random((10, 10, 3)), valid)
        once = complete_texture(tex)
        assert np.array_equal(once.texels, nearest_seed_oracle(tex))
        assert np.array_equal(once.texels[valid], tex.texels[valid])
        twice = complete_texture(once)
        assert np.array_equal(twice.texels, once.texels)

    def test_no_valid_texels(self):
        with pytest.raises(InvalidArgumentError):
            complete_texture(UVTexture(np.zeros((4, 4, 3)), np.zeros((4, 4), bool)))


def facing_triangle(z=0.0, size=10.0):
    return np.array([[-size, -size, z], [size, -size, z], [0.0, size, z]])


class TestRasterize:
    def test_camera_behind_body_is_empty(self, template):
        cam = CameraSpec.look_at((0, 0, 3), (0, 0, 6))
        tex = UVTexture(np.full((8, 8, 3), 0.5), np.ones((8, 8), bool))
        assert not warp_texture(tex, None, None, cam, template).any()

    def test_flat_triangle_constant_texture_and_normal(self):
        t = single_joint_template(facing_triangle(), [[0, 1, 2]], uv=np.full((3, 2), 0.5))
        cam = CameraSpec.look_at((0, 0, 3), (0, 0, 0))
        tex = UVTexture(np.full((4, 4, 3), [0.25, 0.5, 0.75]), np.ones((4, 4), bool))
        maps = rasterize_condition_maps(t, None, None, cam, tex)
        m = maps.mask
        assert m.all()
        assert np.allclose(maps.texture[m], [0.25, 0.5, 0.75])
        assert np.allclose(maps.normal[m], [0.5, 0.5, 1.0])

    def test_two_parts_palette(self):
        left = facing_triangle(size=0.4) + [-0.6, 0, 0]
        right = facing_triangle(size=0.4) + [0.6, 0, 0]
        t = single_joint_template(
            np.concatenate([left, right]), [[0, 1, 2], [3, 4, 5]], part_labels=np.array([1, 1, 1, 2, 2, 2])
        )
        cam = CameraSpec.look_at((0, 0, 3), (0, 0, 0))
        tex = UVTexture(np.full((4, 4, 3), 0.5), np.ones((4, 4), bool))
        maps = rasterize_condition_maps(t, None, None, cam, tex)
        frags = rasterize(t.vertices, t.faces, cam)
        pal = part_palette(2)
        assert np.allclose(maps.semantic[frags.face == 0], pal[1])
        assert np.allclose(maps.semantic[frags.face == 1], pal[2])
        assert not maps.semantic[frags.face < 0].any()
        colors = {tuple(c) for c in maps.semantic[maps.mask]}
        assert colors == {tuple(pal[1]), tuple(pal[2])}

    def test_depth_tie_goes_to_lower_face(self):
        tri = facing_triangle()
        t = single_joint_template(np.concatenate([tri, tri]), [[3, 4, 5], [0, 1, 2]])
        frags = rasterize(t.vertices, t.faces, CameraSpec.look_at((0, 0, 3), (0, 0, 0)))
        assert (frags.face[frags.mask] == 0).all()

    def test_nearer_face_wins(self):
        near = facing_triangle(z=0.5)
        far = facing_triangle(z=0.0)
        t = single_joint_template(np.concatenate([far, near]), [[0, 1, 2], [3, 4, 5]])
        frags = rasterize(t.vertices, t.faces, CameraSpec.look_at((0, 0, 3), (0, 0, 0)))
        assert (frags.face[frags.mask] == 1).all()
        assert np.allclose(frags.depth[frags.mask], 2.5)

    def test_full_body_maps_share_foreground(self, template):
        rng = np.random.default_rng(7)
        texels = rng.uniform(0.1, 1.0, (32, 32, 3))
        tex = UVTexture(texels, np.ones((32, 32), bool))
        for az in (0.0, 1.3, 2.7):
            cam = CameraSpec.look_at((3 * np.sin(az), 0.2, 3 * np.cos(az)), (0, 0, 0))
            maps = rasterize_condition_maps(template, random_pose(rng, scale=0.2), rng.normal(size=10), cam, tex)
            masks = [np.any(m > 0, axis=-1) for m in (maps.texture, maps.normal, maps.semantic)]
            assert maps.mask.any()
            for m in masks:
                assert np.array_equal(m, maps.mask)

    def test_normals_are_unit(self, template):
        cam = CameraSpec.look_at((0, 0, 3), (0, 0, 0))
        tex = UVTexture(np.full((8, 8, 3), 0.5), np.ones((8, 8), bool))
        maps = rasterize_condition_maps(template, None, None, cam, tex)
        n = 2 * maps.normal[maps.mask] - 1
        assert np.abs(np.linalg.norm(n, axis=1) - 1).max() < 1e-9
        # the body faces the camera on average
        assert n[:, 2].mean() > 0.5


class TestUVRoundTrip:
    def test_project_then_warp_reproduces_visible_texture(self, template):
        rng = np.random.default_rng(8)
        U = 32
        gt = rng.uniform(0.05, 1.0, (U, U, 3))
        full = UVTexture(gt, np.ones((U, U), bool))
        theta = random_pose(rng, scale=0.15)
        cam = CameraSpec.look_at((0, 0, 3), (0, 0, 0))
        image = warp_texture(full, None, theta, cam, template)
        uv, sil, depth = correspondence_map(template, theta, None, cam)
        part = project_to_uv(image, uv, sil, U, depth=depth)
        assert part.validity.any()
        assert np.abs(part.texels[part.validity] - gt[part.validity]).max() <= 1 / 255
