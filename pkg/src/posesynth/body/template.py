"""Procedural capsule-limb body template.

Each joint owns one capsule-shaped part. Vertices carry a UV coordinate in a
per-part tile of the atlas, a part label (joint index + 1), and skin weights
that blend towards the parent joint near the part's proximal end.
"""

import numpy as np

from posesynth._validation import InvalidArgumentError
from posesynth.body.types import N_BETAS, TemplateMesh

# name, parent, joint position, capsule start, capsule end, radius
SKELETON_8 = [
    ("pelvis", -1, (0.0, 0.0, 0.0), (-0.10, -0.02, 0.0), (0.10, -0.02, 0.0), 0.11),
    ("spine", 0, (0.0, 0.10, 0.0), (0.0, 0.08, 0.0), (0.0, 0.30, 0.0), 0.12),
    ("chest", 1, (0.0, 0.30, 0.0), (0.0, 0.28, 0.0), (0.0, 0.50, 0.0), 0.14),
    ("head", 2, (0.0, 0.54, 0.0), (0.0, 0.58, 0.0), (0.0, 0.80, 0.0), 0.09),
    ("left_arm", 2, (0.16, 0.46, 0.0), (0.20, 0.46, 0.0), (0.78, 0.46, 0.0), 0.045),
    ("right_arm", 2, (-0.16, 0.46, 0.0), (-0.20, 0.46, 0.0), (-0.78, 0.46, 0.0), 0.045),
    ("left_leg", 0, (0.09, -0.06, 0.0), (0.09, -0.12, 0.0), (0.09, -0.92, 0.0), 0.065),
    ("right_leg", 0, (-0.09, -0.06, 0.0), (-0.09, -0.12, 0.0), (-0.09, -0.92, 0.0), 0.065),
]

# SMPL joint ordering and kinematic tree, capsules at toy proportions.
SKELETON_24 = [
    ("pelvis", -1, (0.0, 0.0, 0.0), (-0.08, -0.02, 0.0), (0.08, -0.02, 0.0), 0.10),
    ("left_hip", 0, (0.09, -0.06, 0.0), (0.09, -0.10, 0.0), (0.09, -0.48, 0.0), 0.07),
    ("right_hip", 0, (-0.09, -0.06, 0.0), (-0.09, -0.10, 0.0), (-0.09, -0.48, 0.0), 0.07),
    ("spine1", 0, (0.0, 0.10, 0.0), (0.0, 0.08, 0.0), (0.0, 0.20, 0.0), 0.11),
    ("left_knee", 1, (0.09, -0.48, 0.0), (0.09, -0.50, 0.0), (0.09, -0.86, 0.0), 0.055),
    ("right_knee", 2, (-0.09, -0.48, 0.0), (-0.09, -0.50, 0.0), (-0.09, -0.86, 0.0), 0.055),
    ("spine2", 3, (0.0, 0.20, 0.0), (0.0, 0.19, 0.0), (0.0, 0.31, 0.0), 0.12),
    ("left_ankle", 4, (0.09, -0.88, 0.0), (0.09, -0.90, 0.02), (0.09, -0.92, 0.10), 0.04),
    ("right_ankle", 5, (-0.09, -0.88, 0.0), (-0.09, -0.90, 0.02), (-0.09, -0.92, 0.10), 0.04),
    ("spine3", 6, (0.0, 0.31, 0.0), (0.0, 0.30, 0.0), (0.0, 0.44, 0.0), 0.13),
    ("left_foot", 7, (0.09, -0.92, 0.10), (0.09, -0.93, 0.11), (0.09, -0.93, 0.16), 0.03),
    ("right_foot", 8, (-0.09, -0.92, 0.10), (-0.09, -0.93, 0.11), (-0.09, -0.93, 0.16), 0.03),
    ("neck", 9, (0.0, 0.46, 0.0), (0.0, 0.45, 0.0), (0.0, 0.56, 0.0), 0.05),
    ("left_collar", 9, (0.05, 0.44, 0.0), (0.05, 0.44, 0.0), (0.15, 0.46, 0.0), 0.05),
    ("right_collar", 9, (-0.05, 0.44, 0.0), (-0.05, 0.44, 0.0), (-0.15, 0.46, 0.0), 0.05),
    ("head", 12, (0.0, 0.56, 0.0), (0.0, 0.60, 0.0), (0.0, 0.80, 0.0), 0.09),
    ("left_shoulder", 13, (0.17, 0.46, 0.0), (0.19, 0.46, 0.0), (0.42, 0.46, 0.0), 0.05),
    ("right_shoulder", 14, (-0.17, 0.46, 0.0), (-0.19, 0.46, 0.0), (-0.42, 0.46, 0.0), 0.05),
    ("left_elbow", 16, (0.44, 0.46, 0.0), (0.45, 0.46, 0.0), (0.66, 0.46, 0.0), 0.04),
    ("right_elbow", 17, (-0.44, 0.46, 0.0), (-0.45, 0.46, 0.0), (-0.66, 0.46, 0.0), 0.04),
    ("left_wrist", 18, (0.68, 0.46, 0.0), (0.69, 0.46, 0.0), (0.74, 0.46, 0.0), 0.035),
    ("right_wrist", 19, (-0.68, 0.46, 0.0), (-0.69, 0.46, 0.0), (-0.74, 0.46, 0.0), 0.035),
    ("left_hand", 20, (0.75, 0.46, 0.0), (0.76, 0.46, 0.0), (0.84, 0.46, 0.0), 0.03),
    ("right_hand", 21, (-0.75, 0.46, 0.0), (-0.76, 0.46, 0.0), (-0.84, 0.46, 0.0), 0.03),
]

SKELETONS = {8: SKELETON_8, 24: SKELETON_24}


def _orthonormal_frame(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return axis, e1, e2


def _capsule(a, b, radius, n_lat, n_seg):
    """Closed capsule-like surface from ``a`` to ``b``.

    Returns vertices (n_lat * (n_seg + 1), 3), the axial parameter ``s`` in
    [0, 1] per vertex, the angular parameter in [0, 1], and faces with
    outward winding.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis, e1, e2 = _orthonormal_frame(b - a)
    centre = 0.5 * (a + b)
    half = 0.5 * np.linalg.norm(b - a) + 0.5 * radius
    s = np.linspace(0.0, 1.0, n_lat)
    phi = np.linspace(0.0, 1.0, n_seg + 1)
    S, P = np.meshgrid(s, phi, indexing="ij")
    z = -half * np.cos(np.pi * S)
    rho = radius * np.sin(np.pi * S) ** 0.6
    ang = 2.0 * np.pi * P
    verts = (
        centre
        + z[..., None] * axis
        + rho[..., None] * (np.cos(ang)[..., None] * e1 + np.sin(ang)[..., None] * e2)
    )
    idx = np.arange(n_lat * (n_seg + 1)).reshape(n_lat, n_seg + 1)
    q00, q01 = idx[:-1, :-1], idx[:-1, 1:]
    q10, q11 = idx[1:, :-1], idx[1:, 1:]
    faces = np.concatenate(
        [np.stack([q00, q10, q11], -1).reshape(-1, 3), np.stack([q00, q11, q01], -1).reshape(-1, 3)]
    )
    # drop zero-area triangles at the poles
    tri = verts.reshape(-1, 3)[faces]
    area = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    faces = faces[area > 1e-12]
    # orient outward
    tri = verts.reshape(-1, 3)[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    out = tri.mean(1) - centre
    if np.sum(np.einsum("ij,ij->i", normal, out)) < 0:
        faces = faces[:, ::-1]
    return verts.reshape(-1, 3), S.reshape(-1), P.reshape(-1), faces, centre


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def make_template(n_joints=8, n_lat=12, n_seg=16, seed=0, shape_scale=0.02):
    """Build the default procedural body.

    ``seed`` fixes the random rotation used to mix the smooth shape fields
    into the 10 orthonormal shape directions.
    """
    if n_joints not in SKELETONS:
        raise InvalidArgumentError(f"no skeleton with {n_joints} joints (have {sorted(SKELETONS)})")
    skel = SKELETONS[n_joints]
    J = len(skel)
    parents = np.array([p for _, p, *_ in skel])
    joints = np.array([j for _, _, j, *_ in skel], dtype=np.float64)

    grid = int(np.ceil(np.sqrt(J)))
    margin = 0.04
    verts, faces, weights, uvs, labels, fields = [], [], [], [], [], []
    offset = 0
    for j, (_, parent, _, a, b, radius) in enumerate(skel):
        v, s, p, f, centre = _capsule(a, b, radius, n_lat, n_seg)
        n = len(v)
        w = np.zeros((n, J))
        if parent < 0:
            w[:, j] = 1.0
        else:
            own = 0.5 + 0.5 * _smoothstep(s / 0.25)
            w[:, j] = own
            w[:, parent] = 1.0 - own
        tile_u, tile_v = j % grid, j // grid
        span = (1.0 - 2.0 * margin) / grid
        uv = np.stack(
            [(tile_u + margin) / grid + p * span, (tile_v + margin) / grid + s * span], axis=1
        )
        verts.append(v)
        faces.append(f + offset)
        weights.append(w)
        uvs.append(uv)
        labels.append(np.full(n, j + 1))
        fields.append((offset, n, v - centre))
        offset += n

    vertices = np.concatenate(verts)
    V = len(vertices)
    # smooth shape fields: per-part scaling about the part centre, plus
    # global height and width stretches
    candidates = []
    for start, n, disp in fields:
        field = np.zeros((V, 3))
        field[start : start + n] = disp
        candidates.append(field.reshape(-1))
    candidates.append((vertices * [0.0, 1.0, 0.0]).reshape(-1))
    candidates.append((vertices * [1.0, 0.0, 1.0]).reshape(-1))
    F = np.stack(candidates, axis=1)
    rng = np.random.default_rng(seed)
    mix = rng.standard_normal((F.shape[1], N_BETAS))
    Q, _ = np.linalg.qr(F @ mix)
    shape_basis = (Q.T * (shape_scale * np.sqrt(V))).reshape(N_BETAS, V, 3)

    return TemplateMesh(
        vertices=vertices,
        faces=np.concatenate(faces),
        skin_weights=np.concatenate(weights),
        joints=joints,
        parents=parents,
        uv=np.concatenate(uvs),
        part_labels=np.concatenate(labels),
        shape_basis=shape_basis,
    )


def single_joint_template(vertices, faces, uv=None, part_labels=None):
    """Rigid one-joint body rooted at the origin, handy for tests and toy scenes."""
    vertices = np.asarray(vertices, dtype=np.float64)
    V = len(vertices)
    return TemplateMesh(
        vertices=vertices,
        faces=np.asarray(faces),
        skin_weights=np.ones((V, 1)),
        joints=np.zeros((1, 3)),
        parents=np.array([-1]),
        uv=np.zeros((V, 2)) if uv is None else uv,
        part_labels=np.ones(V, dtype=np.int64) if part_labels is None else part_labels,
        shape_basis=np.zeros((N_BETAS, V, 3)),
    )
