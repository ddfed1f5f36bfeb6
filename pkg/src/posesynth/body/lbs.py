"""Linear blend skinning and its nearest-vertex inverse."""

import numpy as np
from scipy.spatial import cKDTree

from posesynth._validation import check_shape
from posesynth.body.types import as_beta, as_theta


def rodrigues(rotvecs):
    """Axis-angle (N, 3) to rotation matrices (N, 3, 3)."""
    rotvecs = np.asarray(rotvecs, dtype=np.float64).reshape(-1, 3)
    angle = np.linalg.norm(rotvecs, axis=1)
    safe = np.where(angle > 1e-12, angle, 1.0)
    k = rotvecs / safe[:, None]
    K = np.zeros((len(k), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
    K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
    s = np.sin(angle)[:, None, None]
    c = np.cos(angle)[:, None, None]
    R = np.eye(3) + s * K + (1.0 - c) * (K @ K)
    R[angle <= 1e-12] = np.eye(3)
    return R


def shape_displacement(template, beta):
    return np.einsum("k,kvc->vc", beta, template.shape_basis)


def joint_regressor(template):
    """(J, V) matrix averaging vertices by skin weight; moves joints with shape."""
    W = template.skin_weights.T
    return W / W.sum(axis=1, keepdims=True)


def joint_transforms(template, theta, beta):
    """Per-joint 4x4 skinning transforms (rest-relative) and posed joint positions."""
    disp = shape_displacement(template, beta)
    joints = template.joints + joint_regressor(template) @ disp
    rots = rodrigues(theta.reshape(-1, 3))
    J = template.n_joints
    # A_j = A_parent @ (rotation about the rest joint); exact identity at theta = 0
    A = np.zeros((J, 4, 4))
    for j in range(J):
        local = np.eye(4)
        local[:3, :3] = rots[j]
        local[:3, 3] = joints[j] - rots[j] @ joints[j]
        p = template.parents[j]
        A[j] = local if p < 0 else A[p] @ local
    posed_joints = np.einsum("jab,jb->ja", A[:, :3, :3], joints) + A[:, :3, 3]
    return A, posed_joints


class PosedBody:
    """A template deformed by one (pose, shape), with per-vertex transforms cached.

    Holding on to this object lets many point queries share one KD-tree.
    """

    def __init__(self, template, pose=None, shape=None):
        self.template = template
        self.theta = as_theta(pose, template.n_joints)
        self.beta = as_beta(shape)
        self.displacement = shape_displacement(template, self.beta)
        A, self.joints = joint_transforms(template, self.theta, self.beta)
        self.vertex_transforms = np.einsum("vj,jab->vab", template.skin_weights, A)
        shaped = template.vertices + self.displacement
        T = self.vertex_transforms
        self.vertices = np.einsum("vab,vb->va", T[:, :3, :3], shaped) + T[:, :3, 3]
        self._tree = None
        self._inv = None

    @property
    def tree(self):
        if self._tree is None:
            self._tree = cKDTree(self.vertices)
        return self._tree

    @property
    def inverse_linear(self):
        # blended rotations are not orthonormal, so invert explicitly
        if self._inv is None:
            self._inv = np.linalg.inv(self.vertex_transforms[:, :3, :3])
        return self._inv

    def nearest_vertex(self, points, radius=np.inf):
        """Distance and index of the nearest posed vertex; ``(inf, -1)`` beyond ``radius``."""
        dist, idx = self.tree.query(np.asarray(points, dtype=np.float64), k=1, distance_upper_bound=radius)
        idx = np.where(np.isfinite(dist), idx, -1)
        return dist, idx

    def to_canonical(self, points, radius=0.05):
        """Map posed points to the shape-free rest space.

        Returns ``(canonical, valid, vertex_index)``. Points farther than
        ``radius`` from every posed vertex are flagged invalid and come back
        as NaN with vertex index -1.
        """
        points = check_shape(np.asarray(points, dtype=np.float64), (None, 3), "points")
        dist, idx = self.nearest_vertex(points, radius)
        valid = dist <= radius
        canonical = np.full(points.shape, np.nan)
        vi = idx[valid]
        if vi.size:
            local = points[valid] - self.vertex_transforms[vi, :3, 3]
            rest = np.einsum("nab,nb->na", self.inverse_linear[vi], local)
            canonical[valid] = rest - self.displacement[vi]
        return canonical, valid, idx

    def from_canonical(self, canonical, vertex_index):
        """Pose canonical points using the skinning of the given vertices."""
        canonical = np.asarray(canonical, dtype=np.float64)
        T = self.vertex_transforms[vertex_index]
        shaped = canonical + self.displacement[vertex_index]
        return np.einsum("nab,nb->na", T[:, :3, :3], shaped) + T[:, :3, 3]

    def vertex_normals(self):
        return vertex_normals(self.vertices, self.template.faces, self.template.weld)


def forward_lbs(template, pose=None, shape=None):
    """Posed vertex positions (V, 3)."""
    return PosedBody(template, pose, shape).vertices


def inverse_lbs(points, pose, shape, template, radius=0.05):
    """Canonical coordinates and validity of posed ``points``.

    The canonical frame is the rest pose with the shape displacement removed,
    so ``inverse_lbs(forward_lbs(v)) == template.vertices`` for any shape.
    """
    canonical, valid, _ = PosedBody(template, pose, shape).to_canonical(points, radius)
    return canonical, valid


def vertex_normals(vertices, faces, weld=None):
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    keys = faces if weld is None else weld[faces]
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, keys[:, k], fn)
    if weld is not None:
        acc = acc[weld]
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return acc / np.where(norm > 0, norm, 1.0)
