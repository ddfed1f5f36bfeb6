"""Plain data containers for the articulated body, cameras and UV textures."""

from dataclasses import dataclass, field

import numpy as np

from posesynth._validation import (
    InvalidArgumentError,
    check_finite,
    check_rotation,
    check_shape,
)

N_BETAS = 10


@dataclass(frozen=True)
class BodyShape:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if beta.shape != (N_BETAS,):
            raise InvalidArgumentError(f"beta must have length {N_BETAS}, got {beta.shape[0]}")
        check_finite(beta, "beta")
        object.__setattr__(self, "beta", beta)

    @classmethod
    def zeros(cls):
        return cls(np.zeros(N_BETAS))


@dataclass(frozen=True)
class BodyPose:
    """Axis-angle rotation per joint, flattened to length ``3 * n_joints``."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        if theta.size % 3:
            raise InvalidArgumentError(f"pose length {theta.size} is not divisible by 3")
        check_finite(theta, "theta")
        object.__setattr__(self, "theta", theta)

    @property
    def n_joints(self):
        return self.theta.size // 3

    @classmethod
    def zeros(cls, n_joints=8):
        return cls(np.zeros(3 * n_joints))


def as_beta(shape):
    if shape is None:
        return np.zeros(N_BETAS)
    if isinstance(shape, BodyShape):
        return shape.beta
    return BodyShape(shape).beta


def as_theta(pose, n_joints):
    if pose is None:
        return np.zeros(3 * n_joints)
    theta = pose.theta if isinstance(pose, BodyPose) else BodyPose(pose).theta
    if theta.size != 3 * n_joints:
        raise InvalidArgumentError(
            f"pose has {theta.size // 3} joints but template has {n_joints}"
        )
    return theta


@dataclass
class TemplateMesh:
    vertices: np.ndarray  # (V, 3) rest pose, meters
    faces: np.ndarray  # (F, 3)
    skin_weights: np.ndarray  # (V, J)
    joints: np.ndarray  # (J, 3) rest joint positions
    parents: np.ndarray  # (J,), -1 for the root
    uv: np.ndarray  # (V, 2) in [0, 1]
    part_labels: np.ndarray  # (V,), values in 1..P
    shape_basis: np.ndarray  # (10, V, 3)
    weld: np.ndarray = None  # (V,) representative index of coincident vertices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        if self.weld is None:
            self.weld = _weld_index(self.vertices)
        self.validate()

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_joints(self):
        return self.joints.shape[0]

    @property
    def n_parts(self):
        return int(self.part_labels.max())

    def validate(self):
        V, J = self.n_vertices, self.n_joints
        check_shape(self.vertices, (V, 3), "vertices")
        check_shape(self.faces, (None, 3), "faces")
        check_shape(self.skin_weights, (V, J), "skin_weights")
        check_shape(self.parents, (J,), "parents")
        check_shape(self.uv, (V, 2), "uv")
        check_shape(self.part_labels, (V,), "part_labels")
        check_shape(self.shape_basis, (N_BETAS, V, 3), "shape_basis")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise InvalidArgumentError("face index out of range")
        if self.skin_weights.min() < 0 or np.abs(self.skin_weights.sum(1) - 1).max() > 1e-6:
            raise InvalidArgumentError("skin weights must be non-negative rows summing to 1")
        if self.part_labels.min() < 1:
            raise InvalidArgumentError("part labels start at 1")
        roots = np.flatnonzero(self.parents < 0)
        if roots.size != 1:
            raise InvalidArgumentError("kinematic tree needs exactly one root")
        # parents must precede children; rules out cycles
        for j, p in enumerate(self.parents):
            if p >= j:
                raise InvalidArgumentError(f"joint {j} has parent {p}; parents must come first")

    def arrays(self):
        return {
            "vertices": self.vertices,
            "faces": self.faces,
            "skin_weights": self.skin_weights,
            "joints": self.joints,
            "parents": self.parents,
            "uv": self.uv,
            "part_labels": self.part_labels,
            "shape_basis": self.shape_basis,
        }


def _weld_index(vertices):
    _, first, inverse = np.unique(
        np.round(vertices, 9), axis=0, return_index=True, return_inverse=True
    )
    return first[inverse.reshape(-1)]


@dataclass(frozen=True)
class CameraSpec:
    """Pinhole camera; ``x_cam = R x + t`` with +z forward and +y down.

    Pixel centres sit on integer coordinates, so pixel ``(row, col)`` is at
    image position ``(x=col, y=row)``.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = check_shape(np.asarray(self.K, dtype=np.float64), (3, 3), "K")
        if np.any(np.tril(K, -1) != 0) or np.any(np.diag(K) <= 0):
            raise InvalidArgumentError("K must be upper-triangular with positive diagonal")
        R = check_rotation(self.R)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        check_finite(t, "t")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def center(self):
        return -self.R.T @ self.t

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def project(self, points):
        """Return pixel coordinates (N, 2) and camera depth (N,)."""
        cam = self.to_camera(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = (cam @ self.K.T)[:, :2] / z[:, None]
        return pix, z

    def pixel_rays(self):
        """World-space origins and unit directions for every pixel, row-major."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        pix = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)], axis=1).astype(np.float64)
        dirs_cam = pix @ np.linalg.inv(self.K).T
        dirs = dirs_cam @ self.R
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.center, dirs.shape).copy()
        return origins, dirs

    def extrinsic_vector(self, rotation_only=False):
        """Row-major flattening of ``[R | t]`` (12 values) or of ``R`` alone (9)."""
        if rotation_only:
            return self.R.reshape(-1).copy()
        return np.concatenate([self.R, self.t[:, None]], axis=1).reshape(-1)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), focal=80.0, width=64, height=64):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        K = np.array(
            [[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]]
        )
        return cls(K=K, R=R, t=-R @ eye, width=width, height=height)


@dataclass
class UVTexture:
    texels: np.ndarray  # (U, U, 3); row index follows v, column index follows u
    validity: np.ndarray  # (U, U) bool

    def __post_init__(self):
        self.texels = np.asarray(self.texels, dtype=np.float64)
        self.validity = np.asarray(self.validity, dtype=bool)
        U = self.texels.shape[0]
        check_shape(self.texels, (U, U, 3), "texels")
        check_shape(self.validity, (U, U), "validity")
        check_finite(self.texels, "texels")
        self.texels = np.where(self.validity[..., None], self.texels, 0.0)

    @property
    def size(self):
        return self.texels.shape[0]


@dataclass
class ConditionMapSet:
    """Texture, normal and semantic renderings of the posed body for one view."""

    texture: np.ndarray
    normal: np.ndarray
    semantic: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = np.shape(self.texture)
        for name in ("normal", "semantic"):
            if np.shape(getattr(self, name)) != shape:
                raise InvalidArgumentError(f"{name} map shape differs from texture map")
        if self.mask is None:
            self.mask = np.any(np.stack([self.texture, self.normal, self.semantic]) > 0, axis=(0, 3))

    def stacked(self):
        """(3, H, W, 3) in the fixed order texture, normal, semantic."""
        return np.stack([self.texture, self.normal, self.semantic])
