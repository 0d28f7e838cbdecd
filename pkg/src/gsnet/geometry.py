"""Point-cloud container helpers, rigid transforms, normalization and jitter.

Clouds are plain ``(N, 3)`` float64 arrays; :func:`as_cloud` is the single
validation gate every public operation passes its input through.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

ROTATION_MODES = ("z", "euler-xyz")


def as_cloud(points):
    """Validate and convert ``points`` to a contiguous ``(N, 3)`` float64 array."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgumentError(f"point cloud must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise InvalidArgumentError("point cloud must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("point cloud contains non-finite coordinates")
    return arr


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise InvalidArgumentError("rotation must be 3x3 and translation a 3-vector")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-12:
            raise InvalidArgumentError("rotation is not orthonormal to within 1e-12")
        if abs(np.linalg.det(rot) - 1.0) > 1e-12:
            raise InvalidArgumentError("rotation determinant must be +1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other):
        """Transform equal to applying ``self`` first, then ``other``."""
        return RigidTransform(
            other.rotation @ self.rotation,
            other.rotation @ self.translation + other.translation,
        )

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))


def apply_transform(cloud, transform):
    pts = as_cloud(cloud)
    out = pts @ transform.rotation.T
    out += transform.translation
    return out


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _orthonormalize(rot):
    # Products of three elementary rotations drift a few ulps off SO(3).
    u, _, vt = np.linalg.svd(rot)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def random_rotation(axes="z", seed=0, translation=None):
    """Sample a rotation, deterministic in ``seed``.

    ``axes="z"`` rotates about the z axis by an angle uniform in [0, 2pi).
    ``axes="euler-xyz"`` (alias ``"xyz"``) composes independent uniform angles
    about z, y and x. This is not Haar-uniform over SO(3).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mode = "euler-xyz" if axes in ("xyz", "XYZ") else axes
    if mode == "z":
        rot = _rot_z(rng.uniform(0.0, 2.0 * np.pi))
    elif mode == "euler-xyz":
        az, ay, ax = rng.uniform(0.0, 2.0 * np.pi, size=3)
        rot = _orthonormalize(_rot_x(ax) @ _rot_y(ay) @ _rot_z(az))
    else:
        raise InvalidArgumentError(f"unknown rotation mode {axes!r}; expected one of {ROTATION_MODES}")
    if translation is None:
        translation = np.zeros(3)
    return RigidTransform(rot, translation)


def random_rigid_transform(seed=0, scale=1.0):
    """Euler-xyz rotation plus a translation with coordinates uniform in [-scale, scale]."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(-scale, scale, size=3)
    return random_rotation("euler-xyz", rng, translation=t)


def normalize_unit_sphere(cloud):
    """Center at the centroid and scale so the farthest point has norm 1.

    A cloud whose points all coincide maps to all zeros.
    """
    pts = as_cloud(cloud)
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt(np.max(np.einsum("ij,ij->i", centered, centered)))
    if radius == 0.0:
        return np.zeros_like(pts)
    return centered / radius


def jitter(cloud, sigma=0.01, clip=0.05, seed=0):
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be >= 0, got {sigma}")
    if clip <= 0:
        raise InvalidArgumentError(f"clip must be > 0, got {clip}")
    pts = as_cloud(cloud)
    if sigma == 0:
        return pts.copy()
    rng = np.random.default_rng(seed)
    noise = np.clip(rng.normal(0.0, sigma, size=pts.shape), -clip, clip)
    return pts + noise
