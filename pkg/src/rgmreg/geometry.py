"""Rigid transforms, neighbour queries, SVD alignment and registration metrics.

Point clouds are plain ``(n, 3)`` float64 arrays.  Euler angles follow the
intrinsic X-Y-Z convention, ``R = Rx(a) @ Ry(b) @ Rz(c)``, in degrees.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels


class DegenerateCorrespondenceError(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def inverse(self):
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, first):
        """``self ∘ first``: apply ``first``, then ``self``."""
        return RigidTransform(self.R @ first.R, self.R @ first.t + self.t)

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def is_valid(self, tol=1e-9):
        return (np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
                and abs(np.linalg.det(self.R) - 1.0) < tol)


def rot_x(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def euler_to_matrix(angles):
    a, b, c = angles
    return rot_x(a) @ rot_y(b) @ rot_z(c)


def matrix_to_euler(R):
    """Inverse of :func:`euler_to_matrix`.

    Returns ``(angles, reliable)``; ``reliable`` is False when |pitch| >= 89°
    where the decomposition approaches gimbal lock.
    """
    pitch = np.degrees(np.arcsin(np.clip(R[0, 2], -1.0, 1.0)))
    roll = np.degrees(np.arctan2(-R[1, 2], R[2, 2]))
    yaw = np.degrees(np.arctan2(-R[0, 1], R[0, 0]))
    return np.array([roll, pitch, yaw]), abs(pitch) < 89.0


def apply_transform(T, X):
    X = np.asarray(X, dtype=np.float64)
    return X @ T.R.T + T.t


def sample_random_transform(rng, rot_range=45.0, trans_range=0.5):
    if rot_range < 0 or trans_range < 0:
        raise ValueError("ranges must be nonnegative")
    angles = rng.uniform(0.0, rot_range, size=3)
    t = rng.uniform(-trans_range, trans_range, size=3)
    return RigidTransform(euler_to_matrix(angles), t)


def knn(query, reference, k):
    """``(len(query), k)`` indices of nearest reference points.

    Rows are sorted by ascending distance, ties broken by lowest index, so a
    point queried against its own cloud lists itself first.
    """
    reference = np.asarray(reference)
    if k > len(reference):
        raise ValueError(f"knn: K={k} exceeds reference size {len(reference)}")
    if k < 1:
        raise ValueError("knn: K must be positive")
    return _kernels.knn_indices(query, reference, k)


def nearest_neighbors(query, reference):
    """Squared distance to and index of each query point's nearest reference point."""
    return _kernels.nearest(query, reference)


def kabsch_svd(X, Y, pairs):
    """Least-squares rigid transform mapping ``X[i]`` onto ``Y[j]`` for ``(i, j)`` in pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) < 3:
        raise DegenerateCorrespondenceError(f"need at least 3 pairs, got {len(pairs)}")
    P = np.asarray(X, dtype=np.float64)[pairs[:, 0]]
    Q = np.asarray(Y, dtype=np.float64)[pairs[:, 1]]
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    P0, Q0 = P - cp, Q - cq
    H = P0.T @ Q0
    U, S, Vt = np.linalg.svd(H)
    scale = max(S[0], np.abs(P0).max() ** 2, 1e-300)
    # rank < 2 (collinear or coincident points) leaves the rotation undetermined
    if S[1] <= 1e-12 * scale:
        raise DegenerateCorrespondenceError("rank-deficient cross-covariance (collinear pairs)")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cq - R @ cp)


# ---------------------------------------------------------------------------
# metrics


def mie_rotation(R_gt, R_hat):
    """Geodesic angle between two rotations, degrees.

    Same angle as ``arccos((tr(R_gt^T R_hat) - 1) / 2)``, evaluated with atan2 so
    that tiny angles keep full precision (arccos bottoms out near 1e-6 deg).
    """
    D = np.asarray(R_gt).T @ np.asarray(R_hat)
    c = (np.trace(D) - 1.0) / 2.0
    s = np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]]) / 2.0
    return float(np.degrees(np.arctan2(s, np.clip(c, -1.0, 1.0))))


def mie_translation(t_gt, t_hat):
    return float(np.linalg.norm(np.asarray(t_hat) - np.asarray(t_gt)))


def _wrap_deg(a):
    return (a + 180.0) % 360.0 - 180.0


def mae_rotation(R_gt, R_hat):
    """Mean absolute Euler-angle difference in degrees, plus a reliability flag."""
    e_gt, ok_gt = matrix_to_euler(R_gt)
    e_hat, ok_hat = matrix_to_euler(R_hat)
    return float(np.mean(np.abs(_wrap_deg(e_hat - e_gt)))), bool(ok_gt and ok_hat)


def mae_translation(t_gt, t_hat):
    return float(np.mean(np.abs(np.asarray(t_hat) - np.asarray(t_gt))))


def ccd(X_hat, Y, d=0.1):
    """Clipped chamfer distance: squared NN distances, each clipped at ``d``, summed both ways."""
    dx, _ = nearest_neighbors(X_hat, Y)
    dy, _ = nearest_neighbors(Y, X_hat)
    return float(np.minimum(dx, d).sum() + np.minimum(dy, d).sum())


def recall(errors, rot_thresh=1.0, trans_thresh=0.1):
    """Fraction of ``(mae_r, mae_t)`` pairs strictly under both thresholds."""
    errors = list(errors)
    if not errors:
        raise ValueError("recall: empty error list")
    ok = [r < rot_thresh and t < trans_thresh for r, t in errors]
    return sum(ok) / len(ok)
