"""Minimal SO(3) helpers on axis-angle (rotation vector) representations."""

from __future__ import annotations

import numpy as np


def rotvec_to_matrix(r: np.ndarray) -> np.ndarray:
    """Rodrigues formula; r is a 3-vector whose norm is the angle."""
    r = np.asarray(r, dtype=np.float64)
    angle = np.linalg.norm(r)
    if angle < 1e-12:
        return np.eye(3)
    axis = r / angle
    K = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle < 1e-12:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # Near pi: extract axis from the symmetric part.
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # Fix signs from off-diagonal terms using the largest component.
        i = int(np.argmax(axis))
        if axis[i] > 0:
            for j in range(3):
                if j != i:
                    axis[j] = A[i, j] / axis[i] * np.sign(1.0)
        axis = axis / np.linalg.norm(axis)
        return axis * angle
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w / (2.0 * np.sin(angle)) * angle


def compose_rotvec(delta: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Rotation vector of exp(delta) applied after ``base``."""
    return matrix_to_rotvec(rotvec_to_matrix(delta) @ rotvec_to_matrix(base))


def rotation_error(target: np.ndarray, current: np.ndarray) -> np.ndarray:
    """Rotation vector d with exp(d) @ exp(current) = exp(target)."""
    return matrix_to_rotvec(
        rotvec_to_matrix(target) @ rotvec_to_matrix(current).T
    )
