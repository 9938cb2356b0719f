"""Plain-numpy pose algebra shared by the simulator and the tests."""

from __future__ import annotations

import numpy as np

from .autodiff import wrap_angle

__all__ = ["wrap_angle", "compose", "relative"]


def compose(pose, delta) -> np.ndarray:
    """Apply a local-frame motion ``delta = (dx, dy, dtheta)`` to ``pose``.

    Both arguments broadcast over leading dimensions.
    """
    pose = np.asarray(pose, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    x, y, th = pose[..., 0], pose[..., 1], pose[..., 2]
    dx, dy, dth = delta[..., 0], delta[..., 1], delta[..., 2]
    c, s = np.cos(th), np.sin(th)
    return np.stack(
        [x + dx * c - dy * s, y + dx * s + dy * c, wrap_angle(th + dth)], axis=-1
    )


def relative(pose_from, pose_to) -> np.ndarray:
    """Inverse of :func:`compose`: the local-frame delta taking ``pose_from`` to ``pose_to``."""
    a = np.asarray(pose_from, dtype=np.float64)
    b = np.asarray(pose_to, dtype=np.float64)
    ddx, ddy = b[..., 0] - a[..., 0], b[..., 1] - a[..., 1]
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    return np.stack(
        [c * ddx + s * ddy, -s * ddx + c * ddy, wrap_angle(b[..., 2] - a[..., 2])], axis=-1
    )
