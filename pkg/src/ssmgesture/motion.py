"""Motion features: exponential maps, heading-frame root velocities,
frame-rate conversion and fixed-length segmentation.

Feature layout per frame: ``3 * J`` exponential-map channels in joint order
(the root's rotation expressed relative to its heading), then
``[vx, vy, vz, wx, wy, wz]``: root linear and angular velocity in the root's
heading frame, per second. Heading is the yaw about +Y that turns +Z into the
root's horizontally projected forward axis.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.spatial.transform import Rotation

from .bvh import POSITION_CHANNELS, ROTATION_CHANNELS, MotionClip, Skeleton

TWO_PI = 2.0 * np.pi


def _rotation_from_euler(angles: np.ndarray, order: str, degrees: bool) -> Rotation:
    # BVH channels compose left to right about the moving frame: upper-case = intrinsic
    return Rotation.from_euler(order.upper(), np.asarray(angles, np.float64), degrees=degrees)


def unroll_expmap(v: np.ndarray) -> np.ndarray:
    """Pick, frame by frame, the equivalent axis-angle vector nearest the previous one.

    ``v`` is ``F x 3`` of principal vectors (angle in ``[0, pi]``). The result
    encodes the same rotations but never jumps by about ``2 pi`` between
    neighbouring frames of smooth motion.
    """
    v = np.array(v, np.float64, copy=True)
    for t in range(1, v.shape[0]):
        prev = v[t - 1]
        theta = np.linalg.norm(v[t])
        if theta < 1e-12:
            axis = prev / np.linalg.norm(prev) if np.linalg.norm(prev) > np.pi else None
            if axis is None:
                continue
        else:
            axis = v[t] / theta
        k = np.round((axis @ prev - theta) / TWO_PI)
        v[t] = (theta + TWO_PI * k) * axis
    return v


def euler_to_expmap(angles: np.ndarray, order: str, degrees: bool = True,
                    continuous: bool = True) -> np.ndarray:
    """Euler angles in channel ``order`` to axis-angle vectors.

    A single rotation (shape ``(3,)``) maps to its principal vector with angle
    in ``[0, pi]``. A sequence (``F x 3``) is unrolled for continuity unless
    ``continuous`` is false.
    """
    angles = np.asarray(angles, np.float64)
    v = _rotation_from_euler(angles, order, degrees).as_rotvec()
    if angles.ndim == 2 and continuous:
        v = unroll_expmap(v)
    return v


def expmap_to_euler(v: np.ndarray, order: str, degrees: bool = True) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # gimbal lock notice
        return Rotation.from_rotvec(np.asarray(v, np.float64)).as_euler(order.upper(),
                                                                        degrees=degrees)


def yaw(psi: np.ndarray) -> Rotation:
    psi = np.asarray(psi, np.float64)
    return Rotation.from_rotvec(np.stack([np.zeros_like(psi), psi, np.zeros_like(psi)], -1))


def heading_angle(R: Rotation) -> np.ndarray:
    """Yaw of the projected forward (+Z) axis, ``atan2(fx, fz)``."""
    fwd = R.apply(np.array([0.0, 0.0, 1.0]))
    fwd = np.atleast_2d(fwd)
    return np.arctan2(fwd[:, 0], fwd[:, 2])



def root_rotations(clip: MotionClip) -> Rotation:
    root = clip.skeleton.joints[0]
    return _rotation_from_euler(clip.rotations(0), root.rotation_order or "XYZ", clip.degrees)


def root_velocities(clip: MotionClip) -> np.ndarray:
    """Per-frame root velocity 6-vector in the heading frame (F x 6).

    Velocities are forward differences times fps; the last frame repeats the
    previous one so the output has one row per frame.
    """
    F = clip.n_frames
    if F < 2:
        raise ValueError("root velocities need at least 2 frames")
    pos = clip.positions(0)
    R = root_rotations(clip)
    psi = heading_angle(R)
    H_inv = yaw(-psi[:-1])
    lin = H_inv.apply(np.diff(pos, axis=0)) * clip.fps
    # world-frame incremental rotation, expressed in the heading frame
    step = R[1:] * R[:-1].inv()
    ang = (H_inv * step * yaw(psi[:-1])).as_rotvec() * clip.fps
    vel = np.concatenate([lin, ang], axis=1)
    return np.concatenate([vel, vel[-1:]], axis=0)


def joint_expmaps(clip: MotionClip) -> np.ndarray:
    """F x J x 3 unrolled exponential maps; the root is taken relative to its heading."""
    F, sk = clip.n_frames, clip.skeleton
    out = np.zeros((F, sk.J, 3))
    for j, jt in enumerate(sk.joints):
        if not jt.rotation_order:
            continue
        R = _rotation_from_euler(clip.rotations(j), jt.rotation_order, clip.degrees)
        if j == 0:
            R = yaw(-heading_angle(R)) * R
        out[:, j] = unroll_expmap(R.as_rotvec())
    return out


def motion_to_features(clip: MotionClip) -> np.ndarray:
    """Gesture feature matrix ``F x (3J + 6)``."""
    rot = joint_expmaps(clip).reshape(clip.n_frames, -1)
    return np.concatenate([rot, root_velocities(clip)], axis=1)


def features_to_motion(Y: np.ndarray, skeleton: Skeleton, fps: float, degrees: bool = True,
                       origin=(0.0, 0.0, 0.0), heading0: float = 0.0) -> MotionClip:
    """Invert :func:`motion_to_features`, integrating root velocities from ``origin``."""
    Y = np.asarray(Y, np.float64)
    J = skeleton.J
    if Y.ndim != 2 or Y.shape[1] != 3 * J + 6:
        raise ValueError(f"features must be F x {3 * J + 6}, got {Y.shape}")
    F = Y.shape[0]
    ex = Y[:, :3 * J].reshape(F, J, 3)
    lin, ang = Y[:, 3 * J:3 * J + 3] / fps, Y[:, 3 * J + 3:] / fps
    local = Rotation.from_rotvec(ex[:, 0])
    psi = np.empty(F)
    pos = np.empty((F, 3))
    psi[0], pos[0] = heading0, origin
    for t in range(F - 1):
        H = yaw(psi[t])
        R_next = H * Rotation.from_rotvec(ang[t]) * local[t]
        psi[t + 1] = heading_angle(R_next)[0]
        pos[t + 1] = pos[t] + H.apply(lin[t])
    root_R = yaw(psi) * local

    frames = np.zeros((F, skeleton.n_channels))
    col = 0
    for j, jt in enumerate(skeleton.joints):
        rot_cols = [k for k, c in enumerate(jt.channels) if c in ROTATION_CHANNELS]
        if rot_cols:
            v = root_R.as_rotvec() if j == 0 else ex[:, j]
            eul = expmap_to_euler(v, jt.rotation_order, degrees)
            frames[:, [col + k for k in rot_cols]] = eul
        for k, c in enumerate(jt.channels):
            if c in POSITION_CHANNELS:
                axis = POSITION_CHANNELS.index(c)
                frames[:, col + k] = pos[:, axis] if j == 0 else jt.offset[axis]
        col += len(jt.channels)
    return MotionClip(skeleton, frames, fps, degrees)


def resample_motion(clip: MotionClip, target_fps: float = 20.0) -> MotionClip:
    """Downsample by linear interpolation of unrolled exponential maps and positions."""
    if target_fps > clip.fps + 1e-9:
        raise ValueError(f"upsampling requested: {clip.fps} -> {target_fps} fps")
    if abs(target_fps - clip.fps) < 1e-9:
        return MotionClip(clip.skeleton, clip.frames.copy(), clip.fps, clip.degrees)
    F = clip.n_frames
    n_out = int(np.floor((F - 1) * target_fps / clip.fps + 1e-9)) + 1
    src_t = np.arange(F) / clip.fps
    dst_t = np.arange(n_out) / target_fps

    def interp(a: np.ndarray) -> np.ndarray:
        return np.stack([np.interp(dst_t, src_t, a[:, k]) for k in range(a.shape[1])], axis=1)

    sk = clip.skeleton
    frames = np.zeros((n_out, sk.n_channels))
    col = 0
    for j, jt in enumerate(sk.joints):
        vals = clip.joint_channels(j)
        rot_cols = [k for k, c in enumerate(jt.channels) if c in ROTATION_CHANNELS]
        pos_cols = [k for k, c in enumerate(jt.channels) if c in POSITION_CHANNELS]
        if pos_cols:
            frames[:, [col + k for k in pos_cols]] = interp(vals[:, pos_cols])
        if rot_cols:
            ex = euler_to_expmap(vals[:, rot_cols], jt.rotation_order, clip.degrees)
            frames[:, [col + k for k in rot_cols]] = expmap_to_euler(interp(ex), jt.rotation_order,
                                                                     clip.degrees)
        col += len(jt.channels)
    return MotionClip(sk, frames, target_fps, clip.degrees)


def segment_clips(gestures: np.ndarray, audio: np.ndarray, seconds: float = 20.0,
                  fps: int = 20, sr: int = 16000, stride_s: float | None = None
                  ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Cut synchronized gesture/audio streams into aligned fixed-length windows.

    Windows are non-overlapping unless ``stride_s`` is given; the trailing
    remainder is dropped.
    """
    gestures, audio = np.asarray(gestures), np.asarray(audio)
    g_len, a_len = gestures.shape[0] / fps, audio.shape[0] / sr
    if abs(g_len - a_len) > 0.5 / fps:
        raise ValueError(f"streams out of sync: motion {g_len:.3f} s vs audio {a_len:.3f} s")
    win_g, win_a = int(round(seconds * fps)), int(round(seconds * sr))
    stride_s = seconds if stride_s is None else stride_s
    if stride_s <= 0:
        raise ValueError("stride must be positive")
    step_g, step_a = int(round(stride_s * fps)), int(round(stride_s * sr))
    out = []
    k = 0
    while k * step_g + win_g <= gestures.shape[0] and k * step_a + win_a <= audio.shape[0]:
        out.append((gestures[k * step_g:k * step_g + win_g], audio[k * step_a:k * step_a + win_a]))
        k += 1
    return out
