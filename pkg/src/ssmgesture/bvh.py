"""BVH motion-capture reading and writing.

Joints are kept in file order (depth first); ``End Site`` blocks are retained
for faithful rewriting but do not count as joints.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

POSITION_CHANNELS = ("Xposition", "Yposition", "Zposition")
ROTATION_CHANNELS = ("Xrotation", "Yrotation", "Zrotation")


class BVHParseError(ValueError):
    pass


@dataclass
class Joint:
    name: str
    parent: int  # -1 for the root
    offset: np.ndarray
    channels: list[str]
    end_site: np.ndarray | None = None

    @property
    def rotation_order(self) -> str:
        """Axis letters of the rotation channels in file order, e.g. ``"ZXY"``."""
        return "".join(c[0] for c in self.channels if c in ROTATION_CHANNELS)

    @property
    def has_position(self) -> bool:
        return any(c in POSITION_CHANNELS for c in self.channels)


@dataclass
class Skeleton:
    joints: list[Joint]

    def __post_init__(self):
        roots = [i for i, j in enumerate(self.joints) if j.parent < 0]
        if len(roots) != 1 or roots[0] != 0:
            raise BVHParseError(f"skeleton needs exactly one root at index 0, found {roots}")
        for i, j in enumerate(self.joints[1:], start=1):
            if not 0 <= j.parent < i:
                raise BVHParseError(f"joint {j.name!r} has invalid parent {j.parent}")

    @property
    def J(self) -> int:
        return len(self.joints)

    @property
    def names(self) -> list[str]:
        return [j.name for j in self.joints]

    def channel_offsets(self) -> list[int]:
        out, k = [], 0
        for j in self.joints:
            out.append(k)
            k += len(j.channels)
        return out

    @property
    def n_channels(self) -> int:
        return sum(len(j.channels) for j in self.joints)


@dataclass
class MotionClip:
    """Raw per-frame channel values (``frames x n_channels``) in file layout."""

    skeleton: Skeleton
    frames: np.ndarray
    fps: float
    degrees: bool = True

    def __post_init__(self):
        self.frames = np.asarray(self.frames, np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.skeleton.n_channels:
            raise ValueError(f"frames must be F x {self.skeleton.n_channels}, got {self.frames.shape}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps

    def joint_channels(self, j: int) -> np.ndarray:
        start = self.skeleton.channel_offsets()[j]
        return self.frames[:, start:start + len(self.skeleton.joints[j].channels)]

    def rotations(self, j: int) -> np.ndarray:
        """Euler angles of joint ``j`` (F x 3) in its channel order; zeros if absent."""
        jt = self.skeleton.joints[j]
        cols = [k for k, c in enumerate(jt.channels) if c in ROTATION_CHANNELS]
        if not cols:
            return np.zeros((self.n_frames, 3))
        return self.joint_channels(j)[:, cols]

    def positions(self, j: int = 0) -> np.ndarray:
        """``X, Y, Z`` position channels of joint ``j``; the static offset if absent."""
        jt = self.skeleton.joints[j]
        vals = self.joint_channels(j)
        out = np.tile(jt.offset, (self.n_frames, 1))
        for k, c in enumerate(jt.channels):
            if c in POSITION_CHANNELS:
                out[:, POSITION_CHANNELS.index(c)] = vals[:, k]
        return out


class _Tokens:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.i = 0

    def next_line(self) -> list[str]:
        while self.i < len(self.lines):
            parts = self.lines[self.i].split()
            self.i += 1
            if parts:
                return parts
        raise BVHParseError("unexpected end of file in HIERARCHY section")


def _floats(parts: list[str], what: str) -> np.ndarray:
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise BVHParseError(f"bad number in {what}: {exc}") from None


def _parse_joint(tok: _Tokens, name: str, parent: int, joints: list[Joint]) -> None:
    if tok.next_line() != ["{"]:
        raise BVHParseError(f"expected '{{' after joint {name!r}")
    idx = len(joints)
    joint = Joint(name, parent, np.zeros(3), [])
    joints.append(joint)
    while True:
        parts = tok.next_line()
        key = parts[0]
        if key == "OFFSET":
            if len(parts) != 4:
                raise BVHParseError(f"OFFSET of {name!r} needs 3 values")
            joint.offset = _floats(parts[1:], f"OFFSET of {name!r}")
        elif key == "CHANNELS":
            try:
                n = int(parts[1])
            except (IndexError, ValueError):
                raise BVHParseError(f"bad CHANNELS line for {name!r}") from None
            chans = parts[2:]
            if len(chans) != n:
                raise BVHParseError(f"{name!r} declares {n} channels but lists {len(chans)}")
            for c in chans:
                if c not in POSITION_CHANNELS + ROTATION_CHANNELS:
                    raise BVHParseError(f"unknown channel token {c!r} in joint {name!r}")
            joint.channels = chans
        elif key == "JOINT":
            if len(parts) < 2:
                raise BVHParseError("JOINT without a name")
            _parse_joint(tok, " ".join(parts[1:]), idx, joints)
        elif key == "End":
            if tok.next_line() != ["{"]:
                raise BVHParseError(f"expected '{{' after End Site of {name!r}")
            off = tok.next_line()
            if off[0] != "OFFSET" or len(off) != 4:
                raise BVHParseError(f"End Site of {name!r} needs an OFFSET")
            joint.end_site = _floats(off[1:], "End Site")
            if tok.next_line() != ["}"]:
                raise BVHParseError(f"unclosed End Site in {name!r}")
        elif key == "}":
            return
        else:
            raise BVHParseError(f"unexpected token {key!r} in joint {name!r}")


def parse_bvh(text: str, degrees: bool = True) -> MotionClip:
    tok = _Tokens(text)
    try:
        head = tok.next_line()
    except BVHParseError:
        raise BVHParseError("missing HIERARCHY section") from None
    if head != ["HIERARCHY"]:
        raise BVHParseError("missing HIERARCHY section")
    root = tok.next_line()
    if root[0] != "ROOT" or len(root) < 2:
        raise BVHParseError("HIERARCHY must start with ROOT")
    joints: list[Joint] = []
    _parse_joint(tok, " ".join(root[1:]), -1, joints)
    skeleton = Skeleton(joints)

    rest = [ln.strip() for ln in tok.lines[tok.i:] if ln.strip()]
    if not rest or rest[0] != "MOTION":
        raise BVHParseError("missing MOTION section")
    if len(rest) < 3 or not rest[1].startswith("Frames:") or not rest[2].startswith("Frame Time:"):
        raise BVHParseError("MOTION section needs 'Frames:' and 'Frame Time:' lines")
    try:
        n_frames = int(rest[1].split(":", 1)[1])
        frame_time = float(rest[2].split(":", 1)[1])
    except ValueError:
        raise BVHParseError("malformed Frames / Frame Time header") from None
    if frame_time <= 0:
        raise BVHParseError("Frame Time must be positive")
    rows = rest[3:]
    if len(rows) != n_frames:
        raise BVHParseError(f"frame-count mismatch: header says {n_frames}, found {len(rows)}")
    C = skeleton.n_channels
    data = np.empty((n_frames, C))
    for k, row in enumerate(rows):
        vals = _floats(row.split(), f"frame {k}")
        if vals.size != C:
            raise BVHParseError(f"frame {k} has {vals.size} values, expected {C}")
        data[k] = vals
    fps = 1.0 / frame_time
    if abs(fps - round(fps)) < 1e-6:
        fps = float(round(fps))
    return MotionClip(skeleton, data, fps, degrees)


def _fmt(v) -> str:
    return " ".join(f"{x:.6f}" for x in v)


def write_bvh(clip: MotionClip) -> str:
    sk = clip.skeleton
    children: dict[int, list[int]] = {i: [] for i in range(sk.J)}
    for i, j in enumerate(sk.joints[1:], start=1):
        children[j.parent].append(i)
    out = ["HIERARCHY"]

    def emit(i: int, depth: int) -> None:
        j = sk.joints[i]
        pad = "  " * depth
        out.append(f"{pad}{'ROOT' if i == 0 else 'JOINT'} {j.name}")
        out.append(pad + "{")
        out.append(f"{pad}  OFFSET {_fmt(j.offset)}")
        out.append(f"{pad}  CHANNELS {len(j.channels)} {' '.join(j.channels)}".rstrip())
        for c in children[i]:
            emit(c, depth + 1)
        if j.end_site is not None:
            out.extend([f"{pad}  End Site", f"{pad}  {{", f"{pad}    OFFSET {_fmt(j.end_site)}",
                        f"{pad}  }}"])
        out.append(pad + "}")

    emit(0, 0)
    out += ["MOTION", f"Frames: {clip.n_frames}", f"Frame Time: {1.0 / clip.fps:.8f}"]
    out += [_fmt(row) for row in clip.frames]
    return "\n".join(out) + "\n"


def load_bvh(path: str | Path, degrees: bool = True) -> MotionClip:
    return parse_bvh(Path(path).read_text(), degrees)


def save_bvh(clip: MotionClip, path: str | Path) -> None:
    Path(path).write_text(write_bvh(clip))


def chain_skeleton(J: int, root_channels: str = "ZXY", spacing: float = 10.0) -> Skeleton:
    """A simple chain of ``J`` joints; useful for synthetic data."""
    rot = [f"{a}rotation" for a in root_channels]
    joints = [Joint("root", -1, np.zeros(3), list(POSITION_CHANNELS) + rot)]
    for i in range(1, J):
        joints.append(Joint(f"j{i}", i - 1, np.array([0.0, spacing, 0.0]), list(rot)))
    joints[-1].end_site = np.array([0.0, spacing, 0.0])
    return Skeleton(joints)
