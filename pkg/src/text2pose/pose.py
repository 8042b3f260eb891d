"""Pose sequences: keypoint layout, normalization, the .mvp file format and rendering."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MVPS"
VERSION = 1
HEADER = struct.Struct("<4sHHII")  # magic, version, flags, frames, keypoints
CONFIDENCE_THRESHOLD = 0.3


class PoseFormatError(ValueError):
    pass


class PoseLengthError(ValueError):
    pass


@dataclass(frozen=True)
class KeypointLayout:
    groups: tuple[tuple[str, tuple[int, int]], ...]

    def __post_init__(self):
        start = 0
        for name, (lo, hi) in self.groups:
            if lo != start or hi <= lo:
                raise ValueError(f"group {name!r} range [{lo},{hi}) is not contiguous from {start}")
            start = hi

    @property
    def total(self) -> int:
        return self.groups[-1][1][1] if self.groups else 0

    def range_of(self, name: str) -> tuple[int, int]:
        for group, rng in self.groups:
            if group == name:
                return rng
        raise KeyError(name)

    def group_of(self, index: int) -> str:
        for name, (lo, hi) in self.groups:
            if lo <= index < hi:
                return name
        raise IndexError(index)

    @classmethod
    def from_file(cls, path) -> "KeypointLayout":
        """Read ``name count`` lines; ranges are assigned in file order."""
        groups = []
        start = 0
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, count = line.split()
            groups.append((name, (start, start + int(count))))
            start += int(count)
        return cls(tuple(groups))


BODY_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)
BODY = {name: i for i, name in enumerate(BODY_NAMES)}
FACE_POINTS = ("r_eye", "l_eye", "r_ear", "l_ear", "nose")

BODY_EDGES = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7), (1, 8), (8, 9), (9, 10),
    (1, 11), (11, 12), (12, 13), (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)
# 68-point face landmarks: jaw, brows, nose bridge, lower nose, eyes, outer and inner lips
_FACE_CHAINS = (
    range(0, 17), range(17, 22), range(22, 27), range(27, 31), range(31, 36),
    (36, 37, 38, 39, 40, 41, 36), (42, 43, 44, 45, 46, 47, 42),
    tuple(range(48, 60)) + (48,), tuple(range(60, 68)) + (60,),
)
FACE_EDGES = tuple((a, b) for chain in _FACE_CHAINS for a, b in zip(list(chain)[:-1], list(chain)[1:]))
HAND_EDGES = tuple(
    edge
    for finger in range(5)
    for edge in zip((0,) + tuple(range(1 + 4 * finger, 4 + 4 * finger)),
                    tuple(range(1 + 4 * finger, 5 + 4 * finger)))
)


def default_layout() -> KeypointLayout:
    return KeypointLayout((
        ("body", (0, 18)),
        ("face", (18, 86)),
        ("left_hand", (86, 107)),
        ("right_hand", (107, 128)),
    ))


def skeleton_edges(layout: KeypointLayout) -> list[tuple[int, int]]:
    """Global index pairs for every drawable bone of ``layout``."""
    local = {"body": BODY_EDGES, "face": FACE_EDGES, "left_hand": HAND_EDGES, "right_hand": HAND_EDGES}
    edges = []
    for name, (lo, hi) in layout.groups:
        for a, b in local.get(name, ()):
            if lo + max(a, b) < hi:
                edges.append((lo + a, lo + b))
    return edges


@dataclass(frozen=True)
class FrameDims:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"frame dims must be positive, got {self.width}x{self.height}")

    @property
    def area(self) -> float:
        return float(self.width) * float(self.height)


@dataclass(frozen=True)
class PoseSequence:
    """``data`` is an ``(f, N, 3)`` float32 array of (x, y, confidence)."""

    data: np.ndarray
    layout: KeypointLayout = field(default_factory=default_layout)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"pose data must be (f, N, 3), got {data.shape}")
        if data.shape[1] != self.layout.total:
            raise ValueError(f"{data.shape[1]} keypoints do not match layout total {self.layout.total}")
        if not np.isfinite(data).all():
            raise ValueError("pose data contains non-finite values")
        conf = data[..., 2]
        if conf.size and (conf.min() < 0 or conf.max() > 1):
            raise ValueError("confidence must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_keypoints(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PoseSequence):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.data, other.data)

    __hash__ = None


def save_pose_sequence(seq: PoseSequence, path) -> None:
    f, n, _ = seq.data.shape
    payload = np.ascontiguousarray(seq.data, dtype="<f4").tobytes()
    Path(path).write_bytes(HEADER.pack(MAGIC, VERSION, 0, f, n) + payload)


def load_pose_sequence(path, layout: KeypointLayout | None = None) -> PoseSequence:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise PoseFormatError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, flags, f, n = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise PoseFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION or flags != 0:
        raise PoseFormatError(f"{path}: unsupported version {version} / flags {flags}")
    expected = HEADER.size + f * n * 3 * 4
    if len(raw) != expected:
        raise PoseLengthError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(f, n, 3)
    if layout is None:
        layout = default_layout() if n == 128 else KeypointLayout((("points", (0, n)),))
    return PoseSequence(data.astype(np.float32), layout)


def normalize_coordinates(seq: PoseSequence, dims: FrameDims) -> PoseSequence:
    """Map pixel coordinates to [-1, 1]: x' = 2x/width - 1, y' = 2y/height - 1."""
    data = seq.data.astype(np.float64)
    data[..., 0] = 2.0 * data[..., 0] / dims.width - 1.0
    data[..., 1] = 2.0 * data[..., 1] / dims.height - 1.0
    return PoseSequence(data, seq.layout)


def denormalize_coordinates(seq: PoseSequence, dims: FrameDims) -> PoseSequence:
    data = seq.data.astype(np.float64)
    data[..., 0] = (data[..., 0] + 1.0) * dims.width / 2.0
    data[..., 1] = (data[..., 1] + 1.0) * dims.height / 2.0
    return PoseSequence(data, seq.layout)


def crop_to_window(seq: PoseSequence, target_frames: int = 64, offset: int = 0) -> PoseSequence:
    if offset < 0 or seq.frames < offset + target_frames:
        raise PoseLengthError(
            f"need {offset + target_frames} frames for crop at offset {offset}, have {seq.frames}")
    return PoseSequence(seq.data[offset:offset + target_frames], seq.layout)


def uniform_sample_indices(num_frames: int, count: int = 5) -> list[int]:
    """floor(j * (T - 1) / (count - 1)) for j = 0..count-1; repeats when T < count."""
    if num_frames < 1:
        raise PoseLengthError("cannot sample from an empty sequence")
    return [(j * (num_frames - 1)) // (count - 1) for j in range(count)]


def render_pose_frames(seq: PoseSequence, dims: FrameDims, out_dir,
                       threshold: float = CONFIDENCE_THRESHOLD) -> list[Path]:
    """Draw each frame's skeleton to ``out_dir/frame_XXXX.png``.

    Expects normalized coordinates. Keypoints below ``threshold`` confidence and
    any bone touching one are skipped, so a frame with no confident points is a
    blank canvas.
    """
    from PIL import Image, ImageDraw

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels = denormalize_coordinates(seq, dims).data
    w, h = int(round(dims.width)), int(round(dims.height))
    edges = skeleton_edges(seq.layout)
    colors = {"body": (255, 80, 40), "face": (240, 240, 240),
              "left_hand": (60, 200, 255), "right_hand": (120, 255, 90)}
    paths = []
    for t, frame in enumerate(pixels):
        image = Image.new("RGB", (w, h), (0, 0, 0))
        draw = ImageDraw.Draw(image)
        visible = frame[:, 2] >= threshold
        for a, b in edges:
            if visible[a] and visible[b]:
                color = colors.get(seq.layout.group_of(a), (200, 200, 200))
                draw.line([tuple(frame[a, :2]), tuple(frame[b, :2])], fill=color, width=2)
        for i in np.flatnonzero(visible):
            x, y = frame[i, :2]
            draw.ellipse([x - 1.5, y - 1.5, x + 1.5, y + 1.5], fill=(255, 255, 0))
        path = out_dir / f"frame_{t:04d}.png"
        image.save(path, format="PNG")
        paths.append(path)
    return paths
