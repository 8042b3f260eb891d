"""Synthetic text/pose corpora: sinusoidal limb motion on a 128-point whole-body skeleton."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pose import BODY, FrameDims, PoseSequence, default_layout, normalize_coordinates, save_pose_sequence

DIMS = FrameDims(512, 512)
FRAMES = 64

LIMBS = ("left arm", "right arm", "left leg", "right leg")
DIRECTIONS = ("upward", "downward")
SPEEDS = {"slowly": 1.0, "steadily": 2.0, "quickly": 3.0}
AMPLITUDES = {"slightly": 0.3, "widely": 0.7}
BENDS = {"straight": 0.0, "bent": 0.9}
SHIFTS = {"while standing still": 0.0, "while stepping left": 1.0, "while stepping right": -1.0}

# base swing angle from hanging straight down, per (limb kind, direction)
_BASE = {("arm", "upward"): 2.3, ("arm", "downward"): 0.7, ("leg", "upward"): 0.9, ("leg", "downward"): 0.35}


@dataclass(frozen=True)
class MotionSpec:
    limb: str = "left arm"
    direction: str = "upward"
    speed: str = "steadily"
    amplitude: str = "widely"
    bend: str = "straight"
    shift: str = "while standing still"

    def caption(self, short: bool = False) -> str:
        verb = "waves" if self.limb.endswith("arm") else "swings"
        if short:
            return f"a person {verb} the {self.limb} {self.direction}"
        joint = "elbow" if self.limb.endswith("arm") else "knee"
        bend = f"a {self.bend} {joint}" if self.bend == "bent" else f"a {self.bend} {self.limb.split()[1]}"
        return (f"a person {verb} the {self.limb} {self.direction} {self.speed} and {self.amplitude} "
                f"with {bend} {self.shift}")


def all_specs() -> list[MotionSpec]:
    return [MotionSpec(*combo) for combo in itertools.product(
        LIMBS, DIRECTIONS, SPEEDS, AMPLITUDES, BENDS, SHIFTS)]


def class_specs(classes: int) -> list[MotionSpec]:
    """One fixed motion per class: limb and direction vary, everything else is held constant."""
    pairs = [(limb, d) for limb in LIMBS for d in DIRECTIONS]
    order = [0, 3, 4, 7, 1, 2, 5, 6]  # left-up, right-down, left-leg-up, right-leg-down, ...
    if classes > len(order):
        raise ValueError(f"at most {len(order)} classes available")
    return [MotionSpec(*pairs[i]) for i in order[:classes]]


def _face_template() -> np.ndarray:
    """68 face landmarks around the origin, unit = head radius."""
    pts = []
    for a in np.linspace(math.pi * 0.05, math.pi * 0.95, 17):        # jaw
        pts.append((-math.cos(a) * 0.9, 0.2 + math.sin(a) * 0.75))
    for side in (-1, 1):                                              # brows
        for x in np.linspace(0.15, 0.65, 5):
            pts.append((side * x if side > 0 else -0.8 + x, -0.35 - 0.05 * math.sin(x * 4)))
    for y in np.linspace(-0.25, 0.15, 4):                             # nose bridge
        pts.append((0.0, y))
    for x in np.linspace(-0.2, 0.2, 5):                               # nose base
        pts.append((x, 0.25))
    for cx in (-0.38, 0.38):                                          # eyes
        for a in np.linspace(0, 2 * math.pi, 6, endpoint=False):
            pts.append((cx + 0.14 * math.cos(a), -0.15 + 0.06 * math.sin(a)))
    for a in np.linspace(0, 2 * math.pi, 12, endpoint=False):         # outer lips
        pts.append((0.35 * math.cos(a), 0.5 + 0.12 * math.sin(a)))
    for a in np.linspace(0, 2 * math.pi, 8, endpoint=False):          # inner lips
        pts.append((0.22 * math.cos(a), 0.5 + 0.05 * math.sin(a)))
    return np.array(pts)


def _hand_template() -> np.ndarray:
    """21 hand points, wrist at origin, fingers along +y (unit = hand length)."""
    pts = [(0.0, 0.0)]
    for finger, spread in enumerate(np.linspace(-0.5, 0.5, 5)):
        length = 0.7 if finger == 0 else 1.0
        for j in range(1, 5):
            r = 0.3 + length * 0.7 * j / 4
            pts.append((math.sin(spread) * r, math.cos(spread) * r))
    return np.array(pts)


_FACE = _face_template()
_HAND = _hand_template()


def _limb(origin, angle, side, bend, l1, l2):
    mid = origin + l1 * np.array([side * math.sin(angle), math.cos(angle)])
    a2 = angle + bend
    end = mid + l2 * np.array([side * math.sin(a2), math.cos(a2)])
    return mid, end, a2


def render_motion(spec: MotionSpec, rng: np.random.Generator, frames: int = FRAMES) -> np.ndarray:
    """Pixel-space (frames, 128, 3) keypoints for one clip; nuisance terms come from ``rng``."""
    layout = default_layout()
    face_lo, _ = layout.range_of("face")
    lh_lo, _ = layout.range_of("left_hand")
    rh_lo, _ = layout.range_of("right_hand")
    scale = rng.uniform(0.9, 1.1)
    cx = DIMS.width / 2 + rng.uniform(-20, 20)
    cy = DIMS.height / 2 + 30 + rng.uniform(-15, 15)
    phase = rng.uniform(0, 2 * math.pi)
    kind = "arm" if spec.limb.endswith("arm") else "leg"
    side_name = spec.limb.split()[0]
    base = _BASE[(kind, spec.direction)]
    omega = SPEEDS[spec.speed]
    amp = AMPLITUDES[spec.amplitude]
    bend = BENDS[spec.bend]
    shift = SHIFTS[spec.shift] * 60.0
    idle = rng.uniform(0.05, 0.15, size=4)

    out = np.zeros((frames, layout.total, 3))
    t = np.arange(frames)
    swing = base + amp * np.sin(2 * math.pi * omega * t / frames + phase)
    for k in range(frames):
        dx = shift * (k / (frames - 1) - 0.5)
        neck = np.array([cx + dx, cy - 110 * scale])
        pts = np.zeros((18, 2))
        pts[BODY["neck"]] = neck
        pts[BODY["nose"]] = neck + scale * np.array([0, -40])
        for side, sgn in (("r", -1), ("l", 1)):
            pts[BODY[f"{side}_shoulder"]] = neck + scale * np.array([sgn * 40, 5])
            pts[BODY[f"{side}_hip"]] = neck + scale * np.array([sgn * 25, 130])
            pts[BODY[f"{side}_eye"]] = pts[BODY["nose"]] + scale * np.array([sgn * 10, -8])
            pts[BODY[f"{side}_ear"]] = pts[BODY["nose"]] + scale * np.array([sgn * 20, -2])
        hand_angles = {}
        for limb_side, sgn in (("r", -1), ("l", 1)):
            moving = side_name == ("left" if limb_side == "l" else "right")
            arm = swing[k] if moving and kind == "arm" else 0.2 + idle[0] * math.sin(0.3 * k + idle[1] * 10)
            arm_bend = bend if moving and kind == "arm" else 0.15
            elbow, wrist, a2 = _limb(pts[BODY[f"{limb_side}_shoulder"]], arm, sgn, arm_bend, 60 * scale, 55 * scale)
            pts[BODY[f"{limb_side}_elbow"]], pts[BODY[f"{limb_side}_wrist"]] = elbow, wrist
            hand_angles[limb_side] = (wrist, a2, sgn)
            leg = swing[k] if moving and kind == "leg" else 0.05 + idle[2] * math.sin(0.25 * k + idle[3] * 10)
            leg_bend = -bend if moving and kind == "leg" else 0.0
            knee, ankle, _ = _limb(pts[BODY[f"{limb_side}_hip"]], leg, sgn, leg_bend, 80 * scale, 80 * scale)
            pts[BODY[f"{limb_side}_knee"]], pts[BODY[f"{limb_side}_ankle"]] = knee, ankle
        out[k, :18, :2] = pts
        out[k, face_lo:face_lo + 68, :2] = pts[BODY["nose"]] + 22 * scale * _FACE
        for limb_side, lo in (("l", lh_lo), ("r", rh_lo)):
            wrist, a2, sgn = hand_angles[limb_side]
            c, s = math.cos(a2), math.sin(a2)
            rot = np.array([[c, sgn * s], [-sgn * s, c]])
            hand = _HAND @ rot.T * (25 * scale)
            out[k, lo:lo + 21, :2] = wrist + hand
    out[..., :2] += rng.normal(0, 0.5, size=out[..., :2].shape)
    conf = np.full((frames, layout.total), 0.95)
    conf[:, face_lo:face_lo + 68] = 0.9
    conf[:, lh_lo:] = 0.8
    out[..., 2] = np.clip(conf + rng.normal(0, 0.02, size=conf.shape), 0, 1)
    return out


def make_corpus(specs: list[MotionSpec], seed: int = 0, frames: int = FRAMES, short_captions: bool = False):
    """Render one clip per spec. Returns (pixel-space poses (S, f, 128, 3), captions)."""
    rng = np.random.default_rng(seed)
    poses = np.stack([render_motion(s, rng, frames) for s in specs]).astype(np.float32)
    return poses, [s.caption(short_captions) for s in specs]


def normalized(poses: np.ndarray) -> np.ndarray:
    out = poses.astype(np.float64).copy()
    out[..., 0] = 2 * out[..., 0] / DIMS.width - 1
    out[..., 1] = 2 * out[..., 1] / DIMS.height - 1
    return out.astype(np.float32)


def class_corpus(classes: int, n: int, seed: int = 0, frames: int = FRAMES):
    """``n`` clips cycling through ``classes`` fixed motions. Returns (poses, captions, labels)."""
    specs = class_specs(classes)
    labels = [i % classes for i in range(n)]
    poses, captions = make_corpus([specs[c] for c in labels], seed, frames, short_captions=True)
    return poses, captions, np.array(labels)


def attribute_corpus(n: int, seed: int = 0, frames: int = FRAMES):
    """``n`` clips with distinct attribute combinations while they last, then repeats."""
    rng = np.random.default_rng(seed + 7919)
    specs = all_specs()
    order = rng.permutation(len(specs))
    chosen = [specs[order[i % len(specs)]] for i in range(n)]
    return make_corpus(chosen, seed, frames)


def write_corpus(out_dir, poses: np.ndarray, captions: list[str], seed: int = 0) -> Path:
    """Write ``clip_XXXX.mvp`` files plus ``manifest.jsonl`` with plausible precomputed signals."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed + 104729)
    manifest = out_dir / "manifest.jsonl"
    with manifest.open("w") as fh:
        for i, (pose, caption) in enumerate(zip(poses, captions)):
            path = out_dir / f"clip_{i:04d}.mvp"
            save_pose_sequence(PoseSequence(pose), path)
            frames = pose.shape[0]
            record = {
                "id": f"clip_{i:04d}",
                "caption": caption,
                "pose_path": path.name,
                "frame_width": DIMS.width,
                "frame_height": DIMS.height,
                "flow_magnitudes": np.round(rng.uniform(0.8, 3.0, frames - 1), 4).tolist(),
                "text_box_areas": [[] for _ in range(frames)],
                "aesthetic": round(float(rng.uniform(4.5, 6.5)), 4),
                "blur": round(float(rng.uniform(40, 200)), 4),
                "human_bbox_areas": np.round(rng.uniform(0.4, 0.6, 5) * DIMS.area, 2).tolist(),
                "human_counts": [1] * 5,
            }
            fh.write(json.dumps(record) + "\n")
    return manifest


def to_sequence(pixel_pose: np.ndarray) -> PoseSequence:
    return normalize_coordinates(PoseSequence(pixel_pose), DIMS)
