"""Synthetic articulated-figure world with exact ground truth.

A person is a 2D kinematic tree of capsules (one capsule per body segment)
drawn back to front. For every frame the world yields the image together with
everything a dense-correspondence extractor, a keypoint detector and a person
segmenter would otherwise have to estimate: the one-hot part assignment, the
per-part UV field, the foreground mask, keypoints, the stickman pose image and
partial textures.

Geometry is defined in "base units" (pixels of a 64 x 64 frame) and evaluated
at pixel centres of the requested resolution, so the same person and pose can
be rendered at any size.

The image itself is produced by sampling the person's texture atlas through
the ground-truth UV field with :func:`motionxfer.renderer.render`, which makes
every frame exactly reproducible by the rendering model.
"""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
import torch

from . import renderer, tensorio

log = logging.getLogger(__name__)

BASE_SIZE = 64

JOINTS = (
    "pelvis", "neck", "crown", "chest",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
J = {name: i for i, name in enumerate(JOINTS)}

# stickman channel c draws BONES[c]; the final channel is a disc at the root
BONES = (
    ("pelvis", "chest"), ("chest", "neck"), ("neck", "crown"),
    ("neck", "l_shoulder"), ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"),
    ("neck", "r_shoulder"), ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"),
    ("pelvis", "l_hip"), ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
    ("pelvis", "r_hip"), ("r_hip", "r_knee"), ("r_knee", "r_ankle"),
    ("l_shoulder", "r_shoulder"),
)
ROOT = "pelvis"
STICKMAN_CHANNELS = len(BONES) + 1

# (segment, proximal joint, distal joint); a capsule spans exactly joint to joint
SEGMENTS = (
    ("head", "neck", "crown"),
    ("torso", "neck", "pelvis"),
    ("l_upper_arm", "l_shoulder", "l_elbow"),
    ("l_lower_arm", "l_elbow", "l_wrist"),
    ("r_upper_arm", "r_shoulder", "r_elbow"),
    ("r_lower_arm", "r_elbow", "r_wrist"),
    ("l_leg", "l_hip", "l_ankle"),
    ("r_leg", "r_hip", "r_ankle"),
)
SEGMENT_NAMES = tuple(s[0] for s in SEGMENTS)
PAINT_ORDER = (
    "r_lower_arm", "r_upper_arm", "r_leg", "l_leg", "torso", "head", "l_upper_arm", "l_lower_arm",
)

# base-unit means; every person scales each by U(0.75, 1.25)
MEAN_LENGTH = {"head": 10.0, "torso": 15.0, "upper_arm": 9.0, "lower_arm": 8.0, "leg": 18.0}
MEAN_RADIUS = {"head": 4.2, "torso": 5.0, "arm": 1.8, "leg": 2.6}
ROOT_MEAN = (31.5, 33.0)

# motion channels: (base range, per-component amplitude range)
ANGLES = ("torso", "head", "l_upper_arm", "l_lower_arm", "r_upper_arm", "r_lower_arm", "l_leg", "r_leg")
_MOTION_RANGES = {
    "torso": ((-0.05, 0.05), (0.0, 0.12)),
    "head": ((-0.1, 0.1), (0.0, 0.2)),
    "upper_arm": ((0.2, 0.8), (0.2, 0.6)),
    "lower_arm": ((0.0, 0.6), (0.1, 0.4)),
    "leg": ((0.05, 0.2), (0.0, 0.12)),
}
_OMEGA_RANGE = (0.015, 0.06)
TEXTURE_KINDS = ("solid", "bands", "checker", "ramp")


@dataclass(frozen=True)
class WorldConfig:
    n_parts: int = 8
    image_size: int = 64
    atlas_size: int = 32
    stick_width: float = 2.0
    max_angle_delta: float = 0.15

    def __post_init__(self) -> None:
        if self.n_parts < 1 or self.n_parts % len(SEGMENTS):
            raise ValueError(f"n_parts must be a positive multiple of {len(SEGMENTS)}, got {self.n_parts}")
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if self.atlas_size < 2:
            raise ValueError(f"atlas_size must be >= 2, got {self.atlas_size}")
        if self.stick_width <= 0:
            raise ValueError("stick_width must be positive")

    @property
    def pieces(self) -> int:
        """Parts per body segment (segments split along their axis)."""
        return self.n_parts // len(SEGMENTS)

    @property
    def scale(self) -> float:
        return self.image_size / BASE_SIZE


@dataclass
class PersonSpec:
    person_id: str
    seed: int
    n_parts: int
    lengths: dict[str, float]
    radii: dict[str, float]
    part_textures: list[dict[str, Any]]
    background: list  # 4 x 4 x 3 control grid
    motion: dict[str, dict[str, Any]]
    root_motion: dict[str, Any]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PersonSpec":
        return cls(**d)


@dataclass
class PoseSample:
    frame: int
    joint_angles: np.ndarray  # radians, ordered as ANGLES
    root_position: np.ndarray  # base units
    keypoints: np.ndarray  # (len(JOINTS), 2) image pixels, clamped


@dataclass
class GTFrame:
    image: np.ndarray  # (3, H, W)
    mask: np.ndarray  # (H, W)
    part_scores: np.ndarray  # (n+1, H, W) one-hot, background last
    uv: np.ndarray  # (2n, H, W)
    keypoints: np.ndarray  # (J, 2)
    stickman: np.ndarray  # (STICKMAN_CHANNELS, H, W)

    @property
    def labels(self) -> np.ndarray:
        return self.part_scores.argmax(axis=0)

    @property
    def n_parts(self) -> int:
        return self.part_scores.shape[0] - 1


@dataclass
class PartialTexture:
    atlas: np.ndarray  # (n, 3, Ht, Wt)
    visibility: np.ndarray  # (n, Ht, Wt) binary


# --------------------------------------------------------------------------
# persons and poses


def make_person(seed: int, config: WorldConfig, person_id: str | None = None) -> PersonSpec:
    rng = np.random.default_rng([0x5EED, seed])
    jitter = lambda: float(rng.uniform(0.75, 1.25))  # noqa: E731
    lengths = {k: v * jitter() for k, v in MEAN_LENGTH.items()}
    radii = {k: v * jitter() for k, v in MEAN_RADIUS.items()}

    textures = []
    for _ in range(config.n_parts):
        kind = TEXTURE_KINDS[int(rng.choice(len(TEXTURE_KINDS), p=[0.4, 0.3, 0.15, 0.15]))]
        a = rng.uniform(0.05, 0.95, 3)
        b = rng.uniform(0.05, 0.95, 3)
        textures.append({
            "kind": kind,
            "a": [float(x) for x in a],
            "b": [float(x) for x in b],
            "freq": int(rng.integers(2, 4)),
            "axis": int(rng.integers(0, 2)),
        })
    background = rng.uniform(0.1, 0.9, (4, 4, 3)).round(6).tolist()

    motion = {}
    for name in ANGLES:
        key = name if name in _MOTION_RANGES else name.split("_", 1)[1]
        base_rng, amp_rng = _MOTION_RANGES[key]
        motion[name] = {
            "base": float(rng.uniform(*base_rng)),
            "amp": [float(x) for x in rng.uniform(*amp_rng, 2)],
            "omega": [float(x) for x in rng.uniform(*_OMEGA_RANGE, 2)],
            "phase": [float(x) for x in rng.uniform(0, 2 * np.pi, 2)],
        }
    root_motion = {
        "amp": [float(rng.uniform(0.5, 3.0)), float(rng.uniform(0.0, 1.5))],
        "omega": [float(x) for x in rng.uniform(*_OMEGA_RANGE, 2)],
        "phase": [float(x) for x in rng.uniform(0, 2 * np.pi, 2)],
    }
    return PersonSpec(
        person_id=person_id if person_id is not None else f"person_{seed}",
        seed=seed,
        n_parts=config.n_parts,
        lengths=lengths,
        radii=radii,
        part_textures=textures,
        background=background,
        motion=motion,
        root_motion=root_motion,
    )


def _rot(v: np.ndarray, a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([v[0] * c - v[1] * s, v[0] * s + v[1] * c])


def _segment_radius(person: PersonSpec, segment: str) -> float:
    if segment in ("head", "torso"):
        return person.radii[segment]
    return person.radii["arm" if "arm" in segment else "leg"]


def joint_positions(person: PersonSpec, angles: np.ndarray, root: np.ndarray) -> np.ndarray:
    """Forward kinematics in base units; returns (len(JOINTS), 2) float64."""
    a = dict(zip(ANGLES, angles))
    L, r = person.lengths, person.radii
    up = _rot(np.array([0.0, -1.0]), a["torso"])
    down = -up
    right = np.array([-up[1], up[0]])
    p = np.zeros((len(JOINTS), 2))
    p[J["pelvis"]] = root
    p[J["neck"]] = root + up * L["torso"]
    p[J["chest"]] = (p[J["pelvis"]] + p[J["neck"]]) / 2
    p[J["crown"]] = p[J["neck"]] + _rot(up, a["head"]) * L["head"]
    shoulder_off = r["torso"] + 0.5 * r["arm"]
    hip_off = r["leg"] + 0.5
    for side, sign in (("l", -1.0), ("r", 1.0)):
        sh = p[J["neck"]] - up * r["arm"] + right * sign * shoulder_off
        upper = _rot(down, -sign * a[f"{side}_upper_arm"])
        elbow = sh + upper * L["upper_arm"]
        lower = _rot(upper, -sign * a[f"{side}_lower_arm"])
        hip = root + right * sign * hip_off
        leg = _rot(down, -sign * a[f"{side}_leg"])
        ankle = hip + leg * L["leg"]
        p[J[f"{side}_shoulder"]] = sh
        p[J[f"{side}_elbow"]] = elbow
        p[J[f"{side}_wrist"]] = elbow + lower * L["lower_arm"]
        p[J[f"{side}_hip"]] = hip
        p[J[f"{side}_knee"]] = (hip + ankle) / 2
        p[J[f"{side}_ankle"]] = ankle
    return p


def to_pixels(base_xy: np.ndarray, config: WorldConfig) -> np.ndarray:
    """Base units -> pixel coordinates at the configured resolution (centre aligned)."""
    s = config.scale
    return (np.asarray(base_xy) + 0.5) * s - 0.5


def pose_at(person: PersonSpec, frame: int, config: WorldConfig) -> PoseSample:
    t = float(frame)
    angles = np.empty(len(ANGLES))
    for i, name in enumerate(ANGLES):
        m = person.motion[name]
        angles[i] = m["base"] + sum(
            A * np.sin(w * t + ph) for A, w, ph in zip(m["amp"], m["omega"], m["phase"])
        )
    rm = person.root_motion
    root = np.array(ROOT_MEAN) + np.array([
        rm["amp"][0] * np.sin(rm["omega"][0] * t + rm["phase"][0]),
        rm["amp"][1] * np.sin(rm["omega"][1] * t + rm["phase"][1]),
    ])
    return pose_from_angles(person, angles, root, config, frame)


def pose_from_angles(
    person: PersonSpec, angles: np.ndarray, root: np.ndarray, config: WorldConfig, frame: int = 0,
) -> PoseSample:
    kp = to_pixels(joint_positions(person, angles, root), config)
    kp = np.clip(kp, 0.0, config.image_size - 1.0)
    return PoseSample(frame=frame, joint_angles=np.asarray(angles, float), root_position=np.asarray(root, float), keypoints=kp)


# --------------------------------------------------------------------------
# appearance


def texture_atlas(person: PersonSpec, atlas_size: int) -> np.ndarray:
    """Ground-truth atlas (n, 3, Ht, Wt) from the procedural descriptors."""
    g = np.linspace(0.0, 1.0, atlas_size)
    v, u = np.meshgrid(g, g, indexing="ij")
    out = np.empty((len(person.part_textures), 3, atlas_size, atlas_size))
    for k, d in enumerate(person.part_textures):
        a = np.asarray(d["a"])[:, None, None]
        b = np.asarray(d["b"])[:, None, None]
        coord = u if d["axis"] == 0 else v
        if d["kind"] == "solid":
            w = np.zeros_like(u)
        elif d["kind"] == "bands":
            w = np.floor(np.minimum(coord, 1 - 1e-9) * d["freq"]) % 2
        elif d["kind"] == "checker":
            w = (np.floor(np.minimum(u, 1 - 1e-9) * 2) + np.floor(np.minimum(v, 1 - 1e-9) * 2)) % 2
        else:
            w = coord
        out[k] = a * (1 - w) + b * w
    return out


def background_image(person: PersonSpec, config: WorldConfig) -> np.ndarray:
    """Smooth background (3, H, W): bilinear interpolation of a 4 x 4 colour grid."""
    grid = np.asarray(person.background)  # (4, 4, 3)
    n = grid.shape[0]
    px = (np.arange(config.image_size) + 0.5) / config.scale - 0.5
    g = np.clip(px / (BASE_SIZE - 1), 0.0, 1.0) * (n - 1)
    i0 = np.minimum(np.floor(g).astype(int), n - 2)
    f = g - i0
    rows = grid[i0] * (1 - f)[:, None, None] + grid[i0 + 1] * f[:, None, None]  # (H, 4, 3)
    img = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]  # (H, W, 3)
    return np.transpose(img, (2, 0, 1)).copy()


# --------------------------------------------------------------------------
# rendering


def _pixel_grid(config: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(config.image_size) + 0.5) / config.scale - 0.5
    y, x = np.meshgrid(c, c, indexing="ij")
    return x, y


def segment_fields(person: PersonSpec, pose: PoseSample, config: WorldConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-segment inside mask, axial u and radial v on the pixel grid (base units)."""
    joints = joint_positions(person, pose.joint_angles, pose.root_position)
    x, y = _pixel_grid(config)
    nseg = len(SEGMENTS)
    inside = np.zeros((nseg, *x.shape), bool)
    us = np.zeros((nseg, *x.shape))
    vs = np.zeros((nseg, *x.shape))
    for s, (name, ja, jb) in enumerate(SEGMENTS):
        a, b = joints[J[ja]], joints[J[jb]]
        axis = b - a
        length = float(np.hypot(*axis))
        d = axis / max(length, 1e-9)
        r = min(_segment_radius(person, name), max(length - 1.0, 0.5) / 2)
        rx, ry = x - a[0], y - a[1]
        along = rx * d[0] + ry * d[1]
        across = d[0] * ry - d[1] * rx
        t = np.clip(along, r, max(length - r, r))
        dist = np.hypot(along - t, across)
        inside[s] = dist <= r
        us[s] = np.clip(along / max(length, 1e-9), 0.0, 1.0)
        vs[s] = np.clip((across / r + 1.0) / 2.0, 0.0, 1.0)
    return inside, us, vs


def geometry(person: PersonSpec, pose: PoseSample, config: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    """One-hot part scores (n+1, H, W) and UV field (2n, H, W)."""
    inside, us, vs = segment_fields(person, pose, config)
    H = W = config.image_size
    n, p = config.n_parts, config.pieces
    label = np.full((H, W), n, dtype=np.int64)
    seg_idx = {name: i for i, name in enumerate(SEGMENT_NAMES)}
    for name in PAINT_ORDER:
        s = seg_idx[name]
        piece = np.minimum(np.floor(us[s] * p).astype(np.int64), p - 1)
        label = np.where(inside[s], s * p + piece, label)
    scores = np.zeros((n + 1, H, W))
    np.put_along_axis(scores, label[None], 1.0, axis=0)
    uv = np.empty((2 * n, H, W))
    for s in range(len(SEGMENTS)):
        for i in range(p):
            k = s * p + i
            uv[2 * k] = np.clip(us[s] * p - i, 0.0, 1.0)
            uv[2 * k + 1] = vs[s]
    return scores, uv


def rasterize_stickman(keypoints: np.ndarray, config: WorldConfig) -> np.ndarray:
    """One anti-aliased stroke per bone plus a root disc, values in [0, 1]."""
    H = W = config.image_size
    width = config.stick_width * config.scale
    y, x = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    kp = np.asarray(keypoints, float)
    if not np.isfinite(kp).all():
        raise ValueError("keypoints must be finite")
    out = np.zeros((STICKMAN_CHANNELS, H, W))
    segs = [(kp[J[a]], kp[J[b]]) for a, b in BONES] + [(kp[J[ROOT]], kp[J[ROOT]])]
    for c, (a, b) in enumerate(segs):
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-12:
            t = np.zeros_like(x)
        else:
            t = np.clip(((x - a[0]) * ab[0] + (y - a[1]) * ab[1]) / denom, 0.0, 1.0)
        dist = np.hypot(x - (a[0] + t * ab[0]), y - (a[1] + t * ab[1]))
        out[c] = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
    return out


def render_gt(person: PersonSpec, pose: PoseSample, config: WorldConfig) -> GTFrame:
    scores, uv = geometry(person, pose, config)
    atlas = texture_atlas(person, config.atlas_size)
    bg = background_image(person, config)
    with torch.no_grad():
        img = renderer.render(
            torch.from_numpy(atlas), torch.from_numpy(uv), torch.from_numpy(scores), torch.from_numpy(bg)
        ).numpy()
    return GTFrame(
        image=img,
        mask=1.0 - scores[-1],
        part_scores=scores,
        uv=uv,
        keypoints=pose.keypoints.copy(),
        stickman=rasterize_stickman(pose.keypoints, config),
    )


def extract_partial_texture(
    image: np.ndarray, uv: np.ndarray, part_scores: np.ndarray, atlas_size: int,
) -> PartialTexture:
    """Splat foreground pixels into their part's atlas with bilinear weights.

    A pixel belongs to part k when ``part_scores[k] >= 0.5``. Texels whose
    accumulated weight reaches 0.5 are marked visible and hold the
    weight-normalized colour; the rest are zero.
    """
    n = part_scores.shape[0] - 1
    A = atlas_size
    acc = np.zeros((n, 3, A * A))
    wsum = np.zeros((n, A * A))
    label = part_scores.argmax(axis=0)
    fg = (label < n) & (part_scores.max(axis=0) >= 0.5)
    ys, xs = np.nonzero(fg)
    if len(ys):
        k = label[ys, xs]
        u = np.clip(uv[2 * k, ys, xs], 0, 1) * (A - 1)
        v = np.clip(uv[2 * k + 1, ys, xs], 0, 1) * (A - 1)
        x0 = np.minimum(np.floor(u).astype(int), A - 2)
        y0 = np.minimum(np.floor(v).astype(int), A - 2)
        fx, fy = u - x0, v - y0
        col = image[:, ys, xs]  # (3, m)
        size = n * A * A
        for dy, dx, w in (
            (0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
            (1, 0, (1 - fx) * fy), (1, 1, fx * fy),
        ):
            flat = k * A * A + (y0 + dy) * A + (x0 + dx)
            wsum += np.bincount(flat, weights=w, minlength=size).reshape(n, A * A)
            for c in range(3):
                acc[:, c] += np.bincount(flat, weights=w * col[c], minlength=size).reshape(n, A * A)
    vis = wsum >= 0.5
    atlas = np.where(vis[:, None], acc / np.maximum(wsum, 1e-12)[:, None], 0.0)
    return PartialTexture(
        atlas=atlas.reshape(n, 3, A, A),
        visibility=vis.reshape(n, A, A).astype(np.float64),
    )


def partial_texture_of(frame: GTFrame, atlas_size: int) -> PartialTexture:
    return extract_partial_texture(frame.image, frame.uv, frame.part_scores, atlas_size)


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    persons_train: int = 6
    persons_test: int = 2
    frames_per_person: int = 200
    frames_per_test_person: int = 200
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["world"] = WorldConfig(**d.get("world", {}))
        return cls(**d)


def person_roster(config: DatasetConfig) -> list[tuple[str, str, int]]:
    """(person_id, split, seed) for every person; train and test seeds never collide."""
    out = []
    for i in range(config.persons_train):
        out.append((f"train_{i:03d}", "train", config.seed * 10_000 + i))
    for i in range(config.persons_test):
        out.append((f"test_{i:03d}", "test", config.seed * 10_000 + 5_000 + i))
    return out


def frame_bundle(frame: GTFrame, partial: PartialTexture) -> dict[str, np.ndarray]:
    return {
        "image": frame.image,
        "mask": frame.mask,
        "part_scores": frame.part_scores,
        "uv": frame.uv,
        "keypoints": frame.keypoints,
        "stickman": frame.stickman,
        "partial_atlas": partial.atlas,
        "partial_visibility": partial.visibility,
    }


def generate_dataset(config: DatasetConfig, out_dir: str | Path, force: bool = False) -> Path:
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} exists and is not empty (use force to overwrite)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    wc = config.world
    persons, frames = [], []
    for pid, split, seed in person_roster(config):
        person = make_person(seed, wc, pid)
        count = config.frames_per_person if split == "train" else config.frames_per_test_person
        (root / pid).mkdir()
        for f in range(count):
            pose = pose_at(person, f, wc)
            gt = render_gt(person, pose, wc)
            partial = partial_texture_of(gt, wc.atlas_size)
            rel = f"{pid}/{f:06d}.tns"
            tensorio.save_bundle(root / rel, frame_bundle(gt, partial))
            frames.append({"person": pid, "frame": f, "split": split, "path": rel})
        persons.append({"id": pid, "split": split, "seed": seed, "frames": count, "spec": person.to_json()})
        log.info("wrote %d frames for %s", count, pid)
    index = {"format": "motionxfer-dataset/1", "config": config.to_json(), "persons": persons, "frames": frames}
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return root


class Dataset:
    """In-memory view of an on-disk dataset, grouped by person.

    Arrays are held as float32 torch tensors; the part scores are kept as an
    integer label map and expanded on request.
    """

    def __init__(self, root: str | Path, splits: Sequence[str] = ("train", "test")) -> None:
        self.root = Path(root)
        index = json.loads((self.root / "index.json").read_text())
        self.index = index
        self.config = DatasetConfig.from_json(index["config"])
        self.world = self.config.world
        self.persons: dict[str, PersonSpec] = {}
        self.split_of: dict[str, str] = {}
        for rec in index["persons"]:
            if rec["split"] in splits:
                self.persons[rec["id"]] = PersonSpec.from_json(rec["spec"])
                self.split_of[rec["id"]] = rec["split"]
        self.frames: dict[str, dict[str, torch.Tensor]] = {}
        by_person: dict[str, list] = {}
        for rec in index["frames"]:
            if rec["person"] in self.persons:
                by_person.setdefault(rec["person"], []).append(rec)
        for pid, recs in by_person.items():
            recs.sort(key=lambda r: r["frame"])
            bundles = [tensorio.load_bundle(self.root / r["path"]) for r in recs]
            self.frames[pid] = {
                "image": torch.from_numpy(np.stack([b["image"] for b in bundles])),
                "mask": torch.from_numpy(np.stack([b["mask"] for b in bundles])),
                "labels": torch.from_numpy(np.stack([b["part_scores"].argmax(0) for b in bundles]).astype(np.int64)),
                "uv": torch.from_numpy(np.stack([b["uv"] for b in bundles])),
                "keypoints": torch.from_numpy(np.stack([b["keypoints"] for b in bundles])),
                "stickman": torch.from_numpy(np.stack([b["stickman"] for b in bundles])),
                "partial_atlas": torch.from_numpy(np.stack([b["partial_atlas"] for b in bundles])),
                "partial_visibility": torch.from_numpy(np.stack([b["partial_visibility"] for b in bundles])),
            }

    @property
    def n_parts(self) -> int:
        return self.world.n_parts

    def person_ids(self, split: str | None = None) -> list[str]:
        return sorted(p for p in self.persons if split is None or self.split_of[p] == split)

    def n_frames(self, person: str) -> int:
        return self.frames[person]["image"].shape[0]

    def get(self, person: str, idx: Sequence[int] | torch.Tensor) -> dict[str, torch.Tensor]:
        """Frames ``idx`` of ``person`` with one-hot ``part_scores`` expanded."""
        idx = torch.as_tensor(idx, dtype=torch.long)
        out = {k: v[idx] for k, v in self.frames[person].items()}
        out["part_scores"] = one_hot_scores(out["labels"], self.n_parts)
        return out

    def iter_persons(self, split: str | None = None) -> Iterator[str]:
        yield from self.person_ids(split)


def one_hot_scores(labels: torch.Tensor, n_parts: int) -> torch.Tensor:
    """(..., H, W) integer labels -> (..., n+1, H, W) float one-hot."""
    oh = torch.nn.functional.one_hot(labels, n_parts + 1).to(torch.float32)
    return oh.movedim(-1, -3)
