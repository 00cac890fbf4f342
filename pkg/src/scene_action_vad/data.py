"""Decoupled scene/skeleton clip records and the line-delimited dataset format.

A dataset file is JSON Lines. The first line is the header::

    {"record": "header", "version": 1, "J": 17, "d_s": 16, "clip_len": 24,
     "mode": "weak", "scene_count": 5, "action_count": 8,
     "scene_extractor": "synthetic"}

``mode`` is one of ``full``, ``weak`` or ``unsup``; the count hints and the
extractor tag may be ``null``. Every following line is one clip::

    {"record": "clip", "clip_id": "v0003_c01", "video_id": "v0003",
     "frame_span": [24, 48], "video_label": "abnormal",
     "frame_labels": [0, 0, ...] | null,
     "scene": {"vector": [...], "scene_id_hint": 2 | null},
     "skeleton": {"joints": [[[x, y], ...J], ...T],
                  "confidence": [[c, ...J], ...T],
                  "pos": [[cx, cy, w, h], ...T]},
     "action_id_hint": 5 | null}

Coordinates, confidences and boxes are normalised to [0, 1]. Box width and
height must be strictly positive since skeleton features are expressed in
box units. ``frame_labels`` are mandatory in ``full`` mode and optional
otherwise (held-out evaluation sets carry them regardless of mode).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DatasetError

FORMAT_VERSION = 1
LABELS = ("normal", "abnormal", "unlabeled")
MODES = ("full", "weak", "unsup")
DEFAULT_J = 17
DEFAULT_CLIP_LEN = 24


@dataclass(frozen=True)
class SkeletonSequence:
    joints: np.ndarray      # (T, J, 2)
    confidence: np.ndarray  # (T, J)
    pos: np.ndarray         # (T, 4) as cx, cy, w, h

    @property
    def n_frames(self):
        return self.joints.shape[0]

    @property
    def n_joints(self):
        return self.joints.shape[1]

    def normalized_joints(self):
        """Joint coordinates relative to the per-frame box center, in box units."""
        center = self.pos[:, None, :2]
        size = self.pos[:, None, 2:]
        return (self.joints - center) / size

    def feature(self):
        return self.normalized_joints().reshape(-1)

    def mean_box(self):
        return self.pos.mean(axis=0)


@dataclass(frozen=True)
class SceneFeature:
    vector: np.ndarray
    scene_id_hint: Optional[int] = None


@dataclass(frozen=True)
class Clip:
    clip_id: str
    video_id: str
    frame_span: tuple
    skeleton: SkeletonSequence
    scene: SceneFeature
    video_label: str = "unlabeled"
    frame_labels: Optional[np.ndarray] = None
    action_id_hint: Optional[int] = None

    def clip_label(self):
        """Binary clip label: max over frame labels when present, else the video label."""
        if self.frame_labels is not None:
            return int(np.max(self.frame_labels))
        return int(self.video_label == "abnormal")


@dataclass(frozen=True)
class DatasetHeader:
    J: int = DEFAULT_J
    d_s: int = 16
    clip_len: int = DEFAULT_CLIP_LEN
    mode: str = "weak"
    scene_count: Optional[int] = None
    action_count: Optional[int] = None
    scene_extractor: Optional[str] = None


@dataclass
class Dataset:
    clips: list
    header: DatasetHeader
    _by_id: dict = field(default=None, init=False, repr=False)

    def __len__(self):
        return len(self.clips)

    def __iter__(self):
        return iter(self.clips)

    def by_id(self, clip_id):
        if self._by_id is None:
            self._by_id = {c.clip_id: c for c in self.clips}
        return self._by_id[clip_id]

    def videos(self):
        """Clips grouped by video id, in first-appearance order."""
        out = {}
        for c in self.clips:
            out.setdefault(c.video_id, []).append(c)
        return out

    def subset(self, label):
        return [c for c in self.clips if c.video_label == label]


# -- validation --------------------------------------------------------------

def _fail(clip_id, msg):
    raise DatasetError(f"clip {clip_id!r}: {msg}")


def _in_unit(arr):
    return bool(np.all((arr >= 0.0) & (arr <= 1.0)))


def validate_clip(clip, header):
    cid = clip.clip_id
    sk = clip.skeleton
    T, J = header.clip_len, header.J
    if sk.joints.shape != (T, J, 2):
        _fail(cid, f"joints shape {sk.joints.shape}, expected {(T, J, 2)}")
    if sk.confidence.shape != (T, J):
        _fail(cid, f"confidence shape {sk.confidence.shape}, expected {(T, J)}")
    if sk.pos.shape != (T, 4):
        _fail(cid, f"pos shape {sk.pos.shape}, expected {(T, 4)}")
    for name, arr in (("joints", sk.joints), ("confidence", sk.confidence), ("pos", sk.pos)):
        if not np.all(np.isfinite(arr)):
            _fail(cid, f"{name} has non-finite values")
        if not _in_unit(arr):
            _fail(cid, f"{name} outside [0, 1]")
    if np.any(sk.pos[:, 2:] <= 0.0):
        _fail(cid, "box width/height must be positive")
    vec = clip.scene.vector
    if vec.shape != (header.d_s,):
        _fail(cid, f"scene dim {vec.shape}, expected ({header.d_s},)")
    if not np.all(np.isfinite(vec)):
        _fail(cid, "scene vector has non-finite values")
    start, end = clip.frame_span
    if end - start != T or start < 0:
        _fail(cid, f"frame_span {clip.frame_span} does not cover {T} frames")
    if clip.video_label not in LABELS:
        _fail(cid, f"unknown video_label {clip.video_label!r}")
    if clip.frame_labels is not None:
        fl = clip.frame_labels
        if fl.shape != (T,):
            _fail(cid, f"frame_labels length {fl.shape}, expected {T}")
        if not np.all((fl == 0) | (fl == 1)):
            _fail(cid, "frame_labels must be binary")
    elif header.mode == "full":
        _fail(cid, "frame_labels required in full mode")


def validate_dataset(ds):
    h = ds.header
    if h.mode not in MODES:
        raise DatasetError(f"unknown mode {h.mode!r}")
    for key in ("J", "d_s", "clip_len"):
        if not isinstance(getattr(h, key), int) or getattr(h, key) < 1:
            raise DatasetError(f"header {key} must be a positive integer")
    if not ds.clips:
        raise DatasetError("empty dataset")
    seen = set()
    for c in ds.clips:
        if c.clip_id in seen:
            _fail(c.clip_id, "duplicate clip_id")
        seen.add(c.clip_id)
        validate_clip(c, h)
    return ds


# -- serialization -----------------------------------------------------------

def _opt_int(x):
    return None if x is None else int(x)


def header_record(h):
    return {
        "record": "header", "version": FORMAT_VERSION, "J": h.J, "d_s": h.d_s,
        "clip_len": h.clip_len, "mode": h.mode, "scene_count": _opt_int(h.scene_count),
        "action_count": _opt_int(h.action_count), "scene_extractor": h.scene_extractor,
    }


def clip_record(c):
    return {
        "record": "clip",
        "clip_id": c.clip_id,
        "video_id": c.video_id,
        "frame_span": [int(c.frame_span[0]), int(c.frame_span[1])],
        "video_label": c.video_label,
        "frame_labels": None if c.frame_labels is None else [int(v) for v in c.frame_labels],
        "scene": {"vector": c.scene.vector.tolist(), "scene_id_hint": _opt_int(c.scene.scene_id_hint)},
        "skeleton": {
            "joints": c.skeleton.joints.tolist(),
            "confidence": c.skeleton.confidence.tolist(),
            "pos": c.skeleton.pos.tolist(),
        },
        "action_id_hint": _opt_int(c.action_id_hint),
    }


def dumps_dataset(ds):
    lines = [json.dumps(header_record(ds.header), separators=(",", ":"))]
    lines.extend(json.dumps(clip_record(c), separators=(",", ":")) for c in ds.clips)
    return "\n".join(lines) + "\n"


def save_dataset(ds, path):
    Path(path).write_text(dumps_dataset(ds))


def _array(rec, key, cid, ndim):
    try:
        arr = np.asarray(rec[key], dtype=np.float64)
    except KeyError:
        _fail(cid, f"missing field {key!r}")
    except (TypeError, ValueError):
        _fail(cid, f"field {key!r} is ragged or non-numeric")
    if arr.ndim != ndim:
        _fail(cid, f"field {key!r} has {arr.ndim} dims, expected {ndim}")
    return arr


def _parse_clip(rec, lineno):
    cid = rec.get("clip_id")
    if not isinstance(cid, str) or not cid:
        raise DatasetError(f"line {lineno}: clip record without clip_id")
    for key in ("video_id", "frame_span", "video_label", "scene", "skeleton"):
        if key not in rec:
            _fail(cid, f"missing field {key!r}")
    sk = rec["skeleton"]
    sc = rec["scene"]
    if not isinstance(sk, dict) or not isinstance(sc, dict):
        _fail(cid, "scene/skeleton must be objects")
    skeleton = SkeletonSequence(
        joints=_array(sk, "joints", cid, 3),
        confidence=_array(sk, "confidence", cid, 2),
        pos=_array(sk, "pos", cid, 2),
    )
    scene = SceneFeature(vector=_array(sc, "vector", cid, 1), scene_id_hint=_opt_int(sc.get("scene_id_hint")))
    span = rec["frame_span"]
    if not (isinstance(span, list) and len(span) == 2 and all(isinstance(v, int) for v in span)):
        _fail(cid, "frame_span must be two integers")
    fl = rec.get("frame_labels")
    if fl is not None:
        fl = np.asarray(fl)
        if fl.ndim != 1 or not np.issubdtype(fl.dtype, np.integer):
            _fail(cid, "frame_labels must be a list of integers")
        fl = fl.astype(np.int64)
    return Clip(
        clip_id=cid, video_id=str(rec["video_id"]), frame_span=(span[0], span[1]),
        skeleton=skeleton, scene=scene, video_label=rec["video_label"], frame_labels=fl,
        action_id_hint=_opt_int(rec.get("action_id_hint")),
    )


def loads_dataset(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DatasetError("empty file")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetError(f"header is not valid JSON: {e}") from None
    if not isinstance(head, dict) or head.get("record") != "header":
        raise DatasetError("first record must be the header")
    if head.get("version", FORMAT_VERSION) != FORMAT_VERSION:
        raise DatasetError(f"unsupported format version {head.get('version')}")
    try:
        header = DatasetHeader(
            J=head["J"], d_s=head["d_s"], clip_len=head["clip_len"], mode=head["mode"],
            scene_count=head.get("scene_count"), action_count=head.get("action_count"),
            scene_extractor=head.get("scene_extractor"),
        )
    except KeyError as e:
        raise DatasetError(f"header missing field {e.args[0]!r}") from None
    clips = []
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as e:
            raise DatasetError(f"line {lineno}: invalid JSON: {e}") from None
        if not isinstance(rec, dict) or rec.get("record") != "clip":
            raise DatasetError(f"line {lineno}: expected a clip record")
        clips.append(_parse_clip(rec, lineno))
    return validate_dataset(Dataset(clips=clips, header=header))


def load_dataset(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such dataset file: {path}")
    return loads_dataset(path.read_text())


# -- recombination -----------------------------------------------------------

def cross_combine(scenes, actions, prefix="x", clip_len=None):
    """Pair every scene with every action as unlabeled clips.

    Position boxes travel with the action. Output order is scene-major.
    """
    scenes = list(scenes)
    actions = list(actions)
    if not scenes or not actions:
        raise DatasetError("cross_combine needs at least one scene and one action")
    out = []
    for i, s in enumerate(scenes):
        for j, a in enumerate(actions):
            T = a.n_frames if clip_len is None else clip_len
            out.append(Clip(
                clip_id=f"{prefix}_s{i}_a{j}", video_id=prefix, frame_span=(0, T),
                skeleton=a, scene=s, video_label="unlabeled",
            ))
    return out
