"""Synthetic scene/action worlds with a known normal/abnormal relation table.

Scenes are random prototype vectors; actions are smooth sinusoidal joint
trajectories around a standing COCO-17 pose, stored in box-relative units.
Whether an action is anomalous depends only on the (scene, action) pair.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Clip, Dataset, DatasetHeader, SceneFeature, SkeletonSequence
from .errors import ContractViolation

# standing pose in box units (x right, y down), COCO keypoint order
BASE_POSE = np.array([
    [0.00, -0.40], [-0.03, -0.43], [0.03, -0.43], [-0.06, -0.41], [0.06, -0.41],
    [-0.15, -0.25], [0.15, -0.25], [-0.20, -0.08], [0.20, -0.08], [-0.22, 0.05],
    [0.22, 0.05], [-0.10, 0.05], [0.10, 0.05], [-0.11, 0.25], [0.11, 0.25],
    [-0.12, 0.42], [0.12, 0.42],
])
BOX_W = 0.3
BOX_H = 0.5
MAX_PROTOTYPE_COS = 0.8


@dataclass
class World:
    scene_prototypes: np.ndarray   # (n_scenes, d_s)
    action_templates: np.ndarray   # (n_actions, T, J, 2), box-relative
    relation_table: np.ndarray     # (n_scenes, n_actions) bool, True = abnormal
    noise_level: float = 0.0
    seed: int = 0

    @property
    def n_scenes(self):
        return self.scene_prototypes.shape[0]

    @property
    def n_actions(self):
        return self.action_templates.shape[0]

    @property
    def d_s(self):
        return self.scene_prototypes.shape[1]

    @property
    def clip_len(self):
        return self.action_templates.shape[1]

    @property
    def n_joints(self):
        return self.action_templates.shape[2]

    def normal_actions(self, s):
        return [a for a in range(self.n_actions) if not self.relation_table[s, a]]

    def abnormal_actions(self, s):
        return [a for a in range(self.n_actions) if self.relation_table[s, a]]

    def template_features(self):
        return self.action_templates.reshape(self.n_actions, -1)


def _abnormal_count(frac, n):
    # round first so 0.3 * 40 does not ceil to 13
    return int(math.ceil(round(frac * n, 9)))


def _relation_table(n_scenes, n_actions, n_abn, rng):
    n_normal = n_scenes * n_actions - n_abn
    normal = np.zeros((n_scenes, n_actions), dtype=bool)
    if n_scenes == 1:
        # no other context exists, so only require one normal action
        if n_normal < 1:
            raise ContractViolation("abnormal_fraction leaves no normal action")
        normal[0, rng.permutation(n_actions)[:n_normal]] = True
        return ~normal
    if n_normal < max(n_scenes, n_actions):
        raise ContractViolation(
            f"{n_abn} abnormal pairs would make some action abnormal in every scene "
            f"(at most {n_scenes * n_actions - max(n_scenes, n_actions)} allowed)")
    # minimal random cover: max(n_scenes, n_actions) distinct cells touching every row and column
    ps, pa = rng.permutation(n_scenes), rng.permutation(n_actions)
    for i in range(max(n_scenes, n_actions)):
        normal[ps[i % n_scenes], pa[i % n_actions]] = True
    free = np.flatnonzero(~normal.reshape(-1))
    extra = n_normal - int(normal.sum())
    normal.reshape(-1)[rng.permutation(free)[:extra]] = True
    return ~normal


def _templates(n_actions, clip_len, rng):
    J = BASE_POSE.shape[0]
    t = np.arange(clip_len, dtype=np.float64) / clip_len
    out = np.empty((n_actions, clip_len, J, 2))
    for k in range(n_actions):
        pose = BASE_POSE + rng.uniform(-0.05, 0.05, size=BASE_POSE.shape)
        freq = 1.0 + (k % 3) + rng.uniform(0.0, 0.5)
        amp = rng.uniform(0.12, 0.28, size=(J, 2))
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(J, 2))
        wave = np.sin(2.0 * np.pi * freq * t[:, None, None] + phase[None])
        out[k] = pose[None] + amp[None] * wave
    return out


def _prototypes(n_scenes, d_s, rng):
    for _ in range(1000):
        P = rng.normal(size=(n_scenes, d_s))
        U = P / np.linalg.norm(P, axis=1, keepdims=True)
        G = U @ U.T
        np.fill_diagonal(G, -1.0)
        if G.max() < MAX_PROTOTYPE_COS:
            return P
    raise ContractViolation(f"cannot place {n_scenes} separable prototypes in {d_s} dims")


def generate_world(n_scenes, n_actions, abnormal_fraction, seed=0, noise_level=0.0,
                   d_s=16, clip_len=24):
    if n_scenes < 1 or n_actions < 2:
        raise ContractViolation("need n_scenes >= 1 and n_actions >= 2")
    if not 0.0 < abnormal_fraction < 1.0:
        raise ContractViolation("abnormal_fraction must lie in (0, 1)")
    if noise_level < 0:
        raise ContractViolation("noise_level must be non-negative")
    rng = np.random.default_rng(seed)
    n_abn = _abnormal_count(abnormal_fraction, n_scenes * n_actions)
    table = _relation_table(n_scenes, n_actions, n_abn, rng)
    return World(
        scene_prototypes=_prototypes(n_scenes, d_s, rng),
        action_templates=_templates(n_actions, clip_len, rng),
        relation_table=table,
        noise_level=float(noise_level),
        seed=seed,
    )


def oracle_label(world, scene_id, action_id):
    if not (0 <= scene_id < world.n_scenes and 0 <= action_id < world.n_actions):
        raise ContractViolation(f"ids out of range: scene {scene_id}, action {action_id}")
    return "abnormal" if world.relation_table[scene_id, action_id] else "normal"


class _Cycler:
    """Endless shuffled cycle over a list, reshuffled each pass."""

    def __init__(self, items, rng):
        self.items = list(items)
        self.rng = rng
        self.queue = []

    def __next__(self):
        if not self.queue:
            self.queue = [self.items[i] for i in self.rng.permutation(len(self.items))]
        return self.queue.pop()


def make_clip(world, scene_id, action_id, rng, clip_id="clip", video_id="video",
              start=0, video_label="unlabeled", frame_labels=True):
    T, J = world.clip_len, world.n_joints
    sigma = world.noise_level
    cx = rng.uniform(0.3, 0.7)
    cy = rng.uniform(0.45, 0.55)
    pos = np.tile([cx, cy, BOX_W, BOX_H], (T, 1))
    joints = world.action_templates[action_id] * [BOX_W, BOX_H] + [cx, cy]
    scene = world.scene_prototypes[scene_id].copy()
    if sigma > 0:
        joints = joints + rng.normal(0.0, sigma, size=joints.shape)
        scene = scene + rng.normal(0.0, sigma, size=scene.shape)
    joints = np.clip(joints, 0.0, 1.0)
    label = int(world.relation_table[scene_id, action_id])
    return Clip(
        clip_id=clip_id, video_id=video_id, frame_span=(start, start + T),
        skeleton=SkeletonSequence(joints=joints, confidence=np.ones((T, J)), pos=pos),
        scene=SceneFeature(vector=scene, scene_id_hint=scene_id),
        video_label=video_label,
        frame_labels=np.full(T, label, dtype=np.int64) if frame_labels else None,
        action_id_hint=action_id,
    )


def sample_dataset(world, videos_per_class, clips_per_video, seed=0, mode="weak",
                   abnormal_clip_fraction=0.5, frame_labels=True):
    """Draw normal (and, unless ``mode == 'unsup'``, abnormal) videos from ``world``.

    Normal videos hold only normal pairs of their scene. Abnormal videos hold
    ``max(1, round(abnormal_clip_fraction * clips_per_video))`` abnormal clips,
    the rest normal. Pairs are drawn from shuffled cycles so every admissible
    pair shows up once enough clips are requested.
    """
    if videos_per_class < 1 or clips_per_video < 1:
        raise ContractViolation("video and clip counts must be positive")
    rng = np.random.default_rng(seed)
    T = world.clip_len
    with_labels = frame_labels or mode == "full"
    normal_scenes = [s for s in range(world.n_scenes) if world.normal_actions(s)]
    abn_scenes = [s for s in range(world.n_scenes) if world.abnormal_actions(s)]
    norm_cyc = {s: _Cycler(world.normal_actions(s), rng) for s in normal_scenes}
    abn_cyc = {s: _Cycler(world.abnormal_actions(s), rng) for s in abn_scenes}
    clips = []

    scene_cycle = _Cycler(normal_scenes, rng)
    for v in range(videos_per_class):
        vid = f"vn{v:04d}"
        s = next(scene_cycle)
        for c in range(clips_per_video):
            clips.append(make_clip(world, s, next(norm_cyc[s]), rng, f"{vid}_c{c:02d}", vid,
                                   c * T, "normal", with_labels))

    if mode != "unsup":
        n_abn = min(clips_per_video, max(1, int(round(abnormal_clip_fraction * clips_per_video))))
        scene_cycle = _Cycler(abn_scenes, rng)
        for v in range(videos_per_class):
            vid = f"va{v:04d}"
            s = next(scene_cycle)
            abn_slots = set(rng.permutation(clips_per_video)[:n_abn].tolist())
            if s not in norm_cyc:
                abn_slots = set(range(clips_per_video))
            for c in range(clips_per_video):
                a = next(abn_cyc[s]) if c in abn_slots else next(norm_cyc[s])
                clips.append(make_clip(world, s, a, rng, f"{vid}_c{c:02d}", vid,
                                       c * T, "abnormal", with_labels))

    header = DatasetHeader(J=world.n_joints, d_s=world.d_s, clip_len=T, mode=mode,
                           scene_count=world.n_scenes, action_count=world.n_actions,
                           scene_extractor="synthetic")
    return Dataset(clips=clips, header=header)


# -- ground-truth sidecar ----------------------------------------------------

def world_to_dict(world):
    return {
        "version": 1,
        "seed": int(world.seed),
        "noise_level": world.noise_level,
        "relation_table": [["abnormal" if x else "normal" for x in row] for row in world.relation_table],
        "scene_prototypes": world.scene_prototypes.tolist(),
        "action_templates": world.action_templates.tolist(),
    }


def world_from_dict(d):
    return World(
        scene_prototypes=np.asarray(d["scene_prototypes"], dtype=np.float64),
        action_templates=np.asarray(d["action_templates"], dtype=np.float64),
        relation_table=np.array([[x == "abnormal" for x in row] for row in d["relation_table"]]),
        noise_level=float(d["noise_level"]),
        seed=int(d["seed"]),
    )


def save_world(world, path):
    Path(path).write_text(json.dumps(world_to_dict(world), separators=(",", ":")) + "\n")


def load_world(path):
    return world_from_dict(json.loads(Path(path).read_text()))
