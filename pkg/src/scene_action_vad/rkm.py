"""Relational knowledge mapper: a bipartite scene/action graph with
Normal/Abnormal edges built from clustered, decoupled clip features.

Typical use::

    normal_m, abnormal_m, scenes = build_clusters(dataset, cfg)
    merged = combine_centers(normal_m.centers, abnormal_m.centers, cfg.rho,
                             normal_m.counts(), abnormal_m.counts())
    kg = construct_graph(dataset.subset("normal"), dataset.subset("abnormal"),
                         merged, scenes)
"""

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractViolation, ZeroNormError
from .kernels import ClusterModel, argmax_cosine, kmeans

NORMAL = "normal"
ABNORMAL = "abnormal"
UNKNOWN = "unknown"


@dataclass
class RkmConfig:
    theta_fn: int = 15
    theta_fa: int = 25
    scene_k: Optional[int] = None
    rho: float = 0.95
    mu_a: float = 0.45
    mu_s: float = 0.90
    seed: int = 0

    def __post_init__(self):
        for name in ("rho", "mu_a", "mu_s"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ContractViolation(f"{name}={v} must lie in (0, 1]")
        for name in ("theta_fn", "theta_fa"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.scene_k is not None and self.scene_k < 1:
            raise ContractViolation("scene_k must be >= 1")


@dataclass
class Node:
    node_id: int
    center: np.ndarray
    count: int
    tag: str = ""


@dataclass
class KnowledgeGraph:
    scene_nodes: list = field(default_factory=list)
    action_nodes: list = field(default_factory=list)
    relations: dict = field(default_factory=dict)

    def copy(self):
        return copy.deepcopy(self)

    def scene_matrix(self):
        return np.stack([n.center for n in self.scene_nodes])

    def action_matrix(self):
        return np.stack([n.center for n in self.action_nodes])

    def scene_ids(self):
        return [n.node_id for n in self.scene_nodes]

    def action_ids(self):
        return [n.node_id for n in self.action_nodes]

    def check(self):
        sids = self.scene_ids()
        aids = self.action_ids()
        if len(set(sids)) != len(sids) or len(set(aids)) != len(aids):
            raise ContractViolation("duplicate node ids")
        sset, aset = set(sids), set(aids)
        for (s, a), lab in self.relations.items():
            if s not in sset or a not in aset:
                raise ContractViolation(f"edge ({s}, {a}) references a missing node")
            if lab not in (NORMAL, ABNORMAL):
                raise ContractViolation(f"edge ({s}, {a}) has label {lab!r}")
        return self


@dataclass
class CenterSet:
    """Action centers after combining, with member counts and provenance tags."""
    centers: np.ndarray
    counts: np.ndarray
    tags: list
    merges: dict = field(default_factory=dict)  # abnormal index -> normal index


# -- clustering --------------------------------------------------------------

def action_features(clips):
    return np.stack([c.skeleton.feature() for c in clips])


def scene_features(clips):
    return np.stack([c.scene.vector for c in clips])


def build_clusters(dataset, cfg):
    """Cluster normal-video actions, abnormal-video actions and scenes.

    Returns ``(normal_model, abnormal_model, scene_model)``. When every clip
    carries a scene category hint and the header states the category count,
    scene centers are the per-category means and no clustering is done.
    """
    normal = dataset.subset("normal")
    abnormal = dataset.subset("abnormal")
    if len(normal) < cfg.theta_fn:
        raise ContractViolation(f"{len(normal)} normal-video clips < theta_fn={cfg.theta_fn}")
    if len(abnormal) < cfg.theta_fa:
        raise ContractViolation(f"{len(abnormal)} abnormal-video clips < theta_fa={cfg.theta_fa}")
    normal_model = kmeans(action_features(normal), cfg.theta_fn, seed=cfg.seed)
    abnormal_model = kmeans(action_features(abnormal), cfg.theta_fa, seed=cfg.seed + 1)

    clips = normal + abnormal
    S = scene_features(clips)
    hints = [c.scene.scene_id_hint for c in clips]
    n_cat = dataset.header.scene_count
    if n_cat is not None and all(h is not None for h in hints):
        scene_model = _category_means(S, np.asarray(hints), n_cat)
    else:
        k = cfg.scene_k if cfg.scene_k is not None else n_cat
        if k is None:
            raise ContractViolation("scene_k unset and dataset header has no scene_count")
        if k > len(np.unique(S, axis=0)):
            raise ContractViolation(f"scene_k={k} exceeds the number of distinct scene samples")
        scene_model = kmeans(S, k, seed=cfg.seed + 2)
    return normal_model, abnormal_model, scene_model


def _category_means(S, hints, n_cat):
    present = np.unique(hints)
    if present.min() < 0 or present.max() >= n_cat:
        raise ContractViolation("scene_id_hint outside [0, scene_count)")
    # categories absent from the data get no node
    remap = {int(h): i for i, h in enumerate(present)}
    labels = np.array([remap[int(h)] for h in hints])
    centers = np.zeros((present.size, S.shape[1]))
    np.add.at(centers, labels, S)
    centers /= np.bincount(labels)[:, None]
    inertia = float(np.sum((S - centers[labels]) ** 2))
    return ClusterModel(centers=centers, assignments=labels, inertia=inertia)


def combine_centers(normal_centers, abnormal_centers, rho, normal_counts=None, abnormal_counts=None):
    """Fold abnormal-video action centers into matching normal-video centers.

    An abnormal-video center whose best cosine match among the *original*
    normal-video centers exceeds ``rho`` is merged into it by a count-weighted
    mean; otherwise it is kept as a separate center. Normal-video centers are
    never merged with each other.
    """
    N = np.atleast_2d(np.asarray(normal_centers, dtype=np.float64))
    A = np.atleast_2d(np.asarray(abnormal_centers, dtype=np.float64))
    if N.shape[1] != A.shape[1]:
        raise ContractViolation(f"dimension mismatch: {N.shape[1]} vs {A.shape[1]}")
    nc = np.ones(len(N), dtype=np.int64) if normal_counts is None else np.asarray(normal_counts, dtype=np.int64)
    ac = np.ones(len(A), dtype=np.int64) if abnormal_counts is None else np.asarray(abnormal_counts, dtype=np.int64)
    best, sim = argmax_cosine(A, N)
    sums = N * nc[:, None]
    counts = nc.copy()
    tags = ["normal"] * len(N)
    extra, extra_counts, merges = [], [], {}
    for j in range(len(A)):
        if sim[j] > rho:
            i = int(best[j])
            sums[i] += A[j] * ac[j]
            counts[i] += ac[j]
            tags[i] = "shared"
            merges[j] = i
        else:
            extra.append(A[j])
            extra_counts.append(ac[j])
            tags.append("abnormal")
    # zero-count clusters keep their original center
    safe = np.maximum(counts, 1)
    merged = np.where(counts[:, None] > 0, sums / safe[:, None], N)
    if extra:
        merged = np.vstack([merged, np.stack(extra)])
        counts = np.concatenate([counts, np.asarray(extra_counts, dtype=np.int64)])
    return CenterSet(centers=merged, counts=counts, tags=tags, merges=merges)


# -- construction and queries ------------------------------------------------

def _assign(clips, centers, what):
    feats = action_features(clips) if what == "action" else scene_features(clips)
    zero = np.flatnonzero(np.einsum("nd,nd->n", feats, feats) == 0.0)
    if zero.size:
        raise ZeroNormError(f"clip {clips[zero[0]].clip_id!r}: zero-norm {what} feature")
    idx, _ = argmax_cosine(feats, centers)
    return idx


def construct_graph(normal_clips, abnormal_clips, action_centers, scene_centers):
    """Normal-video pairs become Normal edges; unseen abnormal-video pairs become Abnormal.

    ``action_centers`` may be a :class:`CenterSet` or a plain array;
    ``scene_centers`` a :class:`~scene_action_vad.kernels.ClusterModel` or array.
    """
    if isinstance(action_centers, CenterSet):
        A, a_counts, a_tags = action_centers.centers, action_centers.counts, action_centers.tags
    else:
        A = np.atleast_2d(np.asarray(action_centers, dtype=np.float64))
        a_counts, a_tags = np.ones(len(A), dtype=np.int64), ["normal"] * len(A)
    if hasattr(scene_centers, "centers"):
        S, s_counts = scene_centers.centers, scene_centers.counts()
    else:
        S = np.atleast_2d(np.asarray(scene_centers, dtype=np.float64))
        s_counts = np.ones(len(S), dtype=np.int64)
    kg = KnowledgeGraph(
        scene_nodes=[Node(i, S[i].copy(), int(s_counts[i])) for i in range(len(S))],
        action_nodes=[Node(i, A[i].copy(), int(a_counts[i]), a_tags[i]) for i in range(len(A))],
    )
    if normal_clips:
        si = _assign(normal_clips, S, "scene")
        ai = _assign(normal_clips, A, "action")
        for s, a in zip(si, ai):
            kg.relations[(int(s), int(a))] = NORMAL
    if abnormal_clips:
        si = _assign(abnormal_clips, S, "scene")
        ai = _assign(abnormal_clips, A, "action")
        for s, a in zip(si, ai):
            kg.relations.setdefault((int(s), int(a)), ABNORMAL)
    return kg


def build_graph(dataset, cfg):
    """Cluster, combine and construct in one call."""
    nm, am, sm = build_clusters(dataset, cfg)
    merged = combine_centers(nm.centers, am.centers, cfg.rho, nm.counts(), am.counts())
    return construct_graph(dataset.subset("normal"), dataset.subset("abnormal"), merged, sm)


def query_relations(kg, scene_feats, action_feats):
    """Vectorised :func:`query_relation` over rows of two feature matrices."""
    if not kg.scene_nodes or not kg.action_nodes:
        raise ContractViolation("query on an empty knowledge graph")
    si, _ = argmax_cosine(scene_feats, kg.scene_matrix())
    ai, _ = argmax_cosine(action_feats, kg.action_matrix())
    sids, aids = kg.scene_ids(), kg.action_ids()
    return [kg.relations.get((sids[s], aids[a]), UNKNOWN) for s, a in zip(si, ai)]


def query_relation(kg, scene_feat, action_feat):
    return query_relations(kg, np.asarray(scene_feat)[None, :], np.asarray(action_feat)[None, :])[0]


def query_clips(kg, clips):
    return query_relations(kg, scene_features(clips), action_features(clips))


# -- updating ----------------------------------------------------------------

def _absorb(nodes, x, mu, tag):
    """Add ``x`` as a node or fold it into its best match. Returns (decision, node_id)."""
    if nodes:
        C = np.stack([n.center for n in nodes])
        idx, sim = argmax_cosine(x[None, :], C)
        if sim[0] > mu:
            node = nodes[int(idx[0])]
            node.center = (node.center * node.count + x) / (node.count + 1)
            node.count += 1
            return "combine", node.node_id
    new_id = max((n.node_id for n in nodes), default=-1) + 1
    nodes.append(Node(new_id, x.copy(), 1, tag))
    return "add", new_id


def update_nodes(kg, scene_feats, action_feats, cfg):
    """Apply the add/combine rule to each new (scene, action) feature pair in order.

    Returns the updated copy and the decision log as
    ``[(side, decision, node_id), ...]`` (action before scene for each item).
    """
    out = kg.copy()
    log = []
    S = np.atleast_2d(np.asarray(scene_feats, dtype=np.float64))
    A = np.atleast_2d(np.asarray(action_feats, dtype=np.float64))
    if len(S) != len(A):
        raise ContractViolation("scene and action feature counts differ")
    if out.action_nodes and A.shape[1] != out.action_nodes[0].center.size:
        raise ContractViolation("action feature dimension mismatch")
    if out.scene_nodes and S.shape[1] != out.scene_nodes[0].center.size:
        raise ContractViolation("scene feature dimension mismatch")
    for s, a in zip(S, A):
        log.append(("action", *_absorb(out.action_nodes, a, cfg.mu_a, "new")))
        log.append(("scene", *_absorb(out.scene_nodes, s, cfg.mu_s, "new")))
    return out, log


def update_graph(kg, new_clips, cfg):
    """Grow or adjust the node sets with new clips; labels play no role here."""
    out, _ = update_nodes(kg, scene_features(new_clips), action_features(new_clips), cfg)
    return out


def build_subgraph(kg, clips):
    """Relations implied by labeled ``clips`` over ``kg``'s (already updated) nodes."""
    normal = [c for c in clips if c.video_label == "normal"]
    abnormal = [c for c in clips if c.video_label == "abnormal"]
    sub = KnowledgeGraph(scene_nodes=copy.deepcopy(kg.scene_nodes),
                         action_nodes=copy.deepcopy(kg.action_nodes))
    S, A = kg.scene_matrix(), kg.action_matrix()
    sids, aids = kg.scene_ids(), kg.action_ids()
    for group, label in ((normal, NORMAL), (abnormal, ABNORMAL)):
        if not group:
            continue
        si = _assign(group, S, "scene")
        ai = _assign(group, A, "action")
        for s, a in zip(si, ai):
            key = (sids[s], aids[a])
            if label == NORMAL:
                sub.relations[key] = NORMAL
            else:
                sub.relations.setdefault(key, ABNORMAL)
    return sub


def merge_subgraph(main, sub):
    """Adopt sub-graph edges that do not contradict the main graph.

    Each sub edge is mapped to the main node pair most cosine-similar to its
    endpoints. Absent there: inserted. Same label: kept. Different label:
    skipped. Existing main edges are never removed or relabeled.
    """
    out = main.copy()
    if not sub.relations:
        return out
    S, A = out.scene_matrix(), out.action_matrix()
    sids, aids = out.scene_ids(), out.action_ids()
    sub_s = {n.node_id: n.center for n in sub.scene_nodes}
    sub_a = {n.node_id: n.center for n in sub.action_nodes}
    for (s, a), label in sorted(sub.relations.items()):
        si, _ = argmax_cosine(sub_s[s][None, :], S)
        ai, _ = argmax_cosine(sub_a[a][None, :], A)
        key = (sids[int(si[0])], aids[int(ai[0])])
        if key not in out.relations:
            out.relations[key] = label
    return out


# -- serialization -----------------------------------------------------------

def dumps_graph(kg):
    lines = ["kg 1"]
    for side, nodes in (("scene", kg.scene_nodes), ("action", kg.action_nodes)):
        for n in sorted(nodes, key=lambda n: n.node_id):
            vals = " ".join(repr(float(v)) for v in n.center)
            lines.append(f"node {side} {n.node_id} {n.count} {n.tag or '-'} {n.center.size} {vals}")
    for (s, a), lab in sorted(kg.relations.items()):
        lines.append(f"edge {s} {a} {lab}")
    return "\n".join(lines) + "\n"


def loads_graph(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "kg 1":
        raise ValueError("not a knowledge-graph file (missing 'kg 1' header)")
    kg = KnowledgeGraph()
    for ln in lines[1:]:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "node":
            side, nid, count, tag, dim = parts[1], int(parts[2]), int(parts[3]), parts[4], int(parts[5])
            vals = np.array([float(v) for v in parts[6:]])
            if vals.size != dim:
                raise ValueError(f"node {side} {nid}: expected {dim} values, got {vals.size}")
            node = Node(nid, vals, count, "" if tag == "-" else tag)
            (kg.scene_nodes if side == "scene" else kg.action_nodes).append(node)
        elif parts[0] == "edge":
            kg.relations[(int(parts[1]), int(parts[2]))] = parts[3]
        else:
            raise ValueError(f"unknown record {parts[0]!r}")
    return kg.check()


def save_graph(kg, path):
    Path(path).write_text(dumps_graph(kg))


def load_graph(path):
    return loads_graph(Path(path).read_text())
