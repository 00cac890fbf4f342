"""Frame-level score assembly, ROC AUC and average precision."""

from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from ._jit import njit, use_jit
from .errors import ContractViolation


@njit
def _frame_max_jit(starts, ends, scores, video_len):
    out = np.zeros(video_len)
    for i in range(starts.size):
        s = scores[i]
        for f in range(starts[i], ends[i]):
            if s > out[f]:
                out[f] = s
    return out


def _frame_max_np(starts, ends, scores, video_len):
    out = np.zeros(video_len)
    for s, e, v in zip(starts, ends, scores):
        np.maximum(out[s:e], v, out=out[s:e])
    return out


def frame_scores(clip_scores, video_len):
    """Per-frame max over every (frame_span, score) covering the frame; 0 if uncovered.

    Spans are half-open ``[start, end)``.
    """
    if video_len < 0:
        raise ContractViolation("video_len must be non-negative")
    starts = np.array([int(sp[0]) for sp, _ in clip_scores], dtype=np.int64)
    ends = np.array([int(sp[1]) for sp, _ in clip_scores], dtype=np.int64)
    scores = np.array([float(s) for _, s in clip_scores], dtype=np.float64)
    bad = (starts < 0) | (ends > video_len) | (ends < starts)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ContractViolation(f"span ({starts[i]}, {ends[i]}) outside [0, {video_len})")
    if use_jit():
        return _frame_max_jit(starts, ends, scores, video_len)
    return _frame_max_np(starts, ends, scores, video_len)


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ContractViolation("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ContractViolation("labels must be binary")
    return s, y.astype(np.int64)


def roc_auc(scores, labels):
    """Area under the ROC curve via average ranks (Mann-Whitney U / n_pos n_neg)."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation("roc_auc needs both classes")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels):
    """Step-interpolated AP: sum over distinct thresholds of (R_n - R_{n-1}) * P_n."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ContractViolation("average_precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


# -- video-level assembly and dumps ------------------------------------------

def video_frame_scores(clips, scores):
    """Assemble per-video frame scores and frame labels.

    Returns ``{video_id: (frame_scores, frame_labels or None)}``. Video length
    is the largest span end among its clips.
    """
    groups = {}
    for c, s in zip(clips, scores):
        groups.setdefault(c.video_id, []).append((c, float(s)))
    out = {}
    for vid, items in groups.items():
        n = max(c.frame_span[1] for c, _ in items)
        fs = frame_scores([(c.frame_span, s) for c, s in items], n)
        if all(c.frame_labels is not None for c, _ in items):
            fl = np.zeros(n, dtype=np.int64)
            for c, _ in items:
                a, b = c.frame_span
                fl[a:b] = np.maximum(fl[a:b], c.frame_labels)
        else:
            fl = None
        out[vid] = (fs, fl)
    return out


def frame_level_metrics(clips, scores):
    per_video = video_frame_scores(clips, scores)
    if any(fl is None for _, fl in per_video.values()):
        raise ContractViolation("frame-level metrics need frame labels on every clip")
    s = np.concatenate([fs for fs, _ in per_video.values()])
    y = np.concatenate([fl for _, fl in per_video.values()])
    return {"auc": roc_auc(s, y), "ap": average_precision(s, y), "frames": int(s.size)}


def write_score_dumps(clips, scores, out_dir):
    """One ``<video_id>.tsv`` per video with columns frame_index, score, label."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for vid, (fs, fl) in sorted(video_frame_scores(clips, scores).items()):
        lines = ["frame_index\tscore\tlabel"]
        for i, v in enumerate(fs):
            lab = "" if fl is None else str(int(fl[i]))
            lines.append(f"{i}\t{float(v)!r}\t{lab}")
        p = out_dir / f"{vid}.tsv"
        p.write_text("\n".join(lines) + "\n")
        paths.append(p)
    return paths


def read_score_dump(path):
    scores, labels = [], []
    for ln in Path(path).read_text().splitlines()[1:]:
        if not ln.strip():
            continue
        parts = ln.split("\t")
        scores.append(float(parts[1]))
        labels.append(int(parts[2]) if len(parts) > 2 and parts[2] != "" else -1)
    return np.array(scores), np.array(labels)


def evaluate_dumps(paths):
    s_all, y_all = [], []
    for p in paths:
        s, y = read_score_dump(p)
        if np.any(y < 0):
            raise ContractViolation(f"{p}: dump has unlabeled frames")
        s_all.append(s)
        y_all.append(y)
    s = np.concatenate(s_all)
    y = np.concatenate(y_all)
    return {"auc": roc_auc(s, y), "ap": average_precision(s, y), "frames": int(s.size)}
