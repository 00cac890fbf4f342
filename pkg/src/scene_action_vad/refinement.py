"""Stage-2 uncertainty refinement: pool clips by score and graph relation, then retrain.

Clips of abnormal videos (plus optional scene/action recombinations) are
scored and routed into a normal, abnormal or pending pool. Resolved clips
stay where they land; pending ones are re-scored next iteration. Each
iteration fine-tunes the model on the MIL objective plus a BCE term whose
targets are the pool identities.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rkm, sai
from .data import cross_combine
from .errors import ContractViolation, DatasetError, DivergenceError
from .training import (
    BagConfig, LossWeights, Optimizer, TrainConfig, _batches, _write_log,
    bce_from_logits, clip_labels, make_bags, mil_terms, score_clips,
)

log = logging.getLogger(__name__)

POOL_COLUMNS = ("iteration", "n_normal", "n_abnormal", "n_pending",
                "mean_normal", "mean_abnormal", "mean_pending", "L_mil", "L_bce")


@dataclass
class UrConfig:
    beta1: float = 0.4
    beta2: float = 0.8
    iterations: int = 10
    # recombined candidates per abnormal video: its scene x this many actions
    cross_actions: int = 0
    bce_batch: int = 64
    fine_tune: bool = True

    def __post_init__(self):
        if not (0.0 <= self.beta1 < self.beta2 <= 1.0):
            raise ContractViolation(f"need 0 <= beta1 < beta2 <= 1, got {self.beta1}, {self.beta2}")
        if self.iterations < 0 or self.cross_actions < 0 or self.bce_batch < 1:
            raise ContractViolation("iterations, cross_actions and bce_batch must be non-negative")


@dataclass
class Pools:
    normal: set = field(default_factory=set)
    abnormal: set = field(default_factory=set)
    pending: set = field(default_factory=set)

    def check(self):
        if (self.normal & self.abnormal) or (self.normal & self.pending) or (self.abnormal & self.pending):
            raise ContractViolation("pools overlap")
        return self

    def sizes(self):
        return len(self.normal), len(self.abnormal), len(self.pending)

    def copy(self):
        return Pools(set(self.normal), set(self.abnormal), set(self.pending))


def route(score, relation, cfg):
    """Pool name for one (score, relation) pair; equalities go to pending."""
    if score < cfg.beta1 and relation == rkm.NORMAL:
        return "normal"
    if score > cfg.beta2 and relation == rkm.ABNORMAL:
        return "abnormal"
    return "pending"


def partition_pools(clips, scores, kg, cfg):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size != len(clips):
        raise ContractViolation(f"{scores.size} scores for {len(clips)} clips")
    pools = Pools()
    if not clips:
        return pools
    for c, s, rel in zip(clips, scores, rkm.query_clips(kg, clips)):
        getattr(pools, route(s, rel, cfg)).add(c.clip_id)
    return pools.check()


def candidate_clips(dataset, cfg, seed=0):
    """Abnormal-video clips plus, if configured, recombined scene/action clips.

    Each abnormal video contributes its first clip's scene paired with
    ``cfg.cross_actions`` actions drawn from the whole dataset.
    """
    abnormal = dataset.subset("abnormal")
    if cfg.cross_actions == 0:
        return list(abnormal)
    rng = np.random.default_rng(seed)
    pool = [c.skeleton for c in dataset.clips]
    extra = []
    for vid, group in dataset.videos().items():
        if group[0].video_label != "abnormal":
            continue
        picks = rng.choice(len(pool), size=min(cfg.cross_actions, len(pool)), replace=False)
        extra.extend(cross_combine([group[0].scene], [pool[i] for i in sorted(picks)],
                                   prefix=f"{vid}_ur"))
    return list(abnormal) + extra


def _mean(scores, ids):
    v = [scores[i] for i in ids if i in scores]
    return float(np.mean(v)) if v else float("nan")


@dataclass
class RefineResult:
    params: sai.SaiParams
    pools: Pools
    log: list
    mil_weights: LossWeights = None
    total_weights: LossWeights = None
    checkpoints: list = field(default_factory=list)


def _step_grads(params, X, y, abn_bags, norm_bags, K, bce_ids, bce_y, w_mil, w_tot):
    na, nn_ = abn_bags.size, norm_bags.size
    ids = np.concatenate([abn_bags.reshape(-1), norm_bags.reshape(-1), bce_ids])
    logits, cache = sai.forward_logits(params, X.take(ids))
    za = logits[:na].reshape(abn_bags.shape)
    zn = logits[na:na + nn_].reshape(norm_bags.shape)
    l_rank, l_focal, d_rank, d_focal = mil_terms(za, zn, y[abn_bags], y[norm_bags], K)
    a1, a2 = w_mil.values()
    l_mil = a1 * l_rank + a2 * l_focal
    _, g_mil = w_mil.objective([l_rank, l_focal])
    dz_mil = np.concatenate([
        (a1 * d_rank[0] + a2 * d_focal[0]).reshape(-1),
        (a1 * d_rank[1] + a2 * d_focal[1]).reshape(-1),
    ])
    if bce_ids.size:
        b, db = bce_from_logits(logits[na + nn_:], bce_y)
        l_bce = float(b.mean())
        db = db / bce_ids.size
    else:
        l_bce, db = 0.0, np.zeros(0)
    terms = [l_mil, l_bce]
    _, g_tot = w_tot.objective(terms)
    lam1, lam2 = w_tot.values()
    if not bce_ids.size:
        # MIL-only: the BCE weight has nothing to balance
        g_tot[1] = 0.0
        lam2 = 0.0
    dz = np.concatenate([lam1 * dz_mil, lam2 * db])
    grads = sai.backward_logits(params, cache, dz)
    if w_mil.learnable:
        # alpha enters the total objective scaled by lambda1; the -log alpha term is not
        g_mil = lam1 * (g_mil + 1.0) - 1.0
    comps = {"L_rank": l_rank, "L_focal": l_focal, "L_mil": l_mil, "L_bce": l_bce,
             "L_total": lam1 * l_mil + lam2 * l_bce}
    return comps, grads, g_mil, g_tot


def stage2_iterate(params, kg, dataset, ur=None, tc=None, bag_cfg=None, mode="weak",
                   out_dir=None, mil_weights=None, total_weights=None):
    """Run ``ur.iterations`` rounds of score -> partition -> retrain.

    Returns a :class:`RefineResult`; with zero iterations the input
    parameters come back unchanged.
    """
    ur = ur or UrConfig()
    tc = tc or TrainConfig()
    bag_cfg = bag_cfg or BagConfig()
    if mode not in ("full", "weak"):
        raise ContractViolation(f"refinement mode must be 'full' or 'weak', got {mode!r}")
    candidates = candidate_clips(dataset, ur, seed=tc.seed)
    all_clips = list(dataset.clips) + [c for c in candidates if c.video_label == "unlabeled"]
    index = {c.clip_id: i for i, c in enumerate(all_clips)}
    pools = Pools(normal={c.clip_id for c in dataset.subset("normal")},
                  pending={c.clip_id for c in candidates}).check()
    w_mil = mil_weights.copy() if mil_weights is not None else LossWeights.mil()
    w_tot = total_weights.copy() if total_weights is not None else LossWeights.total()
    start = params.copy()
    if ur.iterations == 0:
        return RefineResult(start, pools, [], w_mil, w_tot)
    if not ur.fine_tune:
        params = sai.init_params(params.dims, tc.seed)
    else:
        params = start

    norm_bags, abn_bags = make_bags(dataset, bag_cfg)
    if len(norm_bags) == 0 or len(abn_bags) == 0:
        raise DatasetError("refinement needs both normal and abnormal videos")
    X = sai.make_inputs(all_clips)
    y = np.concatenate([clip_labels(dataset, mode), np.zeros(len(all_clips) - len(dataset.clips))])
    rng = np.random.default_rng(tc.seed)
    opt = Optimizer(tc)
    rows, ckpts = [], []
    for it in range(ur.iterations):
        pend = [all_clips[index[i]] for i in sorted(pools.pending, key=index.get)]
        scores = dict(zip((c.clip_id for c in pend), score_clips(params, pend))) if pend else {}
        fresh = partition_pools(pend, [scores[c.clip_id] for c in pend], kg, ur)
        pools = Pools(pools.normal | fresh.normal, pools.abnormal | fresh.abnormal, fresh.pending).check()
        if not pools.abnormal:
            warnings.warn(f"iteration {it}: abnormal pool is empty; training on the MIL loss only",
                          RuntimeWarning, stacklevel=2)
        pooled = sorted(pools.normal | pools.abnormal, key=index.get)
        scored = dict(zip(pooled, score_clips(params, [all_clips[index[i]] for i in pooled])))
        scored.update(scores)
        n_ids = np.array([index[i] for i in sorted(pools.normal, key=index.get)], dtype=np.int64)
        a_ids = np.array([index[i] for i in sorted(pools.abnormal, key=index.get)], dtype=np.int64)
        acc = {"L_mil": 0.0, "L_bce": 0.0, "L_total": 0.0}
        for epoch in range(tc.epochs):
            na = _batches(len(abn_bags), tc.batch_size, rng)
            nb = _batches(len(norm_bags), tc.batch_size, rng)
            steps = max(len(na), len(nb))
            for s in range(steps):
                if a_ids.size:
                    k = min(ur.bce_batch, a_ids.size, n_ids.size)
                    pa = rng.choice(a_ids, size=k, replace=False)
                    pn = rng.choice(n_ids, size=k, replace=False)
                    bce_ids = np.concatenate([pa, pn])
                    bce_y = np.r_[np.ones(k), np.zeros(k)]
                else:
                    bce_ids, bce_y = np.zeros(0, dtype=np.int64), np.zeros(0)
                comps, grads, g_mil, g_tot = _step_grads(
                    params, X, y, abn_bags[na[s % len(na)]], norm_bags[nb[s % len(nb)]],
                    bag_cfg.K, bce_ids, bce_y, w_mil, w_tot)
                if not all(math.isfinite(v) for v in comps.values()) or not grads.is_finite():
                    raise DivergenceError(f"non-finite loss in refinement iteration {it}",
                                          last_good=params)
                params = opt.step(params, grads, [w_mil, w_tot], [g_mil, g_tot], epoch)
                if epoch == tc.epochs - 1:
                    for key in acc:
                        acc[key] += comps[key] / steps
        rows.append({
            "iteration": it, "n_normal": len(pools.normal), "n_abnormal": len(pools.abnormal),
            "n_pending": len(pools.pending),
            "mean_normal": _mean(scored, pools.normal), "mean_abnormal": _mean(scored, pools.abnormal),
            "mean_pending": _mean(scored, pools.pending), **acc,
        })
        log.debug("iteration %d pools %s", it, pools.sizes())
        if out_dir is not None:
            p = Path(out_dir) / f"refine_iter{it + 1:03d}.ckpt"
            sai.save_params(params, p)
            ckpts.append(p)
    if out_dir is not None:
        _write_log(rows, Path(out_dir) / "pool_report.tsv", POOL_COLUMNS)
    return RefineResult(params, pools, rows, w_mil, w_tot, ckpts)
