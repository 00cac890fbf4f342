"""Stage-1 MIL training, the loss stack, Adam, and the autoencoder loop."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import sai
from .data import cross_combine
from .errors import ContractViolation, DatasetError, DivergenceError

log = logging.getLogger(__name__)

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
RAW_WEIGHT_CLAMP = 5.0


@dataclass
class BagConfig:
    N: int = 8
    K: int = 3
    clip_len: int = 24

    def __post_init__(self):
        if not 1 <= self.K <= self.N:
            raise ContractViolation(f"need 1 <= K <= N, got K={self.K}, N={self.N}")
        if self.clip_len < 1:
            raise ContractViolation("clip_len must be >= 1")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    decay: float = 0.1
    decay_every: int = 10
    epochs: int = 120
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.decay_every < 1:
            raise ContractViolation("training hyperparameters must be positive")

    def lr_at(self, epoch):
        return self.lr * self.decay ** (epoch // self.decay_every)


class LossWeights:
    """Positive loss weights ``w = exp(r)`` over unconstrained reals ``r``.

    Learnable weights are trained together with the network; the objective
    adds ``-sum(r)`` (i.e. ``-log w``) so the weights cannot shrink to zero.
    Fixed weights may be zero.
    """

    def __init__(self, names, values=None, learnable=True):
        self.names = tuple(names)
        self.learnable = learnable
        vals = np.ones(len(self.names)) if values is None else np.asarray(values, dtype=np.float64)
        if learnable:
            if np.any(vals <= 0):
                raise ContractViolation("learnable loss weights must start positive")
            self.raw = np.log(vals)
        else:
            if np.any(vals < 0):
                raise ContractViolation("loss weights must be non-negative")
            self.raw = vals.copy()

    @classmethod
    def mil(cls, **kw):
        return cls(("alpha1", "alpha2"), **kw)

    @classmethod
    def total(cls, **kw):
        return cls(("lambda1", "lambda2"), **kw)

    def values(self):
        return np.exp(self.raw) if self.learnable else self.raw.copy()

    def __getitem__(self, name):
        return float(self.values()[self.names.index(name)])

    def objective(self, terms):
        """Weighted sum of ``terms`` plus the anti-collapse penalty, and d/draw."""
        terms = np.asarray(terms, dtype=np.float64)
        w = self.values()
        value = float(w @ terms)
        if not self.learnable:
            return value, np.zeros_like(self.raw)
        return value - float(self.raw.sum()), w * terms - 1.0

    def apply_update(self, raw):
        if self.learnable:
            self.raw = np.clip(raw, -RAW_WEIGHT_CLAMP, RAW_WEIGHT_CLAMP)

    def copy(self):
        out = LossWeights(self.names, np.ones(len(self.names)), self.learnable)
        out.raw = self.raw.copy()
        return out


# -- bags and aggregation ----------------------------------------------------

def _mirror_pad(idx, N):
    out = list(idx)
    seq = list(reversed(idx)) + list(idx)
    k = 0
    while len(out) < N:
        out.append(seq[k % len(seq)])
        k += 1
    return out


def make_bags(dataset, cfg, index=None):
    """Split every labeled video into bags of ``cfg.N`` clips.

    Bags hold positions into ``dataset.clips``. A trailing partial bag is
    filled by mirroring its clips (last clip first). Returns
    ``(normal_bags, abnormal_bags)`` as integer arrays of shape (n_bags, N).
    """
    pos = {c.clip_id: i for i, c in enumerate(dataset.clips)} if index is None else index
    normal, abnormal = [], []
    for vid, clips in dataset.videos().items():
        label = clips[0].video_label
        if label not in ("normal", "abnormal"):
            raise DatasetError(f"video {vid!r} is {label}; bags need labeled videos")
        ids = [pos[c.clip_id] for c in clips]
        for lo in range(0, len(ids), cfg.N):
            bag = _mirror_pad(ids[lo:lo + cfg.N], cfg.N)
            (normal if label == "normal" else abnormal).append(bag)
    as_arr = lambda b: np.asarray(b, dtype=np.int64).reshape(-1, cfg.N)
    return as_arr(normal), as_arr(abnormal)


def topk_mask(scores, K):
    """Boolean mask of the K largest entries along the last axis (stable ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    if K < 1 or K > scores.shape[-1]:
        raise ContractViolation(f"K={K} outside [1, {scores.shape[-1]}]")
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :K]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk_aggregate(scores, K):
    """Mean of the K largest scores (per row for 2-d input)."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = topk_mask(scores, K)
    out = np.where(mask, scores, 0.0).sum(axis=-1) / K
    return float(out) if out.ndim == 0 else out


# -- losses ------------------------------------------------------------------

def rank_loss(abn_bag_score, norm_bag_score):
    return np.maximum(0.0, 1.0 - np.asarray(abn_bag_score) + np.asarray(norm_bag_score))


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def focal_from_logits(z, y, gamma=FOCAL_GAMMA, alpha=FOCAL_ALPHA):
    """Per-element focal loss and its derivative w.r.t. the logit."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = sai._sigmoid(z)
    logp = _log_sigmoid(z)
    log1p = _log_sigmoid(-z)
    pos = alpha * (1.0 - p) ** gamma * -logp
    neg = (1.0 - alpha) * p ** gamma * -log1p
    loss = y * pos + (1.0 - y) * neg
    dpos = alpha * (1.0 - p) ** gamma * (gamma * p * logp - (1.0 - p))
    dneg = (1.0 - alpha) * p ** gamma * (p - gamma * (1.0 - p) * log1p)
    return loss, y * dpos + (1.0 - y) * dneg


def focal_loss(p, y, gamma=FOCAL_GAMMA, alpha=FOCAL_ALPHA):
    """Mean focal loss on probabilities (endpoints allowed)."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pt = np.where(y == 1, p, 1.0 - p)
    at = np.where(y == 1, alpha, 1.0 - alpha)
    with np.errstate(divide="ignore"):
        nll = np.where(pt > 0, -np.log(np.where(pt > 0, pt, 1.0)), np.inf)
    mod = (1.0 - pt) ** gamma
    terms = np.where(mod == 0, 0.0, at * mod * nll)
    return float(np.mean(terms))


def mil_loss(abn_bag_score, norm_bag_score, clip_scores, labels, w=None):
    """alpha1 * hinge rank loss on bag scores + alpha2 * focal loss on clip scores."""
    w = LossWeights.mil() if w is None else w
    l_rank = float(np.mean(rank_loss(abn_bag_score, norm_bag_score)))
    l_focal = focal_loss(clip_scores, labels)
    return w["alpha1"] * l_rank + w["alpha2"] * l_focal


def bce_from_logits(z, y):
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * _log_sigmoid(z) + (1.0 - y) * _log_sigmoid(-z))
    return loss, sai._sigmoid(z) - y


def mil_terms(za, zn, ya, yn, K):
    """MIL loss pieces for abnormal bags ``za`` (Ba, N) and normal bags ``zn`` (Bn, N).

    Abnormal bag i is ranked against normal bag ``i % Bn``. Returns
    ``(l_rank, l_focal, (dza_rank, dzn_rank), (dza_focal, dzn_focal))``.
    """
    pa, pn = sai._sigmoid(za), sai._sigmoid(zn)
    ma, mn = topk_mask(pa, K), topk_mask(pn, K)
    sa = np.where(ma, pa, 0.0).sum(axis=1) / K
    sn = np.where(mn, pn, 0.0).sum(axis=1) / K
    Ba, Bn = za.shape[0], zn.shape[0]
    partner = np.arange(Ba) % Bn
    hinge = 1.0 - sa + sn[partner]
    active = (hinge > 0).astype(np.float64)
    l_rank = float(np.mean(np.maximum(hinge, 0.0)))
    dsa = -active / Ba
    dsn = np.zeros(Bn)
    np.add.at(dsn, partner, active / Ba)
    dza_rank = ma * (dsa[:, None] / K) * pa * (1.0 - pa)
    dzn_rank = mn * (dsn[:, None] / K) * pn * (1.0 - pn)
    fa, dfa = focal_from_logits(za, ya)
    fn, dfn = focal_from_logits(zn, yn)
    n = fa.size + fn.size
    l_focal = float((fa.sum() + fn.sum()) / n)
    return l_rank, l_focal, (dza_rank, dzn_rank), (dfa / n, dfn / n)


# -- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, cfg, epoch=0):
    """One bias-corrected Adam update over a dict of arrays. Returns (params, state)."""
    lr = cfg.lr_at(epoch)
    t = state.t + 1
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ContractViolation(f"gradient shape {g.shape} != param shape {p.shape} for {k}")
        mk = cfg.beta1 * state.m.get(k, np.zeros_like(p)) + (1.0 - cfg.beta1) * g
        vk = cfg.beta2 * state.v.get(k, np.zeros_like(p)) + (1.0 - cfg.beta2) * g * g
        mhat = mk / (1.0 - cfg.beta1 ** t)
        vhat = vk / (1.0 - cfg.beta2 ** t)
        new_params[k] = p - lr * mhat / (np.sqrt(vhat) + cfg.eps)
        m[k], v[k] = mk, vk
    return new_params, AdamState(m=m, v=v, t=t)


class Optimizer:
    """Adam over network parameters plus any loss-weight vectors."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.state = AdamState()

    def step(self, params, grads, weights, wgrads, epoch):
        flat = dict(params.tensors)
        g = dict(grads.tensors)
        for i, (w, wg) in enumerate(zip(weights, wgrads)):
            if w.learnable:
                flat[f"__w{i}"] = w.raw
                g[f"__w{i}"] = wg
        new, self.state = adam_step(flat, g, self.state, self.cfg, epoch)
        out = sai.SaiParams(params.dims, {k: new[k] for k in params.tensors})
        for i, w in enumerate(weights):
            if w.learnable:
                w.apply_update(new[f"__w{i}"])
        return out


# -- Stage 1 -----------------------------------------------------------------

@dataclass
class TrainResult:
    params: sai.SaiParams
    log: list
    weights: Optional[LossWeights] = None
    checkpoints: list = field(default_factory=list)


def clip_labels(dataset, mode):
    if mode == "full":
        return np.array([c.clip_label() for c in dataset.clips], dtype=np.float64)
    return np.array([float(c.video_label == "abnormal") for c in dataset.clips])


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _write_log(rows, path, columns):
    lines = ["\t".join(columns)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.10g}" if isinstance(r[c], float) else str(r[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


STAGE1_COLUMNS = ("epoch", "L_rank", "L_focal", "L_mil", "lr")


def mil_gradient(params, X, y, abn_bags, norm_bags, K, w):
    """Forward/backward of the weighted MIL objective for one batch of bags.

    Returns ``(components, param_grads, weight_grad)``.
    """
    ids = np.concatenate([abn_bags.reshape(-1), norm_bags.reshape(-1)])
    logits, cache = sai.forward_logits(params, X.take(ids))
    na = abn_bags.size
    za = logits[:na].reshape(abn_bags.shape)
    zn = logits[na:].reshape(norm_bags.shape)
    l_rank, l_focal, d_rank, d_focal = mil_terms(za, zn, y[abn_bags], y[norm_bags], K)
    obj, wgrad = w.objective([l_rank, l_focal])
    a1, a2 = w.values()
    dz = np.concatenate([
        (a1 * d_rank[0] + a2 * d_focal[0]).reshape(-1),
        (a1 * d_rank[1] + a2 * d_focal[1]).reshape(-1),
    ])
    grads = sai.backward_logits(params, cache, dz)
    comps = {"L_rank": l_rank, "L_focal": l_focal, "L_mil": a1 * l_rank + a2 * l_focal, "objective": obj}
    return comps, grads, wgrad


def train_stage1(dataset, params, kg=None, bag_cfg=None, train_cfg=None, mode="weak",
                 weights=None, out_dir=None):
    """Adam on the MIL loss over paired (abnormal, normal) bag batches.

    ``kg`` is accepted for pipeline symmetry; Stage 1 does not consult it.
    ``batch_size`` counts bags per class per step.
    """
    bag_cfg = bag_cfg or BagConfig()
    train_cfg = train_cfg or TrainConfig()
    if mode not in ("full", "weak"):
        raise ContractViolation(f"stage-1 mode must be 'full' or 'weak', got {mode!r}")
    w = weights.copy() if weights is not None else LossWeights.mil()
    norm_bags, abn_bags = make_bags(dataset, bag_cfg)
    if len(norm_bags) == 0 or len(abn_bags) == 0:
        raise DatasetError("stage-1 training needs both normal and abnormal videos")
    X = sai.make_inputs(dataset.clips)
    y = clip_labels(dataset, mode)
    rng = np.random.default_rng(train_cfg.seed)
    opt = Optimizer(train_cfg)
    params = params.copy()
    rows, ckpts = [], []
    for epoch in range(train_cfg.epochs):
        na = _batches(len(abn_bags), train_cfg.batch_size, rng)
        nn_ = _batches(len(norm_bags), train_cfg.batch_size, rng)
        steps = max(len(na), len(nn_))
        acc = {"L_rank": 0.0, "L_focal": 0.0, "L_mil": 0.0}
        for s in range(steps):
            comps, grads, wgrad = mil_gradient(
                params, X, y, abn_bags[na[s % len(na)]], norm_bags[nn_[s % len(nn_)]], bag_cfg.K, w)
            if not all(math.isfinite(v) for v in comps.values()) or not all(
                    np.all(np.isfinite(g)) for g in grads.tensors.values()):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", last_good=params)
            params = opt.step(params, grads, [w], [wgrad], epoch)
            for k in acc:
                acc[k] += comps[k] / steps
        rows.append({"epoch": epoch, **acc, "lr": train_cfg.lr_at(epoch)})
        log.debug("epoch %d L_mil %.5f", epoch, acc["L_mil"])
        if out_dir is not None and (epoch + 1) % train_cfg.checkpoint_every == 0:
            p = Path(out_dir) / f"stage1_epoch{epoch + 1:04d}.ckpt"
            sai.save_params(params, p)
            ckpts.append(p)
    if out_dir is not None:
        _write_log(rows, Path(out_dir) / "stage1_loss.tsv", STAGE1_COLUMNS)
    return TrainResult(params=params, log=rows, weights=w, checkpoints=ckpts)


# -- unsupervised ------------------------------------------------------------

UNSUP_COLUMNS = ("epoch", "L_rec", "L_reg", "L_total", "lr")
# L_reg is a raw sum of squares the network can drive to zero on its own, so a
# learnable weight on it collapses every layer; the default pair is fixed
UNSUP_WEIGHTS = (1.0, 1e-4)


def unsup_weights():
    return LossWeights.total(values=UNSUP_WEIGHTS, learnable=False)


def augment_by_video(clips):
    """Recombine every scene with every action inside each video."""
    groups = {}
    for c in clips:
        groups.setdefault(c.video_id, []).append(c)
    out = []
    for vid, group in groups.items():
        out.extend(cross_combine([c.scene for c in group], [c.skeleton for c in group],
                                 prefix=f"{vid}_aug"))
    return out


def l2_penalty(params):
    return float(sum(np.sum(params[k] ** 2) for k in params.weight_names()))


def train_unsupervised(dataset, params, train_cfg=None, weights=None, augment=True, out_dir=None):
    """Minimise lambda1 * reconstruction error + lambda2 * sum of squared weights.

    ``weights`` defaults to the fixed :data:`UNSUP_WEIGHTS`; pass a learnable
    :class:`LossWeights` to train them as well.
    """
    train_cfg = train_cfg or TrainConfig()
    if not params.dims.decoder:
        raise ContractViolation("unsupervised training needs parameters with a decoder")
    bad = [c.clip_id for c in dataset.clips if c.video_label == "abnormal"]
    if bad:
        raise DatasetError(f"clip {bad[0]!r}: abnormal clip in unsupervised training data")
    w = weights.copy() if weights is not None else unsup_weights()
    clips = list(dataset.clips)
    if augment:
        clips = clips + augment_by_video(dataset.clips)
    X = sai.make_inputs(clips)
    rng = np.random.default_rng(train_cfg.seed)
    opt = Optimizer(train_cfg)
    params = params.copy()
    rows, ckpts = [], []
    for epoch in range(train_cfg.epochs):
        batches = _batches(len(X), train_cfg.batch_size, rng)
        acc = {"L_rec": 0.0, "L_reg": 0.0, "L_total": 0.0}
        for b in batches:
            err, cache = sai.reconstruct_batch(params, X.take(b))
            l_rec = float(err.mean())
            l_reg = l2_penalty(params)
            obj, wgrad = w.objective([l_rec, l_reg])
            lam1, lam2 = w.values()
            grads = sai.backward_recon(params, cache, np.full(len(b), lam1 / len(b)))
            for k in params.weight_names():
                grads[k] += 2.0 * lam2 * params[k]
            if not (math.isfinite(obj) and all(np.all(np.isfinite(g)) for g in grads.tensors.values())):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", last_good=params)
            params = opt.step(params, grads, [w], [wgrad], epoch)
            acc["L_rec"] += l_rec / len(batches)
            acc["L_reg"] += l_reg / len(batches)
            acc["L_total"] += (lam1 * l_rec + lam2 * l_reg) / len(batches)
        rows.append({"epoch": epoch, **acc, "lr": train_cfg.lr_at(epoch)})
        if out_dir is not None and (epoch + 1) % train_cfg.checkpoint_every == 0:
            p = Path(out_dir) / f"unsup_epoch{epoch + 1:04d}.ckpt"
            sai.save_params(params, p)
            ckpts.append(p)
    if out_dir is not None:
        _write_log(rows, Path(out_dir) / "unsup_loss.tsv", UNSUP_COLUMNS)
    return TrainResult(params=params, log=rows, weights=w, checkpoints=ckpts)


def recon_errors(params, clips, batch=512):
    X = sai.make_inputs(clips)
    out = [sai.reconstruct_batch(params, X.take(np.arange(i, min(i + batch, len(X)))))[0]
           for i in range(0, len(X), batch)]
    return np.concatenate(out)


def minmax_by_video(clips, values):
    """Per-video min-max normalisation; constant videos map to 0."""
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros_like(values)
    groups = {}
    for i, c in enumerate(clips):
        groups.setdefault(c.video_id, []).append(i)
    for idx in groups.values():
        v = values[idx]
        span = v.max() - v.min()
        out[idx] = (v - v.min()) / span if span > 0 else 0.0
    return out


def score_clips(params, clips, batch=512):
    X = sai.make_inputs(clips)
    out = [sai.score_batch(params, X.take(np.arange(i, min(i + batch, len(X)))))
           for i in range(0, len(X), batch)]
    return np.concatenate(out)
