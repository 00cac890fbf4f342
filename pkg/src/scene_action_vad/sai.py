"""Scene-action integrator: a small numpy network with hand-written gradients.

    score = sigmoid(head(concat(E(scene), LSTM(GCN(skeleton)), PE(box))))

E is a two-layer ReLU perceptron on the precomputed scene vector. The GCN
applies two ReLU graph convolutions per frame over the normalised skeleton
adjacency and mean-pools joints; a single-layer LSTM reads the per-frame
embeddings and its last hidden state is kept. PE linearly embeds the
clip-mean box. The head is a ReLU hidden layer followed by a scalar logit.

For the unsupervised variant the head's hidden layer is the code of an
autoencoder whose decoder reconstructs the clip's input features
(scene vector, box-relative skeleton, mean box).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ContractViolation

# COCO-17 bones (0-indexed)
COCO_BONES = [
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12), (5, 6), (5, 7),
    (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
]
# left/right mirror of the COCO layout
COCO_FLIP = [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15]

CHECKPOINT_MAGIC = b"SAICKPT1\n"
# box-relative joints span roughly +-0.25; this brings them to unit scale
SKEL_GAIN = 4.0


def skeleton_adjacency(J=17, normalized=True):
    """0/1 adjacency with self loops; ``D^-1/2 (A + I) D^-1/2`` when normalized.

    J = 17 uses the COCO bone list, any other J a simple joint chain.
    """
    bones = COCO_BONES if J == 17 else [(i, i + 1) for i in range(J - 1)]
    A = np.eye(J)
    for i, j in bones:
        A[i, j] = A[j, i] = 1.0
    if not normalized:
        return A
    d = 1.0 / np.sqrt(A.sum(axis=1))
    return A * d[:, None] * d[None, :]


@dataclass(frozen=True)
class SaiDims:
    d_s: int = 16
    J: int = 17
    T: int = 24
    h: int = 64
    h_g: int = 32
    h_t: int = 64
    h_p: int = 16
    h_f: int = 32
    h_d: int = 64
    decoder: bool = False

    @property
    def concat(self):
        return self.h + self.h_t + self.h_p

    @property
    def recon(self):
        return self.d_s + self.T * self.J * 2 + 4


def param_shapes(dims):
    s = {
        "We1": (dims.d_s, dims.h), "be1": (dims.h,),
        "We2": (dims.h, dims.h), "be2": (dims.h,),
        "Wg1": (2, dims.h_g), "bg1": (dims.h_g,),
        "Wg2": (dims.h_g, dims.h_g), "bg2": (dims.h_g,),
        "Wx": (dims.h_g, 4 * dims.h_t), "Wh": (dims.h_t, 4 * dims.h_t), "bl": (4 * dims.h_t,),
        "Wp": (4, dims.h_p), "bp": (dims.h_p,),
        "Wf1": (dims.concat, dims.h_f), "bf1": (dims.h_f,),
        "Wf2": (dims.h_f, 1), "bf2": (1,),
    }
    if dims.decoder:
        s.update({
            "Wd1": (dims.h_f, dims.h_d), "bd1": (dims.h_d,),
            "Wd2": (dims.h_d, dims.recon), "bd2": (dims.recon,),
        })
    return s


@dataclass
class SaiParams:
    dims: SaiDims
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def names(self):
        return list(self.tensors)

    def copy(self):
        return SaiParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self):
        return SaiParams(self.dims, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def n_params(self):
        return sum(v.size for v in self.tensors.values())

    def weight_names(self):
        return [k for k in self.tensors if k.startswith("W")]

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def allclose(self, other, atol=0.0):
        return all(np.allclose(self[k], other[k], rtol=0.0, atol=atol) for k in self.tensors)


def init_params(dims, seed=0):
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(dims).items():
        if name.startswith("W"):
            fan_in, fan_out = shape[0], shape[1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            out[name] = rng.uniform(-lim, lim, size=shape)
        else:
            out[name] = np.zeros(shape)
    # forget-gate bias
    out["bl"][dims.h_t:2 * dims.h_t] = 1.0
    if "bf1" in out:
        out["bf1"][:] = 0.01
    return SaiParams(dims, out)


def zero_params(dims):
    return SaiParams(dims, {k: np.zeros(s) for k, s in param_shapes(dims).items()})


# -- inputs ------------------------------------------------------------------

@dataclass
class Inputs:
    scene: np.ndarray  # (B, d_s)
    skel: np.ndarray   # (B, T, J, 2) box-relative joints
    box: np.ndarray    # (B, 4) clip-mean box

    def __len__(self):
        return self.scene.shape[0]

    def take(self, idx):
        return Inputs(self.scene[idx], self.skel[idx], self.box[idx])

    def recon_target(self):
        B = len(self)
        return np.concatenate([self.scene, self.skel.reshape(B, -1), self.box], axis=1)


def make_inputs(clips):
    return Inputs(
        scene=np.stack([c.scene.vector for c in clips]).astype(np.float64),
        skel=SKEL_GAIN * np.stack([c.skeleton.normalized_joints() for c in clips]).astype(np.float64),
        box=np.stack([c.skeleton.mean_box() for c in clips]).astype(np.float64),
    )


def concat_inputs(parts):
    return Inputs(
        scene=np.concatenate([p.scene for p in parts]),
        skel=np.concatenate([p.skel for p in parts]),
        box=np.concatenate([p.box for p in parts]),
    )


def _check(params, X):
    d = params.dims
    if X.scene.shape[1] != d.d_s:
        raise ContractViolation(f"scene dim {X.scene.shape[1]} != {d.d_s}")
    if X.skel.shape[1:] != (d.T, d.J, 2):
        raise ContractViolation(f"skeleton shape {X.skel.shape[1:]} != {(d.T, d.J, 2)}")


def _sigmoid(x):
    return expit(x)


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def _graph_mul(A, H):
    """``A`` (J, J) applied along the joint axis of ``H`` (J, M, C)."""
    J, M, C = H.shape
    return (A @ H.reshape(J, M * C)).reshape(J, M, C)


# -- forward -----------------------------------------------------------------

def encode(params, X, adj=None):
    """Trunk forward: returns the concatenated feature (B, concat) and a cache."""
    _check(params, X)
    P = params
    d = params.dims
    A = skeleton_adjacency(d.J) if adj is None else adj
    c = {"X": X, "A": A}

    a1 = X.scene @ P["We1"] + P["be1"]
    e1 = np.maximum(a1, 0.0)
    a2 = e1 @ P["We2"] + P["be2"]
    e = np.maximum(a2, 0.0)
    c.update(a1=a1, e1=e1, a2=a2)

    # joints-first layout (J, B*T, C) turns each graph product into one gemm
    B, T, J = X.skel.shape[:3]
    xs = X.skel.transpose(2, 0, 1, 3).reshape(J, B * T, 2)
    AX = _graph_mul(A, xs)
    z1 = AX @ P["Wg1"] + P["bg1"]
    g1 = np.maximum(z1, 0.0)
    AH = _graph_mul(A, g1)
    z2 = AH @ P["Wg2"] + P["bg2"]
    g2 = np.maximum(z2, 0.0)
    seq = g2.mean(axis=0).reshape(B, T, -1)
    c.update(AX=AX, z1=z1, AH=AH, z2=z2, seq=seq)

    H = d.h_t
    h = np.zeros((B, H))
    cell = np.zeros((B, H))
    steps = []
    for t in range(T):
        z = seq[:, t] @ P["Wx"] + h @ P["Wh"] + P["bl"]
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c_prev, h_prev = cell, h
        cell = f * c_prev + i * g
        tc = np.tanh(cell)
        h = o * tc
        steps.append((i, f, g, o, c_prev, h_prev, tc))
    c["lstm"] = steps

    p = X.box @ P["Wp"] + P["bp"]
    feat = np.concatenate([e, h, p], axis=1)
    c["feat"] = feat
    return feat, c


def head(params, feat, cache):
    P = params
    u_pre = feat @ P["Wf1"] + P["bf1"]
    u = np.maximum(u_pre, 0.0)
    cache.update(u_pre=u_pre, u=u)
    return u


def forward_logits(params, X, adj=None):
    feat, cache = encode(params, X, adj)
    u = head(params, feat, cache)
    logits = (u @ params["Wf2"])[:, 0] + params["bf2"][0]
    return logits, cache


def score_batch(params, X, adj=None):
    logits, _ = forward_logits(params, X, adj)
    return _sigmoid(logits)


def score_clip(params, clip):
    return float(score_batch(params, make_inputs([clip]))[0])


# -- backward ----------------------------------------------------------------

def _backward_trunk(params, cache, dfeat, grads):
    P = params
    d = params.dims
    X = cache["X"]
    A = cache["A"]
    de = dfeat[:, :d.h]
    dh = dfeat[:, d.h:d.h + d.h_t].copy()
    dp = dfeat[:, d.h + d.h_t:]

    grads["Wp"] += X.box.T @ dp
    grads["bp"] += dp.sum(axis=0)

    da2 = de * (cache["a2"] > 0)
    grads["We2"] += cache["e1"].T @ da2
    grads["be2"] += da2.sum(axis=0)
    da1 = (da2 @ P["We2"].T) * (cache["a1"] > 0)
    grads["We1"] += X.scene.T @ da1
    grads["be1"] += da1.sum(axis=0)

    seq = cache["seq"]
    B, T, _ = seq.shape
    dseq = np.zeros_like(seq)
    dc = np.zeros((B, d.h_t))
    Wx, Wh = P["Wx"], P["Wh"]
    for t in range(T - 1, -1, -1):
        i, f, g, o, c_prev, h_prev, tc = cache["lstm"][t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            do * o * (1.0 - o),
        ], axis=1)
        grads["Wx"] += seq[:, t].T @ dz
        grads["Wh"] += h_prev.T @ dz
        grads["bl"] += dz.sum(axis=0)
        dseq[:, t] = dz @ Wx.T
        dh = dz @ Wh.T
        dc = dc * f

    J = A.shape[0]
    dpool = dseq.reshape(1, B * T, -1) / J
    dz2 = np.where(cache["z2"] > 0, dpool, 0.0)
    grads["Wg2"] += _flat(cache["AH"]).T @ _flat(dz2)
    grads["bg2"] += dz2.sum(axis=(0, 1))
    dAH = dz2 @ P["Wg2"].T
    dg1 = _graph_mul(A.T, dAH)
    dz1 = np.where(cache["z1"] > 0, dg1, 0.0)
    grads["Wg1"] += _flat(cache["AX"]).T @ _flat(dz1)
    grads["bg1"] += dz1.sum(axis=(0, 1))


def _backward_head(params, cache, du, grads):
    du_pre = du * (cache["u_pre"] > 0)
    grads["Wf1"] += cache["feat"].T @ du_pre
    grads["bf1"] += du_pre.sum(axis=0)
    return du_pre @ params["Wf1"].T


def backward_logits(params, cache, dlogits):
    """Gradient of ``sum(dlogits * logits)`` with respect to every parameter."""
    grads = params.zeros_like()
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(-1)
    u = cache["u"]
    grads["Wf2"] += u.T @ dlogits[:, None]
    grads["bf2"] += dlogits.sum(keepdims=True)
    du = dlogits[:, None] * params["Wf2"][:, 0][None, :]
    dfeat = _backward_head(params, cache, du, grads)
    _backward_trunk(params, cache, dfeat, grads)
    return grads


def backward(params, clip, upstream=1.0):
    """Gradient of ``upstream * score_clip(params, clip)``."""
    logits, cache = forward_logits(params, make_inputs([clip]))
    s = _sigmoid(logits)
    return backward_logits(params, cache, upstream * s * (1.0 - s))


# -- autoencoder -------------------------------------------------------------

def recon_blocks(dims):
    """Slices of the reconstruction target: scene, skeleton, box."""
    a = dims.d_s
    b = a + dims.T * dims.J * 2
    return [slice(0, a), slice(a, b), slice(b, b + 4)]


def reconstruct_batch(params, X, adj=None):
    """Per-clip reconstruction error and the cache needed for its gradient.

    The error is the mean over the three input blocks of each block's mean
    squared difference, so the 800-odd skeleton coordinates do not drown the
    scene vector.
    """
    if not params.dims.decoder:
        raise ContractViolation("parameters have no decoder")
    P = params
    feat, cache = encode(params, X, adj)
    u = head(params, feat, cache)
    r_pre = u @ P["Wd1"] + P["bd1"]
    r = np.maximum(r_pre, 0.0)
    xhat = r @ P["Wd2"] + P["bd2"]
    diff = xhat - X.recon_target()
    blocks = recon_blocks(params.dims)
    err = sum(np.mean(diff[:, b] ** 2, axis=1) for b in blocks) / len(blocks)
    cache.update(r_pre=r_pre, r=r, diff=diff)
    return err, cache


def reconstruct(params, clip):
    err, _ = reconstruct_batch(params, make_inputs([clip]))
    return float(err[0])


def backward_recon(params, cache, derr):
    """Gradient of ``sum(derr * err)`` for errors from :func:`reconstruct_batch`."""
    P = params
    grads = params.zeros_like()
    derr = np.asarray(derr, dtype=np.float64).reshape(-1)
    diff = cache["diff"]
    blocks = recon_blocks(params.dims)
    dxhat = np.zeros_like(diff)
    for b in blocks:
        width = b.stop - b.start
        dxhat[:, b] = (2.0 / (len(blocks) * width)) * diff[:, b] * derr[:, None]
    grads["Wd2"] += cache["r"].T @ dxhat
    grads["bd2"] += dxhat.sum(axis=0)
    dr_pre = (dxhat @ P["Wd2"].T) * (cache["r_pre"] > 0)
    grads["Wd1"] += cache["u"].T @ dr_pre
    grads["bd1"] += dr_pre.sum(axis=0)
    du = dr_pre @ P["Wd1"].T
    dfeat = _backward_head(params, cache, du, grads)
    _backward_trunk(params, cache, dfeat, grads)
    return grads


# -- checkpoints -------------------------------------------------------------

def dumps_params(params):
    """Binary checkpoint: magic line, one JSON header line, raw little-endian float64."""
    meta = {
        "dims": params.dims.__dict__,
        "tensors": [[k, list(v.shape)] for k, v in params.tensors.items()],
    }
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.tensors.values())
    return CHECKPOINT_MAGIC + json.dumps(meta, sort_keys=True).encode() + b"\n" + body


def loads_params(blob):
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a checkpoint file")
    rest = blob[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    meta = json.loads(rest[:nl])
    body = rest[nl + 1:]
    dims = SaiDims(**meta["dims"])
    tensors, off = {}, 0
    for name, shape in meta["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off * 8).reshape(shape).astype(np.float64)
        off += n
    if off * 8 != len(body):
        raise ValueError("checkpoint body size does not match its header")
    return SaiParams(dims, tensors)


def save_params(params, path):
    Path(path).write_bytes(dumps_params(params))


def load_params(path):
    return loads_params(Path(path).read_bytes())
