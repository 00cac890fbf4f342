import dataclasses

import numpy as np
import pytest
from scipy.special import expit

from scene_action_vad import sai
from scene_action_vad.errors import ContractViolation
from scene_action_vad.kernels import finite_diff_gradient

SMALL = sai.SaiDims(d_s=6, T=4, h=5, h_g=4, h_t=5, h_p=3, h_f=6, h_d=7, decoder=True)


def random_inputs(rng, dims, B=3):
    return sai.Inputs(rng.normal(size=(B, dims.d_s)),
                      rng.normal(0, 0.3, size=(B, dims.T, dims.J, 2)),
                      rng.uniform(0.2, 0.8, (B, 4)))


def jittered(dims, seed, rng):
    P = sai.init_params(dims, seed)
    for k in P.names():
        P[k] = P[k] + rng.normal(0, 0.1, P[k].shape)
    return P


def straight_line_score(P, scene, skel, box):
    """Per-clip loop re-implementation used as an independent forward oracle."""
    relu = lambda x: np.maximum(x, 0)
    A = sai.skeleton_adjacency(skel.shape[1])
    e = relu(relu(scene @ P["We1"] + P["be1"]) @ P["We2"] + P["be2"])
    H = P["Wh"].shape[0]
    h, c = np.zeros(H), np.zeros(H)
    for t in range(skel.shape[0]):
        g1 = relu(A @ skel[t] @ P["Wg1"] + P["bg1"])
        g2 = relu(A @ g1 @ P["Wg2"] + P["bg2"])
        x = g2.mean(axis=0)
        z = x @ P["Wx"] + h @ P["Wh"] + P["bl"]
        i, f, g, o = expit(z[:H]), expit(z[H:2 * H]), np.tanh(z[2 * H:3 * H]), expit(z[3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
    p = box @ P["Wp"] + P["bp"]
    u = relu(np.concatenate([e, h, p]) @ P["Wf1"] + P["bf1"])
    return float(expit(u @ P["Wf2"][:, 0] + P["bf2"][0]))


def test_zero_network_scores_half(small_ds):
    P = sai.zero_params(sai.SaiDims())
    assert sai.score_clip(P, small_ds.clips[0]) == 0.5


def test_score_deterministic(small_ds):
    a = sai.score_clip(sai.init_params(sai.SaiDims(), 3), small_ds.clips[4])
    b = sai.score_clip(sai.init_params(sai.SaiDims(), 3), small_ds.clips[4])
    assert a == b and 0.0 < a < 1.0


def test_forward_matches_straight_line(rng):
    dims = dataclasses.replace(SMALL, decoder=False)
    for seed in range(3):
        P = jittered(dims, seed, rng)
        X = random_inputs(rng, dims, 4)
        got = sai.score_batch(P, X)
        for b in range(4):
            assert got[b] == pytest.approx(straight_line_score(P, X.scene[b], X.skel[b], X.box[b]), abs=1e-12)


def _rel(a, n):
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_vs_finite_differences(seed, rng):
    P = jittered(SMALL, seed, rng)
    X = random_inputs(rng, SMALL)
    w = rng.normal(size=3)
    _, c = sai.forward_logits(P, X)
    g = sai.backward_logits(P, c, w)
    _, c2 = sai.reconstruct_batch(P, X)
    g2 = sai.backward_recon(P, c2, w)
    for k in P.names():
        def f(v, k=k):
            Q = P.copy()
            Q[k] = v
            return float(w @ sai.forward_logits(Q, X)[0])

        def f2(v, k=k):
            Q = P.copy()
            Q[k] = v
            return float(w @ sai.reconstruct_batch(Q, X)[0])
        if not k.startswith(("Wd", "bd")):
            assert _rel(g[k], finite_diff_gradient(f, P[k])) < 1e-6, k
        assert _rel(g2[k], finite_diff_gradient(f2, P[k])) < 1e-6, k


def test_backward_single_clip(small_ds, rng):
    dims = sai.SaiDims(h=8, h_g=4, h_t=6, h_p=3, h_f=5)
    P = jittered(dims, 0, rng)
    clip = small_ds.clips[0]
    g = sai.backward(P, clip)
    for k in ("bf2", "Wp", "bg1"):
        def f(v, k=k):
            Q = P.copy()
            Q[k] = v
            return sai.score_clip(Q, clip)
        assert _rel(g[k], finite_diff_gradient(f, P[k])) < 1e-6
    zero = sai.backward(P, clip, upstream=0.0)
    assert all(not np.any(zero[k]) for k in zero.names())
    # the logit bias sees exactly sigmoid'
    assert abs(float(g["bf2"][0])) <= 0.25


def test_flip_equivariance(rng):
    dims = sai.SaiDims(h=6, h_g=5, h_t=4, h_p=3, h_f=4, T=5)
    P = jittered(dims, 1, rng)
    X = random_inputs(rng, dims, 2)
    flip = np.array(sai.COCO_FLIP)
    A = sai.skeleton_adjacency(17)
    assert np.allclose(A[flip][:, flip], A)
    Xf = sai.Inputs(X.scene, X.skel[:, :, flip], X.box)
    f1, _ = sai.encode(P, X)
    f2, _ = sai.encode(P, Xf, adj=A[flip][:, flip])
    assert np.allclose(f1, f2, atol=1e-12)


def test_adjacency():
    A = sai.skeleton_adjacency(17, normalized=False)
    assert np.array_equal(A, A.T) and np.all(np.diag(A) == 1)
    N = sai.skeleton_adjacency(17)
    assert np.allclose(N, N.T) and np.all(N.sum(1) > 0)
    assert sai.skeleton_adjacency(5).shape == (5, 5)


def test_zeroed_scene_encoder_removes_scene_dependence(rng):
    dims = sai.SaiDims(h=6, h_g=5, h_t=4, h_p=3, h_f=4, T=5)
    P = jittered(dims, 2, rng)
    P["We2"][:] = 0.0
    P["be2"][:] = 0.0
    X = random_inputs(rng, dims, 3)
    Y = sai.Inputs(rng.normal(size=X.scene.shape) * 10, X.skel, X.box)
    assert np.array_equal(sai.score_batch(P, X), sai.score_batch(P, Y))


def test_no_dead_branch(small_ds):
    dims = sai.SaiDims(decoder=True)
    P = sai.init_params(dims, 0)
    X = sai.make_inputs(small_ds.clips[:32])
    _, c = sai.forward_logits(P, X)
    g = sai.backward_logits(P, c, np.ones(32))
    _, c2 = sai.reconstruct_batch(P, X)
    g2 = sai.backward_recon(P, c2, np.ones(32))
    for k in P.names():
        assert np.any(g[k] != 0) or np.any(g2[k] != 0), k


def test_dimension_mismatch(small_ds):
    P = sai.init_params(sai.SaiDims(d_s=8), 0)
    with pytest.raises(ContractViolation):
        sai.score_clip(P, small_ds.clips[0])


def test_reconstruct(small_ds):
    dims = sai.SaiDims(decoder=True)
    P = sai.init_params(dims, 0)
    clip = small_ds.clips[0]
    # a decoder that outputs the target exactly has zero error
    Q = P.copy()
    Q["Wd2"][:] = 0.0
    Q["bd2"] = sai.make_inputs([clip]).recon_target()[0]
    assert sai.reconstruct(Q, clip) == 0.0
    relabeled = dataclasses.replace(clip, clip_id="other", video_label="abnormal", frame_labels=None)
    assert sai.reconstruct(P, relabeled) == sai.reconstruct(P, clip) > 0.0
    with pytest.raises(ContractViolation):
        sai.reconstruct(sai.init_params(sai.SaiDims(), 0), clip)


def test_checkpoint_roundtrip(tmp_path):
    P = sai.init_params(SMALL, 5)
    sai.save_params(P, tmp_path / "p.ckpt")
    Q = sai.load_params(tmp_path / "p.ckpt")
    assert Q.dims == P.dims and Q.allclose(P)
    assert sai.dumps_params(Q) == sai.dumps_params(P)
    with pytest.raises(ValueError):
        sai.loads_params(b"junk")
    with pytest.raises(ValueError):
        sai.loads_params(sai.dumps_params(P)[:-8])
