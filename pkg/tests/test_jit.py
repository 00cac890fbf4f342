import numpy as np
import pytest

from scene_action_vad import _jit, kernels, metrics, rkm


@pytest.fixture(params=["jit", "numpy"])
def backend(request, monkeypatch):
    if request.param == "numpy":
        monkeypatch.setenv("SAVAD_DISABLE_JIT", "1")
    else:
        monkeypatch.delenv("SAVAD_DISABLE_JIT", raising=False)
    return request.param


def test_flag(monkeypatch):
    monkeypatch.setenv("SAVAD_DISABLE_JIT", "yes")
    assert not _jit.use_jit()
    monkeypatch.setenv("SAVAD_DISABLE_JIT", "0")
    assert _jit.use_jit()


@pytest.mark.parametrize("seed", range(3))
def test_kernels_agree(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(300, 12))
    C = rng.normal(size=(7, 12))
    a1, d1 = kernels._sqdist_assign_jit(X, C)
    a2, d2 = kernels._sqdist_assign_np(X, C)
    assert np.array_equal(a1, a2) and np.allclose(d1, d2, atol=1e-12)
    b1, s1 = kernels._cos_argmax_jit(X, C)
    b2, s2 = kernels._cos_argmax_np(X, C)
    assert np.array_equal(b1, b2) and np.allclose(s1, s2, atol=1e-12)
    starts = rng.integers(0, 90, 20)
    ends = starts + rng.integers(0, 10, 20)
    sc = rng.random(20)
    assert np.array_equal(metrics._frame_max_jit(starts, ends, sc, 100),
                          metrics._frame_max_np(starts, ends, sc, 100))


def test_public_entry_points_agree_across_backends(small_ds, world0, monkeypatch):
    out = {}
    for flag in ("0", "1"):
        monkeypatch.setenv("SAVAD_DISABLE_JIT", flag)
        X = np.random.default_rng(0).normal(size=(200, 8))
        m = kernels.kmeans(X, 5, seed=1)
        kg = rkm.build_graph(small_ds, rkm.RkmConfig(theta_fn=world0.n_actions, theta_fa=world0.n_actions))
        out[flag] = (m.centers, m.assignments, rkm.dumps_graph(kg))
    assert np.allclose(out["0"][0], out["1"][0], atol=1e-12)
    assert np.array_equal(out["0"][1], out["1"][1])
    assert out["0"][2] == out["1"][2]


def test_frame_scores_backend(backend):
    fs = metrics.frame_scores([((0, 3), 0.2), ((2, 5), 0.7)], 6)
    assert fs.tolist() == [0.2, 0.2, 0.7, 0.7, 0.7, 0.0]
