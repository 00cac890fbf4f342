import numpy as np
import pytest

from scene_action_vad import rkm, synth
from scene_action_vad.errors import ContractViolation, ZeroNormError


def recovered_errors(kg, world):
    errors = 0
    for s in range(world.n_scenes):
        for a in range(world.n_actions):
            rel = rkm.query_relation(kg, world.scene_prototypes[s], world.template_features()[a])
            errors += rel != synth.oracle_label(world, s, a)
    return errors


def graph_for(world, ds, **kw):
    cfg = rkm.RkmConfig(theta_fn=world.n_actions, theta_fa=world.n_actions, **kw)
    return rkm.build_graph(ds, cfg)


def test_config_validation():
    rkm.RkmConfig()
    for bad in (dict(rho=0.0), dict(mu_a=1.5), dict(theta_fn=0), dict(scene_k=0)):
        with pytest.raises(ContractViolation):
            rkm.RkmConfig(**bad)


def test_defaults():
    c = rkm.RkmConfig()
    assert (c.theta_fn, c.theta_fa, c.rho, c.mu_a, c.mu_s) == (15, 25, 0.95, 0.45, 0.90)


def test_scene_centers_match_prototypes(world0, small_ds):
    _, _, sm = rkm.build_clusters(small_ds, rkm.RkmConfig(theta_fn=8, theta_fa=8))
    assert np.allclose(sm.centers, world0.scene_prototypes, atol=1e-6)


def test_scene_kmeans_without_hints(world0, small_ds):
    from scene_action_vad.data import Dataset, SceneFeature
    import dataclasses
    clips = [dataclasses.replace(c, scene=SceneFeature(c.scene.vector)) for c in small_ds.clips]
    ds = Dataset(clips, small_ds.header)
    _, _, sm = rkm.build_clusters(ds, rkm.RkmConfig(theta_fn=8, theta_fa=8, scene_k=5))
    d = ((sm.centers[:, None] - world0.scene_prototypes[None]) ** 2).sum(-1)
    assert np.allclose(d.min(axis=1), 0.0, atol=1e-12)


def test_single_scene_mean():
    w = synth.generate_world(1, 4, 0.25, seed=2, noise_level=0.1)
    ds = synth.sample_dataset(w, 4, 6, seed=1)
    _, _, sm = rkm.build_clusters(ds, rkm.RkmConfig(theta_fn=2, theta_fa=2, scene_k=1))
    assert np.allclose(sm.centers[0], np.stack([c.scene.vector for c in ds.clips]).mean(0))


def test_theta_fn_equals_normal_action_count(world0, small_ds):
    normal_actions = sorted({c.action_id_hint for c in small_ds.subset("normal")})
    nm, _, _ = rkm.build_clusters(small_ds, rkm.RkmConfig(theta_fn=len(normal_actions), theta_fa=8))
    T = world0.template_features()[normal_actions]
    d = ((nm.centers[:, None] - T[None]) ** 2).sum(-1)
    match = d.argmin(axis=1)
    assert sorted(match.tolist()) == list(range(len(normal_actions)))


def test_insufficient_samples(small_ds):
    with pytest.raises(ContractViolation):
        rkm.build_clusters(small_ds, rkm.RkmConfig(theta_fn=10_000, theta_fa=1))


def test_combine_identical_and_orthogonal():
    C = np.eye(4)[:3] + 0.01
    out = rkm.combine_centers(C, C.copy(), 0.95)
    assert len(out.centers) == 3 and set(out.tags) == {"shared"}
    N, A = np.eye(6)[:3], np.eye(6)[3:]
    out = rkm.combine_centers(N, A, 0.95)
    assert len(out.centers) == 6 and out.merges == {}


def test_combine_matches_pairwise_oracle(rng):
    for _ in range(50):
        N = rng.normal(size=(6, 4))
        A = N[rng.integers(0, 6, 5)] + rng.normal(scale=rng.uniform(0.01, 1.0), size=(5, 4))
        out = rkm.combine_centers(N, A, 0.9)
        expect = {}
        for j, a in enumerate(A):
            sims = [a @ n / np.linalg.norm(a) / np.linalg.norm(n) for n in N]
            if max(sims) > 0.9:
                expect[j] = int(np.argmax(sims))
        assert out.merges == expect
        assert len(out.centers) == 6 + 5 - len(expect)


def test_combine_weighted_mean():
    N = np.array([[1.0, 0.0]])
    A = np.array([[1.0, 0.01]])
    out = rkm.combine_centers(N, A, 0.95, normal_counts=[3], abnormal_counts=[1])
    assert np.allclose(out.centers[0], [1.0, 0.0025])
    assert out.counts[0] == 4


def test_only_normal_clips(small_ds):
    nm, _, sm = rkm.build_clusters(small_ds, rkm.RkmConfig(theta_fn=8, theta_fa=8))
    kg = rkm.construct_graph(small_ds.subset("normal"), [], nm.centers, sm)
    assert kg.relations and set(kg.relations.values()) == {rkm.NORMAL}


def test_normal_edge_kept_when_seen_in_abnormal_video(small_ds):
    nm, _, sm = rkm.build_clusters(small_ds, rkm.RkmConfig(theta_fn=8, theta_fa=8))
    normal = small_ds.subset("normal")
    kg = rkm.construct_graph(normal, normal[:3], nm.centers, sm)
    kg2 = rkm.construct_graph(normal, [], nm.centers, sm)
    assert kg.relations == kg2.relations


def test_noise0_recovery(world0, small_ds):
    kg = graph_for(world0, small_ds)
    assert recovered_errors(kg, world0) == 0


def test_abnormal_order_irrelevant(world0, small_ds):
    nm, am, sm = rkm.build_clusters(small_ds, rkm.RkmConfig(theta_fn=8, theta_fa=8))
    merged = rkm.combine_centers(nm.centers, am.centers, 0.95, nm.counts(), am.counts())
    ab = small_ds.subset("abnormal")
    a = rkm.construct_graph(small_ds.subset("normal"), ab, merged, sm)
    b = rkm.construct_graph(small_ds.subset("normal"), ab[::-1], merged, sm)
    assert a.relations == b.relations


def test_zero_norm_clip_named(small_ds):
    import dataclasses
    from scene_action_vad.data import SceneFeature
    nm, _, sm = rkm.build_clusters(small_ds, rkm.RkmConfig(theta_fn=8, theta_fa=8))
    c = small_ds.clips[0]
    bad = dataclasses.replace(c, scene=SceneFeature(np.zeros_like(c.scene.vector)))
    with pytest.raises(ZeroNormError, match=c.clip_id):
        rkm.construct_graph([bad], [], nm.centers, sm)


def test_query(world0, small_ds):
    kg = graph_for(world0, small_ds)
    S, A = kg.scene_matrix(), kg.action_matrix()
    sids, aids = kg.scene_ids(), kg.action_ids()
    for i in range(len(sids)):
        for j in range(len(aids)):
            expect = kg.relations.get((sids[i], aids[j]), rkm.UNKNOWN)
            assert rkm.query_relation(kg, S[i], A[j]) == expect
    with pytest.raises(ContractViolation):
        rkm.query_relation(rkm.KnowledgeGraph(), S[0], A[0])


def test_query_unknown():
    kg = rkm.KnowledgeGraph(
        scene_nodes=[rkm.Node(0, np.array([1.0, 0]), 1), rkm.Node(1, np.array([0.0, 1]), 1)],
        action_nodes=[rkm.Node(0, np.array([1.0, 0, 0]), 1)],
        relations={(0, 0): rkm.NORMAL})
    assert rkm.query_relation(kg, [0, 1], [1, 0, 0]) == rkm.UNKNOWN


def test_query_perturbation_stable(world0, small_ds, rng):
    kg = graph_for(world0, small_ds)
    T = world0.template_features()
    for s in range(world0.n_scenes):
        for a in range(world0.n_actions):
            base = rkm.query_relation(kg, world0.scene_prototypes[s], T[a])
            for _ in range(3):
                ps = world0.scene_prototypes[s] + rng.normal(scale=0.01, size=world0.d_s)
                pa = T[a] + rng.normal(scale=0.001, size=T.shape[1])
                assert rkm.query_relation(kg, ps, pa) == base


def _kg(centers_a, centers_s):
    return rkm.KnowledgeGraph(
        scene_nodes=[rkm.Node(i, np.asarray(c, float), 1) for i, c in enumerate(centers_s)],
        action_nodes=[rkm.Node(i, np.asarray(c, float), 1) for i, c in enumerate(centers_a)])


def test_update_add_and_combine():
    kg = _kg([[1.0, 0, 0]], [[1.0, 0]])
    out, log = rkm.update_nodes(kg, [[1.0, 0]], [[0, 1.0, 0]], rkm.RkmConfig())
    assert len(out.action_nodes) == 2 and log[0][:2] == ("action", "add")
    out, log = rkm.update_nodes(kg, [[1.0, 0]], [[1.0, 0, 0]], rkm.RkmConfig())
    assert len(out.action_nodes) == 1 and log[0][:2] == ("action", "combine")
    assert out.action_nodes[0].count == 2


def test_update_convex_combination(rng):
    kg = _kg(rng.normal(size=(3, 4)), rng.normal(size=(2, 3)))
    members = {("a", i): [n.center.copy()] for i, n in enumerate(kg.action_nodes)}
    A = rng.normal(size=(30, 4))
    S = rng.normal(size=(30, 3))
    out, log = rkm.update_nodes(kg, S, A, rkm.RkmConfig(mu_a=0.3))
    actions = iter(A)
    for side, decision, nid in log:
        if side != "action":
            continue
        x = next(actions)
        if decision == "combine":
            members[("a", nid)].append(x)
        else:
            members[("a", nid)] = [x]
    for n in out.action_nodes:
        assert np.allclose(n.center, np.mean(members[("a", n.node_id)], axis=0))


def test_update_does_not_touch_relations(world0, small_ds):
    kg = graph_for(world0, small_ds)
    out = rkm.update_graph(kg, small_ds.clips[:5], rkm.RkmConfig())
    assert out.relations == kg.relations


def test_merge_rules():
    main = _kg([[1.0, 0], [0, 1.0]], [[1.0, 0], [0, 1.0]])
    main.relations = {(0, 0): rkm.NORMAL}
    same = main.copy()
    assert rkm.merge_subgraph(main, same).relations == main.relations
    sub = main.copy()
    sub.relations = {(0, 0): rkm.ABNORMAL, (1, 1): rkm.ABNORMAL}
    out = rkm.merge_subgraph(main, sub)
    assert out.relations == {(0, 0): rkm.NORMAL, (1, 1): rkm.ABNORMAL}
    assert main.relations == {(0, 0): rkm.NORMAL}


def test_subgraph_then_merge(world0, small_ds):
    kg = graph_for(world0, small_ds)
    extra = synth.sample_dataset(world0, 2, 4, seed=99)
    grown = rkm.update_graph(kg, extra.clips, rkm.RkmConfig())
    sub = rkm.build_subgraph(grown, extra.clips)
    merged = rkm.merge_subgraph(grown, sub)
    for k, v in grown.relations.items():
        assert merged.relations[k] == v


def test_serialization_roundtrip(world0, small_ds, tmp_path):
    kg = graph_for(world0, small_ds)
    rkm.save_graph(kg, tmp_path / "kg.txt")
    back = rkm.load_graph(tmp_path / "kg.txt")
    assert rkm.dumps_graph(back) == rkm.dumps_graph(kg)
    assert back.relations == kg.relations
    with pytest.raises(ValueError):
        rkm.loads_graph("not a graph\n")
