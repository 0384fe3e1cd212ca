import itertools
import math

import numpy as np
import pytest

from mmcl.errors import ConfigurationError, NonFiniteLossError
from mmcl.losses import LossConfig
from mmcl.partition import partition_queries
from mmcl.surrogate import (TOKEN_EXTRA, Scene, SceneParams, TrainConfig, base_loss,
                            box_embedding, box_iou, boxes_intersect, epoch_lr, forward,
                            generate_scene, init_model, loss_and_grads, make_prototypes,
                            match_cost, run_training, train_step, zero_model)

K, D = 3, 4


def small_scene(seed=0, m=None, **kw):
    args = dict(overlap_prob=0.5, noise=0.1)
    args.update(kw)
    for s in itertools.count(seed):
        sc = generate_scene(K, 3, args["overlap_prob"], args["noise"], s, dim=D)
        if m is None or sc.n_objects == m:
            return sc


def empty_scene(dim=D):
    return Scene(classes=np.zeros(0, dtype=int), boxes=np.zeros((0, 4)),
                 features=np.zeros((0, dim)))


# ---------------------------------------------------------------- scenes

def test_no_overlap_no_noise_features_are_prototypes():
    protos = make_prototypes(5, 16, np.random.default_rng(0))
    for seed in range(20):
        sc = generate_scene(5, 4, 0.0, 0.0, seed, dim=16, prototypes=protos)
        np.testing.assert_array_equal(sc.features, protos[sc.classes])
        assert sc.overlap_graph == ()


def test_forced_overlap():
    found = 0
    for seed in range(200):
        sc = generate_scene(4, 2, 1.0, 0.0, seed, dim=8)
        if sc.n_objects == 2:
            found += 1
            assert sc.overlap_graph == ((0, 1),)
            assert boxes_intersect(sc.boxes[0], sc.boxes[1])
    assert found > 20


def test_blending_coefficient_range():
    protos = make_prototypes(4, 8, np.random.default_rng(1))
    for seed in range(100):
        sc = generate_scene(4, 2, 1.0, 0.0, seed, dim=8, prototypes=protos)
        if sc.n_objects != 2 or sc.classes[0] == sc.classes[1]:
            continue
        a, b = protos[sc.classes]
        # feature_0 = (1 - lam) a + lam b; recover lam by projection
        lam = float((sc.features[0] - a) @ (b - a) / ((b - a) @ (b - a)))
        assert 0.2 <= lam <= 0.5
        np.testing.assert_allclose(sc.features[0], (1 - lam) * a + lam * b, atol=1e-12)


def test_scene_determinism_and_bounds():
    a = generate_scene(5, 4, 0.5, 0.1, 123)
    b = generate_scene(5, 4, 0.5, 0.1, 123)
    assert a.boxes.tobytes() == b.boxes.tobytes()
    assert a.features.tobytes() == b.features.tobytes()
    assert a.classes.tobytes() == b.classes.tobytes() and a.overlap_graph == b.overlap_graph
    for seed in range(100):
        sc = generate_scene(5, 4, 0.7, 0.1, seed)
        cx, cy, w, h = sc.boxes.T
        assert np.all(w > 0) and np.all(h > 0)
        assert np.all(cx - w / 2 >= 0) and np.all(cx + w / 2 <= 1)
        assert np.all(cy - h / 2 >= 0) and np.all(cy + h / 2 <= 1)
        assert 1 <= sc.n_objects <= 4 and np.all(sc.classes < 5)


def test_prototypes_orthonormal():
    p = make_prototypes(5, 16, np.random.default_rng(2))
    np.testing.assert_allclose(p @ p.T, np.eye(5), atol=1e-12)


@pytest.mark.parametrize("kw", [dict(classes=1), dict(max_objects=0), dict(overlap_prob=1.5),
                                dict(noise=-1.0)])
def test_scene_params_validation(kw):
    with pytest.raises(ConfigurationError):
        SceneParams(**kw)


def test_box_iou():
    assert box_iou([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]) == pytest.approx(1.0)
    assert box_iou([0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]) == 0.0
    assert box_iou([0.5, 0.5, 0.2, 0.2], [0.6, 0.5, 0.2, 0.2]) == pytest.approx(1 / 3)


def test_box_embedding_width():
    assert box_embedding(np.full((3, 4), 0.5)).shape == (3, TOKEN_EXTRA)


# ---------------------------------------------------------------- forward

def test_zero_weights_identity_path():
    q0 = np.random.default_rng(0).normal(size=(5, D))
    model = zero_model(5, D, K, 3, queries=q0)
    fp = forward(model, small_scene())
    for st in fp.states:
        np.testing.assert_array_equal(st, q0)
    for lg, bx in zip(fp.logits, fp.boxes):
        assert not lg.any()
        np.testing.assert_array_equal(bx, 0.5)


def test_single_object_single_query_attention():
    model = init_model(1, D, K, 2, np.random.default_rng(0))
    fp = forward(model, small_scene(m=1))
    for a in fp.attention:
        assert a.shape == (1, 1) and a[0, 0] == 1.0


def test_forward_matches_recurrence_oracle():
    model = init_model(4, D, K, 3, np.random.default_rng(5), scale=0.5)
    scene = small_scene(m=3)
    fp = forward(model, scene)
    prm = model.params
    x = [list(r) for r in scene.tokens()]
    q = [list(r) for r in prm["queries"]]

    def matmul(a, b):
        return [[sum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0]))]
                for i in range(len(a))]

    for l in range(3):
        S, P, V = (prm[f"{n}{l}"].tolist() for n in ("mix", "proj", "value"))
        b = prm[f"bias{l}"].tolist()
        keys, vals, qs = matmul(x, P), matmul(x, V), matmul(q, S)
        new = []
        for i in range(len(q)):
            scores = [sum(q[i][t] * keys[j][t] for t in range(D)) / math.sqrt(D)
                      for j in range(len(x))]
            mx = max(scores)
            e = [math.exp(z - mx) for z in scores]
            att = [v / sum(e) for v in e]
            new.append([q[i][t] + qs[i][t] + b[t]
                        + sum(att[j] * vals[j][t] for j in range(len(x))) for t in range(D)])
        q = new
        np.testing.assert_allclose(fp.states[l + 1], q, atol=1e-10)
        logits = np.array(matmul(q, prm["cls_w"].tolist())) + prm["cls_b"]
        z = np.array(matmul(q, prm["box_w"].tolist())) + prm["box_b"]
        np.testing.assert_allclose(fp.logits[l], logits, atol=1e-10)
        np.testing.assert_allclose(fp.boxes[l], 1 / (1 + np.exp(-z)), atol=1e-10)


def test_dimension_mismatch():
    model = init_model(3, D + 1, K, 1, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        forward(model, small_scene())


# ---------------------------------------------------------------- base loss

def test_perfect_predictions_leave_background_only():
    scene = small_scene(m=2)
    n, big = 4, 50.0
    logits = np.zeros((n, K + 1))
    logits[:, K] = big
    boxes = np.full((n, 4), 0.5)
    for i, (c, b) in enumerate(zip(scene.classes, scene.boxes)):
        logits[i] = 0.0
        logits[i, c] = big
        boxes[i] = b
    res = base_loss(logits, boxes, scene)
    assert sorted(res.pairs) == [(0, 0), (1, 1)]
    assert res.value == pytest.approx(0.0, abs=1e-15)


def test_uniform_single_query():
    scene = small_scene(m=1)
    boxes = np.full((1, 4), 0.5)
    res = base_loss(np.zeros((1, K + 1)), boxes, scene)
    want = math.log(K + 1) + np.abs(boxes[0] - scene.boxes[0]).sum()
    assert res.value == pytest.approx(want, abs=1e-12)


def test_matching_equals_brute_force():
    rng = np.random.default_rng(3)
    scene = small_scene(m=2)
    logits = rng.normal(size=(4, K + 1))
    boxes = rng.uniform(size=(4, 4))
    cost = match_cost(logits, boxes, scene)
    best = min(itertools.permutations(range(4), 2),
               key=lambda pr: cost[pr[0], 0] + cost[pr[1], 1])
    res = base_loss(logits, boxes, scene)
    assert sorted(res.pairs) == sorted([(best[0], 0), (best[1], 1)])


def test_empty_scene_background_only():
    logits = np.random.default_rng(0).normal(size=(3, K + 1))
    res = base_loss(logits, np.full((3, 4), 0.5), empty_scene())
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert res.value == pytest.approx(-logp[:, -1].mean())
    assert res.pairs == ()
    model = init_model(3, D, K, 2, np.random.default_rng(0))
    rec, grads = loss_and_grads(model, empty_scene(), partition_queries(3, 3),
                                TrainConfig(n_queries=3, n_layers=2))
    assert np.isfinite(rec.base_loss)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


# ---------------------------------------------------------------- gradients

def _total(model, scene, p, tc):
    rec, _ = loss_and_grads(model, scene, p, tc)
    return rec.base_loss + rec.contrastive_loss


@pytest.mark.parametrize("target", [(), (0,), (0, 1)])
def test_weight_gradients_match_finite_difference(target):
    rng = np.random.default_rng(7)
    model = init_model(4, 4, K, 2, rng, scale=0.5)
    scene = small_scene(seed=3, m=2)
    p = partition_queries(4, 2)
    tc = TrainConfig(n_queries=4, n_layers=2, target_layers=target,
                     loss_cfg=LossConfig(margin=0.0))
    _, grads = loss_and_grads(model, scene, p, tc)
    h = 1e-6
    for name, val in model.params.items():
        num = np.zeros_like(val)
        for idx in np.ndindex(val.shape):
            orig = val[idx]
            val[idx] = orig + h
            fp = _total(model, scene, p, tc)
            val[idx] = orig - h
            fm = _total(model, scene, p, tc)
            val[idx] = orig
            num[idx] = (fp - fm) / (2 * h)
        scale = max(np.abs(num).max(), np.abs(grads[name]).max(), 1e-12)
        assert np.abs(num - grads[name]).max() / scale < 1e-4, name


def test_stop_gradient_routes_to_queries_only():
    rng = np.random.default_rng(1)
    model = init_model(4, 4, K, 2, rng, scale=0.5)
    scene = small_scene(seed=3, m=2)
    p = partition_queries(4, 2)
    base = TrainConfig(n_queries=4, n_layers=2, target_layers=())
    full = TrainConfig(n_queries=4, n_layers=2, target_layers=(1,))
    st = TrainConfig(n_queries=4, n_layers=2, target_layers=(1,),
                     contrastive_through_layers=False)
    _, g0 = loss_and_grads(model, scene, p, base)
    _, gf = loss_and_grads(model, scene, p, full)
    _, gs = loss_and_grads(model, scene, p, st)
    for name in g0:
        if name != "queries":
            np.testing.assert_array_equal(gs[name], g0[name])
    assert not np.array_equal(gs["queries"], g0["queries"])
    assert not np.array_equal(gf["mix0"], g0["mix0"])


# ---------------------------------------------------------------- training

def test_train_step_zero_lr_is_noop():
    model = init_model(6, D, K, 2, np.random.default_rng(0))
    before = {k: v.copy() for k, v in model.params.items()}
    tc = TrainConfig(n_queries=6, n_layers=2, learning_rate=0.0)
    _, rec = train_step(model, small_scene(), partition_queries(6, K), tc)
    for k, v in model.params.items():
        np.testing.assert_array_equal(v, before[k])
    assert rec.base_loss > 0 and rec.contrastive_loss > 0


def test_no_targets_means_no_contrastive_term():
    model = init_model(6, D, K, 2, np.random.default_rng(0))
    tc = TrainConfig(n_queries=6, n_layers=2, target_layers=())
    _, rec = train_step(model, small_scene(), partition_queries(6, K), tc)
    assert rec.contrastive_loss == 0.0


def test_small_step_descends():
    p = partition_queries(6, K)
    scene = small_scene(seed=4)
    tc = TrainConfig(n_queries=6, n_layers=2, learning_rate=1e-3, optimizer="sgd")
    model = init_model(6, D, K, 2, np.random.default_rng(0))
    before = _total(model, scene, p, tc)
    train_step(model, scene, p, tc)
    assert _total(model, scene, p, tc) < before


def test_non_finite_loss_names_term():
    model = init_model(6, D, K, 2, np.random.default_rng(0))
    model.params["cls_w"][0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as err:
        train_step(model, small_scene(), partition_queries(6, K),
                   TrainConfig(n_queries=6, n_layers=2))
    assert "base loss" in err.value.term


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(target_layers=(3,)),
                                dict(learning_rate=-1.0), dict(scenes_per_epoch=0),
                                dict(contrastive_loss="triplet"), dict(lr_schedule="step"),
                                dict(box_weight=-1.0)])
def test_train_config_validation(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def test_cosine_schedule():
    assert epoch_lr(0.1, "constant", 7, 10) == 0.1
    assert epoch_lr(0.1, "cosine", 0, 10) == 0.1
    lrs = [epoch_lr(0.1, "cosine", e, 10) for e in range(10)]
    assert all(b < a for a, b in zip(lrs, lrs[1:])) and lrs[-1] > 0


SMALL = dict(n_queries=10, n_layers=2, epochs=2, scenes_per_epoch=5, eval_scenes=5)
SMALL_SCENES = SceneParams(classes=K, max_objects=3, dim=D)


def test_trace_length_one():
    trace, _ = run_training(TrainConfig(**dict(SMALL, epochs=1, scenes_per_epoch=1)),
                            SMALL_SCENES)
    assert len(trace.records) == 1


def test_training_deterministic():
    a, ma = run_training(TrainConfig(**SMALL), SMALL_SCENES)
    b, mb = run_training(TrainConfig(**SMALL), SMALL_SCENES)
    assert a.rows() == b.rows()
    for k in ma.params:
        np.testing.assert_array_equal(ma.params[k], mb.params[k])
    c, _ = run_training(TrainConfig(**dict(SMALL, seed=1)), SMALL_SCENES)
    assert c.rows() != a.rows()


def test_zero_weighted_mmcl_reproduces_baseline():
    off = LossConfig(gamma=0.0, eta=0.0)
    a, _ = run_training(TrainConfig(**SMALL, target_layers=(0,), loss_cfg=off), SMALL_SCENES)
    b, _ = run_training(TrainConfig(**SMALL, target_layers=()), SMALL_SCENES)
    assert a.rows() == b.rows()


def test_trace_values_finite_and_in_range():
    trace, _ = run_training(TrainConfig(**SMALL), SMALL_SCENES)
    for r in trace.records:
        for v in (r.base_loss, r.contrastive_loss, r.homogeneity):
            assert np.isfinite(v)
        for v in (r.group_class_consistency, r.fixed_group_class_consistency,
                  r.detection_accuracy):
            assert 0.0 <= v <= 1.0
