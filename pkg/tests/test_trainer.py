import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from decaf.clustering import centroids_sparse, hierarchical_cluster
from decaf.embedding import embed_document, embed_label
from decaf.errors import NumericalError
from decaf.inference import predict_batch
from decaf.linalg import make_rng
from decaf.model import model_arrays
from decaf.shortlister import Shortlister, build_meta_problem, recall_at_shortlist
from decaf.synthetic import grouped_dataset, random_dataset
from decaf.trainer import (
    TrainConfig,
    build_shortlist_cache,
    draw_masks,
    init_module3,
    instance_seed,
    load_checkpoint,
    logistic_loss_and_grad,
    module4_loss_and_grads,
    resume_from_checkpoint,
    shortlist_embeddings,
    train_ensemble,
    train_module1,
    train_module2,
    train_module4,
    train_pipeline,
    training_loss,
)


def small_config(**kw):
    base = dict(dim=8, num_clusters=4, epochs_module1=3, epochs_module2=2, epochs_module4=2,
                batch_size=32, ensemble_size=1, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def same_arrays(a, b):
    x, y = model_arrays(a), model_arrays(b)
    return x.keys() == y.keys() and all(x[k].tobytes() == y[k].tobytes() for k in x)


class TestLogistic:
    def test_zero_score(self):
        loss, _ = logistic_loss_and_grad(0.0, 1)
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_saturation(self):
        loss, grad = logistic_loss_and_grad(50.0, 1)
        assert loss < 1e-21 and abs(grad) < 1e-21
        assert np.isfinite(logistic_loss_and_grad(-1e4, 1)[0])

    def test_finite_differences(self):
        rng = make_rng(0)
        s = rng.normal(scale=4, size=20)
        y = np.where(rng.random(20) < 0.5, 1.0, -1.0)
        _, g = logistic_loss_and_grad(s, y)
        h = 1e-6
        num = (logistic_loss_and_grad(s + h, y)[0] - logistic_loss_and_grad(s - h, y)[0]) / (2 * h)
        np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-12)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.dim, c.num_clusters, c.batch_size, c.ensemble_size) == (300, 2**15, 255, 3)
        assert (c.epochs_module1, c.lr_module1) == (20, 0.01)
        assert c.levels == 15

    @pytest.mark.parametrize("kw", [dict(num_clusters=6), dict(beam=9, num_clusters=8), dict(ablation="x"),
                                    dict(dropout=1.0), dict(batch_size=0), dict(ensemble_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_text_round_trip(self):
        c = TrainConfig(dim=12, beam=4, num_clusters=8, ablation="z2-only")
        values = dict(line.split("=", 1) for line in c.to_text().splitlines())
        assert TrainConfig.from_mapping(values) == c

    def test_from_mapping_coerces(self):
        c = TrainConfig.from_mapping({"dim": "16", "lr-module4": "1e-3", "beam": "auto", "num_clusters": "0x10"})
        assert (c.dim, c.lr_module4, c.beam, c.num_clusters) == (16, 1e-3, None, 16)
        with pytest.raises(ValueError, match="unknown config key"):
            TrainConfig.from_mapping({"nope": "1"})

    def test_instance_seeds_differ(self):
        assert len({instance_seed(0, j) for j in range(5)}) == 5


class TestMasks:
    def test_draw_order(self):
        m = draw_masks(make_rng(3), 0.25, 4, 5, 6)
        rng = make_rng(3)
        first = (rng.random((4, 6)) >= 0.25) / 0.75
        second = (rng.random((4, 6)) >= 0.25) / 0.75
        third = (rng.random((5, 6)) >= 0.25) / 0.75
        np.testing.assert_array_equal(m.doc_inner, first)
        np.testing.assert_array_equal(m.doc_outer, second)
        np.testing.assert_array_equal(m.label, third)


def meta_precision_at_1(model, d, clustering):
    meta = build_meta_problem(d, clustering)
    H = embed_label(model, meta.meta_texts)
    S = embed_document(model, d.features) @ H.T
    top = np.argsort(-S, axis=1, kind="stable")[:, 0]
    return np.mean([meta.meta_labels[i, top[i]] > 0 for i in range(d.num_points)])


class TestModule1:
    def test_single_cluster(self):
        d = random_dataset(0, num_points=40, num_labels=6, num_tokens=20)
        model, cl = train_module1(d, small_config(num_clusters=1, epochs_module1=5))
        assert cl.num_clusters == 1
        assert meta_precision_at_1(model, d, cl) == 1.0
        meta = build_meta_problem(d, cl)
        S = embed_document(model, d.features) @ embed_label(model, meta.meta_texts).T
        assert np.median(S) > 0

    def test_separable_groups(self):
        d = grouped_dataset(0, num_points=400, num_groups=2, labels_per_group=4, tokens_per_group=10)
        model, cl = train_module1(d, small_config(num_clusters=2, epochs_module1=10, dim=16))
        # the sparse centroids recover the two groups exactly
        groups = {frozenset((c // 4).tolist()) for c in cl.clusters}
        assert groups == {frozenset({0}), frozenset({1})}
        assert meta_precision_at_1(model, d, cl) >= 0.95

    def test_loss_decreases(self):
        drops = []
        for seed in range(3):
            d = random_dataset(seed, num_points=300, num_labels=16, num_tokens=50)
            hist = []
            train_module1(d, small_config(epochs_module1=5, seed=seed), history=hist)
            drops.append(hist[-1] - hist[0])
            assert len(hist) == 5
        assert np.median(drops) < 0

    def test_requires_label_texts(self):
        d = random_dataset(0, num_points=10, num_labels=4, num_tokens=5)
        d.label_texts = None
        with pytest.raises(ValueError, match="label texts"):
            train_module1(d, small_config())


@pytest.fixture(scope="module")
def stage2():
    d = random_dataset(4, num_points=200, num_labels=32, num_tokens=60)
    cfg = small_config(num_clusters=8, epochs_module1=3, epochs_module2=3, epochs_module4=3)
    base, cl1 = train_module1(d, cfg)
    m2, sl, cache = train_module2(base, d, cfg)
    return d, cfg, base, cl1, m2, sl, cache


class TestModule2:
    def test_selected_beam_reaches_target_recall(self, stage2):
        d, cfg, _, _, m2, sl, cache = stage2
        B = m2.config["selected_beam"]
        emb = shortlist_embeddings(m2, d.features)
        assert recall_at_shortlist(sl, emb, d.labels, B) >= cfg.target_recall
        if B > 1:
            assert recall_at_shortlist(sl, emb, d.labels, B - 1) < cfg.target_recall
        assert cache.beam == B

    def test_cache_contains_positives(self, stage2):
        d, *_, cache = stage2
        assert (d.labels - d.labels.multiply(cache.matrix)).nnz == 0
        assert set(np.unique(cache.matrix.data)) == {1.0}

    def test_full_beam_cache_is_everything(self, stage2):
        d, cfg, base, *_ = stage2
        _, _, cache = train_module2(base, d, small_config(num_clusters=8, beam=8, epochs_module2=1))
        assert cache.matrix.nnz == d.num_points * d.num_labels

    def test_reclustering_differs(self, stage2):
        _, _, _, cl1, _, sl, _ = stage2
        assert {frozenset(c.tolist()) for c in cl1.clusters} != {frozenset(c.tolist()) for c in sl.clustering.clusters}
        sl.clustering.validate()

    def test_frozen_encoder_snapshot(self, stage2):
        _, _, _, _, m2, sl, _ = stage2
        np.testing.assert_array_equal(sl.encoder_E, m2.E)
        assert sl.encoder_E is not m2.E

    def test_input_model_untouched(self, stage2):
        d, cfg, base, *_ = stage2
        before = model_arrays(base)["E"].copy()
        train_module2(base, d, small_config(num_clusters=8, epochs_module2=1))
        np.testing.assert_array_equal(model_arrays(base)["E"], before)

    def test_cache_without_positives(self, stage2):
        d, _, _, _, m2, sl, _ = stage2
        emb = shortlist_embeddings(m2, d.features)
        bare = build_shortlist_cache(sl, emb, d.labels, 1, include_positives=False)
        sizes = np.diff(bare.matrix.indptr)
        assert set(sizes.tolist()) <= set(sl.clustering.sizes().tolist())


class TestModule3:
    def test_initial_state(self, stage2):
        _, _, _, _, m2, _, _ = stage2
        m3 = init_module3(m2)
        D = m3.dim
        np.testing.assert_array_equal(m3.doc_block.R, np.eye(D))
        np.testing.assert_array_equal(m3.label_block.R, np.eye(D))
        np.testing.assert_array_equal(m3.classifier_gates.alpha, 0.0)
        np.testing.assert_allclose(m3.refinement, (m3.label_texts @ m3.E.astype(np.float64)), rtol=1e-6)
        w = m3.classifiers()
        np.testing.assert_allclose(w, 0.5 * (embed_label(m3, m3.label_texts) + m3.refinement), rtol=1e-6)

    def test_empty_label_text_gives_zero_refinement(self, stage2):
        _, _, _, _, m2, _, _ = stage2
        m = m2.copy()
        Z = m.label_texts.tolil()
        Z[3, :] = 0
        m.label_texts = sp.csr_matrix(Z)
        m.label_texts.eliminate_zeros()
        np.testing.assert_array_equal(init_module3(m).refinement[3], 0.0)

    def test_ablation_modes(self, stage2):
        _, _, _, _, m2, _, _ = stage2
        assert init_module3(m2, "z1-only").classifier_mode == "z1"
        np.testing.assert_array_equal(init_module3(m2, "z1-only").refinement, 0.0)
        z2 = init_module3(m2, "z2-only", seed=3)
        assert z2.classifier_mode == "z2"
        np.testing.assert_array_equal(z2.refinement, init_module3(m2, "no-init", seed=3).refinement)
        assert abs(z2.refinement.std() - math.sqrt(2 / z2.dim)) < 0.1


class TestModule4:
    def test_single_positive_pair_at_zero_score(self, stage2):
        _, _, _, _, m2, _, _ = stage2
        m = init_module3(m2)
        m.refinement[:] = 0
        m.E[:] = 0
        X = sp.csr_matrix(np.ones((1, m.num_tokens)))
        Y = sp.csr_matrix(([1.0], ([0], [5])), shape=(1, m.num_labels))
        loss, _ = module4_loss_and_grads(m, X, Y, Y)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_loss_falls(self, stage2):
        d, cfg, _, _, m2, _, cache = stage2
        start = init_module3(m2, seed=cfg.seed)
        trained = train_module4(start, d, cache, cfg)
        assert training_loss(trained, d, cache.matrix) < training_loss(start, d, cache.matrix)

    def test_z2_mode_leaves_label_block(self, stage2):
        d, cfg, _, _, m2, _, cache = stage2
        start = init_module3(m2, "z2-only", seed=cfg.seed)
        trained = train_module4(start, d, cache, cfg)
        np.testing.assert_array_equal(trained.label_block.R, start.label_block.R)
        assert not np.array_equal(trained.refinement, start.refinement)

    def test_lite_keeps_token_embeddings(self, stage2):
        d, _, _, _, m2, _, cache = stage2
        cfg = small_config(num_clusters=8, ablation="lite")
        trained = train_module4(init_module3(m2, "lite"), d, cache, cfg)
        np.testing.assert_array_equal(trained.E, m2.E)

    def test_non_finite_reports_position(self, stage2):
        d, cfg, _, _, m2, _, cache = stage2
        bad = init_module3(m2)
        bad.E[d.document(0).indices[0]] = np.nan
        with np.errstate(invalid="ignore"), pytest.raises(NumericalError, match="epoch 0, batch 0"):
            train_module4(bad, d, cache, cfg)


class TestPipeline:
    def test_ensemble_of_one_equals_pipeline(self):
        d = random_dataset(6, num_points=120, num_labels=16, num_tokens=40)
        cfg = small_config()
        assert same_arrays(train_pipeline(d, cfg), train_ensemble(d, cfg)[0])

    def test_instances_differ(self):
        d = random_dataset(7, num_points=120, num_labels=16, num_tokens=40)
        models = train_ensemble(d, small_config(ensemble_size=2))
        assert len(models) == 2
        a, b = models
        assert not np.array_equal(a.E, b.E)
        assert not np.array_equal(a.shortlister.H, b.shortlister.H)

    def test_checkpoints_and_resume(self, tmp_path):
        d = random_dataset(8, num_points=100, num_labels=16, num_tokens=40)
        cfg = small_config()
        model = train_pipeline(d, cfg, checkpoint_dir=tmp_path)
        for name in ("module1.ckpt", "module2.ckpt", "module4.ckpt"):
            assert (tmp_path / name).exists()
        stage, _, extras = load_checkpoint(tmp_path / "module1.ckpt")
        assert stage == 1 and extras["clustering"].num_clusters == 4
        stage, _, extras = load_checkpoint(tmp_path / "module2.ckpt")
        assert stage == 2 and (d.labels - d.labels.multiply(extras["cache"].matrix)).nnz == 0
        assert same_arrays(resume_from_checkpoint(tmp_path / "module1.ckpt", d, cfg), model)
        assert same_arrays(resume_from_checkpoint(tmp_path / "module2.ckpt", d, cfg), model)
        assert same_arrays(resume_from_checkpoint(tmp_path / "module4.ckpt", d, cfg), model)

    def test_ensemble_checkpoint_layout(self, tmp_path):
        d = random_dataset(9, num_points=80, num_labels=8, num_tokens=30)
        train_ensemble(d, small_config(ensemble_size=2, num_clusters=2), checkpoint_dir=tmp_path)
        assert (tmp_path / "module1.ckpt").exists()
        for j in range(2):
            assert (tmp_path / f"instance{j}" / "module4.ckpt").exists()

    def test_logs_hold_epoch_losses(self):
        d = random_dataset(10, num_points=60, num_labels=8, num_tokens=30)
        logs = {}
        train_pipeline(d, small_config(num_clusters=2), logs=logs)
        assert len(logs["module1"]) == 3
        assert len(logs["instance0"]["module4"]) == 2
        model = train_pipeline(d, small_config(num_clusters=2))
        assert model.config["selected_beam"] >= 1
        assert len(predict_batch(model, d.features[:3], top_k=2)) == 3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_cache_always_has_positives(seed, B):
    d = random_dataset(seed % 11, num_points=30, num_labels=16, num_tokens=20)
    cl = hierarchical_cluster(centroids_sparse(d), 3, seed=seed)
    rng = make_rng(seed)
    sl = Shortlister(cl, rng.normal(size=(8, 4)))
    cache = build_shortlist_cache(sl, rng.normal(size=(30, 4)), d.labels, B)
    assert (d.labels - d.labels.multiply(cache.matrix)).nnz == 0
