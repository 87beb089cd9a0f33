import numpy as np
import pytest

from spdg import datagen
from spdg.errors import ConfigError
from spdg.evaluate import (
    EvalReport,
    MethodResult,
    evaluate_cross_category,
    evaluate_leave_one_out,
    run_ablation,
    style_similarity_report,
    write_report_csv,
    write_report_json,
    write_similarity_csv,
)
from spdg.inference import infer, predict_batch, zero_shot_baseline
from spdg.prompter import init_gaussian_prompter
from spdg.trainer import RunConfig

QUICK = dict(epochs=1, batch_size=8, mc_samples=2)


@pytest.fixture(scope="module")
def quick_config():
    return RunConfig(**QUICK)


@pytest.fixture(scope="module")
def small_dataset_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "small"
    datagen.save(datagen.generate(n_per_cell=12, seed=7,
                                  domains=["photo", "cartoon", "sketch"]), path)
    return path


@pytest.fixture(scope="module")
def lodo_report(small_dataset_dir, quick_config):
    return evaluate_leave_one_out(small_dataset_dir, ["baseline_C", "baseline_PC", "gsp"],
                                  seeds=[0], base=quick_config)


class TestInfer:
    def test_matches_batch_path(self, small_dataset, bundle, dims):
        prompter = init_gaussian_prompter(dims.d_i, dims.d_t, seed=0)
        x = small_dataset.x[:5]
        preds, scores = predict_batch(bundle, prompter, x, small_dataset.classes)
        for i in range(5):
            cls, single_scores = infer(bundle, prompter, x[i], small_dataset.classes)
            assert cls == small_dataset.classes[preds[i]]
            assert np.allclose(single_scores, scores[i], atol=1e-9)

    def test_pure_function_of_inputs(self, small_dataset, bundle, dims):
        prompter = init_gaussian_prompter(dims.d_i, dims.d_t, seed=0)
        x = small_dataset.x[0]
        a = infer(bundle, prompter, x, small_dataset.classes)
        b = infer(bundle, prompter, x, small_dataset.classes)
        assert a[0] == b[0] and np.array_equal(a[1], b[1])

    def test_empty_classes_rejected(self, bundle, dims, rng):
        prompter = init_gaussian_prompter(dims.d_i, dims.d_t, seed=0)
        with pytest.raises(ConfigError):
            infer(bundle, prompter, rng.normal(size=dims.d_x), [])

    def test_positive_scaling_keeps_prediction(self, small_dataset, bundle, dims):
        prompter = init_gaussian_prompter(dims.d_i, dims.d_t, seed=0)
        cls, scores = infer(bundle, prompter, small_dataset.x[3], small_dataset.classes)
        assert int(np.argmax(scores * 7.5)) == int(np.argmax(scores))


def straight_line_infer(bundle, prompter, x, classes):
    """From-scratch re-implementation of the inference path, all inline numpy.

    Kept deliberately independent of the package's ops: attention, pooling and
    normalization are written out by hand as the oracle for `infer`.
    """
    w = bundle.weights
    z = np.tanh(x @ w["img_w1"] + w["img_b1"]) @ w["img_w2"] + w["img_b2"]

    h1 = z @ prompter.w1.data + prompter.b1.data
    h1 = np.where(h1 > 0, h1, np.exp(h1) - 1)
    h2 = h1 @ prompter.w2.data + prompter.b2.data
    h2 = np.where(h2 > 0, h2, np.exp(h2) - 1)
    style = h2 @ prompter.w_mu.data + prompter.b_mu.data

    d_t = bundle.dims.d_t
    pos = np.arange(3, dtype=float)[:, None]
    idx = np.arange(d_t, dtype=float)[None, :]
    angles = pos / 10000.0 ** (2.0 * np.floor(idx / 2.0) / d_t)
    positions = 0.3 * np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))

    scores = []
    for cls in classes:
        ids = [bundle.word_to_id[cls], bundle.word_to_id["."]]
        emb = np.vstack([style, w["tok_emb"][ids]])
        seq = emb + positions
        q, k, v = seq @ w["txt_wq"], seq @ w["txt_wk"], seq @ w["txt_wv"]
        att = q @ k.T / np.sqrt(d_t)
        att = np.exp(att - att.max(axis=1, keepdims=True))
        att /= att.sum(axis=1, keepdims=True)
        pooled = (att @ v + seq).mean(axis=0)
        feat = pooled @ w["txt_wp"] + w["txt_bp"]
        zp = z @ w["proj_w"]
        cos = feat @ zp / (np.linalg.norm(feat) * np.linalg.norm(zp))
        scores.append(bundle.logit_scale * cos)
    scores = np.asarray(scores)
    return classes[int(np.argmax(scores))], scores


class TestInferOracle:
    def test_matches_hand_traced_forward(self, small_dataset, bundle, dims):
        prompter = init_gaussian_prompter(dims.d_i, dims.d_t, seed=3)
        for i in [0, 17, 40]:
            x = small_dataset.x[i]
            got_cls, got_scores = infer(bundle, prompter, x, small_dataset.classes)
            want_cls, want_scores = straight_line_infer(bundle, prompter, x,
                                                        small_dataset.classes)
            assert got_cls == want_cls
            assert np.allclose(got_scores, want_scores, atol=1e-9)


class TestOfflineContract:
    def test_inference_mutates_no_files(self, small_dataset_dir, quick_config, tmp_path):
        from spdg.encoders import load_bundle
        from spdg.prompter import load_checkpoint
        from spdg.trainer import train_style_prompter
        from dataclasses import replace
        ds = datagen.load(small_dataset_dir)
        cfg = replace(quick_config, seed=2, held_out_domain="sketch",
                      out_dir=str(tmp_path / "run"))
        train_style_prompter(cfg, dataset=ds)
        run = tmp_path / "run"
        snapshot = {p: p.read_bytes() for p in run.rglob("*") if p.is_file()}
        prompter, _ = load_checkpoint(run / "final")
        bundle = load_bundle(run / "bundle")
        infer(bundle, prompter, ds.x[0], ds.classes)
        predict_batch(bundle, prompter, ds.x[:8], ds.classes)
        style_similarity_report(bundle, prompter, ds.x[:4], ds.class_ids[:4],
                                [ds.domains[d] for d in ds.domain_ids[:4]], ds.classes)
        for p, blob in snapshot.items():
            assert p.read_bytes() == blob, p


class TestZeroShot:
    def test_templates_give_different_features(self, bundle):
        from spdg.inference import zero_shot_text_features
        c = zero_shot_text_features(bundle, ["dog"], "C")
        pc = zero_shot_text_features(bundle, ["dog"], "PC")
        assert np.linalg.norm(c - pc) > 1e-6

    def test_deterministic(self, bundle, rng):
        x = rng.normal(size=bundle.dims.d_x)
        a = zero_shot_baseline(bundle, x, ["dog", "horse"], "C")
        b = zero_shot_baseline(bundle, x, ["dog", "horse"], "C")
        assert a[0] == b[0] and np.array_equal(a[1], b[1])

    def test_single_class_always_predicted(self, bundle, rng):
        cls, _ = zero_shot_baseline(bundle, rng.normal(size=bundle.dims.d_x), ["dog"], "PC")
        assert cls == "dog"

    def test_unknown_template_rejected(self, bundle, rng):
        with pytest.raises(ConfigError):
            zero_shot_baseline(bundle, rng.normal(size=bundle.dims.d_x), ["dog"], "photo")


class TestLeaveOneOut:
    def test_report_shape_and_average_identity(self, lodo_report, small_dataset_dir):
        ds = datagen.load(small_dataset_dir)
        assert lodo_report.domains == ds.domains
        for method, res in lodo_report.methods.items():
            assert set(res.per_domain) == set(ds.domains)
            assert res.average == pytest.approx(np.mean(list(res.per_domain.values())), abs=1e-12)
            for run in res.runs:
                assert 0.0 <= run["accuracy"] <= 1.0

    def test_trained_methods_tagged_with_config_hash(self, lodo_report):
        assert lodo_report.methods["gsp"].config_hash
        assert lodo_report.methods["baseline_C"].config_hash is None

    def test_parallel_equals_serial(self, small_dataset_dir, quick_config):
        serial = evaluate_leave_one_out(small_dataset_dir, ["baseline_C", "gsp"], seeds=[0],
                                        base=quick_config, threads=1)
        parallel = evaluate_leave_one_out(small_dataset_dir, ["baseline_C", "gsp"], seeds=[0],
                                          base=quick_config, threads=2)
        for method in ("baseline_C", "gsp"):
            assert serial.methods[method].per_domain == parallel.methods[method].per_domain

    def test_unknown_method_rejected(self, small_dataset_dir, quick_config):
        with pytest.raises(ConfigError):
            evaluate_leave_one_out(small_dataset_dir, ["cocoop"], seeds=[0], base=quick_config)

    def test_report_writers(self, lodo_report, tmp_path):
        write_report_json(lodo_report.to_dict(), tmp_path / "r.json")
        write_report_csv(lodo_report, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].startswith("method,")
        assert len(lines) == 1 + len(lodo_report.methods)


@pytest.fixture(scope="module")
def disjoint_test_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "disjoint"
    datagen.save(datagen.generate(n_per_cell=10, seed=11,
                                  classes=["giraffe", "house", "person"],
                                  domains=["infograph", "quickdraw", "product"]), path)
    return path


class TestCrossCategory:
    def test_runs_and_reports_both_methods(self, small_dataset_dir, disjoint_test_dir, quick_config):
        report = evaluate_cross_category(quick_config, small_dataset_dir, disjoint_test_dir)
        assert set(report.methods) == {"ours", "baseline_C"}
        assert report.domains == ["infograph", "quickdraw", "product"]
        for res in report.methods.values():
            assert set(res.per_domain) == set(report.domains)

    def test_class_overlap_rejected(self, small_dataset_dir, tmp_path, quick_config):
        overlap = tmp_path / "overlap"
        datagen.save(datagen.generate(n_per_cell=10, seed=1,
                                      classes=["dog", "house"],
                                      domains=["infograph", "quickdraw", "product"]), overlap)
        with pytest.raises(ConfigError, match="class sets overlap"):
            evaluate_cross_category(quick_config, small_dataset_dir, overlap)

    def test_domain_overlap_rejected(self, small_dataset_dir, tmp_path, quick_config):
        overlap = tmp_path / "overlap2"
        datagen.save(datagen.generate(n_per_cell=10, seed=1,
                                      classes=["giraffe", "house"],
                                      domains=["photo", "quickdraw", "product"]), overlap)
        with pytest.raises(ConfigError, match="domain sets overlap"):
            evaluate_cross_category(quick_config, small_dataset_dir, overlap)


class TestSimilarityReport:
    def test_matrix_shape_and_range(self, small_dataset, bundle, dims, tmp_path):
        prompter = init_gaussian_prompter(dims.d_i, dims.d_t, seed=0)
        idx = small_dataset.domain_indices(0)[:10]
        matrix = style_similarity_report(
            bundle, prompter, small_dataset.x[idx], small_dataset.class_ids[idx],
            [small_dataset.domains[d] for d in small_dataset.domain_ids[idx]],
            small_dataset.classes, image_ids=[int(i) for i in idx])
        assert matrix.values.shape == (10, 9)
        assert matrix.columns[-1] == "learned"
        assert len(matrix.columns) == 8 + 1
        assert (matrix.values >= -1 - 1e-12).all() and (matrix.values <= 1 + 1e-12).all()

        write_similarity_csv(matrix, tmp_path / "sim.csv")
        lines = (tmp_path / "sim.csv").read_text().splitlines()
        assert len(lines) == 11
        assert lines[0] == "image,true_domain," + ",".join(matrix.columns)


class TestAblation:
    def test_four_rows_in_order(self, small_dataset_dir, quick_config):
        table = run_ablation(small_dataset_dir, seeds=[0], base=quick_config)
        assert [r["row"] for r in table["rows"]] == ["baseline", "+BSP", "+GSP", "+GSP+SR"]
        for row in table["rows"][1:]:
            assert row["config_hash"]
        hashes = [r["config_hash"] for r in table["rows"][1:]]
        assert len(set(hashes)) == 3  # each variant is a distinct config
