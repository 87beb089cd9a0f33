import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdg import tensor as T
from spdg.encoders import encode_image
from spdg.errors import BatchCompositionError, ConfigError, NormalizationError
from spdg.losses import (
    LossParts,
    LossWeights,
    build_reg_anchors,
    classification_loss,
    cross_entropy_from_logits,
    domain_discrimination_loss,
    prompt_text_features,
    prompted_ce_and_reg,
    style_regularization_loss,
    total_loss,
)
from spdg.tensor import Tape, Tensor

CLASSES = ["dog", "elephant", "guitar", "horse"]


def naive_domain_loss(samples: np.ndarray, domains, tau: float) -> float:
    """Direct double-loop transcription of the contrastive ratio, the oracle."""
    n = samples.shape[0]
    total = 0.0
    for i in range(n):
        num = sum(np.exp(samples[i] @ samples[j] / tau)
                  for j in range(n) if j != i and domains[j] == domains[i])
        den = sum(np.exp(samples[i] @ samples[j] / tau)
                  for j in range(n) if j != i)
        total += -np.log(num / den)
    return total / n


def unit_rows(rng, n, d):
    s = rng.normal(size=(n, d))
    return s / np.linalg.norm(s, axis=1, keepdims=True)


def domains_with_pairs(rng, n, n_domains):
    while True:
        dom = rng.integers(0, n_domains, size=n)
        counts = np.bincount(dom, minlength=n_domains)
        if ((counts == 0) | (counts >= 2)).all():
            return dom


class TestDomainDiscriminationLoss:
    def test_two_samples_same_domain_exactly_zero(self, rng):
        s = unit_rows(rng, 2, 6)
        assert domain_discrimination_loss(Tensor(s), [0, 0], tau=0.7).item() == 0.0

    def test_hand_value_two_domains(self):
        s = Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
        val = domain_discrimination_loss(s, [0, 0, 1, 1], tau=1.0).item()
        assert val == pytest.approx(np.log(1 + 2 / np.e), abs=1e-10)

    def test_rotation_invariance(self, rng):
        s = unit_rows(rng, 12, 8)
        dom = domains_with_pairs(rng, 12, 3)
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        a = domain_discrimination_loss(Tensor(s), dom, 0.3).item()
        b = domain_discrimination_loss(Tensor(s @ q), dom, 0.3).item()
        assert abs(a - b) < 1e-10

    def test_permutation_invariance(self, rng):
        s = unit_rows(rng, 10, 5)
        dom = domains_with_pairs(rng, 10, 2)
        perm = rng.permutation(10)
        a = domain_discrimination_loss(Tensor(s), dom, 0.2).item()
        b = domain_discrimination_loss(Tensor(s[perm]), dom[perm], 0.2).item()
        assert abs(a - b) < 1e-10

    @pytest.mark.parametrize("n", [4, 16, 64, 256])
    def test_oracle_equivalence(self, n, rng):
        s = unit_rows(rng, n, 8)
        dom = domains_with_pairs(rng, n, 3)
        ours = domain_discrimination_loss(Tensor(s), dom, 0.1).item()
        assert ours == pytest.approx(naive_domain_loss(s, dom, 0.1), abs=1e-10)

    def test_anchor_without_positive_rejected(self, rng):
        s = unit_rows(rng, 3, 4)
        with pytest.raises(BatchCompositionError, match="rows"):
            domain_discrimination_loss(Tensor(s), [0, 0, 1], tau=0.5)

    def test_unnormalized_rows_rejected(self, rng):
        s = unit_rows(rng, 4, 4) * 1.01
        with pytest.raises(NormalizationError):
            domain_discrimination_loss(Tensor(s), [0, 0, 1, 1], tau=0.5)

    def test_bad_temperature_rejected(self, rng):
        with pytest.raises(ConfigError):
            domain_discrimination_loss(Tensor(unit_rows(rng, 4, 4)), [0, 0, 1, 1], tau=0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=1, max_value=3))
    def test_nonnegative_and_zero_iff_single_domain(self, seed, n_domains):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2 * n_domains, 16))
        s = unit_rows(rng, n, 6)
        dom = domains_with_pairs(rng, n, n_domains)
        val = domain_discrimination_loss(Tensor(s), dom, 0.2).item()
        assert val >= 0.0
        if len(set(dom.tolist())) == 1:
            assert val == 0.0
        else:
            assert val > 0.0


class TestRegAnchors:
    def test_unit_norm_and_deterministic(self, bundle):
        t1 = build_reg_anchors(bundle, CLASSES)
        t2 = build_reg_anchors(bundle, CLASSES)
        assert np.array_equal(t1.anchors, t2.anchors)
        norms = np.linalg.norm(t1.anchors, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-12

    def test_single_style_word_is_that_prompt(self, bundle):
        from spdg.encoders import domain_style_text, encode_text, tokenize
        table = build_reg_anchors(bundle, ["dog"], style_words=["photo"])
        ids = tokenize(domain_style_text("photo", "dog"), bundle)
        emb = bundle.weights["tok_emb"][np.asarray(ids)]
        feat = encode_text(bundle, Tensor(emb)).data
        assert np.allclose(table.anchors[0], feat / np.linalg.norm(feat), atol=1e-12)


class TestStyleRegularizationLoss:
    def _table(self, rng, d_f=48):
        anchors = unit_rows(rng, len(CLASSES), d_f)
        from spdg.losses import RegAnchorTable
        return RegAnchorTable(classes=list(CLASSES), anchors=anchors)

    def test_perfect_alignment_zero(self, rng):
        table = self._table(rng)
        labels = np.array([0, 1, 2, 3])
        feats = Tensor(table.anchors[labels] * 3.0)  # scale must not matter
        assert style_regularization_loss(feats, labels, table).item() == pytest.approx(0.0, abs=1e-12)

    def test_antipodal_two(self, rng):
        table = self._table(rng)
        labels = np.array([0, 1])
        feats = Tensor(-table.anchors[labels])
        assert style_regularization_loss(feats, labels, table).item() == pytest.approx(2.0, abs=1e-12)

    def test_orthogonal_one(self, rng):
        table = self._table(rng)
        base = table.anchors[0]
        other = rng.normal(size=base.shape)
        other -= (other @ base) * base
        feats = Tensor(other[None, :])
        assert style_regularization_loss(feats, [0], table).item() == pytest.approx(1.0, abs=1e-10)

    def test_missing_anchor_rejected(self, rng):
        table = self._table(rng)
        with pytest.raises(ConfigError):
            style_regularization_loss(Tensor(unit_rows(rng, 1, 48)), [7], table)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        table = self._table(rng)
        b = int(rng.integers(1, 9))
        labels = rng.integers(0, len(CLASSES), size=b)
        feats = Tensor(rng.normal(size=(b, 48)) * rng.uniform(0.1, 5.0))
        val = style_regularization_loss(feats, labels, table).item()
        assert 0.0 <= val <= 2.0


class TestClassificationLoss:
    def test_uniform_logits_log_c(self):
        logits = Tensor(np.zeros((3, 4)))
        val = cross_entropy_from_logits(logits, np.array([0, 1, 2])).item()
        assert val == pytest.approx(np.log(4), abs=1e-12)

    def test_single_candidate_zero(self):
        val = cross_entropy_from_logits(Tensor(np.zeros((2, 1))), np.array([0, 0])).item()
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_saturated_correct_logits(self):
        scale = 100.0
        logits = np.full((2, 4), -scale)
        logits[0, 1] = scale
        logits[1, 3] = scale
        val = cross_entropy_from_logits(Tensor(logits), np.array([1, 3])).item()
        # softmax by hand: -log(e^s / (e^s + 3 e^-s)) = log(1 + 3 e^-2s)
        assert val == pytest.approx(np.log(1 + 3 * np.exp(-2 * scale)), abs=1e-8)
        assert val < 1e-8

    def test_per_image_constant_shift_invariance(self, rng):
        logits = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        a = cross_entropy_from_logits(Tensor(logits), labels).item()
        b = cross_entropy_from_logits(Tensor(logits + rng.normal(size=(5, 1))), labels).item()
        assert abs(a - b) < 1e-10
        assert a >= 0.0

    def test_label_out_of_range_rejected(self, bundle, rng):
        z = rng.normal(size=(2, bundle.dims.d_i))
        styles = Tensor(rng.normal(size=(2, bundle.dims.d_t)))
        with pytest.raises(ConfigError):
            classification_loss(bundle, z, styles, [0, 9], CLASSES)

    def test_end_to_end_matches_manual(self, bundle, rng):
        """classification_loss equals a from-scratch softmax over per-prompt encodes."""
        from spdg.encoders import embed_tokens, encode_text, project_image, style_prompt_text, tokenize
        z = encode_image(bundle, rng.normal(size=(2, bundle.dims.d_x)))
        styles = rng.normal(size=(2, bundle.dims.d_t))
        labels = np.array([1, 2])
        ours = classification_loss(bundle, z, Tensor(styles), labels, CLASSES).item()

        total = 0.0
        for i in range(2):
            feats = []
            for cls in CLASSES:
                ids = tokenize(style_prompt_text(cls), bundle)
                emb = embed_tokens(bundle, ids, style=Tensor(styles[i]))
                feats.append(encode_text(bundle, emb).data)
            feats = np.stack(feats)
            feats /= np.linalg.norm(feats, axis=1, keepdims=True)
            zp = project_image(bundle, z[i])
            zp /= np.linalg.norm(zp)
            logits = feats @ zp * bundle.logit_scale
            total += -(logits[labels[i]] - np.log(np.exp(logits - logits.max()).sum()) - logits.max())
        assert ours == pytest.approx(total / 2, abs=1e-9)


class TestTotalLoss:
    def test_ce_only_when_weights_zero(self, rng):
        parts = LossParts(loss_ce=Tensor(np.asarray(1.25)), loss_d=Tensor(np.asarray(3.0)),
                          loss_reg=Tensor(np.asarray(0.5)))
        weights = LossWeights(w_d=0.0, w_reg=0.0)
        assert total_loss(parts, weights).item() == 1.25

    def test_doubling_w_d_adds_loss_d(self):
        parts = LossParts(loss_ce=Tensor(np.asarray(1.0)), loss_d=Tensor(np.asarray(2.0)))
        a = total_loss(parts, LossWeights(w_d=0.1, w_reg=0.0)).item()
        b = total_loss(parts, LossWeights(w_d=0.2, w_reg=0.0)).item()
        assert b - a == pytest.approx(0.1 * 2.0, abs=1e-15)

    def test_default_weights(self):
        w = LossWeights()
        assert w.w_d == 0.1
        assert w.w_reg in (1.0, 10.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(w_d=-0.1)


class TestSharedTextPass:
    def test_reg_rows_match_standalone(self, bundle, rng):
        z = encode_image(bundle, rng.normal(size=(3, bundle.dims.d_x)))
        styles = Tensor(rng.normal(size=(3, bundle.dims.d_t)))
        labels = np.array([0, 2, 1])
        anchors = build_reg_anchors(bundle, CLASSES)
        ce_shared, reg_shared = prompted_ce_and_reg(bundle, z, styles, labels, CLASSES, anchors)
        ce_alone = classification_loss(bundle, z, styles, labels, CLASSES)
        assert ce_shared.item() == pytest.approx(ce_alone.item(), abs=1e-12)

        feats = prompt_text_features(bundle, styles, CLASSES).data
        own = feats[np.arange(3) * len(CLASSES) + labels]
        reg_alone = style_regularization_loss(Tensor(own), labels, anchors)
        assert reg_shared.item() == pytest.approx(reg_alone.item(), abs=1e-12)

    def test_gradient_of_total_on_small_fixture(self, bundle, rng):
        """Full objective gradient vs finite differences on one trunk weight."""
        from spdg.gradcheck import build_objective_fixture, objective_value
        from spdg.prompter import GaussianPrompter
        fx = build_objective_fixture(batch=4, mc_samples=2, seed=11)

        def f(x):
            stand_in = GaussianPrompter(
                **{k: (x if k == "w2" else v) for k, v in fx.prompter.parameters()},
                sigma_floor=fx.prompter.sigma_floor)
            return objective_value(fx, stand_in)

        assert T.finite_diff_grad_check(f, dict(fx.prompter.parameters())["w2"], h=1e-5) < 1e-4

    def test_every_parameter_receives_nonzero_gradient(self):
        from spdg.gradcheck import build_objective_fixture, objective_value
        fx = build_objective_fixture(batch=4, mc_samples=2, seed=13)
        params = [p for _, p in fx.prompter.parameters()]
        with Tape() as tape:
            loss = objective_value(fx, fx.prompter)
        tape.backward(loss, leaves=params)
        for name, p in fx.prompter.parameters():
            assert np.abs(p.grad).max() > 0.0, name

    def test_frozen_boundary_no_gradient_into_bundle(self):
        from spdg.encoders import bundle_checksum
        from spdg.gradcheck import build_objective_fixture, objective_value
        fx = build_objective_fixture(batch=4, mc_samples=2, seed=13)
        before = bundle_checksum(fx.bundle)
        params = [p for _, p in fx.prompter.parameters()]
        with Tape() as tape:
            loss = objective_value(fx, fx.prompter)
        tape.backward(loss, leaves=params)
        # encoder weights live outside the tape entirely: plain arrays with no
        # gradient slot, byte-identical after the backward pass
        for name, w in fx.bundle.weights.items():
            assert isinstance(w, np.ndarray) and not isinstance(w, Tensor), name
        assert bundle_checksum(fx.bundle) == before
