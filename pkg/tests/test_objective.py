import math

import numpy as np
import pytest

from hcc import model as md
from hcc import numerics as nm
from hcc import objective as obj
from hcc.objective import NegativeSamplingPolicy, ScoreMatrix


def sm_from_array(a, steps=None):
    a = np.asarray(a, dtype=np.float64)
    steps = np.ones(a.shape[0], dtype=np.int64) if steps is None else steps
    return ScoreMatrix(nm.tensor(a), steps)


class TestScores:
    def test_zero_weight_gives_zero_scores(self):
        assert obj.score_lower(np.ones(4), np.zeros((4, 3)), np.ones(3)) == 0.0

    def test_unit_vectors_identity(self):
        w = np.zeros((4, 3))
        w[0, 0] = 1.0
        z = np.zeros(4)
        z[0] = 1.0
        g = np.zeros(3)
        g[0] = 1.0
        assert obj.score_lower(z, w, g) == 1.0

    def test_matches_brute_force_triple_loop(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=3)
        w = rng.normal(size=(3, 3))
        g = rng.normal(size=3)
        want = sum(z[i] * w[i, j] * g[j] for i in range(3) for j in range(3))
        assert abs(obj.score_lower(z, w, g) - want) < 1e-12
        assert abs(obj.score_upper(z, w, g) - want) < 1e-12

    def test_upper_equals_lower_form(self):
        rng = np.random.default_rng(1)
        z, w, c = rng.normal(size=4), rng.normal(size=(4, 2)), rng.normal(size=2)
        assert obj.score_upper(z, w, c) == obj.score_lower(z, w, c)

    def test_shape_mismatch(self):
        with pytest.raises(nm.ShapeError):
            obj.score_lower(np.ones(3), np.zeros((4, 3)), np.ones(3))


class TestInfonceLoss:
    def test_uniform_scores_give_log_n(self):
        sm = sm_from_array(np.zeros((10, 8)))
        assert abs(float(obj.infonce_loss(sm).data) - math.log(8)) < 1e-12

    def test_dominant_positive_drives_loss_to_zero(self):
        a = np.zeros((4, 8))
        a[:, 0] = 60.0
        assert float(obj.infonce_loss(sm_from_array(a)).data) < 1e-20

    def test_matches_naive_softmax_cross_entropy(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(50, 6)) * 3
        got = float(obj.infonce_loss(sm_from_array(a)).data)
        want = 0.0
        for row in a:
            p = np.exp(row) / np.exp(row).sum()
            want += -math.log(p[0])
        want /= len(a)
        assert abs(got - want) < 1e-10

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(20, 5))
        shifted = a + rng.normal(size=(20, 1))  # per-row constant shift
        la = float(obj.infonce_loss(sm_from_array(a)).data)
        lb = float(obj.infonce_loss(sm_from_array(shifted)).data)
        assert abs(la - lb) < 1e-10
        assert obj.positive_accuracy(sm_from_array(a)) == obj.positive_accuracy(sm_from_array(shifted))

    def test_shuffling_negatives_leaves_loss_unchanged(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(20, 6))
        b = a.copy()
        for row in b:
            rng.shuffle(row[1:])
        la = float(obj.infonce_loss(sm_from_array(a)).data)
        lb = float(obj.infonce_loss(sm_from_array(b)).data)
        assert abs(la - lb) < 1e-12

    def test_needs_two_candidates(self):
        with pytest.raises(obj.ObjectiveError):
            obj.infonce_loss(sm_from_array(np.zeros((3, 1))))

    def test_non_finite_scores_rejected(self):
        a = np.zeros((2, 4))
        a[1, 2] = np.inf
        with pytest.raises(nm.NonFiniteError):
            obj.infonce_loss(sm_from_array(a))

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = rng.normal(size=(8, 4)) * rng.uniform(0.1, 10)
            assert float(obj.infonce_loss(sm_from_array(a)).data) >= 0.0


class TestPositiveAccuracy:
    def test_perfect_scores(self):
        a = np.zeros((5, 8))
        a[:, 0] = 1.0
        assert obj.positive_accuracy(sm_from_array(a)) == 1.0

    def test_uniform_ties_count_as_wrong(self):
        assert obj.positive_accuracy(sm_from_array(np.zeros((5, 8)))) == 0.0

    def test_random_scores_hit_chance_level(self):
        rng = np.random.default_rng(6)
        n_rows, n = 4000, 8
        a = rng.normal(size=(n_rows, n))
        acc = obj.positive_accuracy(sm_from_array(a))
        sigma = math.sqrt((1 / n) * (1 - 1 / n) / n_rows)
        assert abs(acc - 1 / n) < 3 * sigma + 1e-9

    def test_positive_scaling_invariance(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(30, 5))
        assert obj.positive_accuracy(sm_from_array(a)) == obj.positive_accuracy(sm_from_array(a * 7.3))

    def test_per_step_split(self):
        a = np.zeros((4, 3))
        a[:2, 0] = 1.0  # step-1 rows correct, step-2 rows ties
        steps = np.array([1, 1, 2, 2])
        by_k = obj.positive_accuracy(sm_from_array(a, steps), per_step=True)
        assert by_k == {1: 1.0, 2: 0.0}


class TestNegativeSampling:
    @pytest.mark.parametrize("source", ["mixed", "same-sequence", "cross-batch"])
    def test_negatives_never_equal_positive_position(self, source):
        rng = np.random.default_rng(8)
        policy = NegativeSamplingPolicy(n_negatives=7, source=source)
        idx = obj.draw_candidate_indices(4, 16, 3, policy, rng)
        assert idx.shape == (4 * 13, 8)
        assert np.all(idx[:, 1:] != idx[:, :1])
        assert idx.min() >= 0 and idx.max() < 4 * 16

    def test_same_sequence_stays_in_item(self):
        rng = np.random.default_rng(9)
        policy = NegativeSamplingPolicy(n_negatives=5, source="same-sequence")
        idx = obj.draw_candidate_indices(3, 10, 1, policy, rng)
        items = idx // 10
        assert np.all(items == items[:, :1])

    def test_cross_batch_leaves_item(self):
        rng = np.random.default_rng(10)
        policy = NegativeSamplingPolicy(n_negatives=5, source="cross-batch")
        idx = obj.draw_candidate_indices(3, 10, 1, policy, rng)
        items = idx // 10
        assert np.all(items[:, 1:] != items[:, :1])

    def test_default_n_is_pool_capped_at_128(self):
        policy = NegativeSamplingPolicy()
        assert policy.resolve_n(8, 128) == 128
        assert policy.resolve_n(8, 16) == 128
        assert policy.resolve_n(1, 10) == 10

    def test_draws_are_uniform_over_allowed_positions(self):
        rng = np.random.default_rng(11)
        policy = NegativeSamplingPolicy(n_negatives=400)
        idx = obj.draw_candidate_indices(1, 5, 1, policy, rng)
        # row (t=0): positive is 1, negatives uniform over {0,2,3,4}
        counts = np.bincount(idx[0, 1:], minlength=5)
        assert counts[1] == 0
        assert counts[counts > 0].min() > 60  # ~100 each


class TestStageScores:
    def make_model(self, variant="cognitive"):
        cfg = md.ModelConfig(enc_channels=6, context_dim=3, pred_steps=4, variant=variant)
        return md.build_model(cfg, seed=0, precision="float64")

    def test_shapes_and_steps(self):
        m = self.make_model()
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 1600)) * 0.5
        out = md.forward(m, x)
        sm = obj.stage_scores(out.z_s, out.g, m.heads_s,
                              NegativeSamplingPolicy(n_negatives=3), np.random.default_rng(0))
        # T=10, k=1..4 -> rows 2*(9+8+7+6)
        assert sm.scores.shape == (60, 4)
        assert set(np.unique(sm.steps)) == {1, 2, 3, 4}

    def test_first_step_scores_identical_for_any_k_budget(self):
        # negatives draw in k order, so a K=1 run reproduces the k=1 block
        m = self.make_model()
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 1600)) * 0.5
        out = md.forward(m, x)
        policy = NegativeSamplingPolicy(n_negatives=3)
        sm_full = obj.stage_scores(out.z_s, out.g, m.heads_s, policy, np.random.default_rng(42))
        sm_k1 = obj.stage_scores(out.z_s, out.g, m.heads_s, policy, np.random.default_rng(42),
                                 n_steps=1)
        rows = sm_k1.scores.shape[0]
        np.testing.assert_array_equal(sm_full.scores.data[:rows], sm_k1.scores.data)
        # and the mean loss decomposes over k without changing per-k values
        per_k_full = {}
        for k in np.unique(sm_full.steps):
            mask = sm_full.steps == k
            per_k_full[k] = float(obj.infonce_loss(
                sm_from_array(sm_full.scores.data[mask])).data)
        l_k1 = float(obj.infonce_loss(sm_k1).data)
        assert abs(per_k_full[1] - l_k1) < 1e-12

    def test_scores_match_scalar_oracle(self):
        # batched bilinear path equals the one-pair score function
        m = self.make_model()
        rng = np.random.default_rng(14)
        x = rng.normal(size=(1, 1600)) * 0.5
        out = md.forward(m, x)
        policy = NegativeSamplingPolicy(n_negatives=2)
        sm = obj.stage_scores(out.z_s, out.g, m.heads_s, policy, np.random.default_rng(1),
                              n_steps=1)
        z = out.z_s.data[0]
        g = out.g.data[0]
        # row r anchors t=r (k=1); check the positive column
        for r in [0, 3, 8]:
            want = obj.score_lower(z[r + 1], m.heads_s[0], g[r])
            assert abs(sm.scores.data[r, 0] - want) < 1e-10

    def test_total_loss_baseline_has_no_upper_component(self):
        m = self.make_model(variant="cpc-baseline")
        rng = np.random.default_rng(15)
        x = rng.normal(size=(2, 1600)) * 0.5
        out = md.forward(m, x)
        loss, metrics = obj.total_loss(m, out, NegativeSamplingPolicy(n_negatives=3),
                                       np.random.default_rng(2))
        assert "L_upper" not in metrics and "upper_acc" not in metrics
        assert metrics["L"] == metrics["L_lower"]

    def test_untrained_loss_near_logn(self):
        # at random init scores are near-uniform logits: total ~ 2 ln N
        cfg = md.ModelConfig(enc_channels=32, context_dim=16, pred_steps=4)
        m = md.build_model(cfg, seed=3, precision="float64")
        rng = np.random.default_rng(16)
        policy = NegativeSamplingPolicy(n_negatives=7)
        losses = []
        for i in range(20):
            x = rng.normal(size=(2, 2560)) * 0.5
            out = md.forward(m, x)
            loss, _ = obj.total_loss(m, out, policy, np.random.default_rng(100 + i))
            losses.append(float(loss.data))
        mean = np.mean(losses)
        assert abs(mean - 2 * math.log(8)) / (2 * math.log(8)) < 0.05

    def test_gradients_flow_to_heads_and_encoders(self):
        # window long enough that every upper-stage step has anchors
        m = self.make_model()
        rng = np.random.default_rng(17)
        x = rng.normal(size=(2, 12800)) * 0.5
        with nm.Tape() as tape:
            out = md.forward(m, x)
            loss, _ = obj.total_loss(m, out, NegativeSamplingPolicy(n_negatives=3),
                                     np.random.default_rng(3))
        grads = tape.backward(loss)
        for name, p in m.named_parameters():
            assert np.abs(grads[p]).max() > 0 or name.endswith("bias"), name
