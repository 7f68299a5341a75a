import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import randomize, small_model
from stablemoe_lab import tensor as T
from stablemoe_lab.exceptions import ContractError, DimensionError
from stablemoe_lab.moe import (
    ExpertBank,
    ExpertCentroids,
    RoutingDecision,
    assignment_scores,
    balance_loss,
    balance_stats,
    greedy_assign,
    moe_forward,
    sigmoid_decision,
    stage1_loss,
    stage2_forward,
    stage2_loss,
)
from stablemoe_lab.routers import DistilledRouter, freeze_router
from stablemoe_lab.tensor import Tensor


def f64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def decision_from(scores, assignment, source="stage1-greedy"):
    return sigmoid_decision(f64(scores, True), np.asarray(assignment), source)


class TestScores:
    def test_identity_centroids(self):
        h = f64([[0.0, 1.0, 0.0]])
        np.testing.assert_array_equal(assignment_scores(h, f64(np.eye(3))).values, [[0, 1, 0]])

    def test_zero_row(self):
        out = assignment_scores(f64(np.zeros((1, 4))), f64(np.random.default_rng(0).normal(size=(3, 4))))
        np.testing.assert_array_equal(out.values, np.zeros((1, 3)))

    def test_matches_matmul(self):
        rng = np.random.default_rng(1)
        h, E = rng.normal(size=(2, 5)), rng.normal(size=(3, 5))
        np.testing.assert_allclose(assignment_scores(f64(h), f64(E)).values, h @ E.T)

    def test_accepts_centroid_module(self):
        c = ExpertCentroids(np.random.default_rng(0), 3, 4)
        assert assignment_scores(Tensor(np.ones((2, 4))), c).shape == (2, 3)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            assignment_scores(f64(np.ones((2, 4))), f64(np.ones((3, 5))))


class TestGreedy:
    def test_argmax(self):
        assert greedy_assign(np.array([[0.2, 0.9]])).tolist() == [1]

    def test_tie_goes_to_lowest_index(self):
        assert greedy_assign(np.array([[0.5, 0.5]])).tolist() == [0]
        assert greedy_assign(np.array([[0.1, 0.7, 0.7, 0.7]])).tolist() == [1]

    def test_against_row_scans(self):
        s = np.random.default_rng(2).normal(size=(16, 8))
        expected = []
        for row in s:
            best = 0
            for i in range(1, 8):
                if row[i] > row[best]:
                    best = i
            expected.append(best)
        assert greedy_assign(s).tolist() == expected

    def test_needs_experts(self):
        with pytest.raises(ContractError):
            greedy_assign(np.zeros((3, 0)))


class TestMoeForward:
    def _bank(self, n=3, d=4, seed=0):
        return ExpertBank(np.random.default_rng(seed), n, d, 8, sublayers=2)

    def test_zero_output_projection_is_identity(self):
        bank = self._bank()
        h = f64(np.random.default_rng(1).normal(size=(5, 4)))
        dec = decision_from(np.random.default_rng(2).normal(size=(5, 3)), [0, 1, 2, 1, 0])
        np.testing.assert_array_equal(moe_forward(h, dec, bank).values, h.values)

    def test_zero_score_halves_expert_output(self):
        bank = self._bank()
        randomize(bank)
        h = np.random.default_rng(1).normal(size=(2, 4)).astype(np.float32)
        dec = sigmoid_decision(Tensor(np.zeros((2, 3))), [1, 1], "stage1-greedy")
        out = moe_forward(Tensor(h), dec, bank).values
        ffn = bank[1](Tensor(h)).values
        np.testing.assert_allclose(out, h + 0.5 * ffn, rtol=1e-6)

    def test_invalid_expert(self):
        bank = self._bank()
        dec = RoutingDecision(None, [0, 3], Tensor(np.ones(2)), "hash")
        with pytest.raises(IndexError):
            moe_forward(Tensor(np.zeros((2, 4))), dec, bank)

    def test_gradient_reaches_used_experts_only(self):
        bank = self._bank(n=4)
        randomize(bank)
        bank.astype(np.float64)
        E = f64(np.random.default_rng(3).normal(size=(4, 4)), True)
        h = f64(np.random.default_rng(4).normal(size=(6, 4)), True)
        scores = assignment_scores(h, E)
        dec = sigmoid_decision(scores, [0, 0, 2, 2, 0, 2], "stage1-greedy")
        T.weighted_sum(moe_forward(h, dec, bank), np.random.default_rng(5).normal(size=(6, 4))).backward()
        for i, expert in enumerate(bank.experts):
            grads = [p.grad for p in expert.parameters()]
            if i in (0, 2):
                assert any(g is not None and np.abs(g).sum() > 0 for g in grads)
            else:
                assert all(g is None or not g.any() for g in grads)
        # rows of E for experts that received no tokens stay untouched
        assert np.abs(E.grad[[0, 2]]).sum() > 0
        np.testing.assert_array_equal(E.grad[[1, 3]], 0.0)
        assert h.grad is not None

    def test_gate_path_matches_finite_differences(self):
        bank = self._bank(n=2)
        randomize(bank)
        bank.astype(np.float64)
        rng = np.random.default_rng(6)
        h = f64(rng.normal(size=(4, 4)))
        w = rng.normal(size=(4, 4))
        a = np.array([0, 1, 1, 0])

        def f(E):
            return T.weighted_sum(moe_forward(h, sigmoid_decision(assignment_scores(h, E), a, "stage1-greedy"), bank), w)

        for _ in range(10):
            assert T.grad_check(f, rng.normal(size=(2, 4))) < 1e-4


class TestBalanceLoss:
    def test_worked_instance(self):
        # alpha=0.3, N=2, loads (3, 1), every sigma = 0.5
        dec = decision_from(np.zeros((4, 2)), [0, 0, 0, 1])
        assert balance_loss(dec, 0.3).item() == pytest.approx(0.15, abs=1e-12)

    @pytest.mark.parametrize("assignment", [[0, 1, 2, 3], [3, 3, 1, 1, 0, 0, 2, 2], list(range(4)) * 5])
    def test_balanced_is_exactly_zero(self, assignment):
        scores = np.random.default_rng(len(assignment)).normal(size=(len(assignment), 4))
        assert balance_loss(decision_from(scores, assignment), 0.3).item() == 0.0

    def test_single_expert(self):
        dec = decision_from(np.random.default_rng(0).normal(size=(5, 1)), [0] * 5)
        assert balance_loss(dec, 0.3).item() == 0.0

    def test_zero_experts(self):
        dec = RoutingDecision(None, np.zeros(0), Tensor(np.zeros(0)), "stage1-greedy")
        with pytest.raises(ContractError):
            balance_loss(dec, 0.3, num_experts=0)

    def test_rejects_frozen_source(self):
        dec = decision_from(np.zeros((2, 2)), [0, 1], source="distilled-frozen")
        with pytest.raises(ContractError):
            balance_loss(dec, 0.3)

    def test_sign_rule_on_random_instances(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n, t = int(rng.integers(2, 6)), int(rng.integers(3, 30))
            scores = f64(rng.normal(size=(t, n)), True)
            a = rng.integers(0, n, size=t)
            balance_loss(sigmoid_decision(scores, a, "stage1-greedy"), 0.3).backward()
            _assert_sign_rule(scores.grad, a, n)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 5).flatmap(lambda n: st.tuples(st.just(n), st.lists(st.integers(0, n - 1), min_size=2, max_size=24))))
    def test_sign_rule_property(self, case):
        n, a = case
        a = np.asarray(a)
        scores = f64(np.linspace(-2, 2, a.size * n).reshape(a.size, n), True)
        balance_loss(sigmoid_decision(scores, a, "stage1-greedy"), 0.3).backward()
        _assert_sign_rule(scores.grad, a, n)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        a = np.array([0, 0, 0, 1, 2, 0])
        for _ in range(10):
            err = T.grad_check(lambda s: balance_loss(sigmoid_decision(s, a, "stage1-greedy"), 0.3, 3), rng.normal(size=(6, 3)))
            assert err < 1e-4


def _assert_sign_rule(grad, a, n):
    loads = np.bincount(a, minlength=n)
    mean = a.size / n
    for t, i in enumerate(a):
        if loads[i] > mean:
            assert grad[t, i] > 0
        elif loads[i] < mean:
            assert grad[t, i] < 0
        else:
            assert grad[t, i] == 0
    # only the chosen expert's score carries gradient
    mask = np.zeros_like(grad, dtype=bool)
    mask[np.arange(a.size), a] = True
    assert not grad[~mask].any()


def test_balance_stats():
    stats = balance_stats([0, 0, 0, 1], 2)
    assert stats.loads.tolist() == [3, 1]
    assert stats.mean_load == 2.0
    assert stats.max_mean_ratio == 1.5
    assert balance_stats([0, 1, 2, 3], 4).max_mean_ratio == 1.0


class TestStageLosses:
    def test_stage1_sum(self):
        assert stage1_loss(f64(1.0), f64(2.0), f64(3.0)).item() == 6.0
        assert stage1_loss(f64(4.5), f64(0.0), f64(0.0)).item() == 4.5

    def test_stage1_gradient_is_sum_of_parts(self):
        x = f64([0.3, -1.2], True)
        parts = [T.tensor_sum(T.mul(x, x)), T.tensor_sum(T.sigmoid(x)), T.tensor_sum(T.scale(x, 2.0))]
        stage1_loss(*parts).backward()
        total = x.grad.copy()
        expected = np.zeros(2)
        for make in (lambda: T.tensor_sum(T.mul(x, x)), lambda: T.tensor_sum(T.sigmoid(x)), lambda: T.tensor_sum(T.scale(x, 2.0))):
            x.zero_grad()
            make().backward()
            expected += x.grad
        np.testing.assert_allclose(total, expected)

    def test_stage2_identity(self):
        x = f64(5.545, True)
        out = stage2_loss(x)
        assert out.item() == 5.545
        out.backward()
        assert x.grad == 1.0


class TestStage2Forward:
    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        router = DistilledRouter(rng, 16, 2, 4)
        randomize(router, seed=seed, std=1.0)
        bank = ExpertBank(rng, 2, 4, 8)
        randomize(bank, seed=seed)
        E = ExpertCentroids(rng, 2, 4)
        return router, bank, E

    def test_requires_frozen_router(self):
        router, bank, E = self._setup()
        with pytest.raises(ContractError):
            stage2_forward(Tensor(np.zeros((2, 4))), router, E, bank, [1, 2])

    def test_assignment_depends_on_token_id_only(self):
        router, bank, E = self._setup()
        freeze_router(router)
        rng = np.random.default_rng(1)
        _, d1 = stage2_forward(Tensor(rng.normal(size=(3, 4))), router, E, bank, [5, 9, 5])
        _, d2 = stage2_forward(Tensor(rng.normal(size=(3, 4))), router, E, bank, [9, 5, 9])
        assert d1.assignment[0] == d1.assignment[2] == d2.assignment[1]
        assert d1.assignment[1] == d2.assignment[0] == d2.assignment[2]
        assert d1.source == "distilled-frozen"

    def test_gradients_reach_centroids_not_router(self):
        router, bank, E = self._setup()
        freeze_router(router)
        h = Tensor(np.random.default_rng(2).normal(size=(6, 4)), requires_grad=True)
        out, _ = stage2_forward(h, router, E, bank, [0, 1, 2, 3, 4, 5])
        T.weighted_sum(out, np.random.default_rng(3).normal(size=(6, 4))).backward()
        assert router.D.grad is None and router.E_hat.grad is None
        assert np.abs(E.E.grad).sum() > 0

    def test_centroid_gradient_matches_finite_differences(self):
        router, bank, _ = self._setup(seed=4)
        freeze_router(router)
        bank.astype(np.float64)
        rng = np.random.default_rng(5)
        h = f64(rng.normal(size=(5, 4)))
        w = rng.normal(size=(5, 4))
        tokens = [1, 7, 3, 3, 12]
        for _ in range(10):
            err = T.grad_check(lambda E: T.weighted_sum(stage2_forward(h, router, E, bank, tokens)[0], w), rng.normal(size=(2, 4)))
            assert err < 1e-4


class TestModelLosses:
    def test_stage1_trace_has_all_terms(self):
        model = small_model("stablemoe")
        ids = np.arange(8).reshape(1, 8)
        with T.record() as rec:
            model.loss(ids, ids + 1)
        for op in ("task_loss", "balance_loss", "distillation_loss", "stage1_loss"):
            assert rec.count(op) == 1

    def test_stage2_trace_has_no_routing_losses(self):
        model = small_model("stablemoe")
        freeze_router(model.router)
        ids = np.arange(8).reshape(1, 8)
        with T.record() as rec:
            model.loss(ids, ids + 1)
        assert rec.count("balance_loss") == 0
        assert rec.count("distillation_loss") == 0
        assert rec.count("stage2_loss") == 1
        assert rec.count("router_features") == 1

    def test_stage2_leaves_router_gradients_empty(self):
        model = small_model("stablemoe")
        randomize(model)
        freeze_router(model.router)
        ids = np.arange(8).reshape(1, 8)
        total, _, _ = model.loss(ids, ids + 1)
        total.backward()
        assert model.router.D.grad is None and model.router.E_hat.grad is None
        assert np.abs(model.centroids.E.grad).sum() > 0

    def test_full_model_stage1_gradient(self):
        """Composed stage-1 objective against central differences, routing held fixed."""
        model = small_model("stablemoe", seed=3)
        randomize(model, seed=3, std=0.2)
        model.astype(np.float64)
        ids = np.random.default_rng(0).integers(0, 32, size=(1, 8))
        forced = model.forward(ids).decision.assignment
        loss = lambda: model.loss(ids, ids + 1, forced_assignment=forced)[0]
        for param in (model.centroids.E, model.router.E_hat, model.experts[1].sublayers[0].up.weight):
            model.zero_grad()
            assert T.grad_check_parameter(loss, param, h=1e-4, coords=range(0, param.values.size, 3)) < 1e-3
