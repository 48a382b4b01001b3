"""SGD factorization: dimension splits, init, gradients, training, estimators."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from recmf.datasets import Dataset
from recmf.exceptions import DivergenceError
from recmf.factorization import (
    MLIMF,
    RMF,
    DimensionBudget,
    HyperParameters,
    ModelParams,
    effective_eta,
    gradients,
    init_parameters,
    load_model,
    objective,
    predict_single,
    save_model,
    sgd_epoch,
    split_dimensions,
    train,
    write_trace,
)
from recmf.factors import AugmentedRatings, Factor, FactorSchema

from conftest import planted_dataset


def toy_records(
    n_users=3, n_items=3, cards=(2, 3), n_records=8, seed=0, ratings=None
) -> AugmentedRatings:
    rng = np.random.default_rng(seed)
    schema = FactorSchema(
        factors=tuple(
            Factor(f"F{j}", tuple(str(v) for v in range(c))) for j, c in enumerate(cards)
        )
    )
    users = rng.integers(0, n_users, n_records)
    items = rng.integers(0, n_items, n_records)
    values = np.column_stack([rng.integers(0, c, n_records) for c in cards]) if cards else \
        np.empty((n_records, 0), dtype=np.int32)
    if ratings is None:
        ratings = rng.integers(1, 6, n_records).astype(float)
    return AugmentedRatings(
        name="toy", users=users, items=items, ratings=np.asarray(ratings, dtype=float),
        timestamps=np.arange(n_records), values=values, schema=schema,
        n_users=n_users, n_items=n_items,
    )


class TestSplitDimensions:
    def test_extracted_f50(self):
        b = split_dimensions(50, "extracted-features")
        assert b.f_item == 20 and b.f_factor == (10, 10, 10)

    def test_temporal_f50(self):
        b = split_dimensions(50, "temporal")
        assert b.f_item == 20 and b.f_factor == (30,)

    def test_extracted_f20(self):
        b = split_dimensions(20, "extracted-features")
        assert b.f_item == 8 and b.f_factor == (4, 4, 4)
        assert b.total == 20

    def test_below_minimum(self):
        with pytest.raises(ValueError):
            split_dimensions(4, "extracted-features")
        with pytest.raises(ValueError):
            split_dimensions(1, "temporal")

    def test_unknown_application(self):
        with pytest.raises(ValueError, match="unknown application"):
            split_dimensions(50, "nope")

    @given(f=st.integers(5, 500))
    @settings(max_examples=100, deadline=None)
    def test_extracted_sums_exactly(self, f):
        b = split_dimensions(f, "extracted-features")
        assert b.total == f
        assert all(d >= 1 for d in b.f_factor)
        assert b.f_item >= 1

    @given(f=st.integers(2, 500))
    @settings(max_examples=100, deadline=None)
    def test_temporal_sums_exactly(self, f):
        b = split_dimensions(f, "temporal")
        assert b.total == f
        assert b.f_factor[0] >= 1 and b.f_item >= 1


class TestInitParameters:
    def test_deterministic(self):
        b = split_dimensions(10, "temporal")
        a = init_parameters(b, 5, 6, (7,), 0.02, seed=9)
        c = init_parameters(b, 5, 6, (7,), 0.02, seed=9)
        for x, y in ((a.P, c.P), (a.Q, c.Q), (a.UF, c.UF), (a.VF, c.VF)):
            np.testing.assert_array_equal(x, y)

    def test_distribution(self):
        sigma = 0.02
        p = init_parameters(DimensionBudget(100), 100, 0, (), sigma, seed=1)
        draws = p.P.ravel()
        assert draws.size == 10_000
        big = init_parameters(DimensionBudget(1000), 1000, 0, (), sigma, seed=1).P.ravel()
        assert big.size == 1_000_000
        assert abs(big.mean()) < 4 * sigma / 1000
        assert abs(big.std() - sigma) < 0.01 * sigma

    def test_bad_sigma(self):
        with pytest.raises(ValueError, match="sigma"):
            init_parameters(DimensionBudget(2), 2, 2, (), 0.0, seed=0)

    def test_cardinality_mismatch(self):
        with pytest.raises(ValueError):
            init_parameters(split_dimensions(10, "temporal"), 2, 2, (), 0.02, 0)

    def test_block_views(self):
        b = split_dimensions(20, "extracted-features")
        p = init_parameters(b, 4, 5, (2, 3, 4), 0.02, seed=0)
        assert p.P.shape == (4, 8) and p.Q.shape == (5, 8)
        assert p.user_factor(0).shape == (4, 4)
        assert p.value_factor(2).shape == (4, 4)
        # views alias the flat storage
        p.user_factor(1)[0, 0] = 99.0
        assert p.UF[0, 4] == 99.0


class TestPredictSingle:
    def test_zero_params(self):
        p = init_parameters(DimensionBudget(3), 2, 2, (), 0.02, 0)
        p.P[:] = 0
        p.Q[:] = 0
        assert predict_single(p, 0, 1) == 0.0

    def test_hand_example(self):
        p = init_parameters(DimensionBudget(1, (1,)), 1, 1, (1,), 0.02, 0)
        p.P[0, 0] = 2.0
        p.Q[0, 0] = 3.0
        p.user_factor(0)[0, 0] = 1.0
        p.value_factor(0)[0, 0] = 4.0
        assert predict_single(p, 0, 0, [0]) == pytest.approx(10.0, abs=1e-15)

    def test_matches_brute_force(self):
        rec = toy_records(n_users=4, n_items=5, cards=(3, 2), n_records=12, seed=2)
        b = DimensionBudget(4, (2, 3))
        p = init_parameters(b, 4, 5, (3, 2), 0.5, seed=5)
        for k in range(len(rec)):
            u, i = int(rec.users[k]), int(rec.items[k])
            vals = rec.values[k]
            expect = sum(p.P[u, a] * p.Q[i, a] for a in range(4))
            for j, v in enumerate(vals):
                uf, vf = p.user_factor(j), p.value_factor(j)
                expect += sum(uf[u, a] * vf[v, a] for a in range(uf.shape[1]))
            assert predict_single(p, u, i, vals) == pytest.approx(expect, abs=1e-12)

    def test_wrong_factor_count(self):
        p = init_parameters(DimensionBudget(2), 2, 2, (), 0.02, 0)
        with pytest.raises(ValueError, match="factor"):
            predict_single(p, 0, 0, [1])


class TestSgdEpoch:
    def test_zero_error_zero_lambda_is_noop(self):
        rec = toy_records(cards=(2,), n_records=1, seed=3)
        p = init_parameters(DimensionBudget(3, (2,)), 3, 3, (2,), 0.1, seed=4)
        r = predict_single(p, int(rec.users[0]), int(rec.items[0]), rec.values[0])
        rec.ratings[0] = r
        before = p.copy()
        sgd_epoch(p, rec, HyperParameters(lam=0.0, gamma=0.01, eta=0.01))
        np.testing.assert_array_equal(p.P, before.P)
        np.testing.assert_array_equal(p.Q, before.Q)
        np.testing.assert_array_equal(p.UF, before.UF)
        np.testing.assert_array_equal(p.VF, before.VF)

    def test_hand_update(self):
        rec = toy_records(n_users=1, n_items=1, cards=(), n_records=1, ratings=[5.0])
        p = init_parameters(DimensionBudget(1), 1, 1, (), 0.02, 0)
        p.P[0, 0] = 1.0
        p.Q[0, 0] = 2.0
        rmse = sgd_epoch(p, rec, HyperParameters(lam=0.01, gamma=0.01))
        assert p.P[0, 0] == pytest.approx(1.0599, abs=1e-12)
        assert p.Q[0, 0] == pytest.approx(2.0298, abs=1e-12)
        assert rmse == pytest.approx(3.0, abs=1e-12)  # pre-update residual

    def test_divergence_names_epoch(self):
        rec = toy_records(n_users=1, n_items=1, cards=(), n_records=12, ratings=[5.0] * 12)
        rec.users[:] = 0
        rec.items[:] = 0
        p = init_parameters(DimensionBudget(1), 1, 1, (), 0.1, 0)
        with pytest.raises(DivergenceError, match="epoch 7"):
            sgd_epoch(p, rec, HyperParameters(lam=0.0, gamma=1e10), epoch_index=7)

    def test_update_direction_equals_negative_gradient(self):
        # one sample: the SGD step must be exactly -(lr x per-sample gradient)
        rec = toy_records(n_users=2, n_items=2, cards=(2, 2), n_records=1, seed=6)
        b = DimensionBudget(3, (2, 2))
        p = init_parameters(b, 2, 2, (2, 2), 0.3, seed=7)
        before = p.copy()
        g = gradients(before, rec, lam=0.01)
        hp = HyperParameters(lam=0.01, gamma=0.004, eta=0.002)
        sgd_epoch(p, rec, hp)
        np.testing.assert_allclose(p.P - before.P, -hp.gamma * g.P, atol=1e-14)
        np.testing.assert_allclose(p.Q - before.Q, -hp.gamma * g.Q, atol=1e-14)
        np.testing.assert_allclose(p.UF - before.UF, -hp.eta * g.UF, atol=1e-14)
        np.testing.assert_allclose(p.VF - before.VF, -hp.eta * g.VF, atol=1e-14)

    def test_regularization_pull(self):
        rec = toy_records(n_users=3, n_items=3, cards=(2, 3), n_records=1, seed=8)
        b = DimensionBudget(4, (2, 2))
        p = init_parameters(b, 3, 3, (2, 3), 0.3, seed=9)
        u, i = int(rec.users[0]), int(rec.items[0])
        rec.ratings[0] = predict_single(p, u, i, rec.values[0])  # e = 0
        before = p.copy()
        hp = HyperParameters(lam=0.5, gamma=0.01, eta=0.02)
        sgd_epoch(p, rec, hp)
        np.testing.assert_allclose(p.P[u], before.P[u] * (1 - 0.01 * 0.5), rtol=1e-13)
        np.testing.assert_allclose(p.Q[i], before.Q[i] * (1 - 0.01 * 0.5), rtol=1e-13)
        for j in range(2):
            v = int(rec.values[0, j])
            np.testing.assert_allclose(
                p.user_factor(j)[u], before.user_factor(j)[u] * (1 - 0.02 * 0.5), rtol=1e-13
            )
            np.testing.assert_allclose(
                p.value_factor(j)[v], before.value_factor(j)[v] * (1 - 0.02 * 0.5), rtol=1e-13
            )

    def test_descent_on_repeated_sample(self):
        rec = toy_records(n_users=1, n_items=1, cards=(1,), n_records=10, ratings=[4.5] * 10)
        rec.users[:] = 0
        rec.items[:] = 0
        rec.values[:] = 0
        p = init_parameters(DimensionBudget(2, (2,)), 1, 1, (1,), 0.1, seed=10)
        e0 = 4.5 - predict_single(p, 0, 0, [0])
        sgd_epoch(p, rec, HyperParameters(lam=0.0, gamma=1e-4, eta=1e-4))
        e1 = 4.5 - predict_single(p, 0, 0, [0])
        assert e1**2 < e0**2

    def test_factor_count_mismatch(self):
        rec = toy_records(cards=(2,))
        p = init_parameters(DimensionBudget(3), 3, 3, (), 0.02, 0)
        with pytest.raises(ValueError, match="factor block"):
            sgd_epoch(p, rec, HyperParameters())


class TestGradientOracle:
    def test_finite_differences(self):
        rec = toy_records(n_users=4, n_items=4, cards=(3, 3), n_records=10, seed=11)
        b = DimensionBudget(4, (2, 2))
        p = init_parameters(b, 4, 4, (3, 3), 0.4, seed=12)
        lam = 0.03
        g = gradients(p, rec, lam)
        h = 1e-5
        rng = np.random.default_rng(13)
        blocks = [(p.P, g.P), (p.Q, g.Q), (p.UF, g.UF), (p.VF, g.VF)]
        checked = 0
        for arr, grad in blocks:
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for idx in rng.choice(flat.size, size=min(12, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                jp = objective(p, rec, lam)
                flat[idx] = orig - h
                jm = objective(p, rec, lam)
                flat[idx] = orig
                fd = (jp - jm) / (2 * h)
                denom = max(abs(fd), abs(gflat[idx]), 1e-8)
                assert abs(fd - gflat[idx]) / denom < 1e-4
                checked += 1
        assert checked >= 40


class TestEffectiveEta:
    def test_schedule(self):
        hp = HyperParameters(eta=0.01, eta_decay=0.9, eta_decay_start=5)
        assert effective_eta(hp, 1) == 0.01
        assert effective_eta(hp, 5) == 0.01
        assert effective_eta(hp, 6) == pytest.approx(0.009)
        assert effective_eta(hp, 8) == pytest.approx(0.01 * 0.9**3)


def rank2_grid() -> AugmentedRatings:
    A = np.array([[1, 0], [0, 1], [1, 1], [0.5, 0.5], [1.5, 0.5]])
    B = np.array([[2, 1], [1, 2], [1.5, 1.5], [2, 2], [1, 1]])
    R = A @ B.T
    us, its = np.meshgrid(np.arange(5), np.arange(5), indexing="ij")
    ds = Dataset(
        "rank2", us.ravel(), its.ravel(), R.ravel(), np.arange(25), 5, 5
    )
    return AugmentedRatings.plain(ds)


class TestTrain:
    def test_overfits_exact_rank2(self):
        rec = rank2_grid()
        hp = HyperParameters(
            f=2, lam=0.0, gamma=0.05, max_epochs=2000, patience=25,
            init_sigma=0.1, seed=1, clamp_predictions=False,
        )
        params, trace = train(rec, rec, DimensionBudget(2), hp)
        assert trace[-1].train_rmse < 0.05 or min(t.val_rmse for t in trace) < 0.05
        assert min(t.val_rmse for t in trace) < 0.05

    def test_best_snapshot_contract(self):
        rec = toy_records(n_users=6, n_items=6, cards=(2,), n_records=30, seed=14)
        val = toy_records(n_users=6, n_items=6, cards=(2,), n_records=10, seed=15)
        hp = HyperParameters(f=4, max_epochs=15, patience=2, seed=3)
        params, trace = train(rec, val, DimensionBudget(2, (2,)), hp)
        from recmf.factorization import predict_records, seen_masks

        su, si, sv = seen_masks(rec)
        pred = predict_records(
            params, val.users, val.items, val.values, su, si, sv,
            float(rec.ratings.mean()), clamp=False,  # the monitor is unclamped
        )
        got = float(np.sqrt(np.mean((pred - val.ratings) ** 2)))
        assert got == pytest.approx(min(t.val_rmse for t in trace), abs=1e-12)

    def test_patience_zero_stops_at_first_non_improving(self):
        rec = toy_records(n_users=6, n_items=6, cards=(), n_records=40, seed=16)
        val = toy_records(n_users=6, n_items=6, cards=(), n_records=12, seed=17)
        hp = HyperParameters(f=3, max_epochs=60, patience=0, seed=4)
        _, trace = train(rec, val, DimensionBudget(3), hp)
        vals = [t.val_rmse for t in trace]
        # every epoch but the last strictly improved; the last one failed to
        for a, b in zip(vals, vals[1:-1]):
            assert b < a
        if len(vals) < 60:  # stopped early
            assert vals[-1] >= min(vals[:-1])

    def test_empty_validation_rejected(self):
        rec = toy_records(n_records=5, seed=0)
        with pytest.raises(ValueError):
            train(
                rec, rec.subset(np.array([], dtype=int)), DimensionBudget(2, (2, 3)),
                HyperParameters(),
            )

    def test_determinism(self):
        rec = toy_records(n_users=8, n_items=8, cards=(3,), n_records=50, seed=18)
        val = toy_records(n_users=8, n_items=8, cards=(3,), n_records=10, seed=19)
        hp = HyperParameters(f=5, max_epochs=10, seed=21)
        b = DimensionBudget(3, (2,))
        p1, t1 = train(rec, val, b, hp)
        p2, t2 = train(rec, val, b, hp)
        np.testing.assert_array_equal(p1.P, p2.P)
        np.testing.assert_array_equal(p1.VF, p2.VF)
        assert t1 == t2

    def test_trace_csv(self, tmp_path):
        from recmf.factorization import TraceEntry

        trace = [TraceEntry(1, 1.25, 1.5, 0.01), TraceEntry(2, 1.0, 1.4, 0.009)]
        path = tmp_path / "trace.csv"
        write_trace(trace, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_rmse,val_rmse,eta"
        assert lines[1] == "1,1.25,1.5,0.01"


class TestNaiveLoopOracle:
    """An independently coded plain-Python trainer must match the kernel."""

    @staticmethod
    def naive_train(params: ModelParams, rec: AugmentedRatings, lam, gamma, eta0, decay, start, n_epochs):
        nf = len(rec.schema)
        for epoch in range(1, n_epochs + 1):
            eta = eta0 * decay ** max(0, epoch - start)
            for k in range(len(rec)):
                u, i, r = int(rec.users[k]), int(rec.items[k]), float(rec.ratings[k])
                pred = 0.0
                for a in range(params.P.shape[1]):
                    pred += params.P[u, a] * params.Q[i, a]
                for j in range(nf):
                    v = int(rec.values[k, j])
                    uf, vf = params.user_factor(j), params.value_factor(j)
                    for a in range(uf.shape[1]):
                        pred += uf[u, a] * vf[v, a]
                e = r - pred
                for a in range(params.P.shape[1]):
                    pu, qi = params.P[u, a], params.Q[i, a]
                    params.P[u, a] = pu + gamma * (e * qi - lam * pu)
                    params.Q[i, a] = qi + gamma * (e * pu - lam * qi)
                for j in range(nf):
                    v = int(rec.values[k, j])
                    uf, vf = params.user_factor(j), params.value_factor(j)
                    for a in range(uf.shape[1]):
                        pud, qd = uf[u, a], vf[v, a]
                        uf[u, a] = pud + eta * (e * qd - lam * pud)
                        vf[v, a] = qd + eta * (e * pud - lam * qd)

    def test_kernel_matches_naive(self):
        rec = toy_records(n_users=5, n_items=5, cards=(2, 4), n_records=30, seed=22)
        b = DimensionBudget(3, (2, 2))
        hp = HyperParameters(lam=0.02, gamma=0.015, eta=0.01, eta_decay=0.9,
                             eta_decay_start=1, shuffle=False)
        fast = init_parameters(b, 5, 5, (2, 4), 0.2, seed=23)
        slow = fast.copy()
        for epoch in (1, 2, 3):
            sgd_epoch(fast, rec, hp, epoch_index=epoch)
        self.naive_train(slow, rec, 0.02, 0.015, 0.01, 0.9, 1, 3)
        np.testing.assert_allclose(fast.P, slow.P, atol=1e-12)
        np.testing.assert_allclose(fast.Q, slow.Q, atol=1e-12)
        np.testing.assert_allclose(fast.UF, slow.UF, atol=1e-12)
        np.testing.assert_allclose(fast.VF, slow.VF, atol=1e-12)


class TestEstimators:
    def test_rmf_fit_predict(self, planted):
        m = RMF(f=8, max_epochs=25, seed=1).fit(planted)
        pred = m.predict(planted)
        assert pred.shape == (len(planted),)
        assert np.all(pred >= 1.0) and np.all(pred <= 5.0)
        assert m.n_epochs_ == len(m.trace_)
        # learned something: beats predicting the global mean
        base = float(np.sqrt(np.mean((planted.ratings - planted.ratings.mean()) ** 2)))
        got = float(np.sqrt(np.mean((pred - planted.ratings) ** 2)))
        assert got < base

    def test_reduction_mlimf_equals_rmf(self, planted):
        a = RMF(f=6, max_epochs=12, seed=5).fit(planted)
        b = MLIMF(f=6, max_epochs=12, seed=5).fit(planted)  # no factors attached
        np.testing.assert_array_equal(a.params_.P, b.params_.P)
        np.testing.assert_array_equal(a.params_.Q, b.params_.Q)
        assert a.trace_ == b.trace_
        np.testing.assert_array_equal(a.predict(planted), b.predict(planted))

    def test_mlimf_three_factor_budget(self):
        rec = toy_records(n_users=10, n_items=10, cards=(3, 4, 2), n_records=60, seed=24)
        m = MLIMF(f=10, max_epochs=8, seed=2).fit(rec)
        assert m.budget_.f_item == 4 and m.budget_.f_factor == (2, 2, 2)
        pred = m.predict(rec)
        assert pred.shape == (60,)

    def test_mlimf_explicit_budget(self):
        rec = toy_records(n_users=6, n_items=6, cards=(2, 2), n_records=30, seed=25)
        m = MLIMF(f=6, budget=(2, (2, 2)), max_epochs=5, seed=0).fit(rec)
        assert m.budget_ == DimensionBudget(2, (2, 2))
        with pytest.raises(ValueError, match="sums to"):
            MLIMF(f=9, budget=(2, (2, 2))).fit(rec)

    def test_mlimf_factor_count_mismatch(self):
        rec = toy_records(cards=(2, 3), n_records=20, seed=26)
        with pytest.raises(ValueError, match="cannot infer"):
            MLIMF(f=10).fit(rec)  # auto split covers 0, 1, or 3 factors only
        with pytest.raises(ValueError, match="factor"):
            MLIMF(f=10, application="temporal").fit(rec)

    def test_predict_factor_mismatch(self):
        rec1 = toy_records(cards=(2,), n_records=20, seed=27)
        rec2 = toy_records(cards=(2, 2), n_records=20, seed=28)
        m = MLIMF(f=4, application="temporal", max_epochs=3).fit(rec1)
        with pytest.raises(ValueError, match="factor"):
            m.predict(rec2)

    def test_cold_start_unknown_user(self, planted):
        m = RMF(f=4, max_epochs=5, seed=0).fit(planted)
        got = m.predict_one(planted.n_users + 50, 0)
        assert got == pytest.approx(
            np.clip(m.global_mean_, 1, 5), abs=1e-12
        )

    def test_cold_start_unknown_item(self, planted):
        m = RMF(f=4, max_epochs=5, seed=0, clamp_predictions=False).fit(planted)
        # known user, unknown item, no factors: every term omitted -> raw 0
        assert m.predict_one(0, planted.n_items + 9) == 0.0

    def test_clamp_toggle(self, planted):
        clamped = RMF(f=4, max_epochs=5, seed=0).fit(planted).predict(planted)
        raw = RMF(f=4, max_epochs=5, seed=0, clamp_predictions=False).fit(planted).predict(planted)
        assert np.all(clamped >= 1) and np.all(clamped <= 5)
        np.testing.assert_allclose(np.clip(raw, 1, 5), clamped)

    def test_explicit_validation(self, planted):
        val_idx = np.arange(0, len(planted.users), 10)
        tr_idx = np.setdiff1d(np.arange(len(planted.users)), val_idx)
        from recmf.factors import AugmentedRatings as AR

        rec = AR.plain(planted)
        m = RMF(f=4, max_epochs=6, seed=0).fit(rec.subset(tr_idx), validation=rec.subset(val_idx))
        assert len(m.trace_) >= 1

    def test_sklearn_params_round_trip(self):
        m = MLIMF(f=12, lam=0.05, eta=0.002)
        c = clone(m)
        assert c.get_params() == m.get_params()
        c.set_params(f=7)
        assert c.f == 7 and m.f == 12

    def test_validation_fraction_too_large(self):
        rec = toy_records(n_records=3, seed=29)
        with pytest.raises(ValueError, match="carve"):
            RMF(validation_fraction=1.0).fit(rec)


class TestModelArtifact:
    @pytest.mark.filterwarnings("ignore:factor .* has cardinality")
    def test_round_trip(self, tmp_path, planted):
        from recmf.factors import extract_temporal_factor

        ds = planted_dataset(n_users=20, n_items=15, seed=3)
        rec = extract_temporal_factor(ds)
        m = MLIMF(f=6, max_epochs=6, seed=8).fit(rec)
        path = tmp_path / "model.npz"
        save_model(m, path)
        back = load_model(path)
        assert type(back) is MLIMF
        assert back.get_params() == m.get_params()
        np.testing.assert_array_equal(back.params_.P, m.params_.P)
        np.testing.assert_array_equal(back.params_.VF, m.params_.VF)
        np.testing.assert_array_equal(back.seen_value_, m.seen_value_)
        assert back.trace_ == m.trace_
        assert back.schema_ == m.schema_
        np.testing.assert_array_equal(back.predict(rec), m.predict(rec))
