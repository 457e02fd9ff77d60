from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equifl import checkpoint
from equifl.data import ClientDataset, Records
from equifl.errors import ConfigError, DimensionError, NumericError
from equifl.fedsim import (
    FedConfig,
    RoundState,
    aggregate,
    init_clients,
    local_training,
    run_experiment,
    run_round,
    select_clients,
    selective_init,
)
from equifl.nn import LayerParams, ModelParams, NetConfig, init_params

from reference_fedavg import reference_fedavg


def scalar(v):
    return ModelParams((LayerParams(np.array([[float(v)]]), np.array([float(v)])),))


class TestSelectClients:
    def test_full(self):
        assert select_clients(5, 1.0, np.random.default_rng(0)) == [0, 1, 2, 3, 4]

    def test_fraction(self):
        roster = select_clients(5, 0.4, np.random.default_rng(0))
        assert len(roster) == 2 == len(set(roster))

    def test_ceil_not_fooled_by_float_error(self):
        assert len(select_clients(10, 0.3, np.random.default_rng(0))) == 3

    def test_deterministic(self):
        assert select_clients(9, 0.5, np.random.default_rng(4)) == select_clients(9, 0.5, np.random.default_rng(4))


class TestSelectiveInit:
    def test_three_layers(self):
        local = init_params(NetConfig((4, 5, 3, 1), seed=1))
        local = local.map(lambda a: a + 1.0)  # nonzero biases
        glob = init_params(NetConfig((4, 5, 3, 1), seed=2)).map(lambda a: a - 1.0)
        out = selective_init(local, glob, "equifl")
        for i in (0, 1):
            np.testing.assert_array_equal(out.layers[i].weights, glob.layers[i].weights)
            np.testing.assert_array_equal(out.layers[i].bias, local.layers[i].bias)
        np.testing.assert_array_equal(out.layers[2].weights, local.layers[2].weights)
        np.testing.assert_array_equal(out.layers[2].bias, local.layers[2].bias)

    def test_single_layer_keeps_local(self):
        out = selective_init(scalar(1), scalar(2), "equifl")
        assert out.equals(scalar(1))

    def test_fedavg_copies_global(self):
        glob = init_params(NetConfig((3, 4, 1), seed=9))
        out = selective_init(init_params(NetConfig((3, 4, 1), seed=1)), glob, "fedavg")
        assert out.equals(glob) and out.layers[0].weights is not glob.layers[0].weights

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            selective_init(init_params(NetConfig((3, 4, 1))), init_params(NetConfig((3, 5, 1))), "equifl")


class TestAggregate:
    def test_weighted_mean(self):
        out = aggregate([scalar(0), scalar(4)], [1, 3])
        assert out.layers[0].weights[0, 0] == 3.0

    def test_identical_contributors(self):
        p = init_params(NetConfig((3, 4, 1), seed=3))
        out = aggregate([p, p.copy(), p.copy()], [5, 7, 11])
        for a, b in zip(out.arrays(), p.arrays()):
            np.testing.assert_allclose(a, b, rtol=1e-15, atol=1e-16)

    def test_size_scale_invariance(self):
        ps = [init_params(NetConfig((3, 4, 1), seed=s)) for s in range(3)]
        a = aggregate(ps, [3, 5, 9])
        b = aggregate(ps, [30, 50, 90])
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_allclose(x, y, rtol=1e-14, atol=1e-16)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=5), st.floats(-5, 5), st.integers(0, 100))
    def test_linearity(self, vals, k, seed):
        sizes = list(np.random.default_rng(seed).integers(1, 50, len(vals)))
        lhs = aggregate([scalar(k * v) for v in vals], sizes).layers[0].weights[0, 0]
        rhs = k * aggregate([scalar(v) for v in vals], sizes).layers[0].weights[0, 0]
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_errors(self):
        with pytest.raises(DimensionError):
            aggregate([], [])
        with pytest.raises(DimensionError):
            aggregate([scalar(1), init_params(NetConfig((3, 1)))], [1, 1])


def setup(clients, mode="equifl", mu=1.0, **kw):
    cfg = FedConfig(mode=mode, mu=mu, num_rounds=kw.pop("num_rounds", 3), batch_size=kw.pop("batch_size", 32),
                    learning_rate=kw.pop("learning_rate", 1e-2), seed=kw.pop("seed", 0), **kw)
    net = NetConfig((clients[0].train.features.shape[1], 6, 4, 1), seed=1)
    glob = init_params(net)
    return cfg, net, glob, init_clients(clients, glob, cfg)


class TestLocalTraining:
    def test_zero_learning_rate_is_noop(self, synthetic_clients):
        cfg, _, glob, states = setup(synthetic_clients(), learning_rate=0.0, local_epochs=3)
        other = glob.map(lambda a: a + 0.5)
        out = local_training(states[0], other, cfg)
        assert out.params.equals(selective_init(states[0].params, other, "equifl"))
        assert out.adam.step_count > 0

    def test_single_group_penalty_has_no_effect(self, synthetic_clients):
        c = synthetic_clients(num_clients=1)[0]
        one = lambda r: Records(r.features, np.zeros_like(r.sensitive), r.labels, r.row_ids)
        c = ClientDataset(0, one(c.train), one(c.validation), one(c.test))
        cfg, _, glob, states = setup([c], mu=3.0)
        a = local_training(states[0], glob, cfg)
        b = local_training(states[0], glob, replace(cfg, mu=0.0))
        assert a.params.equals(b.params)

    def test_inputs_untouched(self, synthetic_clients):
        cfg, _, glob, states = setup(synthetic_clients())
        before = states[0].params.copy()
        rng_state = states[0].rng.bit_generator.state
        local_training(states[0], glob, cfg)
        assert states[0].params.equals(before)
        assert states[0].rng.bit_generator.state == rng_state

    def test_non_finite_names_client(self, synthetic_clients):
        c = synthetic_clients()[1]
        bad = c.train.features.copy()
        bad[0, 0] = np.inf
        c = ClientDataset(c.client_id, Records(bad, c.train.sensitive, c.train.labels, c.train.row_ids),
                          c.validation, c.test)
        cfg, _, glob, states = setup([c], batch_size=1000)
        with pytest.raises(NumericError, match=f"client {c.client_id}, epoch 0, batch 0"):
            local_training(states[0], glob, cfg)

    def test_reset_optimizer(self, synthetic_clients):
        cfg, _, glob, states = setup(synthetic_clients(), reset_optimizer=True)
        once = local_training(states[0], glob, cfg)
        twice = local_training(once, glob, cfg)
        assert twice.adam.step_count == once.adam.step_count


class TestRounds:
    def test_single_client_global_is_its_params(self, synthetic_clients):
        cfg, _, glob, states = setup(synthetic_clients(num_clients=1))
        state, new = run_round(RoundState(0, glob), states, cfg)
        assert state.global_params.equals(new[0].params)
        assert state.roster == (new[0].client_id,)

    def test_schedule_does_not_matter(self, synthetic_clients):
        cfg, _, glob, states = setup(synthetic_clients(num_clients=4))
        s1, c1 = RoundState(0, glob), states
        s2, c2 = RoundState(0, glob), states
        with ThreadPoolExecutor(3) as pool:
            for _ in range(2):
                s1, c1 = run_round(s1, c1, cfg)
                s2, c2 = run_round(s2, c2, cfg, executor=pool, schedule=lambda r: r[::-1])
        assert s1.global_params.equals(s2.global_params)
        assert all(a.params.equals(b.params) for a, b in zip(c1, c2))

    def test_non_roster_untouched(self, synthetic_clients):
        cfg, _, glob, states = setup(synthetic_clients(n=500, num_clients=5), participation_fraction=0.4)
        state, new = run_round(RoundState(0, glob), states, cfg)
        assert len(state.roster) == 2
        for old, cur in zip(states, new):
            if old.client_id not in state.roster:
                assert cur is old
            else:
                assert not cur.params.equals(old.params)

    def test_round_past_end(self, synthetic_clients):
        cfg, _, glob, states = setup(synthetic_clients(), num_rounds=1)
        with pytest.raises(ConfigError):
            run_round(RoundState(1, glob), states, cfg)

    def test_fedavg_matches_reference(self, synthetic_clients):
        clients = synthetic_clients()
        cfg, net, glob, _ = setup(clients, mode="fedavg", mu=0.0, num_rounds=3, local_epochs=2)
        result = run_experiment(cfg, clients, net, threads=1)
        ref = reference_fedavg(clients, glob.arrays(), 3, 2, cfg.batch_size, cfg.learning_rate, cfg.seed)
        for a, b in zip(result.global_params.arrays(), ref[-1]):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


class TestExperiment:
    def test_rounds_must_be_positive(self):
        with pytest.raises(ConfigError):
            FedConfig(num_rounds=0)

    def test_history_length_and_determinism(self, synthetic_clients):
        clients = synthetic_clients()
        cfg, net, _, _ = setup(clients, num_rounds=4)
        a = run_experiment(cfg, clients, net, threads=1)
        b = run_experiment(cfg, clients, net, threads=2)
        assert [r.round_index for r in a.history] == [1, 2, 3, 4]
        assert a.global_params.equals(b.global_params)
        assert [r.to_dict() for r in a.history] == [r.to_dict() for r in b.history]

    def test_evaluate_every(self, synthetic_clients):
        clients = synthetic_clients()
        cfg, net, _, _ = setup(clients, num_rounds=5, evaluate_every=2)
        assert [r.round_index for r in run_experiment(cfg, clients, net, threads=1).history] == [2, 4, 5]

    def test_one_round(self, synthetic_clients):
        clients = synthetic_clients()
        cfg, net, _, _ = setup(clients, num_rounds=1)
        res = run_experiment(cfg, clients, net, threads=1)
        assert len(res.history) == 1 and len(res.local_params) == 3

    def test_fedavg_deploys_global(self, synthetic_clients):
        clients = synthetic_clients()
        cfg, net, _, _ = setup(clients, mode="fedavg", mu=0.0)
        rep = run_experiment(cfg, clients, net, threads=1).history[-1]
        assert rep.global_selective == rep.global_


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        p = init_params(NetConfig((7, 5, 3, 1), seed=4)).map(lambda a: a + 0.25)
        json_path, bin_path = checkpoint.save_params(tmp_path / "ck" / "global", p, {"seed": 3})
        assert bin_path.stat().st_size == sum(a.size for a in p.arrays()) * 8
        q, manifest = checkpoint.load_params(tmp_path / "ck" / "global")
        assert q.equals(p)
        assert manifest["provenance"] == {"seed": 3}
        raw = np.fromfile(bin_path, dtype="<f8")
        np.testing.assert_array_equal(raw[:35], p.layers[0].weights.ravel())
