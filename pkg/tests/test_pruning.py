from dataclasses import replace

import numpy as np
import pytest

from ticketlab import pruning
from ticketlab.config import AdmmConfig, PruneConfig
from ticketlab.errors import ConfigurationError
from ticketlab.masking import Mask, per_layer_sparsity
from ticketlab.model import ParamEntry, ParamSet
from ticketlab.pruning import (
    admm_inner_config,
    admm_project,
    admm_prune,
    generate_mask,
    iterative_prune,
    keep_count,
    load_pruner,
    one_shot_prune,
    per_layer_keep_counts,
    per_round_rate,
    topk_mask,
)
from ticketlab.regimes import pretrain, sparse_train, train

from conftest import random_params


class TestKeepCounts:
    @pytest.mark.parametrize("size, s, expected", [(1000, 0.5, 500), (10, 0.99, 1), (10, 0.0, 10), (3, 0.5, 2)])
    def test_rounding(self, size, s, expected):
        assert per_layer_keep_counts([size], s) == [expected]

    def test_exempt_layer_keeps_everything(self):
        assert per_layer_keep_counts([100, 200], 0.9, [True, False]) == [100, 20]

    def test_half_rounds_up(self):
        assert keep_count(5, 0.5) == 3

    def test_bad_sparsity(self):
        with pytest.raises(ConfigurationError):
            per_layer_keep_counts([10], 1.0)


class TestTopK:
    def test_magnitude_order(self):
        mask = topk_mask(np.array([0.3, -0.1, 0.4, 0.05, -0.2, 0.6]), 3)
        assert mask.astype(int).tolist() == [1, 0, 1, 0, 0, 1]

    def test_ties_go_to_smaller_index(self):
        assert topk_mask(np.ones(4), 2).astype(int).tolist() == [1, 1, 0, 0]

    def test_full_k(self):
        assert topk_mask(np.zeros((2, 3)), 6).all()

    @pytest.mark.parametrize("c", [3.0, -0.5, 1e-3])
    def test_scale_invariance(self, c):
        w = np.random.default_rng(0).standard_normal((7, 9))
        np.testing.assert_array_equal(topk_mask(c * w, 20), topk_mask(w, 20))
        assert topk_mask(w, 20).sum() == 20

    def test_candidates(self):
        values = np.array([9.0, 1.0, 8.0, 2.0])
        mask = topk_mask(values, 1, candidates=np.array([False, True, False, True]))
        assert mask.astype(int).tolist() == [0, 0, 0, 1]
        with pytest.raises(ConfigurationError):
            topk_mask(values, 3, candidates=np.array([False, True, False, True]))


class TestOneShot:
    def test_zero_sparsity(self, theta_0):
        mask = one_shot_prune(theta_0, PruneConfig(algorithm="one_shot", target_sparsity=0.0))
        assert all(m.all() for _, m in mask.entries)

    def test_per_layer_sort_oracle(self):
        params = random_params(np.random.default_rng(3), [(5, 8), (8, 6)])
        mask = one_shot_prune(params, PruneConfig(algorithm="one_shot", target_sparsity=0.5, exempt_first=False))
        for entry, (_, m) in zip(params.prunable(), mask.entries):
            flat = np.abs(entry.value).ravel()
            k = entry.value.size // 2
            threshold = np.sort(flat)[::-1][k - 1]
            np.testing.assert_array_equal(m.ravel(), flat >= threshold)
        assert per_layer_sparsity(mask) == [0.5, 0.5]

    def test_first_layer_exempt(self, theta_0, half_prune):
        mask = one_shot_prune(theta_0, half_prune)
        assert mask.kept_counts() == [16, 32, 12]
        assert mask.exempt_names == frozenset({"layer0.weight"})

    def test_negation_symmetry(self, theta_0, half_prune):
        assert one_shot_prune(theta_0.scale(-1.0), half_prune).equals(one_shot_prune(theta_0, half_prune))


class TestIterative:
    def test_per_round_rate(self):
        assert per_round_rate(0.488, 3) == pytest.approx(0.2)
        assert (1 - per_round_rate(0.488, 3)) ** 3 == pytest.approx(0.512)

    def test_single_round_matches_one_shot(self, tiny_model, blobs, theta_0, fast_train):
        config = PruneConfig(algorithm="iterative", target_sparsity=0.6, rounds=1)
        trained = sparse_train(tiny_model, theta_0, Mask.ones(theta_0), blobs, fast_train)
        expected = one_shot_prune(trained, replace(config, algorithm="one_shot"))
        assert iterative_prune(tiny_model, blobs, theta_0, fast_train, config).equals(expected)

    def test_reuses_pretrained_weights(self, tiny_model, blobs, theta_0, fast_train):
        config = PruneConfig(algorithm="iterative", target_sparsity=0.6, rounds=1)
        theta_T, _ = pretrain(tiny_model, theta_0, blobs, fast_train)
        a = iterative_prune(tiny_model, blobs, theta_0, fast_train, config, theta_T=theta_T)
        b = iterative_prune(tiny_model, blobs, theta_0, fast_train, config)
        assert a.equals(b)

    def test_masks_are_nested(self, tiny_model, blobs, theta_0, fast_train):
        config = PruneConfig(algorithm="iterative", target_sparsity=0.488, rounds=3, round_epochs=1)
        history = []
        final = iterative_prune(tiny_model, blobs, theta_0, fast_train, config, history=history)
        assert len(history) == 3 and history[-1] is final
        previous = Mask.ones(theta_0)
        for mask in history:
            for (_, inner), (_, outer) in zip(mask.entries, previous.entries):
                assert not (inner & ~outer).any()
            previous = mask
        assert final.kept_counts() == [16] + per_layer_keep_counts([64, 24], 0.488)


class TestAdmm:
    def test_projection_example(self):
        params = ParamSet([ParamEntry("layer0.weight", np.array([1.0, -3.0, 2.0, 0.5]), True)])
        np.testing.assert_array_equal(admm_project(params, [2])["layer0.weight"], [0.0, -3.0, 2.0, 0.0])

    def test_projection_fixed_point(self):
        params = ParamSet([ParamEntry("layer0.weight", np.array([0.0, -3.0, 2.0, 0.0]), True)])
        np.testing.assert_array_equal(admm_project(params, [2])["layer0.weight"], params["layer0.weight"])

    def test_projection_is_optimal(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(40)
        k = 10
        z = admm_project(ParamSet([ParamEntry("layer0.weight", x, True)]), [k])["layer0.weight"]
        best = np.linalg.norm(x - z)
        for _ in range(1000):
            y = np.zeros_like(x)
            support = rng.choice(x.size, size=k, replace=False)
            y[support] = x[support] + rng.normal(0.0, 0.1, size=k) * rng.integers(0, 2)
            assert best <= np.linalg.norm(x - y) + 1e-12

    def test_exempt_and_bias_untouched(self, theta_0):
        z = admm_project(theta_0, [16, 1, 1], frozenset({"layer0.weight"}))
        np.testing.assert_array_equal(z["layer0.weight"], theta_0["layer0.weight"])
        assert np.count_nonzero(z["layer2.weight"]) == 1

    def test_no_movement_equals_one_shot(self, tiny_model, blobs, theta_0, fast_train):
        theta_T, _ = pretrain(tiny_model, theta_0, blobs, fast_train)
        config = PruneConfig(algorithm="admm", target_sparsity=0.7, admm=AdmmConfig(outer_iters=1, inner_epochs=0))
        mask = admm_prune(tiny_model, blobs, theta_T, fast_train, config)
        assert mask.equals(one_shot_prune(theta_T, config))

    def test_keep_counts_are_exact(self, tiny_model, blobs, theta_0, fast_train):
        config = PruneConfig(algorithm="admm", target_sparsity=0.75, admm=AdmmConfig(outer_iters=2, inner_epochs=1))
        mask = admm_prune(tiny_model, blobs, theta_0, fast_train, config)
        assert mask.kept_counts() == [16, 16, 6]

    def test_momentum_carries_across_outer_iterations(self, monkeypatch, tiny_model, blobs, theta_0, fast_train):
        calls = []

        def recording_train(*args, velocity=None, **kwargs):
            result = train(*args, velocity=velocity, **kwargs)
            calls.append((velocity, result.velocity))
            return result

        monkeypatch.setattr(pruning, "train", recording_train)
        config = PruneConfig(algorithm="admm", admm=AdmmConfig(outer_iters=3, inner_epochs=1))
        admm_prune(tiny_model, blobs, theta_0, fast_train, config)
        assert len(calls) == 3
        assert calls[0][0] is None
        for (_, handed_out), (received, _) in zip(calls, calls[1:]):
            assert received is handed_out

    def test_inner_batch_size(self, tiny_model, blobs, theta_0, fast_train):
        full = PruneConfig(algorithm="admm", admm=AdmmConfig(outer_iters=1, inner_epochs=1, inner_batch_size=len(blobs)))
        assert admm_inner_config(fast_train, full).batch_size == len(blobs)
        assert admm_inner_config(fast_train, PruneConfig(algorithm="admm")).batch_size == fast_train.batch_size
        mask = generate_mask(tiny_model, blobs, theta_0, theta_0, fast_train, full)
        assert mask.metadata["inner_batch_size"] == len(blobs)


class TestDispatch:
    def test_one_shot(self, tiny_model, blobs, theta_0, fast_train, half_prune):
        mask = generate_mask(tiny_model, blobs, theta_0, theta_0, fast_train, half_prune)
        assert mask.equals(one_shot_prune(theta_0, half_prune))
        assert mask.metadata["algorithm"] == "one_shot"
        assert mask.metadata["mask_epochs"] == 0
        assert len(mask.metadata["config_digest"]) == 64

    def test_admm_metadata(self, tiny_model, blobs, theta_0, fast_train):
        config = PruneConfig(algorithm="admm", admm=AdmmConfig(rho=0.05, outer_iters=2, inner_epochs=1))
        mask = generate_mask(tiny_model, blobs, theta_0, theta_0, fast_train, config)
        assert mask.metadata["rho"] == 0.05
        assert mask.metadata["outer_iters"] == 2
        assert len(mask.metadata["residuals"]) == 2
        assert mask.metadata["mask_epochs"] == 2

    def test_iterative_metadata(self, tiny_model, blobs, theta_0, fast_train):
        config = PruneConfig(algorithm="iterative", target_sparsity=0.36, rounds=2, round_epochs=1)
        mask = generate_mask(tiny_model, blobs, theta_0, theta_0, fast_train, config)
        assert mask.metadata["rounds"] == 2
        assert mask.metadata["per_round_rate"] == pytest.approx(0.2)
        assert mask.metadata["mask_epochs"] == 2

    def test_unknown_algorithm(self):
        with pytest.raises(ConfigurationError):
            load_pruner(PruneConfig(algorithm="random"))
