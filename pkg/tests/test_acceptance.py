"""End-to-end checks. The experiment-config runs take minutes of CPU; run them with `pytest -m slow`."""

from pathlib import Path

import numpy as np
import pytest
from scipy.stats import hypergeom

from ticketlab.config import AdmmConfig, PruneConfig, TrainConfig, load_config
from ticketlab.correlation import correlation_indicator, null_band, null_expectation
from ticketlab.datasets import gen_blobs, load_dataset
from ticketlab.masking import assert_mask_invariant, mask_from_support, sparsity
from ticketlab.model import ModelSpec, init_params, mlp
from ticketlab.pruning import admm_project, admm_prune, generate_mask, per_layer_keep_counts
from ticketlab.regimes import pretrain, prune_and_finetune, rewind_train, sparse_train
from ticketlab.suite import run_regime_suite

from conftest import random_params

CONFIGS = Path(__file__).resolve().parents[1] / "experiment" / "configs"


def _suite(name, *overrides):
    config = load_config(CONFIGS / name, ["workers=1", "save_checkpoints=false", *overrides])
    model = ModelSpec.from_config(config.model)
    train_set, test_set = load_dataset(config.data)
    report = run_regime_suite(model, train_set, test_set, config)
    assert report.status == "ok", report.failed_cells
    return report.raw_frame(), report.correlation_frame()


def _rows(frame, **where):
    for key, value in where.items():
        frame = frame[frame[key] == value]
    assert len(frame) == 5
    return frame


def _seed_mean(raw, **where):
    return 100.0 * _rows(raw, **where)["accuracy"].mean()


@pytest.fixture(scope="module")
def lr_correlation():
    return _suite("lr_correlation.yaml")


def test_correlation_identity_and_calibration():
    rng = np.random.default_rng(0)
    for _ in range(20):
        params = random_params(rng, [(30, 20), (20, 10)])
        for p in (0.1, 0.2, 0.3, 0.4, 0.5):
            assert correlation_indicator(params, params, p) == 1.0

    values = np.array(
        [correlation_indicator(rng.uniform(-1, 1, 10_000), rng.uniform(-1, 1, 10_000), 0.2) for _ in range(1000)]
    )
    _, std = null_expectation(0.2, [10_000])
    assert abs(values.mean() - 0.2) <= 0.01
    assert values.std() == pytest.approx(std, rel=0.15)

    # the draws follow the hypergeometric law, so the band is held to it directly
    low, high = null_band(0.2, [10_000], trials=1_000_000, seed=1)
    law = hypergeom(10_000, 2000, 2000)
    assert law.cdf(round(high * 2000)) - law.cdf(round(low * 2000) - 1) >= 0.99


@pytest.mark.parametrize("s", [0.3, 0.5, 0.7, 0.9])
def test_mask_invariance_over_twenty_epochs(s):
    model = mlp(2, [32], 3)
    data = gen_blobs(200, 3, 2, 1.0, seed=1)
    config = TrainConfig(epochs=20, lr0=0.05, milestones=[10, 15], batch_size=32, rewind_epoch=2)
    theta_0 = init_params(model, 0)
    theta_0_prime = init_params(model, 1, purpose="reinit")
    theta_T, snapshots = pretrain(model, theta_0, data, config)
    mask = generate_mask(model, data, theta_0, theta_T, config, PruneConfig(algorithm="one_shot", target_sparsity=s))

    def check(epoch, params):
        assert assert_mask_invariant(params, mask) is None

    outputs = [
        sparse_train(model, theta_0, mask, data, config, epoch_callback=check),
        sparse_train(model, theta_0_prime, mask, data, config, epoch_callback=check),
        rewind_train(model, snapshots[2], mask, data, config, epoch_callback=check),
        prune_and_finetune(model, theta_T, mask, data, config, epoch_callback=check),
    ]
    for params in outputs:
        assert assert_mask_invariant(params, mask) is None
        # no kept weight died and no pruned one came back
        assert sparsity(mask_from_support(params, mask.exempt_names)) == sparsity(mask)
    assert sparsity(mask) == pytest.approx(1 - (64 + per_layer_keep_counts([96], s)[0]) / 160)


def test_admm_projection_beats_random_competitors():
    rng = np.random.default_rng(2)
    for _ in range(100):
        params = random_params(rng, [(12, 10)])
        x = params["layer0.weight"].ravel()
        k = int(rng.integers(1, x.size))
        best = np.linalg.norm(x - admm_project(params, [k])["layer0.weight"].ravel())
        supports = np.argsort(rng.random((1000, x.size)), axis=1)[:, :k]
        competitors = np.zeros((1000, x.size))
        np.put_along_axis(competitors, supports, x[supports], axis=1)
        assert best <= np.linalg.norm(x - competitors, axis=1).min() + 1e-12


def test_admm_residual_settles_on_logistic_regression():
    model = mlp(2, [], 2)
    data = gen_blobs(400, 2, 2, 1.5, seed=3)
    config = TrainConfig(epochs=10, lr0=0.1, milestones=[], batch_size=50)
    theta_T, _ = pretrain(model, init_params(model, 0), data, config)
    prune = PruneConfig(
        algorithm="admm", target_sparsity=0.5, exempt_first=False,
        admm=AdmmConfig(rho=1.0, outer_iters=6, inner_epochs=200, lr=0.02, inner_batch_size=len(data)),
    )
    states = []
    mask = admm_prune(model, data, theta_T, config, prune, state_out=states)
    residuals = states[0].residuals
    assert len(residuals) == 6
    assert residuals[-1] <= residuals[-2] + 1e-9
    assert mask.kept_counts() == [2]


@pytest.mark.slow
def test_learning_rate_controls_init_correlation(lr_correlation):
    _, corr = lr_correlation
    corr = corr[(corr["a"] == "theta0") & (corr["b"] == "thetaT") & (corr["p"] == 0.2)]
    high = _rows(corr, lr0=0.1).set_index("seed")["r_p"]
    low = _rows(corr, lr0=0.01).set_index("seed")["r_p"]
    assert (low > high).sum() >= 4
    assert (high - 0.2).abs().max() <= 0.05


@pytest.mark.slow
def test_winning_property_needs_a_low_learning_rate():
    raw, _ = _suite("winning_property.yaml")
    low_gap = _seed_mean(raw, lr0=0.01, regime="ticket") - _seed_mean(raw, lr0=0.01, regime="reinit")
    high_gap = _seed_mean(raw, lr0=0.1, regime="ticket") - _seed_mean(raw, lr0=0.1, regime="reinit")
    assert low_gap > 0.5
    assert abs(high_gap) <= 0.5


@pytest.mark.slow
def test_finetuning_beats_sparse_training():
    raw, _ = _suite("finetune_vs_sparse.yaml")
    for algorithm in ("one_shot", "iterative", "admm"):
        for s in (0.3, 0.5, 0.7):
            finetune = _seed_mean(raw, algorithm=algorithm, sparsity=s, regime="finetune")
            ticket = _seed_mean(raw, algorithm=algorithm, sparsity=s, regime="ticket")
            assert finetune >= ticket
    assert _seed_mean(raw, algorithm="admm", sparsity=0.7, regime="finetune") >= _seed_mean(
        raw, algorithm="one_shot", sparsity=0.7, regime="finetune"
    )


@pytest.mark.slow
def test_finetuned_ticket_forgets_theta0_but_not_thetaT(lr_correlation):
    raw, _ = lr_correlation
    rows = _rows(raw, lr0=0.1, regime="finetune", algorithm="one_shot", sparsity=0.5)
    assert abs(rows["r_theta0"].mean() - 0.2) <= 0.05
    assert rows["r_thetaT"].mean() >= 0.35


@pytest.mark.slow
def test_rewinding_sits_between_ticket_and_finetune():
    raw, _ = _suite("rewind.yaml")
    finetune = _seed_mean(raw, regime="finetune")
    rewind = _seed_mean(raw, regime="rewind")
    ticket = _seed_mean(raw, regime="ticket")
    assert finetune >= rewind >= ticket
    assert finetune - ticket > 0.5
