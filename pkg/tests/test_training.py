"""Adam optimizer, the training loop, and the experiment drivers."""

import json

import numpy as np
import pytest

from cnagnn.autodiff import Parameter
from cnagnn.cna import ALL_STEPS
from cnagnn.errors import ContractError
from cnagnn.graphs import SbmParams
from cnagnn.training import (
    Adam,
    AdamState,
    TrainConfig,
    ablation_run,
    adam_step,
    depth_sweep,
    parse_subset,
    subset_label,
    train,
    write_metrics_csv,
)

SBM = SbmParams(num_nodes=60, num_blocks=3, p_in=0.4, p_out=0.05, feature_dim=6,
                block_mean_separation=3.0, feature_noise_sigma=1.0, seed=11)


def small_config(**kw):
    base = dict(sbm=SBM, arch="gcn", num_layers=2, hidden=8, activation="relu",
                clusters=3, epochs=15, lr=1e-2, lr_act=1e-2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Parameter(np.array([[1.0, -2.0]]))
        p.grad = np.zeros_like(p.data)
        opt = Adam([p], lr=0.1)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_closed_form(self):
        # With bias correction, the first update is -lr * g / (|g| + eps).
        g = np.array([[0.3, -1.2, 4.0]])
        p = Parameter(np.zeros((1, 3)))
        p.grad = g.copy()
        opt = Adam([p], lr=0.05)
        opt.step()
        expect = -0.05 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.data, expect, rtol=1e-12)

    def test_coupled_weight_decay_adds_to_gradient(self):
        theta = np.array([[2.0]])
        p1 = Parameter(theta.copy())
        p1.grad = np.array([[0.5]])
        p2 = Parameter(theta.copy())
        p2.grad = np.array([[0.5 + 0.1 * 2.0]])
        Adam([p1], lr=0.01, weight_decay=0.1).step()
        Adam([p2], lr=0.01, weight_decay=0.0).step()
        np.testing.assert_allclose(p1.data, p2.data, rtol=1e-15)

    def test_matches_hand_rolled_scalar_trace(self):
        # Ten steps of textbook Adam on a scalar, agreement below 1e-12.
        lr, b1, b2, eps = 0.02, 0.9, 0.999, 1e-8
        theta = 1.5
        m = v = 0.0
        p = Parameter(np.array([[1.5]]))
        opt = Adam([p], lr=lr, lr_act=lr)
        for t in range(1, 11):
            g = 2.0 * theta  # d(theta^2)/dtheta on the oracle side
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            p.grad = np.array([[2.0 * p.data[0, 0]]])
            opt.step()
        assert abs(p.data[0, 0] - theta) < 1e-12

    def test_group_rates(self):
        w = Parameter(np.zeros((1, 1)))
        a = Parameter(np.zeros((1, 1)), group="activation_coeffs")
        w.grad = np.array([[1.0]])
        a.grad = np.array([[1.0]])
        Adam([w, a], lr=0.1, lr_act=0.001).step()
        assert abs(w.data[0, 0]) > 50 * abs(a.data[0, 0])

    def test_functional_form_state_counts_steps(self):
        p = Parameter(np.ones((2, 2)))
        p.grad = np.ones((2, 2))
        state = AdamState.for_params([p])
        adam_step([p], state, {"weights": 0.1, "activation_coeffs": 0.1})
        assert state.t == 1


class TestTrain:
    def test_learns_small_sbm(self):
        rec = train(small_config(epochs=40))
        assert not rec.failed
        assert rec.test_metric > 0.8
        assert len(rec.epochs) == 40
        assert rec.param_count > 0
        assert len(rec.dirichlet_trace) == 2

    def test_zero_epochs_rejected(self):
        with pytest.raises(ContractError):
            train(small_config(epochs=0))

    def test_dataset_xor_sbm(self):
        with pytest.raises(ContractError):
            TrainConfig(dataset=None, sbm=None).validate()
        with pytest.raises(ContractError):
            TrainConfig(dataset="x", sbm=SBM).validate()

    def test_deterministic_records(self):
        r1 = train(small_config())
        r2 = train(small_config())
        assert r1.epochs == r2.epochs
        assert r1.test_metric == r2.test_metric

    def test_metrics_csv_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics_csv(train(small_config()), p1)
        write_metrics_csv(train(small_config()), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_run_record_json_round_trips(self, tmp_path):
        rec = train(small_config(epochs=5))
        parsed = json.loads(rec.to_json())
        assert parsed["param_count"] == rec.param_count
        assert len(parsed["epochs"]) == 5

    def test_best_val_selection(self):
        rec = train(small_config(epochs=25))
        best = max(rec.epochs, key=lambda r: (r["val_metric"], -r["epoch"]))
        assert rec.val_metric == best["val_metric"]
        assert rec.test_metric == rec.epochs[rec.best_epoch]["test_metric"]

    def test_train_loss_finite_every_epoch(self):
        rec = train(small_config(epochs=30, activation="cna"))
        assert all(np.isfinite(row["train_loss"]) for row in rec.epochs)

    def test_regression_task(self):
        rec = train(small_config(task="regress", epochs=40, num_layers=2))
        assert rec.metric_name == "nmse"
        assert not rec.failed
        assert rec.test_metric < 1.0  # beats the constant-mean predictor

    def test_divergent_run_marked_failed(self):
        # An absurd learning rate overflows quickly; the record reports it.
        with np.errstate(over="ignore"):
            rec = train(small_config(lr=1e308, epochs=10))
        assert rec.failed and rec.failure

    def test_cna_beats_feature_oracle_on_sbm(self):
        # Independent oracle: multinomial logistic regression on the raw node
        # features alone scores well but below what message passing adds.
        from sklearn.linear_model import LogisticRegression

        from cnagnn.graphs import generate_sbm, make_splits, split_mask

        sbm = SbmParams(num_nodes=400, num_blocks=4, p_in=0.1, p_out=0.01,
                        feature_dim=16, block_mean_separation=3.0,
                        feature_noise_sigma=1.0, seed=123)
        bundle = generate_sbm(sbm)
        bundle.splits = make_splits(bundle, seed=0)
        train_m, test_m = split_mask(bundle, "train"), split_mask(bundle, "test")
        clf = LogisticRegression(max_iter=2000).fit(
            bundle.features[train_m], bundle.labels[train_m]
        )
        oracle = clf.score(bundle.features[test_m], bundle.labels[test_m])
        assert oracle >= 0.85

        rec = train(TrainConfig(sbm=sbm, arch="gcn", num_layers=2, hidden=64,
                                activation="cna", clusters=4, epochs=200,
                                lr=1e-2, lr_act=1e-1, seed=0))
        assert rec.test_metric > 0.9

    def test_output_files(self, tmp_path):
        out = tmp_path / "run"
        train(small_config(epochs=4, out_dir=str(out), activation="cna",
                           dump_clusters=True))
        assert (out / "run_record.json").is_file()
        assert (out / "metrics.csv").is_file()
        dumps = list((out / "clusters").glob("epoch*_layer0_assignments.tsv"))
        assert len(dumps) == 4


class TestDepthSweep:
    def test_single_depth_rows(self):
        rows = depth_sweep(small_config(epochs=3), [2], seeds=(0,))
        assert len(rows) == 3  # one per activation
        assert {r["activation"] for r in rows} == {"relu", "none", "cna"}

    def test_row_count_is_depths_by_acts_by_seeds(self):
        rows = depth_sweep(small_config(epochs=2), [1, 2], seeds=(0, 1))
        assert len(rows) == 2 * 3 * 2

    def test_rows_sorted(self):
        rows = depth_sweep(small_config(epochs=2), [2, 1], seeds=(1, 0))
        keys = [(r["depth"], r["activation"], r["seed"]) for r in rows]
        assert keys == sorted(keys)

    def test_empty_depths_rejected(self):
        with pytest.raises(ContractError):
            depth_sweep(small_config(), [])


class TestAblation:
    def test_subset_labels(self):
        assert subset_label(frozenset()) == "none"
        assert subset_label(ALL_STEPS) == "CNA"
        assert subset_label(frozenset({"normalize", "cluster"})) == "CN"
        assert parse_subset("cn") == frozenset({"cluster", "normalize"})
        assert parse_subset("none") == frozenset()
        with pytest.raises(ContractError):
            parse_subset("CX")

    def test_empty_subset_equals_none_baseline_exactly(self):
        base = train(small_config(activation="none", epochs=10))
        rows = ablation_run(small_config(epochs=10), [frozenset()], seeds=(0,))
        assert rows[0]["mean_metric"] == base.test_metric

    def test_eight_subsets_eight_rows(self):
        subsets = [frozenset(s) for s in (
            (), ("cluster",), ("normalize",), ("activate",),
            ("cluster", "normalize"), ("cluster", "activate"),
            ("normalize", "activate"), ("cluster", "normalize", "activate"),
        )]
        rows = ablation_run(small_config(epochs=2), subsets, seeds=(0,))
        assert len(rows) == 8
        assert len({r["subset"] for r in rows}) == 8
