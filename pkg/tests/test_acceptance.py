"""Acceptance suite: one test per acceptance criterion.

Each test prints a single PASS/FAIL line with its measured runtime against
the stated budget. The two end-to-end benchmarks (Gaussian blobs, synthetic
patch raster) are built once per module and shared between the criteria
that consume them; a shared run's time is charged to every criterion that
uses it.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from llpco.bagging import PriorMode, PriorSetup
from llpco.datagen import (
    AugmentationPolicy,
    gen_blobs,
    gen_patch_world,
    load_dataset,
    patch_dataset,
    save_dataset,
    split_vector_dataset,
)
from llpco.loss import predicted_proportions
from llpco.metrics import accuracies, ari, hungarian_match, kmeans, knn_classify, nmi
from llpco.model import (
    ModelConfig,
    encode,
    init_model,
    probabilities,
    prototype_scores,
)
from llpco.sinkhorn import MarginalSpec, lp_oracle, plan_objective, solve_codes
from llpco.trainer import (
    TrainConfig,
    align_prototypes_to_prior,
    load_checkpoint,
    save_checkpoint,
    train,
)
from oracles import (
    ari_pairs,
    best_permutation_bruteforce,
    knn_naive,
    max_swap_grad_rel_error,
    nmi_scalar,
    random_grad_instance,
    swav_equipartition_codes,
)


@contextmanager
def criterion(number, name, limit_s, charged_s=0.0):
    """charged_s counts work done in a shared fixture toward this criterion."""
    t0 = time.perf_counter()
    try:
        yield
    except Exception:
        print(f"criterion {number:2d} ({name}): FAIL")
        raise
    elapsed = time.perf_counter() - t0 + charged_s
    print(f"criterion {number:2d} ({name}): PASS  [{elapsed:.1f}s / {limit_s}s budget]")
    assert elapsed < limit_s, f"runtime {elapsed:.1f}s over the {limit_s}s budget"


# ---------------------------------------------------------------------------
# Shared end-to-end benchmarks
# ---------------------------------------------------------------------------

BLOB_PROPORTIONS = (0.5, 0.3, 0.2)
BLOB_POLICY = AugmentationPolicy(noise_sigma=0.5, dropout_rate=0.1)
BLOB_MODEL = dict(input_dim=16, hidden_dims=(32,), embed_dim=16, cluster_count=3)
BLOB_TRAIN = dict(epochs=50, bag_size=256, samples_per_epoch=2000, seed=0)

RASTER_POLICY = AugmentationPolicy(rotate90=True, mirror=True)
RASTER_MODEL = dict(hidden_dims=(128,), embed_dim=32, cluster_count=4)
RASTER_TRAIN = dict(epochs=40, samples_per_epoch=4096, seed=0, warmup_epochs=3)


@pytest.fixture(scope="module")
def blob_data():
    full = gen_blobs(3, 16, BLOB_PROPORTIONS, centers_separation=8.0, sigma=1.0, n=2500, seed=0)
    train_set, test_set = split_vector_dataset(full, 2000)
    native_w = np.bincount(train_set.labels, minlength=3) / len(train_set)
    return train_set, test_set, native_w


def run_blob_scenario(blob_data, prior_mode, prior_w):
    train_set, test_set, _ = blob_data
    t0 = time.perf_counter()
    state = init_model(ModelConfig(**BLOB_MODEL), seed=0)
    config = TrainConfig(**BLOB_TRAIN)
    out, trace = train(state, train_set, PriorSetup(prior_mode, prior_w), config, policy=BLOB_POLICY)
    out, _ = align_prototypes_to_prior(out, train_set, prior_w)
    Z_test, _ = encode(out, test_set.features)
    assignments = prototype_scores(out, Z_test).argmax(axis=0)
    acc_p, acc_h, _ = accuracies(test_set.labels, assignments, 3)
    Z_train, _ = encode(out, train_set.features)
    pred_w = predicted_proportions(probabilities(prototype_scores(out, Z_train), config.tau))
    return {
        "acc_p": acc_p,
        "acc_h": acc_h,
        "pred_w": pred_w,
        "trace": trace,
        "elapsed": time.perf_counter() - t0,
    }


@pytest.fixture(scope="module")
def blob_si(blob_data):
    _, _, native_w = blob_data
    return run_blob_scenario(blob_data, PriorMode.GLOBAL_ANNOTATED, native_w)


@pytest.fixture(scope="module")
def raster_bench():
    world = gen_patch_world(
        144, 144, 4, 24, [0.40, 0.32, 0.23, 0.05],
        signature_gap=2.0, texture_sigma=1.0, seed=0, channels=3, field_jitter=0.8,
    )
    all_ds = patch_dataset(world, "all")
    train_ds = patch_dataset(world, "train")
    test_ds = patch_dataset(world, "test")
    w_all = np.bincount(all_ds.labels, minlength=4) / len(all_ds)
    test_X = test_ds.matrix(range(len(test_ds)))

    def scenario(ds, mode, w, bag):
        t0 = time.perf_counter()
        state = init_model(ModelConfig(input_dim=ds.input_dim, **RASTER_MODEL), seed=0)
        config = TrainConfig(bag_size=bag, **RASTER_TRAIN)
        out, _ = train(state, ds, PriorSetup(mode, w), config, policy=RASTER_POLICY)
        Z, _ = encode(out, test_X)
        assignments = prototype_scores(out, Z).argmax(axis=0)
        _, acc_h, _ = accuracies(test_ds.labels, assignments, 4)
        return out, acc_h, time.perf_counter() - t0

    results = {}
    _, results["siii_acc"], results["siii_time"] = scenario(
        train_ds, PriorMode.EXACT_PER_BAG, None, 64
    )
    _, results["siv128_acc"], results["siv128_time"] = scenario(
        all_ds, PriorMode.GLOBAL_ANNOTATED, w_all, 128
    )
    _, results["siv1024_acc"], results["siv1024_time"] = scenario(
        all_ds, PriorMode.GLOBAL_ANNOTATED, w_all, 1024
    )
    baseline_state, _, results["baseline_time"] = scenario(
        all_ds, PriorMode.EQUIPARTITION, None, 1024
    )
    t0 = time.perf_counter()
    Z, _ = encode(baseline_state, test_X)
    km = kmeans(np.asarray(Z, dtype=np.float64), 4, seeds=(0, 1, 2, 3, 4))
    _, results["baseline_acc"], _ = accuracies(test_ds.labels, km.assignments, 4)
    results["baseline_time"] += time.perf_counter() - t0
    return results


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------

def test_criterion_1_sinkhorn_correctness():
    with criterion(1, "Sinkhorn correctness", 5.0):
        rng = np.random.default_rng(1)
        for _ in range(100):
            K = int(rng.integers(2, 7))
            n = int(rng.integers(8, 65))
            S = rng.uniform(-1, 1, (K, n))
            w = rng.dirichlet(np.ones(K))
            marginals = MarginalSpec.with_uniform_cols(w, n)
            plan = solve_codes(S, marginals, epsilon=0.05, max_iters=100_000, tol=1e-7)
            assert plan.converged
            residual = (
                np.abs(plan.values.sum(axis=1) - w).sum()
                + np.abs(plan.values.sum(axis=0) - marginals.col).sum()
            )
            assert residual <= 1e-6

        for _ in range(20):
            K = int(rng.integers(2, 7))
            n = int(rng.integers(8, 65))
            S = rng.uniform(-1, 1, (K, n))
            marginals = MarginalSpec.with_uniform_cols(np.full(K, 1.0 / K), n)
            for iters in (3, 5):
                mine = solve_codes(S, marginals, 0.05, max_iters=iters, tol=0.0)
                reference = swav_equipartition_codes(S, 0.05, iters)
                assert np.abs(mine.values - reference).max() <= 1e-10


def test_criterion_2_ot_optimality_limits():
    with criterion(2, "OT optimality limits", 10.0):
        rng = np.random.default_rng(2)
        # epsilon -> 0: objective vs the exact enumeration oracle (sizes kept
        # inside the oracle's enumeration budget)
        for _ in range(12):
            K = int(rng.integers(2, 5))
            max_ratio = 5 if K == 2 else (4 if K == 3 else 3)
            n = K * int(rng.integers(2, max_ratio + 1))
            if K * n > 64:
                continue
            S = rng.uniform(-1, 1, (K, n))
            marginals = MarginalSpec.with_uniform_cols(np.full(K, 1.0 / K), n)
            best = lp_oracle(S, marginals)
            plan = solve_codes(S, marginals, epsilon=1e-3, max_iters=50_000, tol=1e-4)
            assert plan.converged
            assert abs(plan_objective(plan, S) - plan_objective(best, S)) <= 1e-2
        # epsilon -> infinity: plan approaches the product of marginals
        for _ in range(50):
            K = int(rng.integers(2, 5))
            n = int(rng.integers(5, 17))
            S = rng.uniform(-1, 1, (K, n))
            w = rng.dirichlet(np.ones(K))
            marginals = MarginalSpec.with_uniform_cols(w, n)
            plan = solve_codes(S, marginals, epsilon=100.0, max_iters=10_000, tol=1e-12)
            assert np.abs(plan.values - np.outer(w, marginals.col)).max() <= 1e-3


def test_criterion_3_gradient_fidelity():
    with criterion(3, "gradient fidelity", 30.0):
        worst = 0.0
        for seed in range(25):
            state, X_s, X_t, marginals = random_grad_instance(seed)
            worst = max(worst, max_swap_grad_rel_error(state, X_s, X_t, marginals, h=1e-5))
        assert worst <= 1e-4, f"worst relative error {worst}"


def test_criterion_4_metric_oracles():
    with criterion(4, "metric oracles", 20.0):
        rng = np.random.default_rng(4)
        for K in (5, 6):
            for _ in range(100):
                M = rng.integers(0, 30, size=(K, K))
                perm = hungarian_match(M)
                best_value, best_perm = best_permutation_bruteforce(M)
                assert int(M[perm, np.arange(K)].sum()) == best_value
                np.testing.assert_array_equal(perm, best_perm)

        for _ in range(200):
            n = int(rng.integers(2, 13))
            u = rng.integers(0, 4, n).tolist()
            v = rng.integers(0, 4, n).tolist()
            assert nmi(u, v) == pytest.approx(
                min(1.0, max(0.0, nmi_scalar(u, v))), abs=1e-9
            )
            assert ari(u, v) == pytest.approx(ari_pairs(u, v), abs=1e-9)

        for _ in range(20):
            n_train = int(rng.integers(30, 60))
            Z_train = rng.normal(size=(n_train, 5))
            Z_train /= np.linalg.norm(Z_train, axis=1, keepdims=True)
            labels = rng.integers(0, 3, n_train)
            Z_test = rng.normal(size=(8, 5))
            Z_test /= np.linalg.norm(Z_test, axis=1, keepdims=True)
            k = int(rng.integers(1, 26))
            np.testing.assert_array_equal(
                knn_classify(Z_train, labels, Z_test, k=k),
                knn_naive(Z_train, labels, Z_test, k),
            )


def test_criterion_5_end_to_end_si(blob_data, blob_si):
    _, _, native_w = blob_data
    with criterion(5, "end-to-end SI analogue", 120.0, charged_s=blob_si["elapsed"]):
        assert blob_si["acc_h"] >= 0.95, f"acc_h {blob_si['acc_h']}"
        assert blob_si["acc_p"] == pytest.approx(blob_si["acc_h"], abs=1e-12), "cluster swap"
        assert np.abs(blob_si["pred_w"] - native_w).max() <= 0.05


def test_criterion_6_sii_analogue(blob_data, blob_si):
    _, _, native_w = blob_data
    with criterion(6, "SII analogue with noisy census", 120.0):
        perturbed = native_w * np.array([1.2, 0.8, 1.2])
        perturbed /= perturbed.sum()
        sii = run_blob_scenario(blob_data, PriorMode.GLOBAL_CENSUS, perturbed)
        assert sii["acc_h"] >= 0.85, f"acc_h {sii['acc_h']}"
        assert sii["acc_h"] <= blob_si["acc_h"] + 1e-12


def test_criterion_7_scenario_ordering(raster_bench):
    r = raster_bench
    charged = r["siii_time"] + r["siv1024_time"] + r["baseline_time"]
    with criterion(7, "scenario ordering", 600.0, charged_s=charged):
        assert r["siii_acc"] >= r["siv1024_acc"] >= r["baseline_acc"], (
            f"SIII {r['siii_acc']:.3f}, SIV {r['siv1024_acc']:.3f},"
            f" baseline {r['baseline_acc']:.3f}"
        )


def test_criterion_8_bag_size_trend(raster_bench):
    r = raster_bench
    charged = r["siv128_time"] + r["siv1024_time"]
    with criterion(8, "bag-size trend for global priors", 600.0, charged_s=charged):
        assert r["siv1024_acc"] >= r["siv128_acc"] - 0.02, (
            f"bag 1024 {r['siv1024_acc']:.3f} vs bag 128 {r['siv128_acc']:.3f}"
        )


def test_criterion_9_collapse_diagnostics(blob_data):
    train_set, _, native_w = blob_data
    with criterion(9, "collapse diagnostics at huge epsilon", 120.0):
        state = init_model(ModelConfig(**BLOB_MODEL), seed=0)
        config = TrainConfig(**{**BLOB_TRAIN, "epochs": 3, "warmup_epochs": 1, "epsilon": 10.0})
        _, trace = train(
            state, train_set, PriorSetup(PriorMode.GLOBAL_ANNOTATED, native_w), config,
            policy=BLOB_POLICY,
        )
        # every bag's code entropy within 1% of the feasible maximum
        assert min(e.min_code_entropy_ratio for e in trace.epochs) >= 0.99
        assert trace.collapse_detected


def test_criterion_10_determinism_and_persistence(tmp_path, blob_data):
    train_set, _, native_w = blob_data
    with criterion(10, "determinism and persistence", 120.0):
        prior = PriorSetup(PriorMode.GLOBAL_ANNOTATED, native_w)
        config = TrainConfig(**{**BLOB_TRAIN, "epochs": 4, "warmup_epochs": 1})
        state = init_model(ModelConfig(**BLOB_MODEL), seed=0)

        out_a, trace_a = train(state, train_set, prior, config, policy=BLOB_POLICY)
        out_b, trace_b = train(state, train_set, prior, config, policy=BLOB_POLICY)
        assert trace_a.to_jsonable() == trace_b.to_jsonable()
        for x, y in zip(out_a.parameter_arrays(), out_b.parameter_arrays()):
            assert np.array_equal(x, y)

        # checkpoint resume reproduces the uninterrupted run
        half, half_trace = train(state, train_set, prior, config, policy=BLOB_POLICY, stop_epoch=2)
        ckpt = tmp_path / "half.llpc"
        save_checkpoint(ckpt, half, config, half_trace)
        mid_state, mid_config, mid_trace = load_checkpoint(ckpt)
        resumed, resumed_trace = train(
            mid_state, train_set, prior, mid_config,
            policy=BLOB_POLICY, start_epoch=len(mid_trace.epochs), trace=mid_trace,
        )
        for x, y in zip(resumed.parameter_arrays(), out_a.parameter_arrays()):
            assert np.array_equal(x, y)
        assert resumed_trace.to_jsonable() == trace_a.to_jsonable()

        # dataset and checkpoint round-trips are lossless
        data_path = tmp_path / "data.llpd"
        save_dataset(data_path, train_set)
        loaded = load_dataset(data_path)
        assert np.array_equal(loaded.features, train_set.features)
        assert np.array_equal(loaded.labels, train_set.labels)

        full_ckpt = tmp_path / "full.llpc"
        save_checkpoint(full_ckpt, out_a, config, trace_a)
        loaded_state, loaded_config, loaded_trace = load_checkpoint(full_ckpt)
        assert loaded_config == config
        assert loaded_trace.to_jsonable() == trace_a.to_jsonable()
        for x, y in zip(loaded_state.parameter_arrays(), out_a.parameter_arrays()):
            assert np.array_equal(x, y)
