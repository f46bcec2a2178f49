"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The heavyweight benchmark runs are shared through module-scoped fixtures;
the whole module is expected to finish in a few minutes on a laptop.
"""

import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from deta.adaptation import (
    AdaptationConfig,
    AdapterParams,
    ProjectionHead,
    adapt_task,
    adapter_backward,
    forward_features,
    head_backward,
    head_forward,
    init_adapter,
    init_head,
)
from deta.classifier import build_classifier, classify
from deta.cli import main as cli_main
from deta.episodes import SyntheticNoiseConfig, generate_synthetic_episode
from deta.harness import ABLATION_PRESETS, BenchmarkConfig, run_benchmark
from deta.losses import (
    EmbeddingBatch,
    LossHyperparams,
    combined_loss,
    global_dispersion_loss,
    local_compactness_loss,
)
from deta.numerics import GradCheckConfig, finite_difference_gradient
from deta.relevance import (
    ImageWeightAccumulator,
    RegionIndex,
    RegionWeightTable,
    accumulate_image_weights,
    region_weights,
)
from oracles import (
    brute_local_loss,
    brute_region_weights,
    flatten_embeddings,
    flatten_grads,
    make_instance,
    rebuild_batch,
)

GRAD_CFG = GradCheckConfig(step=1e-5, rel_tol=1e-4, abs_tol=1e-7)
HP = LossHyperparams()


@contextmanager
def criterion(num: int, label: str):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {num} {label}: FAIL", flush=True)
        raise
    print(f"ACCEPTANCE {num} {label}: PASS", flush=True)


def acceptance_benchmark(**kw) -> BenchmarkConfig:
    defaults = dict(
        way=5,
        shot=10,
        k_regions=2,
        feature_dim=64,
        query_shot=15,
        noise_type="label",
        noise_ratios=(0.3,),
        episodes_per_cell=100,
        adaptation=AdaptationConfig(),
        master_seed=7,
    )
    defaults.update(kw)
    return BenchmarkConfig(**defaults)


@pytest.fixture(scope="module")
def label_noise_sweep():
    return run_benchmark(acceptance_benchmark(noise_ratios=(0.1, 0.3, 0.5, 0.7)))


@pytest.fixture(scope="module")
def full_at_30():
    return run_benchmark(acceptance_benchmark())


@pytest.fixture(scope="module")
def ablations_at_30():
    return {
        name: run_benchmark(acceptance_benchmark(ablation=ABLATION_PRESETS[name]))
        for name in ("no-cora", "no-local", "no-global", "no-ma")
    }


def _fd_ok(f, params, analytic, cfg=GRAD_CFG) -> float:
    fd = finite_difference_gradient(f, params, cfg)
    err = np.abs(np.asarray(analytic) - fd)
    tol = cfg.abs_tol + cfg.rel_tol * np.abs(fd)
    assert np.all(err <= tol), f"gradient mismatch, worst ratio {np.max(err / tol):.3g}"
    return float(np.max(err / tol))


def _random_pipeline(rng):
    way = int(rng.integers(2, 4))
    shot = int(rng.integers(2, 4))
    k = int(rng.integers(1, 3))
    d = int(rng.integers(4, 11))
    hidden = int(rng.integers(3, 7))
    embed = int(rng.integers(3, 7))
    n = way * shot
    x = rng.standard_normal((n, d))
    labels = {i: i // shot for i in range(n)}
    keys = [RegionIndex(i, slot, labels[i]) for i in range(n) for slot in range(k)]
    r = rng.standard_normal((n * k, d))
    lam = {key: float(rng.uniform(0.4, 2.0)) for key in keys}
    omega = {i: float(rng.uniform(0.3, 1.8)) for i in range(n)}
    adapter = AdapterParams(w=0.1 * rng.standard_normal((d, d)), b=0.1 * rng.standard_normal(d))
    head = init_head(d, hidden, embed, rng)
    return x, r, keys, labels, lam, omega, adapter, head, (d, hidden, embed)


def _pipeline_loss(x, r, keys, labels, lam, omega, adapter, head, embed):
    e_img, img_cache = head_forward(head, forward_features(adapter, x))
    e_reg, reg_cache = head_forward(head, forward_features(adapter, r))
    batch = EmbeddingBatch(
        image_embeddings={i: e_img[i] for i in range(x.shape[0])},
        region_embeddings={key: e_reg[p] for p, key in enumerate(keys)},
        embed_dim=embed,
    )
    loss = combined_loss(batch, lam, omega, labels, HP)
    return loss, batch, img_cache, reg_cache


def _pipeline_param_grads(x, r, keys, labels, lam, omega, adapter, head, embed):
    loss, batch, img_cache, reg_cache = _pipeline_loss(
        x, r, keys, labels, lam, omega, adapter, head, embed
    )
    d_img = np.stack([loss.image_grads[i] for i in range(x.shape[0])])
    d_reg = np.stack([loss.region_grads[key] for key in keys])
    head_g_img, da_img = head_backward(head, img_cache, d_img)
    head_g_reg, da_reg = head_backward(head, reg_cache, d_reg)
    dw_img, db_img = adapter_backward(x, da_img)
    dw_reg, db_reg = adapter_backward(r, da_reg)
    return loss.combined, {
        "adapter.w": dw_img + dw_reg,
        "adapter.b": db_img + db_reg,
        "head.w1": head_g_img["head.w1"] + head_g_reg["head.w1"],
        "head.b1": head_g_img["head.b1"] + head_g_reg["head.b1"],
        "head.w2": head_g_img["head.w2"] + head_g_reg["head.w2"],
        "head.b2": head_g_img["head.b2"] + head_g_reg["head.b2"],
    }


def test_criterion_1_gradient_suite():
    with criterion(1, "gradient suite"):
        started = time.monotonic()
        rng = np.random.default_rng(101)
        instances = 0

        for trial in range(12):
            batch, weights, omega, labels = make_instance(
                rng,
                n_classes=int(rng.integers(2, 4)),
                samples_per_class=int(rng.integers(2, 4)),
                k=int(rng.integers(1, 3)),
                dim=int(rng.integers(4, 9)),
            )
            dim = batch.embed_dim
            zeros_img = {i: np.zeros(dim) for i in batch.image_embeddings}

            def f_local(vec, batch=batch, weights=weights):
                return local_compactness_loss(rebuild_batch(batch, vec), weights, HP.tau)[0]

            _, grads = local_compactness_loss(batch, weights, HP.tau)
            _fd_ok(f_local, flatten_embeddings(batch), flatten_grads(batch, grads, zeros_img))
            instances += 1

        for trial in range(12):
            batch, weights, omega, labels = make_instance(
                rng,
                n_classes=int(rng.integers(2, 4)),
                samples_per_class=int(rng.integers(2, 4)),
                k=int(rng.integers(1, 3)),
                dim=int(rng.integers(4, 9)),
            )

            def f_global(vec, batch=batch, weights=weights, omega=omega, labels=labels):
                return global_dispersion_loss(
                    rebuild_batch(batch, vec), weights, omega, labels, HP.pi
                )[0]

            _, reg_g, img_g = global_dispersion_loss(batch, weights, omega, labels, HP.pi)
            _fd_ok(f_global, flatten_embeddings(batch), flatten_grads(batch, reg_g, img_g))
            instances += 1

        for trial in range(12):
            batch, weights, omega, labels = make_instance(
                rng,
                n_classes=int(rng.integers(2, 4)),
                samples_per_class=int(rng.integers(2, 4)),
                k=int(rng.integers(1, 3)),
                dim=int(rng.integers(4, 9)),
            )

            def f_comb(vec, batch=batch, weights=weights, omega=omega, labels=labels):
                return combined_loss(rebuild_batch(batch, vec), weights, omega, labels, HP).combined

            out = combined_loss(batch, weights, omega, labels, HP)
            _fd_ok(
                f_comb,
                flatten_embeddings(batch),
                flatten_grads(batch, out.region_grads, out.image_grads),
            )
            instances += 1

        for trial in range(12):
            x, r, keys, labels, lam, omega, adapter, head, (d, hidden, embed) = _random_pipeline(rng)
            _, grads = _pipeline_param_grads(x, r, keys, labels, lam, omega, adapter, head, embed)

            def f_adapter(vec, head=head):
                probe = AdapterParams(w=vec[: d * d].reshape(d, d), b=vec[d * d :])
                loss, _, _, _ = _pipeline_loss(x, r, keys, labels, lam, omega, probe, head, embed)
                return loss.combined

            packed = np.concatenate([adapter.w.ravel(), adapter.b])
            analytic = np.concatenate([grads["adapter.w"].ravel(), grads["adapter.b"]])
            _fd_ok(f_adapter, packed, analytic)
            instances += 1

        for trial in range(12):
            x, r, keys, labels, lam, omega, adapter, head, (d, hidden, embed) = _random_pipeline(rng)
            _, grads = _pipeline_param_grads(x, r, keys, labels, lam, omega, adapter, head, embed)
            shapes = [(hidden, d), (hidden,), (embed, hidden), (embed,)]
            sizes = [int(np.prod(s)) for s in shapes]

            def f_head(vec, adapter=adapter):
                parts = np.split(vec, np.cumsum(sizes)[:-1])
                probe = ProjectionHead(*(p.reshape(s) for p, s in zip(parts, shapes)))
                loss, _, _, _ = _pipeline_loss(x, r, keys, labels, lam, omega, adapter, probe, embed)
                return loss.combined

            packed = np.concatenate([head.w1.ravel(), head.b1, head.w2.ravel(), head.b2])
            analytic = np.concatenate(
                [grads["head.w1"].ravel(), grads["head.b1"], grads["head.w2"].ravel(), grads["head.b2"]]
            )
            _fd_ok(f_head, packed, analytic)
            instances += 1

        elapsed = time.monotonic() - started
        assert instances >= 50
        assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"


def test_criterion_2_formula_oracles():
    with criterion(2, "formula oracles"):
        started = time.monotonic()
        rng = np.random.default_rng(202)
        shapes = [(2, 2, 2), (3, 2, 2), (2, 3, 2), (2, 2, 1), (2, 1, 3)]
        for n_classes, samples, k in shapes:
            regions = {}
            sid = 0
            for c in range(n_classes):
                for _ in range(samples):
                    for slot in range(k):
                        regions[RegionIndex(sid, slot, c)] = rng.standard_normal(6)
                    sid += 1
            assert len(regions) <= 12
            table = region_weights(regions)
            expected = brute_region_weights(regions)
            for key in regions:
                assert abs(table.weights[key] - expected["lam"][key]) < 1e-9

            unit_regions = {k2: v / np.linalg.norm(v) for k2, v in regions.items()}
            weights = {k2: float(rng.uniform(0.4, 2.0)) for k2 in unit_regions}
            batch = EmbeddingBatch({}, unit_regions, embed_dim=6)
            value, _ = local_compactness_loss(batch, weights, HP.tau)
            assert abs(value - brute_local_loss(unit_regions, weights, HP.tau)) < 1e-9
        elapsed = time.monotonic() - started
        assert elapsed < 30.0


def test_criterion_3_accumulator_law():
    with criterion(3, "accumulator law"):

        def table(mean_by_sample):
            weights, phi, psi = {}, {}, {}
            for sid, lams in mean_by_sample.items():
                for slot, lam in enumerate(lams):
                    key = RegionIndex(sid, slot, 0)
                    weights[key], phi[key], psi[key] = lam, 1.0, 1.0
            return RegionWeightTable(weights, phi, psi)

        acc = accumulate_image_weights(
            ImageWeightAccumulator(momentum=0.7), table({0: (0.4, 0.6)})
        )
        assert acc.omega[0] == 0.5

        acc = accumulate_image_weights(acc, table({0: (1.0, 1.0)}))
        assert abs(acc.omega[0] - (0.7 * 0.5 + 0.3 * 1.0)) < 1e-15

        acc = ImageWeightAccumulator(momentum=0.7)
        stream = table({0: (1.75, 3.25)})  # mean 2.5
        for _ in range(200):
            acc = accumulate_image_weights(acc, stream)
        assert abs(acc.omega[0] - 2.5) < 1e-6
        assert acc.iteration == 200


def test_criterion_4_reduction_to_baseline():
    with criterion(4, "reduction to baseline"):
        off = ABLATION_PRESETS["off"]
        for i in range(20):
            episode = generate_synthetic_episode(
                5, 10, 2, 64, SyntheticNoiseConfig(label_noise_ratio=0.3), seed=400 + i
            )
            cfg = AdaptationConfig(
                seed=400 + i,
                use_cora=off.cora,
                use_local_loss=off.local_loss,
                use_global_loss=off.global_loss,
                use_accumulator=off.accumulator,
                use_out_of_class=off.out_of_class_term,
            )
            state = adapt_task(episode, cfg)

            raw = {s.sample_id: np.asarray(s.image_feature) for s in episode.support}
            ones = {s.sample_id: 1.0 for s in episode.support}
            plain = build_classifier(raw, episode.labels(), ones, way=episode.way)

            adapted = {
                s.sample_id: forward_features(state.adapter, s.image_feature)
                for s in episode.support
            }
            piped = build_classifier(
                adapted, episode.labels(), state.final_image_weights, way=episode.way
            )

            manual_state_protos = build_classifier(
                {sid: forward_features(init_adapter(64), f) for sid, f in raw.items()},
                episode.labels(),
                ones,
                way=episode.way,
            )
            for q in episode.queries:
                expected, _ = classify(q.image_feature, plain)
                assert classify(forward_features(state.adapter, q.image_feature), piped)[0] == expected
                assert classify(q.image_feature, manual_state_protos)[0] == expected


def test_criterion_5_weight_separation_and_paired_gain(full_at_30):
    with criterion(5, "weight separation and paired gain"):
        episodes = [e for e in full_at_30.episodes if not e.failed]
        assert len(episodes) == 100
        separations = [e.omega_separation for e in episodes]
        assert all(s is not None for s in separations)
        assert sum(s > 0 for s in separations) >= 95

        deta = np.array([e.deta_accuracy for e in episodes])
        base = np.array([e.baseline_accuracy for e in episodes])
        assert float(np.mean(deta - base)) > 0.0
        result = stats.ttest_rel(deta, base, alternative="greater")
        assert result.pvalue < 0.01, f"paired p-value {result.pvalue}"


def test_criterion_6_noise_ratio_monotonicity(label_noise_sweep):
    with criterion(6, "noise ratio monotonicity"):
        cells = label_noise_sweep.cells
        assert [c.noise_ratio for c in cells] == [0.1, 0.3, 0.5, 0.7]
        assert all(c.n_episodes == 100 for c in cells)
        base = [c.baseline_mean for c in cells]
        deta = [c.deta_mean for c in cells]
        assert all(base[i] >= base[i + 1] for i in range(3)), f"baseline not monotone: {base}"
        assert all(deta[i] >= deta[i + 1] for i in range(3)), f"adapted not monotone: {deta}"


def test_criterion_7_ablation_ordering(full_at_30, ablations_at_30):
    with criterion(7, "ablation ordering"):
        full_cell = full_at_30.cells[0]
        full_mean = full_cell.deta_mean
        baseline_mean = full_cell.baseline_mean
        for name, report in ablations_at_30.items():
            cell = report.cells[0]
            assert cell.baseline_mean == baseline_mean, "episode suites differ across variants"
            assert full_mean >= cell.deta_mean - 0.005, (
                f"full ({full_mean:.4f}) fell more than half a point below {name} "
                f"({cell.deta_mean:.4f})"
            )
            assert cell.deta_mean >= baseline_mean, (
                f"{name} ({cell.deta_mean:.4f}) below baseline ({baseline_mean:.4f})"
            )


def test_criterion_8_benchmark_determinism(tmp_path):
    with criterion(8, "benchmark determinism"):
        args = [
            "bench",
            "--way", "5",
            "--shot", "10",
            "--dim", "32",
            "--noise-type", "label",
            "--noise-ratios", "0.1,0.3",
            "--episodes", "3",
            "--iterations", "5",
            "--seed", "7",
            "--format", "csv",
        ]
        first = tmp_path / "run1.csv"
        second = tmp_path / "run2.csv"
        assert cli_main(args + ["--out", str(first)]) == 0
        assert cli_main(args + ["--out", str(second)]) == 0
        assert first.read_bytes() == second.read_bytes()
