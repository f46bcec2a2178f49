"""Benchmark driver: noise sweeps over seeded episodes, paired against a baseline.

Every cell of the sweep (one noise ratio) runs a fixed set of seeded
episodes; each episode is scored by the plain nearest-centroid baseline and
by the configured adaptation variant, so the reported delta is paired.
Episode seeds derive from the master seed and the cell's noise coordinates
only, never from the ablation flags, which keeps the baseline column and the
episode set identical across ablation variants.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptation import AdaptationConfig, adapt_task
from .classifier import evaluate, plain_ncc_accuracy
from .episodes import (
    NOISE_CLEAN,
    SyntheticNoiseConfig,
    generate_synthetic_episode,
)
from .errors import DivergenceError, InvalidParameterError

NOISE_TYPES = ("none", "label", "image")


@dataclass(frozen=True)
class AblationFlags:
    """Which components of the method are active."""

    cora: bool = True
    local_loss: bool = True
    global_loss: bool = True
    accumulator: bool = True
    out_of_class_term: bool = True

    def mask(self) -> str:
        bits = (self.cora, self.local_loss, self.global_loss, self.accumulator, self.out_of_class_term)
        return "".join("1" if b else "0" for b in bits)


ABLATION_PRESETS: dict[str, AblationFlags] = {
    "full": AblationFlags(),
    "no-cora": AblationFlags(cora=False),
    "no-local": AblationFlags(local_loss=False),
    "no-global": AblationFlags(global_loss=False),
    "no-ma": AblationFlags(accumulator=False),
    "off": AblationFlags(False, False, False, False, False),
}


@dataclass(frozen=True)
class BenchmarkConfig:
    """One benchmark run: episode shape, noise sweep, ablation, adaptation knobs."""

    way: int = 5
    shot: int = 10
    k_regions: int = 2
    feature_dim: int = 64
    query_shot: int = 15
    noise_type: str = "label"
    noise_ratios: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7)
    episodes_per_cell: int = 100
    ablation: AblationFlags = field(default_factory=AblationFlags)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    distractor_mix: float = 0.5
    class_separation: float = 3.0
    master_seed: int = 7

    def __post_init__(self):
        if self.noise_type not in NOISE_TYPES:
            raise InvalidParameterError(f"noise_type must be one of {NOISE_TYPES}")
        if self.episodes_per_cell < 1:
            raise InvalidParameterError("episodes_per_cell must be >= 1")
        if any(not 0.0 <= r <= 1.0 for r in self.noise_ratios):
            raise InvalidParameterError("noise ratios must lie in [0, 1]")
        if not self.noise_ratios:
            raise InvalidParameterError("at least one noise ratio is required")
        if self.master_seed < 0:
            raise InvalidParameterError("master_seed must be non-negative")
        if self.way < 2 or self.shot < 1 or self.k_regions < 1 or self.feature_dim < 2:
            raise InvalidParameterError("invalid episode shape")


@dataclass
class EpisodeReport:
    """Outcome of one episode under baseline and the configured variant."""

    cell_id: str
    seed: int
    noise_type: str
    noise_ratio: float
    baseline_accuracy: float | None = None
    deta_accuracy: float | None = None
    omega: dict[str, float] = field(default_factory=dict)
    noise_tags: dict[str, str] = field(default_factory=dict)
    omega_separation: float | None = None
    loss_first: float | None = None
    loss_final: float | None = None
    failed: bool = False
    error: str | None = None


@dataclass
class CellAggregate:
    cell_id: str
    noise_type: str
    noise_ratio: float
    ablation_mask: str
    n_episodes: int
    n_failed: int
    baseline_mean: float | None
    baseline_ci95: float | None
    deta_mean: float | None
    deta_ci95: float | None
    delta_mean: float | None
    omega_separation: float | None
    omega_separation_positive_fraction: float | None


@dataclass
class AggregateReport:
    master_seed: int
    ablation_mask: str
    cells: list[CellAggregate]
    episodes: list[EpisodeReport]


def _episode_seed(master: int, noise_type: str, ratio_index: int, episode_index: int) -> int:
    code = NOISE_TYPES.index(noise_type)
    ss = np.random.SeedSequence([master, code, ratio_index, episode_index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def _mean_ci(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    mean = float(np.mean(values))
    if len(values) < 2:
        return mean, 0.0
    half = 1.96 * float(np.std(values, ddof=1)) / math.sqrt(len(values))
    return mean, half


def _separation(omega: dict[int, float], tags: dict[int, str]) -> float | None:
    clean = [omega[sid] for sid, tag in tags.items() if tag == NOISE_CLEAN]
    noisy = [omega[sid] for sid, tag in tags.items() if tag != NOISE_CLEAN]
    if not clean or not noisy:
        return None
    return float(np.mean(clean) - np.mean(noisy))


def run_episode(cfg: BenchmarkConfig, ratio: float, ratio_index: int, index: int) -> EpisodeReport:
    """Generate, score and adapt one seeded episode of a benchmark cell."""
    ratio_eff = 0.0 if cfg.noise_type == "none" else ratio
    seed = _episode_seed(cfg.master_seed, cfg.noise_type, ratio_index, index)
    noise = SyntheticNoiseConfig(
        label_noise_ratio=ratio_eff if cfg.noise_type == "label" else 0.0,
        image_noise_ratio=ratio_eff if cfg.noise_type == "image" else 0.0,
        distractor_mix=cfg.distractor_mix,
        class_separation=cfg.class_separation,
    )
    episode = generate_synthetic_episode(
        cfg.way, cfg.shot, cfg.k_regions, cfg.feature_dim, noise, seed, query_shot=cfg.query_shot
    )
    cell_id = f"{cfg.noise_type}-{ratio_eff:g}-{cfg.ablation.mask()}"
    report = EpisodeReport(
        cell_id=cell_id,
        seed=seed,
        noise_type=cfg.noise_type,
        noise_ratio=ratio_eff,
        noise_tags={str(sid): tag for sid, tag in sorted(episode.noise_tags().items())},
    )
    report.baseline_accuracy = plain_ncc_accuracy(episode)

    adapt_cfg = replace(
        cfg.adaptation,
        k_regions=cfg.k_regions,
        seed=seed,
        use_cora=cfg.ablation.cora,
        use_local_loss=cfg.ablation.local_loss,
        use_global_loss=cfg.ablation.global_loss,
        use_accumulator=cfg.ablation.accumulator,
        use_out_of_class=cfg.ablation.out_of_class_term,
    )
    try:
        state = adapt_task(episode, adapt_cfg)
    except DivergenceError as exc:
        report.failed = True
        report.error = f"diverged at iteration {exc.iteration}: {exc}"
        return report
    report.deta_accuracy = evaluate(episode, state)
    report.omega = {str(k): float(v) for k, v in sorted(state.final_image_weights.items())}
    report.omega_separation = _separation(state.final_image_weights, episode.noise_tags())
    if state.loss_trace:
        report.loss_first = state.loss_trace[0].combined
        report.loss_final = state.loss_trace[-1].combined
    return report


def run_benchmark(cfg: BenchmarkConfig) -> AggregateReport:
    """Run every cell of the sweep and aggregate paired accuracies.

    Episodes that diverge are kept in the per-episode list, counted per cell
    and excluded from the means.
    """
    ratios = (0.0,) if cfg.noise_type == "none" else tuple(cfg.noise_ratios)
    cells: list[CellAggregate] = []
    episodes: list[EpisodeReport] = []
    for ratio_index, ratio in enumerate(ratios):
        reports = [
            run_episode(cfg, ratio, ratio_index, i) for i in range(cfg.episodes_per_cell)
        ]
        episodes.extend(reports)
        ok = [r for r in reports if not r.failed]
        base_mean, base_ci = _mean_ci([r.baseline_accuracy for r in ok])
        deta_mean, deta_ci = _mean_ci([r.deta_accuracy for r in ok])
        delta_mean, _ = _mean_ci([r.deta_accuracy - r.baseline_accuracy for r in ok])
        seps = [r.omega_separation for r in ok if r.omega_separation is not None]
        sep_mean = float(np.mean(seps)) if seps else None
        sep_pos = float(np.mean([s > 0.0 for s in seps])) if seps else None
        cells.append(
            CellAggregate(
                cell_id=f"{cfg.noise_type}-{ratio:g}-{cfg.ablation.mask()}",
                noise_type=cfg.noise_type,
                noise_ratio=ratio,
                ablation_mask=cfg.ablation.mask(),
                n_episodes=len(ok),
                n_failed=len(reports) - len(ok),
                baseline_mean=base_mean,
                baseline_ci95=base_ci,
                deta_mean=deta_mean,
                deta_ci95=deta_ci,
                delta_mean=delta_mean,
                omega_separation=sep_mean,
                omega_separation_positive_fraction=sep_pos,
            )
        )
    return AggregateReport(
        master_seed=cfg.master_seed,
        ablation_mask=cfg.ablation.mask(),
        cells=cells,
        episodes=episodes,
    )


CSV_COLUMNS = (
    "cell_id",
    "noise_type",
    "noise_ratio",
    "ablation_mask",
    "n_episodes",
    "baseline_mean",
    "baseline_ci95",
    "deta_mean",
    "deta_ci95",
    "delta_mean",
    "omega_separation",
)


def emit_report(report: AggregateReport, fmt: str, path) -> None:
    """Write the aggregate as CSV (one row per cell) or JSON (full detail)."""
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for cell in report.cells:
                writer.writerow(
                    [
                        cell.cell_id,
                        cell.noise_type,
                        repr(cell.noise_ratio),
                        cell.ablation_mask,
                        cell.n_episodes,
                        _fmt(cell.baseline_mean),
                        _fmt(cell.baseline_ci95),
                        _fmt(cell.deta_mean),
                        _fmt(cell.deta_ci95),
                        _fmt(cell.delta_mean),
                        _fmt(cell.omega_separation),
                    ]
                )
    elif fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report_to_dict(report), fh, indent=2)
            fh.write("\n")
    else:
        raise InvalidParameterError(f"unknown report format {fmt!r}")


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(value)


def report_to_dict(report: AggregateReport) -> dict:
    return {
        "master_seed": report.master_seed,
        "ablation_mask": report.ablation_mask,
        "cells": [dataclasses.asdict(c) for c in report.cells],
        "episodes": [dataclasses.asdict(e) for e in report.episodes],
    }


def report_from_dict(doc: dict) -> AggregateReport:
    return AggregateReport(
        master_seed=doc["master_seed"],
        ablation_mask=doc["ablation_mask"],
        cells=[CellAggregate(**c) for c in doc["cells"]],
        episodes=[EpisodeReport(**e) for e in doc["episodes"]],
    )


def load_report_json(path) -> AggregateReport:
    with open(path, "r", encoding="utf-8") as fh:
        return report_from_dict(json.load(fh))
