"""Experiment drivers: single runs, paired enhanced-vs-baseline comparisons
over seeds, and the ablation grids."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import VocabSpec, build_corpus, category_counts
from .detector import HOIModel
from .evaluation import EvalReport
from .textbank import TEMPLATES, build_dictionary
from .training import SceneCache, TrainResult, evaluate_model, train

TEXT_SEED = 314159


@dataclass
class ExperimentData:
    """One benchmark instance: corpora plus training-frequency statistics."""

    vocab: VocabSpec
    train_scenes: list
    val_scenes: list
    test_scenes: list
    train_counts: np.ndarray

    @classmethod
    def synthetic(cls, data_seed: int, n_train: int = 2000, n_val: int = 250,
                  n_test: int = 600, vocab: VocabSpec = VocabSpec()):
        train_scenes = build_corpus(data_seed, n_train, vocab, prefix="train")
        val_scenes = build_corpus(data_seed + 71_000_000, n_val, vocab,
                                  prefix="val")
        test_scenes = build_corpus(data_seed + 142_000_000, n_test, vocab,
                                   prefix="test")
        return cls(vocab, train_scenes, val_scenes, test_scenes,
                   category_counts(train_scenes, vocab))


@dataclass
class RunOutcome:
    label: str
    result: TrainResult
    test_report: EvalReport


def run_single(model_cfg: ModelConfig, train_cfg: TrainConfig,
               data: ExperimentData, label: str = "run",
               metrics_path=None, checkpoint_path=None) -> RunOutcome:
    """Train one model on the bundle and score its best-validation weights
    on the test split."""
    needs_text = model_cfg.use_action_queries
    tdict = build_dictionary(data.vocab.categories,
                             TEMPLATES[train_cfg.template],
                             model_cfg.text_dim, TEXT_SEED) if needs_text else None
    model = HOIModel(model_cfg)
    result = train(model, data.train_scenes, data.val_scenes, tdict,
                   data.vocab, train_cfg, metrics_path=metrics_path,
                   checkpoint_path=checkpoint_path, keep_best_state=True)
    if result.best_state is not None:
        for name, p in model.params.items():
            p.data[...] = result.best_state[name]
        result.best_state = None
    test_cache = SceneCache.build(data.test_scenes, model_cfg, train_cfg)
    report = evaluate_model(model, data.test_scenes, test_cache, tdict,
                            data.train_counts, data.vocab)
    return RunOutcome(label, result, report)


def baseline_config(cfg: ModelConfig) -> ModelConfig:
    """The host pipeline without either query-initialization branch."""
    return replace(cfg, use_action_queries=False, use_object_tokens=False,
                   lambda1=0.0, lambda2=0.0, gamma1=0.0, gamma2=0.0)


@dataclass
class PairedOutcome:
    seed: int
    enhanced: RunOutcome
    baseline: RunOutcome


@dataclass
class BenchmarkResult:
    pairs: list = field(default_factory=list)    # PairedOutcome per seed

    def wins(self, metric="map_full") -> int:
        return sum(1 for p in self.pairs
                   if getattr(p.enhanced.test_report, metric)
                   > getattr(p.baseline.test_report, metric))

    def mean(self, which: str, metric: str) -> float:
        vals = [getattr(getattr(p, which).test_report, metric)
                for p in self.pairs]
        return float(np.mean(vals))

    def mean_convergence(self, which: str) -> float:
        return float(np.mean([getattr(p, which).result.convergence_epoch
                              for p in self.pairs]))

    def rare_gain_beats_nonrare(self) -> int:
        n = 0
        for p in self.pairs:
            rare_gain = (p.enhanced.test_report.map_rare
                         - p.baseline.test_report.map_rare)
            nonrare_gain = (p.enhanced.test_report.map_nonrare
                            - p.baseline.test_report.map_nonrare)
            if rare_gain >= nonrare_gain:
                n += 1
        return n


def _paired_cell(args):
    model_seed, data_seed, model_cfg, train_cfg, sizes, vocab = args
    data = ExperimentData.synthetic(data_seed, *sizes, vocab=vocab)
    enhanced = run_single(replace(model_cfg, seed=model_seed), train_cfg,
                          data, label=f"enhanced_s{model_seed}")
    base = run_single(replace(baseline_config(model_cfg), seed=model_seed),
                      train_cfg, data, label=f"baseline_s{model_seed}")
    return PairedOutcome(model_seed, enhanced, base)


def max_workers() -> int:
    return max(1, int(os.environ.get("QC_THREADS", "1")))


def run_paired_benchmark(seeds, model_cfg: ModelConfig, train_cfg: TrainConfig,
                         n_train: int = 2000, n_val: int = 250,
                         n_test: int = 600,
                         vocab: VocabSpec = VocabSpec()) -> BenchmarkResult:
    """Enhanced vs baseline for each seed; each pair shares data and host
    initialization (parameters are seeded per name)."""
    jobs = [(s, 1000 + s, model_cfg, train_cfg, (n_train, n_val, n_test), vocab)
            for s in seeds]
    workers = min(max_workers(), len(jobs))
    result = BenchmarkResult()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            result.pairs = list(pool.map(_paired_cell, jobs))
    else:
        result.pairs = [_paired_cell(j) for j in jobs]
    return result


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    cell: str
    map_full: float
    map_rare: float
    map_nonrare: float
    convergence_epoch: int


def _grid_cells(grid: str, model_cfg: ModelConfig, train_cfg: TrainConfig):
    if grid == "modules":
        for use_act in (False, True):
            for use_tok in (False, True):
                cfg = replace(model_cfg, use_action_queries=use_act,
                              use_object_tokens=use_tok)
                yield f"actor={int(use_act)} pdqd={int(use_tok)}", cfg, train_cfg
    elif grid == "lambda":
        for l1 in (1.0, 0.1):
            for l2 in (1.0, 0.1):
                yield (f"lambda1={l1} lambda2={l2}",
                       replace(model_cfg, lambda1=l1, lambda2=l2), train_cfg)
    elif grid == "gamma":
        for g1 in (1.0, 0.1):
            for g2 in (1.0, 0.1):
                yield (f"gamma1={g1} gamma2={g2}",
                       replace(model_cfg, gamma1=g1, gamma2=g2), train_cfg)
    elif grid == "templates":
        for name in ("plain", "someone", "progressive", "interact"):
            yield f"template={name}", model_cfg, replace(train_cfg, template=name)
    else:
        raise ValueError(f"unknown ablation grid {grid!r}")


def _ablation_cell(args):
    label, cfg, tcfg, data = args
    outcome = run_single(cfg, tcfg, data, label=label)
    return AblationRow(label, outcome.test_report.map_full,
                       outcome.test_report.map_rare,
                       outcome.test_report.map_nonrare,
                       outcome.result.convergence_epoch)


def run_ablation(grid: str, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 data: ExperimentData):
    """One trained cell per grid entry; rows in grid order."""
    cells = [(label, cfg, tcfg, data)
             for label, cfg, tcfg in _grid_cells(grid, model_cfg, train_cfg)]
    workers = min(max_workers(), len(cells))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_ablation_cell, cells))
    return [_ablation_cell(c) for c in cells]
