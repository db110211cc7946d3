"""Synthetic vocabulary-shift benchmark: frozen graph representations with
neighbor augmentation against a trainable embedding-table baseline."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentConfig
from .evaluate import (
    ClassifierConfig,
    EvalReport,
    TaskSplits,
    build_task_dataset,
    matched_random_table,
    run_benchmark,
    split_patients,
)
from .graph.train import TrainConfig, train_representations
from .neighbors import NeighborSets, build_neighbor_sets
from .synth import SynthSpec, SynthVocabulary, apply_vocabulary_shift, generate_cohort, generate_vocabulary
from .trajectory import MAX_LEN, fit_decile_bins

log = logging.getLogger(__name__)

EXTERNAL = "external"
# spawn-key streams of the synthetic generator
INTERNAL_STREAM, EXTERNAL_STREAM, SHIFT_STREAM = 1, 2, 3


def benchmark_synth() -> SynthSpec:
    # short visits: each history holds few codes, so unseen external codes weigh more
    return SynthSpec(records_per_visit=(1, 4))


def benchmark_classifier() -> ClassifierConfig:
    # a lone linear head on small-norm pooled features needs a larger step than a
    # finetuned network; at 5e-5 early stopping fires before the head has moved
    return ClassifierConfig(learning_rate=1e-3)


@dataclass
class ShiftBenchmarkConfig:
    synth: SynthSpec = field(default_factory=benchmark_synth)
    train: TrainConfig = field(default_factory=TrainConfig)
    num_neighbors: int = 30
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    factors: tuple[int, ...] = (5,)
    classifier: ClassifierConfig = field(default_factory=benchmark_classifier)
    baseline_classifier: Optional[ClassifierConfig] = None
    tasks: tuple[str, ...] = ("MT", "LLOS", "RA")
    max_len: int = MAX_LEN


@dataclass
class ShiftBenchmarkResult:
    medrep: EvalReport
    baseline: EvalReport
    seconds: float

    def mean_auroc(self, model: str, dataset: str) -> float:
        report = self.medrep if model == "medrep" else self.baseline
        return float(np.mean([r.auroc for r in report.rows if r.dataset == dataset]))

    def summary(self) -> dict[str, float]:
        return {
            f"{m}_{d}": self.mean_auroc(m, d)
            for m in ("medrep", "baseline")
            for d in ("internal", EXTERNAL)
        }


@dataclass
class BenchmarkData:
    vocab: SynthVocabulary
    internal: dict[str, TaskSplits]
    external: dict[str, list]


def prepare_data(spec: SynthSpec, tasks: Sequence[str], max_len: int = MAX_LEN) -> BenchmarkData:
    """Internal splits (70/15/15 by patient) and a vocabulary-shifted external cohort."""
    vocab = generate_vocabulary(spec)
    internal = generate_cohort(spec, vocab, INTERNAL_STREAM, id_prefix="i")
    external = generate_cohort(spec, vocab, EXTERNAL_STREAM, id_prefix="e")
    shift_rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(SHIFT_STREAM,)))
    ext_records = apply_vocabulary_shift(external.records, vocab, spec.shift_rate, shift_rng)
    split = split_patients((v.patient_id for v in internal.visits), spec.seed)
    bins = fit_decile_bins(r for r in internal.records if split[r.patient_id] == "train")
    splits = {}
    ext = {}
    for task in tasks:
        data = build_task_dataset(internal.records, internal.visits, vocab.catalog, bins, task, max_len)
        parts = {"train": [], "val": [], "test": []}
        for t in data:
            parts[split[t.patient_id]].append(t)
        splits[task] = TaskSplits(parts["train"], parts["val"], parts["test"])
        ext[task] = build_task_dataset(ext_records, external.visits, vocab.catalog, bins, task, max_len)
    return BenchmarkData(vocab, splits, ext)


def graph_representations(vocab: SynthVocabulary, config: TrainConfig):
    return train_representations(vocab.text, vocab.graph, config).representations


def neighbor_sets(vocab: SynthVocabulary, R, M: int) -> NeighborSets:
    return build_neighbor_sets(R, M, vocab.catalog.eligible())


def run_shift_benchmark(config: ShiftBenchmarkConfig, seed: int) -> ShiftBenchmarkResult:
    """Both models on one seeded instance of the benchmark."""
    start = time.perf_counter()
    spec = replace(config.synth, seed=seed)
    data = prepare_data(spec, config.tasks, config.max_len)
    R = graph_representations(data.vocab, replace(config.train, seed=seed))
    sets = neighbor_sets(data.vocab, R, config.num_neighbors)
    clf = replace(config.classifier, seed=seed)
    domains = data.vocab.catalog.domains
    externals = {EXTERNAL: data.external}
    medrep = run_benchmark(
        data.internal, externals, R, replace(config.augment, seed=seed), config.factors, sets, domains, clf, "medrep"
    )
    table = matched_random_table(R, seed)
    base_clf = replace(config.baseline_classifier or config.classifier, seed=seed)
    baseline = run_benchmark(
        data.internal, externals, table, AugmentConfig(seed=seed), (1,), None, domains, base_clf, "baseline", trainable=True
    )
    return ShiftBenchmarkResult(medrep, baseline, time.perf_counter() - start)
