"""Command-line pipeline: synth, train-reps, neighbors, build-trajectories, augment, benchmark.

Every stage reads one TOML config. Outputs record the config hash, the seed
and the SHA-256 of each upstream file, and downstream stages refuse inputs
whose recorded checksums no longer match (exit 4).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .augment import AugmentConfig, augment_dataset
from .container import canonical_json, sha256_bytes, sha256_file
from .descriptions import load_embedding_matrix, read_embedding_file, save_descriptions, save_embedding_matrix
from .errors import ChecksumMismatch, ConfigError, ContainerError, IoError, MedRepError
from .evaluate import (
    ClassifierConfig,
    EvalReport,
    TaskSplits,
    build_task_dataset,
    matched_random_table,
    run_benchmark,
    split_patients,
)
from .experiment import EXTERNAL_STREAM, INTERNAL_STREAM, SHIFT_STREAM
from .graph.train import TrainConfig, load_checkpoint, save_checkpoint, train_representations
from .neighbors import build_neighbor_sets, load_neighbor_sets, save_neighbor_sets
from .synth import SynthSpec, apply_vocabulary_shift, generate_cohort, generate_vocabulary
from .trajectory import (
    MAX_LEN,
    DecileBins,
    fit_decile_bins,
    load_records,
    load_trajectories,
    load_visits,
    save_records,
    save_trajectories,
    save_visits,
)
from .vocab import load_catalog, load_graph, save_catalog, save_graph

log = logging.getLogger("medrep")

SPLITS = ("train", "val", "test")
# SynthSpec fields a synth TOML file must state explicitly
SYNTH_REQUIRED = (
    "num_clusters",
    "concepts_per_cluster",
    "intra_edge_prob",
    "inter_edge_prob",
    "num_patients",
    "visits_per_patient",
    "signal_strength",
    "shift_rate",
    "seed",
)


# -- configuration -----------------------------------------------------------

@dataclass
class Paths:
    catalog: str
    edges: str
    embeddings: str
    records: str
    visits: str
    output_dir: str
    external: dict[str, dict[str, str]] = field(default_factory=dict)


@dataclass
class NeighborConfig:
    M: int = 30
    same_domain: bool = False


@dataclass
class PipelineConfig:
    paths: Paths
    train: TrainConfig = field(default_factory=TrainConfig)
    neighbors: NeighborConfig = field(default_factory=NeighborConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    tasks: tuple[str, ...] = ("MT", "LLOS", "RA")
    factors: tuple[int, ...] = (1,)
    max_len: int = MAX_LEN
    baseline: bool = True
    seed: int = 0
    report_dir: Optional[str] = None
    base_dir: str = field(default="", compare=False)

    def config_hash(self) -> str:
        """Hash of the config with paths relative to the config file, so a moved workspace keeps it."""
        doc = asdict(self)
        base = doc.pop("base_dir") or "."

        def rel(value):
            if isinstance(value, dict):
                return {k: rel(v) for k, v in value.items()}
            return os.path.relpath(value, base) if isinstance(value, str) else value

        doc["paths"] = rel(doc["paths"])
        if doc["report_dir"] is not None:
            doc["report_dir"] = rel(doc["report_dir"])
        return sha256_bytes(canonical_json(doc))

    def out(self, *parts: str) -> Path:
        return Path(self.paths.output_dir, *parts)


def _read_toml(path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise IoError(f"config file not found: {path}") from None
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _build(cls, table: Any, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"[{where}] unknown key(s): {', '.join(unknown)}")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def load_config(path, overrides: Optional[dict] = None) -> PipelineConfig:
    """Parse a pipeline config; relative paths resolve against the config file's directory."""
    raw = _read_toml(path)
    base = Path(path).resolve().parent
    overrides = overrides or {}
    try:
        paths = dict(raw.pop("paths"))
    except KeyError:
        raise ConfigError(f"{path}: missing [paths] table") from None
    missing = [k for k in ("catalog", "edges", "embeddings", "records", "visits", "output_dir") if k not in paths]
    if missing:
        raise ConfigError(f"{path}: [paths] lacks {', '.join(missing)}")

    def resolve(p: str) -> str:
        return str((base / p).resolve())

    external = {}
    for name, ext in dict(paths.pop("external", {})).items():
        if not isinstance(ext, dict) or set(ext) != {"records", "visits"}:
            raise ConfigError(f"[paths.external.{name}] needs exactly records and visits")
        external[name] = {k: resolve(v) for k, v in sorted(ext.items())}
    paths = _build(Paths, {k: resolve(v) for k, v in paths.items()} | {"external": external}, "paths")

    seed = int(overrides.get("seed", raw.pop("seed", 0)))
    raw.pop("seed", None)
    sections = {
        "train": TrainConfig,
        "neighbors": NeighborConfig,
        "augment": AugmentConfig,
        "classifier": ClassifierConfig,
    }
    parts = {}
    for name, cls in sections.items():
        table = dict(raw.pop(name, {}))
        if "seed" in table:
            raise ConfigError(f"[{name}] takes its seed from the top-level seed key")
        if cls is AugmentConfig:
            if "factor" in overrides:
                table["factor"] = overrides["factor"]
            if "replace_prob" in overrides:
                table["replace_prob"] = overrides["replace_prob"]
        if cls in (TrainConfig, AugmentConfig, ClassifierConfig):
            table["seed"] = seed
        parts[name] = _build(cls, table, name)
    if "factor" in overrides:
        raw["factors"] = [overrides["factor"]]
    if "report_dir" in overrides:
        raw["report_dir"] = str(Path(overrides["report_dir"]).resolve())
    elif raw.get("report_dir") is not None:
        raw["report_dir"] = resolve(raw["report_dir"])
    for key in ("tasks", "factors"):
        if key in raw:
            raw[key] = tuple(raw[key])
    if "base_dir" in raw:
        raise ConfigError("[top level] unknown key(s): base_dir")
    cfg = _build(PipelineConfig, dict(raw, paths=paths, seed=seed, **parts), "top level")
    cfg.base_dir = str(base)
    bad = [t for t in cfg.tasks if t not in ("MT", "LLOS", "RA")]
    if bad:
        raise ConfigError(f"unknown task(s) {bad}")
    if any(int(f) != f or f < 1 for f in cfg.factors):
        raise ConfigError("factors must be positive integers")
    return cfg


def _require(*paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise IoError(f"missing input file: {p}")


# -- provenance --------------------------------------------------------------

def _meta(cfg: PipelineConfig, stage: str, inputs: dict[str, str]) -> dict:
    return {
        "stage": stage,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "inputs": {role: sha256_file(p) for role, p in sorted(inputs.items())},
    }


def verify_input(meta: dict, role: str, path) -> None:
    """Fail with :class:`ChecksumMismatch` if ``path`` is not the file ``meta`` was built from."""
    try:
        expected = meta["inputs"][role]
    except (KeyError, TypeError):
        raise ContainerError(f"artifact metadata lacks the checksum of its {role} input") from None
    actual = sha256_file(path)
    if actual != expected:
        raise ChecksumMismatch(f"{path} changed since the artifact was built ({role}: {actual[:12]} != {expected[:12]})")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _provenance_line(cfg: PipelineConfig) -> str:
    return f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n"


def reps_path(cfg: PipelineConfig) -> Path:
    return cfg.out("reps.mrep")


def neighbors_path(cfg: PipelineConfig) -> Path:
    return cfg.out("neighbors.mnbr")


def trajectory_path(cfg: PipelineConfig, task: str, part: str) -> Path:
    return cfg.out("trajectories", f"{task}_{part}.mtrj")


def augmented_path(cfg: PipelineConfig, task: str) -> Path:
    a = cfg.augment
    return cfg.out("augmented", f"{task}_train_f{a.factor}_p{a.replace_prob!r}.mtrj")


def report_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.report_dir) if cfg.report_dir else cfg.out("report")


# -- stages ------------------------------------------------------------------

def synth_spec_from_file(path, seed: Optional[int] = None) -> SynthSpec:
    raw = _read_toml(path)
    table = raw.get("synth", raw)
    if seed is not None:
        table = dict(table, seed=seed)
    missing = [k for k in SYNTH_REQUIRED if k not in table]
    if missing:
        raise ConfigError(f"{path}: synth spec lacks {', '.join(missing)}")
    return _build(SynthSpec, dict(table), "synth")


def cmd_synth(spec_path, out_dir, seed: Optional[int] = None) -> dict[str, str]:
    """Write catalog, edges, records and text embeddings (plus visits, descriptions
    and a vocabulary-shifted external cohort); returns file checksums."""
    spec = synth_spec_from_file(spec_path, seed)
    out = Path(out_dir)
    (out / "external").mkdir(parents=True, exist_ok=True)
    vocab = generate_vocabulary(spec)
    internal = generate_cohort(spec, vocab, INTERNAL_STREAM, id_prefix="i")
    external = generate_cohort(spec, vocab, EXTERNAL_STREAM, id_prefix="e")
    shift_rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(SHIFT_STREAM,)))
    shifted = apply_vocabulary_shift(external.records, vocab, spec.shift_rate, shift_rng)
    spec_hash = sha256_bytes(canonical_json(asdict(spec)))
    save_catalog(vocab.catalog, out / "catalog.tsv")
    save_graph(vocab.graph, vocab.catalog, out / "edges.tsv")
    save_records(internal.records, out / "records.tsv")
    save_visits(internal.visits, out / "visits.tsv")
    save_descriptions(vocab.descriptions, out / "descriptions.tsv")
    save_embedding_matrix(
        out / "embeddings.mrep", vocab.text.values, catalog=vocab.catalog,
        meta={"kind": "text", "seed": spec.seed, "spec_hash": spec_hash},
    )
    save_records(shifted, out / "external" / "records.tsv")
    save_visits(external.visits, out / "external" / "visits.tsv")
    names = ["catalog.tsv", "edges.tsv", "records.tsv", "visits.tsv", "descriptions.tsv", "embeddings.mrep",
             "external/records.tsv", "external/visits.tsv"]
    checksums = {n: sha256_file(out / n) for n in names}
    manifest = {"seed": spec.seed, "spec_hash": spec_hash, "files": checksums}
    _write_text(out / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return checksums


def cmd_train_reps(cfg: PipelineConfig) -> Path:
    p = cfg.paths
    _require(p.catalog, p.edges, p.embeddings)
    catalog = load_catalog(p.catalog)
    graph = load_graph(p.edges, catalog)
    X = load_embedding_matrix(p.embeddings, catalog, kind="text")
    result = train_representations(X, graph, cfg.train)
    meta = _meta(cfg, "train-reps", {"catalog": p.catalog, "edges": p.edges, "embeddings": p.embeddings})
    cfg.out().mkdir(parents=True, exist_ok=True)
    save_checkpoint(reps_path(cfg), result, cfg.train, meta, catalog=catalog)
    _write_text(cfg.out("train_log.tsv"), _provenance_line(cfg) + result.log_text())
    return reps_path(cfg)


def _load_reps(cfg: PipelineConfig):
    _require(cfg.paths.catalog, reps_path(cfg))
    _, R, meta = load_checkpoint(reps_path(cfg))
    verify_input(meta, "catalog", cfg.paths.catalog)
    return R


def cmd_neighbors(cfg: PipelineConfig) -> Path:
    R = _load_reps(cfg)
    catalog = load_catalog(cfg.paths.catalog)
    if R.N != catalog.N:
        raise ChecksumMismatch("representation rows do not match the catalog")
    sets = build_neighbor_sets(R, cfg.neighbors.M, catalog.eligible(), catalog.domains, cfg.neighbors.same_domain)
    meta = _meta(cfg, "neighbors", {"catalog": cfg.paths.catalog, "reps": reps_path(cfg)})
    meta["M"] = cfg.neighbors.M
    save_neighbor_sets(sets, neighbors_path(cfg), meta)
    return neighbors_path(cfg)


def cmd_build_trajectories(cfg: PipelineConfig) -> list[Path]:
    p = cfg.paths
    inputs = {"catalog": p.catalog, "records": p.records, "visits": p.visits}
    for name, ext in cfg.paths.external.items():
        inputs[f"{name}_records"] = ext["records"]
        inputs[f"{name}_visits"] = ext["visits"]
    _require(*inputs.values())
    catalog = load_catalog(p.catalog)
    records = load_records(p.records)
    visits = load_visits(p.visits)
    split = split_patients((v.patient_id for v in visits), cfg.seed)
    bins = fit_decile_bins(r for r in records if split.get(r.patient_id) == "train")
    meta = _meta(cfg, "build-trajectories", inputs)
    meta["bins"] = bins.to_json()
    written = []
    externals = {name: (load_records(e["records"]), load_visits(e["visits"])) for name, e in cfg.paths.external.items()}
    cfg.out("trajectories").mkdir(parents=True, exist_ok=True)
    for task in cfg.tasks:
        data = build_task_dataset(records, visits, catalog, bins, task, cfg.max_len)
        for part in SPLITS:
            path = trajectory_path(cfg, task, part)
            save_trajectories(path, [t for t in data if split[t.patient_id] == part], cfg.max_len, dict(meta, part=part))
            written.append(path)
        for name, (ext_records, ext_visits) in externals.items():
            path = trajectory_path(cfg, task, name)
            ext = build_task_dataset(ext_records, ext_visits, catalog, bins, task, cfg.max_len)
            save_trajectories(path, ext, cfg.max_len, dict(meta, part=name))
            written.append(path)
    return written


def _load_part(cfg: PipelineConfig, task: str, part: str):
    path = trajectory_path(cfg, task, part)
    _require(path)
    trajs, meta = load_trajectories(path)
    verify_input(meta, "catalog", cfg.paths.catalog)
    return trajs


def _load_neighbors(cfg: PipelineConfig):
    _require(neighbors_path(cfg), reps_path(cfg))
    sets, meta = load_neighbor_sets(neighbors_path(cfg))
    verify_input(meta, "reps", reps_path(cfg))
    verify_input(meta, "catalog", cfg.paths.catalog)
    return sets


def cmd_augment(cfg: PipelineConfig) -> list[Path]:
    sets = _load_neighbors(cfg)
    catalog = load_catalog(cfg.paths.catalog)
    written = []
    cfg.out("augmented").mkdir(parents=True, exist_ok=True)
    for task in cfg.tasks:
        train = _load_part(cfg, task, "train")
        out = augment_dataset(train, sets, cfg.augment, catalog.domains)
        meta = _meta(cfg, "augment", {"neighbors": neighbors_path(cfg), "trajectories": trajectory_path(cfg, task, "train")})
        meta.update(factor=cfg.augment.factor, replace_prob=cfg.augment.replace_prob)
        path = augmented_path(cfg, task)
        save_trajectories(path, out, cfg.max_len, meta)
        written.append(path)
    return written


def cmd_benchmark(cfg: PipelineConfig) -> EvalReport:
    R = _load_reps(cfg)
    catalog = load_catalog(cfg.paths.catalog)
    sets = _load_neighbors(cfg) if any(f > 1 for f in cfg.factors) else None
    internal = {t: TaskSplits(*(_load_part(cfg, t, part) for part in SPLITS)) for t in cfg.tasks}
    externals = {name: {t: _load_part(cfg, t, name) for t in cfg.tasks} for name in cfg.paths.external}
    report = run_benchmark(
        internal, externals, R, cfg.augment, cfg.factors, sets, catalog.domains, cfg.classifier, "medrep"
    )
    if cfg.baseline:
        table = matched_random_table(R.values, cfg.seed)
        base = run_benchmark(
            internal, externals, table, cfg.augment, (1,), None, catalog.domains, cfg.classifier, "baseline",
            trainable=True,
        )
        report.rows += base.rows
        report.selection.update(base.selection)
    out = report_dir(cfg)
    inputs = {"catalog": cfg.paths.catalog, "reps": reps_path(cfg)}
    if sets is not None:
        inputs["neighbors"] = neighbors_path(cfg)
    meta = _meta(cfg, "benchmark", inputs)
    _write_text(out / "report.tsv", _provenance_line(cfg) + report.to_tsv())
    doc = json.loads(report.to_json())
    doc["meta"] = meta
    _write_text(out / "report.json", json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return report


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medrep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", help="generate a synthetic vocabulary, ontology and cohorts")
    s.add_argument("spec", help="TOML synth spec")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    for name, text in (
        ("train-reps", "train graph representations"),
        ("neighbors", "build the neighbor index"),
        ("build-trajectories", "tokenize records into task datasets"),
        ("augment", "write augmented training sets"),
        ("benchmark", "train classifiers and write the evaluation report"),
    ):
        c = sub.add_parser(name, help=text)
        c.add_argument("config", help="TOML pipeline config")
        c.add_argument("--seed", type=int)
        if name in ("augment", "benchmark"):
            c.add_argument("--factor", type=int)
            c.add_argument("--replace-prob", type=float)
        if name == "benchmark":
            c.add_argument("--report-dir")
    return parser


COMMANDS = {
    "train-reps": cmd_train_reps,
    "neighbors": cmd_neighbors,
    "build-trajectories": cmd_build_trajectories,
    "augment": cmd_augment,
    "benchmark": cmd_benchmark,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args.spec, args.out, args.seed)
        else:
            overrides = {
                key: getattr(args, key)
                for key in ("seed", "factor", "replace_prob", "report_dir")
                if getattr(args, key, None) is not None
            }
            COMMANDS[args.command](load_config(args.config, overrides))
    except MedRepError as exc:
        print(f"medrep {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
