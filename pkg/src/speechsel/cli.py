"""Stage-oriented command line for the pipeline.

Eight subcommands cover the artifact graph end to end::

    tokenize-train   waveforms -> codebooks file
    tokenize         corpus + codebooks -> token grids + tokenized corpus
    select           tokenized corpus -> per-seed selection.json
    pretrain         backbone + selection (+ audio embeddings) -> pretrained.ckpt
    finetune         pretrained.ckpt -> finetuned.ckpt
    eval             finetuned.ckpt -> metrics.json + aggregate.json
    ablate           seven-row combination grid -> grid.json
    report           grid.json / aggregate.json -> report.md + report.csv

Every stage takes ``--config`` (a versioned JSON document), optional dotted
``--override key=value`` pairs, ``--seed`` to restrict to one seed, and
``--dry-run`` to validate configuration and prerequisites without writing.
Stages are idempotent: rerunning one with the same config and seed rewrites
byte-identical artifacts.

Run artifacts live under ``<run root>/<spec hash>/seed<k>/``; the run root
comes from the ``SPEECHSEL_RUN_ROOT`` environment variable when set, else
``paths.run_root``.  A lock file guards each run directory so only one stage
process works in it at a time.

Exit codes: 0 success, 1 usage or configuration error, 2 missing or malformed
data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import sys
from dataclasses import fields as dataclass_fields
from dataclasses import replace as dc_replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .corpus import (
    TASKS,
    CorpusBundle,
    SyntheticSpec,
    Task,
    WhitespaceTokenizer,
    load_corpus,
    save_corpus,
    synth_generate,
)
from .errors import (
    ConfigError,
    DataError,
    InvalidConfig,
    LockHeld,
    MissingPrerequisite,
    NumericalError,
)
from .experiment import (
    GRID_ROWS,
    ModelBundle,
    RunSpec,
    TrainSettings,
    _metric_value,
    _row_spec,
    ablation_grid,
    bag_predict,
    clear_stage0_cache,
    evaluate_bundle,
    finetune_run,
    prepare_run,
    render_csv,
    render_markdown,
    select_audio_tokens,
    spec_hash,
)
from .model import LmConfig, load_checkpoint, save_checkpoint
from .rvq import (
    encode,
    flatten_grid,
    frame_features,
    load_codebooks,
    save_codebooks,
    save_grid,
    train_codebooks,
)
from .selection import SelectionResult
from .training import TrainResult

ENV_RUN_ROOT = "SPEECHSEL_RUN_ROOT"
CONFIG_VERSION = 1


def _lm_defaults() -> Dict:
    cfg = LmConfig()
    # n_audio and seed are managed by the pipeline (selection size / run seed)
    return {name: getattr(cfg, name)
            for name in ("d_model", "n_layers", "n_heads", "context", "n_text")}


def _default_config() -> Dict:
    ts = TrainSettings()
    return {
        "version": CONFIG_VERSION,
        "paths": {
            "corpus": None,
            "waves_dir": None,
            "codebooks": None,
            "grids_dir": None,
            "tokenized_corpus": None,
            "run_root": "runs",
        },
        "tokenizer": {
            "n_layers": 5,
            "n_codewords": 100,
            "n_bands": 16,
            "sample_rate": 16000,
            "epochs": 20,
            "seed": 0,
        },
        "selection": {
            "method": "lasso",
            "target_count": 73,
            "semantic_filter": True,
            "band": 0.1,
            "max_bisect": 30,
        },
        "lm": _lm_defaults(),
        "stage0": {"lr": ts.stage0_lr, "epochs": ts.stage0_epochs,
                   "patience": ts.stage0_patience},
        "stage2": {"lr": ts.stage2_lr, "epochs": ts.stage2_epochs,
                   "patience": ts.stage2_patience},
        "stage3": {"lr": ts.stage3_lr, "epochs": ts.stage3_epochs,
                   "patience": ts.stage3_patience,
                   "lora_rank": ts.lora_rank, "lora_alpha": ts.lora_alpha},
        "experiment": {
            "task": "afd",
            "metric": None,
            "modality": "text+audio",
            "audio_pretraining": True,
            "seeds": [0, 1, 2, 3, 4],
            "batch_size": ts.batch_size,
        },
        "synthetic": None,
    }


DEFAULT_CONFIG = _default_config()


# --- config loading ---------------------------------------------------------------


def load_config(path) -> Dict:
    p = Path(path)
    if not p.exists():
        raise InvalidConfig(f"config file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"config {p} is not valid JSON: {e}") from e


def parse_override(text: str):
    """Split ``section.key=value``; the value is JSON when it parses, else a
    bare string."""
    key, sep, value = text.partition("=")
    if not sep:
        raise InvalidConfig(
            f"override {text!r} must look like section.key=value")
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise InvalidConfig(f"override {text!r} has an empty key")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return parts, parsed


def apply_overrides(raw: Dict, pairs: Sequence[str]) -> Dict:
    out = copy.deepcopy(raw)
    for text in pairs:
        parts, value = parse_override(text)
        node = out
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = {}
                node[part] = child
            if not isinstance(child, dict):
                raise InvalidConfig(
                    f"override {text!r}: {part!r} is not a config section")
            node = child
        node[parts[-1]] = value
    return out


def validate_config(raw: Dict) -> Dict:
    """Check the document against the known schema and fill in defaults.

    Unknown keys anywhere are rejected so typos cannot silently fall back to
    defaults.  Returns the fully resolved config.
    """
    if not isinstance(raw, dict):
        raise InvalidConfig("config root must be a JSON object")
    unknown = sorted(set(raw) - set(DEFAULT_CONFIG))
    if unknown:
        raise InvalidConfig(f"unknown top-level config keys: {unknown}")
    if "version" not in raw:
        raise InvalidConfig("config must carry a 'version' field")
    if raw["version"] != CONFIG_VERSION:
        raise InvalidConfig(
            f"unsupported config version {raw['version']!r}; "
            f"this package reads version {CONFIG_VERSION}")
    cfg = _default_config()
    for section, defaults in DEFAULT_CONFIG.items():
        if section == "version":
            continue
        if section == "synthetic":
            synth = raw.get("synthetic")
            if synth is None:
                continue
            if not isinstance(synth, dict):
                raise InvalidConfig("'synthetic' must be an object or null")
            synth_fields = {f.name for f in dataclass_fields(SyntheticSpec)}
            bad = sorted(set(synth) - synth_fields)
            if bad:
                raise InvalidConfig(f"unknown keys in 'synthetic': {bad}")
            cfg["synthetic"] = copy.deepcopy(synth)
            continue
        given = raw.get(section)
        if given is None:
            continue
        if not isinstance(given, dict):
            raise InvalidConfig(f"section {section!r} must be an object")
        bad = sorted(set(given) - set(defaults))
        if bad:
            raise InvalidConfig(f"unknown keys in {section!r}: {bad}")
        cfg[section].update(copy.deepcopy(given))
    return cfg


def spec_from_config(cfg: Dict) -> RunSpec:
    """Resolved config -> run specification; field problems surface as
    config errors."""
    exp, sel, tok = cfg["experiment"], cfg["selection"], cfg["tokenizer"]
    seeds = exp["seeds"]
    if not isinstance(seeds, (list, tuple)):
        seeds = [seeds]
    try:
        lm = LmConfig(**cfg["lm"])
        train = TrainSettings(
            batch_size=exp["batch_size"],
            stage0_lr=cfg["stage0"]["lr"],
            stage0_epochs=cfg["stage0"]["epochs"],
            stage0_patience=cfg["stage0"]["patience"],
            stage2_lr=cfg["stage2"]["lr"],
            stage2_epochs=cfg["stage2"]["epochs"],
            stage2_patience=cfg["stage2"]["patience"],
            stage3_lr=cfg["stage3"]["lr"],
            stage3_epochs=cfg["stage3"]["epochs"],
            stage3_patience=cfg["stage3"]["patience"],
            lora_rank=cfg["stage3"]["lora_rank"],
            lora_alpha=cfg["stage3"]["lora_alpha"],
        )
        return RunSpec(
            task=exp["task"],
            modality=exp["modality"],
            selection=sel["method"],
            semantic_filter=sel["semantic_filter"],
            audio_pretraining=exp["audio_pretraining"],
            seeds=tuple(seeds),
            target_count=sel["target_count"],
            metric=exp["metric"],
            lm=lm,
            n_layers=tok["n_layers"],
            n_codewords=tok["n_codewords"],
            selection_band=sel["band"],
            selection_max_bisect=sel["max_bisect"],
            train=train,
        )
    except TypeError as e:
        raise InvalidConfig(str(e)) from e


def _synthetic_spec(section: Dict) -> SyntheticSpec:
    d = dict(section)
    if "planted" in d:
        d["planted"] = {int(k): tuple(v) for k, v in d["planted"].items()}
    if "weak_planted" in d:
        d["weak_planted"] = {int(k): tuple(tuple(ids) for ids in groups)
                             for k, groups in d["weak_planted"].items()}
    for key in ("prior", "weak_coverage", "weak_emission", "split_fractions"):
        if key in d:
            d[key] = tuple(d[key])
    try:
        return SyntheticSpec(**d)
    except TypeError as e:
        raise InvalidConfig(f"synthetic section: {e}") from e


# --- run layout --------------------------------------------------------------------


def run_root(cfg: Dict) -> Path:
    root = os.environ.get(ENV_RUN_ROOT) or cfg["paths"]["run_root"] or "runs"
    return Path(root)


def run_dir_for(cfg: Dict, spec: RunSpec) -> Path:
    return run_root(cfg) / spec_hash(spec)


def seed_dir(rdir: Path, seed: int) -> Path:
    return rdir / f"seed{seed}"


class _lock:
    """Exclusive per-directory lock; existence of the file IS the lock."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / ".lock"
        self.fd: Optional[int] = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeld(
                f"lock file {self.path} exists; another stage is working in "
                "this run directory (delete the file if it is stale)")
        os.write(self.fd, f"{os.getpid()}\n".encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
        self.path.unlink(missing_ok=True)
        return False


def _jsonable(obj):
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_json(path: Path, payload: Dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2, default=_jsonable)
        f.write("\n")


def _write_spec_file(rdir: Path, spec: RunSpec) -> None:
    _write_json(rdir / "spec.json",
                {"spec": spec.to_dict(), "spec_hash": spec_hash(spec)})


def _curves_payload(curves: Dict[str, TrainResult]) -> Dict:
    return {name: {"curve": r.curve, "best_epoch": r.best_epoch,
                   "best_value": r.best_value, "n_epochs": r.n_epochs}
            for name, r in curves.items()}


# --- corpus plumbing ---------------------------------------------------------------


def _task_of(cfg: Dict) -> Task:
    name = cfg["experiment"]["task"]
    if name not in TASKS:
        raise InvalidConfig(f"unknown task {name!r}; known: {sorted(TASKS)}")
    return TASKS[name]


def _tokenized_corpus_path(cfg: Dict) -> Path:
    return Path(cfg["paths"]["tokenized_corpus"]
                or (run_root(cfg) / "corpus_tokenized.jsonl"))


def _resolve_corpus(cfg: Dict, *, materialize: bool = True) -> CorpusBundle:
    """Working corpus for model stages: the tokenized corpus when present,
    else the raw corpus, else a freshly generated synthetic one."""
    paths = cfg["paths"]
    task = _task_of(cfg)
    tokenizer = WhitespaceTokenizer(cfg["lm"]["n_text"])
    tk = _tokenized_corpus_path(cfg)
    if tk.exists():
        return load_corpus(tk, task, tokenizer=tokenizer)
    cp = paths["corpus"]
    if cp and Path(cp).exists():
        return load_corpus(cp, task, tokenizer=tokenizer)
    if cfg["synthetic"] is not None:
        bundle = synth_generate(_synthetic_spec(cfg["synthetic"]))
        if materialize and cp:
            Path(cp).parent.mkdir(parents=True, exist_ok=True)
            save_corpus(bundle, cp)
        return bundle
    raise MissingPrerequisite(
        "no corpus available: point paths.corpus (or paths.tokenized_corpus) "
        "at a JSONL file, or add a 'synthetic' section to generate one")


def _check_corpus_available(cfg: Dict) -> None:
    """Dry-run prerequisite: a corpus either exists or can be generated."""
    paths = cfg["paths"]
    if _tokenized_corpus_path(cfg).exists():
        return
    cp = paths["corpus"]
    if cp and Path(cp).exists():
        return
    if cfg["synthetic"] is not None:
        _synthetic_spec(cfg["synthetic"])
        return
    raise MissingPrerequisite(
        "no corpus available: point paths.corpus (or paths.tokenized_corpus) "
        "at a JSONL file, or add a 'synthetic' section to generate one")


def _check_audio_tokens(corpus: CorpusBundle, cfg: Dict) -> None:
    if any(r.audio_tokens for r in corpus.all_records()):
        return
    raise MissingPrerequisite(
        "corpus carries no audio token ids; missing tokenized corpus "
        f"{_tokenized_corpus_path(cfg)} (run the tokenize stage first)")


def _load_selection(sdir: Path, spec: RunSpec) -> Optional[SelectionResult]:
    if spec.modality != "text+audio":
        return None
    p = sdir / "selection.json"
    if not p.exists():
        raise MissingPrerequisite(
            f"missing {p}; run the select or pretrain stage first")
    return SelectionResult.from_json(p.read_text(encoding="utf-8"))


# --- stages ------------------------------------------------------------------------


def stage_tokenize_train(cfg: Dict, args) -> str:
    """Fit residual codebooks on every waveform under paths.waves_dir."""
    tok = cfg["tokenizer"]
    waves = cfg["paths"]["waves_dir"]
    if not waves:
        raise InvalidConfig("tokenize-train needs paths.waves_dir")
    wdir = Path(waves)
    if not wdir.is_dir():
        raise MissingPrerequisite(f"waveform directory not found: {wdir}")
    files = sorted(wdir.glob("*.npy"))
    if not files:
        raise MissingPrerequisite(f"no .npy waveforms in {wdir}")
    out = Path(cfg["paths"]["codebooks"] or (run_root(cfg) / "codebooks.rvqc"))
    if args.dry_run:
        return f"tokenize-train: dry-run ok ({len(files)} waveforms -> {out})"
    frames = np.concatenate(
        [frame_features(np.load(f), tok["sample_rate"],
                        n_bands=tok["n_bands"]).frames for f in files], axis=0)
    codebooks = train_codebooks(frames, n_layers=tok["n_layers"],
                                n_codewords=tok["n_codewords"],
                                seed=tok["seed"], epochs=tok["epochs"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_codebooks(out, codebooks)
    return (f"tokenize-train: {tok['n_layers']}x{tok['n_codewords']} codebooks "
            f"from {frames.shape[0]} frames ({len(files)} waveforms) -> {out}")


def stage_tokenize(cfg: Dict, args) -> str:
    """Quantize each record's waveform into a token grid and write the
    tokenized corpus."""
    paths = cfg["paths"]
    cb_path = Path(paths["codebooks"] or (run_root(cfg) / "codebooks.rvqc"))
    if not cb_path.exists():
        raise MissingPrerequisite(
            f"codebooks not found at {cb_path}; run tokenize-train first")
    cp = paths["corpus"]
    if not cp or not Path(cp).exists():
        raise MissingPrerequisite(f"paths.corpus not found: {cp!r}")
    out_path = _tokenized_corpus_path(cfg)
    if args.dry_run:
        return f"tokenize: dry-run ok ({cp} + {cb_path} -> {out_path})"
    task = _task_of(cfg)
    bundle = load_corpus(cp, task,
                         tokenizer=WhitespaceTokenizer(cfg["lm"]["n_text"]))
    codebooks = load_codebooks(cb_path)
    grids_dir = Path(paths["grids_dir"] or (run_root(cfg) / "grids"))
    grids_dir.mkdir(parents=True, exist_ok=True)
    waves_root = Path(paths["waves_dir"]) if paths["waves_dir"] else None
    sample_rate = cfg["tokenizer"]["sample_rate"]
    n_bands = cfg["tokenizer"]["n_bands"]
    n_tokenized = 0
    new_splits: Dict[str, List] = {s: [] for s in bundle.splits}
    for split, records in bundle.splits.items():
        for r in records:
            if r.audio_path is None:
                new_splits[split].append(r)
                continue
            wav_path = Path(r.audio_path)
            if not wav_path.is_absolute() and waves_root is not None:
                wav_path = waves_root / wav_path
            if not wav_path.exists():
                raise MissingPrerequisite(
                    f"waveform for record {r.id!r} not found: {wav_path}")
            frame_seq = frame_features(np.load(wav_path), sample_rate,
                                       n_bands=n_bands)
            grid = encode(frame_seq, codebooks)
            grid_path = grids_dir / f"{r.id}.tgrd"
            save_grid(grid_path, grid)
            flat = flatten_grid(grid, codebooks)
            new_splits[split].append(dc_replace(
                r, grid_path=str(grid_path),
                audio_tokens=tuple(int(t) for t in flat)))
            n_tokenized += 1
    meta = dict(bundle.meta)
    meta.update({
        "n_text": int(meta.get("n_text", cfg["lm"]["n_text"])),
        "n_audio": codebooks.n_layers * codebooks.n_codewords,
        "tokenizer": {"n_layers": codebooks.n_layers,
                      "n_codewords": codebooks.n_codewords,
                      "codebooks": str(cb_path)},
    })
    out = CorpusBundle(splits=new_splits, meta=meta)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(out, out_path)
    return (f"tokenize: {n_tokenized}/{out.n_records} records carry token "
            f"grids -> {out_path}")


def stage_select(cfg: Dict, args) -> str:
    """Pick the audio token subset for each seed and store selection.json."""
    spec = spec_from_config(cfg)
    if spec.modality != "text+audio":
        raise InvalidConfig(
            "select only applies to token runs "
            "(experiment.modality 'text+audio')")
    rdir = run_dir_for(cfg, spec)
    if args.dry_run:
        _check_corpus_available(cfg)
        return (f"select: dry-run ok ({spec.selection}, target "
                f"{spec.target_count}, {len(spec.seeds)} seeds -> {rdir})")
    corpus = _resolve_corpus(cfg)
    _check_audio_tokens(corpus, cfg)
    with _lock(rdir):
        _write_spec_file(rdir, spec)
        kept = []
        for seed in spec.seeds:
            selection = select_audio_tokens(spec, corpus, seed)
            sdir = seed_dir(rdir, seed)
            sdir.mkdir(parents=True, exist_ok=True)
            (sdir / "selection.json").write_text(selection.to_json() + "\n",
                                                 encoding="utf-8")
            kept.append(selection.n_selected)
        return (f"select: {spec.selection} kept {kept} tokens over "
                f"{len(spec.seeds)} seeds -> {rdir}")


def stage_pretrain(cfg: Dict, args) -> str:
    """Train the text backbone (and audio embeddings when enabled) per seed."""
    spec = spec_from_config(cfg)
    rdir = run_dir_for(cfg, spec)
    if args.dry_run:
        _check_corpus_available(cfg)
        return f"pretrain: dry-run ok ({len(spec.seeds)} seeds -> {rdir})"
    corpus = _resolve_corpus(cfg)
    if spec.modality == "text+audio":
        _check_audio_tokens(corpus, cfg)
    with _lock(rdir):
        _write_spec_file(rdir, spec)
        for seed in spec.seeds:
            params, config, selection, curves = prepare_run(spec, corpus, seed)
            sdir = seed_dir(rdir, seed)
            sdir.mkdir(parents=True, exist_ok=True)
            if selection is not None:
                (sdir / "selection.json").write_text(
                    selection.to_json() + "\n", encoding="utf-8")
            save_checkpoint(sdir / "pretrained.ckpt", params, config)
            _write_json(sdir / "pretrain_curves.json", _curves_payload(curves))
        return f"pretrain: {len(spec.seeds)} seeds ready -> {rdir}"


def stage_finetune(cfg: Dict, args) -> str:
    """Attach adapters and a head to each pretrained backbone and train."""
    spec = spec_from_config(cfg)
    rdir = run_dir_for(cfg, spec)
    missing = [str(seed_dir(rdir, s) / "pretrained.ckpt") for s in spec.seeds
               if not (seed_dir(rdir, s) / "pretrained.ckpt").exists()]
    if missing:
        raise MissingPrerequisite(
            f"missing pretrained checkpoints {missing}; "
            "run the pretrain stage first")
    if args.dry_run:
        _check_corpus_available(cfg)
        return f"finetune: dry-run ok ({len(spec.seeds)} seeds -> {rdir})"
    corpus = _resolve_corpus(cfg)
    with _lock(rdir):
        for seed in spec.seeds:
            sdir = seed_dir(rdir, seed)
            params, config, _, _ = load_checkpoint(sdir / "pretrained.ckpt")
            selection = _load_selection(sdir, spec)
            bundle, curve = finetune_run(spec, corpus, seed, params, config,
                                         selection)
            save_checkpoint(sdir / "finetuned.ckpt", bundle.params,
                            bundle.config, adapters=bundle.adapters,
                            head=bundle.head)
            _write_json(sdir / "finetune_curve.json",
                        _curves_payload({"stage3": curve}))
        return f"finetune: {len(spec.seeds)} classifiers trained -> {rdir}"


def stage_eval(cfg: Dict, args) -> str:
    """Score every seed on the test split; write per-seed metrics and the
    seed aggregate with the bagged ensemble."""
    spec = spec_from_config(cfg)
    rdir = run_dir_for(cfg, spec)
    missing = [str(seed_dir(rdir, s) / "finetuned.ckpt") for s in spec.seeds
               if not (seed_dir(rdir, s) / "finetuned.ckpt").exists()]
    if missing:
        raise MissingPrerequisite(
            f"missing finetuned checkpoints {missing}; "
            "run the finetune stage first")
    if args.dry_run:
        _check_corpus_available(cfg)
        return f"eval: dry-run ok ({len(spec.seeds)} seeds -> {rdir})"
    corpus = _resolve_corpus(cfg)
    task = TASKS[spec.task]
    with _lock(rdir):
        bundles = []
        values = []
        for seed in spec.seeds:
            sdir = seed_dir(rdir, seed)
            params, config, adapters, head = load_checkpoint(
                sdir / "finetuned.ckpt")
            if adapters is None or head is None:
                raise MissingPrerequisite(
                    f"{sdir / 'finetuned.ckpt'} lacks adapters or a "
                    "classifier head; rerun the finetune stage")
            selection = _load_selection(sdir, spec)
            bundle = ModelBundle(params=params, config=config,
                                 adapters=adapters, head=head,
                                 selection=selection, task=task)
            metrics = evaluate_bundle(spec, corpus, bundle, seed=seed)
            _write_json(sdir / "metrics.json", metrics)
            bundles.append(bundle)
            values.append(float(metrics["value"]))
        mean = float(np.mean(values))
        stdev = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        records = corpus.splits["test"]
        gold = np.asarray([task.label_index(r.label) for r in records],
                          dtype=np.int64)
        preds = bag_predict(bundles, records)
        bagged = float(_metric_value(spec.metric_name, gold, preds,
                                     len(task.class_names)))
        _write_json(rdir / "aggregate.json", {
            "task": spec.task,
            "spec_hash": spec_hash(spec),
            "metric_name": spec.metric_name,
            "seeds": list(spec.seeds),
            "values": values,
            "mean": mean,
            "stdev": stdev,
            "bagged": bagged,
        })
        return (f"eval: {spec.metric_name} mean {mean:.4f} stdev "
                f"{stdev:.4f} bagged {bagged:.4f} -> "
                f"{rdir / 'aggregate.json'}")


def stage_ablate(cfg: Dict, args) -> str:
    """Run the seven-row combination grid and store grid.json plus per-row
    artifacts under each row's own spec hash."""
    base = spec_from_config(cfg)
    rdir = run_dir_for(cfg, base)
    if args.dry_run:
        _check_corpus_available(cfg)
        return (f"ablate: dry-run ok ({len(GRID_ROWS)} rows x "
                f"{len(base.seeds)} seeds -> {rdir / 'grid.json'})")
    corpus = _resolve_corpus(cfg)
    _check_audio_tokens(corpus, cfg)
    with _lock(rdir):
        _write_spec_file(rdir, base)
        clear_stage0_cache()
        report = ablation_grid(base, corpus)
        root = run_root(cfg)
        row_hashes = {}
        for grid_row, row_result in zip(GRID_ROWS, report.rows):
            row_spec = _row_spec(base, grid_row)
            row_dir = root / spec_hash(row_spec)
            row_hashes[row_result.label] = spec_hash(row_spec)
            _write_spec_file(row_dir, row_spec)
            for outcome in row_result.result.outcomes:
                sdir = seed_dir(row_dir, outcome.seed)
                sdir.mkdir(parents=True, exist_ok=True)
                _write_json(sdir / "metrics.json", outcome.metrics)
                b = outcome.bundle
                if b.selection is not None:
                    (sdir / "selection.json").write_text(
                        b.selection.to_json() + "\n", encoding="utf-8")
                save_checkpoint(sdir / "finetuned.ckpt", b.params, b.config,
                                adapters=b.adapters, head=b.head)
        payload = report.to_dict()
        payload["metric_name"] = base.metric_name
        payload["seeds"] = list(base.seeds)
        payload["row_hashes"] = row_hashes
        _write_json(rdir / "grid.json", payload)
        best = max(report.rows, key=lambda r: r.result.mean)
        return (f"ablate: {len(report.rows)} rows x {len(base.seeds)} seeds; "
                f"best {best.label!r} mean {best.result.mean:.4f} -> "
                f"{rdir / 'grid.json'}")


def _single_markdown(agg: Dict) -> str:
    lines = [f"| seed | {agg['metric_name']} |", "|---|---|"]
    for seed, value in zip(agg["seeds"], agg["values"]):
        lines.append(f"| {seed} | {value:.4f} |")
    lines.append(f"| mean | {agg['mean']:.4f} |")
    lines.append(f"| stdev | {agg['stdev']:.4f} |")
    lines.append(f"| bagged | {agg['bagged']:.4f} |")
    return "\n".join(lines) + "\n"


def _single_csv(agg: Dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["seed", "metric_name", "value"])
    for seed, value in zip(agg["seeds"], agg["values"]):
        writer.writerow([seed, agg["metric_name"], f"{value:.6f}"])
    for name in ("mean", "stdev", "bagged"):
        writer.writerow([name, agg["metric_name"], f"{agg[name]:.6f}"])
    return buf.getvalue()


def stage_report(cfg: Dict, args) -> str:
    """Render report.md and report.csv from stored grid or aggregate
    results; rerunning yields byte-identical files."""
    spec = spec_from_config(cfg)
    rdir = run_dir_for(cfg, spec)
    grid_path = rdir / "grid.json"
    agg_path = rdir / "aggregate.json"
    if not grid_path.exists() and not agg_path.exists():
        raise MissingPrerequisite(
            f"nothing to report: neither {grid_path} nor {agg_path} exists; "
            "run ablate or eval first")
    source = grid_path if grid_path.exists() else agg_path
    if args.dry_run:
        return (f"report: dry-run ok ({source} -> {rdir / 'report.md'}, "
                f"{rdir / 'report.csv'})")
    with _lock(rdir):
        payload = json.loads(source.read_text(encoding="utf-8"))
        if source is grid_path:
            md = render_markdown(payload)
            csv_text = render_csv(payload)
        else:
            md = _single_markdown(payload)
            csv_text = _single_csv(payload)
        (rdir / "report.md").write_text(md, encoding="utf-8")
        (rdir / "report.csv").write_text(csv_text, encoding="utf-8")
        return f"report: wrote {rdir / 'report.md'} and {rdir / 'report.csv'}"


_STAGES = {
    "tokenize-train": stage_tokenize_train,
    "tokenize": stage_tokenize,
    "select": stage_select,
    "pretrain": stage_pretrain,
    "finetune": stage_finetune,
    "eval": stage_eval,
    "ablate": stage_ablate,
    "report": stage_report,
}


# --- entry point -------------------------------------------------------------------


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors, which this tool reserves
    # for data problems; remap onto the config/usage exit code instead
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="speechsel",
        description="Speech-token pipeline stages; see each stage's --help.")
    sub = parser.add_subparsers(dest="stage", metavar="STAGE", required=True)
    for name, fn in _STAGES.items():
        doc = (fn.__doc__ or "").split("\n")[0]
        p = sub.add_parser(name, help=doc, description=doc)
        p.add_argument("--config", required=True,
                       help="pipeline config JSON file")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="dotted config override, e.g. "
                            "selection.target_count=10 (repeatable)")
        p.add_argument("--seed", type=int, default=None,
                       help="restrict the stage to this one seed")
        p.add_argument("--dry-run", action="store_true",
                       help="validate config and prerequisites; write nothing")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    try:
        raw = load_config(args.config)
        raw = apply_overrides(raw, args.override)
        cfg = validate_config(raw)
        if args.seed is not None:
            cfg["experiment"]["seeds"] = [args.seed]
        summary = _STAGES[args.stage](cfg, args)
        print(summary)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
