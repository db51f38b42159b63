"""Command-line entry point: ``ctcreorder <subcommand> ...``.

Every subcommand writes ``<out>/<command>.report.json`` (validated against the
bundled schema) next to its artifacts. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import statistics
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import __version__
from .errors import ConfigError, DataError, NumericalError
from .nn_encoder import CTCEncoder, load_checkpoint, save_checkpoint
from .pipeline import (decode_corpus, difficulty_bins, evaluate, model_config_for, per_utterance,
                       read_hypotheses, write_hypotheses)
from .reorder_metrics import corpus_wer
from .saliency_viz import (all_reordering_matrices, asr_annotations, export_heatmap,
                           reordering_matrix, saliency_layer)
from .synth_corpus import TaskSpec, expected_difficulty, generate, load_manifest, merge, save_manifest
from .trainer import TrainConfig, examples_from_manifest, train

log = logging.getLogger("ctcreorder")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DEFAULT_CONFIG = {
    "seed": 0,
    "task": {},
    "data": {"n_train": 2000, "n_test": 200},
    "model": {},
    "train": {},
    "decode": {"average_checkpoints": True, "batch_size": 64},
    "sweep": {"layers": None},
}


# ---------------------------------------------------------------------------
# configuration


def resolve_config(raw: dict | None, seed: int | None = None) -> dict:
    """Fill defaults and propagate the top-level seed into the task, model and train sections.

    Explicit per-section seeds win unless ``seed`` (the --seed flag) is given.
    """
    raw = copy.deepcopy(raw or {})
    unknown = set(raw) - set(DEFAULT_CONFIG) - {"mixture"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in raw.items():
        if isinstance(cfg.get(key), dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            cfg[key].update(value)
        else:
            cfg[key] = value
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for section in ("task", "model", "train"):
        if seed is not None or "seed" not in cfg[section]:
            cfg[section]["seed"] = cfg["seed"]
    mixture = cfg.get("mixture")
    if mixture is not None and (not isinstance(mixture, list) or not all(isinstance(m, dict) for m in mixture)):
        raise ConfigError("mixture must be a list of task overrides")
    # validate eagerly so bad files fail before any work
    TaskSpec.from_dict(cfg["task"])
    TrainConfig.from_dict(cfg["train"])
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def load_config(path, seed: int | None = None) -> dict:
    if path is None:
        return resolve_config({}, seed)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = json.loads(path.read_text())
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve_config(raw, seed)


def task_specs(cfg: dict) -> list[TaskSpec]:
    base = cfg["task"]
    if not cfg.get("mixture"):
        return [TaskSpec.from_dict(base)]
    return [TaskSpec.from_dict({**base, **over}) for over in cfg["mixture"]]


def build_split(cfg: dict, n: int, split: str):
    specs = task_specs(cfg)
    if len(specs) == 1:
        return generate(specs[0], n, split)
    sizes = [len(a) for a in np.array_split(np.arange(n), len(specs))]
    parts = [generate(s, k, f"{split}.{i}") for i, (s, k) in enumerate(zip(specs, sizes)) if k]
    return merge(parts, split)


# ---------------------------------------------------------------------------
# reports


def _schema() -> dict:
    return json.loads(resources.files("ctcreorder").joinpath("schemas/report.schema.json").read_text())


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_report(out: Path, command: str, started: float, metrics: dict, artifacts: dict,
                 cfg: dict | None = None, seed: int | None = None, tables: dict | None = None) -> Path:
    report = {
        "command": command,
        "tool_version": __version__,
        "config_hash": config_hash(cfg) if cfg is not None else None,
        "seed": seed if seed is not None else (cfg["seed"] if cfg is not None else None),
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "torch": torch.__version__.split("+")[0]},
        "wall_clock_seconds": round(time.perf_counter() - started, 6),
        "metrics": _jsonable(metrics),
        "artifacts": {k: str(v) for k, v in sorted(artifacts.items())},
    }
    if tables:
        report["tables"] = _jsonable(tables)
    try:
        jsonschema.validate(report, _schema())
    except jsonschema.ValidationError as exc:
        raise DataError(f"report failed schema validation: {exc.message}") from exc
    path = out / f"{command}.report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def write_rows(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _data_path(args, default_name: str) -> Path:
    path = Path(args.data)
    return path / default_name if path.is_dir() else path


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> dict:
    started = time.perf_counter()
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    artifacts, metrics = {}, {}
    for split, n in (("train", cfg["data"]["n_train"]), ("test", cfg["data"]["n_test"])):
        manifest = build_split(cfg, int(n), split)
        save_manifest(manifest, out / f"{split}.jsonl")
        artifacts[f"{split}_manifest"] = f"{split}.jsonl"
        r_pi = [u.r_pi for u in manifest.utterances]
        metrics[f"{split}_utterances"] = len(manifest.utterances)
        metrics[f"{split}_mean_r_pi"] = float(np.mean(r_pi))
    if not cfg.get("mixture"):
        mean, stderr = expected_difficulty(task_specs(cfg)[0])
        metrics["expected_r_pi"], metrics["expected_r_pi_stderr"] = mean, stderr
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    artifacts["config"] = "config.json"
    return {"report": write_report(out, "gen-data", started, metrics, artifacts, cfg)}


def _train_one(cfg: dict, manifest, out: Path | None, model_overrides: dict | None = None):
    overrides = dict(cfg["model"], **(model_overrides or {}))
    mcfg = model_config_for(manifest, overrides)
    tcfg = TrainConfig.from_dict(cfg["train"])
    examples = examples_from_manifest(manifest, mcfg.asr_layer is not None, tcfg.use_distilled, mcfg)
    result = train(CTCEncoder(mcfg), examples, tcfg, out_dir=out)
    final = result.averaged(tcfg.average_last_k) if cfg["decode"]["average_checkpoints"] else result.model
    return result, final


def cmd_train(args) -> dict:
    started = time.perf_counter()
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    manifest = load_manifest(_data_path(args, "train.jsonl"))
    result, final = _train_one(cfg, manifest, out / "checkpoints")
    save_checkpoint(out / "model.bin", final)
    result.log.write(out / "train_log.jsonl")
    last = result.log.records[-1] if result.log.records else {}
    metrics = {"steps": len(result.log.records), "final_loss": last.get("loss"),
               "final_st_loss": last.get("st_loss"), "final_asr_loss": last.get("asr_loss"),
               "model_digest": final.config.digest(), "train_utterances": len(manifest.utterances)}
    artifacts = {"model": "model.bin", "train_log": "train_log.jsonl", "checkpoints": "checkpoints"}
    return {"report": write_report(out, "train", started, metrics, artifacts, cfg)}


def _check_model_matches(cfg: dict, model: CTCEncoder, manifest, model_path: Path) -> None:
    expected = model_config_for(manifest, cfg["model"])
    if expected.digest() != model.config.digest():
        raise ConfigError(f"{model_path}: model configuration does not match the config file")
    report = model_path.parent / "train.report.json"
    if report.exists():
        trained_with = json.loads(report.read_text()).get("config_hash")
        if trained_with is not None and trained_with != config_hash(cfg):
            raise ConfigError(f"config hash {config_hash(cfg)[:12]} differs from the one used for "
                              f"training ({trained_with[:12]})")


def cmd_decode(args) -> dict:
    started = time.perf_counter()
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    manifest = load_manifest(_data_path(args, "test.jsonl"))
    model_path = Path(args.model)
    model = load_checkpoint(model_path)
    if args.config is not None:
        _check_model_matches(cfg, model, manifest, model_path)
    hyps = decode_corpus(model, manifest, cfg["decode"]["batch_size"])
    write_hypotheses(out / "hyps.jsonl", hyps)
    metrics = {"utterances": len(hyps), "model_digest": model.config.digest()}
    return {"report": write_report(out, "decode", started, metrics, {"hypotheses": "hyps.jsonl"},
                                   cfg if args.config is not None else None, args.seed)}


def cmd_eval(args) -> dict:
    started = time.perf_counter()
    out = _out_dir(args)
    manifest = load_manifest(_data_path(args, "test.jsonl"))
    hyps = read_hypotheses(args.hyps)
    seed = args.seed if args.seed is not None else 0
    artifacts = {}
    if args.kind == "bleu":
        m = evaluate(manifest, hyps)
        metrics = {k: m[k] for k in ("num_utterances", "bleu", "exact_match")}
    elif args.kind == "wer":
        by_id = {h.id: h for h in hyps}
        pairs = [(u, by_id.get(u.id)) for u in manifest.utterances]
        if any(h is None or h.asr_tokens is None for _, h in pairs):
            raise DataError("WER needs asr_tokens for every utterance")
        metrics = {"num_utterances": len(pairs),
                   "wer": corpus_wer([h.asr_tokens for _, h in pairs], [u.transcription for u, _ in pairs])}
    else:
        m = evaluate(manifest, hyps, baseline_trials=args.trials, seed=seed)
        metrics = {k: m[k] for k in ("num_utterances", "mean_r_acc", "mean_r_pi", "random_baseline_r_acc")}
        metrics["baseline_trials"] = args.trials
        write_rows(out / "per_utterance.csv", per_utterance(manifest, hyps))
        artifacts["per_utterance"] = "per_utterance.csv"
    return {"report": write_report(out, f"eval-{args.kind}", started, metrics, artifacts, seed=seed)}


def cmd_bin_analysis(args) -> dict:
    from .plotting import plot_bins

    started = time.perf_counter()
    out = _out_dir(args)
    manifest = load_manifest(_data_path(args, "test.jsonl"))
    hyps = read_hypotheses(args.hyps)
    bins = difficulty_bins(manifest, hyps, args.bins)
    rows = [{k: v for k, v in b.to_json().items() if k != "ids"} for b in bins]
    write_rows(out / "bins.csv", rows)
    (out / "bins.json").write_text(json.dumps([b.to_json() for b in bins], indent=1) + "\n")
    plot_bins(bins, out / "bins.png")
    bleu = [b.bleu for b in bins]
    racc = [b.mean_r_acc for b in bins]
    metrics = {"num_bins": len(bins), "num_utterances": sum(len(b.ids) for b in bins),
               "bleu_violations": sum(b > a for a, b in zip(bleu, bleu[1:])),
               "r_acc_violations": sum(b > a for a, b in zip(racc, racc[1:]))}
    artifacts = {"bins_csv": "bins.csv", "bins_json": "bins.json", "bins_png": "bins.png"}
    return {"report": write_report(out, "bin-analysis", started, metrics, artifacts,
                                   seed=args.seed, tables={"bins": rows})}


def cmd_saliency(args) -> dict:
    from .plotting import plot_heatmap

    started = time.perf_counter()
    out = _out_dir(args)
    manifest = load_manifest(_data_path(args, "test.jsonl"))
    model = load_checkpoint(args.model)
    utts = {u.id: u for u in manifest.utterances}
    uid = args.utt if args.utt is not None else manifest.utterances[0].id
    if uid not in utts:
        raise DataError(f"utterance {uid!r} not in {args.data}")
    feats = utts[uid].features
    notes = asr_annotations(model, feats, manifest.src_vocab)
    artifacts, rows = {}, []
    if args.layer is not None:
        sal = saliency_layer(model, feats, args.layer)
        header = ["frame"] + [f"out_{i}" for i in range(sal.values.shape[1])]
        c, s = export_heatmap(sal.values, out / f"saliency_layer{args.layer}", notes, header)
        p = plot_heatmap(sal.values, out / f"saliency_layer{args.layer}.png", xlabel="output frame")
        artifacts.update(csv=c.name, svg=s.name, png=p.name)
        rows.append({"layer": args.layer, "frames": int(sal.values.shape[0])})
    else:
        mats = [reordering_matrix(model, feats, args.token)] if args.token is not None \
            else all_reordering_matrices(model, feats)
        for r in mats:
            stem = f"token{r.occurrence}"
            c, s = export_heatmap(r.values, out / stem, notes)
            p = plot_heatmap(r.values, out / f"{stem}.png")
            artifacts.update({f"{stem}_csv": c.name, f"{stem}_svg": s.name, f"{stem}_png": p.name})
            arg = np.argmax(r.values, axis=0) if r.values.size else np.array([], dtype=int)
            rows.append({"occurrence": r.occurrence, "token": manifest.tgt_vocab.tokens[r.token],
                         "frames": r.frames, "argmax_frame_by_layer": [int(a) for a in arg]})
    metrics = {"utterance": uid, "layers": model.config.num_layers, "matrices": len(rows)}
    return {"report": write_report(out, "saliency", started, metrics, artifacts, seed=args.seed,
                                   tables={"matrices": rows})}


def bench_decode(model: CTCEncoder, manifest, repetitions: int = 5, batch_size: int = 64,
                 min_seconds: float = 0.5) -> dict:
    """Median greedy-decoding throughput over ``repetitions`` timed runs after a warm-up pass.

    Each run decodes the whole manifest as many times as needed to last at
    least ``min_seconds``, so small corpora still give a steady figure.
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    frames = sum(int(u.features.shape[0]) for u in manifest.utterances)
    n = len(manifest.utterances)
    t0 = time.perf_counter()
    decode_corpus(model, manifest, batch_size)
    passes = max(1, int(np.ceil(min_seconds / max(time.perf_counter() - t0, 1e-9))))
    rates = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for _ in range(passes):
            decode_corpus(model, manifest, batch_size)
        rates.append(n * passes / (time.perf_counter() - t0))
    med = statistics.median(rates)
    return {"utterances": n, "input_frames": frames, "repetitions": repetitions, "passes_per_run": passes,
            "median_utt_per_sec": med, "median_frames_per_sec": med * frames / n,
            "min_utt_per_sec": min(rates), "max_utt_per_sec": max(rates),
            "max_rel_deviation": max(abs(r - med) / med for r in rates),
            "torch_threads": torch.get_num_threads()}


def cmd_bench_decode(args) -> dict:
    started = time.perf_counter()
    out = _out_dir(args)
    manifest = load_manifest(_data_path(args, "test.jsonl"))
    model = load_checkpoint(args.model)
    metrics = bench_decode(model, manifest, args.repetitions)
    return {"report": write_report(out, "bench-decode", started, metrics, {}, seed=args.seed)}


def cmd_layer_sweep(args) -> dict:
    from .plotting import plot_layer_sweep

    started = time.perf_counter()
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    train_set = load_manifest(_data_path(args, "train.jsonl"))
    if Path(args.data).is_dir():
        test_set = load_manifest(Path(args.data) / "test.jsonl")
    elif args.test is not None:
        test_set = load_manifest(args.test)
    else:
        raise ConfigError("--test is required when --data names a single manifest")
    L = model_config_for(train_set, cfg["model"]).num_layers
    layers = cfg["sweep"]["layers"] or list(range(1, L + 1))
    rows = []
    for layer in [None] + list(layers):
        _, model = _train_one(cfg, train_set, None, {"asr_layer": layer})
        hyps = decode_corpus(model, test_set, cfg["decode"]["batch_size"])
        name = "single" if layer is None else f"mtl_layer{layer}"
        write_hypotheses(out / f"{name}.hyps.jsonl", hyps)
        m = evaluate(test_set, hyps)
        rows.append({"layer": layer, "bleu": m["bleu"], "exact_match": m["exact_match"],
                     "mean_r_acc": m["mean_r_acc"], "asr_wer": m.get("asr_wer")})
        log.info("layer %s: BLEU %.4f", layer, m["bleu"])
    write_rows(out / "layer_sweep.csv", [{k: ("" if v is None else v) for k, v in r.items()} for r in rows])
    plot_layer_sweep(rows, out / "layer_sweep.png")
    base = rows[0]["bleu"]
    best = max(rows[1:], key=lambda r: r["bleu"])
    metrics = {"single_task_bleu": base, "best_mtl_layer": best["layer"], "best_mtl_bleu": best["bleu"],
               "best_mtl_minus_single": best["bleu"] - base}
    artifacts = {"csv": "layer_sweep.csv", "png": "layer_sweep.png"}
    return {"report": write_report(out, "layer-sweep", started, metrics, artifacts, cfg,
                                   tables={"layers": rows})}


def cmd_run(args) -> dict:
    """gen-data, train, decode and all evaluations in one directory."""
    started = time.perf_counter()
    cfg = load_config(args.config, args.seed)
    out = _out_dir(args)
    train_set = build_split(cfg, int(cfg["data"]["n_train"]), "train")
    test_set = build_split(cfg, int(cfg["data"]["n_test"]), "test")
    save_manifest(train_set, out / "train.jsonl")
    save_manifest(test_set, out / "test.jsonl")
    result, model = _train_one(cfg, train_set, out / "checkpoints")
    save_checkpoint(out / "model.bin", model)
    result.log.write(out / "train_log.jsonl")
    hyps = decode_corpus(model, test_set, cfg["decode"]["batch_size"])
    write_hypotheses(out / "hyps.jsonl", hyps)
    metrics = evaluate(test_set, hyps, baseline_trials=args.trials, seed=cfg["seed"])
    artifacts = {"train_manifest": "train.jsonl", "test_manifest": "test.jsonl", "model": "model.bin",
                 "train_log": "train_log.jsonl", "hypotheses": "hyps.jsonl"}
    return {"report": write_report(out, "run", started, metrics, artifacts, cfg)}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctcreorder",
                                description="Train and analyse CTC translation models on synthetic reordering tasks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help, config=False, data=False, model=False, hyps=False):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override every seed in the config")
        if config:
            sp.add_argument("--config", default=None, help="JSON experiment config")
        if data:
            sp.add_argument("--data", required=True, help="manifest file or directory holding it")
        if model:
            sp.add_argument("--model", required=True, help="checkpoint file")
        if hyps:
            sp.add_argument("--hyps", required=True, help="hypothesis JSON-lines file")
        return sp

    add("gen-data", cmd_gen_data, "generate train/test manifests", config=True)
    add("train", cmd_train, "train a model on a train manifest", config=True, data=True)
    add("decode", cmd_decode, "greedy-decode a manifest", config=True, data=True, model=True)
    sp = add("eval", cmd_eval, "score hypotheses against a manifest", data=True, hyps=True)
    sp.add_argument("kind", choices=["bleu", "wer", "reorder"])
    sp.add_argument("--trials", type=int, default=1000, help="random-permutation baseline trials")
    sp = add("bin-analysis", cmd_bin_analysis, "metrics per reordering-difficulty bin", data=True, hyps=True)
    sp.add_argument("--bins", type=int, default=5)
    sp = add("saliency", cmd_saliency, "saliency / reordering matrices for one utterance",
             data=True, model=True)
    sp.add_argument("--utt", default=None, help="utterance id (default: first in manifest)")
    group = sp.add_mutually_exclusive_group()
    group.add_argument("--layer", type=int, default=None, help="export the saliency matrix of this layer")
    group.add_argument("--token", type=int, default=None, help="decoded token occurrence index")
    sp = add("bench-decode", cmd_bench_decode, "greedy decoding throughput", data=True, model=True)
    sp.add_argument("--repetitions", type=int, default=5)
    sp = add("layer-sweep", cmd_layer_sweep, "single-task vs auxiliary loss at every layer",
             config=True, data=True)
    sp.add_argument("--test", default=None, help="test manifest when --data is a file")
    sp = add("run", cmd_run, "generate, train, decode and evaluate", config=True)
    sp.add_argument("--trials", type=int, default=1000)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(result["report"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
