"""Command-line entry point: ``ppgalign <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
Every command that produces files also writes ``manifest.json`` next to them.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .encoder import EncoderConfig, parameter_count
from .preprocess import PreprocessConfig, preprocess_recordings
from .probe import ProbeTask, extract_embeddings, nested_cv_evaluate
from .retrieval import DEFAULT_BATCH, evaluate_embeddings
from .signal import Modality, StoreError, open_store, stack_samples, write_array_store
from .synth import LatentDistribution, read_labels, synth_dataset
from .trainer import (
    TrainConfig, embed_pairs, encoder_from_checkpoint, finetune_multilabel, pretrain_contrastive,
    restore_contrastive,
)

log = logging.getLogger("ppgalign")

ENCODER_PRESETS = {"default": EncoderConfig, "grouped": EncoderConfig.grouped, "desk": EncoderConfig.desk}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    seed: int | None = None
    tool_version: str = __version__
    wall_time_s: float = 0.0
    outputs: list[str] = field(default_factory=list)
    argv: list[str] = field(default_factory=list)

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def load_flat_config(path) -> dict:
    """A flat YAML mapping of scalar or list values; nested mappings are rejected."""
    if path is None:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise DataError(f"config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise DataError(f"config {path}: expected a key-value mapping")
    for k, v in doc.items():
        if isinstance(v, dict):
            raise DataError(f"config {path}: key '{k}' is nested; config files must be flat")
    return doc


def _overrides(args, mapping: dict[str, str]) -> dict:
    """Flag values that were actually given, renamed to config keys."""
    return {key: getattr(args, dest) for dest, key in mapping.items() if getattr(args, dest, None) is not None}


def _write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _load_pair_stores(ppg_path, ecg_path):
    ppg, ecg = open_store(ppg_path), open_store(ecg_path)
    if ppg.header.modality is not Modality.PPG:
        raise DataError(f"{ppg_path}: expected a PPG store, got {ppg.header.modality.name}")
    if ecg.header.modality is not Modality.ECG:
        raise DataError(f"{ecg_path}: expected an ECG store, got {ecg.header.modality.name}")
    if len(ppg) != len(ecg):
        raise DataError(f"{ppg_path} has {len(ppg)} segments but {ecg_path} has {len(ecg)}")
    return ppg, ecg


def _read_index_csv(path, n: int, columns: list[str] | None = None) -> tuple[list[str], np.ndarray]:
    """Rows keyed by segment_index; returns the value columns and an n x k float matrix."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            rows = list(reader)
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if "segment_index" not in header:
        raise DataError(f"{path}: missing 'segment_index' column")
    cols = columns or [c for c in header if c != "segment_index"]
    missing = [c for c in cols if c not in header]
    if missing or not cols:
        raise DataError(f"{path}: missing value columns {missing or '(none)'}")
    out = np.full((n, len(cols)), np.nan)
    for line, r in enumerate(rows, start=2):
        try:
            i = int(r["segment_index"])
            vals = [float(r[c]) for c in cols]
        except (TypeError, ValueError) as e:
            raise DataError(f"{path}:{line}: {e}") from e
        if not 0 <= i < n:
            raise DataError(f"{path}:{line}: segment_index {i} outside 0..{n - 1}")
        out[i] = vals
    absent = np.flatnonzero(np.isnan(out).any(axis=1))
    if absent.size:
        raise DataError(f"{path}: no row for segment_index {int(absent[0])} ({absent.size} missing)")
    return cols, out


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args, manifest: RunManifest) -> list[Path]:
    dist = LatentDistribution(hr_range=(args.hr_min, args.hr_max), irregular_prob=args.irregular_prob)
    manifest.config = {
        "n": args.n, "seconds": args.seconds, "rate": args.rate,
        "hr_range": [args.hr_min, args.hr_max], "irregular_prob": args.irregular_prob,
    }
    manifest.seed = args.seed
    ds = synth_dataset(args.n, dist, args.seconds, args.rate, args.seed, args.out)
    return list(ds.paths.values())


def cmd_preprocess(args, manifest: RunManifest) -> list[Path]:
    conf = {**load_flat_config(args.config), **_overrides(args, {"target_rate": "target_rate_hz"})}
    try:
        cfg = PreprocessConfig(**conf)
    except TypeError as e:
        raise DataError(f"preprocess config: {e}") from e
    manifest.config = cfg.to_dict()
    ppg, ecg = _load_pair_stores(args.ppg, args.ecg)
    res = preprocess_recordings(ppg.waveforms(), ecg.waveforms(), cfg)
    out = Path(args.out)
    target_len = int(round(cfg.segment_seconds * cfg.target_rate_hz))
    P = stack_samples([p.ppg for p in res.pairs]) if res.pairs else np.zeros((0, target_len))
    E = stack_samples([p.ecg for p in res.pairs]) if res.pairs else np.zeros((0, target_len))
    paths = [out / "ppg.apss", out / "ecg.apss", out / "decisions.tsv"]
    write_array_store(P, paths[0], Modality.PPG, cfg.target_rate_hz)
    write_array_store(E, paths[1], Modality.ECG, cfg.target_rate_hz)
    paths[2].write_text("\n".join(res.manifest_lines()) + "\n")
    if args.labels:
        manifest.add_input(args.labels)
        rows = read_labels(args.labels)
        by_index = {int(r["segment_index"]): r for r in rows}
        kept = [d for d in res.decisions if d.kept]
        # every window inherits the labels of the recording it was cut from
        src = [d.recording for d in kept]
        with open(out / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            cols = list(rows[0].keys()) if rows else ["segment_index"]
            w.writerow(cols + ["source_index", "window"])
            for new_i, (d, r) in enumerate(zip(kept, src)):
                if r not in by_index:
                    raise DataError(f"{args.labels}: no row for recording {r}")
                row = dict(by_index[r], segment_index=new_i)
                w.writerow([row[c] for c in cols] + [r, d.index])
        paths.append(out / "labels.csv")
    n_kept = len(res.pairs)
    print(f"kept {n_kept} of {len(res.decisions)} windows")
    return paths


def _train_config(args, extra_keys=("encoder", "val_fraction")):
    conf = {**load_flat_config(args.config), **_overrides(args, {
        "steps": "total_steps", "warmup": "warmup_steps", "batch_size": "batch_size",
        "seed": "seed", "lr": "base_lr", "eval_every": "eval_every", "threads": "threads",
        "encoder": "encoder",
    })}
    extras = {k: conf.pop(k) for k in extra_keys if k in conf}
    try:
        cfg = TrainConfig.from_mapping(conf)
    except (TypeError, ValueError) as e:
        raise DataError(f"training config: {e}") from e
    preset = extras.get("encoder", "default")
    if preset not in ENCODER_PRESETS:
        raise DataError(f"unknown encoder preset '{preset}' (choose from {sorted(ENCODER_PRESETS)})")
    return cfg, ENCODER_PRESETS[preset](), extras


def cmd_pretrain(args, manifest: RunManifest) -> list[Path]:
    cfg, enc_cfg, extras = _train_config(args)
    val_fraction = float(extras.get("val_fraction", 0.1))
    if not 0 <= val_fraction < 1:
        raise DataError(f"val_fraction must be in [0, 1), got {val_fraction}")
    manifest.config = {**cfg.to_dict(), "encoder": enc_cfg.to_dict(), "val_fraction": val_fraction}
    manifest.seed = cfg.seed
    ppg, ecg = _load_pair_stores(args.ppg, args.ecg)
    n_val = int(round(len(ppg) * val_fraction))
    n_tr = len(ppg) - n_val
    if n_tr < 1:
        raise DataError(f"{args.ppg}: no training pairs after holding out {n_val} for validation")
    hist = pretrain_contrastive(
        ppg.data[:n_tr], ecg.data[:n_tr], ppg.data[n_tr:], ecg.data[n_tr:], cfg, enc_cfg,
        on_step=lambda s, l: log.info("step %d loss %.4f", s, l) if s % cfg.eval_every == 0 else None,
    )
    out = Path(args.out)
    best, last = out / "best.ckpt", out / "last.ckpt"
    save_checkpoint(hist.best, best)
    save_checkpoint(hist.last, last)
    _write_jsonl(out / "losses.jsonl", [
        {"step": i + 1, "loss": l, "lr": r} for i, (l, r) in enumerate(zip(hist.losses, hist.lrs))
    ])
    _write_jsonl(out / "validation.jsonl", [{"step": s, "val_loss": v} for s, v in hist.evaluations])
    print(f"best step {hist.best.step} val_loss {hist.best.validation_loss}")
    return [best, last, out / "losses.jsonl", out / "validation.jsonl"]


def cmd_eval_retrieval(args, manifest: RunManifest) -> list[Path]:
    manifest.config = {"batch": args.batch}
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.kind != "contrastive":
        raise DataError(f"{args.checkpoint}: expected a contrastive checkpoint, got '{ckpt.kind}'")
    ppg, ecg = _load_pair_stores(args.ppg, args.ecg)
    if len(ppg) == 0:
        raise DataError(f"{args.ppg}: store is empty")
    hp, he = embed_pairs(restore_contrastive(ckpt), ppg.data, ecg.data)
    reports, weighted, macro = evaluate_embeddings(hp, he, args.batch)
    out = Path(args.out)
    _write_jsonl(out / "retrieval_batches.jsonl", [{"batch": i, **r.as_dict()} for i, r in enumerate(reports)])
    summary = {"weighted": weighted.as_dict(), "macro": macro.as_dict(), "batch_size": args.batch}
    (out / "retrieval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for i, r in enumerate(reports):
        print(f"batch {i}: {r.format()}")
    print(f"weighted: {weighted.format()}")
    print(f"macro:    {macro.format()}")
    return [out / "retrieval_batches.jsonl", out / "retrieval.json"]


def cmd_probe(args, manifest: RunManifest) -> list[Path]:
    manifest.config = {"task": args.task, "column": args.column, "branch": args.branch}
    manifest.seed = args.seed
    ckpt = load_checkpoint(args.checkpoint)
    store = open_store(args.store)
    _, t = _read_index_csv(args.targets, len(store), [args.column] if args.column else None)
    if t.shape[1] != 1:
        raise DataError(f"{args.targets}: pass --column to choose one of several target columns")
    X = extract_embeddings(ckpt, store.data, branch=args.branch)
    try:
        res = nested_cv_evaluate(ProbeTask(args.task, X, t[:, 0]), seed=args.seed)
    except ValueError as e:
        raise DataError(f"{args.targets}: {e}") from e
    out = Path(args.out)
    _write_jsonl(out / "probe_folds.jsonl", res.records()[:-2])
    summary = {"task": args.task, "mean": res.mean, "std": res.std, "selected": res.selected,
               "leaked_fits": res.leaked_fits()}
    (out / "probe.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for r in res.records():
        print("\t".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return [out / "probe_folds.jsonl", out / "probe.json"]


def cmd_finetune(args, manifest: RunManifest) -> list[Path]:
    cfg, _, _ = _train_config(args, extra_keys=("encoder", "val_fraction"))
    manifest.config = {**cfg.to_dict(), "freeze_encoder": args.freeze_encoder, "columns": args.columns}
    manifest.seed = cfg.seed
    ckpt = load_checkpoint(args.checkpoint)
    store = open_store(args.store)
    cols, Y = _read_index_csv(args.labels, len(store), args.columns)
    if not np.isin(Y, (0.0, 1.0)).all():
        raise DataError(f"{args.labels}: label columns {cols} must be binary 0/1")
    res = finetune_multilabel(ckpt, store.data, Y, len(cols), cfg, freeze_encoder=args.freeze_encoder)
    res.checkpoint.meta["label_columns"] = cols
    out = Path(args.out)
    path = save_checkpoint(res.checkpoint, out / "finetuned.ckpt")
    _write_jsonl(out / "losses.jsonl", [{"step": i + 1, "loss": l} for i, l in enumerate(res.losses)])
    print(f"final loss {res.losses[-1] if res.losses else float('nan'):.4f}")
    return [path, out / "losses.jsonl"]


def cmd_inspect(args, manifest: RunManifest) -> list[Path]:
    ckpt = load_checkpoint(args.checkpoint)
    n_params = sum(t.numel() for t in ckpt.state.values() if t.is_floating_point())
    info = {
        "kind": ckpt.kind, "step": ckpt.step, "validation_loss": ckpt.validation_loss,
        "encoder_config": ckpt.encoder_config.to_dict(), "tensor_count": len(ckpt.state),
        "stored_values": n_params, "meta": ckpt.meta,
    }
    prefix = "ppg_encoder" if ckpt.kind == "contrastive" else "encoder"
    info["encoder_parameters"] = parameter_count(encoder_from_checkpoint(ckpt, prefix)).total
    if "temperature.tau" in ckpt.state:
        info["temperature"] = float(ckpt.state["temperature.tau"])
    print(json.dumps(info, indent=2, sort_keys=True))
    if args.out:
        path = Path(args.out) / "inspect.json"
        path.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        return [path]
    return []


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ppgalign", description="Paired PPG/ECG contrastive alignment toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic paired stores with labels")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seconds", type=float, default=10.0)
    s.add_argument("--rate", type=float, default=125.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--hr-min", type=float, default=50.0)
    s.add_argument("--hr-max", type=float, default=150.0)
    s.add_argument("--irregular-prob", type=float, default=0.3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth, inputs=())

    s = sub.add_parser("preprocess", help="filter, gate and normalise raw paired recordings")
    s.add_argument("--ppg", required=True)
    s.add_argument("--ecg", required=True)
    s.add_argument("--config")
    s.add_argument("--labels", help="label CSV to carry over to the kept pairs")
    s.add_argument("--target-rate", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess, inputs=("ppg", "ecg", "config"))

    def train_flags(s, encoder=True):
        s.add_argument("--config")
        s.add_argument("--steps", type=int)
        s.add_argument("--warmup", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--eval-every", type=int)
        s.add_argument("--seed", type=int)
        if encoder:
            s.add_argument("--encoder", choices=sorted(ENCODER_PRESETS))

    s = sub.add_parser("pretrain", help="contrastive pretraining on aligned stores")
    s.add_argument("--ppg", required=True)
    s.add_argument("--ecg", required=True)
    train_flags(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain, inputs=("ppg", "ecg", "config"))

    s = sub.add_parser("eval-retrieval", help="PPG-to-ECG retrieval metrics per batch")
    s.add_argument("--ppg", required=True)
    s.add_argument("--ecg", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval_retrieval, inputs=("ppg", "ecg", "checkpoint"))

    s = sub.add_parser("probe", help="nested-CV linear probe on frozen embeddings")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--targets", required=True)
    s.add_argument("--task", choices=("reg", "clf"), required=True)
    s.add_argument("--column", help="target column when the CSV has several")
    s.add_argument("--branch", choices=("ppg", "ecg"), default="ppg")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe, inputs=("checkpoint", "store", "targets"))

    s = sub.add_parser("finetune", help="multi-label fine-tuning of the PPG encoder")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--columns", nargs="+", help="binary label columns (default: all)")
    s.add_argument("--freeze-encoder", action="store_true")
    train_flags(s, encoder=False)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune, inputs=("checkpoint", "store", "labels", "config"))

    s = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_inspect, inputs=("checkpoint",))

    for name, sp in sub.choices.items():
        sp.add_argument("--threads", type=int, default=None,
                        help="torch intra-op threads; 1 gives the deterministic mode")
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, {}, argv=list(sys.argv[1:] if argv is None else argv))
    t0 = time.perf_counter()
    try:
        for key in args.inputs:
            path = getattr(args, key, None)
            if path is not None:
                if not Path(path).is_file():
                    raise DataError(f"--{key}: no such file: {path}")
                manifest.add_input(path)
        out = getattr(args, "out", None)
        if out:
            Path(out).mkdir(parents=True, exist_ok=True)
        prev_threads = torch.get_num_threads()
        if args.threads:
            torch.set_num_threads(args.threads)
        try:
            outputs = args.func(args, manifest)
        finally:
            torch.set_num_threads(prev_threads)
    except (DataError, StoreError, CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    manifest.wall_time_s = time.perf_counter() - t0
    manifest.outputs = [str(p) for p in outputs]
    if out:
        manifest.write(out)
    return 0


def main() -> None:
    sys.exit(dispatch())
