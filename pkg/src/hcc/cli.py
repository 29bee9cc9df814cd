"""Command-line pipeline: gen-data, train, extract, probe, quantize, eval, report.

Every command takes --config and works inside one output directory; each
run writes a manifest (config hash, seed, versions, output checksums).
Reports are CSV panels mirroring the evaluation figures; plotting is
left to external tooling.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import container
from . import dataset as ds
from . import model as md
from . import probes as pr
from . import quantizer as qz
from . import trainer as tr
from .config import ConfigError, RunConfig, parse_config
from .objective import ObjectiveError, positive_accuracy, stage_scores

_USER_ERRORS = (ConfigError, ds.DataError, md.ModelError, tr.TrainerError,
                pr.ProbeError, qz.BitstreamError, container.CheckpointError,
                ObjectiveError, FileNotFoundError)

SOURCE_FLAG = {"c_s": "c_s", "c_l": "c_l", "both": "c_s&c_l", "z_s": "z_s", "z_l": "z_l"}


def _sha256(path: Path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command, cfg: RunConfig, seed, outputs):
    manifest = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "versions": {"hcc": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "outputs": {str(p.relative_to(out_dir)): _sha256(p) for p in outputs},
    }
    path = out_dir / f"manifest_{command.replace('-', '_')}.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _setup(args):
    cfg = parse_config(args.config)
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.train.seed
    return cfg, out, seed


def _train_cfg(cfg: RunConfig, seed):
    return replace(cfg.train, seed=seed) if seed != cfg.train.seed else cfg.train


def _load_model(args, out: Path):
    path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.hccm"
    if not path.exists():
        raise ConfigError(f"no checkpoint at {path}; train first or pass --checkpoint")
    return md.load_checkpoint(path)


def _sources(args, cfg: RunConfig):
    if args.source:
        names = [SOURCE_FLAG[args.source]]
    else:
        names = sorted({s.source.replace("+dm", "") for s in cfg.probes})
    if getattr(args, "quantized", False):
        names = [n + "+dm" for n in names]
    return names


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    cfg, out, seed = _setup(args)
    dcfg = cfg.dataset
    if isinstance(dcfg, ds.SynthConfig):
        if args.seed is not None:
            dcfg = replace(dcfg, seed=args.seed)
        corpus = ds.corpus_from_labeled(ds.synth_generate(dcfg))
    else:
        windows = []
        records = []
        for path in dcfg.paths:
            for w in ds.load_wav(path, dcfg.window_samples, dcfg.sample_rate, dcfg.stride):
                records.append(ds.WindowRecord(len(records), str(path), None, None, []))
                windows.append(w.samples)
        if not windows:
            raise ds.DataError("wav inputs produced no full windows")
        corpus = ds.Corpus(np.stack(windows), records, sample_rate=dcfg.sample_rate)
    paths = ds.save_corpus(corpus, out)
    write_manifest(out, "gen-data", cfg, seed, list(paths))
    print(f"gen-data: {len(corpus)} windows of {corpus.window_samples} samples -> {out}")
    return 0


def cmd_train(args):
    cfg, out, seed = _setup(args)
    corpus = ds.load_corpus(out)
    tcfg = _train_cfg(cfg, seed)
    state, paths = tr.fit(cfg.model, tcfg, corpus.windows, out,
                          resume_from=args.resume)
    outputs = [paths["metrics"], *paths["checkpoints"]]
    if "metrics_eval" in paths:
        outputs.append(paths["metrics_eval"])
    write_manifest(out, "train", cfg, seed, outputs)
    print(f"train: {state.update} updates, variant={cfg.model.variant} -> {out}")
    return 0


def _feature_table(model, corpus, source, cfg, seed):
    base = source.replace("+dm", "")
    table = pr.extract_features(model, corpus, base)
    if source.endswith("+dm"):
        masks = pr.split_by_windows(table.window_ids, seed=seed)
        table, _, _ = qz.quantize_feature_table(table, masks["train"])
    return table


def cmd_extract(args):
    cfg, out, seed = _setup(args)
    corpus = ds.load_corpus(out)
    model = _load_model(args, out)
    outputs = []
    for source in _sources(args, cfg):
        table = _feature_table(model, corpus, source, cfg, seed)
        tag = source.replace("&", "_and_").replace("+dm", "_dm")
        path = out / f"features_{tag}.npz"
        arrays = {"X": table.X, "window_ids": table.window_ids,
                  "frame_period_s": np.array(table.frame_period_s)}
        for name, lab in table.labels.items():
            if lab is not None:
                arrays[f"labels_{name}"] = lab
        np.savez(path, source=np.array(table.source), **arrays)
        outputs.append(path)
        print(f"extract: {source} -> {path} rows={table.X.shape[0]} dim={table.dim}")
    write_manifest(out, "extract", cfg, seed, outputs)
    return 0


def cmd_probe(args):
    cfg, out, seed = _setup(args)
    corpus = ds.load_corpus(out)
    model = _load_model(args, out)
    specs = list(cfg.probes)
    if args.source:
        wanted = SOURCE_FLAG[args.source] + ("+dm" if args.quantized else "")
        specs = [replace(s, source=wanted) for s in specs
                 if s.source.replace("+dm", "") == wanted.replace("+dm", "")]
        if not specs:
            raise ConfigError(f"no configured probes use source {wanted}")
    elif args.quantized:
        specs = [replace(s, source=s.source + "+dm") for s in specs
                 if not s.source.endswith("+dm")]
    tables = {}
    results = []
    for spec in specs:
        if spec.source not in tables:
            tables[spec.source] = _feature_table(model, corpus, spec.source, cfg, seed)
        table = tables[spec.source]
        if spec.pooling == "mean-utterance":
            base = spec.source.replace("+dm", "")
            pooled_key = spec.source + "|mean"
            if pooled_key not in tables:
                tables[pooled_key] = pr.extract_features(model, corpus, base,
                                                         pooling="mean-utterance")
            table = tables[pooled_key]
        results.append(pr.run_probe(spec, table, seed=seed))
        r = results[-1]
        print(f"probe: {spec.source}/{spec.target} ({spec.kind}) "
              f"train={r.train_accuracy:.3f} test={r.test_accuracy:.3f}")
    path = pr.write_report(results, out / "probe_report.csv")
    write_manifest(out, "probe", cfg, seed, [path])
    return 0


def cmd_quantize(args):
    cfg, out, seed = _setup(args)
    corpus = ds.load_corpus(out)
    model = _load_model(args, out)
    source = SOURCE_FLAG[args.source] if args.source else cfg.quantizer.source
    source = source.replace("+dm", "")
    table = pr.extract_features(model, corpus, source)
    masks = pr.split_by_windows(table.window_ids, seed=seed)
    quantized, steps, stats = qz.quantize_feature_table(table, masks["train"])

    tag = source.replace("&", "_and_")
    stream_dir = out / f"quantized_{tag}"
    stream_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    ids = np.asarray(table.window_ids)
    boundaries = np.flatnonzero(np.diff(ids)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [ids.size]])
    for s, e in zip(starts, ends):
        bs = qz.dm_encode(table.X[s:e], steps)
        p = stream_dir / f"window_{int(ids[s]):06d}.hccq"
        bs.write(p)
        outputs.append(p)
    decoded_path = out / f"features_{tag}_dm.npz"
    arrays = {f"labels_{k}": v for k, v in table.labels.items() if v is not None}
    np.savez(decoded_path, X=quantized.X, window_ids=quantized.window_ids,
             frame_period_s=np.array(table.frame_period_s),
             source=np.array(quantized.source), **arrays)
    outputs.append(decoded_path)
    summary = {"source": source, **stats}
    summary_path = out / f"quantize_summary_{tag}.json"
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    outputs.append(summary_path)
    write_manifest(out, "quantize", cfg, seed, outputs)
    print(f"quantize: {source} -> {stream_dir} "
          f"payload={stats['payload_bitrate']:.1f} bit/s "
          f"amortized={stats['amortized_bitrate']:.1f} bit/s")
    return 0


def cmd_eval(args):
    cfg, out, seed = _setup(args)
    corpus = ds.load_corpus(out)
    model = _load_model(args, out)
    tcfg = _train_cfg(cfg, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    masks = pr.split_by_windows(np.arange(len(corpus)), seed=seed)
    eval_ids = np.flatnonzero(masks["test"])
    if eval_ids.size == 0:
        raise ConfigError("no evaluation windows available")
    policy = tcfg.policy()
    acc_lo = {}
    acc_up = {}
    n_batches = 0
    for i in range(0, min(eval_ids.size, 64), tcfg.batch_size):
        idx = eval_ids[i:i + tcfg.batch_size]
        out_f = md.forward(model, corpus.windows[idx])
        sm = stage_scores(out_f.z_s, out_f.g, model.heads_s, policy, rng)
        for k, a in positive_accuracy(sm, per_step=True).items():
            acc_lo[k] = acc_lo.get(k, 0.0) + a
        if model.cfg.variant == "cognitive":
            sm_up = stage_scores(out_f.z_l, out_f.c_l, model.heads_l, policy, rng)
            for k, a in positive_accuracy(sm_up, per_step=True).items():
                acc_up[k] = acc_up.get(k, 0.0) + a
        n_batches += 1
    path = out / f"eval_accuracy_{model.cfg.variant}.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "acc_lower", "acc_upper"])
        for k in sorted(acc_lo):
            upper = repr(acc_up[k] / n_batches) if k in acc_up else ""
            w.writerow([str(k), repr(acc_lo[k] / n_batches), upper])
    write_manifest(out, "eval", cfg, seed, [path])
    print(f"eval: positive accuracy over {n_batches} test batches -> {path}")
    return 0


def cmd_report(args):
    cfg, out, seed = _setup(args)
    outputs = []
    report = out / "probe_report.csv"
    rows = []
    if report.exists():
        with report.open() as fh:
            rows = list(csv.DictReader(fh))

    for target in ("long_attr", "long_attr2", "short_attr"):
        sel = [r for r in rows if r["target"] == target and not r["source"].endswith("+dm")]
        if not sel:
            continue
        path = out / f"panel_{target}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "kind", "pooling", "dim", "test_acc"])
            for r in sel:
                w.writerow([r["source"], r["kind"], r["pooling"], r["dim"], r["test_acc"]])
        outputs.append(path)

    quant = [r for r in rows if r["source"].endswith("+dm")]
    if quant:
        plain = {(r["source"], r["target"]): r["test_acc"] for r in rows
                 if not r["source"].endswith("+dm")}
        path = out / "panel_quantized.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "target", "dim", "payload_bitrate",
                        "test_acc", "unquantized_test_acc"])
            for r in quant:
                base = r["source"].replace("+dm", "")
                period = 0.08 if base in ("c_l", "z_l") else 0.01
                w.writerow([r["source"], r["target"], r["dim"],
                            repr(qz.bitrate(int(r["dim"]), period)),
                            r["test_acc"], plain.get((base, r["target"]), "")])
        outputs.append(path)

    eval_files = sorted(out.glob("eval_accuracy_*.csv"))
    if eval_files:
        merged = {}
        variants = []
        for f in eval_files:
            variant = f.stem.replace("eval_accuracy_", "")
            variants.append(variant)
            with f.open() as fh:
                for r in csv.DictReader(fh):
                    merged.setdefault(int(r["k"]), {})[variant] = r["acc_lower"]
        path = out / "panel_prediction_accuracy.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"acc_{v}" for v in variants])
            for k in sorted(merged):
                w.writerow([str(k)] + [merged[k].get(v, "") for v in variants])
        outputs.append(path)

    if not outputs:
        raise ConfigError("nothing to report: run probe/eval first")
    write_manifest(out, "report", cfg, seed, outputs)
    print(f"report: {len(outputs)} panel files -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "extract": cmd_extract,
    "probe": cmd_probe,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hcc",
        description="Two-stage contrastive predictive coding pipeline")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--source", choices=sorted(SOURCE_FLAG), default=None)
        p.add_argument("--quantized", action="store_true")
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to resume from")
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except _USER_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
