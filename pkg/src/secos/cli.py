"""Command-line entry point: ``secos <command> [options]``.

Commands share one output directory (``--out``, default
``$SECOS_OUT/default`` or ``runs/default``) holding deterministically named
artifacts::

    config.json        resolved configuration (written by every command)
    split.json         split
    dn.tsv, dn.json    pseudo-global
    bwsr_debug.json    pseudo-batch (per-batch thresholds and candidate sets)
    bwsr_summary.json  pseudo-batch (precision of filtered / unfiltered selection)
    checkpoint.bin     train
    train_log.jsonl    train
    eval.json          eval
    report.md/.csv     report (plus a .svg curve for sweep presets)

``run --preset NAME`` executes a whole experiment grid, one subdirectory
per variant, followed by ``report``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import sys
from pathlib import Path

from ._seeding import rng_for
from .adapter_net import load_checkpoint, save_checkpoint
from .bwsr import debug_record, dumps_debug
from .datamodel import DatasetSplit, build_split, load_manifest
from .evaluator import EvalReport
from .exceptions import ConfigError, MissingArtifactError, SecosError
from .experiments import (
    ABLATIONS,
    SYNTHETIC_TRAIN,
    BenchmarkConfig,
    SyntheticBenchmark,
    filter_precision,
    make_benchmark_split,
)
from .ncsc import build_dn, export_dn, load_dn
from .trainer import TrainConfig, build_model, run_training, teacher_for

OUT_ENV = "SECOS_OUT"

PRESETS = {
    "full": {"kind": "single", "variants": {"NB": {}}},
    "ablation": {"kind": "grid", "variants": ABLATIONS},
    "phi": {"kind": "sweep", "axis": "phi", "values": [10, 25, 50, 75, 90]},
    "rank": {"kind": "sweep", "axis": "adapter_dim", "values": [2, 4, 10, 16, 32, 64]},
    "batch-precision": {"kind": "precision", "axis": "batch_size", "values": [8, 16, 32, 64]},
    "teacher-free": {"kind": "grid", "variants": {"teacher": {"teacher_mode": "teacher"},
                                                   "ema": {"teacher_mode": "ema"}}},
}

log = logging.getLogger("secos")


# ---------------------------------------------------------------- config

def _line_of(text, key):
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def load_config_file(path):
    """Parse a JSON config; every error names ``path:line``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    try:
        resolve_config(data)
    except (TypeError, ValueError) as exc:
        # anchor at the first key the message mentions
        words = re.findall(r"\w+", str(exc))
        lines = [_line_of(text, w) for w in words if f'"{w}"' in text]
        raise ConfigError(f"{path}:{min(lines, default=1)}: {exc}") from exc
    return data


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(data, item):
    """``a.b.c=VALUE``; VALUE is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override {item!r} has an empty key")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {p!r} is not a section")
    node[parts[-1]] = _parse_value(raw)
    return data


def resolve_config(data):
    """(BenchmarkConfig, TrainConfig, manifest path or None) from a config dict.

    Sections: ``benchmark`` (incl. ``encoder``), ``train``, optional
    ``manifest`` and ``test_fraction`` for user-supplied manifests, and a
    top-level ``seed`` fanned out to split, encoder and training.
    """
    unknown = sorted(set(data) - {"benchmark", "train", "seed", "manifest", "test_fraction"})
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    bench = dict(data.get("benchmark", {}))
    train = {**SYNTHETIC_TRAIN, **data.get("train", {})}
    if "seed" in data:
        seed = int(data["seed"])
        bench["split_seed"] = seed
        bench["encoder"] = {**bench.get("encoder", {}), "seed": seed}
        train["seed"] = seed
    try:
        return BenchmarkConfig.from_dict(bench), TrainConfig.from_dict(train), data.get("manifest")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def _out_dir(args):
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / "default"


def gather_config(args, out):
    """Config file (or the one already in ``out``) + --seed + --override."""
    if args.config:
        data = load_config_file(args.config)
    elif (out / "config.json").exists():
        data = load_config_file(out / "config.json")
    else:
        data = {}
    if args.seed is not None:
        data["seed"] = args.seed
    for item in args.override or []:
        apply_override(data, item)
    resolve_config(data)
    return data


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _require(path, producer):
    if not Path(path).exists():
        raise MissingArtifactError(path, producer)
    return Path(path)


# ---------------------------------------------------------------- commands

class Context:
    def __init__(self, args):
        self.out = _out_dir(args)
        self.out.mkdir(parents=True, exist_ok=True)
        self.data = gather_config(args, self.out)
        self.bench_cfg, self.train_cfg, self.manifest = resolve_config(self.data)
        _write_json(self.out / "config.json", self.data)
        self._bench = None

    def load_split(self):
        return DatasetSplit.load(_require(self.out / "split.json", "split"))

    @property
    def bench(self):
        if self._bench is None:
            self._bench = SyntheticBenchmark(self.bench_cfg, self.load_split())
        return self._bench


def cmd_split(ctx, args):
    if ctx.manifest:
        man = load_manifest(ctx.manifest)
        c = ctx.bench_cfg
        split = build_split(man, c.ratio_labeled, c.known_fraction, ctx.data.get("test_fraction"),
                            seed=c.split_seed)
    else:
        split = make_benchmark_split(ctx.bench_cfg)
    split.save(ctx.out / "split.json")
    print(f"split: {len(split.labeled)} labeled, {len(split.unlabeled)} unlabeled, "
          f"{len(split.test)} test -> {ctx.out / 'split.json'}")


def _unlabeled_teacher_conf(bench, cfg):
    x_u = bench.encoder.inputs(bench.split.unlabeled, "none")
    return teacher_for(bench.encoder, bench.class_embeds, cfg.logit_scale)(x_u)


def cmd_pseudo_global(ctx, args):
    bench, cfg = ctx.bench, ctx.train_cfg
    dn = build_dn(bench.split, _unlabeled_teacher_conf(bench, cfg), cfg.phi)
    export_dn(dn, bench.label_space, ctx.out / "dn.tsv")
    _write_json(ctx.out / "dn.json", dn.diagnostics)
    print(f"pseudo-global: |D_N| = {len(dn)} (phi={cfg.phi}) -> {ctx.out / 'dn.tsv'}")


def cmd_pseudo_batch(ctx, args):
    bench, cfg = ctx.bench, ctx.train_cfg
    split = bench.split
    truth = dict(split.hidden_labels)
    ids = [r.sample_id for r in split.unlabeled]
    x_u = bench.encoder.inputs(split.unlabeled, "none")
    teacher = teacher_for(bench.encoder, bench.class_embeds, cfg.logit_scale)
    rng = rng_for(cfg.seed, "pseudo-batch")
    order = rng.permutation(len(ids))
    records = []
    for start in range(0, len(order), cfg.batch_size):
        rows = order[start:start + cfg.batch_size]
        conf = teacher(bench.encoder.augment(x_u[rows], "weak", rng))
        records.append(debug_record(conf, cfg.alpha, cfg.beta, [ids[i] for i in rows], truth))
    (ctx.out / "bwsr_debug.json").write_text(dumps_debug(records))
    prec = filter_precision(bench, (cfg.batch_size,), cfg.alpha, cfg.beta, cfg.logit_scale, seed=cfg.seed)
    summary = {"batch_size": cfg.batch_size, **prec[cfg.batch_size]}
    _write_json(ctx.out / "bwsr_summary.json", summary)
    print(f"pseudo-batch: {len(records)} batches -> {ctx.out / 'bwsr_debug.json'}")


def cmd_train(ctx, args):
    bench, cfg = ctx.bench, ctx.train_cfg
    dn = None
    if cfg.use_global and (ctx.out / "dn.tsv").exists() and cfg.teacher_mode == "teacher":
        dn = load_dn(ctx.out / "dn.tsv", bench.label_space)
    res = run_training(bench.split, bench.encoder, bench.class_embeds, cfg,
                       log_path=ctx.out / "train_log.jsonl", dn=dn)
    save_checkpoint(res.model, ctx.out / "checkpoint.bin")
    print(f"train: {len(res.log)} steps -> {ctx.out / 'checkpoint.bin'}")


def evaluate_checkpoint(bench, cfg, ckpt):
    """EvalReport of the stored (float32) weights, so reports depend only on the checkpoint."""
    model = build_model(bench.encoder.backbone, bench.encoder.projection, bench.class_embeds.shape[1], cfg)
    load_checkpoint(model, ckpt)
    return bench.evaluate(model, cfg.logit_scale)


def cmd_eval(ctx, args):
    ckpt = _require(ctx.out / "checkpoint.bin", "train")
    bench, cfg = ctx.bench, ctx.train_cfg
    report = evaluate_checkpoint(bench, cfg, ckpt)
    report.save(ctx.out / "eval.json")
    print(f"eval: {_fmt(report.acc_classify)} -> {ctx.out / 'eval.json'}")


def _fmt(acc):
    return " ".join(f"{k}={'-' if v is None else f'{100 * v:.1f}'}" for k, v in acc.items())


# ---------------------------------------------------------------- presets

def _variants(preset):
    entry = PRESETS[preset]
    if "variants" in entry:
        return [(name, dict(flags)) for name, flags in entry["variants"].items()]
    return [(f"{entry['axis']}={v}", {entry["axis"]: v}) for v in entry["values"]]


def cmd_run(ctx, args):
    if not args.preset:
        raise ConfigError("run needs --preset (one of: " + ", ".join(PRESETS) + ")")
    entry = PRESETS[args.preset]
    split = make_benchmark_split(ctx.bench_cfg)
    split.save(ctx.out / "split.json")
    bench = SyntheticBenchmark(ctx.bench_cfg, split)
    index = {"preset": args.preset, "kind": entry["kind"], "axis": entry.get("axis"), "variants": []}
    for name, flags in _variants(args.preset):
        sub = ctx.out / name
        sub.mkdir(exist_ok=True)
        cfg = ctx.train_cfg.replace(**flags)
        _write_json(sub / "config.json", {**ctx.data, "train": cfg.to_dict()})
        if entry["kind"] == "precision":
            prec = filter_precision(bench, (cfg.batch_size,), cfg.alpha, cfg.beta, cfg.logit_scale, seed=cfg.seed)
            _write_json(sub / "bwsr_summary.json", {"batch_size": cfg.batch_size, **prec[cfg.batch_size]})
        else:
            res = run_training(split, bench.encoder, bench.class_embeds, cfg, log_path=sub / "train_log.jsonl")
            save_checkpoint(res.model, sub / "checkpoint.bin")
            report = evaluate_checkpoint(bench, cfg, sub / "checkpoint.bin")
            report.save(sub / "eval.json")
            print(f"{args.preset}/{name}: {_fmt(report.acc_classify)}")
        index["variants"].append({"name": name, "value": flags.get(entry.get("axis")), "dir": name})
    _write_json(ctx.out / "preset.json", index)
    write_report(ctx.out)


# ---------------------------------------------------------------- report

ACC_COLUMNS = [f"{proto}_{part}" for proto in ("classify", "cluster") for part in ("known", "novel", "all")]
PREC_COLUMNS = ["filtered", "unfiltered", "n_filtered", "n_unfiltered"]


def _cell(v):
    if v is None:
        return ""
    return f"{100 * v:.2f}" if isinstance(v, float) else str(v)


def collect_rows(out):
    """Fold stored artifacts into (index, columns, rows); never runs a model."""
    out = Path(out)
    if (out / "preset.json").exists():
        index = json.loads((out / "preset.json").read_text())
        entries = index["variants"]
    elif (out / "eval.json").exists():
        index = {"preset": None, "kind": "single", "axis": None}
        entries = [{"name": out.name, "value": None, "dir": "."}]
    else:
        raise MissingArtifactError(out / "eval.json", "eval")
    rows = []
    if index["kind"] == "precision":
        columns = PREC_COLUMNS
        for e in entries:
            s = json.loads(_require(out / e["dir"] / "bwsr_summary.json", "pseudo-batch").read_text())
            rows.append({"variant": e["name"], "value": e["value"], **{c: s.get(c) for c in columns}})
    else:
        columns = ACC_COLUMNS
        for e in entries:
            rep = EvalReport.load(_require(out / e["dir"] / "eval.json", "eval"))
            row = {"variant": e["name"], "value": e["value"]}
            for proto, acc in (("classify", rep.acc_classify), ("cluster", rep.acc_cluster)):
                for part in ("known", "novel", "all"):
                    row[f"{proto}_{part}"] = acc.get(part)
            rows.append(row)
    return index, columns, rows


def _plot(path, index, columns, rows):
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "secos"
    xs = [r["value"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    series = ["filtered", "unfiltered"] if index["kind"] == "precision" else ["classify_known", "classify_novel", "classify_all"]
    for col in series:
        pts = [(x, 100 * r[col]) for x, r in zip(xs, rows) if r[col] is not None]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=col)
    ax.set_xlabel(index["axis"])
    ax.set_ylabel("precision (%)" if index["kind"] == "precision" else "accuracy (%)")
    if index["axis"] in ("adapter_dim", "batch_size"):
        ax.set_xscale("log", base=2)
        ax.set_xticks(xs, [str(x) for x in xs])
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_report(out):
    out = Path(out)
    index, columns, rows = collect_rows(out)
    header = ["variant"] + columns
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([r["variant"]] + [_cell(r[c]) for c in columns])
    (out / "report.csv").write_text(buf.getvalue())
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join([r["variant"]] + [_cell(r[c]) for c in columns]) + " |" for r in rows]
    (out / "report.md").write_text("\n".join(md) + "\n")
    written = ["report.md", "report.csv"]
    if index["kind"] in ("sweep", "precision"):
        _plot(out / "report.svg", index, columns, rows)
        written.append("report.svg")
    print("\n".join(md))
    print("report: " + ", ".join(str(out / w) for w in written))
    return rows


def cmd_report(ctx, args):
    write_report(ctx.out)


COMMANDS = {
    "split": (cmd_split, "build and save the labeled/unlabeled/test split"),
    "pseudo-global": (cmd_pseudo_global, "build the global novel pseudo-label set D_N"),
    "pseudo-batch": (cmd_pseudo_batch, "dump batch-wise recapture diagnostics for one epoch stream"),
    "train": (cmd_train, "train the adapter network"),
    "eval": (cmd_eval, "evaluate a checkpoint on the test split"),
    "report": (cmd_report, "aggregate stored reports into tables and plots"),
    "run": (cmd_run, "run a whole experiment preset"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="experiment preset (run)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV}/default)")
    common.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="config override, e.g. train.lr=0.001 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="secos", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        COMMANDS[args.command][0](ctx, args)
    except SecosError as exc:
        print(f"secos {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
