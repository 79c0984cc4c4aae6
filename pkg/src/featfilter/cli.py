"""Command-line front end: ``featfilter {gen,train,eval,probe,check,compare}``.

Settings come from a ``key = value`` config file (``--config``) with dotted
keys (``net.family = unet``, ``train.seed = 7``) and ``--set key=value``
overrides. Outputs go under ``--out``, else ``$FEATFILTER_OUT``, else
``./runs``. Every command writes its fully resolved config next to its
outputs.

Exit codes: 0 ok, 1 verification failure, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import checks
from .entropy import PROBE_TAGS, center_signals, probe_layers
from .nets import NetworkSpec, build, cff_param_delta
from .synthdata import SceneConfig, generate, load_dataset, save_dataset, split
from .train import (
    TrainConfig,
    atomic_write,
    class_means,
    evaluate_samples,
    load_checkpoint,
    multi_seed,
    summarize,
    train_run,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("featfilter")


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------------

_EXTRA = {
    "data": {"count": 250, "train_fraction": 0.8, "seed": 0, "dir": ""},
    "train": {"n_seeds": 1},
    "probe": {"tags": ",".join(PROBE_TAGS)},
    "eval": {"tag": "Em", "split": "val"},
}
_SECTIONS = {"data": SceneConfig, "net": NetworkSpec, "train": TrainConfig}


def default_config():
    cfg = {}
    for section, cls in _SECTIONS.items():
        for k, v in asdict(cls()).items():
            cfg[f"{section}.{k}"] = v
    for section, extra in _EXTRA.items():
        for k, v in extra.items():
            cfg[f"{section}.{k}"] = v
    return cfg


def _coerce(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "on", "yes"):
                return True
            if raw.lower() in ("0", "false", "off", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.strip("()").split(","))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def apply_setting(cfg, key, raw):
    if key not in cfg:
        raise ConfigError(f"unknown config key {key!r}")
    cfg[key] = _coerce(key, raw, cfg[key])


def parse_config_text(text, cfg):
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, val = line.split("=", 1)
        apply_setting(cfg, key.strip(), val)
    return cfg


def config_text(cfg):
    def fmt(v):
        return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in sorted(cfg.items()))


def section(cfg, name):
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def make(cls, cfg, name):
    names = {f.name for f in fields(cls)}
    try:
        return cls(**{k: v for k, v in section(cfg, name).items() if k in names})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} settings: {exc}") from None


# -- helpers --------------------------------------------------------------------------

def out_root(args):
    return Path(args.out or os.environ.get("FEATFILTER_OUT") or "runs")


def data_dir(cfg, root):
    return Path(cfg["data.dir"]) if cfg["data.dir"] else root / "data"


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(path, buf.getvalue())


def fmt(x):
    return repr(float(x))


def seed_dirs(run_dir):
    subs = sorted(p for p in Path(run_dir).glob("seed_*") if p.is_dir())
    return subs or [Path(run_dir)]


# -- commands -------------------------------------------------------------------------

def cmd_gen(cfg, args):
    scene = make(SceneConfig, cfg, "data")
    count = cfg["data.count"]
    if count < 1:
        raise ConfigError("data.count must be >= 1")
    samples = generate(scene, count, cfg["data.seed"])
    train, val = split(samples, cfg["data.train_fraction"], cfg["data.seed"])
    root = data_dir(cfg, out_root(args))
    manifest = save_dataset(root, train, val, scene.num_classes)
    atomic_write(root / "config.txt", config_text(cfg))
    print(f"wrote {len(train)} train / {len(val)} val samples to {manifest}")
    return EXIT_OK


def cmd_train(cfg, args):
    if args.net:
        cfg["net.family"] = args.net
    if args.cff:
        cfg["net.with_cff"] = args.cff == "on"
    if args.seeds:
        cfg["train.n_seeds"] = args.seeds
    spec = make(NetworkSpec, cfg, "net")
    tcfg = make(TrainConfig, cfg, "train")
    root = out_root(args)
    train, val = load_dataset(data_dir(cfg, root))
    name = args.name or f"{spec.family}_{'neu' if spec.with_cff else 'alt'}"
    run_dir = root / name
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write(run_dir / "config.txt", config_text(cfg))
    n_seeds = cfg["train.n_seeds"]
    if n_seeds > 1:
        records, summary = multi_seed(spec, train, val, tcfg, n_seeds, out_dir=run_dir)
        rows = []
        for key in list(range(spec.num_classes)) + ["mean_seg"]:
            d, h = summary[key]["dice"], summary[key]["hausdorff"]
            rows.append([key, fmt(d[0]), fmt(d[1]), fmt(h[0]), fmt(h[1])])
        write_csv(run_dir / "summary.csv", ["class_id", "dice_mean", "dice_std", "hd_mean", "hd_std"], rows)
        best = summary["best_val_loss"]
        print(f"{name}: {n_seeds} seeds, best val loss {best[0]:.5f} +- {best[1]:.5f}")
    else:
        rec = train_run(spec, train, val, tcfg, out_dir=run_dir)
        print(f"{name}: best epoch {rec.best_epoch}, val loss {min(rec.val_loss):.5f}")
    atomic_write(run_dir / "params.txt", f"{build(spec).count_params()}\n")
    return EXIT_OK


def _eval_samples(cfg, root, split_name):
    train, val = load_dataset(data_dir(cfg, root))
    if split_name not in ("train", "val"):
        raise ConfigError("eval.split must be 'train' or 'val'")
    return train if split_name == "train" else val


def cmd_eval(cfg, args):
    root = out_root(args)
    run_dir = Path(args.run)
    tag = args.tag or cfg["eval.tag"]
    samples = _eval_samples(cfg, root, args.split or cfg["eval.split"])
    for sub in seed_dirs(run_dir):
        graph = load_checkpoint(sub / "ckpt" / tag)
        k = graph.spec.num_classes
        if k != cfg["net.num_classes"]:
            raise ConfigError(f"checkpoint has {k} classes but net.num_classes = {cfg['net.num_classes']}")
        if max(int(s.label.max()) for s in samples) >= k:
            raise ConfigError(f"dataset labels exceed the checkpoint's {k} classes")
        evaluated = evaluate_samples(graph, samples)
        rows = [[sid, r.class_id, fmt(r.dice), fmt(r.hausdorff)] for sid, rs in evaluated for r in rs]
        means = class_means(evaluated, k)
        for c in range(k):
            rows.append(["mean", c, fmt(means[c]["dice"]), fmt(means[c]["hausdorff"])])
        rows.append(["mean", "mean_seg", fmt(means["mean_seg"]["dice"]), fmt(means["mean_seg"]["hausdorff"])])
        write_csv(sub / "metrics.csv", ["sample_id", "class_id", "dice", "hausdorff"], rows)
        atomic_write(sub / "eval_config.txt", config_text(cfg))
        print(f"{sub}: mean_seg dice {means['mean_seg']['dice']:.4f} hd {means['mean_seg']['hausdorff']:.3f}")
    return EXIT_OK


def cmd_probe(cfg, args):
    root = out_root(args)
    run_dir = Path(args.run)
    tags = [t for t in (args.tags or cfg["probe.tags"]).split(",") if t]
    unknown = set(tags) - set(PROBE_TAGS)
    if unknown:
        raise ConfigError(f"unknown probe tags {sorted(unknown)}")
    _, val = load_dataset(data_dir(cfg, root))
    rows = []
    for tag in tags:
        graph = load_checkpoint(run_dir / "ckpt" / tag)
        if not graph.fbc_blocks():
            raise ConfigError(f"{run_dir} was trained without filters; nothing to probe")
        for r in probe_layers(graph, val, tag):
            rows.append([r.layer_index, tag, fmt(r.Hf), fmt(r.Hd), fmt(r.delta)])
        sig_rows = [[i, c, fmt(fv), fmt(dv)]
                    for i, f, d in center_signals(graph, val[0].image)
                    for c, (fv, dv) in enumerate(zip(f, d))]
        write_csv(run_dir / f"signals_{tag}.csv", ["layer_index", "channel", "f_value", "d_value"], sig_rows)
    write_csv(run_dir / "entropy.csv", ["layer_index", "tag", "Hf", "Hd", "delta"], rows)
    atomic_write(run_dir / "probe_config.txt", config_text(cfg))
    for tag in tags:
        deltas = [float(r[4]) for r in rows if r[1] == tag]
        neg = sum(d < 0 for d in deltas)
        print(f"{tag}: mean dH {np.mean(deltas):+.4f}, {neg}/{len(deltas)} layers negative")
    return EXIT_OK


def cmd_check(cfg, args):
    ok = True
    for name in args.suite:
        for res in checks.SUITES[name]():
            print(res.line())
            ok &= res.passed
    return EXIT_OK if ok else EXIT_FAIL


def _run_stats(run_dir):
    """Per-class ``{(class): (mean, std)}`` for dice and HD.

    Multi-seed runs use the spread of per-seed means; single runs the
    spread over samples.
    """
    subs = seed_dirs(run_dir)
    per = []
    for sub in subs:
        path = sub / "metrics.csv"
        if not path.is_file():
            raise FileNotFoundError(f"{path} missing; run 'featfilter eval' first")
        with open(path) as fh:
            per.append(list(csv.DictReader(fh)))
    out = {}
    if len(subs) > 1:
        for row in per[0]:
            if row["sample_id"] != "mean":
                continue
            c = row["class_id"]
            vals = [[float(r[m]) for r in rows if r["sample_id"] == "mean" and r["class_id"] == c]
                    for rows in per for m in ("dice", "hausdorff")]
            out[c] = (summarize([v[0] for v in vals[0::2]]), summarize([v[0] for v in vals[1::2]]))
    else:
        rows = [r for r in per[0] if r["sample_id"] != "mean"]
        classes = sorted({r["class_id"] for r in rows}, key=int)
        for c in classes:
            sel = [r for r in rows if r["class_id"] == c]
            out[c] = (summarize([float(r["dice"]) for r in sel]), summarize([float(r["hausdorff"]) for r in sel]))
        ms = [r for r in per[0] if r["class_id"] == "mean_seg"]
        by_sample = {}
        for r in rows:
            if r["class_id"] != "0":
                by_sample.setdefault(r["sample_id"], []).append((float(r["dice"]), float(r["hausdorff"])))
        out["mean_seg"] = (summarize([np.mean([v[0] for v in vs]) for vs in by_sample.values()]),
                           summarize([np.mean([v[1] for v in vs]) for vs in by_sample.values()]))
        assert ms, "metrics.csv lacks a mean_seg row"
    return out


def _param_count(run_dir):
    from .train import parse_spec_text
    spec_file = seed_dirs(run_dir)[0] / "ckpt" / "Em" / "spec.txt"
    spec = parse_spec_text(spec_file.read_text())
    return spec, build(spec).count_params()


def cmd_compare(cfg, args):
    a, b = Path(args.run_a), Path(args.run_b)
    sa, sb = _run_stats(a), _run_stats(b)
    if set(sa) != set(sb):
        raise ConfigError(f"incompatible class sets: {sorted(sa)} vs {sorted(sb)}")
    spec_a, pa = _param_count(a)
    spec_b, pb = _param_count(b)
    rows = []
    for c in sa:
        (da, dsa), (ha, hsa) = sa[c]
        (db, dsb), (hb, hsb) = sb[c]
        rows.append([c, fmt(da), fmt(dsa), fmt(db), fmt(dsb), fmt(db - da),
                     fmt(ha), fmt(hsa), fmt(hb), fmt(hsb), fmt(hb - ha)])
    rows.append(["params", pa, "", pb, "", pb - pa, "", "", "", "", ""])
    out = Path(args.output) if args.output else b / f"compare_{a.name}.csv"
    write_csv(out, ["class_id", "dice_a", "dice_a_std", "dice_b", "dice_b_std", "dice_delta",
                    "hd_a", "hd_a_std", "hd_b", "hd_b_std", "hd_delta"], rows)
    atomic_write(out.with_suffix(".config.txt"), config_text(cfg))
    print(f"wrote {out}; params {pa} -> {pb} (delta {pb - pa})")
    if spec_b.with_cff and not spec_a.with_cff:
        print(f"closed-form filter overhead: {cff_param_delta(spec_b)}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="featfilter", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", help="output root (default $FEATFILTER_OUT or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", help="generate the synthetic dataset")

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--net", choices=["fcn", "unet"])
    t.add_argument("--cff", choices=["on", "off"])
    t.add_argument("--seeds", type=int, help="number of seeds (multi-seed run)")
    t.add_argument("--name", help="run directory name under the output root")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("run", help="run directory")
    e.add_argument("--tag", choices=PROBE_TAGS)
    e.add_argument("--split", choices=["train", "val"])

    pr = sub.add_parser("probe", help="entropy probe of filter blocks")
    pr.add_argument("run", help="run directory")
    pr.add_argument("--tags", help="comma-separated probe tags")

    c = sub.add_parser("check", help="run verification suites")
    c.add_argument("suite", nargs="+", choices=sorted(checks.SUITES))

    cp = sub.add_parser("compare", help="compare two evaluated runs")
    cp.add_argument("run_a")
    cp.add_argument("run_b")
    cp.add_argument("--output", help="comparison CSV path")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "probe": cmd_probe, "check": cmd_check, "compare": cmd_compare}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = default_config()
        if args.config:
            parse_config_text(Path(args.config).read_text(), cfg)
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            apply_setting(cfg, *item.split("=", 1))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"featfilter: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, KeyError) as exc:
        print(f"featfilter: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"featfilter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
