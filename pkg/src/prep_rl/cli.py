"""Command-line entry point.

    prep-rl robustness --config configs/desk_coarse.cfg --runs 3
    prep-rl train-rl --set agent.gamma=0.95 --out runs/
    prep-rl eval --checkpoint runs/train-rl-.../rl.bin --data distorted

Every command writes into a fresh run-stamped folder below the output
directory (``--out``, else ``$PREP_RL_OUT``, else ``./runs``) together with
the fully resolved ``config.cfg``. Exit status: 0 success, 1 runtime
failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import pipeline as P

COMMANDS = ("gen-data", "train-nn", "train-rl", "train-cl", "eval", "robustness", "trace", "report")
DATA_SPLITS = ("train", "val", "test", "distorted")

log = logging.getLogger("prep_rl")


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"stage {stage} failed: {exc}")
        self.stage = stage


@dataclass
class CliConfig:
    command: str
    config_path: str | None = None
    overrides: list = field(default_factory=list)
    out_dir: str = "runs"
    quiet: bool = False
    seed: int | None = None
    runs: int | None = None
    checkpoint: str | None = None
    data: str = "test"
    run_dir: str | None = None
    count: int | None = None


def build_parser():
    p = argparse.ArgumentParser(prog="prep-rl", description="RL image preprocessing experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="PATH", help="flat 'section.key = value' config file")
    p.add_argument("--set", metavar="K=V", action="append", default=[], dest="overrides",
                   help="override one config key (repeatable)")
    p.add_argument("--out", metavar="DIR", help="output directory (default $PREP_RL_OUT or ./runs)")
    p.add_argument("--seed", type=int, help="base seed (run.seed; data.seed for gen-data)")
    p.add_argument("--runs", type=int, help="number of independent runs")
    p.add_argument("--quiet", action="store_true", help="only warnings and results")
    p.add_argument("--checkpoint", metavar="PATH", help="model file for eval, robustness, trace, train-cl")
    p.add_argument("--data", choices=DATA_SPLITS, default="test", help="split for eval")
    p.add_argument("--run", metavar="DIR", dest="run_dir", help="finished robustness folder for report")
    p.add_argument("--count", type=int, help="number of images for trace (default run.traces)")
    return p


def parse_args(argv) -> CliConfig:
    """Parse argv; argparse exits with status 2 and usage text on bad input."""
    ns = build_parser().parse_args(argv)
    out = ns.out or os.environ.get("PREP_RL_OUT") or "runs"
    return CliConfig(ns.command, ns.config, ns.overrides, out, ns.quiet, ns.seed, ns.runs,
                     ns.checkpoint, ns.data, ns.run_dir, ns.count)


def load_config(cli: CliConfig) -> P.ExperimentConfig:
    try:
        if cli.config_path:
            try:
                text = Path(cli.config_path).read_text()
            except OSError as exc:
                raise ValueError(f"cannot read config {cli.config_path}: {exc.strerror}") from None
            cfg = P.ExperimentConfig.from_text(text)
        else:
            cfg = P.ExperimentConfig()
        for item in cli.overrides:
            if "=" not in item:
                raise ValueError(f"--set expects K=V, got {item!r}")
            key, value = item.split("=", 1)
            cfg.set(key.strip(), value)
        if cli.seed is not None:
            cfg.run.seed = cli.seed
            if cli.command == "gen-data":
                cfg.data.seed = cli.seed
        if cli.runs is not None:
            cfg.run.runs = cli.runs
        return cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def run_folder(base, command):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(base)
    for i in range(1000):
        path = base / (f"{command}-{stamp}" + (f"-{i}" if i else ""))
        try:
            path.mkdir(parents=True)
            return path
        except FileExistsError:
            continue
    raise ConfigError(f"cannot create a run folder under {base}")


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _need_checkpoint(cli, kinds):
    if not cli.checkpoint:
        raise ConfigError(f"{cli.command} needs --checkpoint")
    try:
        model, meta = P.load_checkpoint(cli.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from None
    if meta["kind"] not in kinds:
        raise ConfigError(f"{cli.command} needs a {'/'.join(kinds)} checkpoint, got {meta['kind']}")
    return model, meta


def _env_for(cfg, meta):
    cfg.env.action_set = meta.get("action_set", cfg.env.action_set)
    cfg.env.max_len = meta.get("max_len", cfg.env.max_len)
    return cfg.env_config(meta["k"], recovery=False)


def _split(cfg, name):
    train, val, test = P.load_datasets(cfg)
    if name == "distorted":
        return D.distort(test, cfg.distortion_config(0))
    return {"train": train, "val": val, "test": test}[name], None


def _score(model, meta, cfg, ds):
    if meta["kind"] == "rl":
        return P.evaluate(model, ds, "rl_testtime", _env_for(cfg, meta))
    return P.evaluate(model, ds)


# -- commands ---------------------------------------------------------------


def cmd_gen_data(cfg, cli, out):
    if cfg.data.source != "glyphs":
        raise ConfigError("gen-data only generates the glyph source")
    train, val, test = P.load_datasets(cfg)
    both = D.Dataset(np.concatenate([val.images, train.images]), np.concatenate([val.labels, train.labels]),
                     train.k, "train")
    D.save_idx(both, out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte")
    D.save_idx(test, out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte")
    print(f"wrote {len(both)} training and {len(test)} test images to {out}")
    print(f"reuse with: --set data.source=idx --set data.path={out} --set data.n_val={len(val)}")


def cmd_train_nn(cfg, cli, out):
    train, val, test = _stage("data", P.load_datasets, cfg)
    net = _stage("NN", P.train_nn, cfg, train, val, cfg.run.seed)
    P.save_checkpoint(out / "nn.bin", net, "nn", arch=cfg.train.arch)
    acc = {"val": P.evaluate(net, val), "test": P.evaluate(net, test)}
    _write_json(out / "metrics.json", acc)
    print(f"NN val {acc['val']:.4f} test {acc['test']:.4f}")


def cmd_train_rl(cfg, cli, out):
    train, val, test = _stage("data", P.load_datasets, cfg)
    net, stats = _stage("RL", P.train_rl, cfg, train, val, cfg.run.seed)
    P.save_checkpoint(out / "rl.bin", net, "rl", action_set=cfg.env.action_set, max_len=cfg.env.max_len,
                      step=cfg.agent.steps)
    env = cfg.env_config(train.k, recovery=False)
    acc = {"val": P.evaluate(net, val, "rl_testtime", env), "test": P.evaluate(net, test, "rl_testtime", env)}
    _write_json(out / "metrics.json", {**acc, "episodes": stats["episodes"], "updates": stats["updates"],
                                       "val_history": stats["val_history"]})
    print(f"RL val {acc['val']:.4f} test {acc['test']:.4f}")


def cmd_train_cl(cfg, cli, out):
    qnet, meta = _need_checkpoint(cli, ("rl",))
    _env_for(cfg, meta)
    train, val, test = _stage("data", P.load_datasets, cfg)
    net = _stage("CL", P.train_cl, cfg, qnet, train, val, cfg.run.seed)
    P.save_checkpoint(out / "cl.bin", net, "cl", arch=meta["arch"])
    acc = {"val": P.evaluate(net, val), "test": P.evaluate(net, test)}
    _write_json(out / "metrics.json", acc)
    print(f"CL val {acc['val']:.4f} test {acc['test']:.4f}")


def cmd_eval(cfg, cli, out):
    model, meta = _need_checkpoint(cli, ("nn", "rl", "cl"))
    ds, _ = _stage("data", _split, cfg, cli.data)
    acc = _stage("evaluate", _score, model, meta, cfg, ds)
    _write_json(out / "metrics.json", {"checkpoint": str(cli.checkpoint), "data": cli.data, "accuracy": acc})
    print(f"{meta['kind'].upper()} {cli.data} accuracy {acc:.4f}")


def cmd_robustness(cfg, cli, out):
    if cli.checkpoint:
        model, meta = _need_checkpoint(cli, ("nn", "rl", "cl"))
        acc = {}
        for name in ("test", "distorted"):
            ds, _ = _stage("data", _split, cfg, name)
            acc["clean" if name == "test" else name] = _stage("evaluate", _score, model, meta, cfg, ds)
        _write_json(out / "metrics.json", acc)
        print(f"{meta['kind'].upper()} clean {acc['clean']:.4f} distorted {acc['distorted']:.4f}")
        return

    records = []

    def on_run(res):
        run_dir = out / f"run{res.seed - cfg.run.seed}"
        run_dir.mkdir(exist_ok=True)
        P.save_checkpoint(run_dir / "nn.bin", res.nn, "nn", arch=cfg.train.arch)
        P.save_checkpoint(run_dir / "rl.bin", res.rl, "rl", action_set=cfg.env.action_set,
                          max_len=cfg.env.max_len, step=cfg.agent.steps)
        P.save_checkpoint(run_dir / "cl.bin", res.cl, "cl", arch=cfg.train.arch)
        (run_dir / "traces.jsonl").write_text("".join(t.to_json() + "\n" for t in res.traces))
        for (m, c), v in sorted(res.accuracies.items()):
            records.append(dict(run=res.seed - cfg.run.seed, seed=res.seed, model=m, condition=c, accuracy=v,
                                arch=cfg.train.arch, dataset=cfg.data.source))
        log.info("run seed %d: %s", res.seed,
                 ", ".join(f"{m}/{c} {v:.4f}" for (m, c), v in sorted(res.accuracies.items())))

    try:
        report, _ = P.run_experiment(cfg, on_run)
    except RuntimeError as exc:
        m = re.search(r"failed in stage (\w+)", str(exc))
        raise StageError(m.group(1) if m else "run", exc) from exc
    (out / "runs.jsonl").write_text("".join(json.dumps(r) + "\n" for r in records))
    _write_report(report, out)


def _write_report(report, out):
    (out / "report.txt").write_text(report.table())
    (out / "report.jsonl").write_text(report.to_jsonl())
    print(report.table(), end="")


def cmd_trace(cfg, cli, out):
    qnet, meta = _need_checkpoint(cli, ("rl",))
    env = _env_for(cfg, meta)
    ds, chains = _stage("data", _split, cfg, "distorted")
    count = cli.count if cli.count is not None else cfg.run.traces
    if count < 0:
        raise ConfigError("--count must be non-negative")
    ids = np.arange(min(count, len(ds)))
    traces = _stage("trace", P.collect_traces, qnet, ds, env, ids, chains)
    (out / "traces.jsonl").write_text("".join(t.to_json() + "\n" for t in traces))
    print(f"wrote {len(traces)} traces to {out / 'traces.jsonl'}")


def cmd_report(cfg, cli, out):
    if not cli.run_dir:
        raise ConfigError("report needs --run DIR (a finished robustness folder)")
    path = Path(cli.run_dir) / "runs.jsonl"
    try:
        records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not records:
        raise ConfigError(f"{path} has no run records")
    _write_report(P.MetricsReport.from_run_records(records), out)


HANDLERS = {"gen-data": cmd_gen_data, "train-nn": cmd_train_nn, "train-rl": cmd_train_rl,
            "train-cl": cmd_train_cl, "eval": cmd_eval, "robustness": cmd_robustness,
            "trace": cmd_trace, "report": cmd_report}


def run(cli: CliConfig) -> int:
    logging.basicConfig(level=logging.WARNING if cli.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", force=True)
    try:
        cfg = load_config(cli)
        out = run_folder(cli.out_dir, cli.command)
        (out / "config.cfg").write_text(cfg.to_text())
        log.info("effective config (%s):\n%s", out / "config.cfg", cfg.to_text().rstrip())
        HANDLERS[cli.command](cfg, cli, out)
    except ConfigError as exc:
        print(f"prep-rl: config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"prep-rl: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"prep-rl: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        cli = parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    return run(cli)


if __name__ == "__main__":
    sys.exit(main())
