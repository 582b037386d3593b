"""Command line entry point: synth, pretrain, adapt, suite, report.

Exit codes: 0 success, 1 bad input (flags, config, paths, file formats),
2 anything that fails while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import harness, model as model_mod, synth

log = logging.getLogger("cici")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    out = {}
    for item in args.set or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise harness.ConfigError(item, "--set expects key=value")
        out[key.strip()] = _value(val)
    for key in ("mode", "lr", "cycles", "psi", "steps_per_instance", "temperature_scale"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def load_config(args) -> harness.RunConfig:
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise harness.ConfigError(str(path), f"malformed JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise harness.ConfigError(str(path), "top level must be an object")
    return harness.RunConfig.from_dict(doc, **_overrides(args))


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: harness.RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.target_seed if args.seed is None else args.seed
    n = args.subjects or (cfg.source_subjects if args.suite == "source" else cfg.target_subjects)
    make = synth.source_suite if args.suite == "source" else synth.target_suite
    suite = make(seed, n, cfg.duration_frames)
    labels, files = {}, []
    for i, scen in enumerate(suite):
        name = f"{args.suite}_{i:02d}.csv"
        roi = synth.roi_traces(scen, 0, scen.duration_frames)
        synth.write_roi_csv(out / name, roi, scen.frame_rate_hz)
        files.append(name)
        starts = list(synth.window_starts(scen.duration_frames, cfg.window, cfg.max_shift, cfg.stride))
        hr = [float(synth.hr_curve(scen, np.arange(t0, t0 + cfg.window, dtype=float)).mean()) for t0 in starts]
        labels[name] = {"t0": starts, "gt_hr_bpm": hr}
        if args.stm1:
            for t0 in starts:
                inst = synth.gen_instance(scen, t0, cfg.window, cfg.max_shift)
                stm = f"{args.suite}_{i:02d}_{t0:05d}.stm1"
                synth.stmap_write(out / stm, inst.stmap)
                files.append(stm)
    (out / "labels.json").write_text(json.dumps(labels, indent=1, sort_keys=True))
    manifest = {"suite": args.suite, "seed": seed, "window": cfg.window, "max_shift": cfg.max_shift,
                "stride": cfg.stride, "scenarios": [asdict(s) for s in suite],
                "files": {f: _sha(out / f) for f in files}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"wrote {len(suite)} {args.suite} subjects ({len(files)} files) to {out}")
    return 0


def cmd_pretrain(args, cfg: harness.RunConfig) -> int:
    seed = cfg.model_seed if args.seed is None else args.seed
    epochs = args.epochs or cfg.pretrain_epochs
    started = time.perf_counter()
    src = harness.source_stream(cfg)
    res = model_mod.pretrain(model_mod.BvpNetMini(seed=seed), src, epochs=epochs,
                             lr=cfg.pretrain_lr, seed=seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    model_mod.save(args.out, res.model, res.momentum_buffers, res.meta)
    print(f"pretrained on {len(src)} windows, loss {res.loss_trace[0]:.4f} -> {res.loss_trace[-1]:.4f} "
          f"in {time.perf_counter() - started:.1f}s; checkpoint {args.out}")
    return 0


def _load_target_dir(path: Path, cfg: harness.RunConfig) -> list:
    if not path.is_dir():
        raise FileNotFoundError(f"target directory not found: {path}")
    labels_path = path / "labels.json"
    labels = json.loads(labels_path.read_text()) if labels_path.exists() else {}
    stream = []
    for csv_path in sorted(path.glob("*.csv")):
        gt = labels.get(csv_path.name, {})
        by_t0 = dict(zip(gt.get("t0", []), gt.get("gt_hr_bpm", [])))
        for stm in synth.load_roi_csv(csv_path, cfg.window, cfg.stride, cfg.max_shift):
            stream.append(SimpleNamespace(stmap=stm, gt_hr_bpm=by_t0.get(stm.t0, float("nan"))))
    if not stream:
        raise FileNotFoundError(f"no ROI CSV files in {path}")
    return stream


def _model(args, cfg):
    if args.checkpoint:
        net, _, _ = model_mod.load(args.checkpoint)
        return net
    log.info("no checkpoint given; pretraining with model_seed=%s", cfg.model_seed)
    src = harness.source_stream(cfg)
    return model_mod.pretrain(model_mod.BvpNetMini(seed=cfg.model_seed), src,
                              epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, seed=cfg.model_seed).model


def cmd_adapt(args, cfg: harness.RunConfig) -> int:
    net = _model(args, cfg)
    stream = _load_target_dir(Path(args.target), cfg) if args.target else harness.target_stream(cfg)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = harness.run_tta(net, stream, cfg, seed)
    name = out / f"report_{cfg.mode}_seed{seed}.csv"
    report.write_csv(name)
    (out / f"summary_{cfg.mode}_seed{seed}.json").write_text(
        json.dumps(harness._json_safe(report.summary), indent=2, sort_keys=True))
    _print_summary(str(name), report.summary)
    return 0


def cmd_suite(args, cfg: harness.RunConfig) -> int:
    net = _model(args, cfg)
    modes = args.modes.split(",") if args.modes else list(harness.MODES)
    configs = [harness.RunConfig.from_dict({**cfg.to_dict(), "mode": m}) for m in modes]
    seeds = cfg.seeds if args.seed is None else tuple(args.seed + i for i in range(len(cfg.seeds)))
    out = Path(args.out or cfg.output_dir)
    summary = harness.run_suite(net, configs, seeds, out)
    _print_aggregate(summary["aggregate"])
    if summary["failures"]:
        for f in summary["failures"]:
            print(f"FAILED {f['mode']} seed {f['seed']}: {f['error']}", file=sys.stderr)
        return 2
    return 0


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return "-"
    return f"{v:.3f}" if isinstance(v, float) else str(v)


def _print_summary(name: str, s: dict):
    pre, post = s.get("pre") or {}, s.get("post") or {}
    print(f"{name}: rows={s['rows']} updates={s['updates']} conflicts={s['conflicts']}")
    print(f"  MAE  {_fmt(pre.get('mae'))} -> {_fmt(post.get('mae'))}")
    print(f"  RMSE {_fmt(pre.get('rmse'))} -> {_fmt(post.get('rmse'))}")
    print(f"  r    {_fmt(pre.get('pearson'))} -> {_fmt(post.get('pearson'))}")
    if "running_mae_final" in s:
        print(f"  running MAE final {_fmt(s['running_mae_final'])} min {_fmt(s['running_mae_min'])}")


def _print_aggregate(agg: dict):
    cols = ("mae_pre_mean", "mae_post_mean", "mae_post_std", "rmse_post_mean", "pearson_post_mean",
            "running_mae_final_mean")
    print(f"{'mode':<12} {'n':>2} " + " ".join(f"{c:>22}" for c in cols))
    for mode, e in agg.items():
        print(f"{mode:<12} {e['n']:>2} " + " ".join(f"{_fmt(e.get(c)):>22}" for c in cols))


def cmd_report(args, cfg) -> int:
    curves = []
    for p in map(Path, args.paths):
        if not p.exists():
            raise FileNotFoundError(f"report not found: {p}")
        if p.suffix == ".json":
            doc = json.loads(p.read_text())
            if "aggregate" in doc:
                _print_aggregate(doc["aggregate"])
            else:
                _print_summary(str(p), doc)
            continue
        try:
            rows = harness.read_report_csv(p)
        except (ValueError, KeyError) as exc:
            raise UsageError(f"{p}: not a report CSV ({exc})") from None
        n = len({r["instance"] for r in rows if r["cycle"] == 0}) or 1
        _print_summary(str(p), harness.summarize(rows, (), n))
        curves.append((p.stem, harness.running_mae(rows, n)))
    if args.plot:
        if not curves:
            raise UsageError("--plot needs at least one report CSV")
        plot_running_mae(curves, args.plot)
        print(f"plot written to {args.plot}")
    return 0


def plot_running_mae(curves, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for label, curve in curves:
        ax.plot(np.arange(len(curve)), curve, label=label, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("running MAE (bpm)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig keys")
    common.add_argument("--seed", type=int, help="base seed; suite runs seed, seed+1, ...")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    run = _Parser(add_help=False)
    run.add_argument("--mode", choices=harness.MODES)
    run.add_argument("--lr", type=float)
    run.add_argument("--cycles", type=int)
    run.add_argument("--psi", type=float)
    run.add_argument("--steps-per-instance", dest="steps_per_instance", type=int)
    run.add_argument("--temperature-scale", dest="temperature_scale", type=float)
    run.add_argument("--checkpoint", help="pretrained model; pretrains from scratch when omitted")
    run.add_argument("--out", help="output directory")

    p = _Parser(prog="cici", description="Test-time adaptation of a pulse estimator on synthetic STMaps.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a scenario suite as ROI CSV (and STM1)")
    s.add_argument("--out", required=True)
    s.add_argument("--suite", choices=("source", "target"), default="target")
    s.add_argument("--subjects", type=int)
    s.add_argument("--stm1", action="store_true", help="also write every window as an STM1 map")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="supervised training on the source suite")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("adapt", parents=[common, run], help="one online adaptation run")
    s.add_argument("--target", help="directory written by synth; default generates the target suite")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("suite", parents=[common, run], help="every mode under every seed")
    s.add_argument("--modes", help=f"comma list from {','.join(harness.MODES)}")
    s.set_defaults(func=cmd_suite)

    s = sub.add_parser("report", parents=[common], help="tabulate report CSV / summary JSON files")
    s.add_argument("paths", nargs="+")
    s.add_argument("--plot", help="write a running-MAE plot (PNG)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except harness.ConfigError as exc:
        print(f"error: invalid config key {exc.key!r}: {exc}", file=sys.stderr)
        return 1
    except (UsageError, FileNotFoundError, model_mod.CheckpointError, synth.StmapFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
