"""Command-line entry point: ``vidistill <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from .config import ConfigError, RunConfig, dump_config, load_config, section_fields, set_value
from .numerics import NonFiniteError

log = logging.getLogger("vidistill")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DIVERGED = 0, 2, 3, 4

# subcommand -> section whose keys become unprefixed flags
PRIMARY = {
    "gen-data": "data",
    "filter": "filter",
    "train-teacher": "teacher",
    "distill": "distill",
    "train-interp": "interp",
    "sample": "sample",
    "eval": "eval",
    "plot": None,
}
PREFIXED = ("data", "model")

EPILOG = """\
Configuration precedence: defaults < --config INI file < environment < flags.
Environment overrides use VIDISTILL_<SECTION>_<KEY>, e.g. VIDISTILL_DISTILL_LR=1e-4,
and VIDISTILL_SEED / VIDISTILL_OUT / VIDISTILL_THREADS for run-level keys.
Exit codes: 0 ok, 2 config error, 3 runtime failure, 4 divergence abort.
"""


class ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vidistill", description=__doc__, epilog=EPILOG,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    defaults = RunConfig()
    for name, primary in PRIMARY.items():
        sp = sub.add_parser(name, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", help="global seed")
        sp.add_argument("--threads", help="worker threads for torch and eval")
        sp.add_argument("--dry-run", action="store_true", help="validate the config and exit")
        sections = ([primary] if primary else []) + [s for s in PREFIXED if s != primary]
        for sect in sections:
            for key, typ in section_fields(getattr(defaults, sect)).items():
                flags = []
                if sect == primary:
                    flags.append("--" + key.replace("_", "-"))
                if sect in PREFIXED:
                    flags.append(f"--{sect}-{key}".replace("_", "-"))
                extra = {"nargs": "?", "const": "true"} if typ == "bool" else {}
                sp.add_argument(*flags, dest=f"cfg__{sect}__{key}", metavar="V", **extra)
        if name == "distill":
            sp.add_argument("--no-temporal", action="store_true", help="drop the temporal regularizer")
            sp.add_argument("--naive-regression", action="store_true", help="regression with weight 1 (no cache)")
            sp.add_argument("--no-regression", action="store_true", help="drop the regression loss")
            sp.add_argument("--resume", help="distillation checkpoint to resume from")
        if name == "filter":
            sp.add_argument("--corpus", help="corpus directory with manifest.csv (default: crafted demo corpus)")
            sp.add_argument("--report", help="FilterReport CSV path (default: <out>/filter_report.csv)")
        if name == "gen-data":
            sp.add_argument("--split", choices=("train", "val"), default="train")
        if name in ("train-teacher", "distill"):
            sp.add_argument("--data", help="corpus directory to train on (default: synthesize)")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    for attr in ("seed", "out", "threads"):
        if getattr(args, attr) is not None:
            set_value(cfg, None, attr, getattr(args, attr))
    for dest, value in vars(args).items():
        if dest.startswith("cfg__") and value is not None:
            _, sect, key = dest.split("__")
            set_value(cfg, sect, key, value)
    if getattr(args, "no_temporal", False):
        cfg.distill.temporal = False
    if getattr(args, "naive_regression", False) and getattr(args, "no_regression", False):
        raise ConfigError("--naive-regression and --no-regression are exclusive")
    if getattr(args, "naive_regression", False):
        cfg.distill.regression = "naive"
    if getattr(args, "no_regression", False):
        cfg.distill.regression = "none"
    return cfg.validate()


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} path is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args, out: Path) -> dict:
    from .pipeline import train_data, val_data, write_corpus

    clips, labels = train_data(cfg) if args.split == "train" else val_data(cfg)
    manifest = write_corpus(out / args.split, clips, labels)
    return {"clips": len(clips), "manifest": str(manifest)}


def cmd_filter(cfg: RunConfig, args, out: Path) -> dict:
    from .data import FilterConfig, filter_corpus, write_filter_report
    from .pipeline import crafted_filter_corpus, load_corpus_items

    items = load_corpus_items(args.corpus) if args.corpus else crafted_filter_corpus(cfg.seed)[0]
    f = cfg.filter
    fcfg = FilterConfig(min_width=f.min_width, min_height=f.min_height, hue_entropy_min=f.hue_entropy_min,
                        laplacian_min=f.laplacian_min, flow_min=f.flow_min, keep_fraction=f.keep_fraction)
    accepted, records = filter_corpus(items, fcfg)
    report = Path(args.report) if args.report else out / "filter_report.csv"
    report.parent.mkdir(parents=True, exist_ok=True)
    note = ("hue entropy: 36-bin histogram, natural log / log(36); laplacian on 0-255 luma; "
            "flow: 4x4 block matching radius 2; consistency: adjacent-frame cosine; aesthetic: heuristic")
    write_filter_report(records, report, header_note=note)
    return {"videos": len(records), "accepted": len(accepted), "report": str(report)}


def cmd_train_teacher(cfg: RunConfig, args, out: Path) -> dict:
    from .pipeline import noise_schedule, train_data, val_data
    from .plotting import plot_teacher_metrics
    from .trainer import denoiser_val_loss, train_teacher

    clips, labels = train_data(cfg, args.data)
    val = val_data(cfg)
    model, hist = train_teacher(cfg.teacher, cfg.model, clips, labels, cfg.data.n_classes,
                                seed=cfg.seed, out_dir=out, val=val)
    vl, zb = denoiser_val_loss(model, *val, noise_schedule(cfg))
    plot_teacher_metrics(out / "teacher_metrics.csv", out / "figures" / "teacher_loss")
    return {"val_loss": vl, "zero_baseline": zb, "checkpoint": str(out / "teacher.ckpt"),
            "sha256": io.file_sha256(out / "teacher.ckpt")}


def cmd_distill(cfg: RunConfig, args, out: Path) -> dict:
    from .pipeline import noise_schedule, train_data
    from .plotting import plot_distill_metrics
    from .trainer import load_teacher, run_distillation

    teacher_path = _require(cfg.distill.teacher, "teacher checkpoint")
    if args.resume:
        _require(args.resume, "resume checkpoint")
    clips, labels = train_data(cfg, args.data)
    teacher = load_teacher(teacher_path, cfg.model, cfg.data.channels, cfg.data.n_classes)
    samples_dir = out / "samples"

    def dump(state):
        samples_dir.mkdir(parents=True, exist_ok=True)
        io.save_clip(samples_dir / f"step{state.gen_steps:06d}.avdt", state.latest_x[0])

    run_distillation(cfg.distill, teacher, clips, labels, noise_schedule(cfg), out,
                     seed=cfg.seed, resume=args.resume, on_sample=dump)
    final = out / "distill_final.ckpt"
    plot_distill_metrics(out / "metrics.csv", out / "figures" / "distill_metrics")
    return {"checkpoint": str(final), "sha256": io.file_sha256(final),
            "metrics_sha256": io.file_sha256(out / "metrics.csv")}


def cmd_train_interp(cfg: RunConfig, args, out: Path) -> dict:
    import csv

    from .interp import InterpConfig, average_baseline_mse, interpolated_mse, train_interpolator
    from .metrics import psnr
    from .pipeline import interp_data

    train, val = interp_data(cfg)
    i = cfg.interp
    rows = []
    net = train_interpolator(train, InterpConfig(channels=cfg.data.channels, width=i.width), steps=i.steps,
                             batch=i.batch, lr=i.lr, seed=cfg.seed, log=lambda s, l: rows.append((s, l)))
    with (out / "interp_metrics.csv").open("w", newline="") as fh:
        csv.writer(fh).writerows([("step", "loss"), *rows])
    base, trained = average_baseline_mse(val), interpolated_mse(net, val)
    io.save_checkpoint(out / "interp.ckpt", io.module_entries("interp", net))
    avg = 0.5 * (val[:, 0:-2:2] + val[:, 2::2])
    with torch.no_grad():
        from .interp import expand_sequence, temporal_downsample

        pred = expand_sequence(net, temporal_downsample(val))[:, 1::2]
    return {"baseline_mse": base, "interp_mse": trained, "relative_gain": 1.0 - trained / base,
            "psnr_gain_db": psnr(pred, val[:, 1::2]) - psnr(avg, val[:, 1::2]),
            "checkpoint": str(out / "interp.ckpt")}


def cmd_sample(cfg: RunConfig, args, out: Path) -> dict:
    from .pipeline import SAMPLE_SEED_OFFSET, load_generator, load_interp, sample_clips

    s = cfg.sample
    g = load_generator(_require(s.generator, "generator checkpoint"), cfg)
    interp = load_interp(_require(s.interp, "interpolator checkpoint"), cfg) if s.half_rate else None
    clips, trace, cost = sample_clips(g, cfg, s.n, cfg.seed + SAMPLE_SEED_OFFSET, frames=s.frames or None,
                                      interp=interp, split=s.split)
    sdir = out / "samples"
    sdir.mkdir(parents=True, exist_ok=True)
    for n, c in enumerate(clips):
        io.save_clip(sdir / f"{n:05d}.avdt", c)
    if s.trace:
        np.savez(out / "trace.npz", *[t.numpy() for t in trace])
    return {"clips": len(clips), "frames": int(clips.shape[1]), "frame_steps_per_clip": cost / len(clips),
            "half_rate": s.half_rate}


def _load_clip_dir(path: Path) -> np.ndarray:
    files = sorted(path.glob("*.avdt"))
    if not files:
        raise ConfigError(f"no .avdt clips in {path}")
    return np.stack([io.load_clip(f) for f in files])


def cmd_eval(cfg: RunConfig, args, out: Path) -> dict:
    from .metrics import MetricRow, cosine_profile, histogram_l1, saturation_profile, write_metrics
    from .pipeline import evaluate_clips
    from .plotting import plot_cosine_profile

    src = _require(cfg.eval.samples, "samples directory")
    # accept either a sample run directory or its samples/ subdirectory
    if (src / "samples").is_dir():
        run_dir, clip_dir = src, src / "samples"
    else:
        run_dir, clip_dir = (src.parent if src.name == "samples" else src), src
    clips = _load_clip_dir(clip_dir)
    res = evaluate_clips(clips, cfg.eval.flow_threshold)
    run = run_dir.name
    rows = [MetricRow(run, k, v, count=len(clips)) for k, v in res.items()]
    sat = [saturation_profile(c) for c in clips]
    if sat[0][0] is not None:
        hist = np.sum([h for _, h in sat], axis=0)
        rows.append(MetricRow(run, "saturation_mean", float(np.mean([m for m, _ in sat])), count=len(clips)))
        rows.append(MetricRow(run, "saturation_hist", None, list(hist), count=int(hist.sum())))
        if cfg.eval.reference:
            ref = _load_clip_dir(Path(cfg.eval.reference))
            rh = np.sum([saturation_profile(c)[1] for c in ref], axis=0)
            rows.append(MetricRow(run, "saturation_l1_vs_reference", histogram_l1(hist, rh), count=len(clips)))
    trace_file = run_dir / "trace.npz"
    if trace_file.exists():
        with np.load(trace_file) as z:
            trace = [z[f"arr_{i}"] for i in range(len(z.files))]
        prof = cosine_profile(trace)
        for k, (m, sd) in enumerate(prof, start=1):
            rows.append(MetricRow(run, f"cosine_step{k}_mean", m, count=len(clips)))
            rows.append(MetricRow(run, f"cosine_step{k}_std", sd, count=len(clips)))
        plot_cosine_profile({run: prof}, out / "figures" / "cosine_profile")
    write_metrics(rows, out / "eval_metrics.csv")
    return res


def cmd_plot(cfg: RunConfig, args, out: Path) -> dict:
    from .plotting import plot_distill_metrics, plot_teacher_metrics

    made = []
    for metrics in sorted(out.rglob("metrics.csv")):
        made += plot_distill_metrics(metrics, metrics.parent / "figures" / "distill_metrics")
    for metrics in sorted(out.rglob("teacher_metrics.csv")):
        made += plot_teacher_metrics(metrics, metrics.parent / "figures" / "teacher_loss")
    return {"figures": len(made)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "filter": cmd_filter,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "train-interp": cmd_train_interp,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def _fail(code: int, kind: str, msg: str) -> int:
    print(f"error code={code} kind={kind} msg={json.dumps(str(msg))}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .trainer import DivergenceError

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except (ArgError, ConfigError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    out = Path(cfg.out)
    if args.dry_run:
        print(json.dumps({"command": args.command, "valid": True, "config": dataclasses.asdict(cfg)}, default=str))
        return EXIT_OK
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / f"{args.command}.ini")
        result = COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (DivergenceError, NonFiniteError) as exc:
        return _fail(EXIT_DIVERGED, "divergence", exc)
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}")
    print(json.dumps({"command": args.command, **result}, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
