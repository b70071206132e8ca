"""Command-line entry point: ``wsinr <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import RunConfig, config_hash, default_run_root, load_config, parse_overrides, resolve
from .data import LEVEL_TAGS, SyntheticSpec, generate_synthetic, level_index, write_dataset
from .errors import ConfigError, DataError, GradcheckFailed, UsageError, WsiInrError
from .experiments.oracles import SCOPES, run_gradcheck
from .experiments.protocols import (
    MODES,
    SlideRun,
    arm_config,
    decouple_hash_levels,
    eval_cross_resolution,
    load_slides,
    run_ablation,
    write_table1,
    write_table2,
)
from .experiments.report import emit_report
from .pipeline import (
    TrainState,
    evaluate_slide,
    infer_dense,
    make_encoder,
    run_ito,
    train_stage1,
    train_stage2,
    training_metrics,
)
from .rundir import RunDir

log = logging.getLogger("wsinr")

ITO_MODES = {"resolution-specific": "resolution-specific-opt", "base-resolution": "base-resolution-opt"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed_range(text: str) -> range:
    try:
        a, b = (int(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"seed range {text!r} is not START:STOP") from None
    if b <= a:
        raise UsageError(f"empty seed range {text!r}")
    return range(a, b)


# -- config and run resolution -----------------------------------------------------


def _new_config(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "config", None):
        return load_config(args.config, overrides)
    return resolve(args.preset, overrides)


def _run_for_new(args, cfg: RunConfig) -> RunDir:
    path = Path(args.run) if args.run else default_run_root() / f"{cfg.preset}-{config_hash(cfg)}"
    return RunDir(path)


def _existing(args) -> tuple[RunDir, RunConfig]:
    if not args.run:
        raise UsageError("--run is required for this command")
    run = RunDir(args.run)
    cfg = run.config()
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        # deliberately allowed: a changed config then fails the checkpoint hash check
        cfg = load_config(run.config_path, overrides)
    return run, cfg


def _find_slide(cfg: RunConfig, slide_id: str):
    for split in ("test", "train"):
        for s in load_slides(cfg, split):
            if s.slide_id == slide_id:
                return s, split
    raise DataError(f"slide {slide_id!r} is in neither the training nor the test set")


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    entries = []
    for split, seeds in (("train", args.seed_range), ("test", args.test_seed_range)):
        for seed in seeds or ():
            spec = SyntheticSpec(seed=seed, height=args.size, width=args.size)
            entries.append((generate_synthetic(spec), split, spec))
    manifest = write_dataset(out, entries)
    print(f"wrote {len(entries)} slides to {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _new_config(args)
    run = _run_for_new(args, cfg)
    cfg = replace(cfg, run_dir=str(run.path))
    run.write_config(cfg)
    slides = load_slides(cfg, "train")
    if not slides:
        raise DataError("no training slides")
    state = run.latest_state(cfg) if args.resume else None
    if state is None:
        if not args.resume and any(run.checkpoint(n).exists() for n in ("latest", "stage1", "stage2")):
            raise ConfigError(f"{run.path} already has checkpoints; pass --resume to continue")
        state = TrainState.create(cfg, [s.slide_id for s in slides])

    def on_epoch(st, stage, epoch):
        run.save_state(st, "latest")
        print(f"{stage} epoch {epoch}: loss {sum(h['loss'] for h in st.history[-len(slides):]) / len(slides):.6f}", flush=True)

    train_stage1(slides, state, on_epoch, dump_dir=run.path)
    run.save_state(state, "stage1")
    train_stage2(slides, state, on_epoch, dump_dir=run.path)
    run.save_state(state, "stage2")
    run.write_history(state)
    run.write_metrics(training_metrics(slides, state), "train")
    print(f"trained {len(slides)} slides; run directory {run.path}")
    return 0


def cmd_ito(args) -> int:
    run, cfg = _existing(args)
    level_index(args.level)
    state = run.trained_state(cfg)
    slide, _ = _find_slide(cfg, args.slide)
    images = slide.images_only()
    fit_level = args.level if args.mode == "resolution-specific" else "base"
    res = run_ito(images, fit_level, state.model, make_encoder(cfg, slide.slide_id), replace(cfg.ito, level=fit_level), cfg.data.window)
    run.write_ito(res, slide.slide_id, cfg)
    out = infer_dense(images, args.level, state.model, res.encoder, cfg.data.window)
    run.write_dense(out, slide.slide_id)
    print(f"{slide.slide_id} {fit_level}: stop={res.decision.reason} epoch={res.decision.epoch} mse={res.decision.mse:.6f}")
    return 0


def cmd_infer(args) -> int:
    run, cfg = _existing(args)
    level_index(args.level)
    state = run.trained_state(cfg)
    slide, split = _find_slide(cfg, args.slide)
    if split == "train":
        enc = state.encoders[slide.slide_id]
    else:
        src = args.encoder_level or (args.level if run.ito_dir(slide.slide_id, args.level).exists() else "base")
        enc = run.load_ito_encoder(slide.slide_id, src, cfg)
    out = infer_dense(slide.images_only(), args.level, state.model, enc, cfg.data.window)
    d = run.write_dense(out, slide.slide_id)
    m = evaluate_slide(out, slide)
    print(f"{slide.slide_id} {args.level}: dice={m['dice']:.4f} psnr={m['psnr']:.2f} -> {d}")
    return 0


def cmd_eval(args) -> int:
    run, cfg = _existing(args)
    state = run.trained_state(cfg)
    slides = load_slides(cfg, "test")
    by_id = {s.slide_id: s for s in slides}
    modes = list(MODES) if args.protocol == "both" else [args.protocol]
    rows: dict[str, list[dict]] = {m: [] for m in modes}

    def on_cell(cell: SlideRun):
        rows[cell.mode].append(evaluate_slide(cell.output, by_id[cell.slide]))
        if cell.mode == modes[-1]:
            run.write_dense(cell.output, cell.slide)
            if cell.ito.level == cell.level:
                run.write_ito(cell.ito, cell.slide, cfg)

    table = eval_cross_resolution(cfg, state.model, slides, modes, on_cell=on_cell)
    write_table1(run.path / "table1.csv", table)
    for m in modes:
        run.write_metrics(rows[m], m)
    print(f"evaluated {len(slides)} test slides: {run.path / 'table1.csv'}")
    return 0


def cmd_ablate(args) -> int:
    run, cfg = _existing(args)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    for a in arms:
        arm_config(cfg, a)
    rows = run_ablation(cfg, arms, load_slides(cfg, "train"), load_slides(cfg, "test"))
    write_table2(run.path / "table2.csv", rows)
    for r in rows:
        print(f"{r.arm:8s} {r.level:7s} {r.dice:.4f}")
    return 0


def cmd_decouple(args) -> int:
    run, cfg = _existing(args)
    state = run.trained_state(cfg)
    if cfg.experiment.encoder != "hash":
        raise ConfigError("decouple needs a hash-grid run")
    test = load_slides(cfg, "test")
    slide = _find_slide(cfg, args.slide)[0] if args.slide else (test[0] if test else None)
    if slide is None:
        raise DataError("no test slide to decouple")
    images = slide.images_only()
    if run.ito_dir(slide.slide_id, "base").exists():
        enc = run.load_ito_encoder(slide.slide_id, "base", cfg)
    else:
        res = run_ito(images, "base", state.model, make_encoder(cfg, slide.slide_id), cfg.ito, cfg.data.window)
        run.write_ito(res, slide.slide_id, cfg)
        enc = res.encoder
    split = args.split if args.split is not None else cfg.experiment.decouple_split
    results = decouple_hash_levels(images, args.level, state.model, enc, cfg.data.window, split, cfg.experiment.spectrum_patch)
    write_decouple(run.path / "decouple", results)
    for r in results.values():
        print(f"{r.variant:9s} psnr={r.psnr:.2f} high-band={r.spectrum.high_band_energy():.4g}")
    return 0


def write_decouple(out: Path, results) -> None:
    from .data import save_png

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "decouple.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "psnr", "high_band_energy", "parseval_rel_err", "patch_row", "patch_col", "patch_size"])
        for r in results.values():
            s = r.spectrum
            w.writerow([r.variant, repr(r.psnr), repr(s.high_band_energy()), repr(s.parseval_rel_err), s.origin[0], s.origin[1], s.size])
    for r in results.values():
        save_png(out / f"{r.variant}_reconstruction.png", r.reconstruction)
        save_png(out / f"{r.variant}_mask.png", r.mask)
        lm = r.spectrum.log_magnitude
        save_png(out / f"{r.variant}_spectrum.png", lm / lm.max() if lm.max() > 0 else lm)
        with open(out / f"{r.variant}_bands.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["band", "energy"])
            for i, e in enumerate(r.spectrum.band_energy):
                w.writerow([i, repr(float(e))])


def cmd_gradcheck(args) -> int:
    overrides = parse_overrides(args.set)
    cfg = load_config(Path(args.run) / "config.json", overrides) if args.run else resolve(args.preset, overrides)
    summary = run_gradcheck(cfg, args.scope, range(args.seeds))
    for line in summary.lines():
        print(line)
    print(f"max rel err {summary.max_rel_err:.3e} (tolerance {summary.tolerance:g}, {args.seeds} seeds)")
    if not summary.passed:
        raise GradcheckFailed(f"max relative error {summary.max_rel_err:.3e} >= {summary.tolerance:g}")
    return 0


def cmd_report(args) -> int:
    if not args.run:
        raise UsageError("--run is required for report")
    if not Path(args.run).is_dir():
        raise DataError(f"run directory {args.run} not found")
    path = emit_report(args.run)
    print(f"report written to {path}")
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--run", help="run directory")
    common.add_argument("--preset", default="desk-scale", help="paper-scale | desk-scale | smoke")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="wsinr", description="Coordinate-based whole-slide segmentation at desk scale.")
    p.add_argument("--version", action="version", version=f"wsinr {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset with a manifest")
    s.add_argument("--seed-range", type=_seed_range, required=True, help="training seeds START:STOP")
    s.add_argument("--test-seed-range", type=_seed_range, default=None, help="test seeds START:STOP")
    s.add_argument("--size", type=int, default=512)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="two-stage training")
    s.add_argument("--config", help="JSON config (flat dotted keys)")
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ito", parents=[common], help="inference-time optimization for one slide")
    s.add_argument("--slide", required=True)
    s.add_argument("--level", default="base", choices=LEVEL_TAGS)
    s.add_argument("--mode", default="resolution-specific", choices=sorted(ITO_MODES))
    s.set_defaults(func=cmd_ito)

    s = sub.add_parser("infer", parents=[common], help="dense inference for one slide and level")
    s.add_argument("--slide", required=True)
    s.add_argument("--level", default="base", choices=LEVEL_TAGS)
    s.add_argument("--encoder-level", default=None, choices=LEVEL_TAGS, help="which adapted encoder to use")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="cross-resolution evaluation on the test slides")
    s.add_argument("--protocol", default="both", choices=list(MODES) + ["both"])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="encoder ablation")
    s.add_argument("--arms", default="hash,nerf-pe,none")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("decouple", parents=[common], help="low/high hash-level decoupling with spectra")
    s.add_argument("--split", type=int, default=None)
    s.add_argument("--slide", default=None)
    s.add_argument("--level", default="base", choices=LEVEL_TAGS)
    s.set_defaults(func=cmd_decouple)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient oracle")
    s.add_argument("--scope", default="all", choices=SCOPES)
    s.add_argument("--seeds", type=int, default=5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", parents=[common], help="markdown report and figures for a run")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        return args.func(args)
    except WsiInrError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1 if isinstance(exc, GradcheckFailed) else 2


if __name__ == "__main__":
    sys.exit(main())
