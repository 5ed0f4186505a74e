"""``montage`` command line: one subcommand per pipeline stage.

Every artifact-producing run writes ``run-manifest.json`` into ``--out`` with
the resolved configuration, seed and SHA-256 of every input file.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset_io import load_annotations, save_ppm, split_by_image
from .erf import erf_grid, erf_maps, erf_mass, heatmap, region_center_positions, region_masks
from .montage import (ADJUST_MODES, REGION_NAMES, GroupError, MontageTemplate, PatchSource, TemplateError,
                      assign_groups, batch_stream, denormalize, parse_template)
from .network import FeatureGeometry, load_checkpoint
from .objective import OBJECTIVES, home_regions
from .sampling import SampleSet, build_sample_set, read_manifest, write_manifest
from .trainer import ConfigError, TrainConfig, evaluate, load_config, train, write_metrics

log = logging.getLogger("montage")

OBJECTIVE_FLAGS = {"erf": "erf_adaptive", "block": "blockwise", "global": "global"}
SHORT_NAMES = ("TL", "TR", "BL", "BR")


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(out: Path, args, config: dict, inputs: list[str]):
    manifest = {
        "tool": "montage",
        "version": __version__,
        "subcommand": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "seed": args.seed_resolved,
        "config": config,
        "inputs": {p: _sha256(p) for p in inputs if p and os.path.isfile(p)},
    }
    (out / "run-manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _resolve_config(args) -> TrainConfig:
    overrides = {
        "seed": args.seed,
        "tau": args.tau,
        "total_iters": args.total_iters,
        "refresh_interval": args.refresh,
        "warmup_iters": args.warmup,
        "objective": OBJECTIVE_FLAGS[args.objective] if args.objective else None,
        "jobs": 1 if args.deterministic else args.jobs,
    }
    if args.template:
        t = parse_template(args.template)
        overrides.update(canvas_w=t.canvas_w, canvas_h=t.canvas_h, split_x=t.split_x, split_y=t.split_y)
    if getattr(args, "relax_groups", False):
        overrides["relax_groups"] = True
    if getattr(args, "adjust", None):
        overrides["adjust_mode"] = args.adjust
    cfg = load_config(args.config, profile=args.profile, **overrides)
    args.seed_resolved = cfg.seed
    return cfg


def _load_samples(args, cfg: TrainConfig) -> tuple[SampleSet, SampleSet | None, list[str]]:
    """Training samples (+ optional held-out samples) from a manifest or annotations."""
    holdout = getattr(args, "holdout", 0.0) or 0.0
    if getattr(args, "samples", None):
        train_set = assign_groups(read_manifest(args.samples))
        eval_set = None
        inputs = [args.samples]
        if getattr(args, "eval_samples", None):
            eval_set = assign_groups(read_manifest(args.eval_samples))
            inputs.append(args.eval_samples)
        return train_set, eval_set, inputs
    if not getattr(args, "annotations", None):
        raise ConfigError("need --samples or --annotations")
    index = load_annotations(args.annotations, args.images_root)
    eval_set = None
    if holdout > 0:
        index, held = split_by_image(index, holdout, cfg.seed)
        eval_set = assign_groups(build_sample_set(held, args.ratio, cfg.seed + 1))
    return assign_groups(build_sample_set(index, args.ratio, cfg.seed)), eval_set, [args.annotations]


def cmd_extract(args, out: Path) -> int:
    args.seed_resolved = 0 if args.seed is None else args.seed
    index = load_annotations(args.annotations, args.images_root)
    if index.dropped:
        log.warning("dropped %d degenerate boxes", index.dropped)
    samples = assign_groups(build_sample_set(index, args.ratio, args.seed_resolved,
                                             with_negatives=not args.no_negatives))
    write_manifest(out / "samples.tsv", samples)
    _write_run_manifest(out, args, {"ratio": args.ratio, "negatives": not args.no_negatives}, [args.annotations])
    print(f"{samples.pos_count} positives, {samples.neg_count} negatives -> {out / 'samples.tsv'}")
    return 0


def cmd_assemble(args, out: Path) -> int:
    cfg = _resolve_config(args)
    template = cfg.template()
    samples = assign_groups(read_manifest(args.samples))
    stream = batch_stream(samples, PatchSource(), template, 1, cfg.seed, epochs=1, relax_groups=cfg.relax_groups,
                          mode=cfg.adjust_mode, jobs=cfg.jobs)
    n = 0
    for batch in stream:
        if n >= args.count:
            break
        im = batch[0]
        save_ppm(out / f"assembled-{n:04d}.ppm", denormalize(im.pixels.data))
        sidecar = {
            "template": template.spec(),
            "regions": [
                {"region": REGION_NAMES[i], "box": list(template.regions[i].as_tuple()),
                 "label": int(rec.label), "polarity": rec.polarity, "group": rec.group,
                 "sample_index": int(idx), "image_path": rec.image_path,
                 "source_box": list(rec.region.as_tuple())}
                for i, (rec, idx) in enumerate(zip(im.records, im.indices))
            ],
        }
        (out / f"assembled-{n:04d}.json").write_text(json.dumps(sidecar, indent=2) + "\n")
        n += 1
    stream.close()
    _write_run_manifest(out, args, cfg.to_dict(), [args.samples])
    print(f"wrote {n} assembled images to {out}")
    return 0


def cmd_pretrain(args, out: Path) -> int:
    cfg = _resolve_config(args)
    samples, _, inputs = _load_samples(args, cfg)
    _write_run_manifest(out, args, cfg.to_dict(), inputs + ([args.config] if args.config else []))
    result = train(cfg, samples, PatchSource(), out_dir=out)
    print(f"{len(result.metrics)} iterations; checkpoints: {', '.join(p.name for p in result.checkpoints)}")
    return 0


def cmd_evaluate(args, out: Path) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    args.seed_resolved = 0 if args.seed is None else args.seed
    template = parse_template(args.template or meta.get("template") or TrainConfig().template().spec())
    samples = assign_groups(read_manifest(args.samples))
    if samples.num_classes != params.arch.num_classes:
        raise ValueError(f"checkpoint predicts {params.arch.num_classes} classes, samples have {samples.num_classes}")
    report = evaluate(params, samples, template, PatchSource(), seed=args.seed_resolved, epochs=args.epochs,
                      relax_groups=args.relax_groups)
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    _write_run_manifest(out, args, {"template": template.spec(), "epochs": args.epochs},
                        [args.checkpoint, args.samples])
    print(f"accuracy {report.accuracy:.4f} (macro {report.macro_accuracy:.4f}) over {report.count} regions")
    return 0


def _probe_image(samples: SampleSet, template: MontageTemplate, seed: int) -> np.ndarray:
    batch = next(batch_stream(samples, PatchSource(), template, 1, seed, epochs=1))
    return batch[0].chw()


def erf_report(params, probe: np.ndarray, template: MontageTemplate, mode: str = "abs") -> dict:
    geo = FeatureGeometry.for_input(params.arch, template.canvas_h, template.canvas_w)
    positions = region_center_positions(template, geo)
    masks = region_masks(template, template.canvas_h, template.canvas_w)
    home = home_regions(template, geo)
    maps = erf_maps(params, probe, positions, mode=mode)
    rows = []
    for name, (j, k), g in zip(SHORT_NAMES, positions, maps):
        rho = erf_mass(g, masks)
        rows.append({"region": name, "position": [j, k], "rho": rho.tolist(), "rho_home": float(rho[home[j, k]])})
    # centre cells of large regions cannot see past their region; the grid mean shows boundary leakage
    grid = erf_grid(params, probe, masks, mode=mode, fallback="uniform")
    grid_home = np.take_along_axis(grid, home[..., None], axis=2)[..., 0]
    return {"maps": maps, "regions": rows, "mean_rho_home": float(np.mean([r["rho_home"] for r in rows])),
            "grid_mean_rho_home": float(grid_home.mean())}


def cmd_erf_map(args, out: Path) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    args.seed_resolved = 0 if args.seed is None else args.seed
    template = parse_template(args.template or meta.get("template") or TrainConfig().template().spec())
    samples = assign_groups(read_manifest(args.samples))
    probe = _probe_image(samples, template, args.seed_resolved)
    summary = {}
    runs = [("trained", params)]
    if args.init_checkpoint:
        runs.append(("init", load_checkpoint(args.init_checkpoint)[0]))
    for tag, p in runs:
        rep = erf_report(p, probe, template, mode=args.mode)
        for name, g in zip(SHORT_NAMES, rep.pop("maps")):
            save_ppm(out / f"erf-{tag}-{name}.ppm", heatmap(g))
        summary[tag] = rep
        print(f"{tag}: in-home-region ERF mass {rep['mean_rho_home']:.4f} at region centres, "
              f"{rep['grid_mean_rho_home']:.4f} averaged over all feature cells")
    (out / "erf-report.json").write_text(json.dumps(summary, indent=2) + "\n")
    inputs = [args.checkpoint, args.samples] + ([args.init_checkpoint] if args.init_checkpoint else [])
    _write_run_manifest(out, args, {"template": template.spec(), "mode": args.mode}, inputs)
    return 0


def cmd_compare(args, out: Path) -> int:
    cfg = _resolve_config(args)
    samples, eval_set, inputs = _load_samples(args, cfg)
    if eval_set is None:
        raise ConfigError("compare-strategies needs held-out data: --eval-samples or --holdout > 0")
    _write_run_manifest(out, args, cfg.to_dict(), inputs + ([args.config] if args.config else []))
    template = cfg.template()
    acc_rows, summary = [], []

    def _eval(params):
        return evaluate(params, eval_set, template, PatchSource(), seed=cfg.seed + 2)

    for objective in OBJECTIVES:
        run_cfg = TrainConfig(**{**cfg.to_dict(), "objective": objective})
        result = train(run_cfg, samples, PatchSource(), out_dir=out / objective)
        # accuracy curve is read back from the refresh-boundary checkpoints
        final = None
        for path in result.checkpoints:
            p, meta = load_checkpoint(path)
            rep = _eval(p)
            acc_rows.append((objective, meta["iteration"], rep.accuracy, rep.macro_accuracy))
            final = rep
        write_metrics(out / f"metrics-{objective}.csv", result.metrics)
        m = np.array([r[2] for r in result.metrics]) if result.metrics else np.array([np.nan])
        q = max(1, len(m) // 4)
        summary.append((objective, final.accuracy, final.macro_accuracy, float(m[:q].mean()), float(m[-q:].mean())))
        print(f"{objective:>13}: accuracy {final.accuracy:.4f}, macro {final.macro_accuracy:.4f}")
    lines = ["objective,iter,accuracy,macro_accuracy"]
    lines += [f"{o},{i},{a!r},{m!r}" for o, i, a, m in acc_rows]
    (out / "accuracy.csv").write_text("\n".join(lines) + "\n")
    lines = ["objective,accuracy,macro_accuracy,loss_first_quarter,loss_last_quarter"]
    lines += [",".join([s[0]] + [repr(v) for v in s[1:]]) for s in summary]
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_synth(args, out: Path) -> int:
    from .synthetic import generate_shapes

    args.seed_resolved = 0 if args.seed is None else args.seed
    path = generate_shapes(out, args.n_images, seed=args.seed_resolved, size=args.size)
    _write_run_manifest(out, args, {"n_images": args.n_images, "size": args.size}, [])
    print(f"wrote {args.n_images} images and {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--profile", choices=("desk", "full"), default="desk")
    common.add_argument("--seed", type=int, help="RNG seed (u64)")
    common.add_argument("--out", default=".", help="output directory (created if absent)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for batch assembly")
    common.add_argument("--deterministic", action="store_true", help="single worker, fixed order")
    common.add_argument("--objective", choices=tuple(OBJECTIVE_FLAGS))
    common.add_argument("--tau", type=float)
    common.add_argument("--template", help="WxH:SX,SY")
    common.add_argument("--total-iters", type=int)
    common.add_argument("--refresh", type=int, help="soft-label refresh interval")
    common.add_argument("--warmup", type=int, help="warmup iterations")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--samples", help="sample manifest from `extract`")
    data.add_argument("--annotations", help="annotation JSON (samples are extracted on the fly)")
    data.add_argument("--images-root", help="directory image file names are relative to")
    data.add_argument("--ratio", type=float, default=10.0, help="positive:negative ratio")
    data.add_argument("--relax-groups", action="store_true", help="refill empty T/W groups from S")

    parser = argparse.ArgumentParser(prog="montage", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common], help="build the sample manifest")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images-root")
    p.add_argument("--ratio", type=float, default=10.0)
    p.add_argument("--no-negatives", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("assemble", parents=[common], help="write assembled canvases as PPM")
    p.add_argument("--samples", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--adjust", choices=ADJUST_MODES)
    p.add_argument("--relax-groups", action="store_true")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("pretrain", parents=[common, data], help="run pre-training")
    p.add_argument("--holdout", type=float, default=0.0)
    p.add_argument("--adjust", choices=ADJUST_MODES)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evaluate", parents=[common], help="region accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--relax-groups", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("erf-map", parents=[common], help="ERF heatmaps at the four region centres")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--init-checkpoint", help="also render this (e.g. iteration-0) checkpoint")
    p.add_argument("--samples", required=True, help="manifest the probe image is assembled from")
    p.add_argument("--mode", choices=("abs", "sq"), default="abs")
    p.set_defaults(func=cmd_erf_map)

    p = sub.add_parser("compare-strategies", parents=[common, data], help="train all three objectives")
    p.add_argument("--eval-samples")
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--eval-every", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic shapes dataset")
    p.add_argument("--n-images", type=int, default=400)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("MONTAGE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    args.seed_resolved = args.seed
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return args.func(args, out)
    except (ConfigError, TemplateError) as e:
        print(f"montage {args.command}: configuration error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, GroupError, ArithmeticError, KeyError) as e:
        print(f"montage {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
