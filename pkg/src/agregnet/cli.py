"""Single entry point for the pipeline.

Subcommands: synth, gen-gt, train, localize, eval, report. Exit codes: 0 on
success, 1 on validation/usage errors, 2 on I/O errors. Every run writes a
manifest (command, inputs, seed, version, timestamps, outputs) atomically at
the end so runs can be audited and reproduced. AGREGNET_THREADS caps torch's
worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .annotations import (
    drop_duplicates,
    find_near_duplicates,
    load_annotations,
    split_dataset,
)
from .errors import ConfigError, GenerationError, TrainingDivergedError
from .fmap import read_fmap, write_fmap
from .groundtruth import SigmaPolicy, compute_adaptive_sigmas, make_ground_truth
from .localization import (
    LocalizeParams,
    count_from_density,
    detect_peaks,
    localize,
    suggested_min_intensity,
)
from .metrics import (
    MetricsReport,
    PerImageRecord,
    aggregate_report,
    evaluate_image,
    psnr,
    ssim,
)
from .network import NetworkConfig, build_model, save_checkpoint, variant_name
from .reporting import (
    count_scatter,
    density_overlay,
    localization_overlay,
    render_table,
)
from .synthdata import SceneConfig, generate_dataset, scene_config_from_json
from .training import LossConfig, TrainConfig, train, write_history_csv

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


@dataclass
class RunManifest:
    """Everything needed to audit or re-run a command."""

    command: str
    argv: list[str]
    config_paths: list[str]
    seed: int | None
    version: str
    started: str
    finished: str = ""
    outputs: list[str] = field(default_factory=list)
    parameters: dict = field(default_factory=dict)

    def write(self, path: Path) -> None:
        self.finished = _now()
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(dataclasses.asdict(self), indent=1) + "\n"
        fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=".manifest-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _manifest(args, command: str, configs: list, seed, parameters: dict) -> RunManifest:
    return RunManifest(
        command=command,
        argv=list(args._argv),
        config_paths=[str(c) for c in configs if c],
        seed=seed,
        version=__version__,
        started=args._started,
        parameters=parameters,
    )


def _sigma_policy(args) -> SigmaPolicy:
    return SigmaPolicy(
        ratio=args.sigma_ratio,
        fallback_sigma=args.fallback_sigma,
        min_sigma=args.min_sigma,
    )


def _add_sigma_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--sigma-ratio", type=float, default=0.15,
                        help="kernel width as a fraction of nearest-neighbor distance")
    parser.add_argument("--fallback-sigma", type=float, default=8.0,
                        help="kernel width (px) for a single-point image")
    parser.add_argument("--min-sigma", type=float, default=1.0,
                        help="lower clamp on kernel width (px)")


def cmd_synth(args) -> int:
    cfg = scene_config_from_json(args.config) if args.config else SceneConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out_dir = Path(args.out)
    ann_path = generate_dataset(cfg, args.count, out_dir)
    manifest = _manifest(args, "synth", [args.config], cfg.seed,
                         {"count": args.count, "scene": dataclasses.asdict(cfg)})
    manifest.outputs = [str(ann_path)] + sorted(
        str(p) for p in out_dir.glob("scene_*.png")
    )
    manifest.write(out_dir / "manifest.json")
    print(f"wrote {args.count} scenes and {ann_path}")
    return EXIT_OK


def cmd_gen_gt(args) -> int:
    images = load_annotations(args.annotations)
    policy = _sigma_policy(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for image in images:
        stem = image.image_path.stem
        density, segmentation = make_ground_truth(image, policy)
        den_path = out_dir / f"{stem}.den.fmap"
        seg_path = out_dir / f"{stem}.seg.fmap"
        write_fmap(den_path, density.data)
        write_fmap(seg_path, segmentation.data)
        outputs += [str(den_path), str(seg_path)]
    manifest = _manifest(args, "gen-gt", [args.annotations], None,
                         {"sigma_policy": dataclasses.asdict(policy)})
    manifest.outputs = outputs
    manifest.write(out_dir / "manifest.json")
    print(f"wrote ground truth for {len(images)} images to {out_dir}")
    return EXIT_OK


def _tupled(doc: dict, keys: tuple[str, ...]) -> dict:
    return {
        k: tuple(v) if k in keys and isinstance(v, list) else v
        for k, v in doc.items()
    }


def load_train_setup(path) -> tuple[TrainConfig, LossConfig, NetworkConfig, SigmaPolicy, dict]:
    """Parse the training config file (JSON sections: train, loss, network,
    sigma, split; all optional)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    tcfg = TrainConfig(**_tupled(doc.get("train", {}), ("train_size", "val_crop", "adam_betas")))
    lcfg = LossConfig(**doc.get("loss", {}))
    ncfg = NetworkConfig(**doc.get("network", {}))
    policy = SigmaPolicy(**doc.get("sigma", {}))
    split = {"train_fraction": 0.75, "seed": tcfg.seed}
    split.update(doc.get("split", {}))
    return tcfg, lcfg, ncfg, policy, split


def cmd_train(args) -> int:
    tcfg, lcfg, ncfg, policy, split_opts = load_train_setup(args.config)
    images = load_annotations(args.annotations)
    duplicate_pairs = []
    if args.dedupe_ssim is not None:
        duplicate_pairs = find_near_duplicates(images, args.dedupe_ssim)
        for a, b in duplicate_pairs:
            print(f"near-duplicate pair (SSIM > {args.dedupe_ssim}): {a} ~ {b}")
        if args.drop_later and duplicate_pairs:
            before = len(images)
            images = drop_duplicates(images, duplicate_pairs)
            print(f"dropped {before - len(images)} duplicate images")
    split = split_dataset(
        images,
        train_fraction=split_opts["train_fraction"],
        seed=split_opts["seed"],
        validation_crop=tcfg.val_crop,
    )
    torch.manual_seed(tcfg.seed)
    model = build_model(ncfg)
    result = train(model, split, tcfg, lcfg, sigma_policy=policy)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / "history.csv"
    ckpt_path = out_dir / "model.ckpt"
    write_history_csv(result.history, history_path)
    save_checkpoint(result.model, ckpt_path)
    manifest = _manifest(
        args, "train", [args.config, args.annotations], tcfg.seed,
        {
            "variant": variant_name(ncfg.use_cbam, ncfg.use_segmentation_branch),
            "parameter_count": result.model.parameter_count(),
            "best_epoch": result.best_epoch,
            "best_val_mae": result.best_val_mae,
            "train": dataclasses.asdict(tcfg),
            "loss": dataclasses.asdict(lcfg),
            "network": dataclasses.asdict(ncfg),
            "sigma_policy": dataclasses.asdict(policy),
            "split": split_opts,
            "duplicate_pairs": [[str(a), str(b)] for a, b in duplicate_pairs],
        },
    )
    manifest.outputs = [str(history_path), str(ckpt_path)]
    manifest.write(out_dir / "manifest.json")
    print(
        f"trained {manifest.parameters['variant']} for {len(result.history)} epochs; "
        f"best val MAE {result.best_val_mae:.3f} at epoch {result.best_epoch}"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    from .network import load_checkpoint
    from .training import load_image_tensor

    model = load_checkpoint(args.checkpoint)
    model.eval()
    images = load_annotations(args.annotations)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = None
    if args.size:
        w, h = (int(v) for v in args.size.lower().split("x"))
        size = (w, h)
    outputs = []
    with torch.no_grad():
        for image in images:
            x = load_image_tensor(image.image_path, size)
            out = model(x.unsqueeze(0))
            stem = image.image_path.stem
            den_path = out_dir / f"{stem}.den.fmap"
            write_fmap(den_path, out.density[0, 0].numpy())
            outputs.append(str(den_path))
            if out.segmentation is not None:
                seg_path = out_dir / f"{stem}.seg.fmap"
                write_fmap(
                    seg_path,
                    (out.segmentation[0, 0].numpy() >= 0.5).astype(np.uint8),
                )
                outputs.append(str(seg_path))
    manifest = _manifest(args, "predict", [args.annotations], None,
                         {"checkpoint": str(args.checkpoint), "size": args.size})
    manifest.outputs = outputs
    manifest.write(out_dir / "manifest.json")
    print(f"wrote predictions for {len(images)} images to {out_dir}")
    return EXIT_OK


def _find_annotated(images, density_path: Path):
    stem = density_path.stem  # drops .fmap
    if stem.endswith(".den"):
        stem = stem[: -len(".den")]
    matches = [im for im in images if im.image_path.stem == stem]
    if not matches:
        raise ConfigError(
            f"no annotated image with stem {stem!r} in the annotation file"
        )
    if len(matches) > 1:
        raise ConfigError(f"ambiguous stem {stem!r}: {len(matches)} matches")
    return matches[0]


def cmd_localize(args) -> int:
    density = read_fmap(args.density)
    images = load_annotations(args.annotations)
    image = _find_annotated(images, Path(args.density))
    policy = _sigma_policy(args)
    sigmas = compute_adaptive_sigmas(image.points, policy)
    if args.min_intensity is not None:
        min_intensity = args.min_intensity
    elif sigmas:
        min_intensity = suggested_min_intensity(sigmas)
    else:
        min_intensity = 0.0
    params = LocalizeParams(min_distance=args.min_distance, min_intensity=min_intensity)
    gt_peaks = [(p.x, p.y) for p in image.points]
    match = localize(density, gt_peaks, params)
    peaks = detect_peaks(density, params.min_distance, params.min_intensity)
    doc = {
        "count": count_from_density(density),
        "peaks": [[int(x), int(y)] for x, y in peaks],
        "pairs": [[gi, pj, dist] for gi, pj, dist in match.pairs],
        "unmatched_gt": match.unmatched_gt,
        "unmatched_pred": match.unmatched_pred,
    }
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    manifest = _manifest(
        args, "localize", [args.annotations], None,
        {
            "density": str(args.density),
            "min_distance": params.min_distance,
            "min_intensity": params.min_intensity,
        },
    )
    manifest.outputs = [str(out_path)]
    manifest.write(out_path.with_suffix(out_path.suffix + ".manifest.json"))
    print(f"count {doc['count']:.2f}, {len(peaks)} peaks, {len(match.pairs)} matched")
    return EXIT_OK


def cmd_eval(args) -> int:
    images = load_annotations(args.annotations)
    policy = _sigma_policy(args)
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    all_sigmas: list[float] = []
    per_image_sigmas = []
    for image in images:
        sigmas = compute_adaptive_sigmas(image.points, policy)
        per_image_sigmas.append(sigmas)
        all_sigmas.extend(sigmas)
    if args.min_intensity is not None:
        min_intensity = args.min_intensity
    elif all_sigmas:
        min_intensity = suggested_min_intensity(all_sigmas)
    else:
        min_intensity = 0.0
    params = LocalizeParams(min_distance=args.min_distance, min_intensity=min_intensity)

    records: list[PerImageRecord] = []
    artefacts = []
    for image, sigmas in zip(images, per_image_sigmas):
        stem = image.image_path.stem
        pred_path = pred_dir / f"{stem}.den.fmap"
        gt_path = gt_dir / f"{stem}.den.fmap"
        if not pred_path.exists():
            raise FileNotFoundError(f"missing predicted density map {pred_path}")
        if not gt_path.exists():
            raise FileNotFoundError(f"missing ground-truth density map {gt_path}")
        pred = read_fmap(pred_path)
        gt = read_fmap(gt_path)
        gt_peaks = [(p.x, p.y) for p in image.points]
        match = localize(pred, gt_peaks, params)
        if sigmas:
            record = evaluate_image(stem, pred, gt, len(image.points), match, sigmas)
        else:
            # no objects: count/map-quality only, vacuous localization
            rng = float(gt.max()) or 1.0
            record = PerImageRecord(
                name=stem,
                gt_count=0.0,
                pred_count=count_from_density(pred),
                ssim=ssim(gt, pred, data_range=rng),
                psnr=psnr(gt, pred, data_range=rng),
                ap=1.0 if not match.unmatched_pred else 0.0,
                ar=1.0,
            )
        records.append(record)
        artefacts.append(
            {
                "name": stem,
                "image": str(image.image_path),
                "pred_map": str(pred_path),
                "gt_map": str(gt_path),
            }
        )
    report = aggregate_report(records)
    label = args.label or pred_dir.name
    doc = {
        "label": label,
        "metrics": {
            "psnr": report.psnr, "ssim": report.ssim, "mae": report.mae,
            "rmse": report.rmse, "pmae": report.pmae, "map": report.map,
            "mar": report.mar,
        },
        "per_image": [
            {**dataclasses.asdict(rec), **extra}
            for rec, extra in zip(records, artefacts)
        ],
        "annotations": str(Path(args.annotations).resolve()),
        "localize": {"min_distance": params.min_distance, "min_intensity": params.min_intensity},
        "sigma_policy": dataclasses.asdict(policy),
    }
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    print(render_table([(label, report)]))
    outputs = [str(report_path)]
    if args.figures:
        outputs += _emit_figures(doc, Path(args.figures), args.max_figures)
    manifest = _manifest(
        args, "eval", [args.annotations], None,
        {"pred_dir": str(pred_dir), "gt_dir": str(gt_dir), "label": label,
         "localize": doc["localize"]},
    )
    manifest.outputs = outputs
    manifest.write(report_path.with_suffix(report_path.suffix + ".manifest.json"))
    return EXIT_OK


def _emit_figures(doc: dict, fig_dir: Path, limit: int) -> list[str]:
    fig_dir.mkdir(parents=True, exist_ok=True)
    images = load_annotations(doc["annotations"])
    by_stem = {im.image_path.stem: im for im in images}
    params = LocalizeParams(**doc["localize"])
    outputs = []
    for entry in doc["per_image"][:limit]:
        image = by_stem.get(entry["name"])
        if image is None or not Path(entry["image"]).exists():
            continue
        pred = read_fmap(entry["pred_map"])
        den_fig = fig_dir / f"{entry['name']}.density.png"
        density_overlay(entry["image"], pred, den_fig)
        gt_peaks = [(p.x, p.y) for p in image.points]
        match = localize(pred, gt_peaks, params)
        sigmas = compute_adaptive_sigmas(image.points, SigmaPolicy())
        threshold = float(np.mean(sigmas)) if sigmas else 2.0
        loc_fig = fig_dir / f"{entry['name']}.localization.png"
        peaks = detect_peaks(pred, params.min_distance, params.min_intensity)
        localization_overlay(entry["image"], gt_peaks, peaks, match, threshold, loc_fig)
        outputs += [str(den_fig), str(loc_fig)]
    scatter = fig_dir / "count_scatter.png"
    count_scatter(
        [e["gt_count"] for e in doc["per_image"]],
        [e["pred_count"] for e in doc["per_image"]],
        scatter,
    )
    outputs.append(str(scatter))
    return outputs


def _load_report(path: Path) -> dict:
    if path.is_dir():
        candidates = sorted(path.glob("*.json"))
        candidates = [c for c in candidates if not c.name.endswith(".manifest.json")
                      and c.name != "manifest.json"]
        if not candidates:
            raise FileNotFoundError(f"no eval report found in {path}")
        path = candidates[0]
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "metrics" not in doc or "label" not in doc:
        raise ConfigError(f"{path}: not an eval report")
    return doc


def cmd_report(args) -> int:
    rows = []
    docs = []
    for run in args.runs:
        doc = _load_report(Path(run))
        docs.append(doc)
        m = doc["metrics"]
        report = MetricsReport(
            psnr=m["psnr"], ssim=m["ssim"], mae=m["mae"], rmse=m["rmse"],
            pmae=m["pmae"], map=m["map"], mar=m["mar"], per_image=[],
        )
        rows.append((doc["label"], report))
    table = render_table(rows)
    print(table)
    outputs = []
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        table_path = out_dir / "table.txt"
        table_path.write_text(table + "\n", encoding="utf-8")
        outputs.append(str(table_path))
        if args.figures:
            for doc in docs:
                fig_dir = out_dir / f"figures-{doc['label']}"
                outputs += _emit_figures(doc, fig_dir, args.max_figures)
        manifest = _manifest(args, "report", list(args.runs), None, {})
        manifest.outputs = outputs
        manifest.write(out_dir / "manifest.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agregnet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"agregnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset")
    p.add_argument("--config", help="SceneConfig JSON (defaults used if omitted)")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gen-gt", help="density + segmentation maps from annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="output directory for FMAP files")
    _add_sigma_flags(p)
    p.set_defaults(func=cmd_gen_gt)

    p = sub.add_parser("train", help="train the density network")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--dedupe-ssim", type=float, default=None,
                   help="report near-duplicate image pairs above this SSIM")
    p.add_argument("--drop-later", action="store_true",
                   help="with --dedupe-ssim: keep only the lexicographically "
                        "first path of each duplicate pair")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("localize", help="peaks + matching for one density map")
    p.add_argument("--density", required=True, help="FMAP density map")
    p.add_argument("--annotations", required=True)
    p.add_argument("--min-distance", type=int, default=2)
    p.add_argument("--min-intensity", type=float, default=None,
                   help="intensity floor (default: 5%% of the typical kernel peak)")
    p.add_argument("--out", required=True, help="output JSON path")
    _add_sigma_flags(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", help="evaluate predicted density maps")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--report", required=True, help="output report JSON")
    p.add_argument("--label", default=None, help="row label (default: pred dir name)")
    p.add_argument("--min-distance", type=int, default=2)
    p.add_argument("--min-intensity", type=float, default=None)
    p.add_argument("--figures", default=None, help="directory for overlay figures")
    p.add_argument("--max-figures", type=int, default=4)
    _add_sigma_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render tables/figures from eval reports")
    p.add_argument("runs", nargs="+", help="eval report files or run directories")
    p.add_argument("--out", default=None, help="directory for rendered outputs")
    p.add_argument("--figures", action="store_true", help="emit overlay figures")
    p.add_argument("--max-figures", type=int, default=4)
    p.set_defaults(func=cmd_report)
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("AGREGNET_THREADS")
    if cap:
        try:
            torch.set_num_threads(max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"AGREGNET_THREADS={cap!r} is not an integer") from None


def dispatch(argv: list[str] | None = None) -> int:
    """Run one command; returns the process exit code."""
    if argv is None:
        argv = sys.argv[1:]
    try:
        _apply_thread_cap()
        parser = build_parser()
        args = parser.parse_args(argv)
        args._argv = list(argv)
        args._started = _now()
        return args.func(args)
    except SystemExit as exc:  # argparse --version/--help or usage errors
        code = exc.code
        return EXIT_OK if code in (0, None) else int(code)
    except (ValueError, GenerationError, TrainingDivergedError) as exc:
        print(f"agregnet: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"agregnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
