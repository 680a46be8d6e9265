"""Command-line front end: ``ddtseg {init|prepare|synth|train|predict|eval|cv|wilcoxon|render}``.

Exit codes: 0 success, 1 other failure, 2 no samples found, 3 unwritable
output, 4 invalid config, 5 missing or mismatched checkpoint, 6 nothing to
pair, 7 too few images, 8 degenerate test.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from functools import partial
from pathlib import Path

import numpy as np

from . import dataio, metrics
from .config import RunConfig, default_jobs, load_config
from .errors import ConfigError, DDTSegError, DegenerateTest, IoError, StateError
from .imgcore import tile
from .morphology import btgt, class_relief, dtgt, inverse_normalize, segment_instances
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.training import Pipeline, PipelineKind, predict, train

log = logging.getLogger("ddtseg")

EXIT_OK, EXIT_FAIL, EXIT_NO_SAMPLES, EXIT_UNWRITABLE = 0, 1, 2, 3
EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_NO_PAIRS, EXIT_TOO_FEW, EXIT_DEGENERATE = 4, 5, 6, 7, 8

DDT_FG_THRESHOLD = 0.02  # predicted inverse maps above this count as foreground


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _pool_map(fn, items, jobs: int) -> list:
    """Ordered map, in-process for one job, else over a process pool."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _config_from(args) -> RunConfig:
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
        overrides = {}
        for name in ("dataset_dir", "prepared_dir", "output_dir", "pipeline", "seed", "k"):
            value = getattr(args, name, None)
            if value is not None:
                overrides[name] = value
        if getattr(args, "jobs", None) is not None:
            overrides["jobs"] = args.jobs
        if getattr(args, "epochs", None) is not None:
            overrides["train"] = replace(cfg.train, epochs=args.epochs)
        return replace(cfg, **overrides) if overrides else cfg
    except ConfigError as exc:
        raise CommandError(EXIT_CONFIG, f"invalid config: {exc}") from None


# -- init -----------------------------------------------------------------------


def cmd_init(args) -> int:
    dataio.write_json(args.out, RunConfig().to_json())
    print(f"wrote default config to {args.out}")
    return EXIT_OK


# -- synth ----------------------------------------------------------------------


def _synth_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def cmd_synth(args) -> int:
    root = Path(args.out)
    try:
        for sub in ("images", "ground_truth"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        base = dataio.SynthConfig(image_size=args.size, noise_sigma=args.noise)
        for i in range(args.n):
            cfg = replace(base, seed=_synth_seed(args.seed, i))
            image, labels = dataio.synth_blobs(cfg)
            dataio.write_sample(root, f"synth_{i:04d}", image, labels)
    except (OSError, IoError) as exc:
        raise CommandError(EXIT_UNWRITABLE, f"cannot write to {root}: {exc}") from None
    print(f"wrote {args.n} synthetic samples to {root}")
    return EXIT_OK


# -- prepare --------------------------------------------------------------------


def prepare_sample(entry, out_dir: str) -> dict:
    image_path, gt_path, stem = entry
    out = Path(out_dir)
    try:
        gt = dataio.read_labels_tiff(gt_path)
        d = dtgt(gt)
        inv = inverse_normalize(d, gt)
        b = btgt(gt)
        paths = {k: str(out / "maps" / f"{stem}.{k}.map") for k in ("dtgt", "inverse", "btgt")}
        dataio.write_map(paths["dtgt"], d, "distance")
        dataio.write_map(paths["inverse"], inv, "inverse")
        dataio.write_map(paths["btgt"], b.astype(np.uint8), "class")
        dataio.write_image(d, out / "renders" / f"{stem}.dtgt.png", "heatmap")
        dataio.write_image(inv, out / "renders" / f"{stem}.inverse.png", "heatmap")
        dataio.write_image(b, out / "renders" / f"{stem}.btgt.png", "class_colors")
    except DDTSegError as exc:
        return {"stem": stem, "error": str(exc)}
    return {"stem": stem, "image": image_path, "ground_truth": gt_path, **paths}


def cmd_prepare(args) -> int:
    index = dataio.scan_dataset(args.dataset_dir)
    if not index.entries:
        raise CommandError(EXIT_NO_SAMPLES, f"no samples found in {args.dataset_dir}")
    jobs = args.jobs if args.jobs is not None else default_jobs()
    results = _pool_map(partial(prepare_sample, out_dir=args.out), index.entries, jobs)
    ok = [r for r in results if "error" not in r]
    failed = [r for r in results if "error" in r]
    for r in failed:
        print(f"error: {r['stem']}: {r['error']}", file=sys.stderr)
    dataio.write_json(Path(args.out) / "index.json",
                      {"dataset_dir": str(args.dataset_dir), "samples": ok,
                       "errors": [{"stem": r["stem"], "error": r["error"]} for r in failed]})
    print(f"prepared {len(ok)} samples, {len(failed)} failed")
    return EXIT_FAIL if failed else EXIT_OK


# -- training data --------------------------------------------------------------


def _read_index(prepared_dir) -> list[dict]:
    path = Path(prepared_dir) / "index.json"
    if not path.is_file():
        raise CommandError(EXIT_NO_SAMPLES, f"no samples found: {path} is missing (run prepare)")
    samples = json.loads(path.read_text(encoding="utf-8"))["samples"]
    if not samples:
        raise CommandError(EXIT_NO_SAMPLES, f"no samples found in {path}")
    return samples


def _pieces(arr: np.ndarray, tile_size: int) -> list[np.ndarray]:
    if min(arr.shape) < tile_size:
        return [arr]
    return list(tile(arr, tile_size).tiles)


def training_arrays(samples: list[dict], cfg: RunConfig):
    """Normalized images, inverse maps and class maps, tiled to ``tile_size``.

    Frames smaller than a tile are used whole; all pieces must share one
    shape divisible by ``2**depth``.
    """
    images, inverse, classes = [], [], []
    for s in samples:
        img = dataio.normalize(dataio.read_tiff16(s["image"]), cfg.normalize)
        inv, _ = dataio.read_map(s["inverse"])
        cls, _ = dataio.read_map(s["btgt"])
        images += _pieces(img, cfg.tile_size)
        inverse += _pieces(inv, cfg.tile_size)
        classes += _pieces(cls, cfg.tile_size)
    shapes = {a.shape for a in images}
    if len(shapes) != 1:
        raise CommandError(EXIT_CONFIG, f"invalid config: tile_size: training pieces have mixed shapes {sorted(shapes)}")
    shape = shapes.pop()
    m = 2 ** cfg.net.depth
    if shape[0] % m or shape[1] % m:
        raise CommandError(EXIT_CONFIG, f"invalid config: net.depth: piece shape {shape} not divisible by {m}")
    return np.stack(images), np.stack(inverse), np.stack(classes)


def history_csv(pipe: Pipeline) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "epoch", "loss"])
    for stage in pipe.kind.stages:
        for rec in pipe.models[stage].history:
            writer.writerow([rec["stage"], rec["epoch"], repr(float(rec["loss"]))])
    return buf.getvalue()


def run_training(cfg: RunConfig, samples: list[dict], out_dir) -> Pipeline:
    images, inverse, classes = training_arrays(samples, cfg)
    pipe = train(cfg.kind, images, cfg.train_config, inverse_targets=inverse, class_targets=classes,
                 depth=cfg.net.depth, base_filters=cfg.net.base_filters,
                 precision=cfg.net.precision, ddt_activation=cfg.net.ddt_activation)
    out = Path(out_dir)
    for stage, model in pipe.models.items():
        save_checkpoint(model, out / f"{stage}.ckpt", {"pipeline": cfg.pipeline, "stage": stage})
    dataio.atomic_write_text(out / "history.csv", history_csv(pipe))
    dataio.write_json(out / "config.json", cfg.to_json())
    return pipe


def cmd_train(args) -> int:
    cfg = _config_from(args)
    samples = _read_index(cfg.prepared_dir)
    run_training(cfg, samples, cfg.output_dir)
    print(f"trained {cfg.pipeline} on {len(samples)} samples; outputs in {cfg.output_dir}")
    return EXIT_OK


# -- predict --------------------------------------------------------------------


def load_pipeline(kind: PipelineKind, ckpt_dir) -> Pipeline:
    pipe = Pipeline(kind)
    for stage in kind.stages:
        path = Path(ckpt_dir) / f"{stage}.ckpt"
        if not path.is_file():
            raise CommandError(EXIT_CHECKPOINT, f"missing checkpoint {path}")
        try:
            model, extra = load_checkpoint(path)
        except (IoError, StateError) as exc:
            raise CommandError(EXIT_CHECKPOINT, f"unusable checkpoint {path}: {exc}") from None
        if extra.get("pipeline") != kind.value or extra.get("stage") != stage:
            raise CommandError(EXIT_CHECKPOINT, f"checkpoint {path} belongs to {extra.get('pipeline')}"
                                                f"/{extra.get('stage')}, not {kind.value}/{stage}")
        pipe.models[stage] = model
    try:
        pipe.require()
    except ConfigError as exc:
        raise CommandError(EXIT_CHECKPOINT, f"checkpoint mismatch: {exc}") from None
    return pipe


def instances_for(kind: PipelineKind, class_map, ddt, h: float) -> np.ndarray:
    """Watershed instances: from the DDT map, or from the Foreground's EDT for UNet1."""
    if kind is PipelineKind.UNET1:
        v, fg = class_relief(class_map)
    elif kind is PipelineKind.DDT:
        v, fg = ddt, ddt > DDT_FG_THRESHOLD
    else:
        v, fg = ddt, class_map != 0
    return segment_instances(v, fg, h).astype(np.int32)


def predict_one(path: str, pipe: Pipeline, cfg: RunConfig, out_dir: str, watershed: bool) -> str:
    stem = Path(path).name.split(".")[0]
    out = Path(out_dir)
    image = dataio.normalize(dataio.read_tiff16(path), cfg.normalize)
    pred = predict(pipe, image)
    class_map = None
    if pipe.kind is not PipelineKind.DDT:
        class_map = pred.output
        dataio.write_map(out / f"{stem}.class.map", class_map, "class")
        dataio.write_image(class_map, out / f"{stem}.class.png", "class_colors")
    if pred.ddt is not None:
        dataio.write_map(out / f"{stem}.ddt.map", pred.ddt, "inverse")
        dataio.write_image(pred.ddt, out / f"{stem}.ddt.png", "heatmap")
    if watershed:
        labels = instances_for(pipe.kind, class_map, pred.ddt, cfg.watershed_h)
        dataio.write_map(out / f"{stem}.instances.map", labels, "instance")
        dataio.write_image(labels, out / f"{stem}.instances.png", "instance_colors")
    return stem


def _image_paths(inputs: list[str]) -> list[str]:
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            src = p / "images" if (p / "images").is_dir() else p
            paths += sorted(str(q) for q in src.iterdir() if q.suffix.lower() in dataio.TIFF_SUFFIXES)
        else:
            paths.append(str(p))
    return paths


def cmd_predict(args) -> int:
    cfg = _config_from(args)
    pipe = load_pipeline(cfg.kind, args.checkpoints or cfg.output_dir)
    paths = _image_paths(args.images)
    if not paths:
        raise CommandError(EXIT_NO_SAMPLES, "no samples found to predict")
    for p in paths:
        if not Path(p).is_file():
            raise CommandError(EXIT_NO_SAMPLES, f"no such image {p}")
    fn = partial(predict_one, pipe=pipe, cfg=cfg, out_dir=args.out, watershed=args.watershed)
    stems = _pool_map(fn, paths, cfg.jobs)
    print(f"predicted {len(stems)} images into {args.out}")
    return EXIT_OK


# -- eval -----------------------------------------------------------------------


def class_maps_by_stem(directory) -> dict[str, Path]:
    """Class-role ``.map`` files keyed by the name part before the first dot."""
    found = {}
    for p in sorted(Path(directory).glob("*.map")):
        if dataio.peek_map_role(p) != "class":
            continue
        stem = p.name.split(".")[0]
        if stem in found:
            raise CommandError(EXIT_FAIL, f"two class maps for {stem} in {directory}")
        found[stem] = p
    return found


def evaluate_dirs(pred_dir, gt_dir, cfg: RunConfig) -> tuple[metrics.MetricsReport, list[str]]:
    preds, gts = class_maps_by_stem(pred_dir), class_maps_by_stem(gt_dir)
    stems = sorted(set(preds) & set(gts))
    unpaired = sorted(set(preds) ^ set(gts))
    if not stems:
        raise CommandError(EXIT_NO_PAIRS, f"no class maps pair up between {pred_dir} and {gt_dir}")
    pm = [dataio.read_map(preds[s])[0] for s in stems]
    gm = [dataio.read_map(gts[s])[0] for s in stems]
    report = metrics.evaluate(pm, gm, stems, cfg.wdmc_weights, cfg.bde_source, cfg.bde_mode, cfg.std_ddof)
    return report, unpaired


def write_report(report: metrics.MetricsReport, prefix) -> None:
    prefix = Path(prefix)
    dataio.atomic_write_text(prefix.with_suffix(".csv"), report.to_csv())
    dataio.write_json(prefix.with_suffix(".json"), report.to_json())


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    report, unpaired = evaluate_dirs(args.pred_dir, args.gt_dir, cfg)
    for stem in unpaired:
        print(f"unpaired: {stem}", file=sys.stderr)
    write_report(report, args.out)
    agg = report.aggregate
    print(f"{len(report.per_image)} images  BDE {agg['bde']['cell']}  WDMC {agg['wdmc']['cell']}")
    return EXIT_OK


# -- cross-validation -----------------------------------------------------------


def cmd_cv(args) -> int:
    cfg = _config_from(args)
    if cfg.kind is PipelineKind.DDT:
        raise CommandError(EXIT_CONFIG, "invalid config: pipeline: cv needs a pipeline with a class output")
    samples = _read_index(cfg.prepared_dir)
    by_stem = {s["stem"]: s for s in samples}
    try:
        split = dataio.kfold_split(list(by_stem), cfg.k, cfg.seed)
    except ConfigError as exc:
        raise CommandError(EXIT_CONFIG, f"invalid config: k: {exc}") from None
    out = Path(cfg.output_dir)
    dataio.write_json(out / "folds.json", split.to_json())
    folds, rows = [], []
    for i in range(cfg.k):
        fold_dir = out / f"fold{i}"
        train_samples = [by_stem[s] for s in split.train_sources(i)]
        pipe = run_training(cfg, train_samples, fold_dir)
        pred_dir = fold_dir / "predictions"
        for stem in split.fold(i):
            predict_one(by_stem[stem]["image"], pipe, cfg, pred_dir, watershed=False)
        gt_dir = fold_dir / "ground_truth"
        for stem in split.fold(i):
            cls, _ = dataio.read_map(by_stem[stem]["btgt"])
            dataio.write_map(gt_dir / f"{stem}.class.map", cls, "class")
        report, _ = evaluate_dirs(pred_dir, gt_dir, cfg)
        write_report(report, fold_dir / "report")
        folds.append({"fold": i, "test_sources": split.fold(i), "aggregate": report.aggregate})
        rows += report.per_image
        print(f"fold {i}: WDMC {report.aggregate['wdmc']['cell']}  BDE {report.aggregate['bde']['cell']}")
    pooled = metrics.MetricsReport(rows, cfg.std_ddof).aggregate
    dataio.write_json(out / "summary.json", {"k": cfg.k, "seed": cfg.seed, "pipeline": cfg.pipeline,
                                             "folds": folds, "pooled": pooled})
    print(f"pooled: WDMC {pooled['wdmc']['cell']}  BDE {pooled['bde']['cell']}")
    return EXIT_OK


# -- wilcoxon -------------------------------------------------------------------


def _load_report(path) -> metrics.MetricsReport:
    try:
        return metrics.MetricsReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError) as exc:
        raise CommandError(EXIT_FAIL, f"cannot read report {path}: {exc}") from None


def subsample_means(a: dict, b: dict, n_samples: int, sample_size: int, seed: int,
                    with_replacement: bool = False):
    """Paired per-subset means over ``n_samples`` seeded draws.

    Each subset is drawn without replacement unless ``with_replacement``;
    subsets are independent, so an image may appear in several of them.
    """
    ids = sorted(set(a) & set(b))
    if not ids or (len(ids) < sample_size and not with_replacement):
        raise CommandError(EXIT_TOO_FEW, f"only {len(ids)} shared images, sample size is {sample_size}")
    rng = np.random.default_rng(seed)
    va = np.array([a[i] for i in ids], dtype=np.float64)
    vb = np.array([b[i] for i in ids], dtype=np.float64)
    means_a, means_b = [], []
    for _ in range(n_samples):
        pick = rng.choice(len(ids), size=sample_size, replace=with_replacement)
        means_a.append(float(va[pick].mean()))
        means_b.append(float(vb[pick].mean()))
    return means_a, means_b


def cmd_wilcoxon(args) -> int:
    ra, rb = _load_report(args.report_a), _load_report(args.report_b)
    if args.metric not in metrics.METRIC_FIELDS:
        raise CommandError(EXIT_FAIL, f"unknown metric {args.metric!r}")
    means_a, means_b = subsample_means(ra.values(args.metric), rb.values(args.metric),
                                       args.n_samples, args.sample_size, args.seed,
                                       args.with_replacement)
    try:
        res = metrics.wilcoxon_signed_rank(means_a, means_b, args.method)
    except DegenerateTest as exc:
        raise CommandError(EXIT_DEGENERATE, f"degenerate test: {exc}") from None
    out = {"metric": args.metric, "n_samples": args.n_samples, "sample_size": args.sample_size,
           "seed": args.seed, "with_replacement": args.with_replacement,
           "n_effective": res.n_effective, "w_statistic": res.w_statistic,
           "p_value": res.p_value, "method": res.method, "means_a": means_a, "means_b": means_b}
    dataio.write_json(args.out, out)
    print(f"W={res.w_statistic} n={res.n_effective} p={res.p_value:.6g} ({res.method})")
    return EXIT_OK


# -- render ---------------------------------------------------------------------

RENDER_BY_ROLE = {"gray": "raw", "distance": "heatmap", "inverse": "heatmap",
                  "class": "class_colors", "instance": "instance_colors"}


def cmd_render(args) -> int:
    arr, role = dataio.read_map(args.map)
    mode = RENDER_BY_ROLE[role] if args.mode == "auto" else args.mode
    dataio.write_image(arr, args.out, mode)
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def _add_run_flags(p, *, with_epochs=False):
    p.add_argument("--config", help="JSON run config (see `ddtseg init`)")
    p.add_argument("--dataset-dir", dest="dataset_dir")
    p.add_argument("--prepared-dir", dest="prepared_dir")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--pipeline", choices=[k.value for k in PipelineKind])
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker processes (default: $DDTSEG_JOBS or 1)")
    if with_epochs:
        p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddtseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a config with every default")
    p.add_argument("--out", default="ddtseg.json")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.03)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="derive distance, inverse and class targets")
    p.add_argument("dataset_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train every model a pipeline needs")
    _add_run_flags(p, with_epochs=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run trained checkpoints on images")
    _add_run_flags(p)
    p.add_argument("--checkpoints", help="checkpoint directory (default: output_dir)")
    p.add_argument("--out", required=True)
    p.add_argument("--watershed", action="store_true", help="also write instance maps")
    p.add_argument("images", nargs="+", help="TIFF files or directories")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predicted class maps against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--out", required=True, help="report path prefix (.csv and .json)")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="k-fold cross-validation grouped by source frame")
    _add_run_flags(p, with_epochs=True)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("wilcoxon", help="paired signed-rank test on resampled report means")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--metric", default="wdmc")
    p.add_argument("--n-samples", dest="n_samples", type=int, default=26)
    p.add_argument("--sample-size", dest="sample_size", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=["auto", "exact", "normal_approx"], default="auto")
    p.add_argument("--with-replacement", dest="with_replacement", action="store_true",
                   help="draw images with replacement inside each sample")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_wilcoxon)

    p = sub.add_parser("render", help="render a .map file to PNG")
    p.add_argument("map")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="auto",
                   choices=["auto", "raw", "heatmap", "class_colors", "instance_colors"])
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"ddtseg: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"ddtseg: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoError as exc:
        print(f"ddtseg: {exc}", file=sys.stderr)
        return EXIT_UNWRITABLE if "cannot write" in str(exc) else EXIT_FAIL
    except DDTSegError as exc:
        print(f"ddtseg: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
