"""Command line entry point: ``treepl <subcommand> ...``.

Every subcommand reads an optional TOML file (``--config``); its section
named after the subcommand supplies defaults and explicit flags win.
Exit codes: 0 ok, 2 invalid input, 3 file or network I/O, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import cohabitation as cohab
from .errors import FormatError, NumericalError, TreeplError, ValidationError
from .geodata import (
    UNLABELED,
    RasterCube,
    cube_labels,
    extract_samples,
    label_cube,
    load_cube,
    read_classes,
    save_cube,
)
from .metrics import evaluate
from .pipeline import (
    DEFAULT_PALETTE,
    ExperimentConfig,
    FittedModel,
    SceneData,
    StageError,
    compare_runs,
    fit_model,
    load_manifest,
    metrics_json,
    network_config,
    render_map,
    run_two_pass,
    save_manifest,
)
from .pseudolabel import FusionConfig, build_augmented_set, read_parents, write_augmented, write_parents
from .synthscene import SceneConfig, generate_scene, random_cohabitation, write_scene
from .treetops import TreetopConfig, find_treetops, read_candidates, write_candidates

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("treepl")


def _load_toml(path) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def _merge(section: dict, args, mapping: dict) -> dict:
    """Config section overlaid with flags that were given on the command line."""
    out = dict(section)
    for flag, key in mapping.items():
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def _out(args, path) -> Path:
    p = Path(path)
    if args.out_dir and not p.is_absolute():
        p = Path(args.out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _read_xy(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    try:
        xs = np.array([int(r["x"]) for r in rows], dtype=np.int64)
        ys = np.array([int(r["y"]) for r in rows], dtype=np.int64)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: need integer columns x,y ({exc})") from exc
    return xs, ys


# subcommands -------------------------------------------------------------------


def cmd_synth(args, conf):
    sec = _merge(conf.get("synth", {}), args, {"seed": "seed"})
    cohab_path = sec.pop("cohabitation", None)
    rc = sec.pop("random_cohabitation", None)
    for key in ("species", "crown_radius_range", "height_range", "spectral_groups", "split_fractions"):
        if key in sec:
            sec[key] = tuple(sec[key])
    if cohab_path:
        sec["gt_cohab"] = cohab.load_matrix(cohab_path)
    elif rc is not None:
        sec["gt_cohab"] = random_cohabitation(sec.get("species", SceneConfig.species), **rc)
    try:
        cfg = SceneConfig(**sec)
    except TypeError as exc:
        raise ValidationError(f"bad scene config: {exc}") from exc
    out = write_scene(generate_scene(cfg), _out(args, args.out))
    print(out)


def cmd_treetops(args, conf):
    sec = _merge(conf.get("treetops", {}), args, {
        "sigma": "sigma", "window": "window", "hmin": "h_min", "clip_lo": "clip_lo", "clip_hi": "clip_hi",
    })
    cands = find_treetops(load_cube(args.chm), TreetopConfig(**sec))
    write_candidates(cands, _out(args, args.out))
    log.info("%d candidates", len(cands))


def cmd_cohab(args, conf):
    sec = conf.get("cohab", {})
    if args.action == "render-prompt":
        print(cohab.render_prompt(_prompt_params(args, sec)))
    elif args.action == "fetch":
        endpoint = args.endpoint or sec.get("endpoint")
        if not endpoint:
            raise ValidationError("no endpoint given (--endpoint or [cohab] endpoint)")
        out_dir = _out(args, args.out).parent
        m = cohab.fetch_matrix(
            _prompt_params(args, sec), endpoint, os.environ.get(cohab.TOKEN_ENV),
            attempts=args.attempts or sec.get("attempts", 3), model=args.model or sec.get("model", "gpt-5"),
            out_dir=out_dir,
        )
        cohab.save_matrix(m, _out(args, args.out))
    elif args.action == "validate":
        m = cohab.load_matrix(args.matrix)
        print(f"ok: {len(m.species)} species" + (", has missing entries" if m.has_missing() else ""))
    elif args.action == "apply-deltas":
        m = cohab.apply_expert_deltas(cohab.load_matrix(args.matrix), cohab.read_deltas(args.deltas))
        cohab.save_matrix(m, _out(args, args.out))
    elif args.action == "prior":
        delta = args.delta_scale if args.delta_scale is not None else sec.get("delta_scale", 0.75)
        missing = args.missing_as if args.missing_as is not None else sec.get("missing_as", 0.0)
        p = cohab.build_prior(cohab.load_matrix(args.matrix), delta, missing)
        _out(args, args.out).write_text(cohab.prior_to_csv(p))


def _prompt_params(args, sec) -> cohab.PromptParams:
    species = read_classes(args.species) if args.species else sec.get("species")
    if not species:
        raise ValidationError("no species list (--species classes.txt)")
    kw = {k: sec[k] for k in ("min_sources_per_pair", "max_sources_per_pair", "distance_m", "region",
                              "additional_info") if k in sec}
    if args.distance is not None:
        kw["distance_m"] = args.distance
    if args.region is not None:
        kw["region"] = args.region
    return cohab.PromptParams(tuple(species), **kw)


def cmd_train(args, conf):
    net = dict(conf.get("network", conf.get("train", {})))
    seed = args.seed if args.seed is not None else net.pop("seed", 0)
    data = SceneData.from_dir(args.data)
    samples = extract_samples(data.hsi, data.als, data.polygons, data.splits)
    train = samples.take(samples.split == "train")
    val = samples.take(samples.split == "validation")
    model, history = fit_model(train, val, network_config(data, net, seed))
    out = _out(args, args.out)
    model.save(out)
    write_parents(np.c_[train.x, train.y], train.label, out.with_name("parents.csv"))
    out.with_name("history.json").write_text(json.dumps(history, indent=1))
    log.info("final train loss %.4f", history[-1]["train_loss"])


def cmd_predict(args, conf):
    model = FittedModel.load(args.model)
    data_dir = Path(args.data)
    hsi, als = load_cube(data_dir / "hsi"), load_cube(data_dir / "als")
    xs, ys = _read_xy(args.pixels)
    if len(xs) and (xs.min() < 0 or ys.min() < 0 or xs.max() >= hsi.width or ys.max() >= hsi.height):
        raise ValidationError("pixel coordinates outside the raster")
    probs = model.proba(hsi.pixel_vectors(xs, ys), als.pixel_vectors(xs, ys))
    # one row of n pixels, one band per class
    save_cube(RasterCube(probs.T[:, None, :].astype("<f4"), name="probs"), _out(args, args.out))


def cmd_pseudolabel(args, conf):
    sec = _merge(conf.get("fusion", conf.get("pseudolabel", {})), args, {
        "tau": "tau", "rmin": "r_min", "rmax": "r_max", "eps": "epsilon", "expand": "expand_n",
        "pixel_size": "pixel_size",
    })
    cfg = FusionConfig(**sec)
    cands = read_candidates(args.candidates)
    probs = load_cube(args.probs)
    if probs.height != 1 or probs.width != len(cands):
        raise ValidationError(f"probability cube is {probs.width}x{probs.height}, expected {len(cands)}x1")
    prior = cohab.parse_prior_csv(Path(args.prior).read_text())
    parent_xy, parent_labels = read_parents(args.parents)
    shape = None
    if args.data:
        hdr = json.loads((Path(args.data) / "hsi.json").read_text())
        shape = (hdr["width"], hdr["height"])
    aug = build_augmented_set(
        np.c_[cands.x, cands.y], probs.values[:, 0, :].T.astype(np.float64), parent_xy, parent_labels,
        prior, cfg, shape=shape, seed=args.seed,
    )
    write_augmented(aug, _out(args, args.out))
    log.info("%d augmented pixels", len(aug))


def cmd_evaluate(args, conf):
    pred = cube_labels(load_cube(args.pred))
    truth = cube_labels(load_cube(args.truth))
    if pred.shape != truth.shape:
        raise ValidationError(f"map shapes differ: {pred.shape} vs {truth.shape}")
    classes = read_classes(args.classes)
    scored = (truth != UNLABELED) & (pred != UNLABELED)
    rep = evaluate(truth[scored], pred[scored], classes).to_dict()
    rep["n_truth_without_prediction"] = int(((truth != UNLABELED) & (pred == UNLABELED)).sum())
    _out(args, args.out).write_text(json.dumps(rep, indent=2, allow_nan=True))


def cmd_render(args, conf):
    model = FittedModel.load(args.model)
    data_dir = Path(args.data)
    classes = read_classes(data_dir / "classes.txt")
    out = _out(args, args.out)
    class_map = render_map(model, load_cube(data_dir / "hsi"), load_cube(data_dir / "als"),
                           DEFAULT_PALETTE[: len(classes)], out, legend=classes)
    save_cube(label_cube(class_map, "class_map"), out.with_suffix(""))


def cmd_experiment(args, conf):
    sec = dict(conf.get("experiment", {}))
    for key in ("network", "treetops", "fusion"):
        if key in conf:
            sec.setdefault(key, conf[key])
    if args.seed is not None:
        sec["base_seed"] = args.seed
    if args.runs is not None:
        sec["n_runs"] = args.runs
    if args.prior is not None:
        sec["prior"] = args.prior
    cfg = ExperimentConfig.from_dict(sec)
    data = SceneData.from_dir(args.data, cohabitation=args.cohabitation)
    out = _out(args, args.out)
    try:
        manifest = run_two_pass(data, cfg)
    except StageError as err:
        # keep the completed runs next to the failure record
        out.mkdir(parents=True, exist_ok=True)
        save_manifest(err.manifest, out / "manifest.json")
        raise
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, out / "manifest.json")
    (out / "metrics.json").write_text(metrics_json(manifest))
    agg = manifest["aggregate"]
    if agg:
        print(f"DSNN   macro F1 {agg['dsnn']['macro_f1']['mean']:.4f} +- {agg['dsnn']['macro_f1']['std']:.4f}")
        print(f"DSNN+P macro F1 {agg['dsnn_p']['macro_f1']['mean']:.4f} +- {agg['dsnn_p']['macro_f1']['std']:.4f}")


def cmd_compare(args, conf):
    a, b = load_manifest(args.manifest_a), load_manifest(args.manifest_b)
    maps = [cube_labels(load_cube(p)) if p else None for p in (args.map_a, args.map_b)]
    rep = compare_runs(a, b, maps[0], maps[1], model=args.model, model_b=args.model_b)
    text = json.dumps(rep, indent=2, allow_nan=True)
    if args.out:
        _out(args, args.out).write_text(text)
    else:
        print(text)


# parser ------------------------------------------------------------------------


def _global_options(p: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="TOML configuration file")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--threads", type=int, default=d, help="BLAS/OpenMP thread count")
    p.add_argument("--out-dir", default=d, help="directory for relative output paths")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treepl", description="Two-pass tree species classification.")
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("treetops", parents=[common], help="detect treetop candidates on a CHM")
    p.add_argument("--chm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--hmin", type=float)
    p.add_argument("--clip-lo", type=float)
    p.add_argument("--clip-hi", type=float)
    p.set_defaults(func=cmd_treetops)

    p = sub.add_parser("cohab", parents=[common], help="cohabitation matrix tools")
    p.add_argument("action", choices=["render-prompt", "fetch", "validate", "apply-deltas", "prior"])
    p.add_argument("--matrix")
    p.add_argument("--deltas")
    p.add_argument("--species", help="class list file")
    p.add_argument("--region")
    p.add_argument("--distance", type=float)
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--attempts", type=int)
    p.add_argument("--delta-scale", type=float)
    p.add_argument("--missing-as", type=float)
    p.add_argument("--out", default="matrix.csv")
    p.set_defaults(func=cmd_cohab)

    p = sub.add_parser("train", parents=[common], help="train the dual-stream network")
    p.add_argument("--data", required=True, help="scene directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="class probabilities for listed pixels")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="scene directory holding hsi and als cubes")
    p.add_argument("--pixels", required=True, help="CSV with x,y columns")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("pseudolabel", parents=[common], help="build the augmented training set")
    p.add_argument("--candidates", required=True)
    p.add_argument("--probs", required=True)
    p.add_argument("--parents", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--data", help="scene directory, used to clip blocks to the raster")
    p.add_argument("--tau", type=float)
    p.add_argument("--rmin", type=float)
    p.add_argument("--rmax", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--expand", type=int)
    p.add_argument("--pixel-size", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("evaluate", parents=[common], help="score a class map against labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", parents=[common], help="class map PNG for a whole scene")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="PNG path; the raw map is written beside it")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("experiment", parents=[common], help="run the two-pass experiment")
    p.add_argument("--data", required=True)
    p.add_argument("--cohabitation", help="matrix CSV, default <data>/cohabitation.csv")
    p.add_argument("--runs", type=int)
    p.add_argument("--prior", choices=["cohabitation", "uniform"])
    p.add_argument("--out", default="experiment")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("compare", parents=[common], help="compare two experiment manifests")
    p.add_argument("manifest_a")
    p.add_argument("manifest_b")
    p.add_argument("--map-a")
    p.add_argument("--map-b")
    p.add_argument("--model", default="dsnn_p")
    p.add_argument("--model-b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, (ValidationError, ValueError)):
        return 2
    if isinstance(exc, (FormatError, OSError)):
        return 3
    if isinstance(exc, (NumericalError, ArithmeticError, FloatingPointError)):
        return 4
    return getattr(exc, "exit_code", 1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = _load_toml(args.config)
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args, conf)
        else:
            args.func(args, conf)
    except (TreeplError, ValueError, OSError, ArithmeticError) as exc:
        code = _exit_code(exc)
        print(f"treepl {args.command}: {exc}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
