"""Command-line entry points for reproducible runs.

Subcommands: synth-gen, train, segment, match, landmark, bench-latency,
serve. Every run is a pure function of its flags plus one --seed, and every
output directory receives the exact configuration used (config.json), so any
artifact can be regenerated from its recorded config.

Exit codes: 0 success, 1 runtime failure, 2 configuration error (bad paths,
malformed specs, layout mismatches; argparse errors also exit 2).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import tasks
from .atlas import MissingLandmarkError, load_atlas, save_atlas
from .model import (OUTPUT_ATLAS_COORD, OUTPUT_DISPLACEMENT_MM,
                    IncompatibleModelError, ModelFormatError, init,
                    load_params)
from .sampler import WINDOW_CT, default_layout
from .synth import (FieldGenerationError, PhantomSpecError,
                    load_manifest_subjects, load_spec, make_atlas_phantom,
                    make_deformation, psi, read_manifest,
                    subject_landmark_position, warp_subject, write_manifest)
from .training import (ConfigError, TrainConfig, TrainingDivergedError,
                       build_dataset, build_landmark_dataset, evaluate,
                       save_run, train)
from .volume import (VolumeFormatError, load_label_volume, load_volume,
                     save_volume, world_bounds)

_CONFIG_ERRORS = (ConfigError, PhantomSpecError, FieldGenerationError,
                  VolumeFormatError, ModelFormatError, IncompatibleModelError,
                  MissingLandmarkError, FileNotFoundError, NotADirectoryError)


def _parse_triple(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return tuple(float(p) for p in parts)


def _parse_pair(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected lo,hi, got {text!r}")
    return float(parts[0]), float(parts[1])


def _write_json(path: str, doc: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _invocation_config(args: argparse.Namespace) -> dict:
    # out path excluded so identical runs into different dirs stay byte-identical
    skip = {"func", "out"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _load_engine(model_path: str, atlas_dir: str,
                 expect_mode: str | None = OUTPUT_ATLAS_COORD) -> tasks.Engine:
    layout = default_layout()
    params = load_params(model_path, layout=layout, expect_output_mode=expect_mode)
    atlas = load_atlas(atlas_dir)
    return tasks.Engine(params=params, layout=layout, window=WINDOW_CT, atlas=atlas)


def _oracle_engine(manifest_path: str, subject_id: str):
    doc = read_manifest(manifest_path)
    atlas = load_atlas(doc["atlas"])
    by_id = {rec["id"]: rec for rec in doc["subjects"]}
    if subject_id not in by_id:
        raise ConfigError(f"manifest has no subject {subject_id!r}; "
                          f"available: {sorted(by_id)}")
    rec = by_id[subject_id]
    vol = load_volume(rec["volume"])
    return tasks.OracleEngine(field=rec["field"], atlas=atlas), vol, doc


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth_gen(args) -> int:
    spec = load_spec(args.spec)
    atlas = make_atlas_phantom(spec, args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_atlas(atlas, os.path.join(args.out, "atlas"))

    if args.holdout > args.subjects:
        raise ConfigError(f"--holdout {args.holdout} exceeds --subjects {args.subjects}")
    seeds = np.random.SeedSequence(args.seed).generate_state(
        max(2 * args.subjects, 1), dtype=np.uint64)
    bounds = world_bounds(atlas.image)
    records = []
    subj_dir = os.path.join(args.out, "subjects")
    if args.subjects:
        os.makedirs(subj_dir, exist_ok=True)
    for i in range(args.subjects):
        field_seed, noise_seed = int(seeds[2 * i]), int(seeds[2 * i + 1])
        field = make_deformation(field_seed, n_bumps=args.bumps,
                                 amp_max_mm=args.amp_max,
                                 sigma_range_mm=args.sigma_range,
                                 bounds_mm=(tuple(bounds[0]), tuple(bounds[1])))
        sid = f"s{i:03d}"
        subj = warp_subject(atlas, field, seed=noise_seed, subject_id=sid,
                            noise_sd=args.noise_sd)
        rel = os.path.join("subjects", f"{sid}.mha")
        save_volume(subj.volume, os.path.join(args.out, rel))
        records.append({"id": sid, "volume": rel, "seed": noise_seed,
                        "noise_sd": args.noise_sd,
                        "role": "holdout" if i >= args.subjects - args.holdout
                        else "train",
                        "field": field.to_dict()})
    write_manifest(os.path.join(args.out, "manifest.json"), "atlas", records,
                   seed=args.seed, spec=spec)
    _write_json(os.path.join(args.out, "config.json"),
                {"synth-gen": _invocation_config(args)})
    print(f"wrote atlas + {args.subjects} subjects "
          f"({args.holdout} holdout) to {args.out}")
    return 0


def _train_config_from(args) -> TrainConfig:
    base = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            base = json.load(f)
    for key, val in (("epochs", args.epochs), ("batch_size", args.batch_size),
                     ("learning_rate", args.learning_rate), ("seed", args.seed)):
        if val is not None:
            base[key] = val
    allowed = set(TrainConfig.__dataclass_fields__)
    unknown = set(base) - allowed
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    return TrainConfig(**base)


def cmd_train(args) -> int:
    doc = read_manifest(args.data)
    atlas = load_atlas(doc["atlas"])
    layout = default_layout()
    window = WINDOW_CT
    config = _train_config_from(args)

    train_subjects = load_manifest_subjects(doc, role="train")
    if not train_subjects:
        train_subjects = load_manifest_subjects(doc)
    if not train_subjects:
        raise ConfigError(f"{args.data}: no subjects to train on")
    holdout = load_manifest_subjects(doc, role="holdout")

    mode = OUTPUT_DISPLACEMENT_MM if args.landmark else OUTPUT_ATLAS_COORD
    params0 = init(seed=config.seed, input_len=layout.total_len,
                   layout_hash=layout.fingerprint(), output_mode=mode)
    if args.init_model:
        params0 = load_params(args.init_model, layout=layout,
                              expect_output_mode=mode)

    build = build_landmark_dataset if args.landmark else build_dataset
    build_kw = dict(layout=layout, window=window, n_base=args.points,
                    n_perturb=args.perturb, perturb_mm=args.perturb_mm,
                    seed=args.data_seed)
    if args.landmark:
        tset = build(train_subjects, atlas, args.landmark, **build_kw)
    else:
        tset = build(train_subjects, atlas, **build_kw)

    trained, history = train(config, tset, params0)

    eval_stats = None
    if holdout and not args.landmark:
        eval_stats = evaluate(trained, holdout, atlas, layout, window,
                              n_eval=args.n_eval, seed=config.seed)
        eval_stats["untrained_median_mm"] = evaluate(
            params0, holdout, atlas, layout, window, n_eval=args.n_eval,
            seed=config.seed)["median_mm"]
    elif holdout and args.landmark:
        from .training import evaluate_landmark
        errs = evaluate_landmark(
            lambda s: tasks.navigate_landmark(trained, s.volume, layout=layout,
                                              window=window).final,
            holdout, atlas, args.landmark)
        eval_stats = {"errors_mm": [float(e) for e in errs],
                      "median_mm": float(np.median(errs)),
                      "froc": tasks.froc_curve(errs)}

    save_run(args.out, config, history, trained, eval_stats,
             extra_config={"data": _invocation_config(args),
                           "layout": default_layout().canonical_text(),
                           "n_rows": tset.n})
    last = history[-1] if history else float("nan")
    print(f"trained {config.epochs} epochs on {tset.n} rows; "
          f"final epoch loss {last:.6f}; wrote {args.out}")
    if eval_stats and "median_mm" in eval_stats:
        print(f"holdout median error {eval_stats['median_mm']:.3f} mm")
    return 0


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names
               if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"missing required flags: {' '.join(missing)}")


def cmd_segment(args) -> int:
    if args.oracle:
        engine, vol, _ = _oracle_engine(args.oracle, args.subject_id)
        if args.volume:
            vol = load_volume(args.volume)
    else:
        _require(args, "model", "atlas", "volume")
        engine = _load_engine(args.model, args.atlas)
        vol = load_volume(args.volume)
    seg = tasks.segment(engine, vol, grid_mm=args.grid)
    save_volume(seg, args.out)
    summary = {"grid_mm": args.grid, "dims": list(seg.dims),
               "labels": {int(l): int(c) for l, c in
                          zip(*np.unique(seg.data, return_counts=True))},
               "config": _invocation_config(args)}
    if args.truth:
        gt = load_label_volume(args.truth)
        summary["dice_micro"] = tasks.dice_micro(seg, gt)
        print(f"micro Dice vs truth: {summary['dice_micro']:.4f}")
    _write_json(os.path.splitext(args.out)[0] + ".summary.json", summary)
    print(f"wrote segmentation to {args.out}")
    return 0


def cmd_match(args) -> int:
    point = np.asarray(args.point, dtype=np.float64)
    truth = None
    if args.oracle:
        engine, source_vol, doc = _oracle_engine(args.oracle, args.source_id)
        by_id = {rec["id"]: rec for rec in doc["subjects"]}
        if args.target_id not in by_id:
            raise ConfigError(f"manifest has no subject {args.target_id!r}")
        target_rec = by_id[args.target_id]
        target_vol = load_volume(target_rec["volume"])
        engine.register(source_vol, engine.field)
        engine.register(target_vol, target_rec["field"])
        truth = subject_landmark_position(target_rec["field"],
                                          psi(engine.field, point))
    else:
        _require(args, "model", "atlas", "source", "target")
        engine = _load_engine(args.model, args.atlas)
        source_vol = load_volume(args.source)
        target_vol = load_volume(args.target)
    res = tasks.match_point(engine, source_vol, point, target_vol,
                            max_iters=args.max_iters)
    doc_out = {"source_point_mm": [float(x) for x in point],
               "final_point_mm": [float(x) for x in res.final],
               "iterations": res.iterations, "converged": res.converged,
               "path": [[float(x) for x in row] for row in res.path],
               "config": _invocation_config(args)}
    if truth is not None:
        doc_out["truth_point_mm"] = [float(x) for x in truth]
        doc_out["error_mm"] = float(np.linalg.norm(res.final - truth))
        print(f"match error vs oracle truth: {doc_out['error_mm']:.4f} mm")
    _write_json(args.out, doc_out)
    print(f"matched point -> {np.round(res.final, 2).tolist()} "
          f"({res.iterations} iterations)")
    return 0


def cmd_landmark(args) -> int:
    layout, window = default_layout(), WINDOW_CT
    truth = None
    if args.oracle:
        engine, vol, _ = _oracle_engine(args.oracle, args.subject_id)
        mark_atlas = engine.atlas.landmarks.get(args.name)
        if mark_atlas is None:
            raise MissingLandmarkError(
                f"unknown landmark {args.name!r}; available: "
                f"{sorted(engine.atlas.landmarks)}")
        truth = subject_landmark_position(engine.field, mark_atlas)

        def predictor(p, _t=np.asarray(truth)):
            return _t - np.asarray(p, dtype=np.float64)
    else:
        _require(args, "model", "volume")
        predictor = load_params(args.model, layout=layout,
                                expect_output_mode=OUTPUT_DISPLACEMENT_MM)
        vol = load_volume(args.volume)
    if args.multi_agent:
        point, runs = tasks.multi_agent_landmark(predictor, vol, layout=layout,
                                                 window=window,
                                                 max_iters=args.max_iters)
        res = min(runs, key=lambda r: float(np.linalg.norm(r.final - point)))
        agents = [[float(x) for x in r.final] for r in runs]
    else:
        res = tasks.navigate_landmark(predictor, vol, layout=layout,
                                      window=window, max_iters=args.max_iters)
        point, agents = res.final, None
    doc_out = {"name": args.name,
               "point_mm": [float(x) for x in point],
               "path": [[float(x) for x in row] for row in res.path],
               "iterations": res.iterations, "converged": res.converged,
               "config": _invocation_config(args)}
    if agents is not None:
        doc_out["agents_mm"] = agents
    if truth is not None:
        doc_out["error_mm"] = float(np.linalg.norm(np.asarray(point) - truth))
    _write_json(args.out, doc_out)
    print(f"landmark {args.name!r} -> {np.round(np.asarray(point), 2).tolist()} "
          f"({res.iterations} iterations)")
    return 0


def cmd_bench_latency(args) -> int:
    engine = _load_engine(args.model, args.atlas)
    vol = load_volume(args.volume)
    rng = np.random.default_rng(args.seed)
    body = np.flatnonzero(vol.voxels > vol.background + 100.0)
    if body.size == 0:
        raise ConfigError(f"{args.volume}: no in-body voxels above threshold")
    nx, ny, nz = vol.dims
    picks = body[rng.integers(0, body.size, args.queries)]
    kk, rem = np.divmod(picks, nx * ny)
    jj, ii = np.divmod(rem, nx)
    pts = (np.asarray(vol.origin)
           + np.stack([ii, jj, kk], axis=1) * np.asarray(vol.spacing)
           + rng.uniform(-0.5, 0.5, (args.queries, 3)) * np.asarray(vol.spacing))
    for p in pts[:min(100, len(pts))]:          # warmup
        tasks.query(engine, vol, p)
    lat = np.asarray([tasks.query(engine, vol, p).latency_us for p in pts])
    doc_out = {"n": int(lat.size),
               "p50_us": float(np.percentile(lat, 50)),
               "p95_us": float(np.percentile(lat, 95)),
               "p99_us": float(np.percentile(lat, 99)),
               "mean_us": float(lat.mean()),
               "volume_dims": list(vol.dims),
               "config": _invocation_config(args)}
    if args.out:
        _write_json(args.out, doc_out)
    print(f"latency over {lat.size} queries on {list(vol.dims)}: "
          f"p50 {doc_out['p50_us']:.1f} us, p95 {doc_out['p95_us']:.1f} us, "
          f"p99 {doc_out['p99_us']:.1f} us")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    engine = _load_engine(args.model, args.atlas)
    app = create_app(engine)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="atlasnav",
        description="Anatomical positioning: sparse descriptors, coordinate "
                    "regression, label transfer, navigation.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("synth-gen", help="generate a phantom atlas and deformed subjects")
    g.add_argument("--spec", default="thorax",
                   help="builtin spec name (thorax, ankle) or JSON file path")
    g.add_argument("--subjects", type=int, default=0)
    g.add_argument("--holdout", type=int, default=0,
                   help="mark the last K subjects as held out")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--bumps", type=int, default=5)
    g.add_argument("--amp-max", type=float, default=15.0)
    g.add_argument("--sigma-range", type=_parse_pair, default=(50.0, 110.0))
    g.add_argument("--noise-sd", type=float, default=0.0,
                   help="intensity noise added to each subject")
    g.set_defaults(func=cmd_synth_gen)

    t = sub.add_parser("train", help="train a coordinate or displacement regressor")
    t.add_argument("--data", required=True, help="dataset manifest.json")
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--landmark", help="train displacement-mode model for this landmark")
    t.add_argument("--init-model", help="start from an existing model file")
    t.add_argument("--points", type=int, default=1500)
    t.add_argument("--perturb", type=int, default=1500)
    t.add_argument("--perturb-mm", type=float, default=5.0)
    t.add_argument("--data-seed", type=int, default=0)
    t.add_argument("--n-eval", type=int, default=2000)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="label-transfer segmentation of a volume")
    s.add_argument("--model")
    s.add_argument("--atlas")
    s.add_argument("--volume")
    s.add_argument("--grid", type=float, default=3.0)
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="ground-truth mask for a Dice report")
    s.add_argument("--oracle", help="manifest.json for a ground-truth engine")
    s.add_argument("--subject-id", default="s000")
    s.set_defaults(func=cmd_segment)

    m = sub.add_parser("match", help="find the corresponding point in another volume")
    m.add_argument("--model")
    m.add_argument("--atlas")
    m.add_argument("--source")
    m.add_argument("--target")
    m.add_argument("--point", type=_parse_triple, required=True)
    m.add_argument("--max-iters", type=int, default=50)
    m.add_argument("--out", required=True)
    m.add_argument("--oracle", help="manifest.json for a ground-truth engine")
    m.add_argument("--source-id", default="s000")
    m.add_argument("--target-id", default="s001")
    m.set_defaults(func=cmd_match)

    l = sub.add_parser("landmark", help="navigate to a landmark by displacement prediction")
    l.add_argument("--model")
    l.add_argument("--volume")
    l.add_argument("--name", required=True)
    l.add_argument("--max-iters", type=int, default=50)
    l.add_argument("--multi-agent", action="store_true")
    l.add_argument("--out", required=True)
    l.add_argument("--oracle", help="manifest.json for a ground-truth predictor")
    l.add_argument("--subject-id", default="s000")
    l.set_defaults(func=cmd_landmark)

    b = sub.add_parser("bench-latency", help="per-query latency statistics")
    b.add_argument("--model", required=True)
    b.add_argument("--atlas", required=True)
    b.add_argument("--volume", required=True)
    b.add_argument("--queries", type=int, default=10000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench_latency)

    v = sub.add_parser("serve", help="run the HTTP service")
    v.add_argument("--model", required=True)
    v.add_argument("--atlas", required=True)
    v.add_argument("--port", type=int, default=8088)
    v.add_argument("--host", default="127.0.0.1")
    v.set_defaults(func=cmd_serve)
    return ap


def entry(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(entry())
