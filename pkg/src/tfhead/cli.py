"""tfh: generate toy scenes, train, evaluate, sweep robustness, dump attention masks."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .assignment import MatchWeights
from .checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from .evaluation import (EvalConfig, circular_nms, infer, report_pair, robustness_calib_offset,
                         robustness_drop_images)
from .geometry import locate_fov, project_box
from .model import Detector, toy_config
from .scenes import SceneFormatError, SceneSpec, generate_scene, load_scene, probe_spec, save_scene, scene_checksum
from .tensor import NonFiniteError, save_tft1
from .training import DivergenceError, TrainConfig, train, warm_start_fusion_ffn

log = logging.getLogger("tfh")

EXIT_OK, EXIT_USAGE, EXIT_NONFINITE = 0, 2, 3


class CliError(Exception):
    pass


# helpers --------------------------------------------------------------------
def _setup_logging() -> None:
    level = os.environ.get("TFH_LOG", "info").lower()
    if level not in ("debug", "info", "warning", "error"):
        level = "info"
    logging.basicConfig(level=getattr(logging, level.upper()), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _pmap(fn, items, jobs: int):
    """Order-preserving map; jobs > 1 fans out over processes."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _check_finite(obj, what: str) -> None:
    vals = []

    def walk(o):
        if isinstance(o, dict):
            for v in o.values():
                walk(v)
        elif isinstance(o, (list, tuple)):
            for v in o:
                walk(v)
        elif isinstance(o, float):
            vals.append(o)

    walk(obj)
    if not all(math.isfinite(v) for v in vals):
        raise NonFiniteError(f"non-finite value in {what}")


def resolve_scenes(items) -> list[Path]:
    """Scene JSONs from explicit files, manifest.json files, or directories holding one."""
    out: list[Path] = []
    for item in items or []:
        p = Path(item)
        if p.is_dir():
            p = p / "manifest.json"
        if not p.is_file():
            raise CliError(f"no such scene or manifest: {item}")
        if p.name == "manifest.json":
            try:
                doc = json.loads(p.read_text(encoding="utf-8"))
                out.extend(p.parent / e["file"] for e in doc["scenes"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise CliError(f"malformed scene manifest {p}: {e}") from None
        else:
            out.append(p)
    if not out:
        raise CliError("no scenes given (use --scenes)")
    return out


def _load_model(args) -> Detector:
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    try:
        model, _, _ = load_checkpoint(args.checkpoint)
    except CheckpointError as e:
        raise CliError(str(e)) from None
    overrides = {}
    if getattr(args, "sigma", None) is not None:
        overrides["sigma"] = args.sigma
    if getattr(args, "guided", False):
        overrides["guided"] = True
    if overrides:
        model.cfg = replace(model.cfg, **overrides)
        model.head.cfg = model.cfg
    return model


def _prepared(model: Detector, paths) -> list:
    return [model.prepare(load_scene(p)) for p in paths]


# gen --------------------------------------------------------------------------
def _gen_one(job):
    index, seed, objects, probe, out = job
    spec = probe_spec(seed, objects) if probe else SceneSpec(seed=seed, num_objects=objects)
    scene = generate_scene(spec)
    files = save_scene(scene, Path(out) / f"scene_{index:04d}.json")
    return {"file": files[0].name, "seed": seed, "num_objects": len(scene.gt_boxes),
            "checksum": scene_checksum(files)}


def cmd_gen(args) -> int:
    if args.count < 0:
        raise CliError("--count must be non-negative")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.default_rng(args.seed).integers(0, 2**31 - 1, size=args.count)
    jobs = [(i, int(s), args.objects, args.probe, str(out)) for i, s in enumerate(seeds)]
    entries = _pmap(_gen_one, jobs, args.jobs)
    _write_json(out / "manifest.json", {"version": 1, "seed": args.seed, "probe": args.probe,
                                        "count": args.count, "scenes": entries})
    log.info("wrote %d scenes to %s", len(entries), out)
    return EXIT_OK


# train ------------------------------------------------------------------------
def cmd_train(args) -> int:
    from .plotting import plot_loss_curve

    paths = resolve_scenes(args.scenes)
    out = Path(args.out)
    start, opt_state = 0, None
    if args.checkpoint:
        try:
            model, state, extra = load_checkpoint(args.checkpoint)
        except CheckpointError as e:
            raise CliError(str(e)) from None
        if state.get("stage") == args.stage:
            start = int(state.get("iteration", 0))
            opt_state = extra or None
        elif args.stage == 2 and state.get("stage") == 1:
            warm_start_fusion_ffn(model)
    else:
        if args.stage == 2:
            raise CliError("stage 2 needs a stage-1 --checkpoint")
        cfg = toy_config(seed=args.seed, sigma=args.sigma if args.sigma is not None else 1.0,
                         num_queries=args.queries[0] if args.queries else 20, guided=args.guided)
        model = Detector(cfg)
    scenes = _prepared(model, paths)
    iters = args.iters if args.iters is not None else args.epochs * len(scenes)
    tcfg = TrainConfig(stage=args.stage, iters=iters, lr=args.lr, seed=args.seed,
                       clip=None if args.clip <= 0 else args.clip, optimizer=args.optimizer,
                       camera_drop=args.camera_drop,
                       match=MatchWeights(args.lambda1, args.lambda2, args.lambda3))
    if start > iters:
        raise CliError(f"checkpoint is at iteration {start}, beyond --iters {iters}")
    try:
        rows, opt = train(model, scenes, tcfg, start_iter=start, opt_state=opt_state)
    except (DivergenceError, NonFiniteError) as e:
        log.error("training diverged: %s", e)
        return EXIT_NONFINITE
    state = {"stage": args.stage, "iteration": iters, "train": _jsonable(tcfg.to_dict())}
    save_checkpoint(out, model, state, opt.state)
    keys = ["stage", "iter", "scene", "total", "heatmap", "initial_cls", "initial_reg", "final_cls",
            "final_reg", "grad_norm"]
    keys = [k for k in keys if any(k in r for r in rows)] or keys[:4]
    _write_csv(out / "loss.csv", keys, [[r.get(k, "") for k in keys] for r in rows])
    if rows:
        plot_loss_curve(rows, out / "loss.png")
    log.info("stage %d: %d iterations, final loss %s", args.stage, len(rows),
             f"{rows[-1]['total']:.6g}" if rows else "n/a")
    return EXIT_OK


def _jsonable(d):
    return json.loads(json.dumps(d, default=lambda o: o.__dict__))


# eval -------------------------------------------------------------------------
def _eval_cfg(model: Detector) -> EvalConfig:
    return EvalConfig(num_classes=model.cfg.num_classes)


def cmd_eval(args) -> int:
    from .plotting import plot_ap

    model = _load_model(args)
    scenes = _prepared(model, resolve_scenes(args.scenes))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ecfg = _eval_cfg(model)
    queries = sorted(set(args.queries or [model.cfg.num_queries]))
    report, rows, nms_rows = {"queries": {}}, [], []
    previous = None
    for n in queries:
        runs = [infer(model, s, n) for s in scenes]
        cand = [[(c.cell, c.class_id) for c in r.candidates] for r in runs]
        if previous is not None:
            # a smaller query budget selects a prefix of the larger one
            for small, big in zip(previous, cand):
                if big[:len(small)] != small:
                    raise CliError(f"peak candidates at N={n} do not extend the smaller set")
            log.info("N=%d: candidate sets extend N=%d prefixes", n, queries[queries.index(n) - 1])
        previous = cand
        initial, final = report_pair(runs, ecfg)
        entry = {"initial": initial.to_dict(), "final": final.to_dict(),
                 "num_candidates": [len(c) for c in cand]}
        rows.append([n, initial.mAP, final.mAP, initial.nds, final.nds])
        if args.nms:
            ni, nf = report_pair(runs, ecfg, nms_radius=args.nms_radius)
            entry["nms"] = {"radius": args.nms_radius, "initial": ni.to_dict(), "final": nf.to_dict()}
            nms_rows.append([n, "initial", initial.mAP, ni.mAP, ni.mAP - initial.mAP])
            nms_rows.append([n, "final", final.mAP, nf.mAP, nf.mAP - final.mAP])
        report["queries"][str(n)] = entry
        if n == queries[-1]:
            plot_ap({f"initial N={n}": initial.ap, f"final N={n}": final.ap}, out / "ap.png")
    _check_finite(report, "evaluation report")
    _write_json(out / "report.json", report)
    _write_csv(out / "eval.csv", ["queries", "initial_mAP", "final_mAP", "initial_nds", "final_nds"], rows)
    if args.nms:
        _write_csv(out / "nms.csv", ["queries", "set", "mAP", "mAP_nms", "difference"], nms_rows)
    for r in rows:
        log.info("N=%d initial mAP %.4f final mAP %.4f", r[0], r[1], r[2])
    return EXIT_OK


# robust -----------------------------------------------------------------------
def cmd_robust(args) -> int:
    from .plotting import plot_robust_sweep

    model = _load_model(args)
    scenes = _prepared(model, resolve_scenes(args.scenes))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ecfg = _eval_cfg(model)
    levels = args.levels if args.levels else ([0, 1, 2, 4] if args.mode == "drop" else [0, 0.2, 0.5, 1.0])
    n = args.queries[0] if args.queries else None
    rows, doc = [], {"mode": args.mode, "seed": args.seed, "levels": []}
    for level in levels:
        try:
            if args.mode == "drop":
                if level != int(level):
                    raise CliError("drop levels must be whole camera counts")
                ini, fin = robustness_drop_images(model, scenes, int(level), args.seed, ecfg, n)
            else:
                ini, fin = robustness_calib_offset(model, scenes, float(level), args.seed, ecfg, n)
        except ValueError as e:
            raise CliError(f"level {level}: {e}") from None
        rows.append([level, ini.mAP, fin.mAP, ini.nds, fin.nds])
        doc["levels"].append({"level": level, "initial": ini.to_dict(), "final": fin.to_dict()})
    _check_finite(doc, "robustness sweep")
    _write_csv(out / f"robust_{args.mode}.csv", ["level", "initial_mAP", "final_mAP", "initial_nds", "final_nds"],
               rows)
    _write_json(out / f"robust_{args.mode}.json", doc)
    plot_robust_sweep([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows], args.mode,
                      out / f"robust_{args.mode}.png")
    return EXIT_OK


# dump-mask --------------------------------------------------------------------
def write_pgm(path: Path, values: np.ndarray) -> None:
    """Binary 8-bit portable graymap, scaled so 1.0 maps to 255."""
    img = np.clip(np.rint(np.asarray(values, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    H, W = img.shape
    path.write_bytes(f"P5\n{W} {H}\n255\n".encode("ascii") + img.tobytes())


def cmd_dump_mask(args) -> int:
    model = _load_model(args)
    paths = resolve_scenes(args.scenes)
    if len(paths) != 1:
        raise CliError("dump-mask takes exactly one scene")
    inputs = model.prepare(load_scene(paths[0]))
    n = args.queries[0] if args.queries else None
    res = model(inputs, num_queries=n, keep_attention=True)
    q = args.query_index
    if not 0 <= q < len(res.initial):
        raise CliError(f"query index {q} outside [0, {len(res.initial)})")
    box = res.initial.boxes()[q]
    cam = locate_fov(inputs.calibs, box)
    if cam is None or q not in res.fusion.masks:
        raise CliError(f"query {q} is outside every camera's field of view")
    mask = res.fusion.masks[q]
    attn = res.fusion.attention[q]
    attn_vis = attn / attn.max() if attn.max() > 0 else attn
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tft1(out / f"mask_q{q}.tft", mask)
    save_tft1(out / f"attention_q{q}.tft", attn)
    write_pgm(out / f"mask_q{q}.pgm", mask)
    write_pgm(out / f"attention_q{q}.pgm", attn_vis)
    proj = project_box(inputs.calibs[cam], box)
    info = {"query": q, "camera": cam, "cx": proj.cx, "cy": proj.cy, "r": proj.r,
            "sigma": model.cfg.sigma, "mask_max": float(mask.max()), "shape": list(mask.shape),
            "box": box.to_dict()}
    _check_finite(info, "mask dump")
    _write_json(out / f"mask_q{q}.json", info)
    return EXIT_OK


# parser -----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tfh", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--out", required=True)
    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--scenes", nargs="+", required=True,
                       help="scene JSON files, manifest.json files, or directories with a manifest")
    model.add_argument("--checkpoint")
    model.add_argument("--queries", type=int, nargs="+", help="query count(s) N")
    model.add_argument("--sigma", type=float, help="SMCA mask bandwidth")
    model.add_argument("--guided", action="store_true", help="image-guided query initialisation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate toy scenes")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--objects", type=int, default=3)
    g.add_argument("--probe", action="store_true", help="only the two geometry-identical classes")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", parents=[common, model], help="train one stage")
    t.add_argument("--stage", type=int, choices=(1, 2), default=1)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--iters", type=int, help="overrides --epochs")
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    t.add_argument("--clip", type=float, default=0.0, help="global gradient-norm clip (0 disables)")
    t.add_argument("--camera-drop", type=float, default=0.0)
    t.add_argument("--lambda1", type=float, default=0.15)
    t.add_argument("--lambda2", type=float, default=0.25)
    t.add_argument("--lambda3", type=float, default=0.25)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common, model], help="evaluate initial and final predictions")
    e.add_argument("--nms", action="store_true", help="also report mAP after circular NMS")
    e.add_argument("--nms-radius", type=float, default=1.0)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("robust", parents=[common, model], help="image-drop or calibration-offset sweep")
    r.add_argument("--mode", choices=("drop", "calib"), default="drop")
    r.add_argument("--levels", type=float, nargs="+")
    r.set_defaults(fn=cmd_robust)

    d = sub.add_parser("dump-mask", parents=[common, model], help="write one query's SMCA mask and attention")
    d.add_argument("--query-index", type=int, required=True)
    d.set_defaults(fn=cmd_dump_mask)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except SceneFormatError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except (NonFiniteError, DivergenceError) as e:
        log.error("%s", e)
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
