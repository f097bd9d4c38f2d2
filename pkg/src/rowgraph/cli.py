"""``rowgraph`` command line: generate, train-kem, train-ecm, infer, evaluate, gradcheck.

Exit codes: 0 ok, 2 I/O or missing input, 3 training diverged, 4 incompatible
weights, 5 gradient verification failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from . import fieldgen as fg
from . import pnm
from .config import DEFAULT_CONFIG_TEXT, load_config
from .detector import PlantationLineDetector, evaluate_detections
from .evaluation import GRIDS, LINE_RADIUS, PLANT_RADIUS, run_ablation
from .netkem import TrainingDiverged, ecm_bce, edge_features, sample_training_edges

log = logging.getLogger("rowgraph")

EXIT_OK, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_VERIFY = 0, 2, 3, 4, 5
SPLITS = ("train", "val", "test")
PRESETS = {"easy": fg.EASY, "hard": fg.HARD}


class CliError(Exception):
    def __init__(self, message, code=EXIT_IO):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ dataset

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_dataset(out: Path, patches, cfg, gen_cfg) -> dict:
    for sub in ("images", "scenes", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    names = [f"{k:04d}" for k in range(len(patches))]
    for name, p in zip(names, patches):
        pnm.write_ppm(out / "images" / f"{name}.ppm", p.image)
        fg.save_scene(p.scene, out / "scenes" / f"{name}.json")
        gt = fg.ground_truth(p.scene, cfg.stages)
        for t, (pm, lm) in enumerate(zip(gt.plant_maps, gt.line_maps), 1):
            pnm.write_pgm(out / "gt" / f"{name}_plant_t{t}.pgm", pm)
            pnm.write_pgm(out / "gt" / f"{name}_line_t{t}.pgm", lm)
        pnm.write_field(out / "gt" / f"{name}_field.rgvf", gt.displacement_field)
    splits = fg.split_dataset(names, cfg.split, cfg.seed)
    manifest = {"patch_size": cfg.patch_size, "patches": len(names), "preset": cfg.preset,
                "seed": cfg.seed, "stages": cfg.stages, "generator": fg.config_to_dict(gen_cfg)}
    for split, members in zip(SPLITS, splits):
        manifest[split] = sorted(members)
        with open(out / f"{split}.txt", "w") as fh:
            fh.write("".join(f"images/{n}.ppm\n" for n in sorted(members)))
    _write_json(out / "manifest.json", manifest)
    with open(out / "config.txt", "w") as fh:
        fh.write(cfg.to_text())
    return manifest


def read_split(data: Path, split: str):
    """(names, images [N,3,H,W] float32, scenes) for one split of a generated dataset."""
    mpath = data / "manifest.json"
    if not mpath.is_file():
        raise CliError(f"no dataset at {data} (missing manifest.json)")
    with open(mpath) as fh:
        manifest = json.load(fh)
    names = manifest.get(split, [])
    if not names:
        raise CliError(f"split {split!r} of {data} is empty")
    try:
        images = np.stack([pnm.read_ppm(data / "images" / f"{n}.ppm") for n in names]).astype(np.float32)
        scenes = [fg.load_scene(data / "scenes" / f"{n}.json") for n in names]
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read dataset {data}: {exc}") from exc
    return names, images, scenes


# ------------------------------------------------------------------ weights

def _header_values(path):
    try:
        header, _ = dk.load_weights(path)
    except FileNotFoundError as exc:
        raise CliError(f"weights file not found: {path}") from exc
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read weights {path}: {exc}") from exc
    return header


def _as_number(v):
    f = float(v)
    return int(f) if f.is_integer() else f


def header_diffs(header: dict, expected: dict) -> list:
    diffs = []
    for key, want in expected.items():
        if key not in header:
            diffs.append(f"{key}: missing (expected {want})")
        elif _as_number(header[key]) != _as_number(want):
            diffs.append(f"{key}: file has {header[key]}, run expects {want}")
    return diffs


def check_header(header: dict, expected: dict, path) -> None:
    """Refuse weights whose recorded settings differ from the requested run."""
    diffs = header_diffs(header, expected)
    if diffs:
        raise CliError(f"{path} does not match this run: " + "; ".join(diffs), EXIT_MISMATCH)


def check_run(args, kem_path, ecm_path) -> None:
    """Compare every explicitly requested setting with both weight headers at once."""
    kem = _run_overrides(args)
    ecm = {k: kem[k] for k in ("width_scale",) if k in kem}
    if args.L is not None:
        ecm["sample_points"] = args.L
    problems = [f"{kem_path}: {d}" for d in header_diffs(_header_values(kem_path), kem)]
    problems += [f"{ecm_path}: {d}" for d in header_diffs(_header_values(ecm_path), ecm)]
    if problems:
        raise CliError("weights do not match this run: " + "; ".join(problems), EXIT_MISMATCH)


def detector_from_kem(path, cfg) -> PlantationLineDetector:
    """Detector configured from a KEM header (structure) and the run config (everything else)."""
    header = _header_values(path)
    if header.get("kind") != "kem":
        raise CliError(f"{path} is not a KEM weights file", EXIT_MISMATCH)
    det = _detector(cfg, stages=int(_as_number(header["stages"])),
                    width_scale=float(header["width_scale"]),
                    shared_trunk=bool(int(_as_number(header.get("shared_trunk", 0)))))
    try:
        det.load_kem(path)
    except (KeyError, ValueError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_MISMATCH) from exc
    return det


def _detector(cfg, **kw) -> PlantationLineDetector:
    params = dict(stages=cfg.stages, width_scale=cfg.width_scale, sample_points=cfg.L, tau=cfg.tau,
                  delta=cfg.delta, learning_rate=cfg.lr, momentum=cfg.momentum, batch_size=cfg.batch,
                  epochs_kem=cfg.epochs_kem, epochs_ecm=cfg.epochs_ecm, neg_ratio=cfg.neg_ratio,
                  max_positive_per_scene=cfg.max_positive, grad_clip=cfg.grad_clip or None,
                  shared_trunk=bool(cfg.shared_trunk), random_state=cfg.seed)
    params.update(kw)
    return PlantationLineDetector(**params)


def _load_ecm(det, path, expected=None):
    header = _header_values(path)
    if header.get("kind") != "ecm":
        raise CliError(f"{path} is not an edge-head weights file", EXIT_MISMATCH)
    check_header(header, {"width_scale": det.width_scale, **(expected or {})}, path)
    det.set_params(sample_points=int(_as_number(header["sample_points"])))
    try:
        det.load_ecm(path)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_MISMATCH) from exc
    return det


# ----------------------------------------------------------------- commands

def cmd_generate(args, cfg):
    out = Path(args.out)
    gen = PRESETS[cfg.preset].with_seed(cfg.seed)
    patches = fg.generate_patches(gen, cfg.patches, cfg.patch_size)
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = write_dataset(out, patches, cfg, gen)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {out}: {exc}") from exc
    print(f"wrote {len(patches)} patches to {out}: "
          + ", ".join(f"{s} {len(manifest[s])}" for s in SPLITS))


def cmd_train_kem(args, cfg):
    data = Path(args.data)
    _, X, y = read_split(data, "train")
    _, Xv, yv = read_split(data, "val")
    det = _detector(cfg)
    try:
        det.fit_kem(X, y, (Xv, yv))
    except TrainingDiverged as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from exc
    out = Path(args.out)
    try:
        det.save_kem(out)
        hist = Path(args.history) if args.history else out.with_suffix(".history.csv")
        hist.write_text(det.kem_history_.to_csv())
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}") from exc
    h = det.kem_history_
    print(f"kem: {len(h.epochs)} epochs, train loss {h.train_loss[0]:.4f} -> {h.train_loss[-1]:.4f}, "
          f"best val {min(h.val_loss):.4f} at epoch {h.best_epoch}; weights {out}, history {hist}")


def _heldout_bce(det, X, scenes) -> float:
    feats = det.transform(X)
    rng = np.random.default_rng([det.random_state, 99])
    data = []
    for scene, maps in zip(scenes, feats):
        pairs, labels = sample_training_edges(scene, rng, det.neg_ratio, det.max_positive_per_scene)
        if len(pairs):
            p = scene.plants
            data.append((edge_features(maps["features"], p[pairs[:, 0]], p[pairs[:, 1]], det.sample_points),
                         labels))
    return ecm_bce(det.ecm_, data)


def cmd_train_ecm(args, cfg):
    data = Path(args.data)
    det = detector_from_kem(args.kem, cfg)
    det.set_params(sample_points=cfg.L)
    _, X, y = read_split(data, "train")
    _, Xv, yv = read_split(data, "val")
    try:
        det.fit_ecm(X, y, (Xv, yv))
    except TrainingDiverged as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from exc
    out = Path(args.out)
    try:
        det.save_ecm(out)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}") from exc
    _, Xt, yt = read_split(data, "test")
    print(f"ecm: L={det.sample_points}, {len(det.ecm_history_.epochs)} epochs, "
          f"held-out edge BCE {_heldout_bce(det, Xt, yt):.4f}; weights {out}")


def _run_overrides(args):
    """Settings given explicitly on the command line, checked against weight headers."""
    keys = {"stages": "stages", "width_scale": "width_scale", "tau": "tau", "delta": "delta"}
    return {k: getattr(args, a) for k, a in keys.items() if getattr(args, a, None) is not None}


def overlay(image, detection, scene=None, radius=PLANT_RADIUS) -> np.ndarray:
    """Accepted edges in yellow over the patch; matched plants blue, false positives red.

    Without a labelled scene every vertex is drawn in cyan.
    """
    from .evaluation import match_plants
    img = pnm.to_bytes(image)
    ys, xs = np.nonzero(detection.mask)
    img[:, ys, xs] = np.array([255, 255, 0], dtype=np.uint8)[:, None]
    pos = detection.positions
    colors = [(0, 255, 255)] * len(pos)
    if scene is not None:
        matched = {i for i, _, _ in match_plants(pos, scene.plants, radius).pairs}
        colors = [(0, 0, 255) if i in matched else (255, 0, 0) for i in range(len(pos))]
    for (x, y), c in zip(pos, colors):
        pnm.draw_dot(img, x, y, c)
    return img


def cmd_infer(args, cfg):
    check_run(args, args.kem, args.ecm)
    det = detector_from_kem(args.kem, cfg)
    _load_ecm(det, args.ecm)
    det.set_params(tau=cfg.tau, delta=cfg.delta)
    try:
        image = pnm.read_ppm(args.image)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read image {args.image}: {exc}") from exc
    scene = fg.load_scene(args.scene) if args.scene else None
    detection = det.predict(image[None])[0]
    out = Path(args.out)
    try:
        _write_json(out, detection.to_dict())
        pnm.write_ppm(args.overlay or out.with_suffix(".ppm"), overlay(image, detection, scene))
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}") from exc
    print(f"{len(detection.graph.vertices)} plants, {len(detection.lines.groups)} lines -> {out}")


def _grid_reports(args, cfg, data):
    _, X, y = read_split(data, args.split)
    reports = {}
    if args.grid == "stages":
        for path in args.kem:
            det = detector_from_kem(path, cfg)
            dets_plants = det.detect_plants(X)
            from .detector import evaluate_plants
            reports[det.stages] = evaluate_plants(dets_plants, y, args.plant_radius)
        return reports
    det = detector_from_kem(args.kem[0], cfg)
    if args.grid == "points":
        for path in args.ecm:
            _load_ecm(det, path)
            ev = evaluate_detections(det.predict(X), y, args.plant_radius, args.line_radius)
            reports[det.sample_points] = ev["lines"]
        return reports
    _load_ecm(det, args.ecm[0])
    base = det.predict(X)
    for gate in GRIDS["features"]:
        ev = evaluate_detections([d.with_gate(gate) for d in base], y, args.plant_radius, args.line_radius)
        reports[gate] = ev["lines"]
    return reports


def cmd_evaluate(args, cfg):
    data = Path(args.data)
    out = Path(args.out)
    if args.grid:
        table = run_ablation(args.grid, _grid_reports(args, cfg, data))
        try:
            out.write_text(table.to_json() + "\n")
            Path(args.table or out.with_suffix(".csv")).write_text(table.to_csv())
        except OSError as exc:
            raise CliError(f"cannot write {out}: {exc}") from exc
        print(table.to_csv(), end="")
        return
    check_run(args, args.kem[0], args.ecm[0])
    det = detector_from_kem(args.kem[0], cfg)
    _load_ecm(det, args.ecm[0])
    det.set_params(tau=cfg.tau, delta=cfg.delta)
    names, X, y = read_split(data, args.split)
    ev = evaluate_detections(det.predict(X), y, args.plant_radius, args.line_radius)
    report = {"split": args.split, "patches": names, "plant_radius": args.plant_radius,
              "line_radius": args.line_radius, "plants": ev["plants"].to_dict(), "lines": ev["lines"].to_dict()}
    try:
        _write_json(out, report)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}") from exc
    p, ln = ev["plants"], ev["lines"]
    print(f"plants P {p.precision:.4f} R {p.recall:.4f} F1 {p.f1:.4f} MAE {p.mae:.3f}; "
          f"lines P {ln.precision:.4f} R {ln.recall:.4f} F1 {ln.f1:.4f}")


def cmd_gradcheck(args, cfg):
    from .gradsuite import TOLERANCE, failures, run_suite
    report = run_suite(seeds=range(args.seeds))
    for name, err in report.items():
        print(f"{name:20s} max rel err {err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    bad = failures(report)
    if bad:
        raise CliError("gradient check failed: " + ", ".join(bad), EXIT_VERIFY)


COMMANDS = {"generate": cmd_generate, "train-kem": cmd_train_kem, "train-ecm": cmd_train_ecm,
            "infer": cmd_infer, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (defaults: rowgraph --print-config)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    common.add_argument("--stages", type=int, help="KEM stages T")
    common.add_argument("--L", type=int, help="points sampled per edge")
    common.add_argument("--tau", type=float)
    common.add_argument("--delta", type=float)
    common.add_argument("--width-scale", dest="width_scale", type=float)
    common.add_argument("--shared-trunk", dest="shared_trunk", type=int, choices=(0, 1),
                        help="1: one KEM trunk per stage (desk scale); 0: one per branch")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rowgraph", description=__doc__.splitlines()[0])
    p.add_argument("--print-config", action="store_true", help="print the default config and exit")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("generate", parents=[common], help="synthesize a patch dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--patches", type=int)
    g.add_argument("--patch-size", dest="patch_size", type=int)
    g.add_argument("--preset", choices=sorted(PRESETS))

    k = sub.add_parser("train-kem", parents=[common], help="train backbone and KEM")
    k.add_argument("--data", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--history")
    k.add_argument("--epochs", type=int)

    e = sub.add_parser("train-ecm", parents=[common], help="train the edge head on a frozen KEM")
    e.add_argument("--data", required=True)
    e.add_argument("--kem", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--epochs", type=int)

    i = sub.add_parser("infer", parents=[common], help="detect plants and lines in one patch")
    i.add_argument("--image", required=True)
    i.add_argument("--kem", required=True)
    i.add_argument("--ecm", required=True)
    i.add_argument("--out", required=True, help="detection JSON")
    i.add_argument("--overlay", help="overlay PPM (default: next to --out)")
    i.add_argument("--scene", help="labelled scene JSON; colours matched/false-positive plants")

    v = sub.add_parser("evaluate", parents=[common], help="metrics over a dataset split")
    v.add_argument("--data", required=True)
    v.add_argument("--kem", required=True, action="append", help="repeat for --grid stages")
    v.add_argument("--ecm", action="append", default=[], help="repeat for --grid points")
    v.add_argument("--out", required=True, help="metrics JSON")
    v.add_argument("--split", default="test", choices=SPLITS)
    v.add_argument("--plant-radius", dest="plant_radius", type=float, default=PLANT_RADIUS)
    v.add_argument("--line-radius", dest="line_radius", type=float, default=LINE_RADIUS)
    v.add_argument("--grid", choices=sorted(GRIDS))
    v.add_argument("--table", help="ablation CSV (default: next to --out)")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--seeds", type=int, default=20)
    return p


def resolve_config(args):
    try:
        cfg = load_config(args.config)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"bad config {args.config}: {exc}") from exc
    over = {"seed": args.seed, "stages": args.stages, "L": args.L, "tau": args.tau, "delta": args.delta,
            "width_scale": args.width_scale, "shared_trunk": args.shared_trunk}
    for name in ("patches", "patch_size", "preset"):
        over[name] = getattr(args, name, None)
    epochs = getattr(args, "epochs", None)
    if args.command == "train-kem":
        over["epochs_kem"] = epochs
    elif args.command == "train-ecm":
        over["epochs_ecm"] = epochs
    return cfg.override(**over)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_config:
        print(DEFAULT_CONFIG_TEXT, end="")
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits
        cfg = resolve_config(args)
        if args.command == "evaluate" and args.grid is None and not args.ecm:
            raise CliError("evaluate needs --ecm weights")
        if args.command == "evaluate" and args.grid in ("points", "features") and not args.ecm:
            raise CliError(f"--grid {args.grid} needs --ecm weights")
        with threadpool_limits(limits=max(1, args.threads)):
            COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"rowgraph {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
