"""Command-line entry point: ``advcam <command> [flags] -o OUT``.

Commands: gen-data, train, cam, advcam, eval-seed, sweep, landscape.
Every command appends one JSON line to ``OUT/manifest.jsonl``.

Exit codes: 0 success, 2 input/validation, 3 numerical divergence, 4 I/O.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import cam as cam_mod
from . import climb as climb_mod
from . import metrics
from . import model as model_mod
from . import synthdata
from .errors import (
    AdvCamError, CheckpointFormatError, ClimbDivergenceError, DatasetError,
    DegenerateDirectionError, DimensionError, TrainingError, ValidationError,
)
from .netpbm import read_netpbm, write_pgm

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
MANIFEST = "manifest.jsonl"


class UsageError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# argument helpers

def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None
    return lo, hi


def parse_thresholds(text: str) -> list[float]:
    """``"0.3"``, ``"0.1,0.2"`` or an inclusive ``"a:b:step"`` range."""
    if ":" not in text:
        try:
            vals = _float_list(text)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(str(exc)) from None
    else:
        try:
            a, b, step = (float(v) for v in text.split(":"))
        except ValueError:
            raise UsageError(f"thresholds must be a:b:step, got {text!r}") from None
        if step <= 0 or b < a:
            raise UsageError(f"thresholds range {text!r} is empty")
        n = int(np.floor((b - a) / step + 1e-9)) + 1
        vals = [round(a + i * step, 10) for i in range(n)]
    if not vals:
        raise UsageError("no thresholds given")
    return vals


def default_jobs() -> int:
    env = os.environ.get("ADVCAM_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"ADVCAM_JOBS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


class _Pool:
    """Order-preserving map over worker processes; serial for one job."""

    def __init__(self, jobs: int):
        self.jobs = jobs
        self.ex = cf.ProcessPoolExecutor(jobs) if jobs > 1 else None

    def map(self, fn, items):
        if self.ex is None:
            return map(fn, items)
        return self.ex.map(fn, items)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self.ex is not None:
            self.ex.shutdown()


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from None
    return out


class Run:
    """Collects outputs and writes the manifest line for one command."""

    def __init__(self, command: str, args, out: Path):
        self.command, self.args, self.out = command, args, out
        self.t0 = time.perf_counter()
        self.outputs: list[str] = []
        self.summary: dict = {}
        self.dataset_hash = None

    def write(self, rel: str, data) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, str):
            path.write_text(data)
        elif isinstance(data, np.ndarray):
            with open(path, "wb") as fh:
                np.save(fh, data)
        else:
            path.write_bytes(data)
        self.outputs.append(rel)
        return path

    def write_pgm(self, rel: str, arr: np.ndarray) -> None:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(path, arr)
        self.outputs.append(rel)

    def finish(self) -> dict:
        cfg = {k: v for k, v in sorted(vars(self.args).items()) if k not in ("func", "config")}
        record = {
            "command": self.command,
            "config": json.loads(json.dumps(cfg, default=str)),
            "config_file": self.args.config,
            "version": __version__,
            "dataset_hash": self.dataset_hash,
            "wall_time": round(time.perf_counter() - self.t0, 6),
            "outputs": self.outputs,
            "summary": self.summary,
        }
        with open(self.out / MANIFEST, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record


# ---------------------------------------------------------------------------
# shared inputs

def _load_dataset(run: Run, path) -> synthdata.Dataset:
    p = Path(path)
    if p.is_dir():
        p = p / "index.json"
    ds = synthdata.load(p)
    run.dataset_hash = ds.digest
    return ds


def _class_id(text: str, classes) -> int:
    if text in classes:
        return list(classes).index(text)
    try:
        k = int(text)
    except ValueError:
        raise UsageError(f"unknown class {text!r}; choose from {list(classes)}") from None
    if not 0 <= k < len(classes):
        raise UsageError(f"class index {k} outside [0, {len(classes)})")
    return k


def _single_image(path) -> np.ndarray:
    try:
        rgb = read_netpbm(path)
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if rgb.ndim != 3:
        raise UsageError(f"{path}: expected a colour (P6) image")
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0


def _targets(run: Run, args, classes) -> list[synthdata.Record]:
    """Records to process: a dataset split or one image with explicit classes."""
    if args.image:
        if not args.classes:
            raise UsageError("--image needs --class")
        tags = sorted({_class_id(c, classes) for c in args.classes.split(",")})
        image = _single_image(args.image)
        run.dataset_hash = _sha256(Path(args.image))
        return [synthdata.Record(Path(args.image).stem, "single", tags, image,
                                 np.zeros(image.shape[-2:], dtype=np.uint8))]
    if not args.data:
        raise UsageError("give --data (with --split) or --image")
    ds = _load_dataset(run, args.data)
    recs = ds.split(args.split)
    if args.ids:
        wanted = set(args.ids.split(","))
        recs = [r for r in recs if r.id in wanted]
    if args.limit:
        recs = recs[:args.limit]
    if not recs:
        raise UsageError(f"no records selected from split {args.split!r}")
    if args.classes:
        keep = {_class_id(c, classes) for c in args.classes.split(",")}
        recs = [synthdata.Record(r.id, r.split, [t for t in r.tags if t in keep], r.image, r.mask) for r in recs]
    return recs


def _load_model(run: Run, path) -> model_mod.GapClassifier:
    try:
        m = model_mod.load_checkpoint(path)
    except OSError as exc:
        raise DatasetError(f"cannot read checkpoint {path}: {exc}") from exc
    run.summary["checkpoint_sha256"] = _sha256(Path(path))
    return m


def _write_maps(run: Run, records, maps_per_record, classes, kind: str) -> dict:
    """Feature-resolution maps as .npy plus image-resolution PGMs and an index."""
    entries = []
    bounds = []
    for rec, maps in zip(records, maps_per_record):
        for c, m in maps.items():
            stem = f"{rec.id}_{classes[c]}"
            run.write(f"maps/{stem}.npy", m)
            up = metrics.image_res_aggregate(m, rec.image.shape[-2:])
            run.write_pgm(f"maps/{stem}.pgm", cam_mod.to_pgm_bytes(up))
            entries.append({"id": rec.id, "class": classes[c], "class_id": int(c), "file": f"{stem}.npy"})
            if m.max() > 0:
                bounds.append((float(m.min()), float(m.max())))
    index = {"kind": kind, "classes": list(classes), "entries": entries}
    run.write("maps/index.json", json.dumps(index, indent=1, sort_keys=True) + "\n")
    ok = all(lo >= 0.0 and abs(hi - 1.0) <= 1e-12 for lo, hi in bounds)
    run.summary.update({"maps": len(entries), "maps_in_bounds": ok})
    return index


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    spec = synthdata.DatasetSpec(
        seed=args.seed, train=args.train, val=args.val, test=args.test,
        min_objects=args.min_objects, max_objects=args.max_objects,
        marker_bias=args.marker_bias, background_amplitude=args.background_amplitude,
        hue_jitter=args.hue_jitter, min_radius=args.min_radius, max_radius=args.max_radius,
    )
    spec.validate()
    out = _prepare_out(args.output)
    run = Run("gen-data", args, out)
    index = synthdata.generate(spec, out)
    ds = synthdata.load(index)
    run.dataset_hash = ds.digest
    run.outputs = ["index.json"] + [r for rec in json.loads(index.read_text())["records"] for r in (rec["image"], rec["mask"])]
    counts = {c: sum(c_id in r.tags for r in ds.records) for c_id, c in enumerate(ds.classes)}
    run.summary = {"images": len(ds.records), "split_sizes": {s: len(ds.split(s)) for s in ("train", "val", "test")},
                   "class_counts": counts}
    run.finish()
    print(f"wrote {len(ds.records)} images to {out} (train {spec.train}, val {spec.val}, test {spec.test})")
    print("objects per class: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    print(f"dataset sha256 {ds.digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _prepare_out(args.output)
    run = Run("train", args, out)
    ds = _load_dataset(run, args.data)
    X, Y, _ = ds.arrays("train")
    Xv, Yv, _ = ds.arrays("val")
    cfg = model_mod.TrainConfig(
        epochs=args.epochs, lr=args.lr, batch=args.batch, seed=args.seed, momentum=args.momentum,
        weight_decay=args.weight_decay, cosine=args.cosine, flip=args.flip, min_accuracy=args.min_accuracy,
    )
    try:
        m = model_mod.train(X, Y, cfg, heldout=(Xv, Yv), arch=model_mod.Architecture(num_classes=ds.num_classes))
    except TrainingError as exc:
        run.summary = {"error": str(exc)}
        run.finish()
        raise
    ckpt = run.write(args.name, model_mod.checkpoint_bytes(m))
    run.summary = {
        "final_loss": m.meta["final_loss"],
        "heldout_accuracy": m.meta["heldout_accuracy"],
        "heldout_mean_accuracy": m.meta["heldout_mean_accuracy"],
        "accuracy_gate": args.min_accuracy,
        "checkpoint_sha256": _sha256(ckpt),
    }
    run.finish()
    loss = m.meta["final_loss"]
    print(("no training steps" if loss is None else f"final loss {loss:.5f}") + "; held-out accuracy "
          + " ".join(f"{a:.3f}" for a in m.meta["heldout_accuracy"]))
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_cam(args) -> int:
    out = _prepare_out(args.output)
    run = Run("cam", args, out)
    m = _load_model(run, args.checkpoint)
    classes = _classes(args, m)
    recs = _targets(run, args, classes)
    maps = []
    for r in recs:
        per = {}
        for c in r.tags:
            if args.ensemble:
                a = cam_mod.ensemble_cam(m, r.image, c, args.scales, args.flip)
            else:
                a = cam_mod.extract_cam(m, r.image, c)
            per[c] = a.self_normalized
        maps.append(per)
    _write_maps(run, recs, maps, classes, "cam")
    run.finish()
    print(f"wrote {run.summary['maps']} CAM maps to {out / 'maps'}")
    return EXIT_OK


def _classes(args, m) -> tuple[str, ...]:
    if m.num_classes == len(synthdata.CLASSES):
        return synthdata.CLASSES
    return tuple(str(k) for k in range(m.num_classes))


def _climb_config(args) -> climb_mod.ClimbConfig:
    if args.plain:
        return climb_mod.ClimbConfig.plain(
            T=args.T, xi=args.xi, ensemble=args.ensemble, scales=tuple(args.scales),
            flip=args.flip, step_domain=args.step_domain,
        )
    return climb_mod.ClimbConfig(
        T=args.T, xi=args.xi, lam=args.lam, tau=args.tau,
        suppress_others=args.suppress, masking=args.mask,
        ensemble=args.ensemble, scales=tuple(args.scales), flip=args.flip, step_domain=args.step_domain,
    )


def cmd_advcam(args) -> int:
    out = _prepare_out(args.output)
    run = Run("advcam", args, out)
    m = _load_model(run, args.checkpoint)
    classes = _classes(args, m)
    cfg = _climb_config(args)
    recs = _targets(run, args, classes)
    keep = args.export_features
    with _Pool(args.jobs) as pool:
        if keep:
            trajs = [[climb_mod.run_climb(m, r.image, c, cfg, keep_images=True) for c in r.tags] for r in recs]
            mapset = metrics.MapSet(trajs, [r.mask for r in recs], tuple(recs[0].image.shape[-2:]))
        else:
            mapset = metrics.climb_records(m, recs, cfg, map_fn=pool.map)
    maps = [{tr.class_id: tr.aggregate for tr in trs} for trs in mapset.trajectories]
    _write_maps(run, recs, maps, classes, "advcam")
    rows = []
    med = []
    for r, trs in zip(recs, mapset.trajectories):
        for tr in trs:
            stem = f"{r.id}_{classes[tr.class_id]}"
            if args.save_steps:
                run.write(f"steps/{stem}.npy", tr.cams)
            if keep:
                run.write(f"features/{stem}.csv", metrics.feature_trajectory_csv(
                    metrics.export_feature_trajectory(m, tr)))
            st = metrics.amplification_stats(tr)
            rd, rnd = st.medians(cfg.T)
            med.append((rd, rnd))
            rows.append({"id": r.id, "class": classes[tr.class_id], "logit_0": float(tr.logits[0, tr.class_id]),
                         "logit_T": float(tr.logits[-1, tr.class_id]), "median_s_RD": rd, "median_s_RND": rnd})
    run.write("trajectories.csv", metrics.rows_to_csv(rows))
    rise = float(np.mean([row["logit_T"] > row["logit_0"] for row in rows])) if rows else 0.0
    run.summary.update({"climb": cfg.to_json(), "pairs": len(rows), "logit_increase_fraction": rise})
    if args.curve and not args.image:
        curves = metrics.iteration_curve(mapset, DEFAULT_THRESHOLDS, len(classes) + 1)
        crow = [{"t": t, "best_theta": c.best_theta, "miou": c.best_miou, "noise": c.best_noise}
                for t, c in enumerate(curves)]
        run.write("iteration_curve.csv", metrics.rows_to_csv(crow))
        run.summary["final_miou"] = curves[-1].best_miou
    run.finish()
    print(f"climbed {len(rows)} (image, class) pairs; logit rose on {rise:.1%}")
    print(f"wrote maps to {out / 'maps'}")
    return EXIT_OK


DEFAULT_THRESHOLDS = metrics.DEFAULT_THETAS


def _read_maps(maps_dir: Path) -> dict:
    try:
        index = json.loads((maps_dir / "index.json").read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read map index in {maps_dir}: {exc}") from exc
    per = {}
    for e in index["entries"]:
        try:
            per.setdefault(e["id"], {})[int(e["class_id"])] = np.load(maps_dir / e["file"])
        except OSError as exc:
            raise DatasetError(f"cannot read map {e['file']}: {exc}") from exc
    return per


def cmd_eval_seed(args) -> int:
    out = _prepare_out(args.output)
    run = Run("eval-seed", args, out)
    thetas = parse_thresholds(args.thresholds)
    maps_dir = Path(args.maps)
    if (maps_dir / "maps").is_dir():
        maps_dir = maps_dir / "maps"
    per = _read_maps(maps_dir)
    ds = _load_dataset(run, args.data)
    by_id = {r.id: r for r in ds.records}
    missing = sorted(set(per) - set(by_id))
    if missing:
        raise UsageError(f"maps for unknown records: {missing[:5]}")
    ids = sorted(per)
    image_maps = [{c: metrics.image_res_aggregate(a, by_id[i].mask.shape) for c, a in per[i].items()} for i in ids]
    gts = [by_id[i].mask for i in ids]
    curve = metrics.threshold_sweep(image_maps, gts, thetas, ds.num_classes + 1)
    rows = [{"theta": t, "miou": v, "noise": n} for t, v, n in zip(curve.thetas, curve.mious, curve.noise)]
    run.write("seed_curve.csv", metrics.rows_to_csv(rows))
    best = {"theta": curve.best_theta, "miou": curve.best_miou, "noise": curve.best_noise}
    run.write("seed_best.csv", metrics.rows_to_csv([best]))
    if args.write_seeds:
        for i, maps in zip(ids, image_maps):
            run.write_pgm(f"seeds/{i}.pgm", metrics.seed_from_map(maps, curve.best_theta).labels.astype(np.uint8))
    run.summary.update({"images": len(ids), **{f"best_{k}": v for k, v in best.items()}})
    run.finish()
    print(f"best theta {curve.best_theta:g}: mIoU {curve.best_miou * 100:.2f}, noise {curve.best_noise:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    out = _prepare_out(args.output)
    run = Run("sweep", args, out)
    m = _load_model(run, args.checkpoint)
    ds = _load_dataset(run, args.data)
    recs = ds.split(args.split)[:args.limit or None]
    base = _climb_config(args)
    values = _float_list(args.grid)
    if not values:
        raise UsageError("empty sweep grid")
    with _Pool(args.jobs) as pool:
        rows = metrics.sweep(m, recs, args.param, values, base, parse_thresholds(args.thresholds),
                             ds.num_classes + 1, map_fn=pool.map)
    rows = [{"param": args.param, "value": r[args.param], "best_theta": r["best_theta"],
             "miou": r["miou"], "noise": r["noise"]} for r in rows]
    run.write(f"sweep_{args.param}.csv", metrics.rows_to_csv(rows))
    run.summary["rows"] = rows
    run.finish()
    for r in rows:
        print(f"{args.param}={r['value']:g}: mIoU {r['miou'] * 100:.2f} at theta {r['best_theta']:g}")
    return EXIT_OK


def cmd_landscape(args) -> int:
    out = _prepare_out(args.output)
    run = Run("landscape", args, out)
    m = _load_model(run, args.checkpoint)
    classes = _classes(args, m)
    if args.image:
        image = _single_image(args.image)
        run.dataset_hash = _sha256(Path(args.image))
        name = Path(args.image).stem
    else:
        if not (args.data and args.id):
            raise UsageError("give --image or --data with --id")
        ds = _load_dataset(run, args.data)
        rec = next((r for r in ds.records if r.id == args.id), None)
        if rec is None:
            raise UsageError(f"no record {args.id!r} in dataset")
        image, name = rec.image, rec.id
    c = _class_id(args.cls, classes)
    grid = metrics.landscape_probe(m, image, c, args.direction, args.a_range, args.b_range, args.steps, args.seed)
    rel = f"landscape_{name}_{classes[c]}_{args.direction}.csv"
    run.write(rel, grid.to_csv())
    i0 = int(np.argmin(np.abs(grid.a_values))) if len(grid.a_values) else 0
    run.summary.update({"origin_loss": float(metrics.target_loss(m, image, c)),
                        "grid_min": float(grid.losses.min()), "grid_max": float(grid.losses.max()),
                        "a_zero_row": i0})
    run.finish()
    print(f"wrote {rel} ({len(grid.a_values)}x{len(grid.b_values)} grid)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_common(p, jobs=False):
    p.add_argument("-o", "--output", required=True, help="output directory (manifest at its root)")
    p.add_argument("--config", default=None, help="JSON file of flag defaults; explicit flags win")
    if jobs:
        p.add_argument("--jobs", type=int, default=None,
                       help="worker processes; falls back to $ADVCAM_JOBS, then the CPU count")


def _add_selection(p):
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.advc)")
    p.add_argument("--data", help="dataset directory or index.json")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--ids", default=None, help="comma-separated record ids to keep")
    p.add_argument("--limit", type=int, default=0, help="use only the first N records (0 = all)")
    p.add_argument("--image", default=None, help="single PPM image instead of a dataset")
    p.add_argument("--class", dest="classes", default=None, help="comma-separated class names or indices")


def _add_views(p):
    p.add_argument("--ensemble", action="store_true", help="sum CAMs over scaled and flipped views")
    p.add_argument("--scales", type=_float_list, default=list(cam_mod.DEFAULT_SCALES),
                   help="comma-separated view scales for --ensemble")
    p.add_argument("--no-flip", dest="flip", action="store_false", help="omit mirrored views")


def _add_climb(p):
    d = climb_mod.ClimbConfig()
    p.add_argument("--T", type=int, default=d.T, help="adversarial iterations")
    p.add_argument("--xi", type=float, default=d.xi, help="step size")
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam, help="masked-region penalty weight")
    p.add_argument("--tau", type=float, default=d.tau, help="restricting-mask threshold")
    p.add_argument("--plain", action="store_true", help="ascend the target logit only (no regularization)")
    p.add_argument("--no-mask", dest="mask", action="store_false", help="drop the masked-region penalty")
    p.add_argument("--no-suppress", dest="suppress", action="store_false", help="keep other-class logits out")
    p.add_argument("--step-domain", default=d.step_domain, choices=climb_mod.STEP_DOMAINS,
                   help="take steps on the standardized network input or on raw pixels")
    _add_views(p)


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for switches and flags without one."""

    def _get_help_string(self, action):
        if action.nargs == 0 or action.default is None or action.required:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _Formatter
    parser = argparse.ArgumentParser(prog="advcam", description="Adversarial climbing for class activation maps.",
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    s = synthdata.DatasetSpec()
    p = sub.add_parser("gen-data", help="render the synthetic shapes dataset", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=s.seed)
    p.add_argument("--train", type=int, default=s.train, help="training images")
    p.add_argument("--val", type=int, default=s.val, help="validation images")
    p.add_argument("--test", type=int, default=s.test, help="test images")
    p.add_argument("--min-objects", type=int, default=s.min_objects)
    p.add_argument("--max-objects", type=int, default=s.max_objects)
    p.add_argument("--no-marker-bias", dest="marker_bias", action="store_false",
                   help="omit the small class marker on each object")
    p.add_argument("--background-amplitude", type=float, default=s.background_amplitude)
    p.add_argument("--hue-jitter", type=float, default=s.hue_jitter)
    p.add_argument("--min-radius", type=float, default=s.min_radius)
    p.add_argument("--max-radius", type=float, default=s.max_radius)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    t = model_mod.TrainConfig()
    p = sub.add_parser("train", help="train the GAP classifier", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory or index.json")
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--lr", type=float, default=t.lr, help="peak learning rate")
    p.add_argument("--batch", type=int, default=t.batch)
    p.add_argument("--seed", type=int, default=t.seed)
    p.add_argument("--momentum", type=float, default=t.momentum)
    p.add_argument("--weight-decay", type=float, default=t.weight_decay)
    p.add_argument("--cosine", action=argparse.BooleanOptionalAction, default=t.cosine,
                   help="cosine learning-rate decay")
    p.add_argument("--no-flip", dest="flip", action="store_false", help="disable mirror augmentation")
    p.add_argument("--min-accuracy", type=float, default=t.min_accuracy, help="held-out accuracy gate")
    p.add_argument("--name", default="model.advc", help="checkpoint file name inside the output directory")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cam", help="baseline class activation maps", formatter_class=fmt)
    _add_selection(p)
    _add_views(p)
    _add_common(p)
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("advcam", help="adversarially climbed maps", formatter_class=fmt)
    _add_selection(p)
    _add_climb(p)
    p.add_argument("--save-steps", action="store_true", help="write per-step CAMs")
    p.add_argument("--export-features", action="store_true", help="write pooled feature vectors per step")
    p.add_argument("--curve", action="store_true", help="write the mIoU-per-iteration curve (dataset input)")
    _add_common(p, jobs=True)
    p.set_defaults(func=cmd_advcam)

    p = sub.add_parser("eval-seed", help="threshold maps into seeds and score them", formatter_class=fmt)
    p.add_argument("--maps", required=True, help="directory written by cam or advcam")
    p.add_argument("--data", required=True, help="dataset directory or index.json")
    p.add_argument("--thresholds", default="0.05:0.95:0.05", help="a:b:step, a list, or one value")
    p.add_argument("--write-seeds", action="store_true", help="write best-threshold seeds as PGM")
    _add_common(p)
    p.set_defaults(func=cmd_eval_seed)

    p = sub.add_parser("sweep", help="vary one climbing parameter", formatter_class=fmt)
    p.add_argument("--param", required=True, choices=sorted(metrics.SWEEP_PARAMS))
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--thresholds", default="0.05:0.95:0.05")
    _add_climb(p)
    _add_common(p, jobs=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("landscape", help="loss surface around an image", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", default=None, help="PPM image")
    p.add_argument("--data", default=None)
    p.add_argument("--id", default=None, help="record id when using --data")
    p.add_argument("--class", dest="cls", required=True, help="class name or index")
    p.add_argument("--direction", default="climb", choices=("climb", "attack"))
    p.add_argument("--a-range", type=_range, default=(-1.0, 1.0), help="LO:HI along the gradient direction")
    p.add_argument("--b-range", type=_range, default=(-1.0, 1.0), help="LO:HI along the random direction")
    p.add_argument("--steps", type=int, default=21, help="grid points per axis")
    p.add_argument("--seed", type=int, default=0, help="random-direction seed")
    _add_common(p)
    p.set_defaults(func=cmd_landscape)
    return parser


def _apply_config(parser, argv) -> argparse.Namespace:
    """Parse twice so config-file values sit between built-in defaults and flags."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read config {args.config}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {unknown}")
    for a in sub._actions:
        if a.dest in cfg and a.type is not None and isinstance(cfg[a.dest], str):
            cfg[a.dest] = a.type(cfg[a.dest])
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if getattr(args, "jobs", 0) is None:
            args.jobs = default_jobs()
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
        return args.func(args)
    except ClimbDivergenceError as exc:
        print(f"advcam: diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except TrainingError as exc:
        print(f"advcam: training failed: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if exc.step is not None else EXIT_INPUT
    except (DatasetError, OSError) as exc:
        print(f"advcam: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, DimensionError, CheckpointFormatError, DegenerateDirectionError,
            argparse.ArgumentTypeError) as exc:
        print(f"advcam: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AdvCamError as exc:
        print(f"advcam: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
