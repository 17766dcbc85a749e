"""Command-line pipeline: simulate, train-detector, detect, correct, evaluate.

Dataset layout written by ``simulate``::

    DIR/dataset.json            scenario, phantom kind, size, seed, instance names
    DIR/<instance>/image.immc   ground-truth complex image
    DIR/<instance>/kspace.immc  motion-corrupted k-space
    DIR/<instance>/schedule.json
    DIR/<instance>/mask.json    ground-truth per-line labels

``correct`` writes ``corrected.immc``, ``trace.csv``, ``groups.json`` and
``residual.pgm`` per instance. Exit codes: 0 success, 1 usage error,
2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .detection import (KldNet, TrainConfig, default_depth, detect_lines, score_detector, train_kldnet,
                        validation_loss)
from .groups import MovementGroups, group_movements, groups_from_schedule
from .metrics import evaluate, normalized_magnitudes
from .moco import MocoConfig, NonFiniteLossError, run_moco
from .physics import (ComplexImage, KSpaceData, MotionScenario, SamplingSchedule, generate_phantom,
                      simulate_motion)

log = logging.getLogger("immoco")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
KINDS = ("mixed", "shepp_logan", "random_ellipses")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- dataset access ----------------------------------------------------------

def _instance_seed(seed: int, index: int) -> int:
    return seed * 100_003 + index


def _phantom_kind(kind: str, index: int) -> str:
    if kind == "mixed":
        return "shepp_logan" if index % 2 == 0 else "random_ellipses"
    return kind


def make_instance(scenario: str, kind: str, size: int, seed: int, index: int, noise_std: float = 0.0):
    """(ground truth, corrupted k-space, schedule) of one seed-pinned instance."""
    s = _instance_seed(seed, index)
    gt = generate_phantom(_phantom_kind(kind, index), size, size, seed=s)
    k, sched, _ = simulate_motion(gt, MotionScenario(scenario, seed=s, noise_std=noise_std))
    return gt, k, sched


def _read_dataset(path: Path) -> dict:
    meta_path = path / "dataset.json"
    if not meta_path.is_file():
        raise DataError(f"{path}: no dataset.json (run 'immoco simulate' first)")
    meta = io.read_json(meta_path)
    if not meta.get("instances"):
        raise DataError(f"{path}: dataset has no instances")
    return meta


def _load_instance(root: Path, name: str) -> dict:
    d = root / name
    try:
        return {
            "name": name,
            "image": ComplexImage(io.read_complex(d / "image.immc")),
            "kspace": KSpaceData(io.read_complex(d / "kspace.immc")),
            "schedule": SamplingSchedule.from_json(io.read_json(d / "schedule.json")),
            "labels": np.asarray(io.read_json(d / "mask.json")["lines"], dtype=np.int64),
        }
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{d}: {exc}") from exc


def _load_samples(root: Path) -> list[tuple[KSpaceData, np.ndarray]]:
    meta = _read_dataset(root)
    out = []
    for name in meta["instances"]:
        inst = _load_instance(root, name)
        out.append((inst["kspace"], inst["labels"]))
    return out


# -- config ------------------------------------------------------------------

def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} not found")
    text = p.read_text()
    if p.suffix == ".toml":
        try:
            import tomllib
        except ImportError as exc:
            raise UsageError("TOML configs need Python 3.11+; use JSON") from exc
        return tomllib.loads(text)
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return cfg


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"override {pair!r} must look like key=value")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _moco_config(args) -> MocoConfig:
    fields = dict(args.config_data.get("moco", {}))
    fields.update(_parse_overrides(args.moco))
    if args.iterations is not None:
        fields["n_iterations"] = args.iterations
        fields.setdefault("schedule_start_iter", min(100, args.iterations))
    if args.precision is not None:
        fields["precision"] = args.precision
    try:
        return MocoConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid moco config: {exc}") from exc


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(args.count):
        name = f"inst_{i:04d}"
        gt, k, sched = make_instance(args.scenario, args.kind, args.size, args.seed, i, args.noise_std)
        d = out / name
        d.mkdir(exist_ok=True)
        io.write_complex(d / "image.immc", gt.data)
        io.write_complex(d / "kspace.immc", k.data)
        io.write_json(d / "schedule.json", sched.to_json())
        io.write_json(d / "mask.json", {"lines": sched.line_labels().astype(int).tolist()})
        names.append(name)
    io.write_json(out / "dataset.json", {
        "scenario": args.scenario, "kind": args.kind, "size": args.size, "seed": args.seed,
        "noise_std": args.noise_std, "count": args.count, "instances": names})
    print(f"wrote {args.count} {args.scenario} instances to {out}")
    return EXIT_OK


def cmd_train_detector(args) -> int:
    root = Path(args.data)
    meta = _read_dataset(root)
    samples = _load_samples(root)
    resample = None
    if args.resample:
        count = len(samples)

        def resample(epoch, i):
            _, k, sched = make_instance(meta["scenario"], meta["kind"], meta["size"],
                                        meta["seed"] + 7919 * epoch, i, meta.get("noise_std", 0.0))
            return k, sched.line_labels()
        log.info("re-simulating %d samples per epoch", count)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    val = _load_samples(Path(args.val)) if args.val else None
    rows = []

    def on_epoch(epoch, loss):
        row = {"epoch": epoch, "loss": loss}
        if val is not None and (epoch % args.val_every == 0 or epoch == cfg.epochs - 1):
            row["val_loss"] = validation_loss(net, val)
            net.train()
        rows.append(row)
        print(f"epoch {epoch} loss {loss:.5f}" + (f" val {row['val_loss']:.5f}" if "val_loss" in row else ""),
              flush=True)

    h, w = samples[0][0].n_freq, samples[0][0].n_phase
    net = KldNet(depth=args.depth or default_depth(h, w), seed=args.seed)
    train_kldnet(samples, cfg, net, resample, on_epoch)
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    net.save(ckpt, {"epochs": cfg.epochs, "lr": cfg.lr, "batch_size": cfg.batch_size, "seed": cfg.seed})
    with open(ckpt.with_suffix(".curve.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_loss"])
        for r in rows:
            writer.writerow([r["epoch"], repr(r["loss"]), repr(r["val_loss"]) if "val_loss" in r else ""])
    print(f"saved {ckpt}")
    return EXIT_OK


def _load_net(path: str) -> KldNet:
    try:
        return KldNet.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load detector {path}: {exc}") from exc


def cmd_detect(args) -> int:
    root, out = Path(args.data), Path(args.out)
    meta = _read_dataset(root)
    net = _load_net(args.checkpoint)
    samples = []
    for name in meta["instances"]:
        inst = _load_instance(root, name)
        lines = detect_lines(inst["kspace"], net)
        (out / name).mkdir(parents=True, exist_ok=True)
        io.write_json(out / name / "detected_mask.json", {"lines": lines.astype(int).tolist()})
        samples.append((inst["kspace"], inst["labels"]))
    scores = score_detector(net, samples)
    summary = {"pixel_accuracy": scores.pixel_accuracy, "line_f1": scores.line_f1,
               "line_precision": scores.line_precision, "line_recall": scores.line_recall}
    io.write_json(out / "detection.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def _correct_one(job: tuple) -> dict:
    root, out, name, cfg, checkpoint = job
    inst = _load_instance(Path(root), name)
    if checkpoint is None:
        groups = groups_from_schedule(inst["schedule"])
    else:
        groups = group_movements(detect_lines(inst["kspace"], _load_net(checkpoint)))
    result = run_moco(inst["kspace"], groups, cfg)
    d = Path(out) / name
    d.mkdir(parents=True, exist_ok=True)
    io.write_complex(d / "corrected.immc", result.image.data)
    (d / "trace.csv").write_text(result.trace_csv())
    io.write_json(d / "groups.json", {"n_lines": groups.n_lines, "groups": groups.groups})
    a, b = normalized_magnitudes(result.image, inst["image"])
    io.write_pgm(d / "residual.pgm", np.abs(a - b))
    return {"name": name, "duration_s": result.duration_s, "n_groups": groups.n_movements}


def cmd_correct(args) -> int:
    if args.oracle_mask == bool(args.checkpoint):
        raise UsageError("give exactly one of --oracle-mask or --checkpoint")
    cfg = _moco_config(args)
    root, out = Path(args.data), Path(args.out)
    meta = _read_dataset(root)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "moco_config.json", cfg.to_dict())
    jobs = [(str(root), str(out), name, cfg, args.checkpoint) for name in meta["instances"]]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            done = list(pool.map(_correct_one, jobs))
    else:
        done = [_correct_one(j) for j in jobs]
    for d in done:
        print(f"{d['name']}: {d['n_groups']} groups, {d['duration_s']:.1f} s", flush=True)
    return EXIT_OK


METRICS = ("ssim", "psnr", "haarpsi")
REQUIRED = {"simulate": ["out"], "train-detector": ["data", "out"], "detect": ["data", "checkpoint", "out"],
            "correct": ["data", "out"], "evaluate": ["data", "corrected", "out"]}


def build_report(root: Path, corrected: Path) -> dict:
    meta = _read_dataset(root)
    rows = []
    for name in meta["instances"]:
        inst = _load_instance(root, name)
        path = corrected / name / "corrected.immc"
        if not path.is_file():
            raise DataError(f"missing corrected image for {name}")
        try:
            fixed = ComplexImage(io.read_complex(path))
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
        for method, img in (("corrupted", inst["kspace"].to_image()), ("corrected", fixed)):
            m = evaluate(img, inst["image"])
            rows.append({"instance": name, "scenario": meta["scenario"], "method": method,
                         "ssim": m.ssim, "psnr": m.psnr, "haarpsi": m.haarpsi})
    summary = []
    for method in ("corrupted", "corrected"):
        sel = [r for r in rows if r["method"] == method]
        entry = {"scenario": meta["scenario"], "method": method, "n": len(sel)}
        for k in METRICS:
            vals = np.array([r[k] for r in sel])
            entry[f"{k}_mean"] = float(vals.mean())
            entry[f"{k}_std"] = float(vals.std())
        summary.append(entry)
    return {"instances": rows, "summary": summary}


def _csv_text(rows: list[dict]) -> str:
    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def cmd_evaluate(args) -> int:
    report = build_report(Path(args.data), Path(args.corrected))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "report.json", report)
    (out / "summary.csv").write_text(_csv_text(report["summary"]))
    (out / "instances.csv").write_text(_csv_text(report["instances"]))
    for s in report["summary"]:
        print(f"{s['scenario']:>6} {s['method']:>9}  SSIM {s['ssim_mean']:.4f} ± {s['ssim_std']:.4f}  "
              f"PSNR {s['psnr_mean']:.2f} ± {s['psnr_std']:.2f}  "
              f"HaarPSI {s['haarpsi_mean']:.4f} ± {s['haarpsi_std']:.4f}")
    return EXIT_OK


# -- wiring ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="immoco", description="Motion-guided INR motion correction for Cartesian MRI.")
    p.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON (or TOML on Python 3.11+) file with default option values")

    s = sub.add_parser("simulate", help="write a seed-pinned dataset of corrupted phantoms")
    common(s)
    s.add_argument("--out", help="dataset directory")
    s.add_argument("--scenario", choices=("light", "heavy"), default="light")
    s.add_argument("--kind", choices=KINDS, default="mixed", help="phantom family (mixed alternates)")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--size", type=int, default=64, help="image extent in pixels (square)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise-std", type=float, default=0.0, help="complex Gaussian k-space noise")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train-detector", help="train the k-space line detector")
    common(t)
    t.add_argument("--data", help="training dataset directory")
    t.add_argument("--out", help="checkpoint path; the curve goes next to it")
    t.add_argument("--val", help="optional validation dataset directory")
    t.add_argument("--val-every", type=int, default=10)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--depth", type=int, help="pooling levels (default: 4, or 2 for grids up to 64)")
    t.add_argument("--resample", action="store_true", help="re-simulate the training set every epoch")
    t.set_defaults(func=cmd_train_detector)

    d = sub.add_parser("detect", help="predict corrupted lines and score them")
    common(d)
    d.add_argument("--data")
    d.add_argument("--checkpoint")
    d.add_argument("--out")
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("correct", help="run motion correction on every instance")
    common(c)
    c.add_argument("--data")
    c.add_argument("--out")
    c.add_argument("--checkpoint", help="detector checkpoint used to find movement groups")
    c.add_argument("--oracle-mask", action="store_true", help="take movement groups from the true schedule")
    c.add_argument("--iterations", type=int, help="optimization steps (default 200)")
    c.add_argument("--precision", choices=("float32", "float64"))
    c.add_argument("--moco", action="append", default=[], metavar="KEY=VALUE",
                   help="override any MocoConfig field; VALUE is parsed as JSON")
    c.add_argument("--workers", type=int, default=1, help="parallel instances")
    c.set_defaults(func=cmd_correct)

    e = sub.add_parser("evaluate", help="SSIM/PSNR/HaarPSI report for corrupted vs corrected")
    common(e)
    e.add_argument("--data")
    e.add_argument("--corrected")
    e.add_argument("--out", help="report directory")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _read_config(getattr(args, "config", None))
        # config values become defaults; explicit flags still win
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        values = {k.replace("-", "_"): v for k, v in config.items() if k != "moco"}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
        args.config_data = config
        missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k) is None]
        if missing:
            raise UsageError(f"{args.command} needs {', '.join(missing)} (flag or config key)")
        return args.func(args)
    except UsageError as exc:
        print(f"immoco: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, io.FormatError, FileNotFoundError) as exc:
        print(f"immoco: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"immoco: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
