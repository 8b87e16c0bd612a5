"""Command-line pipeline: ``synth``, ``match``, ``train`` and ``eval``.

Each command writes its artifacts plus a ``manifest.json`` into ``--out``.
Any flag default can be overridden through an environment variable named
``KPT_`` followed by the flag in upper case with dashes as underscores, e.g.
``KPT_EPOCHS=20`` or ``KPT_LR_WARP=5e-4``. Failures print one JSON object to
stderr and exit with status 1.
"""

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import crop_and_resize, load_annotations, load_image, save_annotations, save_image
from .errors import KptransferError, NoCompatibleCandidates, ValidationError
from .experiment import (
    ALL_MODES,
    ExperimentConfig,
    ModeRun,
    TransferData,
    compute_matches,
    fit_mode,
    mode_config,
    original_keypoints,
    predict_samples,
    prepare_targets,
)
from .metrics import curve_csv, eval_json, failure_rate, threshold_sweep
from .nets import TrainConfig, WarpGeometry
from .pose import KEYPOINT_NAMES, MatchSet, pose_variant
from .supervision import write_warp_targets
from .synthetic import make_faces

log = logging.getLogger("kptransfer")

ENV_PREFIX = "KPT_"
DEFAULT_THRESHOLDS = "0.02,0.04,0.06,0.08,0.10,0.12,0.14,0.16,0.18,0.20"


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: object
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)  # file name in --out -> sha256
    tool_version: str = __version__
    wall_time: dict = field(default_factory=dict)  # stage -> seconds

    def write(self, out_dir):
        doc = dataclasses.asdict(self)
        Path(out_dir, "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class CommandError(Exception):
    def __init__(self, stage, exc):
        super().__init__(str(exc))
        self.stage = stage
        self.exc = exc


class Run:
    """Collects timings, inputs and outputs for one command invocation."""

    def __init__(self, command, args, out_dir, config, seed=None):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, sys.argv[1:] if args is None else list(args),
                                    config, seed)

    @contextlib.contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        except CommandError:
            raise
        except (KptransferError, OSError, ValueError) as exc:
            raise CommandError(name, exc) from exc
        finally:
            self.manifest.wall_time[name] = round(time.perf_counter() - t0, 6)

    def input(self, path):
        self.manifest.inputs[str(path)] = _sha256(path)

    def write_text(self, name, text):
        Path(self.out, name).write_text(text)
        self.output(name)

    def output(self, name):
        self.manifest.outputs[name] = _sha256(self.out / name)

    def finish(self):
        self.manifest.write(self.out)


def _load_samples(ann_path, size, run=None):
    """Annotations and their canonical crops; image paths are relative to the file."""
    ann_path = Path(ann_path)
    anns = load_annotations(ann_path)
    cache = {}
    samples = []
    for a in anns:
        img_path = ann_path.parent / a.image_path
        if img_path not in cache:
            cache[img_path] = load_image(img_path)
            if run is not None:
                run.input(img_path)
        samples.append(crop_and_resize(a, cache[img_path], size))
    return anns, samples


# ---------------------------------------------------------------- commands


def cmd_synth(args, argv=None):
    cfg = {"n_humans": args.n_humans, "n_animals": args.n_animals, "n_train": args.n_train,
           "canvas": args.canvas, "noise": args.noise}
    run = Run("synth", argv, args.out, cfg, args.seed)
    with run.stage("render"):
        rng = np.random.default_rng(args.seed)
        img_dir = run.out / "images"
        img_dir.mkdir(exist_ok=True)
        sets = {}
        for species, n in (("human", args.n_humans), ("animal", args.n_animals)):
            faces = make_faces(n, species, rng, canvas=args.canvas, noise=args.noise)
            anns = []
            for ann, img in faces:
                rel = f"images/{ann.id}.png"
                save_image(run.out / rel, img)
                run.output(rel)
                anns.append(dataclasses.replace(ann, image_path=rel))
            sets[species] = anns
    with run.stage("write"):
        for name, anns in (("humans.json", sets["human"]),
                           ("animals_train.json", sets["animal"][: args.n_train]),
                           ("animals_test.json", sets["animal"][args.n_train:])):
            save_annotations(run.out / name, anns)
            run.output(name)
    run.finish()
    return 0


def matches_document(matches, animals, humans, pool_sizes, skipped):
    records = []
    for i in sorted(matches):
        ms = matches[i]
        records.append({
            "animal_id": animals[i].id,
            "human_ids": [humans[j].id for j in ms.human_indices],
            "angle_diffs": [float(d) for d in ms.angle_diffs],
            "mirrored": [bool(m) for m in ms.mirrored],
            "variant": _variant_of(animals[i].keypoints),
        })
    return {
        "matches": records,
        "summary": {
            "pool_sizes": dict(sorted(pool_sizes.items())),
            "skipped": [animals[i].id for i in skipped],
        },
    }


def _variant_of(kp):
    v = pose_variant(kp)
    return v.value if v is not None else None


def run_matching(animals, humans, k, tol):
    """Library matching keyed by animal position; failures name animals by id."""
    try:
        res = compute_matches([a.keypoints for a in animals], [h.keypoints for h in humans], k, tol)
    except NoCompatibleCandidates as exc:
        ids = [animals[i].id for i in exc.animal_ids]
        raise NoCompatibleCandidates(str(exc), ids) from None
    return res


def cmd_match(args, argv=None):
    cfg = {"k": args.k, "tol": args.tol}
    run = Run("match", argv, args.out, cfg)
    with run.stage("load"):
        humans = load_annotations(args.humans)
        animals = load_annotations(args.animals)
        run.input(args.humans)
        run.input(args.animals)
    with run.stage("match"):
        res = run_matching(animals, humans, args.k, args.tol)
    with run.stage("write"):
        doc = matches_document(res.matches, animals, humans, res.pool_sizes, res.skipped)
        run.write_text("matches.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    run.finish()
    return 0


def read_matches(path, animals, humans):
    """``matches.json`` back into ``{animal position: MatchSet}``."""
    doc = json.loads(Path(path).read_text())
    a_pos = {a.id: i for i, a in enumerate(animals)}
    h_pos = {h.id: j for j, h in enumerate(humans)}
    unknown = [r["animal_id"] for r in doc["matches"] if r["animal_id"] not in a_pos]
    unknown += [h for r in doc["matches"] for h in r["human_ids"] if h not in h_pos]
    if unknown:
        raise ValidationError(f"{path}: ids not found in the annotations", unknown)
    out = {}
    for r in doc["matches"]:
        i = a_pos[r["animal_id"]]
        out[i] = MatchSet(i, [h_pos[h] for h in r["human_ids"]],
                          [float(d) for d in r["angle_diffs"]],
                          [bool(m) for m in r.get("mirrored", [False] * len(r["human_ids"]))])
    return out


def experiment_config(args):
    train = TrainConfig(
        lr_warp=args.lr_warp, lr_kp=args.lr_kp, epochs=args.epochs, k=args.k, grid=args.grid,
        sample_grid=args.sample_grid, seed=args.seed, w_warp=args.w_warp, w_kp=args.w_kp,
        size=args.size, batch_size=args.batch_size,
    )
    return ExperimentConfig(train=train, kp_pretrain_epochs=args.pretrain_epochs,
                            warp_pretrain_epochs=args.warp_pretrain_epochs, colinear_tol=args.tol)


def curves_csv(curves):
    lines = ["epoch,warp_loss,kp_loss"]
    lines += [f"{e},{w!r},{k!r}" for e, w, k in curves]
    return "\n".join(lines) + "\n"


def cmd_train(args, argv=None):
    exp = experiment_config(args)
    config = {"mode": args.mode, "experiment": exp.to_dict()}
    run = Run("train", argv, args.out, config, args.seed)
    with run.stage("load"):
        run.input(args.humans)
        run.input(args.animals)
        h_anns, humans = _load_samples(args.humans, args.size, run)
        a_anns, animals = _load_samples(args.animals, args.size, run)
        if not animals:
            raise CommandError("load", ValueError("no training animals"))
        matches = None
        if args.matches:
            run.input(args.matches)
            matches = read_matches(args.matches, a_anns, h_anns)
    data = TransferData(humans, animals, [])
    geom = WarpGeometry.from_config(exp.train)
    targets = None
    if args.mode == "ours":
        with run.stage("warp_targets"):
            if matches is None:
                matches = run_matching(a_anns, h_anns, exp.train.k, exp.colinear_tol).matches
            targets = prepare_targets(data, exp, matches)
            write_warp_targets(run.out / "warp_targets.bin", targets, exp.train.sample_grid,
                               exp.train.k)
            run.output("warp_targets.bin")
            run.output("warp_targets.manifest.txt")
    with run.stage("train"):
        result = fit_mode(args.mode, data, exp, args.seed, None, targets, geom)
    with run.stage("write"):
        save_checkpoint(run.out / "checkpoint.kpck", result.params,
                        {"mode": args.mode, "experiment": exp.to_dict()})
        run.output("checkpoint.kpck")
        run.write_text("curves.csv", curves_csv(result.curves))
        if result.warp_curves:
            run.write_text("warp_pretrain_curves.csv", curves_csv(result.warp_curves))
    run.finish()
    return 0


def cmd_eval(args, argv=None):
    thresholds = parse_floats(args.thresholds)
    run = Run("eval", argv, args.out, {"thresholds": thresholds, "threshold": args.threshold})
    with run.stage("load"):
        run.input(args.checkpoint)
        run.input(args.annotations)
        params, meta = load_checkpoint(args.checkpoint)
        exp = ExperimentConfig.from_dict(meta["experiment"])
        mode = meta["mode"]
        run.manifest.config.update(meta)
        run.manifest.seed = exp.train.seed
        anns, samples = _load_samples(args.annotations, exp.train.size, run)
        humans = []
        if mode == "gt-warp":
            if not args.humans:
                raise CommandError("load", ValueError("gt-warp checkpoints need --humans"))
            run.input(args.humans)
            _, humans = _load_samples(args.humans, exp.train.size, run)
    with run.stage("predict"):
        mrun = ModeRun(mode, params, mode_config(mode, exp.train), [])
        data = TransferData(humans, [], samples)
        geom = WarpGeometry.from_config(mrun.cfg)
        preds = predict_samples(mrun, samples, data, exp, geom) if samples else np.zeros((0, 5, 2))
        gts = original_keypoints(samples)
        sizes = [s.bbox_size for s in samples]
    with run.stage("score"):
        result = failure_rate(preds, gts, sizes, args.threshold)
        curve = threshold_sweep(preds, gts, sizes, thresholds)
    with run.stage("write"):
        run.write_text("eval.json", eval_json(result, {"mode": mode, "threshold": args.threshold,
                                                       "n_faces": len(samples)}))
        run.write_text("curve.csv", curve_csv(curve))
        lines = ["id," + ",".join(f"{n}_{c}" for n in KEYPOINT_NAMES for c in "xy")]
        for a, p in zip(anns, preds):
            lines.append(a.id + "," + ",".join(repr(float(v)) for v in p.ravel()))
        run.write_text("predictions.csv", "\n".join(lines) + "\n")
    run.finish()
    return 0


# ----------------------------------------------------------------- parsing


def parse_floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _env_defaults(parser):
    """Replace option defaults with ``KPT_*`` environment values where set."""
    for action in parser._actions:
        if not action.option_strings or action.dest in ("help",):
            continue
        name = ENV_PREFIX + action.dest.upper()
        if name in os.environ:
            raw = os.environ[name]
            action.default = action.type(raw) if action.type else raw


def _add_train_flags(p):
    d = TrainConfig()
    e = ExperimentConfig()
    p.add_argument("--size", type=int, default=d.size, help="canonical crop side S (pixels)")
    p.add_argument("--grid", type=int, default=d.grid, help="control grid side G")
    p.add_argument("--sample-grid", type=int, default=d.sample_grid,
                   help="flow sample grid side Gs")
    p.add_argument("--k", type=int, default=d.k, help="human neighbors per animal")
    p.add_argument("--mode", choices=ALL_MODES, default="ours",
                   help="ours | bl-tps | bl-ft | scratch, or the gt-warp oracle arm")
    p.add_argument("--epochs", type=int, default=d.epochs, help="finetuning epochs")
    p.add_argument("--pretrain-epochs", type=int, default=e.kp_pretrain_epochs,
                   help="keypoint pretraining epochs on humans")
    p.add_argument("--warp-pretrain-epochs", type=int, default=e.warp_pretrain_epochs,
                   help="warp-only epochs before joint training (mode ours)")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--lr-warp", type=float, default=d.lr_warp)
    p.add_argument("--lr-kp", type=float, default=d.lr_kp)
    p.add_argument("--w-warp", type=float, default=d.w_warp, help="warp loss weight")
    p.add_argument("--w-kp", type=float, default=d.w_kp, help="keypoint loss weight")
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--tol", type=float, default=e.colinear_tol, help="colinearity tolerance")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kptransfer",
        description="Animal facial keypoints via pose-matched human faces and TPS warps. "
                    f"Flag defaults can be set with {ENV_PREFIX}<FLAG> environment variables.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic human/animal face dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-humans", type=int, default=300)
    p.add_argument("--n-animals", type=int, default=200)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--canvas", type=int, default=80, help="image side in pixels")
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=123)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("match", help="pose-matched human neighbors for every animal")
    p.add_argument("--humans", required=True, help="human annotation document")
    p.add_argument("--animals", required=True, help="animal annotation document")
    p.add_argument("--k", type=int, default=TrainConfig.k)
    p.add_argument("--tol", type=float, default=ExperimentConfig.colinear_tol)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("train", help="train one mode; writes checkpoint and loss curves")
    p.add_argument("--humans", required=True)
    p.add_argument("--animals", required=True, help="training animal annotations")
    p.add_argument("--matches", help="matches.json from the match command (else recomputed)")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="failure rate and threshold curve on test animals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--annotations", required=True, help="test animal annotations")
    p.add_argument("--humans", help="human annotations (gt-warp checkpoints only)")
    p.add_argument("--threshold", type=float, default=0.10,
                   help="failure threshold as a fraction of face size")
    p.add_argument("--thresholds", default=DEFAULT_THRESHOLDS,
                   help="comma-separated ascending thresholds for curve.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    for action in sub.choices.values():
        _env_defaults(action)
    _env_defaults(parser)
    return parser


def error_record(exc, stage=None):
    rec = {"error": type(exc).__name__, "message": str(exc)}
    if stage:
        rec["stage"] = stage
    for attr in ("ids", "animal_ids", "diagnostics"):
        if getattr(exc, attr, None):
            rec[attr] = getattr(exc, attr)
    return rec


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except CommandError as err:
        rec = error_record(err.exc, err.stage)
    except (KptransferError, OSError, ValueError) as exc:
        rec = error_record(exc)
    print(json.dumps(rec, sort_keys=True, default=str), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
