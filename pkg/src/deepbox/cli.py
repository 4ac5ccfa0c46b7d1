"""Command-line front end.

Every subcommand works on a dataset root laid out as described in
:mod:`deepbox.dataio` and writes a run manifest next to its outputs
(``<root>/runs/<split>/<command>.json`` unless ``--manifest`` says otherwise).
Exit codes: 0 success, 1 usage error, 2 runtime error; errors are reported on
stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import base64
import hashlib
import io
import json
import logging
import platform
import sys
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .dataio import (Dataset, SynthConfig, baseline_propose, gen_synthetic, load_proposals,
                     save_proposals)
from .errors import DeepBoxError
from .evalkit import GroundTruthSet, dump_reports, evaluate
from .netdef import NetConfig, build_net, load_checkpoint, save_checkpoint
from .rerank import rerank
from .roipool import ScaleSet
from .sampler import SamplerConfig, stage1_pools, stage2_pools
from .trainer import TrainSchedule, TrainingData, dataset_mean, pretrain_synthetic, train_stage

log = logging.getLogger("deepbox")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _fraction(text: str) -> Fraction:
    try:
        f = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"expected a number or ratio like 1/30, got {text!r}") from None
    if f <= 0:
        raise argparse.ArgumentTypeError("scale must be positive")
    return f


class Run:
    """Collects what a manifest needs while a subcommand executes."""

    def __init__(self, argv, command: str, config: dict):
        self.argv = list(argv)
        self.command = command
        self.config = config
        self.inputs: dict = {}
        self.outputs: list = []
        self.seeds: dict = {}
        self.timings: dict = {}

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"input file not found: {path}")
        self.inputs[str(path)] = sha256_file(path)
        return path

    def output(self, path) -> None:
        self.outputs.append(str(path))

    def manifest(self) -> dict:
        return {
            "tool": "deepbox",
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "argv": self.argv,
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": {p: sha256_file(p) for p in self.outputs if Path(p).is_file()},
            "timings": {k: round(v, 6) for k, v in self.timings.items()},
        }


def _jsonable(v):
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _ground_truth(ds: Dataset) -> dict:
    return {iid: GroundTruthSet(iid, a.boxes, a.categories) for iid, a in ds.annotations.items()}


def _category_filter(ds: Dataset, cats) -> list[str]:
    if not cats:
        return ds.ids
    cats = set(cats)
    return [iid for iid, a in ds.annotations.items() if set(a.categories.tolist()) <= cats]


# -------------------------------------------------------------- subcommands

def cmd_gen_synth(args, run: Run) -> None:
    cfg = SynthConfig(n_images=args.n_images, width=args.width, height=args.height,
                      objects_min=args.objects_min, objects_max=args.objects_max,
                      size_min=args.size_min, size_max=args.size_max, n_categories=args.n_categories,
                      clutter=args.clutter, categories=tuple(args.categories) if args.categories else None,
                      seed=args.seed)
    run.seeds["synth"] = args.seed
    with run.phase("render"):
        ds = gen_synthetic(cfg, args.data, args.split)
    run.output(ds.dir("annotations") / "annotations.jsonl")
    run.output(ds.dir("annotations") / "synth_config.json")
    print(json.dumps({"split": args.split, "images": len(ds.ids),
                      "objects": int(sum(len(a.boxes) for a in ds.annotations.values()))}))


def cmd_propose_baseline(args, run: Run) -> None:
    ds = Dataset.open(args.data, args.split)
    run.input(ds.dir("annotations") / "annotations.jsonl")
    out = []
    with run.phase("propose"):
        for iid in ds.ids:
            out.append(baseline_propose(ds.image(iid), args.n, iid, args.nms))
    path = ds.dir("proposals") / f"{args.name}.jsonl"
    with run.phase("write"):
        save_proposals(path, out)
    run.output(path)
    print(json.dumps({"proposals": str(path), "images": len(out),
                      "seconds_per_image": run.timings["propose"] / max(len(out), 1)}))


def cmd_train(args, run: Run) -> None:
    ds = Dataset.open(args.data, args.split)
    run.input(ds.dir("annotations") / "annotations.jsonl")
    ids = _category_filter(ds, args.categories)
    if not ids:
        raise DeepBoxError("no training image left after the category filter")
    scfg = SamplerConfig(alpha=args.alpha, gamma=args.gamma, seed=args.seed)
    run.seeds.update(init=args.seed, sampler=args.seed, batches=args.seed)
    with run.phase("load"):
        images = {iid: ds.image(iid).astype(np.float32) for iid in ids}
    if args.init:
        params = load_checkpoint(run.input(args.init))
    else:
        params = build_net(NetConfig.for_profile(args.profile, seed=args.seed))
        params.mean[:] = dataset_mean(images.values())
    rng = np.random.default_rng(args.seed)
    with run.phase("sample"):
        if args.stage == 1:
            pos, neg = stage1_pools([(iid, ds.annotations[iid].width, ds.annotations[iid].height,
                                      ds.annotations[iid].boxes) for iid in ids], scfg, rng)
        else:
            props = load_proposals(run.input(ds.dir("proposals") / f"{args.proposals}.jsonl"), set(ds.ids))
            missing = [iid for iid in ids if iid not in props]
            if missing:
                raise DeepBoxError(f"no {args.proposals!r} proposals for training image {missing[0]!r}")
            pos, neg = stage2_pools([(iid, ds.annotations[iid].width, ds.annotations[iid].height,
                                      ds.annotations[iid].boxes, props[iid].boxes) for iid in ids], scfg, rng)
    log.info("stage %d pools: %d positives, %d negatives", args.stage, len(pos), len(neg))
    if args.pretrain_iters and not args.init:
        with run.phase("pretrain"):
            cats = {iid: ds.annotations[iid].categories for iid in ids}
            gts = {iid: ds.annotations[iid].boxes for iid in ids}
            params = pretrain_synthetic(params, images, gts, cats, args.pretrain_iters, seed=args.seed)
    overrides = {"seed": args.seed, "log_every": args.log_every, "checkpoint_interval": args.checkpoint_interval}
    if args.batch_size:
        overrides["batch_size"] = args.batch_size
    if args.lr:
        overrides["base_lr"] = args.lr
    sched = TrainSchedule.paper(args.stage, args.mode, args.scale, **overrides)
    out = Path(args.out) if args.out else ds.dir("models") / f"stage{args.stage}.dbx"
    out.parent.mkdir(parents=True, exist_ok=True)
    with run.phase("train"):
        params, losses = train_stage(params, TrainingData(images, pos, neg), sched, args.mode,
                                     allow_skip_stage1=args.allow_skip_stage1,
                                     checkpoint_dir=out.parent if sched.checkpoint_interval else None,
                                     scales=ScaleSet(tuple(args.scales)))
    save_checkpoint(params, out)
    loss_path = out.with_suffix(".loss.csv")
    losses.write_csv(loss_path)
    run.output(out)
    run.output(loss_path)
    run.config["schedule"] = {k: _jsonable(v) for k, v in vars(sched).items()}
    print(json.dumps({"model": str(out), "iterations": sched.total_iters, "step_size": sched.step_size,
                      "final_loss_ema": losses.ema, "positives": len(pos), "negatives": len(neg)}))


def cmd_rerank(args, run: Run) -> None:
    ds = Dataset.open(args.data, args.split)
    src = load_proposals(run.input(ds.dir("proposals") / f"{args.proposals}.jsonl"), set(ds.ids))
    top_k = None if args.all else args.top_k
    if args.random:
        rng = np.random.default_rng(args.seed)
        run.seeds["random"] = args.seed
        params = None
        scorer = lambda image, boxes: rng.random(len(boxes))  # noqa: E731
        ranker = "random"
    else:
        if not args.model:
            raise UsageError("rerank: --model is required unless --random is given")
        params = load_checkpoint(run.input(args.model))
        scorer = None
        ranker = f"deepbox-{args.path}"
    out = []
    with run.phase("rerank"):
        for iid in ds.ids:
            if iid not in src:
                raise DeepBoxError(f"image {iid!r} has no {args.proposals!r} proposals")
            res = rerank(params, ds.image(iid), src[iid], top_k, args.path, ScaleSet(tuple(args.scales)),
                         scorer=scorer)
            ps = res.apply(src[iid])
            if args.random:
                ps.ranker = ranker
            out.append(ps)
    path = ds.dir("proposals") / f"{args.name}.jsonl"
    save_proposals(path, out)
    run.output(path)
    print(json.dumps({"proposals": str(path), "images": len(out), "ranker": ranker,
                      "top_k": "all" if top_k is None else top_k,
                      "seconds_per_image": run.timings["rerank"] / max(len(out), 1)}))


def _evaluate_all(args, run: Run, ds: Dataset):
    gt = _ground_truth(ds)
    reports, props = {}, {}
    for name in args.proposals:
        props[name] = load_proposals(run.input(ds.dir("proposals") / f"{name}.jsonl"), set(ds.ids))
        with run.phase(f"eval:{name}"):
            reports[name] = evaluate(props[name], gt, args.iou, args.k_max, min(args.k_ar, args.k_max),
                                     categories=args.holdout_categories, max_gt_area=args.max_gt_area,
                                     hit_threshold=max(args.iou), hit_k=args.k_max, name=name)
    return reports, props


def cmd_eval(args, run: Run) -> None:
    ds = Dataset.open(args.data, args.split)
    reports, _ = _evaluate_all(args, run, ds)
    summary = {name: r.summary() for name, r in reports.items()}
    path = Path(args.out) if args.out else ds.dir("reports") / "eval.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    run.output(path)
    print(json.dumps({n: {"auc": {str(t): v for t, v in r.auc_log.items()}, "ar": r.average_recall,
                          "n_gt": r.n_gt} for n, r in reports.items()}))


def _png_b64(image: np.ndarray) -> str:
    from PIL import Image
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def cmd_report(args, run: Run) -> None:
    ds = Dataset.open(args.data, args.split)
    reports, props = _evaluate_all(args, run, ds)
    first = props[args.proposals[0]]
    out = Path(args.out) if args.out else ds.dir("reports")
    sizes = {iid: (a.width, a.height) for iid, a in ds.annotations.items()}
    pngs = {iid: _png_b64(ds.image(iid)) for iid in ds.ids} if args.embed_images else None
    with run.phase("write"):
        written = dump_reports(reports, {iid: p.boxes for iid, p in first.items()}, out, sizes, pngs)
    for p in written:
        run.output(p)
    print(json.dumps({"report_dir": str(out), "files": len(written)}))


def cmd_replay(args, run: Run) -> None:
    manifest = json.loads(run.input(args.manifest_path).read_text())
    argv = manifest.get("argv")
    if not isinstance(argv, list) or not argv or argv[0] == "replay":
        raise DeepBoxError(f"{args.manifest_path}: manifest has no replayable argv")
    expected = manifest.get("outputs", {})
    code = main(argv)
    if code != 0:
        raise DeepBoxError(f"replayed command exited with status {code}")
    diffs = [p for p, h in expected.items() if not Path(p).is_file() or sha256_file(p) != h]
    print(json.dumps({"replayed": argv, "outputs_checked": len(expected), "mismatched": diffs}))
    if diffs and args.check:
        raise DeepBoxError(f"replay produced different bytes for {len(diffs)} output(s): {diffs[0]}")


# ------------------------------------------------------------------- parser

COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "propose-baseline": cmd_propose_baseline,
    "train": cmd_train,
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "report": cmd_report,
    "replay": cmd_replay,
}

LAYOUT_HELP = """dataset layout under --data:
  images/<split>/<id>.png                 8-bit RGB
  annotations/<split>/annotations.jsonl   {"image_id", "width", "height", "boxes", "categories"}
  proposals/<split>/<name>.jsonl          {"image_id", "boxes", "scores", "source", ["objectness", "ranker"]}
  models/<split>/stage<n>.dbx             binary checkpoint (+ .loss.csv: iteration,lr,loss,ema_loss)
  reports/<split>/                        eval.json, curves_*.csv, hitmiss/*.csv, *.svg
  runs/<split>/<command>.json             run manifest
boxes are [x_min, y_min, x_max, y_max] in pixels, half-open."""


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; keys are option names "
                        "(dashes or underscores), optionally nested under the subcommand name")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 is the bit-reproducible "
                        "reference mode (default 1)")
    common.add_argument("--manifest", help="where to write the run manifest")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    data = _Parser(add_help=False)
    data.add_argument("--data", required=True, help="dataset root directory")
    data.add_argument("--split", default="train", help="split name (default train)")

    p = _Parser(prog="deepbox", description="Train and evaluate a convolutional objectness reranker "
                "for bottom-up object proposals.", epilog=LAYOUT_HELP,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"deepbox {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, help_, parents=(common, data)):
        return sub.add_parser(name, help=help_, description=help_, parents=list(parents), epilog=LAYOUT_HELP,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    g = add("gen-synth", "render a synthetic scene dataset with exact box annotations")
    g.add_argument("--n-images", type=int, default=100)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--height", type=int, default=128)
    g.add_argument("--objects-min", type=int, default=1)
    g.add_argument("--objects-max", type=int, default=3)
    g.add_argument("--size-min", type=int, default=24)
    g.add_argument("--size-max", type=int, default=72)
    g.add_argument("--n-categories", type=int, default=8)
    g.add_argument("--categories", type=_int_list, help="only draw these category ids, e.g. 0,2,4,6")
    g.add_argument("--clutter", type=float, default=1.0, help="background clutter strength")
    g.add_argument("--seed", type=int, default=0)

    g = add("propose-baseline", "rank sliding windows by an edge-density score (writes proposals/<split>/NAME.jsonl)")
    g.add_argument("--n", type=int, default=1000, help="proposals per image")
    g.add_argument("--nms", type=float, default=0.8, help="IoU threshold for duplicate suppression")
    g.add_argument("--name", default="baseline")

    g = add("train", "train one stage of the objectness net (writes models/<split>/stage<n>.dbx)")
    g.add_argument("--stage", type=int, choices=(1, 2), required=True)
    g.add_argument("--mode", choices=("crop", "fast"), default="crop")
    g.add_argument("--scale", type=_fraction, default=Fraction(1), help="shrink the 60k/120k-iteration "
                   "schedule and its decay interval by this factor, e.g. 1/30")
    g.add_argument("--profile", choices=("paper", "small"), default="small")
    g.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    g.add_argument("--allow-skip-stage1", action="store_true", help="allow stage 2 from a fresh net")
    g.add_argument("--proposals", default="baseline", help="proposal set mined for stage-2 samples")
    g.add_argument("--categories", type=_int_list, help="train only on images whose objects all "
                   "belong to these categories")
    g.add_argument("--batch-size", type=int, default=0, help="override the batch size (default 128)")
    g.add_argument("--lr", type=float, default=0.0, help="override the base learning rate (default 0.001)")
    g.add_argument("--alpha", type=float, default=0.65, help="sliding-window overlap")
    g.add_argument("--gamma", type=float, default=0.2, help="ground-truth jitter")
    g.add_argument("--scales", type=_int_list, default=[400, 600, 900], help="fast-mode image scales")
    g.add_argument("--pretrain-iters", type=int, default=0, help="synthetic conv warm-up iterations")
    g.add_argument("--checkpoint-interval", type=int, default=0)
    g.add_argument("--log-every", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="checkpoint path")

    g = add("rerank", "reorder a proposal set by learned objectness (writes proposals/<split>/NAME.jsonl)")
    g.add_argument("--model", help="trained checkpoint")
    g.add_argument("--proposals", default="baseline", help="input proposal set name")
    k = g.add_mutually_exclusive_group()
    k.add_argument("--top-k", type=int, default=2048, help="rerank only the first N proposals (default 2048)")
    k.add_argument("--all", action="store_true", help="rerank every proposal")
    g.add_argument("--path", choices=("crop", "fast"), default="crop")
    g.add_argument("--scales", type=_int_list, default=[400, 600, 900], help="fast-path image scales")
    g.add_argument("--random", action="store_true", help="rank by uniform random scores instead")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", default="deepbox", help="output proposal set name")

    for name, text in (("eval", "recall curves, AUC and average recall (writes reports/<split>/eval.json)"),
                       ("report", "curves, hit/miss tables and density overlays as CSV/SVG")):
        g = add(name, text)
        g.add_argument("--proposals", nargs="+", default=["baseline"], help="proposal set names")
        g.add_argument("--iou", type=float, nargs="+", default=[0.5, 0.7], help="IoU thresholds")
        g.add_argument("--k-max", type=int, default=1000, help="largest proposal budget")
        g.add_argument("--k-ar", type=int, default=1000, help="budget for average recall")
        g.add_argument("--max-gt-area", type=float, help="only ground truth smaller than this area")
        g.add_argument("--holdout-categories", type=_int_list, help="only ground truth of these categories")
        g.add_argument("--out", help="output file (eval) or directory (report)")
        if name == "report":
            g.add_argument("--embed-images", action="store_true", help="embed images in the density SVGs")

    g = add("replay", "re-run a command from its manifest and compare output hashes", parents=(common,))
    g.add_argument("manifest_path", metavar="MANIFEST")
    g.add_argument("--check", action="store_true", help="fail if any output differs")
    return p


def _load_config(path, command: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path}: top level must be an object")
    flat = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    flat.update(raw.get(command, {}))
    return {k.replace("-", "_"): v for k, v in flat.items()}


def _apply_config(subparser: argparse.ArgumentParser, cfg: dict, path) -> None:
    known = {a.dest: a for a in subparser._actions}
    for key, value in cfg.items():
        if key not in known or key in ("config", "help"):
            raise UsageError(f"config file {path}: unknown option {key!r}")
        action = known[key]
        if action.type is not None and isinstance(value, str):
            try:
                value = action.type(value)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config file {path}: {key}: {exc}") from None
        elif action.type is _int_list and isinstance(value, list):
            value = [int(v) for v in value]
        subparser.set_defaults(**{key: value})
        action.required = False


def _parse(argv):
    parser = build_parser()
    if not argv:
        raise UsageError("no command given; try 'deepbox --help'")
    pre, _ = parser.parse_known_args(argv)
    if pre.command is None:
        raise UsageError("no command given; try 'deepbox --help'")
    subparser = parser._subparsers._group_actions[0].choices[pre.command]
    if getattr(pre, "config", None):
        _apply_config(subparser, _load_config(pre.config, pre.command), pre.config)
    args = parser.parse_args(argv)
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    return args


def _default_manifest(args) -> Path:
    if args.command == "replay":
        return Path(args.manifest_path).with_suffix(".replay.json")
    name = args.command
    if args.command == "train":
        name += f"-stage{args.stage}"
    elif args.command in ("rerank", "propose-baseline"):
        name += f"-{args.name}"
    return Path(args.data) / "runs" / args.split / f"{name}.json"


def run(argv) -> int:
    argv = list(argv)
    try:
        args = _parse(argv)
    except UsageError as exc:
        _report_error("usage", str(exc), argv)
        return 1
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items())}
    run_ = Run(argv, args.command, config)
    try:
        with threadpool_limits(limits=args.threads), run_.phase("total"):
            COMMANDS[args.command](args, run_)
    except UsageError as exc:
        _report_error("usage", str(exc), argv)
        return 1
    except (DeepBoxError, OSError, ValueError) as exc:
        _report_error(type(exc).__name__, str(exc), argv)
        return 2
    out = Path(args.manifest) if args.manifest else _default_manifest(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(run_.manifest(), indent=1, sort_keys=True) + "\n")
    return 0


def _report_error(kind: str, message: str, argv) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "argv": list(argv)}) + "\n")


def main(argv=None) -> int:
    return run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
