"""airwaytopo command line: one batch subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 unreadable or invalid input data,
3 internal failure. Files written by a failing command are renamed with a
``.partial`` suffix.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .anatomy import DEFAULT_CUTOFFS, decompose_amc
from .breakage import (
    DEFAULT_GAMMA_MM,
    breakage_attention,
    connect_breakages,
    refine_with_details,
    simulate_breakage,
)
from .losses import DEFAULT_LAMBDA, GUL_ALPHA, GUL_ROOT, ProbVolume, loss_report
from .metrics import DEFAULT_DETECT_THRESHOLD, aggregate, evaluate, reports_to_csv
from .phantom import PhantomSpec, generate_phantom
from .pipeline import DEFAULT_MAX_ITERS, DEFAULT_SELECT_ITER, MIN_ISLAND_VOX, run_inference
from .plotting import plot_generation_coverage
from .runner import RunConfig, load_run_config, pooled_generation_coverage, run_self_learning
from .segmenter import ClassicalSegmenter, GaussianSnapshot, binarize
from .skeleton import SkeletonTree, skeletonize
from .volume import Volume, VolumeError, largest_component, read_volume, write_volume

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("airwaytopo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Outputs:
    """Registry of files a command writes, so a failure can mark them ``.partial``."""

    def __init__(self):
        self.paths: list[Path] = []

    def file(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(path)
        return path

    def volume(self, vol: Volume, path) -> Path:
        path = self.file(path)
        self.paths.append(path.with_suffix(".raw"))
        write_volume(vol, path)
        return path

    def json(self, obj, path) -> Path:
        path = self.file(path)
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2)
            fh.write("\n")
        return path

    def text(self, text: str, path) -> Path:
        path = self.file(path)
        with open(path, "w", newline="") as fh:
            fh.write(text)
        return path

    def tree(self, directory) -> None:
        """Register every file already under ``directory`` (for library calls that write themselves)."""
        for root, _, files in os.walk(directory):
            self.paths.extend(sorted(Path(root) / f for f in files))

    def mark_partial(self) -> None:
        for p in dict.fromkeys(self.paths):
            if p.exists():
                os.replace(p, p.with_name(p.name + ".partial"))

    def listing(self) -> list[str]:
        return [str(p) for p in dict.fromkeys(self.paths) if p.suffix != ".raw"]


# ---------------------------------------------------------------- helpers

def _triple(text: str, kind=float) -> tuple:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(kind(p) for p in parts)


def _pair(kind):
    def parse(text: str) -> tuple:
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
        try:
            return tuple(kind(p) for p in parts)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def _positive(kind):
    def parse(text: str):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return parse


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _load_tree(path) -> SkeletonTree:
    try:
        return SkeletonTree.load(path)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise VolumeError(f"{path}: malformed tree file: {exc}") from exc


def _load_snapshot(path) -> GaussianSnapshot:
    try:
        return GaussianSnapshot.load(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeError(f"{path}: malformed snapshot: {exc}") from exc


def _report_dict(rep) -> dict:
    d = rep.to_dict()
    d.pop("per_branch")
    return d


# --------------------------------------------------------------- commands

def cmd_phantom(a, out: Outputs) -> dict:
    spec = PhantomSpec(
        generations=a.generations,
        trunk_radius_mm=a.trunk_radius_mm,
        trunk_length_mm=a.trunk_length_mm,
        noise_sigma_hu=a.noise_sigma,
        blur_sigma_vox=a.blur_sigma_vox,
        spacing=a.spacing,
        seed=a.seed,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ph = generate_phantom(spec)
    d = Path(a.out)
    out.volume(ph.ct, d / "ct.mhd")
    out.volume(ph.gt_mask, d / "gt.mhd")
    ph.gt_tree.save(out.file(d / "gt_tree.json"))
    out.json({"spec": spec.to_dict(), "generations": ph.generations}, d / "phantom.json")
    return {
        "generations": ph.generations,
        "n_branches": len(ph.gt_tree.branches),
        "dims": list(ph.ct.dims),
        "lumen_voxels": int(ph.gt_mask.data.sum()),
    }


def cmd_decompose(a, out: Outputs) -> dict:
    mask = read_volume(a.mask)
    amc = decompose_amc(mask, a.cutoffs)
    path = out.file(a.out)
    out.file(path.with_suffix(".raw"))
    out.file(path.with_suffix(".json"))
    amc.save(path)
    return {"cutoffs": list(amc.generation_cutoffs), "counts": amc.counts()}


def cmd_skeletonize(a, out: Outputs) -> dict:
    mask = read_volume(a.mask)
    tree = skeletonize(mask, a.root)
    tree.save(out.file(a.out))
    return {
        "n_branches": len(tree.branches),
        "n_leaves": len(tree.leaves()),
        "total_length_mm": tree.total_length_mm,
        "root": list(tree.root),
    }


def cmd_attention(a, out: Outputs) -> dict:
    att = breakage_attention(read_volume(a.mask), a.gamma_mm, a.threshold)
    out.volume(att.normalized, a.out)
    if a.raw_out:
        out.volume(att.raw, a.raw_out)
    return {
        "gamma_mm": att.gamma,
        "n_components": att.n_components,
        "breakage_centers": [list(c) for c in att.breakage_centers],
    }


def cmd_simulate(a, out: Outputs) -> dict:
    lo, hi = a.removal_range
    if not 0.0 < lo <= hi < 1.0:
        raise UsageError("--removal-range must satisfy 0 < lo <= hi < 1")
    mask = read_volume(a.mask)
    tree = _load_tree(a.tree) if a.tree else None
    sample = simulate_breakage(mask, a.branch_fraction, (lo, hi), a.seed, tree)
    d = Path(a.out)
    out.volume(sample.broken_mask, d / "broken.mhd")
    out.volume(sample.breakage_gt, d / "breakage_gt.mhd")
    manifest = sample.manifest()
    out.json(manifest, d / "manifest.json")
    return {"n_removed_branches": len(sample.removed_branches), **manifest}


def cmd_connect(a, out: Outputs) -> dict:
    mask, ct = read_volume(a.mask), read_volume(a.ct)
    fill, att, n = connect_breakages(mask, ct, gamma_mm=a.gamma_mm, threads=a.threads)
    joined = mask.like((mask.data.astype(bool) | fill).astype(np.uint8))
    out.volume(joined, a.out)
    return {
        "n_patches": n,
        "breakage_centers": [list(c) for c in att.breakage_centers],
        "filled_voxels": int((fill & ~mask.data.astype(bool)).sum()),
    }


def cmd_refine(a, out: Outputs) -> dict:
    pred, ref, ct = read_volume(a.pred), read_volume(a.ref), read_volume(a.ct)
    res = refine_with_details(pred, ref, ct, gamma_mm=a.gamma_mm, threads=a.threads)
    out.volume(res.mask, a.out)
    return {
        "n_patches": res.n_patches,
        "fused_voxels": int(res.fused.data.sum()),
        "output_voxels": int(res.mask.data.sum()),
    }


def cmd_segment(a, out: Outputs) -> dict:
    if bool(a.snapshot) == bool(a.train_ct):
        raise UsageError("give either --snapshot or --train-ct/--train-label pairs")
    if a.train_ct and len(a.train_ct) != len(a.train_label or []):
        raise UsageError("--train-ct and --train-label must be given the same number of times")
    if a.train_ct and a.seed is None:
        raise UsageError("--seed is required when training")
    seg = ClassicalSegmenter(cutoffs=a.cutoffs, seed=a.seed or 0)
    if a.snapshot:
        snap = _load_snapshot(a.snapshot)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            snap = seg.train([(read_volume(c), read_volume(y)) for c, y in zip(a.train_ct, a.train_label)])
        if a.save_snapshot:
            snap.save(out.file(a.save_snapshot))
    result = {"snapshot": snap.id}
    if a.ct:
        ct = read_volume(a.ct)
        if a.connect:
            mask = run_inference(ct, snap, seg, gamma_mm=a.gamma_mm, min_island_vox=a.min_island_vox,
                                 threads=a.threads)
        else:
            prob = seg.predict(ct, snap)
            mask = largest_component(binarize(prob, ct))
            if a.prob_out:
                for c in range(prob.n_classes):
                    out.volume(ct.like(prob.probs[c].astype(np.float32)), f"{a.prob_out}_c{c}.mhd")
        if a.out:
            out.volume(mask, a.out)
        result["airway_voxels"] = int(mask.data.sum())
    elif a.out or a.prob_out:
        raise UsageError("--out and --prob-out need --ct")
    return result


def cmd_iterate(a, out: Outputs) -> dict:
    cfg = load_run_config(a.config) if a.config else RunConfig()
    overrides = {
        "out_dir": a.out,
        "phantoms": a.phantoms,
        "generations": a.generations,
        "degrade_fraction": a.degrade_fraction,
        "max_iters": a.max_iters,
        "select_iter": a.select_iter,
        "gamma_mm": a.gamma_mm,
        "lam": a.lam,
        "cutoffs": a.cutoffs,
        "branch_detect_threshold": a.branch_detect_threshold,
        "min_island_vox": a.min_island_vox,
    }
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    if a.cases:
        cfg.cases, cfg.phantoms = list(a.cases), 0
    elif a.phantoms:
        cfg.cases = []
    cfg.seed = a.seed
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out_dir = Path(cfg.out_dir)
    try:
        res = run_self_learning(cfg, threads=a.threads)
    finally:
        if out_dir.exists():
            out.tree(out_dir)
    if res.error:
        raise RuntimeError(res.error)
    return {
        "out_dir": str(out_dir),
        "selected_iter": res.selected_index,
        "selected_snapshot": res.selected.id,
        "iterations": [it.summary() for it in res.iterations],
    }


def cmd_evaluate(a, out: Outputs) -> dict:
    if len(a.pred) != len(a.ref):
        raise UsageError("--pred and --ref need the same number of volumes")
    if a.ref_tree and len(a.ref_tree) != len(a.ref):
        raise UsageError("--ref-tree must be given once per --ref")
    names = a.names or [Path(p).stem for p in a.pred]
    if len(names) != len(a.pred):
        raise UsageError("--names needs one name per --pred")
    named = []
    for i, (p, r) in enumerate(zip(a.pred, a.ref)):
        tree = _load_tree(a.ref_tree[i]) if a.ref_tree else None
        named.append((names[i], evaluate(read_volume(p), read_volume(r), tree, a.branch_detect_threshold)))
    corpus = aggregate(named)
    if a.csv:
        out.text(reports_to_csv(named), a.csv)
    if a.report_dir:
        d = Path(a.report_dir)
        out.text(reports_to_csv(named), d / "report.csv")
        out.json({"schema_version": SCHEMA_VERSION, **corpus.to_dict()}, d / "report.json")
        plot_generation_coverage(pooled_generation_coverage([r for _, r in named]),
                                 out.file(d / "generation_coverage.png"))
    result = {"cases": [{"case": n, **_report_dict(r)} for n, r in named]}
    if len(named) > 1:
        result.update(mean=corpus.mean, std=corpus.std)
    result["_text"] = reports_to_csv(named).rstrip("\n")
    return result


def cmd_loss(a, out: Outputs) -> dict:
    vols = [read_volume(p) for p in a.prob]
    if len(vols) < 2:
        raise UsageError("--prob needs one volume per class (at least two)")
    label = read_volume(a.label)
    probs = np.stack([v.data.astype(np.float64) for v in vols])
    try:
        prob = ProbVolume(probs, vols[0].spacing)
    except ValueError as exc:
        raise VolumeError(str(exc)) from exc
    if prob.n_classes != 4:
        raise UsageError("--prob needs 4 class volumes (background, L, M, S)")
    weights = read_volume(a.weights).data if a.weights else None
    return loss_report(prob, label.data, a.lam, weights, a.alpha, a.root)


COMMANDS = {
    "phantom": cmd_phantom,
    "decompose": cmd_decompose,
    "skeletonize": cmd_skeletonize,
    "attention": cmd_attention,
    "simulate-breakage": cmd_simulate,
    "connect": cmd_connect,
    "refine": cmd_refine,
    "segment": cmd_segment,
    "iterate": cmd_iterate,
    "evaluate": cmd_evaluate,
    "loss": cmd_loss,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="airwaytopo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--threads", type=_positive(int), default=1,
                        help="worker threads; outputs do not depend on it")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    def gamma(p):
        p.add_argument("--gamma-mm", type=_positive(float), default=DEFAULT_GAMMA_MM,
                       help="breakage attention offset in mm (default %(default)s)")

    p = add("phantom", "generate a synthetic airway phantom")
    p.add_argument("--generations", type=_positive(int), default=6)
    p.add_argument("--trunk-radius-mm", type=_positive(float), default=PhantomSpec.trunk_radius_mm)
    p.add_argument("--trunk-length-mm", type=_positive(float), default=PhantomSpec.trunk_length_mm)
    p.add_argument("--noise-sigma", type=float, default=PhantomSpec.noise_sigma_hu, help="CT noise sigma in HU")
    p.add_argument("--blur-sigma-vox", type=float, default=PhantomSpec.blur_sigma_vox)
    p.add_argument("--spacing", type=_triple, default=PhantomSpec.spacing, help="voxel spacing x,y,z in mm")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = add("decompose", "split a binary airway mask into L/M/S classes")
    p.add_argument("--mask", required=True)
    p.add_argument("--cutoffs", type=_pair(int), default=DEFAULT_CUTOFFS, help="g_LM,g_MS (default 1,3)")
    p.add_argument("--out", required=True)

    p = add("skeletonize", "extract the rooted centerline tree")
    p.add_argument("--mask", required=True)
    p.add_argument("--root", type=lambda t: _triple(t, int), default=None, help="root voxel x,y,z")
    p.add_argument("--out", required=True, help="tree JSON path")

    p = add("attention", "breakage attention map and breakage centers")
    p.add_argument("--mask", required=True)
    gamma(p)
    p.add_argument("--threshold", type=_fraction, default=0.5)
    p.add_argument("--out", default="attention.mhd", help="normalized map (real32)")
    p.add_argument("--raw-out", default=None, help="optional second-nearest distance map (real32)")

    p = add("simulate-breakage", "cut segments out of leaf branches")
    p.add_argument("--mask", required=True)
    p.add_argument("--tree", default=None, help="precomputed tree JSON")
    p.add_argument("--branch-fraction", type=_fraction, default=0.5)
    p.add_argument("--removal-range", type=_pair(float), default=(0.10, 0.30))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = add("connect", "bridge breakages of a mask with the geometric connector")
    p.add_argument("--mask", required=True)
    p.add_argument("--ct", required=True)
    gamma(p)
    p.add_argument("--out", required=True)

    p = add("refine", "fuse prediction and reference, bridge breakages, keep the main component")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--ct", required=True)
    gamma(p)
    p.add_argument("--out", required=True)

    p = add("segment", "train and/or apply the classical voxel segmenter")
    p.add_argument("--ct", default=None, help="volume to segment")
    p.add_argument("--snapshot", default=None, help="trained snapshot JSON")
    p.add_argument("--train-ct", action="append", default=None)
    p.add_argument("--train-label", action="append", default=None)
    p.add_argument("--save-snapshot", default=None)
    p.add_argument("--cutoffs", type=_pair(int), default=DEFAULT_CUTOFFS)
    p.add_argument("--seed", type=int, default=None, help="required when training")
    p.add_argument("--connect", action="store_true", help="bridge breakages in the prediction")
    p.add_argument("--min-island-vox", type=int, default=MIN_ISLAND_VOX)
    gamma(p)
    p.add_argument("--prob-out", default=None, help="prefix for per-class probability volumes")
    p.add_argument("--out", default=None)

    p = add("iterate", "topology-guided iterative self-learning")
    p.add_argument("--config", default=None, help="INI file with a [run] section")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--phantoms", type=_positive(int), default=None)
    p.add_argument("--cases", nargs="+", default=None, help="case directories with ct.mhd, ref.mhd[, gt.mhd]")
    p.add_argument("--generations", type=_positive(int), default=None)
    p.add_argument("--degrade-fraction", type=_fraction, default=None)
    p.add_argument("--max-iters", type=_positive(int), default=None, help=f"default {DEFAULT_MAX_ITERS}")
    p.add_argument("--select-iter", type=_positive(int), default=None, help=f"default {DEFAULT_SELECT_ITER}")
    p.add_argument("--gamma-mm", type=_positive(float), default=None, help=f"default {DEFAULT_GAMMA_MM}")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help=f"default {DEFAULT_LAMBDA}")
    p.add_argument("--cutoffs", type=_pair(int), default=None)
    p.add_argument("--branch-detect-threshold", type=_fraction, default=None)
    p.add_argument("--min-island-vox", type=int, default=None)
    p.add_argument("--seed", type=int, required=True)

    p = add("evaluate", "airway metrics of predictions against references")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--ref", nargs="+", required=True)
    p.add_argument("--ref-tree", nargs="+", default=None)
    p.add_argument("--names", nargs="+", default=None)
    p.add_argument("--branch-detect-threshold", type=_fraction, default=DEFAULT_DETECT_THRESHOLD)
    p.add_argument("--csv", default=None, help="write per-case CSV here")
    p.add_argument("--report-dir", default=None, help="write CSV, JSON and a coverage figure here")

    p = add("loss", "Dice, CE, general union, AMC and total loss of a probability volume")
    p.add_argument("--prob", nargs="+", required=True, help="one real32 volume per class, background first")
    p.add_argument("--label", required=True, help="class label volume (0..3)")
    p.add_argument("--weights", default=None, help="optional general-union weight volume")
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--alpha", type=float, default=GUL_ALPHA)
    p.add_argument("--root", type=float, default=GUL_ROOT)
    return parser


def _emit(args, payload: dict, code: int) -> None:
    text = payload.pop("_text", None)
    if args.json:
        doc = {"schema_version": SCHEMA_VERSION, "command": args.command, "exit_code": code, **payload}
        print(json.dumps(doc, indent=2, default=_json_default))
    elif code == EXIT_OK and text is not None:
        print(text)
    elif code == EXIT_OK:
        for k, v in payload.items():
            if k != "outputs" and not isinstance(v, (list, dict)):
                print(f"{k}: {v}")
        for p in payload.get("outputs", []):
            print(f"wrote {p}")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Outputs()
    try:
        payload = COMMANDS[args.command](args, out)
        code = EXIT_OK
    except UsageError as exc:
        print(f"airwaytopo {args.command}: error: {exc}", file=sys.stderr)
        payload, code = {"error": str(exc)}, EXIT_USAGE
    except (ValueError, OSError) as exc:  # unreadable, malformed or unusable input
        if isinstance(exc, FileNotFoundError):
            exc = f"no such file: {exc.filename or exc}"
        print(f"airwaytopo {args.command}: data error: {exc}", file=sys.stderr)
        payload, code = {"error": str(exc)}, EXIT_DATA
    except Exception as exc:  # anything else is a bug or a broken invariant
        log.debug("internal error", exc_info=True)
        print(f"airwaytopo {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        payload, code = {"error": f"{type(exc).__name__}: {exc}"}, EXIT_INTERNAL
    if code != EXIT_OK:
        out.mark_partial()
    payload["outputs"] = out.listing() if code == EXIT_OK else []
    _emit(args, payload, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
