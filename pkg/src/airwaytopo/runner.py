"""File-driven self-learning runs.

A run is described by an INI file with a single ``[run]`` section::

    [run]
    out_dir = runs/demo
    # either synthetic phantoms ...
    phantoms = 10
    generations = 6
    degrade_fraction = 0.3
    # ... or case directories holding ct.mhd, ref.mhd and optionally gt.mhd
    # cases = data/case01, data/case02
    seed = 0
    max_iters = 5
    select_iter = 3
    gamma_mm = 5.0
    lambda = 0.25
    cutoffs = 1, 3
    branch_detect_threshold = 0.8
    min_island_vox = 5

Outputs: ``iter_NN/`` with the snapshot, per-case pseudo-label masks and
centerline trees, ``report.csv`` and ``report.json``; a top-level
``run_manifest.json``, ``trend.csv`` and two PNG figures.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .anatomy import DEFAULT_CUTOFFS
from .breakage import DEFAULT_GAMMA_MM, connect_geometric
from .losses import DEFAULT_LAMBDA
from .metrics import DEFAULT_DETECT_THRESHOLD, aggregate, reports_to_csv
from .phantom import PhantomSpec
from .pipeline import (
    DEFAULT_MAX_ITERS,
    DEFAULT_SELECT_ITER,
    MIN_ISLAND_VOX,
    Case,
    SelfLearningResult,
    iterate_self_learning,
    phantom_cases,
)
from .plotting import plot_generation_coverage, plot_iteration_trend
from .segmenter import ClassicalSegmenter
from .skeleton import skeletonize
from .volume import read_volume, write_volume

SCHEMA_VERSION = 1


@dataclass
class RunConfig:
    out_dir: str = "run"
    seed: int = 0
    phantoms: int = 0
    generations: int = 6
    degrade_fraction: float = 0.3
    cases: list[str] = field(default_factory=list)
    max_iters: int = DEFAULT_MAX_ITERS
    select_iter: int = DEFAULT_SELECT_ITER
    gamma_mm: float = DEFAULT_GAMMA_MM
    lam: float = DEFAULT_LAMBDA
    cutoffs: tuple[int, int] = DEFAULT_CUTOFFS
    branch_detect_threshold: float = DEFAULT_DETECT_THRESHOLD
    min_island_vox: int = MIN_ISLAND_VOX

    def validate(self) -> None:
        if bool(self.phantoms) == bool(self.cases):
            raise ValueError("set exactly one of 'phantoms' (> 0) or 'cases'")
        if self.phantoms < 0:
            raise ValueError("phantoms must be >= 0")
        if self.max_iters < 1 or self.select_iter < 1:
            raise ValueError("max_iters and select_iter must be >= 1")
        if self.gamma_mm <= 0:
            raise ValueError("gamma_mm must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 <= self.cutoffs[0] <= self.cutoffs[1]:
            raise ValueError("cutoffs must satisfy 0 <= g_LM <= g_MS")
        if not 0 <= self.degrade_fraction <= 1:
            raise ValueError("degrade_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        """Run parameters; ``out_dir`` is left out so relocated runs compare equal."""
        d = asdict(self)
        d.pop("out_dir")
        d["lambda"] = d.pop("lam")
        d["cutoffs"] = list(self.cutoffs)
        return d


def load_run_config(path) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not parser.read(path):
        raise FileNotFoundError(path)
    if "run" not in parser:
        raise ValueError(f"{path}: missing [run] section")
    sec = parser["run"]
    known = set(RunConfig.__dataclass_fields__) - {"lam"} | {"lambda"}
    unknown = set(sec) - known
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    d = RunConfig()
    cfg = RunConfig(
        out_dir=sec.get("out_dir", d.out_dir),
        seed=sec.getint("seed", d.seed),
        phantoms=sec.getint("phantoms", d.phantoms),
        generations=sec.getint("generations", d.generations),
        degrade_fraction=sec.getfloat("degrade_fraction", d.degrade_fraction),
        cases=[c.strip() for c in sec.get("cases", "").split(",") if c.strip()],
        max_iters=sec.getint("max_iters", d.max_iters),
        select_iter=sec.getint("select_iter", d.select_iter),
        gamma_mm=sec.getfloat("gamma_mm", d.gamma_mm),
        lam=sec.getfloat("lambda", d.lam),
        cutoffs=tuple(int(x) for x in sec.get("cutoffs", "1, 3").split(",")),
        branch_detect_threshold=sec.getfloat("branch_detect_threshold", d.branch_detect_threshold),
        min_island_vox=sec.getint("min_island_vox", d.min_island_vox),
    )
    if len(cfg.cutoffs) != 2:
        raise ValueError("cutoffs needs two integers")
    cfg.validate()
    return cfg


def load_cases(dirs) -> list[Case]:
    cases = []
    for d in dirs:
        d = Path(d)
        gt_path = d / "gt.mhd"
        cases.append(Case(d.name, read_volume(d / "ct.mhd"), read_volume(d / "ref.mhd"),
                          read_volume(gt_path) if gt_path.exists() else None))
    return cases


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def run_self_learning(cfg: RunConfig, threads: int = 1, connector=connect_geometric) -> SelfLearningResult:
    """Run the loop described by ``cfg`` and write every artifact under ``cfg.out_dir``.

    ``threads`` only changes speed; outputs are identical for any value.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.phantoms:
        spec = PhantomSpec(generations=cfg.generations)
        cases = phantom_cases(cfg.phantoms, cfg.seed, cfg.degrade_fraction, spec)
    else:
        cases = load_cases(cfg.cases)
    names = [c.name for c in cases]
    segmenter = ClassicalSegmenter(cutoffs=cfg.cutoffs, seed=cfg.seed)

    def save_iteration(state, snap):
        d = out / f"iter_{state.index:02d}"
        (d / "pseudo").mkdir(parents=True, exist_ok=True)
        snap.save(d / "snapshot.json")
        for name, label in zip(names, state.pseudo_labels):
            write_volume(label, d / "pseudo" / f"{name}.mhd")
            skeletonize(label).save(d / "pseudo" / f"{name}_tree.json")
        named = list(zip(names, state.reports))
        with open(d / "report.csv", "w", newline="") as fh:
            fh.write(reports_to_csv(named))
        _write_json(d / "report.json", {"schema_version": SCHEMA_VERSION, **state.summary(),
                                         **{"cases": aggregate(named).to_dict()["cases"]}})

    res = iterate_self_learning(
        cases,
        segmenter,
        connector,
        max_iters=cfg.max_iters,
        select_iter=cfg.select_iter,
        gamma_mm=cfg.gamma_mm,
        lam=cfg.lam,
        branch_detect_threshold=cfg.branch_detect_threshold,
        min_island_vox=cfg.min_island_vox,
        threads=threads,
        on_iteration=save_iteration,
    )
    res.config = cfg.to_dict()
    summaries = [it.summary() for it in res.iterations]
    _write_json(out / "run_manifest.json", {
        "schema_version": SCHEMA_VERSION,
        "config": res.config,
        "cases": names,
        "iterations": summaries,
        "selected_iter": res.selected_index,
        "selected_snapshot": getattr(res.selected, "id", None),
        "error": res.error,
    })
    with open(out / "trend.csv", "w", newline="") as fh:
        fh.write(trend_csv(summaries))
    if summaries:
        plot_iteration_trend(summaries, out / "trend.png", res.selected_index)
        sel = res.iterations[res.selected_index - 1]
        plot_generation_coverage(pooled_generation_coverage(sel.reports), out / "generation_coverage.png",
                                 f"iteration {sel.index}")
    return res


def trend_csv(summaries: list[dict]) -> str:
    fields = ["iteration", "snapshot", "tld_pct", "bd_pct", "precision_pct", "dsc_pct",
              "sensitivity_pct", "mean_total_loss"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for s in summaries:
        m = s["mean"]
        w.writerow([s["iteration"], s["snapshot"]]
                   + [f"{m[k]:.6f}" if m[k] is not None else "" for k in fields[2:-1]]
                   + [f"{s['mean_total_loss']:.6f}" if s["mean_total_loss"] is not None else ""])
    return buf.getvalue()


def pooled_generation_coverage(reports) -> dict[int, float]:
    """Detection rate per generation, pooled over all cases' branches."""
    hits: dict[int, list[int]] = {}
    for rep in reports:
        for b in rep.per_branch:
            h = hits.setdefault(b.generation, [0, 0])
            h[0] += b.detected
            h[1] += 1
    return {g: h[0] / h[1] for g, h in sorted(hits.items())}
