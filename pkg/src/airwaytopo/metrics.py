"""Airway evaluation: tree length detected, branches detected, precision, Dice, sensitivity, specificity."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .skeleton import SkeletonTree, skeleton_length_inside, skeletonize
from .volume import Volume, as_binary, check_same_grid

DEFAULT_DETECT_THRESHOLD = 0.8
PERCENT_FIELDS = (
    "bd_pct",
    "tld_pct",
    "precision_pct",
    "dsc_pct",
    "sensitivity_pct",
    "specificity_pct",
)
CSV_FIELDS = (
    "case",
    *PERCENT_FIELDS,
    "n_branches_ref",
    "n_branches_detected",
    "total_length_mm",
    "detected_length_mm",
    "branch_detect_threshold",
)


@dataclass
class BranchDetail:
    branch_id: int
    generation: int
    covered_fraction: float
    detected: bool


@dataclass
class EvalReport:
    bd_pct: float | None
    tld_pct: float | None
    precision_pct: float | None
    dsc_pct: float | None
    sensitivity_pct: float | None
    specificity_pct: float | None
    n_branches_ref: int
    n_branches_detected: int
    total_length_mm: float
    detected_length_mm: float
    branch_detect_threshold: float = DEFAULT_DETECT_THRESHOLD
    per_branch: list[BranchDetail] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self, case: str = "") -> dict:
        d = {k: getattr(self, k) for k in CSV_FIELDS if k != "case"}
        d["case"] = case
        return d


def _pct(num: float, den: float) -> float | None:
    return None if den == 0 else 100.0 * num / den


def evaluate(
    pred,
    ref,
    ref_tree: SkeletonTree | None = None,
    branch_detect_threshold: float = DEFAULT_DETECT_THRESHOLD,
) -> EvalReport:
    """Compare a predicted airway mask with a reference mask and its centerline tree.

    A branch counts as detected when at least ``branch_detect_threshold`` of
    its own centerline voxels (the junction voxel shared with the parent is
    excluded) lie inside the prediction. Undefined ratios are None.
    """
    if isinstance(pred, Volume) and isinstance(ref, Volume):
        check_same_grid(pred, ref)
    p, r = as_binary(pred), as_binary(ref)
    if p.shape != r.shape:
        raise ValueError(f"grid mismatch: {p.shape} vs {r.shape}")
    if not r.any():
        raise ValueError("reference mask is empty")
    if not 0.0 < branch_detect_threshold <= 1.0:
        raise ValueError("branch_detect_threshold must lie in (0, 1]")
    if ref_tree is None:
        ref_tree = skeletonize(ref if isinstance(ref, Volume) else Volume(r.astype(np.uint8)))

    covered = skeleton_length_inside(ref_tree, p)
    per_branch = []
    for b in ref_tree.branches:
        own = b.own_voxels
        frac = float(p[tuple(own.T)].mean()) if len(own) else 0.0
        per_branch.append(BranchDetail(b.id, b.generation, frac, frac >= branch_detect_threshold - 1e-12))
    n_det = sum(bd.detected for bd in per_branch)
    # same summation for both so a perfect prediction scores exactly 100
    total = float(skeleton_length_inside(ref_tree, np.ones_like(p)).sum())
    detected = float(covered.sum())

    tp = int(np.count_nonzero(p & r))
    npred, nref = int(p.sum()), int(r.sum())
    tn = int(np.count_nonzero(~p & ~r))
    return EvalReport(
        bd_pct=_pct(n_det, len(per_branch)),
        tld_pct=_pct(detected, total) if total > 0 else _pct(n_det, len(per_branch)),
        precision_pct=_pct(tp, npred),
        dsc_pct=_pct(2 * tp, npred + nref),
        sensitivity_pct=_pct(tp, nref),
        specificity_pct=_pct(tn, r.size - nref),
        n_branches_ref=len(per_branch),
        n_branches_detected=n_det,
        total_length_mm=total,
        detected_length_mm=detected,
        branch_detect_threshold=float(branch_detect_threshold),
        per_branch=per_branch,
    )


@dataclass
class CorpusReport:
    cases: list[tuple[str, EvalReport]]
    mean: dict[str, float | None]
    std: dict[str, float | None]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "cases": [{"case": name, **rep.to_dict()} for name, rep in self.cases],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        return reports_to_csv(self.cases)

    def summary(self) -> dict[str, str]:
        """``mean ± std`` strings per percentage metric."""
        out = {}
        for k in PERCENT_FIELDS:
            m, s = self.mean[k], self.std[k]
            out[k] = "n/a" if m is None else f"{m:.1f} ± {s:.1f}"
        return out


def evaluate_corpus(cases, names=None, **kwargs) -> CorpusReport:
    """Evaluate ``(pred, ref)`` or ``(pred, ref, ref_tree)`` tuples; mean and sample std per metric."""
    cases = list(cases)
    if not cases:
        raise ValueError("empty corpus")
    names = list(names) if names is not None else [f"case{i:03d}" for i in range(len(cases))]
    reports = []
    for case in cases:
        if isinstance(case, EvalReport):
            reports.append(case)
            continue
        pred, ref, *rest = case
        reports.append(evaluate(pred, ref, rest[0] if rest else None, **kwargs))
    return aggregate(list(zip(names, reports)))


def aggregate(named_reports: list[tuple[str, EvalReport]]) -> CorpusReport:
    mean, std = {}, {}
    for k in PERCENT_FIELDS + ("total_length_mm", "detected_length_mm"):
        vals = [getattr(r, k) for _, r in named_reports if getattr(r, k) is not None]
        if not vals:
            mean[k] = std[k] = None
            continue
        mean[k] = float(np.mean(vals))
        std[k] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return CorpusReport(named_reports, mean, std)


def reports_to_csv(named_reports) -> str:
    """Flat CSV, one row per case, columns in ``CSV_FIELDS`` order; undefined values are empty."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for name, rep in named_reports:
        row = rep.row(name)
        writer.writerow({k: "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def coverage_by_generation(report: EvalReport) -> dict[int, float]:
    """Fraction of reference branches detected at each generation."""
    gens: dict[int, list[bool]] = {}
    for b in report.per_branch:
        gens.setdefault(b.generation, []).append(b.detected)
    return {g: float(np.mean(v)) for g, v in sorted(gens.items())}

