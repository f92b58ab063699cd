"""Censored survival cohorts: time-bin discretization, stratified K-fold
splitting, and a synthetic cohort generator for desk-scale verification.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort_types import PatientRecord  # noqa: F401  (re-export)
from .errors import ConfigurationError, DegenerateCohortError
from .features import FeatureMatrix, Manifest, load_manifest, write_features
from .rng import Rng

DEFAULT_BINS = 4

# Generator internals: exponential event times under a log-linear hazard.
# RISK_GAIN sharpens the risk-to-time coupling so that signal_strength 1.0
# produces a cohort whose ordering is actually learnable at high
# concordance; MONTH_SCALE places times in a months-like range.
RISK_GAIN = 4.0
MONTH_SCALE = 36.0
PATCHES_MIN, PATCHES_MAX = 20, 200


@dataclass
class BinEdges:
    """B-1 strictly increasing interior edges; intervals are right-open and
    everything beyond the last edge falls into bin B-1."""

    edges: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        if self.edges.ndim != 1 or self.edges.size < 1:
            raise ConfigurationError("BinEdges needs at least one edge")
        if not np.all(np.diff(self.edges) > 0):
            raise DegenerateCohortError(f"bin edges must strictly increase, got {self.edges}")

    @property
    def bins(self) -> int:
        return self.edges.size + 1

    def bin_for(self, survival_months: float) -> int:
        return int(np.searchsorted(self.edges, survival_months, side="right"))


def discretize(records, bins: int = DEFAULT_BINS) -> tuple[BinEdges, np.ndarray]:
    """Quantile bin edges from uncensored survival times over the whole
    cohort, then a label for every patient (censored included).

    Edges are the upper B-quantiles of the observed uncensored times
    (exact order statistics, no interpolation), so with times {10,20,30,40}
    and B=4 the edges are {20,30,40} and those patients land in bins
    0,1,2,3.
    """
    records = list(records)
    if bins < 2:
        raise ConfigurationError(f"need at least 2 bins, got {bins}")
    uncensored = np.array([r.survival_months for r in records if not r.censored], dtype=np.float64)
    if np.unique(uncensored).size < bins:
        raise DegenerateCohortError(
            f"need >= {bins} distinct uncensored survival times, "
            f"got {np.unique(uncensored).size}"
        )
    qs = np.arange(1, bins) / bins
    edges = np.quantile(uncensored, qs, method="higher")
    if not np.all(np.diff(edges) > 0):
        raise DegenerateCohortError(
            f"uncensored times too concentrated for {bins} bins (edges {edges})"
        )
    be = BinEdges(edges)
    labels = np.array([be.bin_for(r.survival_months) for r in records], dtype=np.int64)
    return be, labels


def assign_bins(records, edges: BinEdges) -> None:
    for r in records:
        r.bin = edges.bin_for(r.survival_months)


@dataclass
class FoldSplit:
    """Partition of a cohort into K folds, stratified by censoring."""

    k: int
    assignments: dict[str, int]

    def fold_of(self, case_id: str) -> int:
        return self.assignments[case_id]

    def cases_in(self, fold: int) -> list[str]:
        return [c for c, f in self.assignments.items() if f == fold]

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case_id", "fold"])
            for case_id, fold in self.assignments.items():
                writer.writerow([case_id, fold])

    @classmethod
    def load_csv(cls, path) -> "FoldSplit":
        assignments: dict[str, int] = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                assignments[row["case_id"]] = int(row["fold"])
        if not assignments:
            raise ConfigurationError(f"{path}: empty fold split")
        return cls(k=max(assignments.values()) + 1, assignments=assignments)


def split_kfold(records, k: int, rng: Rng) -> FoldSplit:
    """Seeded stratified K-fold assignment.

    Each censoring stratum is shuffled and dealt cyclically onto the folds,
    continuing the deal across strata, so fold sizes differ by at most one
    both within each stratum and overall.
    """
    records = list(records)
    if k < 2:
        raise ConfigurationError(f"K must be >= 2, got {k}")
    if k > len(records):
        raise ConfigurationError(f"K={k} exceeds cohort size {len(records)}")
    assignments: dict[str, int] = {}
    pointer = 0
    for stratum_censored in (False, True):
        ids = [r.case_id for r in records if r.censored == stratum_censored]
        order = rng.permutation(len(ids))
        for idx in order:
            assignments[ids[int(idx)]] = pointer % k
            pointer += 1
    return FoldSplit(k=k, assignments={r.case_id: assignments[r.case_id] for r in records})


# ---------------------------------------------------------------------------
# synthetic cohorts


def _calibrate_censoring(event_times: np.ndarray, u: np.ndarray, fraction: float) -> float:
    """Upper bound c for uniform censoring C = u*c such that exactly
    round(fraction * n) patients are censored (C < T)."""
    n = event_times.size
    target = int(round(fraction * n))
    x = np.sort(event_times / np.maximum(u, 1e-12))[::-1]  # censored iff c < T/u
    if target <= 0:
        return float(x[0] * 1.01)
    if target >= n:
        return float(x[-1] * 0.99)
    return float(0.5 * (x[target - 1] + x[target]))


def synth_cohort(n: int, dim: int, censor_fraction: float, signal_strength: float,
                 rng: Rng, out_dir, extractor_id: str = "synthetic") -> Manifest:
    """Generate a censored survival cohort with MILF feature files.

    Each patient draws a latent risk r ~ N(0,1); event time is exponential
    with rate exp(RISK_GAIN * signal_strength * r), scaled into months.
    Censoring times are independent uniforms whose upper bound is
    calibrated so the realized censored fraction matches the target. Every
    slide gets m ~ U{20..200} patches of N(0, I) noise plus r times a
    fixed unit direction, written under ``out_dir``.
    """
    if n < 20:
        raise ConfigurationError(f"synthetic cohort needs n >= 20, got {n}")
    if not (0.0 <= censor_fraction < 1.0):
        raise ConfigurationError(f"censor_fraction must be in [0, 1), got {censor_fraction}")
    if dim < 1:
        raise ConfigurationError(f"feature dim must be positive, got {dim}")
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    direction = rng.normal(shape=dim)
    direction /= np.linalg.norm(direction)
    risk = rng.normal(shape=n)
    rate = np.exp(RISK_GAIN * signal_strength * risk)
    event_times = MONTH_SCALE * rng.exponential(shape=n) / rate

    if censor_fraction > 0.0:
        u = np.maximum(rng.random(n), 1e-12)
        c_max = _calibrate_censoring(event_times, u, censor_fraction)
        censor_times = u * c_max
        censored = censor_times < event_times
        observed = np.where(censored, censor_times, event_times)
    else:
        censored = np.zeros(n, dtype=bool)
        observed = event_times

    width = len(str(n - 1))
    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "slide_id", "survival_months", "censored", extractor_id])
        for i in range(n):
            case_id = f"synth_{i:0{width}d}"
            m = int(rng.integers(PATCHES_MIN, PATCHES_MAX + 1))
            values = rng.normal(shape=(m, dim)) + risk[i] * direction
            grid_w = int(np.ceil(np.sqrt(m)))
            patch_idx = np.arange(m)
            coords = np.stack([(patch_idx % grid_w) * 256, (patch_idx // grid_w) * 256], axis=1)
            rel = f"features/{case_id}.milf"
            write_features(FeatureMatrix(extractor_id, values.astype(np.float32), coords),
                           out_dir / rel)
            writer.writerow([case_id, f"{case_id}-slide", f"{observed[i]:.6f}",
                             int(censored[i]), rel])
    return load_manifest(manifest_path, out_dir)
