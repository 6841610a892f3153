"""Turning raw results into source spectra.

Three steps cover both grid-based and gridless pipelines: ROI integration
assigns sparse source-parts to labeled regions (leftovers go to the
reserved "noise" label), minimum-distance grouping merges near-coincident
estimated source objects, and truth matching pairs estimates with known
positions for evaluation.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .baseline import SourcePartSet
from .csm import SpectrumEstimate
from .scene import db_from_power

NOISE_LABEL = "noise"


@dataclass(frozen=True)
class Roi:
    """Ellipsoidal region of interest with per-axis radii in meters."""

    center: np.ndarray  # (3,)
    radii: np.ndarray  # (3,) or scalar on input
    label: str

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        radii = np.asarray(self.radii, dtype=float)
        if radii.ndim == 0:
            radii = np.full(3, float(radii))
        radii = radii.reshape(3)
        if np.any(radii <= 0.0):
            raise ValueError(f"ROI {self.label!r}: radii must be > 0")
        if self.label == NOISE_LABEL:
            raise ValueError(f"ROI label {NOISE_LABEL!r} is reserved")
        for name, arr in (("center", center), ("radii", radii)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def normalized_sq_distance(self, points: np.ndarray) -> np.ndarray:
        """sum_axis ((p - c)/r)^2; membership is <= 1."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return np.sum(((points - self.center[None, :]) / self.radii[None, :]) ** 2, axis=1)


@dataclass
class SpectraReport:
    """Per-label source spectra on a common frequency grid.

    Powers are stored linearly in Pa^2/Hz (the reserved "noise" label
    collects unassigned power); :meth:`db` converts on demand. Optional
    ground-truth estimates attach a 1-sigma band per label.
    """

    frequencies: np.ndarray  # (F,)
    powers: dict  # label -> (F,) Pa^2/Hz
    positions: Optional[dict] = None  # label -> (3,) m
    truth: Optional[dict] = None  # label -> SpectrumEstimate
    labels: list = field(init=False)

    def __post_init__(self):
        self.frequencies = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        self.labels = list(self.powers)
        for label, spec in self.powers.items():
            spec = np.atleast_1d(np.asarray(spec, dtype=float))
            if spec.size != self.frequencies.size:
                raise ValueError(f"spectrum {label!r} length mismatch")
            self.powers[label] = spec

    def db(self, label: str) -> np.ndarray:
        return db_from_power(self.powers[label])

    def total_power(self) -> np.ndarray:
        """Per-frequency sum over all labels including noise."""
        return np.sum([self.powers[lbl] for lbl in self.labels], axis=0)

    def to_csv(self, path) -> None:
        cols = [f"Q_{lbl}_db_per_hz" for lbl in self.labels]
        truth_cols = []
        if self.truth:
            for lbl in self.truth:
                truth_cols += [f"Q_truth_{lbl}_db_per_hz", f"sigma_truth_{lbl}_pa2_per_hz"]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# spectra v1\n")
            fh.write(",".join(["f_hz"] + cols + truth_cols) + "\n")
            for fi in range(self.frequencies.size):
                row = [f"{self.frequencies[fi]:.17g}"]
                for lbl in self.labels:
                    row.append(f"{db_from_power(float(self.powers[lbl][fi])):.17g}")
                if self.truth:
                    for lbl in self.truth:
                        est = self.truth[lbl]
                        row.append(f"{db_from_power(float(est.mean[fi])):.17g}")
                        row.append(f"{float(est.std[fi]):.17g}")
                fh.write(",".join(row) + "\n")

    def to_json(self, path) -> None:
        doc = {
            "frequencies_hz": [float(v) for v in self.frequencies],
            "spectra_pa2_per_hz": {
                lbl: [float(v) for v in spec] for lbl, spec in self.powers.items()
            },
        }
        if self.positions:
            doc["positions_m"] = {
                lbl: [float(v) for v in pos] for lbl, pos in self.positions.items()
            }
        if self.truth:
            doc["truth_pa2_per_hz"] = {
                lbl: {"mean": [float(v) for v in est.mean], "std": [float(v) for v in est.std]}
                for lbl, est in self.truth.items()
            }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)


def roi_integrate(parts: SourcePartSet, rois, frequencies=None) -> SpectraReport:
    """Integrate source-parts into per-ROI spectra.

    A part inside at least one ROI is assigned to the ROI with the smallest
    normalized center distance; parts outside every ROI accumulate under
    the reserved "noise" label. Total power is conserved exactly.
    """
    rois = list(rois)
    labels = [roi.label for roi in rois]
    if len(set(labels)) != len(labels):
        raise ValueError("ROI labels must be unique")
    if frequencies is None:
        frequencies = np.unique(parts.frequencies)
    frequencies = np.atleast_1d(np.asarray(frequencies, dtype=float))
    f_pos = np.searchsorted(frequencies, parts.frequencies)
    if np.any(f_pos >= frequencies.size) or np.any(
        frequencies[np.minimum(f_pos, frequencies.size - 1)] != parts.frequencies
    ):
        raise ValueError("a source-part frequency is missing from the report grid")
    powers = {lbl: np.zeros(frequencies.size) for lbl in labels}
    powers[NOISE_LABEL] = np.zeros(frequencies.size)
    if len(parts):
        dists = np.stack(
            [roi.normalized_sq_distance(parts.positions) for roi in rois], axis=1
        ) if rois else np.empty((len(parts), 0))
        for p in range(len(parts)):
            inside = np.flatnonzero(dists[p] <= 1.0)
            label = labels[inside[np.argmin(dists[p, inside])]] if inside.size else NOISE_LABEL
            powers[label][f_pos[p]] += parts.powers[p]
    return SpectraReport(frequencies, powers)


def group_sources(sources, frequencies, min_distance: float,
                  neglect_below_db=None) -> SpectraReport:
    """Single-linkage grouping of source objects at a distance threshold.

    Sources closer than ``min_distance`` (transitively) form one group;
    group spectra are per-frequency sums of the members' total pole powers
    and group positions are power-weighted centroids.

    ``neglect_below_db`` optionally routes groups whose total integrated
    power sits at least that many dB below the strongest group into the
    reserved "noise" label (overestimated fits leave near-silent leftover
    sources at arbitrary positions; they carry no usable spectrum but
    their residual power is still conserved).
    """
    if min_distance <= 0.0:
        raise ValueError("min_distance must be > 0")
    n = len(sources)
    frequencies = np.atleast_1d(np.asarray(frequencies, dtype=float))
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.linalg.norm(sources[i].position - sources[j].position))
            if d < min_distance:
                parent[find(i)] = find(j)
    members: dict = {}
    for i in range(n):
        members.setdefault(find(i), []).append(i)
    groups = sorted(members.values(), key=min)
    specs = []
    centroids = []
    for idx in groups:
        spec = np.zeros(frequencies.size)
        weights = []
        for i in idx:
            total = sources[i].total_power()
            spec += total
            weights.append(float(np.sum(total)))
        weights = np.asarray(weights)
        pos = np.stack([sources[i].position for i in idx])
        if weights.sum() > 0.0:
            centroids.append((weights[:, None] * pos).sum(axis=0) / weights.sum())
        else:
            centroids.append(pos.mean(axis=0))
        specs.append(spec)
    keep = [True] * len(groups)
    if neglect_below_db is not None and specs:
        totals = np.array([float(np.sum(s)) for s in specs])
        cutoff = totals.max() * 10.0 ** (-float(neglect_below_db) / 10.0)
        keep = [t > cutoff for t in totals]
    powers = {}
    positions = {}
    noise = np.zeros(frequencies.size)
    label = 0
    for kept, spec, centroid in zip(keep, specs, centroids):
        if kept:
            powers[f"g{label}"] = spec
            positions[f"g{label}"] = centroid
            label += 1
        else:
            noise += spec
    if neglect_below_db is not None:
        powers[NOISE_LABEL] = noise
    return SpectraReport(frequencies, powers, positions=positions)


def group_source_objects(fit, min_distance: float, neglect_below_db=None) -> SpectraReport:
    """Group a fit's decoded source objects; see :func:`group_sources`."""
    return group_sources(fit.sources, fit.frequencies, min_distance,
                         neglect_below_db=neglect_below_db)


@dataclass(frozen=True)
class MatchResult:
    """One-to-one assignment of estimated to true positions."""

    pairs: tuple  # ((est_index, true_index), ...)
    distances: np.ndarray  # per pair
    unmatched_estimated: tuple
    unmatched_true: tuple

    @property
    def total_distance(self) -> float:
        return float(np.sum(self.distances))


def match_to_truth(estimated_positions, true_positions) -> MatchResult:
    """Distance-minimizing assignment between estimated and true positions.

    Solves the rectangular assignment problem on Euclidean distances; with
    more estimates than truths the leftovers are flagged as unmatched (and
    vice versa). Used for evaluation only.
    """
    est = np.atleast_2d(np.asarray(estimated_positions, dtype=float)).reshape(-1, 3)
    true = np.atleast_2d(np.asarray(true_positions, dtype=float)).reshape(-1, 3)
    if est.shape[0] == 0 or true.shape[0] == 0:
        return MatchResult(
            (), np.empty(0), tuple(range(est.shape[0])), tuple(range(true.shape[0]))
        )
    cost = np.linalg.norm(est[:, None, :] - true[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple((int(r), int(c)) for r, c in zip(rows, cols))
    distances = cost[rows, cols]
    unmatched_est = tuple(sorted(set(range(est.shape[0])) - set(rows.tolist())))
    unmatched_true = tuple(sorted(set(range(true.shape[0])) - set(cols.tolist())))
    return MatchResult(pairs, distances, unmatched_est, unmatched_true)
