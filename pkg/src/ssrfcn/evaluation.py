"""Presentation-attack metrics, video aggregation and evaluation protocols.

Spoof is the positive class and a sample is called spoof iff its score is
``>= threshold``.  All rates are computed at video level.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import SampleRecord
from .errors import ProtocolError, UndefinedMetricError

DECISION_THRESHOLD = 0.5
DEFAULT_FDR = 0.02


@dataclass
class ScoreSet:
    video_ids: list[str]
    scores: np.ndarray
    labels: np.ndarray  # 0 live, 1 spoof
    spoof_types: list[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.video_ids) == len(self.scores) == len(self.labels) == len(self.spoof_types)):
            raise ValueError("ScoreSet fields must have equal length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @property
    def live_scores(self) -> np.ndarray:
        return self.scores[self.labels == 0]

    @property
    def spoof_scores(self) -> np.ndarray:
        return self.scores[self.labels == 1]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int


def aggregate_video(frame_scores) -> float:
    frame_scores = np.asarray(frame_scores, dtype=np.float64)
    if frame_scores.size == 0:
        raise ValueError("cannot aggregate an empty list of frame scores")
    return float(frame_scores.mean())


def video_scores(records: Sequence[SampleRecord], frame_scores) -> ScoreSet:
    """Temporal mean of frame scores per video, in order of first appearance."""
    groups: OrderedDict[str, list[float]] = OrderedDict()
    meta: dict[str, SampleRecord] = {}
    for rec, s in zip(records, frame_scores, strict=True):
        groups.setdefault(rec.video_id, []).append(float(s))
        first = meta.setdefault(rec.video_id, rec)
        if (first.label, first.spoof_type) != (rec.label, rec.spoof_type):
            raise ProtocolError(f"video {rec.video_id} mixes labels or spoof types")
    vids = list(groups)
    return ScoreSet(
        vids,
        np.array([aggregate_video(groups[v]) for v in vids]),
        np.array([meta[v].y for v in vids]),
        [meta[v].spoof_type for v in vids],
    )


def confusion(scores, labels, threshold: float = DECISION_THRESHOLD) -> ConfusionCounts:
    scores, labels = np.asarray(scores), np.asarray(labels)
    pred = scores >= threshold
    spoof = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & spoof)),
        tn=int(np.sum(~pred & ~spoof)),
        fp=int(np.sum(pred & ~spoof)),
        fn=int(np.sum(~pred & spoof)),
    )


def apcer_bpcer(counts: ConfusionCounts) -> tuple[float, float]:
    if counts.fn + counts.tp == 0:
        raise UndefinedMetricError("APCER is undefined without attack presentations")
    if counts.fp + counts.tn == 0:
        raise UndefinedMetricError("BPCER is undefined without bona fide presentations")
    return counts.fn / (counts.fn + counts.tp), counts.fp / (counts.fp + counts.tn)


def acer(per_type_apcer: dict[str, float], bpcer: float) -> float:
    """Worst per-type APCER averaged with BPCER."""
    if not per_type_apcer:
        raise ValueError("ACER needs at least one spoof type")
    return (max(per_type_apcer.values()) + bpcer) / 2.0


def hter(fdr: float, frr: float) -> float:
    return (fdr + frr) / 2.0


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    lives, spoofs = scores[labels == 0], scores[labels == 1]
    if len(lives) == 0 or len(spoofs) == 0:
        raise UndefinedMetricError("metric needs both live and spoof samples")
    return np.sort(lives), np.sort(spoofs)


def eer(scores, labels) -> tuple[float, float]:
    """Equal error rate by sweeping midpoints between consecutive distinct scores.

    Also tries one threshold below the minimum and one above the maximum.
    Picks the threshold minimizing |APCER - BPCER| (smallest on ties) and
    returns ``(mean of the two rates there, threshold)``.
    """
    lives, spoofs = _split(scores, labels)
    u = np.unique(np.concatenate([lives, spoofs]))
    thresholds = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])
    n_l, n_s = len(lives), len(spoofs)
    missed = np.searchsorted(spoofs, thresholds, side="left")  # spoofs < t
    false_alarms = n_l - np.searchsorted(lives, thresholds, side="left")  # lives >= t
    # compare |missed/n_s - false_alarms/n_l| exactly in integers
    gap = np.abs(missed * n_l - false_alarms * n_s)
    k = int(np.argmin(gap))
    return (missed[k] / n_s + false_alarms[k] / n_l) / 2.0, float(thresholds[k])


def tdr_threshold(scores, labels, fdr_target: float = DEFAULT_FDR) -> float:
    """Smallest live score ``t`` with frac(lives >= t) <= fdr_target.

    When no live score qualifies, the threshold sits just above the largest
    live score.
    """
    lives, _ = _split(scores, labels)
    n_l = len(lives)
    u = np.unique(lives)
    frac = (n_l - np.searchsorted(lives, u, side="left")) / n_l
    ok = np.flatnonzero(frac <= fdr_target)
    if len(ok):
        return float(u[ok[0]])
    return float(np.nextafter(lives[-1], np.inf))


def tdr_at_fdr(scores, labels, fdr_target: float = DEFAULT_FDR) -> float:
    """Fraction of spoofs detected at the :func:`tdr_threshold` operating point."""
    t = tdr_threshold(scores, labels, fdr_target)
    _, spoofs = _split(scores, labels)
    return float(np.sum(spoofs >= t) / len(spoofs))


def threshold_metrics(ss: ScoreSet, threshold: float = DECISION_THRESHOLD, fdr_target: float = DEFAULT_FDR) -> dict:
    """ACER/APCER/BPCER/HTER at ``threshold`` plus EER and TDR@FDR."""
    lives = ss.labels == 0
    bpcer = float(np.mean(ss.scores[lives] >= threshold)) if lives.any() else float("nan")
    per_type = {}
    for t in dict.fromkeys(s for s, y in zip(ss.spoof_types, ss.labels) if y == 1):
        sel = np.array([st == t for st in ss.spoof_types]) & (ss.labels == 1)
        per_type[t], _ = apcer_bpcer(confusion(ss.scores[sel | lives], ss.labels[sel | lives], threshold))
    counts = confusion(ss.scores, ss.labels, threshold)
    apcer_all, bpcer = apcer_bpcer(counts)
    e, e_t = eer(ss.scores, ss.labels)
    return {
        "apcer": max(per_type.values()),
        "bpcer": bpcer,
        "acer": acer(per_type, bpcer),
        "eer": e,
        "eer_threshold": e_t,
        "tdr": tdr_at_fdr(ss.scores, ss.labels, fdr_target),
        "hter": hter(bpcer, apcer_all),
        "per_type_apcer": per_type,
    }


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

LEAVE_ONE_SPOOF_OUT = "leave_one_spoof_out"
KNOWN_SPLIT = "known_split"
CROSS_DATASET = "cross_dataset"
SUMMARY_METRICS = ("apcer", "bpcer", "acer", "eer", "tdr", "hter")


@dataclass
class ProtocolSpec:
    kind: str = LEAVE_ONE_SPOOF_OUT
    live_train_fraction: float = 0.8
    train_fraction: float = 0.6
    held_out: str | None = None
    seed: int = 0
    threshold: float = DECISION_THRESHOLD
    fdr_target: float = DEFAULT_FDR

    def __post_init__(self):
        if self.kind not in (LEAVE_ONE_SPOOF_OUT, KNOWN_SPLIT, CROSS_DATASET):
            raise ProtocolError(f"unknown protocol kind {self.kind!r}")
        for name in ("live_train_fraction", "train_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ProtocolError(f"{name} must lie in (0, 1)")


@dataclass
class Split:
    name: str
    train: list[SampleRecord]
    test: list[SampleRecord]


def _check_tags(records):
    for r in records:
        if not r.spoof_type or not r.subject_id or not r.video_id:
            raise ProtocolError(f"record {r.image_path} is missing spoof_type/subject_id/video_id")


def check_subject_disjoint(split: Split) -> None:
    overlap = {r.subject_id for r in split.train} & {r.subject_id for r in split.test}
    if overlap:
        raise ProtocolError(f"{split.name}: subjects {sorted(overlap)[:5]} appear in train and test")


def _partition_subjects(subjects: list[str], fraction: float, rng) -> tuple[set, set]:
    subjects = sorted(set(subjects))
    order = rng.permutation(len(subjects))
    n_train = int(round(fraction * len(subjects)))
    n_train = min(max(n_train, 1), len(subjects) - 1) if len(subjects) > 1 else len(subjects)
    train = {subjects[i] for i in order[:n_train]}
    return train, set(subjects) - train


def spoof_types_in(records) -> list[str]:
    return list(dict.fromkeys(r.spoof_type for r in records if r.label == "spoof"))


def leave_one_spoof_out_splits(records, spec: ProtocolSpec) -> list[Split]:
    """One cell per spoof type: train on the others plus most lives, test on it.

    Any training record that shares a subject with the test cell is dropped.
    """
    rng = np.random.default_rng(spec.seed)
    live_train_subj, live_test_subj = _partition_subjects(
        [r.subject_id for r in records if r.label == "live"], spec.live_train_fraction, rng
    )
    types = spoof_types_in(records)
    if spec.held_out is not None:
        if spec.held_out not in types:
            raise ProtocolError(f"held-out spoof type {spec.held_out!r} not in manifest")
        types = [spec.held_out]
    splits = []
    for t in types:
        test = [r for r in records
                if (r.label == "spoof" and r.spoof_type == t)
                or (r.label == "live" and r.subject_id in live_test_subj)]
        test_subjects = {r.subject_id for r in test}
        train = [r for r in records
                 if r.subject_id not in test_subjects
                 and ((r.label == "spoof" and r.spoof_type != t)
                      or (r.label == "live" and r.subject_id in live_train_subj))]
        splits.append(Split(t, train, test))
    return splits


def known_split(records, spec: ProtocolSpec, name: str = "known") -> Split:
    rng = np.random.default_rng(spec.seed)
    train_subj, _ = _partition_subjects([r.subject_id for r in records], spec.train_fraction, rng)
    train = [r for r in records if r.subject_id in train_subj]
    test = [r for r in records if r.subject_id not in train_subj]
    return Split(name, train, test)


def _check_split(split: Split) -> None:
    check_subject_disjoint(split)
    for part, recs in (("train", split.train), ("test", split.test)):
        labels = {r.label for r in recs}
        if labels != {"live", "spoof"}:
            raise ProtocolError(f"{split.name}: {part} partition lacks {({'live', 'spoof'} - labels) or 'data'}")


Trainer = Callable[[list[SampleRecord], int], Callable[[list[SampleRecord]], np.ndarray]]


@dataclass
class ProtocolReport:
    kind: str
    rows: list[dict] = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "flags": self.flags, "cells": self.rows,
                "mean": self.mean, "std": self.std}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self, metrics: Sequence[str] = ("apcer", "bpcer", "acer", "eer", "tdr")) -> str:
        """Fixed-width text table, metrics in percent."""
        names = [r["cell"] for r in self.rows] + ["Mean ± Std."]
        width = max(12, max(len(n) for n in names) + 2)
        head = "Cell".ljust(width) + "".join(m.upper().rjust(16) for m in metrics)
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(r["cell"].ljust(width) + "".join(f"{100 * r[m]:16.1f}" for m in metrics))
        if self.rows:
            lines.append("Mean ± Std.".ljust(width) + "".join(
                f"{f'{100 * self.mean[m]:.1f} ± {100 * self.std[m]:.1f}':>16}" for m in metrics))
        for f in self.flags:
            lines.append(f"note: {f}")
        return "\n".join(lines) + "\n"


def _summarize(report: ProtocolReport) -> None:
    for m in SUMMARY_METRICS:
        vals = np.array([r[m] for r in report.rows], dtype=np.float64)
        report.mean[m] = float(vals.mean())
        report.std[m] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0


def cell_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def evaluate_split(split: Split, scorer, spec: ProtocolSpec) -> dict:
    ss = video_scores(split.test, scorer(split.test))
    row = {"cell": split.name, "n_train": len(split.train), "n_test": len(split.test),
           "n_test_videos": len(ss.video_ids)}
    row.update(threshold_metrics(ss, spec.threshold, spec.fdr_target))
    return row


def protocol_splits(spec: ProtocolSpec, datasets: Sequence[Sequence[SampleRecord]]) -> tuple[list[Split], list[str]]:
    flags = []
    for ds in datasets:
        _check_tags(ds)
    if spec.kind == CROSS_DATASET:
        if len(datasets) != 2:
            raise ProtocolError("cross-dataset evaluation needs a training and a testing manifest")
        splits = [Split("cross", list(datasets[0]), list(datasets[1]))]
    else:
        if len(datasets) != 1:
            raise ProtocolError(f"{spec.kind} takes exactly one manifest")
        records = list(datasets[0])
        if spec.kind == KNOWN_SPLIT:
            splits = [known_split(records, spec)]
        elif len(spoof_types_in(records)) == 1:
            flags.append("only one spoof type: leave-one-spoof-out degenerates to a known split")
            splits = [known_split(records, spec, name=spoof_types_in(records)[0])]
        else:
            splits = leave_one_spoof_out_splits(records, spec)
    for s in splits:
        if spec.kind == CROSS_DATASET:
            for part, recs in (("train", s.train), ("test", s.test)):
                if {r.label for r in recs} != {"live", "spoof"}:
                    raise ProtocolError(f"cross-dataset {part} manifest needs both classes")
        else:
            _check_split(s)
    return splits, flags


def run_protocol(spec: ProtocolSpec, trainer: Trainer, datasets: Sequence[Sequence[SampleRecord]]) -> ProtocolReport:
    """Train one model per cell with ``trainer(train_records, seed)`` and score its test cell.

    ``trainer`` returns a scorer mapping records to frame-level spoofness.
    """
    splits, flags = protocol_splits(spec, datasets)
    report = ProtocolReport(spec.kind, flags=flags)
    for i, split in enumerate(splits):
        scorer = trainer(split.train, cell_seed(spec.seed, i))
        report.rows.append(evaluate_split(split, scorer, spec))
    _summarize(report)
    return report
