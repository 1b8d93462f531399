"""Scoring verdicts against ground truth, threshold sweeps, before/after comparison."""

from __future__ import annotations

import csv
import enum
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Dict, Iterable, List, Mapping, Optional, Sequence

from .alerts import AlertRecord, to_alarm
from .correlator import Classification, CorrelatorConfig, Reason
from .oad import OadModel
from .pipeline import cached_scorer, run_filter
from .traffic import HomeNet, Host, Packet

logger = logging.getLogger(__name__)


class Label(str, enum.Enum):
    ATTACK = "Attack"
    BENIGN = "Benign"


class ConsistencyError(ValueError):
    """Verdicts and ground truth disagree about which alarms exist."""


@dataclass
class GroundTruth:
    labels: Dict[str, Label]
    total_packets: int = 0
    attack_instances: int = 0
    # alarm id -> attack instance id; alarms missing here count as their own instance
    instances: Dict[str, str] = field(default_factory=dict)

    def instance_of(self, alarm_id: str) -> str:
        return self.instances.get(alarm_id, alarm_id)


@dataclass
class MetricsReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    detection_rate: float = 0.0
    fp_rate: float = 0.0
    completeness: float = 0.0
    accuracy: float = 0.0
    detected_instances: int = 0
    attack_instances: int = 0
    total_packets: int = 0
    undefined: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        names = cls.__dataclass_fields__.keys()
        return cls(**{k: d[k] for k in names if k in d})


def _ratio(num: float, den: float, name: str, undefined: List[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def _fields(v):
    if isinstance(v, Mapping):
        return str(v["alarm_id"]), Classification(v["classification"])
    return v.alarm_id, Classification(v.classification)


def compute_metrics(verdicts: Iterable, truth: GroundTruth) -> MetricsReport:
    """Confusion counts and rates; zero denominators give 0 and are listed in ``undefined``."""
    tp = fp = fn = tn = 0
    detected = set()
    for v in verdicts:
        alarm_id, cls = _fields(v)
        if alarm_id not in truth.labels:
            raise ConsistencyError(f"verdict for unknown alarm {alarm_id!r}")
        attack = truth.labels[alarm_id] is Label.ATTACK
        if cls is Classification.TRUE_INCIDENT:
            if attack:
                tp += 1
                detected.add(truth.instance_of(alarm_id))
            else:
                fp += 1
        elif attack:
            fn += 1
        else:
            tn += 1
    undefined: List[str] = []
    return MetricsReport(
        tp=tp, fp=fp, fn=fn, tn=tn,
        detection_rate=_ratio(len(detected), truth.attack_instances, "detection_rate", undefined),
        fp_rate=_ratio(fp, truth.total_packets, "fp_rate", undefined),
        completeness=_ratio(tp, tp + fn, "completeness", undefined),
        accuracy=_ratio(tp, tp + fp, "accuracy", undefined),
        detected_instances=len(detected),
        attack_instances=truth.attack_instances,
        total_packets=truth.total_packets,
        undefined=undefined,
    )


@dataclass
class ReductionSummary:
    fp_before: int
    fp_after: int
    fp_reduction: Optional[float]
    detection_rate_delta: float

    @property
    def applicable(self) -> bool:
        return self.fp_reduction is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["applicable"] = self.applicable
        return d

    def __str__(self):
        red = "n/a" if self.fp_reduction is None else f"{100 * self.fp_reduction:.1f}%"
        return (f"FP {self.fp_before} -> {self.fp_after} (reduction {red}), "
                f"detection rate delta {self.detection_rate_delta:+.4f}")


def compare_reports(before: MetricsReport, after: MetricsReport) -> ReductionSummary:
    reduction = None if before.fp == 0 else (before.fp - after.fp) / before.fp
    return ReductionSummary(before.fp, after.fp, reduction, after.detection_rate - before.detection_rate)


def passthrough_verdicts(alerts: Sequence[AlertRecord], homenet: HomeNet) -> List[dict]:
    """What the input NIDS alone reports: every inbound alert is an incident."""
    out = []
    for r in alerts:
        a = to_alarm(r, homenet)
        if a is not None:
            out.append({"alarm_id": a.id, "classification": Classification.TRUE_INCIDENT.value})
    return out


def truth_from_corpus(truth_rows: Sequence[Mapping], alerts: Sequence[AlertRecord],
                      total_packets: int) -> GroundTruth:
    """Label each alert by the generator flow whose endpoints it carries.

    Attack instances are the flows with an ``attack`` disposition.
    """
    by_endpoints: Dict[tuple, Mapping] = {}
    attack_instances = 0
    for row in truth_rows:
        if row["disposition"] == "attack":
            attack_instances += 1
        if "client" in row and "server" in row:
            by_endpoints[(Host.parse(row["client"]), Host.parse(row["server"]))] = row
    labels: Dict[str, Label] = {}
    instances: Dict[str, str] = {}
    for r in alerts:
        row = by_endpoints.get((r.src, r.dst))
        if row is None:
            raise ConsistencyError(f"alert {r.id} ({r.src} -> {r.dst}) matches no flow in the truth file")
        labels[r.id] = Label.ATTACK if row["disposition"] == "attack" else Label.BENIGN
        instances[r.id] = str(row["flow_id"])
    return GroundTruth(labels, total_packets, attack_instances, instances)


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    detection_rate: float
    fp_rate: float
    output_anomalies: int
    report: MetricsReport


def sweep(alerts: Sequence[AlertRecord], output_packets: Sequence[Packet], model: OadModel,
          base_config: CorrelatorConfig, homenet: HomeNet, truth: GroundTruth,
          thresholds: Sequence[float]) -> List[SweepPoint]:
    """Rerun the filter stage once per output threshold with the model fixed."""
    if not thresholds:
        raise ValueError("sweep needs at least one threshold")
    scorer = cached_scorer(model)
    points = []
    for t in thresholds:
        config = replace(base_config, out_threshold=float(t))
        verdicts = run_filter(alerts, output_packets, scorer, config, homenet, Counter())
        report = compute_metrics(verdicts, truth)
        n_anom = sum(1 for v in verdicts if v.reason is Reason.OUTPUT_ANOMALY)
        points.append(SweepPoint(float(t), report.detection_rate, report.fp_rate, n_anom, report))
    return points


def write_sweep_csv(points: Sequence[SweepPoint], sink: IO[str]) -> None:
    w = csv.writer(sink, lineterminator="\n")
    w.writerow(["threshold", "detection_rate", "fp_rate"])
    for p in points:
        w.writerow([repr(p.threshold), repr(p.detection_rate), repr(p.fp_rate)])
