"""Drive the correlator from an alert feed and an output capture."""

from __future__ import annotations

import json
import logging
from collections import Counter
from typing import IO, Callable, Dict, Iterable, List, Optional, Sequence

from .alerts import AlertRecord, to_alarm
from .correlator import Correlator, CorrelatorConfig, Verdict
from .oad import OadModel
from .traffic import Direction, HomeNet, Packet, direction

logger = logging.getLogger(__name__)

Scorer = Callable[[Packet], float]

_ALERT, _PACKET = 0, 1


def merge_events(alerts: Sequence[AlertRecord], packets: Sequence[Packet]):
    """Timestamp order; alerts sort before packets carrying the same timestamp."""
    events = [(r.ts, _ALERT, i, r) for i, r in enumerate(alerts)]
    events += [(p.timestamp, _PACKET, i, p) for i, p in enumerate(packets)]
    events.sort(key=lambda e: e[:3])
    return events


def run_filter(
    alerts: Sequence[AlertRecord],
    output_packets: Sequence[Packet],
    scorer: Scorer,
    config: CorrelatorConfig,
    homenet: HomeNet,
    warnings: Optional[Counter] = None,
) -> List[Verdict]:
    """Run every alert through the correlator; one verdict per accepted alert.

    Packets are scored lazily, only when they reverse the 4-tuple of a
    pending alarm.
    """
    if warnings is None:
        warnings = Counter()
    corr = Correlator(config, homenet)
    verdicts: List[Verdict] = []
    for _ts, kind, _i, item in merge_events(alerts, output_packets):
        if kind == _ALERT:
            alarm = to_alarm(item, homenet, warnings)
            if alarm is not None:
                verdicts.extend(corr.register_alarm(alarm))
        else:
            if direction(item, homenet) is not Direction.OUTBOUND:
                continue
            score = None
            if item.payload and corr.watching(item):
                score = scorer(item)
            verdicts.extend(corr.process_output_packet(item, score))
    verdicts.extend(corr.finalize())
    warnings.update(corr.warnings)
    return verdicts


def model_scorer(model: OadModel) -> Scorer:
    return model.score


def cached_scorer(model: OadModel) -> Scorer:
    """Memoising scorer for reruns over the same packets (threshold sweeps)."""
    cache: Dict[Packet, float] = {}

    def score(p: Packet) -> float:
        s = cache.get(p)
        if s is None:
            s = cache[p] = model.score(p)
        return s

    return score


def filter_with_model(alerts, output_packets, model: OadModel, config: CorrelatorConfig,
                      homenet: HomeNet, warnings: Optional[Counter] = None) -> List[Verdict]:
    return run_filter(alerts, output_packets, model.score, config, homenet, warnings)


def write_verdicts(verdicts: Iterable[Verdict], sink: IO[str]) -> int:
    n = 0
    for v in verdicts:
        sink.write(json.dumps(v.to_dict(), separators=(",", ":")))
        sink.write("\n")
        n += 1
    return n


def read_verdicts(stream: IO[str]) -> List[dict]:
    out = []
    for lineno, line in enumerate(stream, 1):
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        for k in ("alarm_id", "classification", "reason"):
            if k not in obj:
                raise ValueError(f"verdict on line {lineno} lacks {k!r}")
        out.append(obj)
    return out
