"""Stateful correlation of input-NIDS pre-alarms with output anomalies.

An alarm is held pending until one of these resolves it, first rule wins:

* registration: magnitude above ``magnitude_threshold`` (HighMagnitude) or
  more than ``raised_threshold`` alerts on the same endpoint pair
  (RepeatedAlerts);
* a matching outgoing packet scoring above ``out_threshold`` (OutputAnomaly);
* timeout with no matching output at all (MissingOutput);
* timeout after only unremarkable output (FalsePositive / NoAnomaly).

The clock is driven purely by event timestamps.
"""

from __future__ import annotations

import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .traffic import Direction, HomeNet, Host, Packet, direction, in_homenet

logger = logging.getLogger(__name__)

Pair = Tuple[Host, Host]


class Classification(str, enum.Enum):
    TRUE_INCIDENT = "TrueIncident"
    FALSE_POSITIVE = "FalsePositive"


class Reason(str, enum.Enum):
    OUTPUT_ANOMALY = "OutputAnomaly"
    MISSING_OUTPUT = "MissingOutput"
    HIGH_MAGNITUDE = "HighMagnitude"
    REPEATED_ALERTS = "RepeatedAlerts"
    NO_ANOMALY = "NoAnomaly"


@dataclass
class Alarm:
    id: str
    attacker: Host
    victim: Host
    raised_at: float
    magnitude: float = -math.inf
    processed: bool = False
    true_incident: bool = False
    counter: int = 1
    aliases: List[str] = field(default_factory=list)

    @property
    def pair(self) -> Pair:
        return (self.attacker, self.victim)


@dataclass
class CorrelatorConfig:
    out_threshold: float = 0.0
    # effectively disabled unless the input feed carries magnitudes
    magnitude_threshold: float = 1e300
    raised_threshold: int = 3
    timeout: float = 30.0

    def __post_init__(self):
        if not (math.isfinite(self.out_threshold) and self.out_threshold >= 0):
            raise ValueError("out_threshold must be finite and >= 0")
        if not math.isfinite(self.magnitude_threshold):
            raise ValueError("magnitude_threshold must be finite")
        if self.raised_threshold < 1:
            raise ValueError("raised_threshold must be >= 1")
        if not (math.isfinite(self.timeout) and self.timeout > 0):
            raise ValueError("timeout must be finite and > 0")


@dataclass(frozen=True)
class Verdict:
    alarm_id: str
    classification: Classification
    reason: Reason
    decided_at: float
    attacker: Host
    victim: Host
    score: Optional[float] = None

    def to_dict(self) -> dict:
        d = {
            "alarm_id": self.alarm_id,
            "classification": self.classification.value,
            "reason": self.reason.value,
            "decided_at": self.decided_at,
            "attacker": str(self.attacker),
            "victim": str(self.victim),
        }
        if self.reason is Reason.OUTPUT_ANOMALY:
            # +inf (unseen output class) is not valid JSON
            d["score"] = self.score if math.isfinite(self.score) else "inf"
        return d


class Correlator:
    """Single-writer correlation state.

    Every mutating call first expires alarms whose window closed before the
    event's timestamp, so callers only have to feed events in time order.
    """

    def __init__(self, config: CorrelatorConfig, homenet: HomeNet):
        self.config = config
        self.homenet = homenet
        self.pending: Dict[Pair, Alarm] = {}
        # decided before their window closed; later alerts on the pair alias to them
        self.recent: Dict[Pair, Tuple[Alarm, Verdict]] = {}
        self.emitted: Dict[str, Verdict] = {}
        self.seen_ids: set = set()
        self.clock = 0.0
        self.warnings: Counter = Counter()

    # -- helpers ------------------------------------------------------------------

    def _advance(self, now: float) -> List[Verdict]:
        if now < self.clock:
            logger.debug("event at %r precedes clock %r; treating as current", now, self.clock)
            now = self.clock
        return self.expire(now)

    def _decide(self, a: Alarm, cls: Classification, reason: Reason, at: float,
                score: Optional[float] = None) -> List[Verdict]:
        a.true_incident = cls is Classification.TRUE_INCIDENT
        a.processed = True
        del self.pending[a.pair]
        out = []
        for alarm_id in [a.id, *a.aliases]:
            v = Verdict(alarm_id, cls, reason, at, a.attacker, a.victim, score)
            self.emitted[alarm_id] = v
            out.append(v)
        if at - a.raised_at <= self.config.timeout:
            self.recent[a.pair] = (a, out[0])
        return out

    def watching(self, p: Packet) -> bool:
        """Whether an outgoing packet would touch a pending alarm."""
        return (p.destination, p.source) in self.pending

    # -- operations --------------------------------------------------------------------

    def register_alarm(self, a: Alarm) -> List[Verdict]:
        """Queue a pre-alarm; returns any verdicts this event produced."""
        if a.id in self.seen_ids:
            raise ValueError(f"alarm id {a.id!r} already registered")
        if not in_homenet(a.victim.address, self.homenet) or in_homenet(a.attacker.address, self.homenet):
            self.warnings["rejected_alarm"] += 1
            logger.warning("rejecting alarm %s: %s -> %s is not an inbound attack", a.id, a.attacker, a.victim)
            return []
        self.seen_ids.add(a.id)
        out = self._advance(a.raised_at)
        now = self.clock

        prev = self.recent.get(a.pair)
        if prev is not None:
            first, verdict = prev
            if now - first.raised_at <= self.config.timeout:
                v = Verdict(a.id, verdict.classification, verdict.reason, now,
                            a.attacker, a.victim, verdict.score)
                first.aliases.append(a.id)
                self.emitted[a.id] = v
                out.append(v)
                return out
            del self.recent[a.pair]

        existing = self.pending.get(a.pair)
        if existing is not None:
            existing.counter += 1
            existing.magnitude = max(existing.magnitude, a.magnitude)
            existing.aliases.append(a.id)
            target = existing
        else:
            a.processed = False
            a.true_incident = False
            a.counter = max(a.counter, 1)
            a.aliases = []
            self.pending[a.pair] = a
            target = a
        v = self.immediate_checks(target)
        if v is not None:
            out.extend(v)
        return out

    def immediate_checks(self, a: Alarm) -> Optional[List[Verdict]]:
        """Magnitude and repeat-count rules; None when neither fires."""
        if a.pair not in self.pending:
            return None
        if a.magnitude > self.config.magnitude_threshold:
            return self._decide(a, Classification.TRUE_INCIDENT, Reason.HIGH_MAGNITUDE, self.clock)
        if a.counter > self.config.raised_threshold:
            return self._decide(a, Classification.TRUE_INCIDENT, Reason.REPEATED_ALERTS, self.clock)
        return None

    def process_output_packet(self, p: Packet, score: Optional[float]) -> List[Verdict]:
        """Feed one outgoing packet and its OAD score.

        ``score`` is ignored (and may be None) for empty payloads, which only
        prove that the service answered.
        """
        if direction(p, self.homenet) is not Direction.OUTBOUND:
            return []
        out = self._advance(p.timestamp)
        a = self.pending.get((p.destination, p.source))
        if a is None:
            return out
        a.processed = True
        if p.payload and score is not None and score > self.config.out_threshold:
            out.extend(self._decide(a, Classification.TRUE_INCIDENT, Reason.OUTPUT_ANOMALY,
                                    self.clock, score))
        return out

    def expire(self, now: float) -> List[Verdict]:
        if now > self.clock:
            self.clock = now
        out: List[Verdict] = []
        timeout = self.config.timeout
        due = [a for a in self.pending.values() if now - a.raised_at > timeout]
        due.sort(key=lambda a: (a.raised_at, a.id))
        for a in due:
            at = a.raised_at + timeout
            if a.processed:
                out.extend(self._decide(a, Classification.FALSE_POSITIVE, Reason.NO_ANOMALY, at))
            else:
                out.extend(self._decide(a, Classification.TRUE_INCIDENT, Reason.MISSING_OUTPUT, at))
        for pair in [k for k, (a, _) in self.recent.items() if now - a.raised_at > timeout]:
            del self.recent[pair]
        return out

    def finalize(self) -> List[Verdict]:
        """Flush: resolve everything still pending as if time ran out."""
        clock = self.clock
        out = self.expire(math.inf)
        self.clock = clock
        self.recent.clear()
        return out
