"""Input-NIDS alert feeds.

JSON-lines is the canonical layout::

    {"ts":5.0,"src":"10.0.0.2","sport":4321,"dst":"172.16.0.1","dport":80,"rule_id":"sqli-1","msg":"UNION SELECT"}

with optional ``magnitude`` (anomaly-based feeds) and ``id`` keys. The
one-line "fast alert" text layout is also understood.
"""

from __future__ import annotations

import calendar
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, List, Optional, Union

from .correlator import Alarm
from .traffic import HomeNet, Host, in_homenet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlertRecord:
    ts: float
    src: Host
    dst: Host
    rule_id: str = ""
    message: str = ""
    magnitude: Optional[float] = None
    id: Optional[str] = None

    def __post_init__(self):
        if not (math.isfinite(self.ts) and self.ts >= 0):
            raise ValueError(f"bad alert timestamp {self.ts!r}")
        if self.magnitude is not None and not math.isfinite(self.magnitude):
            raise ValueError("magnitude must be finite when present")

    def to_dict(self) -> dict:
        d = {
            "ts": self.ts,
            "src": str(self.src.address),
            "sport": self.src.port,
            "dst": str(self.dst.address),
            "dport": self.dst.port,
            "rule_id": self.rule_id,
            "msg": self.message,
        }
        if self.magnitude is not None:
            d["magnitude"] = self.magnitude
        if self.id is not None:
            d["id"] = self.id
        return d


def _number(v, name):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"{name} must be a number, got {v!r}")
    return float(v)


def alert_from_json(obj: dict) -> AlertRecord:
    magnitude = obj.get("magnitude")
    alert_id = obj.get("id")
    return AlertRecord(
        ts=_number(obj["ts"], "ts"),
        src=Host(obj["src"], obj["sport"]),
        dst=Host(obj["dst"], obj["dport"]),
        rule_id=str(obj.get("rule_id", "")),
        message=str(obj.get("msg", "")),
        magnitude=None if magnitude is None else _number(magnitude, "magnitude"),
        id=None if alert_id is None else str(alert_id),
    )


FAST_ALERT_RE = re.compile(
    r"^(?P<mon>\d{2})/(?P<day>\d{2})(?:/(?P<year>\d{2,4}))?-(?P<h>\d{2}):(?P<m>\d{2}):(?P<s>\d{2})(?:\.(?P<frac>\d+))?"
    r"\s+\[\*\*\]\s+\[(?P<rule>[^\]]+)\]\s+(?P<msg>.*?)\s+\[\*\*\]"
    r".*?\{(?P<proto>[A-Za-z0-9]+)\}\s+"
    r"(?P<src>\d+\.\d+\.\d+\.\d+):(?P<sport>\d+)\s+->\s+(?P<dst>\d+\.\d+\.\d+\.\d+):(?P<dport>\d+)\s*$"
)


def parse_fast_alert(line: str, year: int = 1970) -> Optional[AlertRecord]:
    """Parse one fast-alert line; None for non-TCP alerts. ValueError if malformed."""
    m = FAST_ALERT_RE.match(line.strip())
    if m is None:
        raise ValueError("not a fast-alert line")
    if m["proto"].upper() != "TCP":
        return None
    yr = int(m["year"]) if m["year"] else year
    if yr < 100:
        yr += 2000
    secs = calendar.timegm((yr, int(m["mon"]), int(m["day"]), int(m["h"]), int(m["m"]), int(m["s"]), 0, 0, 0))
    frac = float("0." + m["frac"]) if m["frac"] else 0.0
    return AlertRecord(
        ts=secs + frac,
        src=Host(m["src"], int(m["sport"])),
        dst=Host(m["dst"], int(m["dport"])),
        rule_id=m["rule"],
        message=m["msg"],
    )


def parse_alert_feed(stream: Union[IO[str], Iterable[str]], warnings: Optional[Counter] = None,
                     year: int = 1970) -> Iterator[AlertRecord]:
    """Yield alert records from a JSON-lines or fast-alert feed, skipping bad lines.

    Records without an ``id`` get ``alert-<line number>``.
    """
    if warnings is None:
        warnings = Counter()
    for lineno, line in enumerate(stream, 1):
        if isinstance(line, bytes):
            line = line.decode("utf-8", errors="replace")
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            if line.startswith("{"):
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("not a JSON object")
                rec = alert_from_json(obj)
            else:
                rec = parse_fast_alert(line, year)
                if rec is None:
                    warnings["non_tcp"] += 1
                    continue
        except (ValueError, KeyError, TypeError) as exc:
            warnings["malformed"] += 1
            logger.warning("skipping malformed alert on line %d: %s", lineno, exc)
            continue
        if rec.id is None:
            rec = AlertRecord(rec.ts, rec.src, rec.dst, rec.rule_id, rec.message, rec.magnitude,
                              f"alert-{lineno}")
        yield rec


def read_alerts(path, warnings: Optional[Counter] = None) -> List[AlertRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return list(parse_alert_feed(fh, warnings))


def write_alerts(records: Iterable[AlertRecord], sink: IO[str]) -> int:
    n = 0
    for r in records:
        sink.write(json.dumps(r.to_dict(), separators=(",", ":")))
        sink.write("\n")
        n += 1
    return n


def to_alarm(r: AlertRecord, net: HomeNet, warnings: Optional[Counter] = None) -> Optional[Alarm]:
    """Turn an inbound alert into a fresh pre-alarm; None (skip) otherwise."""
    if not in_homenet(r.dst.address, net) or in_homenet(r.src.address, net):
        if warnings is not None:
            warnings["skipped_alert"] += 1
        logger.warning("skipping alert %s: %s -> %s is not against the home network", r.id, r.src, r.dst)
        return None
    return Alarm(
        id=r.id if r.id is not None else f"{r.ts!r}:{r.src}->{r.dst}",
        attacker=r.src,
        victim=r.dst,
        raised_at=r.ts,
        magnitude=-math.inf if r.magnitude is None else r.magnitude,
    )
