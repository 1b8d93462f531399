"""Deterministic labelled corpora and a substring-matching stub NIDS.

Four flow kinds are generated against one server:

* benign: ordinary page requests, HTML-like responses;
* attack: request carries the SQL-injection token, the response is a
  dumped table (digits, hex, separators);
* bait: request carries the token but the response is an ordinary page;
* dos: request carries the token and nothing comes back.
"""

from __future__ import annotations

import enum
import ipaddress
import json
import random
from dataclasses import dataclass, field
from typing import IO, Iterable, List, Optional, Sequence, Tuple

from .alerts import AlertRecord
from .traffic import MAX_PAYLOAD, Direction, HomeNet, Host, Packet, direction, write_packets

ATTACK_TOKEN = b"UNION SELECT"
DEFAULT_SERVER = Host(ipaddress.IPv4Address("172.16.0.1"), 80)


class FlowKind(str, enum.Enum):
    BENIGN = "Benign"
    ATTACK = "Attack"
    BAIT = "Bait"
    DOS = "Dos"


@dataclass
class CorpusConfig:
    seed: int = 0
    n_benign: int = 0
    n_attack: int = 0
    n_bait: int = 0
    n_dos: int = 0
    server: Host = DEFAULT_SERVER
    payload_len_range: Tuple[int, int] = (200, 1200)
    max_payload: int = MAX_PAYLOAD
    start_time: float = 0.0

    def __post_init__(self):
        for name in ("n_benign", "n_attack", "n_bait", "n_dos"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        lo, hi = self.payload_len_range
        if not 1 <= lo <= hi <= self.max_payload:
            raise ValueError(f"bad payload_len_range {self.payload_len_range}")


@dataclass
class FlowScript:
    flow_id: str
    kind: FlowKind
    client: Host
    server: Host
    request: bytes
    responses: List[bytes]
    request_ts: float
    response_ts: List[float] = field(default_factory=list)

    def __post_init__(self):
        if (self.kind is FlowKind.DOS) != (not self.responses):
            raise ValueError("exactly the dos flows have no responses")

    @property
    def alarm_expected(self) -> bool:
        return self.kind is not FlowKind.BENIGN

    @property
    def disposition(self) -> str:
        return "attack" if self.kind in (FlowKind.ATTACK, FlowKind.DOS) else "benign"

    def truth_row(self) -> dict:
        return {
            "flow_id": self.flow_id,
            "kind": self.kind.value,
            "alarm_expected": self.alarm_expected,
            "disposition": self.disposition,
            "client": str(self.client),
            "server": str(self.server),
        }


@dataclass
class Corpus:
    flows: List[FlowScript]
    input_packets: List[Packet]
    output_packets: List[Packet]

    def truth_rows(self) -> List[dict]:
        return [f.truth_row() for f in self.flows]


# --- content -------------------------------------------------------------------

_PAGES = ["index", "news", "people", "research", "teaching", "contact", "events", "about"]
_WORDS = (
    "the of and to in a is that for it as was with be by on not he this are or his from at which "
    "but have an they you were her she there been one all we their has would when if so no will "
    "university department research group student staff course lecture project network security "
    "system page home news event contact information welcome schedule room building"
).split()

_PAGE_STYLES = {
    # word-heavy article text
    "article": ["<p>", "</p>\n", "<br/>", "<h2>", "</h2>\n", "<em>", "</em>"],
    # navigation and link lists
    "listing": ['<li><a href="/', '">', "</a></li>\n", "<ul>\n", "</ul>\n", '<div class="nav">', "</div>\n"],
    # tables of plain data
    "table": ["<tr>", "<td>", "</td>", "</tr>\n", '<table class="list">\n', "</table>\n"],
}
_STYLE_TAG_SHARE = {"article": 0.15, "listing": 0.45, "table": 0.35}

_DUMP_NAMES = ["admin", "root", "guest", "jdoe", "asmith", "webmaster", "test", "ops"]


def _benign_response(rng: random.Random, length: int) -> bytes:
    style = rng.choice(sorted(_PAGE_STYLES))
    tags = _PAGE_STYLES[style]
    share = _STYLE_TAG_SHARE[style]
    parts = ['<html><head><title>', rng.choice(_PAGES).capitalize(), "</title></head>\n<body>\n"]
    size = sum(len(p) for p in parts)
    while size < length:
        if rng.random() < share:
            piece = rng.choice(tags)
            if piece.endswith("/"):
                piece += rng.choice(_PAGES) + ".html"
        else:
            piece = rng.choice(_WORDS) + " "
        parts.append(piece)
        size += len(piece)
    return "".join(parts).encode("ascii")[:length]


def _attack_response(rng: random.Random, length: int) -> bytes:
    rows = []
    size = 0
    while size < length:
        row = "{}|{}|{:032x}|{},{},{}\n".format(
            rng.randrange(1, 100000), rng.choice(_DUMP_NAMES), rng.getrandbits(128),
            rng.randrange(1000), rng.randrange(10**9), rng.randrange(10**6),
        )
        rows.append(row)
        size += len(row)
    return "".join(rows).encode("ascii")[:length]


def _request(rng: random.Random, kind: FlowKind, server: Host) -> bytes:
    host = f"Host: {server.address}\r\n"
    if kind is FlowKind.BENIGN:
        line = f"GET /{rng.choice(_PAGES)}.php?id={rng.randrange(1000)} HTTP/1.0\r\n"
    elif kind is FlowKind.BAIT:
        # known attack string dropped into an ordinary form field
        line = (f"GET /guestbook.php?name={rng.choice(_DUMP_NAMES)}&comment=nice+site+"
                f"{ATTACK_TOKEN.decode()}+lol HTTP/1.0\r\n")
    else:
        line = ("GET /modules.php?op=modload&name=Messages&file=readpmsg&start="
                f"0 {ATTACK_TOKEN.decode()} pn_uname,null,pn_uname,pn_pass,pn_p HTTP/1.0\r\n")
    return (line + host + "User-Agent: Mozilla/4.0\r\n\r\n").encode("ascii")


def _client(rng: random.Random, index: int) -> Host:
    addr = ipaddress.IPv4Address(bytes([10, rng.randrange(256), rng.randrange(256), rng.randrange(1, 255)]))
    return Host(addr, 1024 + index % 64512)


def generate_corpus(config: CorpusConfig) -> Corpus:
    rng = random.Random(config.seed)
    kinds = ([FlowKind.BENIGN] * config.n_benign + [FlowKind.ATTACK] * config.n_attack
             + [FlowKind.BAIT] * config.n_bait + [FlowKind.DOS] * config.n_dos)
    rng.shuffle(kinds)
    lo, hi = config.payload_len_range
    server = config.server

    flows: List[FlowScript] = []
    inputs: List[Packet] = []
    outputs: List[Packet] = []
    t = config.start_time
    for i, kind in enumerate(kinds):
        t = round(t + rng.expovariate(1.0), 6)
        client = _client(rng, i)
        request = _request(rng, kind, server)
        responses: List[bytes] = []
        resp_ts: List[float] = []
        if kind is not FlowKind.DOS:
            make = _attack_response if kind is FlowKind.ATTACK else _benign_response
            rt = t
            for _ in range(rng.randint(1, 3)):
                rt = round(rt + rng.uniform(0.005, 0.2), 6)
                responses.append(make(rng, rng.randint(lo, hi)))
                resp_ts.append(rt)
        flow = FlowScript(f"flow-{i:06d}", kind, client, server, request, responses, t, resp_ts)
        flows.append(flow)
        inputs.append(Packet(client, server, t, request))
        outputs.extend(Packet(server, client, ts, body) for ts, body in zip(resp_ts, responses))
    outputs.sort(key=lambda p: p.timestamp)
    return Corpus(flows, inputs, outputs)


def write_truth(flows: Iterable[FlowScript], sink: IO[str]) -> None:
    for f in flows:
        sink.write(json.dumps(f.truth_row(), separators=(",", ":")))
        sink.write("\n")


def read_truth(stream: IO[str]) -> List[dict]:
    return [json.loads(line) for line in stream if line.strip()]


def write_corpus(corpus: Corpus, input_path, output_path, truth_path) -> None:
    with open(input_path, "w") as fh:
        write_packets(corpus.input_packets, fh)
    with open(output_path, "w") as fh:
        write_packets(corpus.output_packets, fh)
    with open(truth_path, "w") as fh:
        write_truth(corpus.flows, fh)


def stub_nids(patterns: Sequence[bytes], packets: Iterable[Packet], homenet: HomeNet) -> List[AlertRecord]:
    """Signature matching on inbound payloads; one alert per matching packet."""
    if not patterns:
        raise ValueError("stub_nids needs at least one pattern")
    alerts = []
    for p in packets:
        if direction(p, homenet) is not Direction.INBOUND:
            continue
        hit: Optional[int] = next((k for k, pat in enumerate(patterns) if pat in p.payload), None)
        if hit is None:
            continue
        alerts.append(AlertRecord(
            ts=p.timestamp, src=p.source, dst=p.destination,
            rule_id=f"stub-{hit}", message=patterns[hit].decode("latin-1"),
            id=f"a{len(alerts):06d}",
        ))
    return alerts
