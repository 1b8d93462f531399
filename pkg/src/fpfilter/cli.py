"""Command-line entry point: ``fpfilter {gen,train,filter,eval,sweep}``.

Settings come from built-in defaults, then an optional flat ``key=value``
config file (``--config``), then command-line flags; flags win.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from contextlib import contextmanager

from .alerts import read_alerts, write_alerts
from .correlator import Classification, CorrelatorConfig
from .evaluation import (ConsistencyError, MetricsReport, compare_reports, compute_metrics,
                         passthrough_verdicts, sweep, truth_from_corpus, write_sweep_csv)
from .oad import ModelFormatError, OadConfig, default_threshold, load_model_file, oad_train, save_model_file
from .pipeline import filter_with_model, read_verdicts, write_verdicts
from .synth import ATTACK_TOKEN, CorpusConfig, generate_corpus, read_truth, stub_nids, write_corpus
from .traffic import CaptureFormatError, Direction, HomeNet, direction, read_capture

log = logging.getLogger("fpfilter")

EXIT_USAGE = 1
EXIT_DATA = 2

DEFAULTS = {
    "homenet": "172.16.0.0/16",
    "magnitude_threshold": 1e300,
    "raised_threshold": 3,
    "timeout": 30.0,
    "seed": 0,
    "som_width": 8,
    "som_height": 8,
    "epochs": 3,
    "eta0": 0.5,
    "alpha": 0.001,
    "steps": 10,
    "n_benign": 100,
    "n_attack": 5,
    "n_bait": 10,
    "n_dos": 2,
    "patterns": ATTACK_TOKEN.decode(),
    "out_dir": ".",
}

TYPES = {
    "out_threshold": float, "magnitude_threshold": float, "raised_threshold": int, "timeout": float,
    "seed": int, "som_width": int, "som_height": int, "epochs": int, "eta0": float, "r0": float,
    "alpha": float, "steps": int, "n_benign": int, "n_attack": int, "n_bait": int, "n_dos": int,
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


class Settings:
    """Flag > config file > default lookup with type coercion."""

    def __init__(self, args: argparse.Namespace):
        self._args = vars(args)
        self._file = read_config_file(args.config) if getattr(args, "config", None) else {}

    def get(self, key, default=None):
        value = self._args.get(key)
        if value is None:
            value = self._file.get(key)
        if value is None:
            value = DEFAULTS.get(key, default)
        if value is not None and key in TYPES and not isinstance(value, TYPES[key]):
            try:
                value = TYPES[key](value)
            except ValueError:
                raise UsageError(f"bad value for {key}: {value!r}") from None
        return value

    def require(self, key):
        value = self.get(key)
        if value is None:
            raise UsageError(f"--{key.replace('_', '-')} is required")
        return value

    def homenet(self) -> HomeNet:
        try:
            return HomeNet.parse(self.get("homenet"))
        except ValueError as exc:
            raise UsageError(f"bad --homenet: {exc}") from None

    def correlator_config(self, out_threshold: float) -> CorrelatorConfig:
        try:
            return CorrelatorConfig(
                out_threshold=out_threshold,
                magnitude_threshold=self.get("magnitude_threshold"),
                raised_threshold=self.get("raised_threshold"),
                timeout=self.get("timeout"),
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None


@contextmanager
def _open_out(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w") as fh:
            yield fh


def _load_model(s: Settings):
    path = s.require("model")
    if not os.path.exists(path):
        raise DataError(f"model file {path} not found")
    return load_model_file(path)


def _outbound(packets, net):
    return [p for p in packets if direction(p, net) is Direction.OUTBOUND]


# --- commands ----------------------------------------------------------------------


def cmd_gen(s: Settings) -> int:
    cfg = CorpusConfig(
        seed=s.get("seed"), n_benign=s.get("n_benign"), n_attack=s.get("n_attack"),
        n_bait=s.get("n_bait"), n_dos=s.get("n_dos"),
    )
    corpus = generate_corpus(cfg)
    out_dir = s.get("out_dir")
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, f"{name}.jsonl") for name in ("input", "output", "truth")}
    write_corpus(corpus, paths["input"], paths["output"], paths["truth"])
    alerts_path = s.get("alerts") or os.path.join(out_dir, "alerts.jsonl")
    patterns = [p.encode() for p in s.get("patterns").split(",") if p]
    alerts = stub_nids(patterns, corpus.input_packets, s.homenet())
    with open(alerts_path, "w") as fh:
        write_alerts(alerts, fh)
    print(f"flows={len(corpus.flows)} input_packets={len(corpus.input_packets)} "
          f"output_packets={len(corpus.output_packets)} alerts={len(alerts)} dir={out_dir}")
    return 0


def cmd_train(s: Settings) -> int:
    net = s.homenet()
    warnings = Counter()
    packets = read_capture(s.require("output_capture"), warnings)
    train = [p for p in _outbound(packets, net) if p.payload]
    if not train:
        raise DataError("training stream holds no outbound packets with payload")
    cfg = OadConfig(
        width=s.get("som_width"), height=s.get("som_height"), epochs=s.get("epochs"),
        eta0=s.get("eta0"), r0=s.get("r0"), seed=s.get("seed"), alpha=s.get("alpha"),
    )
    model = oad_train(train, cfg)
    save_model_file(model, s.require("model"))
    print(f"t_max={model.t_max!r} trained_count={model.trained_count} "
          f"default_threshold={default_threshold(model)!r}")
    return 0


def cmd_filter(s: Settings) -> int:
    net = s.homenet()
    model = _load_model(s)
    alerts = read_alerts(s.require("alerts"))
    packets = read_capture(s.require("output_capture"))
    out_t = s.get("out_threshold")
    config = s.correlator_config(default_threshold(model) if out_t is None else out_t)
    verdicts = filter_with_model(alerts, _outbound(packets, net), model, config, net)
    with _open_out(s.get("verdicts")) as fh:
        write_verdicts(verdicts, fh)
    counts = Counter(v.classification.value for v in verdicts)
    print(f"verdicts={len(verdicts)} true_incidents={counts[Classification.TRUE_INCIDENT.value]} "
          f"false_positives={counts[Classification.FALSE_POSITIVE.value]} "
          f"out_threshold={config.out_threshold!r}", file=sys.stderr)
    return 0


def _truth(s: Settings, alerts):
    with open(s.require("truth")) as fh:
        rows = read_truth(fh)
    input_path = s.get("input_capture")
    total = len(read_capture(input_path)) if input_path else 0
    return truth_from_corpus(rows, alerts, total)


def cmd_eval(s: Settings) -> int:
    net = s.homenet()
    alerts = read_alerts(s.require("alerts"))
    truth = _truth(s, alerts)
    if s.get("passthrough"):
        verdicts = passthrough_verdicts(alerts, net)
    else:
        with open(s.require("verdicts")) as fh:
            verdicts = read_verdicts(fh)
    report = compute_metrics(verdicts, truth)
    out = report.to_dict()
    baseline = s.get("baseline")
    if baseline:
        with open(baseline) as fh:
            before = MetricsReport.from_dict(json.load(fh))
        summary = compare_reports(before, report)
        out["compare"] = summary.to_dict()
        print(summary, file=sys.stderr)
    with _open_out(s.get("report")) as fh:
        fh.write(json.dumps(out, sort_keys=True, indent=2))
        fh.write("\n")
    return 0


def cmd_sweep(s: Settings) -> int:
    net = s.homenet()
    model = _load_model(s)
    alerts = read_alerts(s.require("alerts"))
    packets = _outbound(read_capture(s.require("output_capture")), net)
    truth = _truth(s, alerts)
    raw = s.get("thresholds")
    if raw:
        try:
            thresholds = [float(x) for x in str(raw).split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"bad --thresholds {raw!r}") from None
    else:
        steps = s.get("steps")
        if steps < 2:
            raise UsageError("--steps must be >= 2")
        top = 2.0 * model.t_max
        thresholds = [top * i / (steps - 1) for i in range(steps)]
    base = s.correlator_config(default_threshold(model))
    points = sweep(alerts, packets, model, base, net, truth, thresholds)
    with _open_out(s.get("csv")) as fh:
        write_sweep_csv(points, fh)
    for p in points:
        log.info("threshold=%r output_anomalies=%d", p.threshold, p.output_anomalies)
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "filter": cmd_filter, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    g = shared.add_argument_group("shared")
    g.add_argument("--config", metavar="PATH")
    g.add_argument("--homenet", metavar="CIDR[,CIDR]")
    g.add_argument("--model", metavar="PATH")
    g.add_argument("--alerts", metavar="PATH")
    g.add_argument("--output-capture", metavar="PATH")
    g.add_argument("--out-threshold", metavar="R")
    g.add_argument("--magnitude-threshold", metavar="R")
    g.add_argument("--raised-threshold", metavar="N")
    g.add_argument("--timeout", metavar="SECONDS")
    g.add_argument("--seed", metavar="N")
    g.add_argument("-v", "--verbose", action="store_true", default=None)

    parser = _Parser(prog="fpfilter", description="Output-anomaly false-positive filter for NIDS alerts.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", parents=[shared], help="generate a synthetic labelled corpus")
    p.add_argument("--out-dir", metavar="DIR")
    p.add_argument("--n-benign", metavar="N")
    p.add_argument("--n-attack", metavar="N")
    p.add_argument("--n-bait", metavar="N")
    p.add_argument("--n-dos", metavar="N")
    p.add_argument("--patterns", metavar="S[,S]", help="stub NIDS signatures")

    p = sub.add_parser("train", parents=[shared], help="train the output anomaly detector")
    p.add_argument("--som-width", metavar="N")
    p.add_argument("--som-height", metavar="N")
    p.add_argument("--epochs", metavar="N")
    p.add_argument("--eta0", metavar="R")
    p.add_argument("--r0", metavar="R")
    p.add_argument("--alpha", metavar="R")

    p = sub.add_parser("filter", parents=[shared], help="correlate alerts with output anomalies")
    p.add_argument("--verdicts", metavar="PATH", help="verdict JSON-lines output (default stdout)")

    for name, help_ in (("eval", "score verdicts against ground truth"),
                        ("sweep", "rerun the filter over a list of output thresholds")):
        p = sub.add_parser(name, parents=[shared], help=help_)
        p.add_argument("--truth", metavar="PATH")
        p.add_argument("--input-capture", metavar="PATH", help="input packets (FP-rate denominator)")
        if name == "eval":
            p.add_argument("--verdicts", metavar="PATH")
            p.add_argument("--passthrough", action="store_true", default=None,
                           help="evaluate the input NIDS alone (every alert an incident)")
            p.add_argument("--baseline", metavar="PATH", help="metrics report to compare against")
            p.add_argument("--report", metavar="PATH", help="report JSON output (default stdout)")
        else:
            p.add_argument("--thresholds", metavar="R[,R]")
            p.add_argument("--steps", metavar="N", help="evenly spaced thresholds over [0, 2*t_max]")
            p.add_argument("--csv", metavar="PATH", help="CSV output (default stdout)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](Settings(args))
    except UsageError as exc:
        print(f"fpfilter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CaptureFormatError, ModelFormatError, ConsistencyError,
            ValueError, KeyError, OSError) as exc:
        print(f"fpfilter: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
