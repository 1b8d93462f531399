"""False-positive reduction for network intrusion detection.

Alerts from an input NIDS are held as pre-alarms and confirmed or discarded
depending on whether the protected service's *outgoing* traffic looks
anomalous under a payload model trained on normal output.
"""

from .alerts import AlertRecord, parse_alert_feed, to_alarm
from .correlator import Alarm, Classification, Correlator, CorrelatorConfig, Reason, Verdict
from .evaluation import GroundTruth, Label, MetricsReport, compare_reports, compute_metrics, sweep
from .oad import (OadConfig, OadModel, default_threshold, histogram, load_model, oad_score, oad_train,
                  save_model)
from .pipeline import run_filter
from .synth import CorpusConfig, generate_corpus, stub_nids
from .traffic import Direction, FlowKey, HomeNet, Host, Packet, direction, in_homenet, matches_alarm, parse_capture

__all__ = [
    "AlertRecord", "parse_alert_feed", "to_alarm",
    "Alarm", "Classification", "Correlator", "CorrelatorConfig", "Reason", "Verdict",
    "GroundTruth", "Label", "MetricsReport", "compare_reports", "compute_metrics", "sweep",
    "OadConfig", "OadModel", "default_threshold", "histogram", "load_model", "oad_score", "oad_train", "save_model",
    "run_filter",
    "CorpusConfig", "generate_corpus", "stub_nids",
    "Direction", "FlowKey", "HomeNet", "Host", "Packet", "direction", "in_homenet", "matches_alarm", "parse_capture",
]

__version__ = "0.1.0"
