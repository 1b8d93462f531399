import random

import pytest

import reference
from fpfilter.correlator import Classification, CorrelatorConfig
from fpfilter.pipeline import run_filter
from fpfilter.traffic import HomeNet, Host, Packet


def host(text: str) -> Host:
    return Host.parse(text)


def pkt(src: str, dst: str, payload: bytes = b"", ts: float = 0.0) -> Packet:
    return Packet(host(src), host(dst), ts, payload)


def oracle_mismatches(n, seed):
    """Indices of random micro-scenarios where the streaming correlator and the batch oracle disagree."""
    rng = random.Random(seed)
    mismatches = []
    for k in range(n):
        alerts, packets, scores, params = reference.micro_scenario(rng)
        verdicts = run_filter(alerts, packets, scores.__getitem__, CorrelatorConfig(**params), reference.HOMENET)
        expected = reference.batch_oracle(
            alerts, packets, scores, params["out_threshold"], params["magnitude_threshold"],
            params["raised_threshold"], reference.HOMENET,
        )
        got = {v.alarm_id: v for v in verdicts}
        ok = len(got) == len(verdicts) and set(got) == set(expected)
        if ok:
            for alarm_id, (is_true, fired) in expected.items():
                v = got[alarm_id]
                if (v.classification is Classification.TRUE_INCIDENT) != is_true:
                    ok = False
                elif is_true and v.reason.value not in fired:
                    ok = False
        if not ok:
            mismatches.append(k)
    return mismatches


@pytest.fixture
def net():
    return HomeNet(["172.16.0.0/16"])


@pytest.fixture(scope="session")
def lab():
    """The desk-scale reproduction corpus shared by the slower tests."""
    from fpfilter.oad import oad_train
    from fpfilter.synth import ATTACK_TOKEN, CorpusConfig, generate_corpus, stub_nids

    homenet = HomeNet(["172.16.0.0/16"])
    train = generate_corpus(CorpusConfig(seed=7, n_benign=2000))
    test = generate_corpus(CorpusConfig(seed=42, n_benign=1000, n_attack=20, n_bait=100, n_dos=5))
    model = oad_train(train.output_packets)
    alerts = stub_nids([ATTACK_TOKEN], test.input_packets, homenet)
    return {"net": homenet, "train": train, "test": test, "model": model, "alerts": alerts}
