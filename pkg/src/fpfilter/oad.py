"""Output anomaly detector.

A two-tier payload model of a service's outgoing traffic. Tier one is a
Kohonen self-organizing map over byte histograms whose only job is to
assign each payload a class; tier two keeps running byte-frequency
statistics per ``(server_port, som_class)`` and scores a payload with the
simplified Mahalanobis distance

    score = sum_i |h[i] - mean[i]| / (stddev[i] + alpha)
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .traffic import Packet

logger = logging.getLogger(__name__)

N_BYTES = 256
MODEL_MAGIC = b"APHRODITE-OAD\x00\x00"
MODEL_VERSION = 1
MAGIC_LEN = 16

ClassKey = Tuple[int, int]


class ModelFormatError(ValueError):
    pass


def histogram(payload: bytes) -> np.ndarray:
    """Relative byte frequencies of ``payload``; all zeros when empty."""
    if not payload:
        return np.zeros(N_BYTES)
    counts = np.bincount(np.frombuffer(payload, dtype=np.uint8), minlength=N_BYTES)
    return counts / len(payload)


# --- tier one: SOM ---------------------------------------------------------------


@dataclass
class SomGrid:
    width: int
    height: int
    weights: np.ndarray
    epochs: int = 3
    eta0: float = 0.5
    r0: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("SOM dimensions must be positive")
        if self.r0 is None:
            self.r0 = max(self.width, self.height) / 2
        if self.weights.shape != (self.width * self.height, N_BYTES):
            raise ValueError(f"weights shape {self.weights.shape} does not match grid")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.eta0 <= 1:
            raise ValueError("eta0 must be in (0, 1]")
        if not self.r0 > 0:
            raise ValueError("r0 must be > 0")

    @property
    def n_nodes(self) -> int:
        return self.width * self.height

    def coords(self) -> np.ndarray:
        """(col, row) of every node, row-major order."""
        idx = np.arange(self.n_nodes)
        return np.stack([idx % self.width, idx // self.width], axis=1).astype(float)

    def copy(self) -> "SomGrid":
        return SomGrid(self.width, self.height, self.weights.copy(),
                       self.epochs, self.eta0, self.r0, self.seed)


def som_init(width: int, height: int, seed: int, epochs: int = 3, eta0: float = 0.5,
             r0: Optional[float] = None) -> SomGrid:
    if width < 1 or height < 1:
        raise ValueError(f"SOM dimensions must be positive, got {width}x{height}")
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    weights = rng.random((width * height, N_BYTES))
    return SomGrid(width, height, weights, epochs, eta0, r0, seed)


def som_classify(grid: SomGrid, h: np.ndarray) -> int:
    d2 = np.square(grid.weights - h).sum(axis=1)
    # argmin returns the first minimum, i.e. the lowest index on ties
    return int(np.argmin(d2))


def som_train(grid: SomGrid, samples: Sequence[np.ndarray]) -> SomGrid:
    """Return a trained copy of ``grid``.

    Linear decay of both learning rate and neighbourhood radius over the
    ``epochs * len(samples)`` steps, with a Gaussian neighbourhood and a
    radius floor of 0.5.
    """
    if len(samples) == 0:
        raise ValueError("som_train needs at least one sample")
    out = grid.copy()
    w = out.weights
    X = np.asarray(samples, dtype=float)
    coords = out.coords()
    total = out.epochs * len(X)
    t = 0
    for _ in range(out.epochs):
        for x in X:
            bmu = int(np.argmin(np.square(w - x).sum(axis=1)))
            frac = 1.0 - t / total
            eta = out.eta0 * frac
            radius = max(out.r0 * frac, 0.5)
            d2 = np.square(coords - coords[bmu]).sum(axis=1)
            influence = eta * np.exp(-d2 / (2.0 * radius * radius))
            w += influence[:, None] * (x - w)
            t += 1
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("SOM weights diverged")
    return out


# --- tier two: per-class byte statistics ---------------------------------------------


@dataclass
class ClassModel:
    key: ClassKey
    n: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(N_BYTES))
    m2: np.ndarray = field(default_factory=lambda: np.zeros(N_BYTES))
    alpha: float = 0.001

    @property
    def stddev(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros(N_BYTES)
        return np.sqrt(self.m2 / self.n)


def payl_update(m: ClassModel, h: np.ndarray) -> ClassModel:
    """Welford update of ``m`` with one histogram; mutates and returns ``m``."""
    m.n += 1
    delta = h - m.mean
    m.mean += delta / m.n
    m.m2 += delta * (h - m.mean)
    return m


def class_distance(m: ClassModel, h: np.ndarray) -> float:
    return float(np.sum(np.abs(h - m.mean) / (m.stddev + m.alpha)))


@dataclass
class OadConfig:
    width: int = 8
    height: int = 8
    epochs: int = 3
    eta0: float = 0.5
    r0: Optional[float] = None
    seed: int = 0
    alpha: float = 0.001

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")


@dataclass
class OadModel:
    som: SomGrid
    classes: Dict[ClassKey, ClassModel]
    t_max: float
    trained_count: int
    alpha: float = 0.001

    def score_payload(self, port: int, payload: bytes, address=None) -> float:
        """Anomaly score of an outgoing payload sent from server ``port``.

        ``address`` is accepted for interface symmetry with the training
        call but does not take part in the class key.
        """
        if not payload:
            raise ValueError("cannot score an empty payload")
        h = histogram(payload)
        c = som_classify(self.som, h)
        m = self.classes.get((port, c))
        if m is None:
            return math.inf
        return class_distance(m, h)

    def score(self, p: Packet) -> float:
        return self.score_payload(p.source.port, p.payload, p.source.address)


def oad_score(model: OadModel, p: Packet) -> float:
    return model.score(p)


def default_threshold(model: OadModel) -> float:
    return 0.75 * model.t_max


def oad_train(output_packets: Iterable[Packet], config: Optional[OadConfig] = None) -> OadModel:
    """Fit the two tiers on outgoing packets and record t_max.

    Phases: train the SOM on every histogram; with the SOM frozen, feed each
    packet into the class model for its (source port, SOM class); finally
    score every training packet against the finished model and keep the
    maximum as t_max.
    """
    config = config or OadConfig()
    packets = [p for p in output_packets if p.payload]
    if not packets:
        raise ValueError("no non-empty output packets to train on")
    hists = [histogram(p.payload) for p in packets]

    som = som_init(config.width, config.height, config.seed, config.epochs, config.eta0, config.r0)
    som = som_train(som, hists)

    classes: Dict[ClassKey, ClassModel] = {}
    labels = []
    for p, h in zip(packets, hists):
        c = som_classify(som, h)
        labels.append(c)
        key = (p.source.port, c)
        m = classes.get(key)
        if m is None:
            m = classes[key] = ClassModel(key, alpha=config.alpha)
        payl_update(m, h)

    t_max = 0.0
    for p, h, c in zip(packets, hists, labels):
        t_max = max(t_max, class_distance(classes[(p.source.port, c)], h))

    logger.info("trained OAD on %d packets, %d classes, t_max=%g", len(packets), len(classes), t_max)
    return OadModel(som, classes, t_max, len(packets), config.alpha)


# --- persistence -------------------------------------------------------------------


def _hex_list(a: np.ndarray) -> list:
    return [float(x).hex() for x in np.asarray(a, dtype=float).ravel()]


def _from_hex_list(items: list, shape) -> np.ndarray:
    return np.array([float.fromhex(s) for s in items], dtype=float).reshape(shape)


def model_to_dict(model: OadModel) -> dict:
    som = model.som
    return {
        "version": MODEL_VERSION,
        "alpha": float(model.alpha).hex(),
        "t_max": float(model.t_max).hex(),
        "trained_count": model.trained_count,
        "som": {
            "width": som.width,
            "height": som.height,
            "epochs": som.epochs,
            "eta0": float(som.eta0).hex(),
            "r0": float(som.r0).hex(),
            "seed": som.seed,
            "weights": _hex_list(som.weights),
        },
        "classes": [
            {
                "port": key[0],
                "som_class": key[1],
                "n": m.n,
                "alpha": float(m.alpha).hex(),
                "mean": _hex_list(m.mean),
                "m2": _hex_list(m.m2),
            }
            for key, m in sorted(model.classes.items())
        ],
    }


def model_from_dict(body: dict) -> OadModel:
    s = body["som"]
    width, height = int(s["width"]), int(s["height"])
    som = SomGrid(
        width, height,
        _from_hex_list(s["weights"], (width * height, N_BYTES)),
        int(s["epochs"]), float.fromhex(s["eta0"]), float.fromhex(s["r0"]), int(s["seed"]),
    )
    classes = {}
    for c in body["classes"]:
        key = (int(c["port"]), int(c["som_class"]))
        classes[key] = ClassModel(
            key, int(c["n"]),
            _from_hex_list(c["mean"], (N_BYTES,)),
            _from_hex_list(c["m2"], (N_BYTES,)),
            float.fromhex(c["alpha"]),
        )
    model = OadModel(som, classes, float.fromhex(body["t_max"]), int(body["trained_count"]),
                     float.fromhex(body["alpha"]))
    if model.trained_count != sum(m.n for m in classes.values()):
        raise ModelFormatError("trained_count does not match class sample counts")
    return model


def save_model(model: OadModel, sink: IO[bytes]) -> None:
    body = json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":"))
    sink.write(MODEL_MAGIC + bytes([MODEL_VERSION]))
    sink.write(body.encode("ascii"))


def load_model(source: IO[bytes]) -> OadModel:
    head = source.read(MAGIC_LEN)
    if len(head) < MAGIC_LEN or head[:-1] != MODEL_MAGIC:
        raise ModelFormatError("not an OAD model file (bad magic)")
    if head[-1] != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {head[-1]} (expected {MODEL_VERSION})")
    raw = source.read()
    try:
        body = json.loads(raw.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"model body truncated or corrupt: {exc}") from exc
    if body.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"model body version {body.get('version')!r} mismatch")
    try:
        return model_from_dict(body)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"model body incomplete: {exc}") from exc


def save_model_file(model: OadModel, path) -> None:
    with open(path, "wb") as fh:
        save_model(model, fh)


def load_model_file(path) -> OadModel:
    with open(path, "rb") as fh:
        return load_model(fh)
