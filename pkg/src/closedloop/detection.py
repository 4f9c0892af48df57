"""Detection providers for the grounder: simulator oracles and a remote-detector client.

A provider that errors out contributes nothing; the fault is logged and
recorded, and grounding carries on with whichever providers answered.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol

import httpx
import jsonschema
import numpy as np

from .backends import encode_png_b64
from .errors import InvalidInputError
from .sim import DetectionNoise, oracle_detect
from .state import Detection, Observation

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 10.0


@dataclass(frozen=True)
class DetectionQuery:
    labels: tuple[str, ...]
    observation: Observation
    seed: tuple[int, ...] = (0,)

    def __post_init__(self):
        labels = tuple(dict.fromkeys(lab for lab in self.labels if lab))
        if not labels:
            raise InvalidInputError("a detection query needs at least one label")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "seed", tuple(int(s) for s in np.atleast_1d(self.seed)))


class DetectionProvider(Protocol):
    source_id: str

    def detect(self, query: DetectionQuery) -> list[Detection]: ...


@dataclass(frozen=True)
class ProviderFault:
    source_id: str
    error: str
    labels: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"source_id": self.source_id, "error": self.error, "labels": list(self.labels)}


class SimulatorDetector:
    """Ground-truth boxes from the rendered masks, corrupted by seeded noise."""

    def __init__(self, source_id: str, noise: DetectionNoise | None = None):
        self.source_id = source_id
        self.noise = noise or DetectionNoise()

    def detect(self, query: DetectionQuery) -> list[Detection]:
        return oracle_detect(query.observation, query.labels, self.noise, self.source_id, query.seed)


class RemoteDetector:
    """POSTs ``{"image", "labels"}`` to one endpoint and reads back ``{"detections"}``."""

    def __init__(self, source_id: str, endpoint: str, timeout: float = DEFAULT_TIMEOUT,
                 client: httpx.Client | None = None):
        self.source_id = source_id
        self.endpoint = endpoint
        self.client = client or httpx.Client(timeout=timeout)

    def detect(self, query: DetectionQuery) -> list[Detection]:
        body = {"image": encode_png_b64(query.observation.rgb), "labels": list(query.labels)}
        resp = self.client.post(self.endpoint, json=body)
        resp.raise_for_status()
        doc = resp.json()
        _validator().validate(doc)
        return [Detection(d["label"], tuple(d["bbox"]), float(d["confidence"]), self.source_id)
                for d in doc["detections"]]


_VALIDATOR = None


def _validator():
    global _VALIDATOR
    if _VALIDATOR is None:
        schema = json.loads(resources.files("closedloop").joinpath(
            "schemas/detector.schema.json").read_text())
        _VALIDATOR = jsonschema.Draft202012Validator(
            {**schema, "anyOf": [{"$ref": "#/$defs/response"}]})
    return _VALIDATOR


def _sanitize(dets, query: DetectionQuery, source_id: str) -> list[Detection]:
    w, h = query.observation.size
    wanted = set(query.labels)
    out = []
    for d in dets:
        if d.label not in wanted:
            continue
        u0, v0, u1, v1 = d.bbox
        u0, u1 = min(max(u0, 0.0), w), min(max(u1, 0.0), w)
        v0, v1 = min(max(v0, 0.0), h), min(max(v1, 0.0), h)
        if u0 < u1 and v0 < v1:
            out.append(Detection(d.label, (u0, v0, u1, v1), d.confidence, source_id))
    return out


def detect(query: DetectionQuery, provider: DetectionProvider,
           faults: list[ProviderFault] | None = None) -> list[Detection]:
    """Run one provider; a failing provider yields [] and a recorded fault."""
    try:
        dets = provider.detect(query)
    except Exception as exc:  # any provider failure is a partial failure, not an abort
        fault = ProviderFault(provider.source_id, f"{type(exc).__name__}: {exc}", query.labels)
        log.warning("detector %s failed: %s", provider.source_id, fault.error)
        if faults is not None:
            faults.append(fault)
        return []
    return _sanitize(dets, query, provider.source_id)


def detect_all(query: DetectionQuery, providers) -> tuple[dict[str, list[Detection]], list[ProviderFault]]:
    faults: list[ProviderFault] = []
    per_source = {p.source_id: detect(query, p, faults) for p in providers}
    return per_source, faults


def default_providers(noise: DetectionNoise | None = None, count: int = 2) -> list[SimulatorDetector]:
    if count < 1:
        raise InvalidInputError("at least one detection provider is required")
    return [SimulatorDetector(f"detector_{chr(ord('a') + i)}", noise) for i in range(count)]


@dataclass
class FailingDetector:
    """Provider that always errors; used to exercise partial-failure handling."""

    source_id: str = "broken"
    calls: int = field(default=0)

    def detect(self, query: DetectionQuery) -> list[Detection]:
        self.calls += 1
        raise ConnectionError("detector offline")


__all__ = [
    "DetectionQuery", "DetectionProvider", "ProviderFault", "SimulatorDetector", "RemoteDetector",
    "FailingDetector", "detect", "detect_all", "default_providers",
]
