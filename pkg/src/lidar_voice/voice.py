"""Spoken detection phrases, speech backends and latency accounting."""

from __future__ import annotations

import enum
import math
import os
import shlex
import subprocess
import sys
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Protocol, TextIO

from .kitti_io import CLASS_NAMES, DONTCARE, Sample

BUDGET_MS = 500.0
# Reference split reported for the original prototype: inference + TTS.
REFERENCE_SPLIT_MS = {"inference": 100.0, "tts": 300.0, "total": 400.0}
STAGES = ("preprocess", "inference", "phrase", "tts")
DEFAULT_TIMEOUT_MS = int(os.environ.get("LIDAR_VOICE_TTS_TIMEOUT_MS", "2000"))


def round_half_up(value: float | Decimal, ndigits: int = 0) -> Decimal:
    """Round the decimal representation of ``value`` half away from zero."""
    dec = value if isinstance(value, Decimal) else Decimal(repr(float(value)))
    return dec.quantize(Decimal(1).scaleb(-ndigits), rounding=ROUND_HALF_UP)


def estimate_distance(sample: Sample) -> float | None:
    """Box-centre range in metres, to one decimal; None when the sample has no geometry."""
    if sample.distance_m is None or not math.isfinite(sample.distance_m):
        return None
    return float(round_half_up(sample.distance_m, 1))


def format_distance(distance_m: float) -> str:
    text = str(round_half_up(distance_m, 1))
    return text[:-2] if text.endswith(".0") else text


@dataclass(frozen=True)
class VoicePhrase:
    text: str
    class_id: int
    distance_m: float | None
    confidence: float

    @property
    def suppressed(self) -> bool:
        return not self.text


def format_phrase(result) -> VoicePhrase:
    """Render ``<Class> detected, <D> meters away, <P>% confidence``.

    DontCare results give an empty, suppressed phrase. The distance clause is
    dropped when the distance is unknown.
    """
    cls = result.class_id
    if cls == DONTCARE:
        return VoicePhrase("", cls, result.distance_m, result.confidence)
    percent = int(round_half_up(Decimal(repr(float(result.confidence))) * 100, 0))
    parts = [f"{CLASS_NAMES[cls]} detected"]
    if result.distance_m is not None:
        parts.append(f"{format_distance(result.distance_m)} meters away")
    parts.append(f"{percent}% confidence")
    return VoicePhrase(", ".join(parts), cls, result.distance_m, result.confidence)


# ---------------------------------------------------------------------------
# backends


class AnnounceStatus(str, enum.Enum):
    SPOKEN = "spoken"
    SKIPPED = "skipped"
    TIMEOUT = "timeout"
    ERROR = "backend-error"


class SpeechBackend(Protocol):
    name: str
    voice: str

    def synthesize(self, text: str) -> AnnounceStatus: ...


class EchoBackend:
    name = "echo"

    def __init__(self, stream: TextIO | None = None, voice: str = "text"):
        self.stream = stream
        self.voice = voice

    def synthesize(self, text: str) -> AnnounceStatus:
        print(text, file=self.stream or sys.stdout, flush=True)
        return AnnounceStatus.SPOKEN


class FileSinkBackend:
    """Append each phrase as one UTF-8 line of a transcript file."""

    name = "file"

    def __init__(self, path, voice: str = "transcript"):
        self.path = Path(path)
        self.voice = voice

    def synthesize(self, text: str) -> AnnounceStatus:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(text + "\n")
        return AnnounceStatus.SPOKEN


class CommandBackend:
    """Run an external program per phrase, e.g. ``"edge-tts --voice en-IN-PrabhatNeural --text {text}"``.

    The template is split like a shell command line and ``{text}`` is
    substituted inside each argument; no shell is involved.
    """

    name = "command"

    def __init__(self, template: str, timeout_ms: int = DEFAULT_TIMEOUT_MS, voice: str = "external"):
        self.template = template
        self.timeout_ms = timeout_ms
        self.voice = voice

    def synthesize(self, text: str) -> AnnounceStatus:
        argv = [arg.replace("{text}", text) for arg in shlex.split(self.template)]
        try:
            subprocess.run(argv, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
                           timeout=self.timeout_ms / 1000.0, check=True)
        except subprocess.TimeoutExpired:
            return AnnounceStatus.TIMEOUT
        except (OSError, subprocess.CalledProcessError):
            return AnnounceStatus.ERROR
        return AnnounceStatus.SPOKEN


class NullBackend:
    name = "none"
    voice = "none"

    def synthesize(self, text: str) -> AnnounceStatus:
        return AnnounceStatus.SPOKEN


def announce(phrase: VoicePhrase, backend: SpeechBackend) -> AnnounceStatus:
    if phrase.suppressed:
        return AnnounceStatus.SKIPPED
    return backend.synthesize(phrase.text)


class AnnouncementQueue:
    """Single-slot dispatcher running announcements off the detection path.

    A newer phrase replaces one that is still waiting; the phrase being
    spoken is never interrupted.
    """

    def __init__(self, backend: SpeechBackend):
        self.backend = backend
        self.statuses: list[tuple[VoicePhrase, AnnounceStatus]] = []
        self.dropped: list[VoicePhrase] = []
        self._pending: VoicePhrase | None = None
        self._closed = False
        self._cond = threading.Condition()
        self._worker = threading.Thread(target=self._run, daemon=True)
        self._worker.start()

    def submit(self, phrase: VoicePhrase) -> None:
        with self._cond:
            if self._pending is not None:
                self.dropped.append(self._pending)
            self._pending = phrase
            self._cond.notify()

    def close(self, wait: bool = True) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify()
        if wait:
            self._worker.join()

    def _run(self) -> None:
        while True:
            with self._cond:
                while self._pending is None and not self._closed:
                    self._cond.wait()
                if self._pending is None:
                    return
                phrase, self._pending = self._pending, None
            status = announce(phrase, self.backend)
            with self._cond:
                self.statuses.append((phrase, status))


# ---------------------------------------------------------------------------
# latency


@dataclass
class LatencyReport:
    stages_ms: dict[str, float]
    total_ms: float
    budget_ms: float = BUDGET_MS
    reference_ms: dict[str, float] = field(default_factory=lambda: dict(REFERENCE_SPLIT_MS))

    @property
    def over_budget(self) -> bool:
        return self.total_ms > self.budget_ms

    def line(self) -> str:
        parts = [f"{k}_ms={v:.3f}" for k, v in self.stages_ms.items()]
        parts += [f"total_ms={self.total_ms:.3f}", f"budget_ms={self.budget_ms:g}",
                  f"over_budget={str(self.over_budget).lower()}",
                  "reference=" + "/".join(f"{k}:{v:g}" for k, v in self.reference_ms.items())]
        return " ".join(parts)


def latency_report(stages_ms: dict[str, float], budget_ms: float = BUDGET_MS) -> LatencyReport:
    if any(v < 0 for v in stages_ms.values()):
        raise ValueError("stage durations must be non-negative")
    return LatencyReport(dict(stages_ms), math.fsum(stages_ms.values()), budget_ms)


class StageTimer:
    """Collect monotonic-clock durations for named pipeline stages."""

    def __init__(self):
        self.stages_ms: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages_ms[name] = self.stages_ms.get(name, 0.0) + (time.perf_counter() - t0) * 1000.0

    def report(self) -> LatencyReport:
        return latency_report({s: self.stages_ms.get(s, 0.0) for s in STAGES})
