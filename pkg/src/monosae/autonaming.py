"""Automated neuron naming and detection scoring against a vision-language endpoint.

A neuron is named by showing the endpoint its top-activating images and
asking for the shared concept in one line. The name is then checked on a
balanced set of activating / non-activating images, one yes/no query per
image; the detection accuracy is the fraction answered correctly.

Every request/response pair is appended to a JSONL transcript. Requests are
serialized canonically, so a transcript entry can be re-sent verbatim and
also serves as a cache when an interrupted run is resumed.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import requests

from .embedding_io import as_matrix
from .errors import (
    ConfigError,
    EmptyConcept,
    EndpointUnreachable,
    ImageLoadFailure,
    IndexOutOfRange,
    InsufficientNegatives,
    InsufficientPositives,
    MalformedResponse,
    OversizePayload,
    TooManyUnparseable,
)

log = logging.getLogger(__name__)

NAMING_TEMPLATE = (
    "You are shown {count} chest X-ray images that all strongly activate the same "
    "internal feature of an image model. They are ordered from strongest to weakest "
    "activation. Identify the single concept these images share. It may be a "
    "pathology, an anatomical finding, a device, the patient position or an image "
    "artifact. Answer with one line containing only a short description of the "
    "concept."
)

DETECTION_TEMPLATE = (
    "Concept: {concept}\n"
    "Does this image show the concept above? Answer with a single word: yes or no."
)

MAX_NAMING_IMAGES = 10
MAX_PAYLOAD_BYTES = 20 * 1024 * 1024
UNPARSEABLE_LIMIT = 0.20
API_KEY_ENV = "VLM_API_KEY"


@dataclass
class VlmEndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "medgemma"
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0
    retry_backoff: float = 0.5

    def __post_init__(self):
        if not self.timeout > 0:
            raise ConfigError(f"timeout must be > 0, got {self.timeout}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")

    @property
    def api_key(self) -> str | None:
        return os.environ.get(API_KEY_ENV)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def request_digest(body: dict) -> str:
    return hashlib.sha256(canonical_json(body)).hexdigest()


# ---- clients -----------------------------------------------------------------


class VlmClient:
    """Blocking client with bounded retry; subclasses implement ``_send``."""

    model_name = "unknown"
    temperature = 0.0
    max_retries = 0
    retry_backoff = 0.0

    def __init__(self):
        self.attempts: list[dict] = []
        self._lock = threading.Lock()

    def body(self, request: dict) -> dict:
        return {"model": self.model_name, "temperature": self.temperature, "messages": request["messages"]}

    def _send(self, body: dict, context: dict) -> str:
        raise NotImplementedError

    def complete(self, request: dict, context: dict | None = None) -> str:
        body = self.body(request)
        context = context or {}
        last: Exception | None = None
        for attempt in range(1, self.max_retries + 2):
            try:
                text = self._send(body, context)
            except EndpointUnreachable as exc:
                last = exc
                with self._lock:
                    self.attempts.append({"attempt": attempt, "ok": False, "error": str(exc)})
                log.warning("endpoint attempt %d failed: %s", attempt, exc)
                if attempt <= self.max_retries and self.retry_backoff:
                    time.sleep(self.retry_backoff * attempt)
                continue
            with self._lock:
                self.attempts.append({"attempt": attempt, "ok": True})
            return text
        raise EndpointUnreachable(f"gave up after {self.max_retries + 1} attempts: {last}")


def extract_text(payload) -> str:
    if isinstance(payload, dict):
        if isinstance(payload.get("text"), str):
            return payload["text"]
        choices = payload.get("choices")
        if isinstance(choices, list) and choices and isinstance(choices[0], dict):
            first = choices[0]
            message = first.get("message")
            if isinstance(message, dict) and isinstance(message.get("content"), str):
                return message["content"]
            if isinstance(first.get("text"), str):
                return first["text"]
    raise MalformedResponse("response has no text field")


class HttpVlmClient(VlmClient):
    """POSTs chat-completion style requests to ``{base_url}/chat/completions``."""

    def __init__(self, cfg: VlmEndpointConfig, session: requests.Session | None = None):
        super().__init__()
        self.cfg = cfg
        self.model_name = cfg.model_name
        self.temperature = cfg.temperature
        self.max_retries = cfg.max_retries
        self.retry_backoff = cfg.retry_backoff
        self.session = session or requests.Session()

    def _send(self, body: dict, context: dict) -> str:
        headers = {"Content-Type": "application/json"}
        if self.cfg.api_key:
            headers["Authorization"] = f"Bearer {self.cfg.api_key}"
        url = self.cfg.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self.session.post(url, data=canonical_json(body), headers=headers, timeout=self.cfg.timeout)
        except requests.RequestException as exc:
            raise EndpointUnreachable(f"{url}: {exc}") from exc
        if resp.status_code >= 500:
            raise EndpointUnreachable(f"{url}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise MalformedResponse(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"{url}: body is not JSON") from exc
        return extract_text(payload)


class OracleMock(VlmClient):
    """Answers detection queries from ground-truth membership."""

    model_name = "mock-oracle"

    def __init__(self, truth: Callable[[int, int], bool], namer: Callable[[int], str] | None = None):
        super().__init__()
        self.truth = truth
        self.namer = namer or (lambda neuron: f"concept of neuron {neuron}")

    def _send(self, body, context):
        if context.get("phase") == "naming":
            return self.namer(context["neuron_id"])
        return "yes" if self.truth(context["neuron_id"], context["sample_index"]) else "no"


class ConstantMock(VlmClient):
    model_name = "mock-constant"

    def __init__(self, answer: str = "yes"):
        super().__init__()
        self.answer = answer

    def _send(self, body, context):
        return self.answer


class RandomMock(VlmClient):
    """Coin-flip answers, a pure function of (seed, request) so threads cannot reorder them."""

    model_name = "mock-random"

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed

    def _draw(self, body) -> int:
        h = hashlib.sha256(str(self.seed).encode() + b"\0" + canonical_json(body)).digest()
        return int.from_bytes(h[:8], "little")

    def _send(self, body, context):
        draw = self._draw(body)
        if context.get("phase") == "naming":
            return f"random concept {draw % 1000}"
        return "yes" if draw & 1 else "no"


class ScriptedMock(VlmClient):
    """Replays a fixed list of answers in call order; ``None`` simulates an outage."""

    model_name = "mock-scripted"

    def __init__(self, responses: Sequence[str | None], max_retries: int = 0, cycle: bool = False):
        super().__init__()
        self.responses = list(responses)
        self.max_retries = max_retries
        self.cycle = cycle
        self._pos = 0
        self._script_lock = threading.Lock()

    @classmethod
    def from_file(cls, path, max_retries: int = 0) -> "ScriptedMock":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(payload, dict):
            return cls(payload["responses"], max_retries=max_retries, cycle=bool(payload.get("cycle", False)))
        return cls(payload, max_retries=max_retries)

    def _send(self, body, context):
        with self._script_lock:
            if self._pos >= len(self.responses):
                if not self.cycle or not self.responses:
                    raise EndpointUnreachable("scripted responses exhausted")
                self._pos = 0
            answer = self.responses[self._pos]
            self._pos += 1
        if answer is None:
            raise EndpointUnreachable("scripted outage")
        return answer


# ---- transcripts ---------------------------------------------------------------


class Transcript:
    """Append-only JSONL log that doubles as a response cache keyed by request digest."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.cache: dict[str, str] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self.cache[rec["request_digest"]] = rec["response"]

    def record(self, neuron_id: int, phase: str, body: dict, response: str, parsed) -> None:
        rec = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "neuron_id": neuron_id,
            "phase": phase,
            "request_digest": request_digest(body),
            "request": body,
            "response": response,
            "parsed": parsed,
        }
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
            self.cache[rec["request_digest"]] = response


def read_transcript(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def _query(client: VlmClient, request: dict, context: dict, transcript: Transcript | None, parse):
    body = client.body(request)
    digest = request_digest(body)
    if transcript is not None and digest in transcript.cache:
        response = transcript.cache[digest]
        return response, parse(response)
    response = client.complete(request, context)
    parsed = parse(response)
    if transcript is not None:
        transcript.record(context["neuron_id"], context["phase"], body, response, parsed)
    return response, parsed


# ---- images and prompts --------------------------------------------------------


def load_manifest(path) -> dict[int, Path]:
    """Read ``sample_index,image_path`` rows; relative paths resolve against the manifest's folder."""
    path = Path(path)
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            image = Path(row["image_path"])
            out[int(row["sample_index"])] = image if image.is_absolute() else path.parent / image
    return out


def write_manifest(entries: dict[int, str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_index", "image_path"])
        for idx in sorted(entries):
            writer.writerow([idx, entries[idx]])


def _image_part(image) -> dict:
    if isinstance(image, (bytes, bytearray)):
        raw = bytes(image)
    else:
        try:
            raw = Path(image).read_bytes()
        except OSError as exc:
            raise ImageLoadFailure(f"cannot read image {image}: {exc}") from exc
    return {"type": "image", "base64": base64.b64encode(raw).decode("ascii")}


def _check_size(request: dict, limit: int) -> dict:
    size = len(canonical_json(request))
    if size > limit:
        raise OversizePayload(f"request is {size} bytes, limit {limit}")
    return request


def build_naming_prompt(
    images: Sequence,
    template: str = NAMING_TEMPLATE,
    max_images: int = MAX_NAMING_IMAGES,
    max_payload_bytes: int = MAX_PAYLOAD_BYTES,
) -> dict:
    """One user message: instruction text followed by the images in activation order."""
    if not 1 <= len(images) <= max_images:
        raise ValueError(f"naming needs between 1 and {max_images} images, got {len(images)}")
    parts = [{"type": "text", "text": template.format(count=len(images))}]
    parts.extend(_image_part(img) for img in images)
    return _check_size({"messages": [{"role": "user", "content": parts}]}, max_payload_bytes)


def build_detection_prompt(concept: str, image, max_payload_bytes: int = MAX_PAYLOAD_BYTES) -> dict:
    parts = [{"type": "text", "text": DETECTION_TEMPLATE.format(concept=concept)}, _image_part(image)]
    return _check_size({"messages": [{"role": "user", "content": parts}]}, max_payload_bytes)


def parse_concept(text) -> str:
    if not isinstance(text, str):
        raise MalformedResponse(f"concept answer is {type(text).__name__}, not text")
    for line in text.splitlines():
        line = line.strip()
        if line:
            return line
    raise EmptyConcept("endpoint returned an empty concept")


_ANSWER = re.compile(r"^(yes|no)\b")


def parse_answer(text) -> bool | None:
    """``True``/``False`` for a leading yes/no, ``None`` when unparseable."""
    if not isinstance(text, str):
        return None
    match = _ANSWER.match(text.strip().lower())
    if match is None:
        return None
    return match.group(1) == "yes"


def name_neuron(
    client: VlmClient,
    neuron_id: int,
    images: Sequence,
    transcript: Transcript | None = None,
    template: str = NAMING_TEMPLATE,
) -> str:
    request = build_naming_prompt(images, template)
    _, concept = _query(client, request, {"phase": "naming", "neuron_id": neuron_id}, transcript, parse_concept)
    return concept


# ---- detection -----------------------------------------------------------------


@dataclass(frozen=True)
class DetectionSet:
    neuron_id: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]
    seed: int


@dataclass
class ConceptFinding:
    neuron_id: int
    concept_text: str
    detection_accuracy: float
    true_positives: int
    false_positives: int
    true_negatives: int
    false_negatives: int
    unparseable: int = 0
    positive_set: list[int] = field(default_factory=list)
    negative_set: list[int] = field(default_factory=list)
    transcript_ref: str | None = None

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "ConceptFinding":
        return cls(**rec)


def build_detection_set(
    z: np.ndarray,
    neuron: int,
    n_per_side: int = 10,
    seed: int = 0,
    top_fraction: float = 0.1,
) -> DetectionSet:
    """Balanced positives (top activation decile) and negatives (zero activations).

    Negatives fall back to the bottom decile when too few samples are exactly
    zero; either way every negative sits strictly below every positive.
    """
    z = as_matrix(z)
    n, m = z.shape
    if not 0 <= neuron < m:
        raise IndexOutOfRange(f"neuron {neuron} outside [0, {m})")
    col = z[:, neuron]
    pool_size = max(1, int(np.ceil(top_fraction * n)))
    order = np.lexsort((np.arange(n), -col))
    top = order[:pool_size]
    top = top[col[top] > 0]
    if top.size < n_per_side:
        raise InsufficientPositives(f"neuron {neuron}: {top.size} activating samples in the top pool, need {n_per_side}")
    rng = np.random.default_rng([seed, neuron])
    positives = np.sort(rng.choice(top, size=n_per_side, replace=False))

    floor = col[positives].min()
    zeros = np.flatnonzero(col <= 0)
    if zeros.size >= n_per_side:
        pool = zeros
    else:
        bottom = order[::-1][:pool_size]
        pool = np.sort(bottom[col[bottom] < floor])
    pool = np.setdiff1d(pool, positives)
    if pool.size < n_per_side:
        raise InsufficientNegatives(f"neuron {neuron}: {pool.size} non-activating samples, need {n_per_side}")
    negatives = np.sort(rng.choice(pool, size=n_per_side, replace=False))
    return DetectionSet(neuron_id=neuron, positives=tuple(positives.tolist()), negatives=tuple(negatives.tolist()), seed=seed)


def run_detection(
    client: VlmClient,
    concept_text: str,
    dset: DetectionSet,
    images: dict[int, object] | Callable[[int], object],
    shuffle_seed: int = 0,
    transcript: Transcript | None = None,
    max_in_flight: int = 1,
) -> ConceptFinding:
    """Ask one yes/no question per image and score the answers.

    ``images`` maps sample index to an image path or raw bytes.
    """
    if not concept_text or not concept_text.strip():
        raise EmptyConcept("detection needs a non-empty concept")
    lookup = images if callable(images) else images.__getitem__
    samples = [(i, True) for i in dset.positives] + [(i, False) for i in dset.negatives]
    order = np.random.default_rng([shuffle_seed, dset.neuron_id]).permutation(len(samples))
    presented = [samples[i] for i in order]

    def ask(item):
        idx, _ = item
        request = build_detection_prompt(concept_text, lookup(idx))
        ctx = {"phase": "detection", "neuron_id": dset.neuron_id, "sample_index": idx}
        return _query(client, request, ctx, transcript, parse_answer)[1]

    if max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            answers = list(pool.map(ask, presented))
    else:
        answers = [ask(item) for item in presented]

    tp = fp = tn = fn = bad = 0
    for (_, is_positive), said_yes in zip(presented, answers):
        if said_yes is None:
            bad += 1
        elif is_positive:
            tp += said_yes
            fn += not said_yes
        else:
            fp += said_yes
            tn += not said_yes
    if bad > UNPARSEABLE_LIMIT * len(presented):
        raise TooManyUnparseable(f"neuron {dset.neuron_id}: {bad} of {len(presented)} answers unparseable")
    scored = tp + tn + fp + fn
    return ConceptFinding(
        neuron_id=dset.neuron_id,
        concept_text=concept_text,
        detection_accuracy=(tp + tn) / scored,
        true_positives=tp,
        false_positives=fp,
        true_negatives=tn,
        false_negatives=fn,
        unparseable=bad,
        positive_set=list(dset.positives),
        negative_set=list(dset.negatives),
        transcript_ref=str(transcript.path) if transcript is not None else None,
    )


def _concept_key(text: str) -> str:
    return " ".join(text.lower().split())


def rank_findings(findings: Iterable[ConceptFinding], threshold: float = 0.70) -> list[ConceptFinding]:
    """Findings at or above ``threshold``, best first, one row per distinct concept."""
    ranked = sorted(
        (f for f in findings if f.detection_accuracy >= threshold),
        key=lambda f: (-f.detection_accuracy, f.neuron_id, f.concept_text),
    )
    seen, out = set(), []
    for f in ranked:
        key = _concept_key(f.concept_text)
        if key not in seen:
            seen.add(key)
            out.append(f)
    return out


def write_findings(findings: Iterable[ConceptFinding], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in findings:
            fh.write(json.dumps(f.to_record(), sort_keys=True) + "\n")


def append_finding(finding: ConceptFinding, path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(finding.to_record(), sort_keys=True) + "\n")


def read_findings(path) -> list[ConceptFinding]:
    path = Path(path)
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines()
    return [ConceptFinding.from_record(json.loads(line)) for line in lines if line.strip()]
