"""Text-side supervision: prompts, VLM/LLM clients, description cache, text embedding."""

from __future__ import annotations

import collections
import fcntl
import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Protocol, Sequence

import numpy as np

from ._validation import ValidationError

log = logging.getLogger(__name__)

DESCRIPTION_ASPECTS = ("biometric", "hair", "clothing", "pose", "background")
SUMMARY_ASPECTS = ("biometric_summary", "clothing_summary")

DEFAULT_PROMPTS = {
    "biometric": (
        "Describe the individual's overall physical appearance, including estimated age, gender, "
        "height (e.g., short, average, tall based on surroundings if applicable), and "
        "build(e.g., slender, average, robust)."
    ),
    "hair": "Provide a detailed description of the hair features, including hair color, style, and length",
    "clothing": (
        "Detail the type of clothing the person is wearing(the style, colors, and any visible logos or "
        "patterns), shoes and any accessories (e.g., glasses, watches, jewelry)."
    ),
    "pose": (
        "Describe the person’s posture when the image was taken (e.g., standing straight, leaning, "
        "walking). Note any characteristics of the gait, such as limping, brisk walking, or any "
        "peculiarities that stand out. Mention the alignment and demeanor suggested by the posture "
        "(e.g., confident, tired, hurried)."
    ),
    "background": (
        "Describe the setting or background in which the person is located (e.g., urban street, office, "
        "park). Identify any objects or elements in the vicinity that the person is interacting with or "
        "that are relevant to the scene. Assess the general atmosphere or mood of the environment, such "
        "as busy, tranquil, chaotic, etc."
    ),
    "biometric_summary": (
        "Summarize the individual's overall physical appearance, only including estimated age, gender, "
        "height (e.g., short, average, tall based on surroundings if applicable), and build (e.g., "
        "slender, average, robust) based on the following information. Do not summarize the hairstyle. "
        "Only include the information that most sentences agree on."
    ),
    "clothing_summary": (
        "Summarize the type of clothing the person is wearing(the style, colors, and any visible logos or "
        "patterns), shoes and any accessories (e.g., glasses, watches, jewelry) based on the following "
        "information. Using three to four describing sentences. Only include the information that most "
        "sentences agree on."
    ),
}

# example answers used by the offline mock client
CANNED_RESPONSES = {
    "biometric": (
        "The individual appears to be a young male, possibly in his late teens to early twenties. He has "
        "short, dark hair and glasses. Based on the surroundings, he seems to be of average height and build."
    ),
    "hair": "The individual has short, dark hair.",
    "clothing": (
        "The individual is wearing a red jacket with black and white patches. Underneath the jacket, he has "
        "a blue shirt with a white logo or emblem on it. He is also wearing purple pants and black and white "
        "shoes. He is wearing glasses."
    ),
    "pose": (
        "The person appears to be walking, with a somewhat brisk gait. His posture is upright, suggesting "
        "confidence, and he seems to be moving forward purposefully."
    ),
    "background": (
        "The person appears to be in an urban setting, possibly a street or a pedestrian area. There are "
        "glass railings and a metal structure visible in the background, suggesting a public space or a "
        "walkway. The general atmosphere seems to be calm and quiet."
    ),
    "biometric_summary": (
        "The individual appears to be a male, primarily estimated to be in his late 20s to early 30s, with "
        "a consensus also leaning towards late teens to early 20s in several descriptions. He consistently "
        "has a medium or average build and is of average height based on the surroundings."
    ),
    "clothing_summary": (
        "The individual is dressed in a casual style, predominantly featuring black clothing, including a "
        "jacket with a white logo on the back and black pants."
    ),
}


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class PromptCatalog:
    prompts: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PROMPTS))

    def __post_init__(self):
        missing = [a for a in (*DESCRIPTION_ASPECTS, *SUMMARY_ASPECTS) if not self.prompts.get(a)]
        if missing:
            raise ValidationError(f"prompt catalog is missing aspects {missing}")

    def prompt(self, aspect: str) -> str:
        if aspect not in self.prompts:
            raise ValidationError(f"unknown aspect {aspect!r}")
        return self.prompts[aspect]

    def aspect_of(self, text: str) -> Optional[str]:
        """Aspect whose prompt opens ``text`` (longest match wins)."""
        best = None
        for aspect, prompt in self.prompts.items():
            if text.startswith(prompt) and (best is None or len(prompt) > len(self.prompts[best])):
                best = aspect
        return best


# --------------------------------------------------------------------- clients

class ClientError(RuntimeError):
    """A chat request failed after all retries."""


class ChatClient(Protocol):
    model: str

    def complete(self, messages: List[dict]) -> str: ...


def _message_text(message: dict) -> str:
    content = message.get("content", "")
    if isinstance(content, str):
        return content
    return "".join(part.get("text", "") for part in content if part.get("type") == "text")


def _message_image(message: dict) -> Optional[str]:
    content = message.get("content", "")
    if isinstance(content, list):
        for part in content:
            if part.get("type") == "image_url":
                return part["image_url"]["url"]
    return None


def vision_messages(prompt: str, image_ref: str) -> List[dict]:
    return [{"role": "user", "content": [
        {"type": "text", "text": prompt},
        {"type": "image_url", "image_url": {"url": image_ref}},
    ]}]


def summary_messages(prompt: str, texts: Sequence[str]) -> List[dict]:
    body = prompt + "\n" + "\n".join(f"{i + 1}. {t}" for i, t in enumerate(texts))
    return [{"role": "user", "content": body}]


@dataclass
class ClientConfig:
    endpoint: str = ""
    model: str = "mock-vlm"
    token_env: str = "DISENTANGLE_REID_API_TOKEN"
    max_retries: int = 3
    timeout: float = 60.0
    mock: bool = True
    max_in_flight: int = 4

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClientConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown client config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.max_retries < 0 or cfg.timeout <= 0 or cfg.max_in_flight < 1:
            raise ValidationError("max_retries >= 0, timeout > 0 and max_in_flight >= 1 are required")
        if not cfg.mock and not cfg.endpoint:
            raise ValidationError("a non-mock client needs an endpoint URL")
        return cfg


class HTTPChatClient:
    """Chat-completion endpoint client (OpenAI-style request/response bodies)."""

    def __init__(self, cfg: ClientConfig, session=None, sleep=time.sleep):
        import requests

        self.cfg = cfg
        self.model = cfg.model
        self.session = session or requests.Session()
        self._sleep = sleep
        self.calls = 0

    def complete(self, messages: List[dict]) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.cfg.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {"model": self.model, "messages": messages, "temperature": 0}
        last = None
        for attempt in range(self.cfg.max_retries + 1):
            self.calls += 1
            try:
                resp = self.session.post(self.cfg.endpoint, json=payload, headers=headers, timeout=self.cfg.timeout)
                if resp.status_code == 200:
                    return resp.json()["choices"][0]["message"]["content"].strip()
                last = f"HTTP {resp.status_code}"
                if resp.status_code < 500 and resp.status_code != 429:
                    break
            except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
                last = repr(exc)
            if attempt < self.cfg.max_retries:
                self._sleep(min(30.0, 0.5 * 2 ** attempt))
        raise ClientError(f"chat request to {self.cfg.endpoint} failed: {last}")


class MockChatClient:
    """Offline stand-in for the VLM and the summarising LLM.

    Description requests return ``annotator(image_ref, aspect)`` when an
    annotator is given and it returns text, else the canned example answer.
    Summary requests return the canned summary, or with
    ``summary_mode="majority"`` the most frequent input sentence.
    """

    def __init__(self, catalog: Optional[PromptCatalog] = None, annotator=None,
                 summary_mode: str = "canned", model: str = "mock-vlm"):
        self.catalog = catalog or PromptCatalog()
        self.annotator = annotator
        self.summary_mode = summary_mode
        self.model = model
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, messages: List[dict]) -> str:
        with self._lock:
            self.calls += 1
        msg = messages[-1]
        text = _message_text(msg)
        aspect = self.catalog.aspect_of(text)
        if aspect is None:
            raise ClientError("mock client received an unrecognised prompt")
        if aspect in SUMMARY_ASPECTS:
            if self.summary_mode == "majority":
                items = re.findall(r"^\d+\. (.*)$", text, flags=re.M)
                if items:
                    counts = collections.Counter(items)
                    return max(counts, key=lambda s: (counts[s], -items.index(s)))
            return CANNED_RESPONSES[aspect]
        if self.annotator is not None:
            ann = self.annotator(_message_image(msg), aspect)
            if ann:
                return ann
        return CANNED_RESPONSES[aspect]


class EchoClient:
    """Returns the information block of a summary request verbatim."""

    model = "echo"

    def __init__(self):
        self.calls = 0

    def complete(self, messages: List[dict]) -> str:
        self.calls += 1
        items = re.findall(r"^\d+\. (.*)$", _message_text(messages[-1]), flags=re.M)
        return " ".join(items)


def make_client(cfg: ClientConfig, catalog: Optional[PromptCatalog] = None, annotator=None):
    if cfg.mock:
        return MockChatClient(catalog, annotator, "majority" if annotator else "canned", cfg.model)
    return HTTPChatClient(cfg)


# ----------------------------------------------------------------------- cache

class CacheCorruptionError(ValidationError):
    pass


class CacheConflictError(ValidationError):
    pass


class DescriptionCache:
    """Append-only JSON-lines store keyed by (image_id, aspect, prompt_sha256, model)."""

    FIELDS = ("image_id", "aspect", "prompt_sha256", "model", "text")

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._data: Dict[tuple, str] = {}
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.endswith("\n"):
                    raise CacheCorruptionError(f"{self.path}:{lineno}: truncated record")
                try:
                    rec = json.loads(line)
                    key = tuple(rec[f] for f in self.FIELDS[:4])
                    text = rec["text"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise CacheCorruptionError(f"{self.path}:{lineno}: unreadable record ({exc})") from exc
                self._remember(key, text)

    def _remember(self, key: tuple, text: str) -> bool:
        old = self._data.get(key)
        if old is not None and old != text:
            raise CacheConflictError(f"conflicting cached texts for key {key}")
        self._data[key] = text
        return old is None

    def __len__(self) -> int:
        return len(self._data)

    def get(self, image_id: str, aspect: str, prompt_sha256: str, model: str) -> Optional[str]:
        return self._data.get((image_id, aspect, prompt_sha256, model))

    def put(self, image_id: str, aspect: str, prompt_sha256: str, model: str, text: str) -> None:
        key = (image_id, aspect, prompt_sha256, model)
        with self._lock:
            if not self._remember(key, text):
                return
            line = json.dumps(dict(zip(self.FIELDS, (*key, text))), ensure_ascii=False) + "\n"
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fcntl.flock(fh, fcntl.LOCK_EX)
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
                fcntl.flock(fh, fcntl.LOCK_UN)

    def records(self) -> Iterable[dict]:
        for key, text in self._data.items():
            yield dict(zip(self.FIELDS, (*key, text)))


def describe_image(image_ref: str, aspect: str, client: ChatClient, cache: DescriptionCache,
                   catalog: Optional[PromptCatalog] = None, image_id: Optional[str] = None) -> str:
    catalog = catalog or PromptCatalog()
    if aspect not in DESCRIPTION_ASPECTS:
        raise ValidationError(f"unknown description aspect {aspect!r}")
    prompt = catalog.prompt(aspect)
    key = (image_id or image_ref, aspect, sha256_text(prompt), client.model)
    hit = cache.get(*key)
    if hit is not None:
        return hit
    text = client.complete(vision_messages(prompt, image_ref))
    cache.put(*key, text)
    return text


def summarize_identity(texts: Sequence[str], aspect: str, client: ChatClient, cache: DescriptionCache,
                       catalog: Optional[PromptCatalog] = None, group_id: str = "") -> str:
    """Merge several descriptions of one person (or outfit) into one text."""
    catalog = catalog or PromptCatalog()
    if aspect not in SUMMARY_ASPECTS:
        raise ValidationError(f"summary aspect must be one of {SUMMARY_ASPECTS}")
    if not texts:
        raise ValidationError("summarize_identity needs at least one text")
    if len(texts) == 1:
        return texts[0]
    messages = summary_messages(catalog.prompt(aspect), texts)
    key = (f"group:{group_id}", aspect, sha256_text(_message_text(messages[0])), client.model)
    hit = cache.get(*key)
    if hit is not None:
        return hit
    text = client.complete(messages)
    cache.put(*key, text)
    return text


@dataclass
class DescriptionSet:
    image_id: str
    texts: Dict[str, str]
    identity_summary_biometric: str
    clothing_summary: Optional[str] = None


def describe_dataset(
    items: Sequence[tuple],
    aspects: Sequence[str],
    client: ChatClient,
    cache: DescriptionCache,
    catalog: Optional[PromptCatalog] = None,
    max_in_flight: int = 4,
    clothing_summaries: bool = False,
) -> List[DescriptionSet]:
    """Describe every ``(image_id, image_ref, pid, clothid)`` item and summarise per identity.

    Per-image requests run on at most ``max_in_flight`` threads; results keep
    the input order.
    """
    catalog = catalog or PromptCatalog()
    aspects = list(dict.fromkeys(["biometric", *aspects]))
    jobs = [(it, a) for it in items for a in aspects]

    def run(job):
        (image_id, ref, _, _), aspect = job
        return describe_image(ref, aspect, client, cache, catalog, image_id)

    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        texts = list(pool.map(run, jobs))
    per_image: Dict[str, Dict[str, str]] = collections.defaultdict(dict)
    for ((image_id, _, _, _), aspect), text in zip(jobs, texts):
        per_image[image_id][aspect] = text

    by_pid: Dict[int, List[str]] = collections.defaultdict(list)
    by_cloth: Dict[int, List[str]] = collections.defaultdict(list)
    for image_id, _, pid, clothid in items:
        by_pid[pid].append(per_image[image_id]["biometric"])
        if "clothing" in per_image[image_id]:
            by_cloth[clothid].append(per_image[image_id]["clothing"])
    bio = {pid: summarize_identity(t, "biometric_summary", client, cache, catalog, f"pid:{pid}")
           for pid, t in sorted(by_pid.items())}
    cloth = {}
    if clothing_summaries:
        cloth = {c: summarize_identity(t, "clothing_summary", client, cache, catalog, f"cloth:{c}")
                 for c, t in sorted(by_cloth.items())}
    return [
        DescriptionSet(image_id, per_image[image_id], bio[pid], cloth.get(clothid))
        for image_id, _, pid, clothid in items
    ]


# ------------------------------------------------------------------ embedding

@dataclass
class TextFeature:
    vector: np.ndarray
    aspect: str
    source_text_hash: str


class TextEncoder(Protocol):
    dim: int

    def embed(self, text: str, aspect: str) -> TextFeature: ...


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise ValidationError("text embedding has zero or non-finite norm")
    return v / n


class HashTextEncoder:
    """Offline encoder: sum of seeded Gaussian vectors per lower-cased word token."""

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ValidationError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self._tokens: Dict[str, np.ndarray] = {}

    def _token(self, tok: str) -> np.ndarray:
        vec = self._tokens.get(tok)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}:{tok}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = self._tokens[tok] = rng.standard_normal(self.dim)
        return vec

    def embed(self, text: str, aspect: str) -> TextFeature:
        if not text or not text.strip():
            raise ValidationError("cannot embed empty text")
        tokens = re.findall(r"\w+", text.lower()) or [text]
        vec = np.zeros(self.dim)
        for tok in tokens:
            vec += self._token(tok)
        return TextFeature(_unit(vec), aspect, sha256_text(text))


class OracleTextEncoder:
    """Looks up a known feature vector per ``(aspect, text)``, e.g. synthetic ground truth."""

    def __init__(self, table: Mapping[tuple, np.ndarray]):
        self.table = dict(table)
        dims = {len(v) for v in self.table.values()}
        if len(dims) > 1:
            raise ValidationError("oracle vectors must share one dimension")
        self.dim = dims.pop() if dims else 0

    def embed(self, text: str, aspect: str) -> TextFeature:
        if not text:
            raise ValidationError("cannot embed empty text")
        try:
            vec = np.asarray(self.table[(aspect, text)], dtype=np.float64)
        except KeyError:
            raise ValidationError(f"no oracle feature for aspect {aspect!r} text {text[:40]!r}") from None
        return TextFeature(_unit(vec), aspect, sha256_text(text))


class ExternalTextEncoder:
    """Adapter around any ``fn(list_of_texts) -> (n, dim) array`` backend."""

    def __init__(self, fn: Callable[[List[str]], np.ndarray], dim: int):
        self.fn = fn
        self.dim = dim

    def embed(self, text: str, aspect: str) -> TextFeature:
        if not text:
            raise ValidationError("cannot embed empty text")
        vec = np.asarray(self.fn([text]), dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.dim:
            raise ValidationError(f"backend returned {vec.shape[0]} dims, expected {self.dim}")
        return TextFeature(_unit(vec), aspect, sha256_text(text))


def embed_text(text: str, aspect: str, encoder: TextEncoder) -> TextFeature:
    return encoder.embed(text, aspect)


def text_features_from_descriptions(
    descriptions: Sequence[DescriptionSet],
    encoder: TextEncoder,
    factors: Sequence[str],
    use_clothing_summary: bool = False,
) -> Dict[str, np.ndarray]:
    """Stack per-image text features: ``biometric`` from the identity summary, one array per factor."""
    out: Dict[str, List[np.ndarray]] = {"biometric": [], **{f: [] for f in factors}}
    memo: Dict[tuple, np.ndarray] = {}

    def vec(text, aspect):
        key = (text, aspect)
        if key not in memo:
            memo[key] = encoder.embed(text, aspect).vector
        return memo[key]

    for d in descriptions:
        out["biometric"].append(vec(d.identity_summary_biometric, "biometric"))
        for f in factors:
            if f == "clothing" and use_clothing_summary and d.clothing_summary:
                text = d.clothing_summary
            else:
                text = d.texts.get(f)
            if not text:
                raise ValidationError(f"image {d.image_id} has no {f!r} description")
            out[f].append(vec(text, f))
    return {k: np.asarray(v, dtype=np.float32) for k, v in out.items()}
