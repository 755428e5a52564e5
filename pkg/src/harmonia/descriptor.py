"""Imaging-condition descriptions via a pluggable vision-language provider.

A description is three short word lists: the foreground object's name, the
foreground's imaging condition, and the background's imaging condition
(for example: bird / bright orange / sunset blue). The engine requests K
candidates per iteration and scores the results downstream; nothing in
this module depends on the diffusion stack.
"""

from __future__ import annotations

import base64
import dataclasses
import io
import json
import os
import re
import urllib.request
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

from .errors import DescriptionParseError, InputError, ProviderUnavailable
from .imagecore import CompositeCase

INSTRUCTION = ("Please describe the imaging condition of both the "
               "foreground object and background.")
DEFAULT_SCOPE = ("weather", "season", "time", "color tone")
MAX_WORDS_PER_FIELD = 4
PROVIDER_ATTEMPTS = 3

_WORD_STRIP = ",.;:!?\"'()[]{}"


@dataclasses.dataclass
class DescriptorConfig:
    scope: tuple[str, ...] = DEFAULT_SCOPE
    k: int = 3
    attempts: int = PROVIDER_ATTEMPTS


@dataclasses.dataclass
class ConditionDescription:
    """Parsed three-field description of a composite's imaging conditions."""

    object_words: list[str]
    fore_condition: list[str]
    back_condition: list[str]
    provider_id: str = ""
    raw_response: str = ""

    def __post_init__(self):
        for field in ("object_words", "fore_condition", "back_condition"):
            words = getattr(self, field)
            if not words:
                raise InputError(f"{field} must contain at least one word")
            if len(words) > MAX_WORDS_PER_FIELD:
                raise InputError(
                    f"{field} exceeds {MAX_WORDS_PER_FIELD} words: {words}")

    def key(self) -> tuple:
        """Identity for duplicate detection: the three word lists."""
        return (tuple(self.object_words), tuple(self.fore_condition),
                tuple(self.back_condition))


class DescriptionProvider(Protocol):
    provider_id: str

    def describe(self, task_prompt: str, case: CompositeCase,
                 k: int) -> list[str]:
        """Return k raw response strings for the given composite."""
        ...


def build_task_prompt(config: DescriptorConfig | None = None) -> str:
    """Assemble the instruction sent to the provider.

    The prompt carries the base instruction, the allowed description scope
    (omitted when the scope list is empty), and the required labeled
    output format.
    """
    config = config or DescriptorConfig()
    parts = [INSTRUCTION]
    if config.scope:
        parts.append(
            "Limit the condition descriptions to environmental factors "
            "such as: " + ", ".join(config.scope) + ".")
    parts.append(
        "Answer in one line, exactly in this format: "
        "object: <words> | foreground: <words> | background: <words>. "
        f"Use at most {MAX_WORDS_PER_FIELD} words per field.")
    return " ".join(parts)


def _clean_words(text: str) -> list[str]:
    words = []
    for token in re.split(r"[\s,]+", text.strip().lower()):
        token = token.strip(_WORD_STRIP)
        if token:
            words.append(token)
    return words[:MAX_WORDS_PER_FIELD]


_FIELD_ALIASES = {
    "object_words": ("object", "object name", "foreground object", "name"),
    "fore_condition": ("foreground condition", "foreground", "fore",
                       "object condition"),
    "back_condition": ("background condition", "background", "back",
                       "environment"),
}


def _fields_from_mapping(mapping: dict) -> Optional[dict[str, list[str]]]:
    lowered = {str(k).strip().lower(): v for k, v in mapping.items()}
    out = {}
    for field, aliases in _FIELD_ALIASES.items():
        for alias in aliases:
            if alias in lowered:
                value = lowered[alias]
                if isinstance(value, (list, tuple)):
                    value = " ".join(str(v) for v in value)
                words = _clean_words(str(value))
                if words:
                    out[field] = words
                break
    return out if len(out) == 3 else None


def _try_json(raw: str) -> Optional[dict[str, list[str]]]:
    start, end = raw.find("{"), raw.rfind("}")
    if start < 0 or end <= start:
        return None
    snippet = raw[start:end + 1]
    for candidate in (snippet, snippet.replace("'", '"')):
        try:
            data = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict):
            fields = _fields_from_mapping(data)
            if fields:
                return fields
    return None


def _try_labeled(raw: str) -> Optional[dict[str, list[str]]]:
    # longest alias first so "foreground condition" beats "foreground"
    out = {}
    for field, aliases in _FIELD_ALIASES.items():
        for alias in sorted(aliases, key=len, reverse=True):
            # captures stop at separators and sentence ends so trailing
            # prose does not leak into the word list
            pattern = re.compile(
                re.escape(alias) + r"\s*[:=]\s*([^|\n{}.]+)", re.IGNORECASE)
            match = pattern.search(raw)
            if match:
                words = _clean_words(match.group(1))
                if words:
                    out[field] = words
                    break
    return out if len(out) == 3 else None


def _try_bare_triple(raw: str) -> Optional[dict[str, list[str]]]:
    lines = [l for l in raw.splitlines() if l.strip()]
    if len(lines) != 1 or ":" in lines[0]:
        return None
    parts = lines[0].split("|")
    if len(parts) != 3:
        return None
    words = [_clean_words(p) for p in parts]
    if all(words):
        return {"object_words": words[0], "fore_condition": words[1],
                "back_condition": words[2]}
    return None


def parse_vlm_response(raw: str, provider_id: str = "") -> ConditionDescription:
    """Extract a ConditionDescription from raw provider text.

    Accepts the labeled-line contract format, JSON-ish shapes, labels
    embedded in prose, and a bare three-part pipe line. Words are
    lowercased, punctuation-stripped, and capped at four per field.

    Raises:
        DescriptionParseError: any of the three fields is missing.
    """
    if not raw or not raw.strip():
        raise DescriptionParseError("empty provider response")
    fields = _try_json(raw) or _try_labeled(raw) or _try_bare_triple(raw)
    if fields is None:
        raise DescriptionParseError(
            f"could not extract object/foreground/background from: {raw!r}")
    return ConditionDescription(provider_id=provider_id, raw_response=raw,
                                **fields)


def format_description(desc: ConditionDescription) -> str:
    """Canonical labeled-line form; parse(format(parse(x))) == parse(x)."""
    return ("object: " + " ".join(desc.object_words)
            + " | foreground: " + " ".join(desc.fore_condition)
            + " | background: " + " ".join(desc.back_condition))


class ScriptedProvider:
    """File- or list-backed provider for tests and offline runs.

    Responses are served sequentially from the line list, starting at an
    offset derived from the seed, wrapping around. Fully deterministic
    for a fixed (lines, seed, call sequence).
    """

    def __init__(self, lines: Sequence[str] | str | Path, seed: int = 0,
                 provider_id: str = "scripted"):
        if isinstance(lines, (str, Path)):
            text = Path(lines).read_text()
            lines = [l for l in text.splitlines()
                     if l.strip() and not l.lstrip().startswith("#")]
        self.lines = list(lines)
        if not self.lines:
            raise InputError("scripted provider needs at least one response line")
        self.provider_id = provider_id
        self._cursor = seed % len(self.lines)

    def describe(self, task_prompt: str, case: CompositeCase,
                 k: int) -> list[str]:
        out = []
        for _ in range(k):
            out.append(self.lines[self._cursor % len(self.lines)])
            self._cursor += 1
        return out


class GeminiProvider:
    """Adapter for the Gemini REST API.

    Credentials come from the GEMINI_API_KEY environment variable (or the
    api_key argument). The transport is injectable so retry behavior is
    testable without network access.
    """

    def __init__(self, model: str = "gemini-1.5-flash",
                 api_key: Optional[str] = None,
                 endpoint: str = "https://generativelanguage.googleapis.com",
                 timeout: float = 30.0,
                 transport: Optional[Callable[[str, bytes], str]] = None):
        self.model = model
        self.api_key = api_key or os.environ.get("GEMINI_API_KEY", "")
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.provider_id = f"gemini:{model}"
        self._transport = transport or self._http_post

    def _http_post(self, url: str, body: bytes) -> str:
        req = urllib.request.Request(
            url, data=body, headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read().decode("utf-8")

    @staticmethod
    def _png_b64(case: CompositeCase) -> tuple[str, str]:
        from PIL import Image

        buf_img, buf_mask = io.BytesIO(), io.BytesIO()
        Image.fromarray(case.image.to_uint8(), mode="RGB").save(buf_img, "PNG")
        Image.fromarray((case.mask.values * 255).astype("uint8"),
                        mode="L").save(buf_mask, "PNG")
        return (base64.b64encode(buf_img.getvalue()).decode("ascii"),
                base64.b64encode(buf_mask.getvalue()).decode("ascii"))

    def describe(self, task_prompt: str, case: CompositeCase,
                 k: int) -> list[str]:
        if not self.api_key:
            raise ProviderUnavailable("GEMINI_API_KEY is not set")
        img_b64, mask_b64 = self._png_b64(case)
        url = (f"{self.endpoint}/v1beta/models/{self.model}:generateContent"
               f"?key={self.api_key}")
        prompt = (task_prompt + " The second image is the foreground mask "
                  "(white = foreground object).")
        body = json.dumps({
            "contents": [{"parts": [
                {"text": prompt},
                {"inline_data": {"mime_type": "image/png", "data": img_b64}},
                {"inline_data": {"mime_type": "image/png", "data": mask_b64}},
            ]}],
            "generationConfig": {"temperature": 1.0},
        }).encode("utf-8")

        responses = []
        for _ in range(k):
            payload = json.loads(self._transport(url, body))
            try:
                text = payload["candidates"][0]["content"]["parts"][0]["text"]
            except (KeyError, IndexError, TypeError) as exc:
                raise ProviderUnavailable(
                    f"unexpected response shape: {exc}") from exc
            responses.append(text)
        return responses


def _describe_with_retry(provider: DescriptionProvider, prompt: str,
                         case: CompositeCase, k: int, attempts: int) -> list[str]:
    last_error: Exception | None = None
    for _ in range(attempts):
        try:
            raws = provider.describe(prompt, case, k)
            if len(raws) != k:
                raise ProviderUnavailable(
                    f"provider returned {len(raws)} responses, wanted {k}")
            return raws
        except Exception as exc:  # noqa: BLE001 - adapter failures vary widely
            last_error = exc
    raise ProviderUnavailable(
        f"provider failed after {attempts} attempts: {last_error}")


def generate_descriptions(case: CompositeCase, provider: DescriptionProvider,
                          k: int = 3,
                          config: DescriptorConfig | None = None
                          ) -> list[ConditionDescription]:
    """Request and parse k candidate descriptions for a composite.

    Unparseable responses and duplicates each trigger one repair round of
    k fresh responses; whatever distinct parses exist afterwards are used,
    cycled if needed so exactly k descriptions come back.

    Raises:
        ProviderUnavailable: provider kept failing through its attempt
            budget.
        DescriptionParseError: not a single response in either round could
            be parsed.
    """
    if k < 1:
        raise InputError("k must be at least 1")
    config = config or DescriptorConfig()
    prompt = build_task_prompt(config)

    def parse_round() -> list[ConditionDescription]:
        raws = _describe_with_retry(provider, prompt, case, k, config.attempts)
        parsed = []
        for raw in raws:
            try:
                parsed.append(parse_vlm_response(
                    raw, provider_id=getattr(provider, "provider_id", "")))
            except DescriptionParseError:
                continue
        return parsed

    descriptions = parse_round()
    distinct = _distinct(descriptions)
    if len(distinct) < k:
        # one repair round, for parse failures and duplicates alike
        distinct = _distinct(distinct + parse_round())
    if not distinct:
        raise DescriptionParseError(
            f"no parseable description in {2 * k} responses")
    out = [distinct[i % len(distinct)] for i in range(k)]
    return out


def _distinct(descriptions: list[ConditionDescription]) -> list[ConditionDescription]:
    seen: set[tuple] = set()
    out = []
    for desc in descriptions:
        if desc.key() not in seen:
            seen.add(desc.key())
            out.append(desc)
    return out
