"""Round format for the search agent: ``<think>`` plus exactly one action.

A round is either a single ``<tool_call>`` or a single ``<answer>``. The
answer body is a JSON object with ``gen_prompt`` and ``reference_images``.
Text outside the recognized tags is ignored.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

TOOL_NAMES = ("search", "image_search", "browse")
REQUIRED_ARGS: dict[str, tuple[str, ...]] = {
    "search": ("queries",),
    "image_search": ("query",),
    "browse": ("url", "query"),
}
MAX_REFERENCES = 5

_IMG_ID_RE = re.compile(r"^IMG_(\d+)$")
_IMG_IN_TEXT_RE = re.compile(r"IMG_\d+")
_URL_RE = re.compile(r"https?://", re.IGNORECASE)
_FENCE_RE = re.compile(r"^```[A-Za-z0-9_-]*\s*\n?(.*?)\n?\s*```$", re.DOTALL)
_ORDINAL_RE = re.compile(
    r"\bthe\s+(first|second|third|fourth|fifth|only)\s+reference\s+image\b",
    re.IGNORECASE | re.ASCII,
)
ORDINALS = {"first": 1, "second": 2, "third": 3, "fourth": 4, "fifth": 5, "only": 1}


class ProtocolError(ValueError):
    """A round or answer payload that breaks the output contract."""

    code = "ProtocolError"

    def __str__(self) -> str:
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg else self.code


def _error(name: str) -> type[ProtocolError]:
    return type(name, (ProtocolError,), {"code": name})


MissingThink = _error("MissingThink")
MultipleThink = _error("MultipleThink")
MultipleToolCalls = _error("MultipleToolCalls")
MultipleAnswers = _error("MultipleAnswers")
BothActionAndAnswer = _error("BothActionAndAnswer")
NoAction = _error("NoAction")
UnclosedTag = _error("UnclosedTag")
MalformedJson = _error("MalformedJson")
ToolCallInFinalStep = _error("ToolCallInFinalStep")
UnknownTool = _error("UnknownTool")
MissingArgument = _error("MissingArgument")
WrongType = _error("WrongType")
MissingKey = _error("MissingKey")
ExtraKey = _error("ExtraKey")
EmptyReferences = _error("EmptyReferences")
TooManyReferences = _error("TooManyReferences")
BadImageIdSyntax = _error("BadImageIdSyntax")


class ParseMode(str, enum.Enum):
    NORMAL = "normal"
    FINAL_STEP = "final_step_override"
    TRUNCATION_RECOVERY = "truncation_recovery"


@dataclass(frozen=True, order=True)
class ImageId:
    ordinal: int

    def __post_init__(self) -> None:
        if isinstance(self.ordinal, bool) or not isinstance(self.ordinal, int) or self.ordinal < 1:
            raise BadImageIdSyntax(f"ordinal must be a positive integer, got {self.ordinal!r}")

    @classmethod
    def parse(cls, text: Any) -> ImageId:
        """Parse canonical ``IMG_###`` text (at least three digits, no extra padding)."""
        if not isinstance(text, str):
            raise BadImageIdSyntax(f"image id must be a string, got {type(text).__name__}")
        m = _IMG_ID_RE.match(text)
        if not m:
            raise BadImageIdSyntax(repr(text))
        digits = m.group(1)
        if len(digits) < 3 or (len(digits) > 3 and digits[0] == "0"):
            raise BadImageIdSyntax(f"non-canonical padding in {text!r}")
        value = int(digits)
        if value < 1:
            raise BadImageIdSyntax(repr(text))
        return cls(value)

    def __str__(self) -> str:
        return f"IMG_{self.ordinal:03d}"


@dataclass(frozen=True)
class ToolCallRequest:
    name: str
    arguments: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "arguments": self.arguments}


@dataclass(frozen=True)
class ReferenceImage:
    img_id: ImageId
    note: str

    def to_dict(self) -> dict[str, Any]:
        return {"img_id": str(self.img_id), "note": self.note}


@dataclass(frozen=True)
class AnswerPayload:
    gen_prompt: str
    reference_images: tuple[ReferenceImage, ...]

    @property
    def image_ids(self) -> list[ImageId]:
        return [ref.img_id for ref in self.reference_images]

    def to_dict(self) -> dict[str, Any]:
        return {
            "gen_prompt": self.gen_prompt,
            "reference_images": [ref.to_dict() for ref in self.reference_images],
        }


Action = Union[ToolCallRequest, AnswerPayload]


@dataclass(frozen=True)
class ParsedRound:
    think: str | None
    action: Action
    mode: ParseMode = ParseMode.NORMAL

    @property
    def is_tool_call(self) -> bool:
        return isinstance(self.action, ToolCallRequest)

    @property
    def is_answer(self) -> bool:
        return isinstance(self.action, AnswerPayload)

    def to_dict(self) -> dict[str, Any]:
        if isinstance(self.action, ToolCallRequest):
            action = {"type": "tool_call", **self.action.to_dict()}
        else:
            action = {"type": "answer", **self.action.to_dict()}
        return {"think": self.think, "mode": self.mode.value, "action": action}


def _blocks(text: str, tag: str) -> list[str]:
    open_tag, close_tag = f"<{tag}>", f"</{tag}>"
    opens = text.count(open_tag)
    closes = text.count(close_tag)
    bodies = re.findall(re.escape(open_tag) + r"(.*?)" + re.escape(close_tag), text, re.DOTALL)
    if opens != closes or len(bodies) != opens:
        raise UnclosedTag(f"<{tag}> opened {opens} times, closed {closes} times")
    return bodies


def strip_fences(body: str) -> str:
    body = body.strip()
    m = _FENCE_RE.match(body)
    return m.group(1).strip() if m else body


def load_json_object(body: str) -> dict[str, Any]:
    """Decode a JSON object, tolerating code fences and surrounding whitespace."""
    try:
        doc = json.loads(strip_fences(body))
    except (ValueError, RecursionError) as exc:
        raise MalformedJson(str(exc)) from None
    if not isinstance(doc, dict):
        raise MalformedJson(f"expected a JSON object, got {type(doc).__name__}")
    return doc


def parse_tool_call(doc: Mapping[str, Any]) -> ToolCallRequest:
    for key in ("name", "arguments"):
        if key not in doc:
            raise MissingKey(key)
    extra = sorted(set(doc) - {"name", "arguments"})
    if extra:
        raise ExtraKey(", ".join(extra))
    name, args = doc["name"], doc["arguments"]
    if name not in TOOL_NAMES:
        raise UnknownTool(repr(name))
    if not isinstance(args, dict):
        raise WrongType("arguments must be an object")
    for key in REQUIRED_ARGS[name]:
        if key not in args:
            raise MissingArgument(f"{name}.{key}")
    if name == "search":
        queries = args["queries"]
        if not isinstance(queries, list) or not all(isinstance(q, str) for q in queries):
            raise WrongType("search.queries must be an array of strings")
    else:
        for key in REQUIRED_ARGS[name]:
            if not isinstance(args[key], str):
                raise WrongType(f"{name}.{key} must be a string")
    if "top_k" in args and (isinstance(args["top_k"], bool) or not isinstance(args["top_k"], int)):
        raise WrongType(f"{name}.top_k must be an integer")
    return ToolCallRequest(name=name, arguments=args)


def parse_answer_payload(doc: Mapping[str, Any] | str) -> AnswerPayload:
    """Structural checks only; ordering and id provenance belong to :func:`validate_answer`."""
    if isinstance(doc, str):
        doc = load_json_object(doc)
    for key in ("gen_prompt", "reference_images"):
        if key not in doc:
            raise MissingKey(key)
    extra = sorted(set(doc) - {"gen_prompt", "reference_images"})
    if extra:
        raise ExtraKey(", ".join(extra))
    gen_prompt, refs = doc["gen_prompt"], doc["reference_images"]
    if not isinstance(gen_prompt, str):
        raise WrongType("gen_prompt must be a string")
    if not isinstance(refs, list):
        raise WrongType("reference_images must be an array")
    if not refs:
        raise EmptyReferences()
    if len(refs) > MAX_REFERENCES:
        raise TooManyReferences(f"{len(refs)} > {MAX_REFERENCES}")
    items = []
    for i, item in enumerate(refs):
        if not isinstance(item, dict):
            raise WrongType(f"reference_images[{i}] must be an object")
        for key in ("img_id", "note"):
            if key not in item:
                raise MissingKey(f"reference_images[{i}].{key}")
        extra = sorted(set(item) - {"img_id", "note"})
        if extra:
            raise ExtraKey(f"reference_images[{i}]: " + ", ".join(extra))
        if not isinstance(item["note"], str):
            raise WrongType(f"reference_images[{i}].note must be a string")
        items.append(ReferenceImage(ImageId.parse(item["img_id"]), item["note"]))
    return AnswerPayload(gen_prompt=gen_prompt, reference_images=tuple(items))


def parse_round(text: str | bytes, mode: ParseMode = ParseMode.NORMAL) -> ParsedRound:
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    mode = ParseMode(mode)
    thinks = _blocks(text, "think")
    calls = _blocks(text, "tool_call")
    answers = _blocks(text, "answer")

    if mode is ParseMode.FINAL_STEP and calls:
        raise ToolCallInFinalStep()
    if len(thinks) > 1:
        raise MultipleThink()
    if calls and answers:
        raise BothActionAndAnswer()
    if len(calls) > 1:
        raise MultipleToolCalls(f"{len(calls)} <tool_call> blocks")
    if len(answers) > 1:
        raise MultipleAnswers(f"{len(answers)} <answer> blocks")
    if not calls and not answers:
        raise NoAction()
    if mode is ParseMode.NORMAL and not thinks:
        raise MissingThink()

    think = thinks[0].strip() if thinks else None
    if calls:
        action: Action = parse_tool_call(load_json_object(calls[0]))
    else:
        action = parse_answer_payload(load_json_object(answers[0]))
    return ParsedRound(think=think, action=action, mode=mode)


def _json_body(doc: Mapping[str, Any]) -> str:
    # "<" only occurs inside JSON strings, so escaping it keeps the body from
    # ever containing a closing tag while decoding to the same document.
    return json.dumps(doc, ensure_ascii=False).replace("<", "\\u003c")


def serialize_round(rnd: ParsedRound) -> str:
    """Canonical text for a round; ``parse_round(serialize_round(r), r.mode) == r``.

    ``think`` must not itself contain a ``<think>``, ``<tool_call>`` or
    ``<answer>`` tag (nothing can escape it) and is expected to be stripped.
    """
    parts = []
    if rnd.think is not None:
        parts.append(f"<think>{rnd.think}</think>")
    tag = "tool_call" if isinstance(rnd.action, ToolCallRequest) else "answer"
    parts.append(f"<{tag}>\n{_json_body(rnd.action.to_dict())}\n</{tag}>")
    return "\n".join(parts)


# -- answer validation -------------------------------------------------------


class ViolationCode(str, enum.Enum):
    UNSORTED_IDS = "UnsortedIds"
    DUPLICATE_IMAGE_ID = "DuplicateImageId"
    UNKNOWN_IMAGE_ID = "UnknownImageId"
    IMG_ID_IN_PROMPT = "ImgIdInPrompt"
    URL_IN_PROMPT = "UrlInPrompt"
    ORDINAL_MISMATCH = "OrdinalMismatch"
    NO_ORDINAL_REFERENCE = "NoOrdinalReference"


@dataclass(frozen=True)
class Violation:
    code: ViolationCode
    detail: str = ""

    def to_dict(self) -> dict[str, str]:
        return {"code": self.code.value, "detail": self.detail}


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def codes(self) -> list[ViolationCode]:
        return [v.code for v in self.violations]

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "violations": [v.to_dict() for v in self.violations]}


def ordinal_mentions(gen_prompt: str) -> list[int]:
    return [ORDINALS[m.group(1).lower()] for m in _ORDINAL_RE.finditer(gen_prompt)]


def validate_answer(payload: AnswerPayload, known_ids: set[ImageId] | frozenset[ImageId]) -> ValidationReport:
    found: list[Violation] = []
    ids = payload.image_ids

    if len(set(ids)) != len(ids):
        dupes = sorted({str(i) for i in ids if ids.count(i) > 1})
        found.append(Violation(ViolationCode.DUPLICATE_IMAGE_ID, ", ".join(dupes)))
    if any(a > b for a, b in zip(ids, ids[1:])):
        found.append(Violation(ViolationCode.UNSORTED_IDS, ", ".join(map(str, ids))))
    unknown = [str(i) for i in ids if i not in known_ids]
    if unknown:
        found.append(Violation(ViolationCode.UNKNOWN_IMAGE_ID, ", ".join(unknown)))

    prompt = payload.gen_prompt
    leaked = _IMG_IN_TEXT_RE.findall(prompt)
    if leaked:
        found.append(Violation(ViolationCode.IMG_ID_IN_PROMPT, ", ".join(leaked)))
    if _URL_RE.search(prompt):
        found.append(Violation(ViolationCode.URL_IN_PROMPT))

    mentions = ordinal_mentions(prompt)
    if not mentions:
        found.append(Violation(ViolationCode.NO_ORDINAL_REFERENCE))
    else:
        beyond = sorted({n for n in mentions if n > len(ids)})
        if beyond:
            found.append(
                Violation(
                    ViolationCode.ORDINAL_MISMATCH,
                    f"ordinal(s) {beyond} with {len(ids)} reference image(s)",
                )
            )
    return ValidationReport(tuple(found))
