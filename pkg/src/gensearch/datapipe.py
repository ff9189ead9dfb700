"""Quality filtering, seeded bench/SFT/RL splits, and overlap audits."""

from __future__ import annotations

import enum
import json
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import __version__

MANIFEST_VERSION = 1

SCIENCE_KNOWLEDGE_CATEGORIES = (
    "astronomy",
    "biology",
    "chemistry",
    "physics",
    "engineering",
    "medicine",
    "industry",
    "architecture",
    "history",
    "geography",
    "religion",
    "politics",
    "culture",
    "art",
    "sports",
)
POP_CULTURE_NEWS_CATEGORIES = ("anime", "games", "films", "celebrities", "posters", "general news")
CATEGORIES = SCIENCE_KNOWLEDGE_CATEGORIES + POP_CULTURE_NEWS_CATEGORIES

_ALIASES = {"game": "games", "film": "films", "celebrity": "celebrities", "poster": "posters", "sport": "sports"}

SCORE_DIMENSIONS = ("requires_search", "correctness", "faithfulness", "aesthetics", "text_clarity", "safety")


class DataError(ValueError):
    code = "DataError"

    def __str__(self) -> str:
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg else self.code


class UnknownCategory(DataError):
    code = "UnknownCategory"


class InsufficientRecords(DataError):
    code = "InsufficientRecords"


class MalformedRecord(DataError):
    code = "MalformedRecord"


class Subset(str, enum.Enum):
    SCIENCE_KNOWLEDGE = "science_knowledge"
    POP_CULTURE_NEWS = "pop_culture_news"


def normalize_category(category: str) -> str:
    if not isinstance(category, str):
        raise UnknownCategory(repr(category))
    key = " ".join(category.replace("_", " ").replace("&", " ").lower().split())
    key = _ALIASES.get(key, key)
    if key not in CATEGORIES:
        raise UnknownCategory(repr(category))
    return key


def subset_of(category: str) -> Subset:
    key = normalize_category(category)
    if key in SCIENCE_KNOWLEDGE_CATEGORIES:
        return Subset.SCIENCE_KNOWLEDGE
    return Subset.POP_CULTURE_NEWS


@dataclass
class DatasetRecord:
    id: str
    prompt: str
    category: str
    quality_scores: dict[str, float]
    prompt_token_count: int
    search_consistency: bool = True
    trajectory_ref: str | None = None
    gt_image_ref: str | None = None
    verified: bool | None = None

    def __post_init__(self) -> None:
        self.category = normalize_category(self.category)
        for dim, v in self.quality_scores.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0 <= v <= 1:
                raise MalformedRecord(f"{self.id}: score {dim}={v!r} outside [0, 1]")
        if self.prompt_token_count < 0:
            raise MalformedRecord(f"{self.id}: negative prompt_token_count")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> DatasetRecord:
        try:
            return cls(
                id=str(doc["id"]),
                prompt=doc["prompt"],
                category=doc["category"],
                quality_scores=dict(doc["quality_scores"]),
                prompt_token_count=int(doc["prompt_token_count"]),
                search_consistency=bool(doc.get("search_consistency", True)),
                trajectory_ref=doc.get("trajectory_ref"),
                gt_image_ref=doc.get("gt_image_ref"),
                verified=doc.get("verified"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise MalformedRecord(f"{exc.__class__.__name__}: {exc}") from None

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        if out["verified"] is None:
            del out["verified"]
        return out


def _default_min_scores() -> dict[str, float]:
    return {d: (1.0 if d == "safety" else 0.5) for d in SCORE_DIMENSIONS}


@dataclass
class FilterRules:
    max_prompt_tokens: int = 512
    min_scores: dict[str, float] = field(default_factory=_default_min_scores)
    require_search_consistency: bool = True

    def __post_init__(self) -> None:
        if self.max_prompt_tokens < 1:
            raise ValueError("max_prompt_tokens must be >= 1")
        for dim, t in self.min_scores.items():
            if not 0 <= t <= 1:
                raise ValueError(f"threshold {dim}={t} outside [0, 1]")


@dataclass
class FilterResult:
    kept: list[DatasetRecord]
    dropped: list[tuple[DatasetRecord, str]]


def drop_reason(record: DatasetRecord, rules: FilterRules) -> str | None:
    """First failing check, or None when the record passes."""
    for dim, threshold in rules.min_scores.items():
        score = record.quality_scores.get(dim)
        if score is None or score < threshold:
            return dim
    if record.prompt_token_count > rules.max_prompt_tokens:
        return "token_length"
    if rules.require_search_consistency and not record.search_consistency:
        return "search_consistency"
    return None


def filter_records(records: Iterable[DatasetRecord], rules: FilterRules = FilterRules()) -> FilterResult:
    kept, dropped = [], []
    for rec in records:
        reason = drop_reason(rec, rules)
        if reason is None:
            kept.append(rec)
        else:
            dropped.append((rec, reason))
    return FilterResult(kept, dropped)


@dataclass
class SplitSpec:
    bench_size: int = 630
    sft_size: int = 10000
    rl_size: int = 6000
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.bench_size, self.sft_size, self.rl_size) < 0:
            raise ValueError("split sizes must be >= 0")

    @property
    def total(self) -> int:
        return self.bench_size + self.sft_size + self.rl_size


@dataclass
class Splits:
    bench: list[DatasetRecord]
    sft: list[DatasetRecord]
    rl: list[DatasetRecord]


def split_dataset(kept: Sequence[DatasetRecord], spec: SplitSpec) -> Splits:
    if len(kept) < spec.total:
        raise InsufficientRecords(f"need {spec.total}, have {len(kept)}")
    ids = [r.id for r in kept]
    if len(set(ids)) != len(ids):
        raise MalformedRecord("duplicate ids in input; splits could overlap")
    order = list(kept)
    random.Random(spec.seed).shuffle(order)
    a, b = spec.bench_size, spec.bench_size + spec.sft_size
    bench = [DatasetRecord(**{**asdict(r), "verified": False}) for r in order[:a]]
    return Splits(bench=bench, sft=order[a:b], rl=order[b : b + spec.rl_size])


@dataclass
class AuditReport:
    overlaps: dict[str, list[str]]
    histograms: dict[str, dict[str, int]]

    @property
    def passed(self) -> bool:
        return not self.overlaps

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": MANIFEST_VERSION,
            "passed": self.passed,
            "overlaps": self.overlaps,
            "histograms": self.histograms,
        }


def audit_manifests(
    bench: Sequence[DatasetRecord], sft: Sequence[DatasetRecord], rl: Sequence[DatasetRecord]
) -> AuditReport:
    """``overlaps`` maps each id seen in more than one manifest to the manifest names."""
    named = {"bench": bench, "sft": sft, "rl": rl}
    seen: dict[str, list[str]] = {}
    for name, records in named.items():
        for rid in dict.fromkeys(r.id for r in records):
            seen.setdefault(rid, []).append(name)
    overlaps = {rid: names for rid, names in sorted(seen.items()) if len(names) > 1}
    histograms = {name: dict(sorted(Counter(r.category for r in recs).items())) for name, recs in named.items()}
    return AuditReport(overlaps, histograms)


# -- manifest files -----------------------------------------------------------


def manifest_header(kind: str, **extra: Any) -> dict[str, Any]:
    return {"version": MANIFEST_VERSION, "kind": kind, "tool_version": __version__, **extra}


def write_manifest(path: str | Path, header: Mapping[str, Any], records: Iterable[DatasetRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"header": dict(header)}, ensure_ascii=False) + "\n")
        for r in records:
            f.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


def read_manifest(path: str | Path) -> tuple[dict[str, Any], list[DatasetRecord]]:
    """Read a manifest. The header line is optional; returns ``({}, records)`` without one."""
    header: dict[str, Any] = {}
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except ValueError as exc:
                raise MalformedRecord(f"{path}:{lineno}: {exc}") from None
            if not isinstance(doc, dict):
                raise MalformedRecord(f"{path}:{lineno}: expected a JSON object")
            if lineno == 1 and "header" in doc:
                header = doc["header"]
                continue
            try:
                records.append(DatasetRecord.from_dict(doc))
            except DataError as exc:
                detail = exc.args[0] if exc.args else ""
                raise type(exc)(f"{path}:{lineno}: {detail}") from None
    return header, records
