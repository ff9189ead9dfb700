"""Judge outputs, K-Score, text reward, the dual reward and benchmark reports.

Rewards are computed in exact rational arithmetic and rounded once at the
end, so identical inputs give bit-identical floats regardless of term order.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

from .clients import ChatClient, Message, PolicyUnavailable
from .datapipe import Subset, subset_of
from .protocol import load_json_object

log = logging.getLogger(__name__)

KSCORE_LEVELS = (0, 0.5, 1)
TEXT_LEVELS = (0, 0.25, 0.5, 0.75, 1.0)
DIMENSIONS = ("faithfulness", "visual_correctness", "text_accuracy", "aesthetics")
KSCORE_KEYS = frozenset({"rationale", *DIMENSIONS, "text_accuracy_na"})
TEXT_KEYS = frozenset({"rationale", "score"})


class ScoringError(ValueError):
    code = "ScoringError"

    def __str__(self) -> str:
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg else self.code


class MissingKey(ScoringError):
    code = "MissingKey"


class ExtraKey(ScoringError):
    code = "ExtraKey"


class IllegalLevel(ScoringError):
    code = "IllegalLevel"


class NaInconsistency(ScoringError):
    code = "NaInconsistency"


class MalformedJudgment(ScoringError):
    code = "MalformedJudgment"


class OutOfRangeInput(ScoringError):
    code = "OutOfRangeInput"


class EmptySubset(ScoringError):
    code = "EmptySubset"


class JudgeError(RuntimeError):
    """The judge never produced a schema-valid reply."""


def _exact(x: float | int | str) -> Fraction:
    # decimal reading for config weights ("0.1" -> 1/10)
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.5
    # faithfulness, visual_correctness, text_accuracy, aesthetics
    weights: tuple[float, float, float, float] = (0.1, 0.4, 0.4, 0.1)

    def __post_init__(self) -> None:
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if len(self.weights) != 4 or any(w < 0 for w in self.weights):
            raise ValueError("weights must be four non-negative numbers")
        if sum(_exact(w) for w in self.weights) != 1:
            raise ValueError(f"weights must sum to 1, got {self.weights}")

    def exact_weights(self) -> dict[str, Fraction]:
        return {d: _exact(w) for d, w in zip(DIMENSIONS, self.weights)}


@dataclass(frozen=True)
class KScoreJudgment:
    rationale: str
    faithfulness: float
    visual_correctness: float
    text_accuracy: float
    aesthetics: float
    text_accuracy_na: bool = False

    def __post_init__(self) -> None:
        for dim in DIMENSIONS:
            _check_level(dim, getattr(self, dim), KSCORE_LEVELS)
        if self.text_accuracy_na and self.text_accuracy != 0.5:
            raise NaInconsistency(f"text_accuracy_na is true but text_accuracy = {self.text_accuracy}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "rationale": self.rationale,
            **{d: getattr(self, d) for d in DIMENSIONS},
            "text_accuracy_na": self.text_accuracy_na,
        }


@dataclass(frozen=True)
class TextJudgment:
    rationale: str
    score: float

    def __post_init__(self) -> None:
        _check_level("score", self.score, TEXT_LEVELS)


def _check_level(name: str, value: Any, levels: Sequence[float]) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value not in levels:
        raise IllegalLevel(f"{name} = {value!r}, expected one of {list(levels)}")


def _as_mapping(doc: Mapping[str, Any] | str) -> Mapping[str, Any]:
    if isinstance(doc, Mapping):
        return doc
    try:
        return load_json_object(doc)
    except ValueError as exc:
        raise MalformedJudgment(str(exc)) from None


def _check_keys(doc: Mapping[str, Any], expected: frozenset[str]) -> None:
    missing = sorted(expected - set(doc))
    if missing:
        raise MissingKey(", ".join(missing))
    extra = sorted(set(doc) - expected)
    if extra:
        raise ExtraKey(", ".join(extra))


def parse_kscore_judgment(doc: Mapping[str, Any] | str) -> KScoreJudgment:
    doc = _as_mapping(doc)
    _check_keys(doc, KSCORE_KEYS)
    if not isinstance(doc["rationale"], str):
        raise MalformedJudgment("rationale must be a string")
    if not isinstance(doc["text_accuracy_na"], bool):
        raise MalformedJudgment("text_accuracy_na must be a boolean")
    return KScoreJudgment(
        rationale=doc["rationale"],
        faithfulness=doc["faithfulness"],
        visual_correctness=doc["visual_correctness"],
        text_accuracy=doc["text_accuracy"],
        aesthetics=doc["aesthetics"],
        text_accuracy_na=doc["text_accuracy_na"],
    )


def parse_text_judgment(doc: Mapping[str, Any] | str) -> TextJudgment:
    doc = _as_mapping(doc)
    _check_keys(doc, TEXT_KEYS)
    if not isinstance(doc["rationale"], str):
        raise MalformedJudgment("rationale must be a string")
    return TextJudgment(doc["rationale"], doc["score"])


def kscore_exact(j: KScoreJudgment, cfg: RewardConfig = RewardConfig()) -> Fraction:
    weights = cfg.exact_weights()
    dims = [d for d in DIMENSIONS if not (d == "text_accuracy" and j.text_accuracy_na)]
    total = sum(weights[d] for d in dims)
    if total == 0:
        return Fraction(0)
    return sum(weights[d] * Fraction(getattr(j, d)) for d in dims) / total


def kscore_value(j: KScoreJudgment, cfg: RewardConfig = RewardConfig()) -> float:
    """Weighted K-Score in [0, 1]; an n/a text dimension drops out and the rest renormalize."""
    return float(kscore_exact(j, cfg))


def dual_reward(r_image: float, r_text: float, cfg: RewardConfig = RewardConfig()) -> float:
    for name, r in (("r_image", r_image), ("r_text", r_text)):
        if isinstance(r, bool) or not isinstance(r, (int, float)) or math.isnan(r) or not 0 <= r <= 1:
            raise OutOfRangeInput(f"{name} = {r!r}")
    alpha = Fraction(cfg.alpha)
    return float((1 - alpha) * Fraction(r_image) + alpha * Fraction(r_text))


def rollout_reward(image: KScoreJudgment, text: TextJudgment, cfg: RewardConfig = RewardConfig()) -> float:
    return dual_reward(kscore_value(image, cfg), text.score, cfg)


# -- benchmark aggregation ----------------------------------------------------


@dataclass(frozen=True)
class BenchmarkSample:
    id: str
    category: str
    judgment: KScoreJudgment

    @property
    def subset(self) -> Subset:
        return subset_of(self.category)


@dataclass(frozen=True)
class DimensionMeans:
    """Per-dimension means on the 0-1 scale; ``text_accuracy`` is None when no sample needed text."""

    faithfulness: float
    visual_correctness: float
    text_accuracy: float | None
    aesthetics: float


@dataclass
class SubsetReport:
    subset: Subset
    n: int
    n_text_applicable: int
    means: DimensionMeans
    kscore: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "n_text_applicable": self.n_text_applicable,
            "means": {
                d: None if getattr(self.means, d) is None else round(100 * getattr(self.means, d), 2)
                for d in DIMENSIONS
            },
            "kscore": round(100 * self.kscore, 2),
        }


REPORT_VERSION = 1


@dataclass
class BenchmarkReport:
    subsets: dict[Subset, SubsetReport]
    overall_exact: float
    per_sample: list[dict[str, Any]] = field(default_factory=list)

    @property
    def overall(self) -> float:
        """Overall K-Score on the 0-100 scale, 2 decimals."""
        return round(100 * self.overall_exact, 2)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "version": REPORT_VERSION,
            "subsets": {s.value: r.to_dict() for s, r in self.subsets.items()},
            "overall": self.overall,
        }
        if self.per_sample:
            out["per_sample"] = self.per_sample
        return out

    def table(self) -> str:
        head = f"{'subset':<20}{'n':>6}{'visual':>9}{'text':>9}{'faith':>9}{'aesth':>9}{'K-Score':>10}"
        lines = [head, "-" * len(head)]
        for s, r in self.subsets.items():
            m = r.means

            def pct(v: float | None) -> str:
                return f"{'n/a':>9}" if v is None else f"{100 * v:>9.2f}"

            lines.append(
                f"{s.value:<20}{r.n:>6}{pct(m.visual_correctness)}{pct(m.text_accuracy)}"
                f"{pct(m.faithfulness)}{pct(m.aesthetics)}{100 * r.kscore:>10.2f}"
            )
        lines.append("-" * len(head))
        lines.append(f"{'overall':<65}{self.overall:>10.2f}")
        return "\n".join(lines)


def kscore_from_means(means: DimensionMeans, cfg: RewardConfig = RewardConfig()) -> float:
    weights = cfg.exact_weights()
    values = {d: getattr(means, d) for d in DIMENSIONS}
    if values["text_accuracy"] is None:
        del values["text_accuracy"]
    total = sum(weights[d] for d in values)
    return float(sum(weights[d] * _exact(v) for d, v in values.items()) / total)


def aggregate_means(
    means: Mapping[Subset, DimensionMeans],
    counts: Mapping[Subset, tuple[int, int]] | None = None,
    cfg: RewardConfig = RewardConfig(),
) -> BenchmarkReport:
    """Subset K-Scores from subset dimension means, macro-averaged into the overall score."""
    subsets = {}
    for s in Subset:
        if s not in means:
            raise EmptySubset(s.value)
        n, n_text = (counts or {}).get(s, (0, 0))
        subsets[s] = SubsetReport(s, n, n_text, means[s], kscore_from_means(means[s], cfg))
    overall = sum(r.kscore for r in subsets.values()) / len(subsets)
    return BenchmarkReport(subsets, overall)


def aggregate_benchmark(
    samples: Sequence[BenchmarkSample], cfg: RewardConfig = RewardConfig(), per_sample: bool = False
) -> BenchmarkReport:
    by_subset: dict[Subset, list[KScoreJudgment]] = {s: [] for s in Subset}
    for sample in samples:
        by_subset[sample.subset].append(sample.judgment)

    means, counts = {}, {}
    for s, js in by_subset.items():
        if not js:
            raise EmptySubset(f"no samples in {s.value}")
        applicable = [j.text_accuracy for j in js if not j.text_accuracy_na]

        def mean(values: Sequence[float]) -> float:
            return float(sum(Fraction(v) for v in values) / len(values))

        means[s] = DimensionMeans(
            faithfulness=mean([j.faithfulness for j in js]),
            visual_correctness=mean([j.visual_correctness for j in js]),
            text_accuracy=mean(applicable) if applicable else None,
            aesthetics=mean([j.aesthetics for j in js]),
        )
        counts[s] = (len(js), len(applicable))

    report = aggregate_means(means, counts, cfg)
    if per_sample:
        report.per_sample = [
            {"id": x.id, "subset": x.subset.value, "kscore": round(100 * kscore_value(x.judgment, cfg), 2)}
            for x in samples
        ]
    return report


# -- judge clients ------------------------------------------------------------


def load_template(name: str, path: str | Path | None = None) -> str:
    if path is not None:
        return Path(path).read_text(encoding="utf-8")
    return resources.files("gensearch.assets").joinpath(name).read_text(encoding="utf-8")


def _image_part(ref: str) -> dict[str, Any]:
    return {"type": "image_url", "image_url": {"url": ref}}


def kscore_messages(prompt: str, gen_image: str, gt_image: str, template: str | None = None) -> list[Message]:
    return [
        {"role": "system", "content": template or load_template("kscore_judge.txt")},
        {
            "role": "user",
            "content": [
                {"type": "text", "text": f"Task prompt:\n{prompt}\n\nImage 1 (generated):"},
                _image_part(gen_image),
                {"type": "text", "text": "Image 2 (ground truth):"},
                _image_part(gt_image),
            ],
        },
    ]


def text_reward_messages(
    prompt: str, gt_image: str, answer: Mapping[str, Any], template: str | None = None
) -> list[Message]:
    return [
        {"role": "system", "content": template or load_template("text_judge.txt")},
        {
            "role": "user",
            "content": [
                {"type": "text", "text": f"Task prompt:\n{prompt}\n\nGround-truth image:"},
                _image_part(gt_image),
                {"type": "text", "text": "Model's answer:\n" + json.dumps(answer, ensure_ascii=False)},
            ],
        },
    ]


def _judge_with_retries(client: ChatClient, messages: list[Message], parse, retries: int):
    convo = list(messages)
    last: Exception | None = None
    for _ in range(retries + 1):
        try:
            raw = client.complete(convo, temperature=0.0)
        except PolicyUnavailable as exc:
            raise JudgeError(str(exc)) from exc
        try:
            return parse(raw)
        except ScoringError as exc:
            last = exc
            convo = [
                *convo,
                {"role": "assistant", "content": raw},
                {"role": "user", "content": f"Invalid output ({exc}). Reply with the JSON object only."},
            ]
    raise JudgeError(f"judge failed after {retries + 1} attempts: {last}")


def judge_kscore(
    client: ChatClient,
    prompt: str,
    gen_image: str,
    gt_image: str,
    retries: int = 3,
    template: str | None = None,
) -> KScoreJudgment:
    return _judge_with_retries(
        client, kscore_messages(prompt, gen_image, gt_image, template), parse_kscore_judgment, retries
    )


def judge_text_reward(
    client: ChatClient,
    prompt: str,
    gt_image: str,
    answer: Mapping[str, Any],
    retries: int = 3,
    template: str | None = None,
) -> TextJudgment:
    return _judge_with_retries(
        client, text_reward_messages(prompt, gt_image, answer, template), parse_text_judgment, retries
    )


def judge_manifest(
    client: ChatClient,
    rows: Sequence[Mapping[str, Any]],
    parallel: int = 4,
    retries: int = 3,
    template: str | None = None,
) -> list[BenchmarkSample]:
    """Score manifest rows ``{id, category, prompt, gt_image, gen_image}``, keeping row order."""

    def one(row: Mapping[str, Any]) -> BenchmarkSample:
        j = judge_kscore(client, row["prompt"], row["gen_image"], row["gt_image"], retries, template)
        return BenchmarkSample(str(row["id"]), row["category"], j)

    with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        return list(pool.map(one, rows))


class MockJudge:
    """Fixture-backed judge: replies keyed by the sample's gen_image reference.

    ``judge/kscore.json`` maps gen_image -> reply (a JSON object or raw text).
    A list value is replayed one entry per attempt, for exercising retries.
    """

    def __init__(self, replies: Mapping[str, Any]):
        self.replies = dict(replies)

    @classmethod
    def from_dir(cls, root: str | Path, name: str = "kscore.json") -> MockJudge:
        doc = json.loads((Path(root) / "judge" / name).read_text(encoding="utf-8"))
        return cls(doc["replies"])

    def complete(self, messages: list[Message], **params: Any) -> str:
        key = None
        for part in messages[1]["content"]:
            if part.get("type") == "image_url":
                key = part["image_url"]["url"]
                break
        if key not in self.replies:
            raise PolicyUnavailable(f"no judge fixture for {key!r}")
        reply = self.replies[key]
        if isinstance(reply, list):
            attempt = sum(1 for m in messages if m["role"] == "assistant")
            reply = reply[min(attempt, len(reply) - 1)]
        return reply if isinstance(reply, str) else json.dumps(reply)
