"""Acceptance criteria, one test per criterion.

Each test is tagged with ``@pytest.mark.criterion``; the conftest prints a
PASS/FAIL line per criterion at the end of the run. Runtime budgets are
asserted inside each test. ``GENSEARCH_FUZZ_SECONDS`` shortens or lengthens
the parser fuzzing budget (default 60).
"""

from __future__ import annotations

import itertools
import json
import os
import random
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from gensearch.clients import CallablePolicy
from gensearch.datapipe import (
    CATEGORIES,
    SCORE_DIMENSIONS,
    DatasetRecord,
    FilterRules,
    InsufficientRecords,
    SplitSpec,
    Subset,
    audit_manifests,
    filter_records,
    split_dataset,
)
from gensearch.episode import (
    FINAL_STEP_MESSAGE,
    TRUNCATED_MESSAGE,
    EpisodeConfig,
    TerminalOutcome,
    count_tokens,
    run_episode,
    run_rollouts,
)
from gensearch.grpo import (
    GroupRollout,
    GrpoConfig,
    TokenSequence,
    compute_advantages,
    finite_difference_check,
    grpo_objective,
    kl_k3,
)
from gensearch.protocol import (
    AnswerPayload,
    ImageId,
    ParsedRound,
    ParseMode,
    ProtocolError,
    ReferenceImage,
    ToolCallRequest,
    ViolationCode,
    parse_answer_payload,
    parse_round,
    serialize_round,
    validate_answer,
)
from gensearch.scoring import (
    BenchmarkSample,
    DimensionMeans,
    NaInconsistency,
    RewardConfig,
    aggregate_benchmark,
    aggregate_means,
    dual_reward,
    kscore_value,
    parse_kscore_judgment,
)

from helpers import answer, backend, last_user, tool

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"


class Timer:
    def __init__(self, budget: float):
        self.budget = budget

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.budget, f"took {self.elapsed:.2f}s, budget {self.budget}s"


# -- benchmark table -----------------------------------------------------------

# (Sci V, T, F, A), (Pop V, T, F, A), published overall
TABLE_ROWS = {
    "Qwen-Image": ((6.80, 0.34, 47.45, 56.80), (7.59, 1.40, 68.90, 61.90), 14.98),
    "search agent 8B + Qwen-Image": ((26.87, 17.18, 65.14, 55.44), (25.30, 23.55, 76.64, 61.46), 31.52),
    "search agent 8B + Nano Banana Pro": ((45.07, 49.32, 86.56, 64.80), (43.01, 52.30, 90.92, 64.88), 53.30),
}


def _means(v, t, f, a):
    return DimensionMeans(faithfulness=f / 100, visual_correctness=v / 100, text_accuracy=t / 100, aesthetics=a / 100)


def _samples_for_row(sci, pop):
    """Judged samples whose subset means round to the given row.

    Every dimension total is an integer number of half-points, so the
    means are exact rationals. Subset sizes are the smallest that let all
    three rows round exactly; the text mean runs over a smaller applicable
    set in the Pop subset to exercise the NA rule.
    """
    layout = {Subset.SCIENCE_KNOWLEDGE: ("physics", 294, 294, sci), Subset.POP_CULTURE_NEWS: ("anime", 672, 501, pop)}
    samples = []
    for subset, (category, n, n_text, (v, t, f, a)) in layout.items():
        cols = {}
        for dim, mean, count in (("v", v, n), ("t", t, n_text), ("f", f, n), ("a", a, n)):
            total = round(mean / 100 * 2 * count)
            assert round(100 * total / (2 * count), 2) == mean  # fixture reproduces the published mean
            levels = [1.0] * (total // 2) + [0.5] * (total % 2)
            cols[dim] = levels + [0.0] * (count - len(levels))
        for i in range(n):
            na = i >= n_text
            j = parse_kscore_judgment({
                "rationale": "", "faithfulness": cols["f"][i], "visual_correctness": cols["v"][i],
                "text_accuracy": 0.5 if na else cols["t"][i], "aesthetics": cols["a"][i], "text_accuracy_na": na,
            })
            samples.append(BenchmarkSample(f"{subset.value}-{i}", category, j))
    return samples


@pytest.mark.criterion("Published benchmark rows reproduction (±0.02, < 1 s)")
def test_published_rows_reproduction():
    with Timer(1.0):
        for name, (sci, pop, published) in TABLE_ROWS.items():
            report = aggregate_means({Subset.SCIENCE_KNOWLEDGE: _means(*sci), Subset.POP_CULTURE_NEWS: _means(*pop)})
            assert abs(report.overall - published) <= 0.02, (name, report.overall)
            # the same row through per-sample aggregation
            report = aggregate_benchmark(_samples_for_row(sci, pop))
            assert abs(report.overall - published) <= 0.02, (name, report.overall)


# -- K-Score -------------------------------------------------------------------


def _oracle_kscore(half_points: tuple[int, int, int, int], na: bool) -> Fraction:
    """Integer-only K-Score: levels as half-points (0, 1, 2), weights in tenths (1, 4, 4, 1)."""
    f, v, t, a = half_points
    if na:
        return Fraction(1 * f + 4 * v + 1 * a, 2 * 6)
    return Fraction(1 * f + 4 * v + 4 * t + 1 * a, 2 * 10)


@pytest.mark.criterion("K-Score brute force vs oracle (exact, < 1 s)")
def test_kscore_brute_force():
    checked = 0
    with Timer(1.0):
        for hp in itertools.product(range(3), repeat=4):
            for na in (False, True):
                levels = [h / 2 for h in hp]
                doc = dict(zip(("faithfulness", "visual_correctness", "text_accuracy", "aesthetics"), levels))
                doc.update(rationale="", text_accuracy_na=na)
                if na and hp[2] != 1:
                    with pytest.raises(NaInconsistency):
                        parse_kscore_judgment(doc)
                    continue
                assert kscore_value(parse_kscore_judgment(doc)) == float(_oracle_kscore(hp, na)), (hp, na)
                checked += 1
    assert checked == 81 + 27


# -- dual reward ---------------------------------------------------------------

# dyadic values: every intermediate of the mix is exactly representable
GRID = [Fraction(k, 16) for k in (0, 1, 3, 5, 7, 8, 10, 12, 15, 16)]
ALPHAS = [Fraction(k, 8) for k in range(9)]


@pytest.mark.criterion("Dual reward identities and linearity (exact, < 1 s)")
def test_dual_reward_exact():
    points = [(float(x), float(y)) for x in GRID for y in GRID]
    assert len(points) == 100
    with Timer(1.0):
        for ri, rt in points:
            assert dual_reward(ri, rt, RewardConfig(alpha=0.0)) == ri
            assert dual_reward(ri, rt, RewardConfig(alpha=1.0)) == rt
        for alpha in ALPHAS:
            cfg = RewardConfig(alpha=float(alpha))
            for ri, rt in points:
                expected = (1 - alpha) * Fraction(ri) + alpha * Fraction(rt)
                assert dual_reward(ri, rt, cfg) == float(expected)
                assert Fraction(dual_reward(ri, rt, cfg)) == expected
            # linearity in each argument: midpoints map to midpoints
            for (a1, b1), (a2, b2) in itertools.combinations(points[::7], 2):
                mid = dual_reward((a1 + a2) / 2, (b1 + b2) / 2, cfg)
                assert mid == (dual_reward(a1, b1, cfg) + dual_reward(a2, b2, cfg)) / 2
            for ri, rt in points:
                assert dual_reward(ri, ri, cfg) == ri


# -- GRPO advantages -----------------------------------------------------------


@pytest.mark.criterion("GRPO advantages over 1,000 groups (< 5 s)")
def test_grpo_advantages():
    rng = np.random.default_rng(2024)
    with Timer(5.0):
        np.testing.assert_allclose(compute_advantages([1.0, 0.5, 0.0]), [1.224745, 0.0, -1.224745], atol=1e-5)
        for _ in range(1000):
            r = rng.uniform(0, 1, 6)
            if rng.random() < 0.3:  # discrete K-Score-like rewards, ties included
                r = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], 6)
            adv = compute_advantages(r)
            if np.std(r) < GrpoConfig().std_floor:
                assert np.all(adv == 0)
                continue
            assert abs(adv.sum()) < 1e-9
            assert abs(np.mean(adv**2) - 1) < 1e-9
            scale, shift = rng.uniform(0.01, 100), rng.uniform(-10, 10)
            np.testing.assert_allclose(compute_advantages(scale * r + shift), adv, atol=1e-9)


# -- GRPO gradient -------------------------------------------------------------


def _instance(rng: np.random.Generator, eps: float) -> tuple[GroupRollout, GrpoConfig]:
    g = int(rng.integers(2, 7))
    seqs = []
    for _ in range(g):
        n = int(rng.integers(1, 7))
        old = rng.normal(-1.5, 0.7, n)
        # ratios spread over both sides of the clip range, kept 1e-3 away from its edges
        log_ratio = rng.normal(0, 0.25, n)
        ratio = np.exp(log_ratio)
        near = (np.abs(ratio - (1 - eps)) < 1e-3) | (np.abs(ratio - (1 + eps)) < 1e-3)
        log_ratio[near] += 5e-3
        new = old + log_ratio
        ref = new + rng.normal(0, 0.3, n)
        mask = (rng.random(n) < 0.85).astype(float)
        seqs.append(TokenSequence(new, old, ref, mask))
    rewards = rng.uniform(0, 1, g)
    return GroupRollout(rewards, seqs), GrpoConfig(epsilon=eps, beta_kl=float(rng.choice([0.0, 0.01, 0.1, 1.0])))


@pytest.mark.criterion("GRPO gradient vs finite differences (< 1e-5, < 30 s)")
def test_grpo_gradient_check():
    rng = np.random.default_rng(7)
    worst = 0.0
    with Timer(30.0):
        for _ in range(200):
            group, cfg = _instance(rng, float(rng.choice([0.1, 0.2, 0.3])))
            adv = compute_advantages(group.rewards, cfg)
            worst = max(worst, finite_difference_check(group, adv, cfg, h=1e-6))
            for s in group.sequences:
                assert np.all(kl_k3(s.logp_ref, s.logp_new) >= 0)
            assert np.isfinite(grpo_objective(group, adv, cfg).objective)
        d = np.linspace(-20, 20, 100_001)
        assert np.all(kl_k3(d, np.zeros_like(d)) >= 0)
    assert worst < 1e-5, worst


# -- protocol ------------------------------------------------------------------

TAGS = ("<think>", "</think>", "<tool_call>", "</tool_call>", "<answer>", "</answer>")
ALPHABET = (
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 \t\n"
    "<>{}[]\":,\\/'`!?&%$#@*()-_=+;|~^.éüßøñ中文漢字日本語🙂🚀​ "
)
SNIPPETS = ["IMG_012", "https://example.com/a.jpg", "the first reference image", "```", "null", "</answer>", "<think>"]


def _text(rng: random.Random, max_len: int, allow_tags: bool = True) -> str:
    while True:
        parts = []
        for _ in range(rng.randint(0, max_len)):
            parts.append(rng.choice(SNIPPETS) if rng.random() < 0.05 else rng.choice(ALPHABET))
        s = "".join(parts)
        if allow_tags or not any(t in s for t in TAGS):
            return s


def _json_value(rng: random.Random, depth: int = 0):
    kind = rng.randint(0, 6 if depth < 2 else 3)
    if kind == 0:
        return rng.randint(-10**6, 10**6)
    if kind == 1:
        return rng.uniform(-1e6, 1e6)
    if kind == 2:
        return rng.choice([True, False, None])
    if kind == 3:
        return _text(rng, 12)
    if kind in (4, 5):
        return [_json_value(rng, depth + 1) for _ in range(rng.randint(0, 3))]
    return {_text(rng, 6): _json_value(rng, depth + 1) for _ in range(rng.randint(0, 3))}


def _random_round(rng: random.Random) -> ParsedRound:
    mode = rng.choice(list(ParseMode))
    if mode is ParseMode.NORMAL:
        think = _text(rng, 40, allow_tags=False).strip()
    else:
        think = rng.choice([None, _text(rng, 20, allow_tags=False).strip()])
    if mode is not ParseMode.FINAL_STEP and rng.random() < 0.5:
        name = rng.choice(["search", "image_search", "browse"])
        if name == "search":
            args = {"queries": [_text(rng, 20) for _ in range(rng.randint(0, 4))]}
        elif name == "image_search":
            args = {"query": _text(rng, 20)}
        else:
            args = {"url": "https://" + _text(rng, 15), "query": _text(rng, 20)}
        if rng.random() < 0.3:
            args["top_k"] = rng.randint(1, 50)
        if rng.random() < 0.2:
            args[_text(rng, 8) or "x"] = _json_value(rng)
        action = ToolCallRequest(name, args)
    else:
        n = rng.randint(1, 5)
        ordinals = [rng.randint(1, 999_999) for _ in range(n)]
        if rng.random() < 0.7:
            ordinals.sort()
        refs = tuple(ReferenceImage(ImageId(o), _text(rng, 15)) for o in ordinals)
        action = AnswerPayload(_text(rng, 80), refs)
    return ParsedRound(think, action, mode)


SEEDED_VIOLATIONS = [
    # (case, round text, mode, known ids, expected error code or violation codes)
    ("two tool calls",
     '<think>a</think><tool_call>{"name":"search","arguments":{"queries":["x"]}}</tool_call>'
     '<tool_call>{"name":"image_search","arguments":{"query":"y"}}</tool_call>',
     ParseMode.NORMAL, (), "MultipleToolCalls"),
    ("two tool calls, no think",
     '<tool_call>{"name":"search","arguments":{"queries":["x"]}}</tool_call>'
     '<tool_call>{"name":"search","arguments":{"queries":["x"]}}</tool_call>',
     ParseMode.TRUNCATION_RECOVERY, (), "MultipleToolCalls"),
    ("tool call in FINAL STEP",
     '<tool_call>{"name":"search","arguments":{"queries":["x"]}}</tool_call>',
     ParseMode.FINAL_STEP, (), "ToolCallInFinalStep"),
    ("tool call in FINAL STEP with think",
     '<think>one more</think><tool_call>{"name":"browse","arguments":{"url":"https://a.b","query":"q"}}</tool_call>',
     ParseMode.FINAL_STEP, (), "ToolCallInFinalStep"),
    ("more than five references",
     answer(ids=[f"IMG_00{i}" for i in range(1, 7)]), ParseMode.NORMAL, range(1, 7), "TooManyReferences"),
    ("unsorted ids",
     answer(ids=("IMG_003", "IMG_001"), prompt="the first reference image and the second reference image"),
     ParseMode.NORMAL, (1, 3), [ViolationCode.UNSORTED_IDS]),
    ("IMG id in prompt",
     answer(ids=("IMG_004",), prompt="copy IMG_004, the first reference image"),
     ParseMode.NORMAL, (4,), [ViolationCode.IMG_ID_IN_PROMPT]),
    ("URL in prompt",
     answer(ids=("IMG_001",), prompt="like https://example.com/x.jpg and the first reference image"),
     ParseMode.NORMAL, (1,), [ViolationCode.URL_IN_PROMPT]),
    ("ordinal mismatch",
     answer(ids=("IMG_002",), prompt="a face from the second reference image"),
     ParseMode.NORMAL, (2,), [ViolationCode.ORDINAL_MISMATCH]),
    ("ordinal mismatch, fifth of four",
     answer(ids=("IMG_001", "IMG_002", "IMG_003", "IMG_004"), prompt="The Fifth Reference Image"),
     ParseMode.FINAL_STEP, (1, 2, 3, 4), [ViolationCode.ORDINAL_MISMATCH]),
]


def _mutate(rng: random.Random, text: str) -> str:
    for _ in range(rng.randint(1, 4)):
        op = rng.randint(0, 6)
        i = rng.randint(0, len(text))
        j = rng.randint(i, min(len(text), i + 40))
        if op == 0:
            text = text[:i] + rng.choice(TAGS) + text[i:]
        elif op == 1:
            text = text[:i] + text[j:]
        elif op == 2:
            text = text[:j] + text[i:j] + text[j:]
        elif op == 3:
            text = text[:i] + _text(rng, 10) + text[j:]
        elif op == 4:
            text = text[:i]
        elif op == 5:
            text = text[:i] + rng.choice(['{', '}', '"', "\\", "[", "]" * 50, "[" * 5000, "```json\n"]) + text[i:]
        else:
            text = text + serialize_round(_random_round(rng))
    return text


@pytest.mark.criterion("Protocol round-trip, seeded violations, fuzz")
def test_protocol_suite():
    rng = random.Random(1234)
    for _ in range(10_000):
        r = _random_round(rng)
        assert parse_round(serialize_round(r), r.mode) == r

    for case, text, mode, known, expected in SEEDED_VIOLATIONS:
        known_ids = {ImageId(i) for i in known}
        if isinstance(expected, str):
            with pytest.raises(ProtocolError) as info:
                parse_round(text, mode)
            assert info.value.code == expected, case
        else:
            parsed = parse_round(text, mode)
            assert validate_answer(parsed.action, known_ids).codes == expected, case

    budget = float(os.environ.get("GENSEARCH_FUZZ_SECONDS", "60"))
    corpus = [serialize_round(_random_round(rng)) for _ in range(200)] + [t for _, t, *_ in SEEDED_VIOLATIONS]
    deadline = time.monotonic() + budget
    runs = parsed_ok = 0
    while time.monotonic() < deadline:
        kind = rng.random()
        if kind < 0.15:
            data: str | bytes = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 200)))
        elif kind < 0.25:
            data = _mutate(rng, rng.choice(corpus)).encode("utf-8", "surrogatepass")
        else:
            data = _mutate(rng, rng.choice(corpus))
        mode = rng.choice(list(ParseMode))
        runs += 1
        try:
            r = parse_round(data, mode)
        except ProtocolError:
            continue
        parsed_ok += 1
        assert isinstance(r.action, (ToolCallRequest, AnswerPayload))
        if mode is ParseMode.NORMAL:
            assert r.think is not None
        if mode is ParseMode.FINAL_STEP:
            assert r.is_answer
        if r.is_answer:
            validate_answer(r.action, {ImageId(i) for i in range(1, 8)})
            assert parse_answer_payload(r.action.to_dict()) == r.action
    print(f"fuzz: {runs} inputs in {budget:.0f}s, {parsed_ok} parsed")
    assert runs > 0


# -- episode budgets -----------------------------------------------------------


def _pad(text: str, tokens: int) -> str:
    """Append whitespace-separated 4-char pieces so the response costs exactly ``tokens``."""
    extra = tokens - count_tokens(text)
    assert extra >= 0
    return text + " abcd" * extra


def _adversary(seed: int) -> CallablePolicy:
    def respond(messages):
        turn = sum(1 for m in messages if m["role"] == "assistant")
        rng = random.Random(seed * 1009 + turn)
        kind = rng.randint(0, 16)
        if kind <= 2:
            return tool("search", queries=["q"] * rng.randint(1, 3))
        if kind <= 4:
            return tool("image_search", query=rng.choice(["many", "cat", "none"]), top_k=rng.randint(1, 50))
        if kind == 5:
            return tool("browse", url=rng.choice(["https://e.org/t", "nope", "https://e.org/x"]), query="q")
        if kind == 6:
            return answer(ids=sorted({f"IMG_{rng.randint(1, 12):03d}" for _ in range(rng.randint(1, 5))}))
        if kind == 7:
            return answer(think=None)
        if kind == 8:
            return tool("search", queries=["q"]) + tool("image_search", query="many")
        if kind == 9:
            return tool("image_search", think=None, query="many")
        if kind == 10:
            return _pad(tool("image_search", query="many"), rng.choice([4000, 4001, 9000]))
        if kind == 11:
            return rng.choice(["", "no tags", "<think>x</think>", "<tool_call>{}</tool_call>", "<answer>[]</answer>"])
        if kind == 12:
            return tool("search", queries=["q"]) + answer()
        if kind == 13:
            return tool("fetch", url="x")
        return answer(ids=("IMG_001",))  # valid once any image has been registered

    return CallablePolicy(respond)


def _random_config(rng: random.Random) -> EpisodeConfig:
    return EpisodeConfig(
        max_tool_calls=rng.randint(1, 10),
        max_turns=rng.randint(1, 12),
        max_images_per_turn=rng.randint(1, 6),
        max_context_tokens=rng.choice([200, 1500, 36000]),
        max_response_tokens_per_turn=rng.choice([60, 4000]),
        format_retries=rng.randint(0, 2),
        final_step_on_context_overflow=rng.random() < 0.7,
        system_prompt="system " * rng.randint(0, 300),
    )


def _check_trajectory(t, cfg: EpisodeConfig, prompt: str) -> None:
    assert t.tool_calls_used <= cfg.max_tool_calls
    assert t.turns_used <= cfg.max_turns
    assert len(t.rounds) == t.turns_used
    assert sum(r.feedback is not None for r in t.rounds) == t.tool_calls_used
    for r in t.rounds:
        if r.feedback:
            assert sum(line.startswith("IMG_") for line in r.feedback.splitlines()) <= cfg.max_images_per_turn
    assert len(t.images) <= cfg.max_images_per_turn * t.tool_calls_used
    assert [r.control for r in t.rounds].count("final_step") <= 1
    assert t.outcome in set(TerminalOutcome)
    if t.outcome is TerminalOutcome.ANSWERED:
        assert t.validation.ok and not t.request.fallback_used
        known = {i.img_id for i in t.images}
        assert all(ref.img_id in known for ref in t.request.references)
    else:
        assert t.request.fallback_used
        assert t.request.grounded_prompt == prompt and t.request.references == ()


class Recorder:
    """Wraps a policy and keeps the last user message each request ended with."""

    def __init__(self, policy):
        self.policy = policy
        self.seen: list[str] = []

    def complete(self, messages, **params):
        self.seen.append(last_user(messages))
        return self.policy.complete(messages, **params)


def _always(response: str) -> CallablePolicy:
    return CallablePolicy(lambda messages: response)


@pytest.mark.criterion("Episode budgets, injection boundaries, fallback, replay (< 10 s)")
def test_episode_budget_suite():
    tools = backend()
    with Timer(10.0):
        # adversarial policies under the default budgets
        default = EpisodeConfig()
        for seed in range(150):
            _check_trajectory(run_episode(f"prompt {seed}", _adversary(seed), tools, default), default, f"prompt {seed}")
        for response in (tool("search", queries=["q"]), tool("image_search", query="many", top_k=50),
                         _pad(tool("search", queries=["q"]), 5000), "garbage"):
            _check_trajectory(run_episode("p", _always(response), tools, default), default, "p")

        # adversarial policies under random budgets, replayed for byte identity
        rng = random.Random(99)
        for seed in range(150):
            cfg = _random_config(rng)
            first = run_episode(f"prompt {seed}", _adversary(seed), tools, cfg)
            _check_trajectory(first, cfg, f"prompt {seed}")
            assert run_episode(f"prompt {seed}", _adversary(seed), tools, cfg).to_json() == first.to_json()

        # FINAL STEP fires right after the k-th tool call
        for k in range(1, 9):
            rec = Recorder(_always(tool("search", queries=["q"])))
            t = run_episode("p", rec, tools, EpisodeConfig(max_tool_calls=k))
            controls = [r.control for r in t.rounds]
            assert controls.index("final_step") == k - 1 and t.tool_calls_used == k
            assert rec.seen[k] == FINAL_STEP_MESSAGE
            assert t.outcome is TerminalOutcome.FALLBACK_BUDGET and t.turns_used == k + 1

        # ... and on turn max_turns - 1, replacing that turn's tool call
        for turns in range(2, 13):
            rec = Recorder(_always(tool("search", queries=["q"])))
            t = run_episode("p", rec, tools, EpisodeConfig(max_turns=turns, max_tool_calls=100))
            assert [r.control for r in t.rounds].index("final_step") == turns - 2
            assert t.rounds[turns - 2].feedback is None
            assert t.tool_calls_used == turns - 2 and t.turns_used == turns
            assert rec.seen[turns - 1] == FINAL_STEP_MESSAGE

        # TRUNCATED fires above the response cap, not at it
        for cap in (50, 4000):
            for size, fires in ((cap, False), (cap + 1, True)):
                script = [_pad(tool("search", queries=["q"]), size), tool("search", think=None, queries=["q"]), answer()]
                rec = Recorder(CallablePolicy(lambda m, s=script: s[min(sum(x["role"] == "assistant" for x in m), 2)]))
                t = run_episode("p", rec, tools, EpisodeConfig(max_response_tokens_per_turn=cap))
                assert (t.rounds[0].control == "truncated") is fires
                assert (rec.seen[1] == TRUNCATED_MESSAGE) is fires
                if fires:
                    assert t.rounds[1].parsed.mode is ParseMode.TRUNCATION_RECOVERY

        # the context cap fires once the count reaches it
        probe = run_episode("p", _always(tool("search", queries=["q"])), tools, EpisodeConfig(max_tool_calls=1))
        after_first = probe.context_tokens_used - count_tokens(FINAL_STEP_MESSAGE) - count_tokens(probe.rounds[1].raw)
        at_cap = run_episode("p", _always(tool("search", queries=["q"])), tools,
                             EpisodeConfig(max_context_tokens=after_first))
        assert at_cap.rounds[0].control == "final_step" and at_cap.tool_calls_used == 1
        assert at_cap.outcome is TerminalOutcome.FALLBACK_CONTEXT
        below = run_episode("p", _always(tool("search", queries=["q"])), tools,
                            EpisodeConfig(max_context_tokens=after_first + 1))
        assert below.rounds[0].control is None and below.rounds[1].control == "final_step"
        assert below.rounds[1].feedback is None

        # concurrent rollouts replay identically to sequential ones
        prompts = [f"prompt {s}" for s in range(4)]
        policy = CallablePolicy(lambda m: _adversary(int(m[1]["content"].split()[1])).complete(m))
        grouped = run_rollouts(prompts, policy, tools, EpisodeConfig(), group_size=6, parallel=8)
        for p, group in zip(prompts, grouped):
            solo = run_episode(p, policy, tools, EpisodeConfig()).to_json()
            assert all(t.to_json() == solo for t in group)


# -- datapipe ------------------------------------------------------------------

ALIASES = ["game", "film", "celebrity", "poster", "sport", "General_News", "PHYSICS"]


def _random_records(rng: random.Random, n: int) -> list[DatasetRecord]:
    out = []
    for i in range(n):
        scores = {}
        for dim in SCORE_DIMENSIONS:
            if rng.random() < 0.95:
                scores[dim] = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0, rng.random()])
        out.append(DatasetRecord(
            id=f"r{i}", prompt=f"prompt {i}", category=rng.choice(list(CATEGORIES) + ALIASES),
            quality_scores=scores, prompt_token_count=rng.randint(0, 1024),
            search_consistency=rng.random() < 0.9,
        ))
    return out


def _random_rules(rng: random.Random) -> FilterRules:
    dims = rng.sample(SCORE_DIMENSIONS, rng.randint(0, len(SCORE_DIMENSIONS)))
    return FilterRules(
        max_prompt_tokens=rng.randint(1, 1024),
        min_scores={d: rng.choice([0.0, 0.25, 0.5, 0.75, 1.0]) for d in dims},
        require_search_consistency=rng.random() < 0.5,
    )


def _oracle_keep(r: DatasetRecord, rules: FilterRules) -> bool:
    scores_ok = all(d in r.quality_scores and r.quality_scores[d] >= t for d, t in rules.min_scores.items())
    return scores_ok and r.prompt_token_count <= rules.max_prompt_tokens and (
        r.search_consistency or not rules.require_search_consistency)


@pytest.mark.criterion("Datapipe filter/split/audit over 500 instances (< 10 s)")
def test_datapipe_suite():
    rng = random.Random(500)
    with Timer(10.0):
        for _ in range(500):
            records = _random_records(rng, rng.randint(0, 80))
            rules = rng.choice([FilterRules(), _random_rules(rng)])

            first = filter_records(records, rules)
            assert [r.id for r in first.kept] == [r.id for r in records if _oracle_keep(r, rules)]
            second = filter_records(first.kept, rules)
            assert [r.id for r in second.kept] == [r.id for r in first.kept] and not second.dropped

            kept = first.kept
            sizes = [rng.randint(0, max(1, len(kept) // 2)) for _ in range(3)]
            spec = SplitSpec(*sizes, seed=rng.randint(0, 10**6))
            if spec.total > len(kept):
                with pytest.raises(InsufficientRecords):
                    split_dataset(kept, spec)
                continue
            splits = split_dataset(kept, spec)
            parts = {"bench": splits.bench, "sft": splits.sft, "rl": splits.rl}
            assert [len(p) for p in parts.values()] == sizes
            ids = [r.id for p in parts.values() for r in p]
            assert len(ids) == len(set(ids)) and set(ids) <= {r.id for r in kept}
            assert all(r.verified is False for r in splits.bench)
            again = split_dataset(kept, spec)
            assert [[r.id for r in p] for p in (again.bench, again.sft, again.rl)] == [
                [r.id for r in p] for p in parts.values()]

            assert audit_manifests(**parts).passed
            # seed overlaps by copying records across manifests
            seeded: dict[str, set[str]] = {}
            polluted = {k: list(v) for k, v in parts.items()}
            for _ in range(rng.randint(1, 4)):
                src = rng.choice([k for k, v in parts.items() if v] or ["bench"])
                if not parts[src]:
                    break
                dst = rng.choice([k for k in parts if k != src])
                victim = rng.choice(parts[src])
                polluted[dst].append(victim)
                seeded.setdefault(victim.id, {src}).add(dst)
            report = audit_manifests(**polluted)
            assert {k: set(v) for k, v in report.overlaps.items()} == seeded
            assert report.passed is (not seeded)


# -- end to end ----------------------------------------------------------------


def _cli(*args: str, cwd: Path) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-m", "gensearch.cli", *args], cwd=cwd, capture_output=True, text=True)


@pytest.mark.criterion("End-to-end smoke: run then score (< 30 s)")
def test_end_to_end_smoke(tmp_path):
    with Timer(30.0):
        run = _cli("run", "--mock-fixtures", str(FIXTURES), "--prompts", str(FIXTURES / "prompts.jsonl"),
                   "--out-dir", str(tmp_path / "out"), cwd=tmp_path)
        assert run.returncode == 0, run.stderr
        trajectories = [json.loads(x) for x in (tmp_path / "out" / "trajectories.jsonl").read_text().splitlines()]
        requests = [json.loads(x) for x in (tmp_path / "out" / "requests.jsonl").read_text().splitlines()]
        assert len(trajectories) == len(requests) == 5

        # stand-in for the image generator: one generated image per request
        categories = {json.loads(x)["id"]: json.loads(x)["category"]
                      for x in (FIXTURES / "bench.jsonl").read_text().splitlines()}
        rows = [{"id": r["prompt_id"], "category": categories[r["prompt_id"]], "prompt": r["grounded_prompt"],
                 "gt_image": f"gt/{r['prompt_id']}.png", "gen_image": f"gen/{r['prompt_id']}_{r['rollout']}.png"}
                for r in requests]
        manifest = tmp_path / "generated.jsonl"
        manifest.write_text("".join(json.dumps(r) + "\n" for r in rows))

        score = _cli("score", str(manifest), "--judge-fixtures", str(FIXTURES), "--per-sample",
                     "--out", str(tmp_path / "report.json"), cwd=tmp_path)
        assert score.returncode == 0, score.stderr
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["version"] == 1
        assert set(report["subsets"]) == {"science_knowledge", "pop_culture_news"}
        for sub in report["subsets"].values():
            assert 0 <= sub["kscore"] <= 100 and sub["n"] > 0
            assert set(sub["means"]) == {"faithfulness", "visual_correctness", "text_accuracy", "aesthetics"}
        assert 0 <= report["overall"] <= 100
        assert [s["id"] for s in report["per_sample"]] == ["p1", "p2", "p3", "p4", "p5"]
        assert "overall" in score.stdout


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
