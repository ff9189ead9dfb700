"""The agent/environment loop with budgets, control overrides and fallback."""

from __future__ import annotations

import enum
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Any

from .clients import ChatClient, Message, PolicyUnavailable
from .protocol import (
    AnswerPayload,
    ParsedRound,
    ParseMode,
    ProtocolError,
    ToolCallInFinalStep,
    ToolCallRequest,
    ValidationReport,
    parse_round,
    validate_answer,
)
from .toolkit import ImageRegistry, ImageResult, ToolBackend, execute_tool, render_tool_feedback

log = logging.getLogger(__name__)

FINAL_STEP_MESSAGE = (
    "FINAL STEP: Final Step Reached. Tool calls are no longer allowed. "
    "Reply now with only <answer>{...}</answer> using the information gathered so far."
)
TRUNCATED_MESSAGE = (
    "RESPONSE TOO LONG: your previous reply was TRUNCATED. Reply with only "
    "<tool_call>{json}</tool_call> or <answer>{json}</answer>, without <think>."
)
FORMAT_ERROR_MESSAGE = (
    "FORMAT ERROR: {error}. Reply with <think>...</think> followed by exactly one "
    "<tool_call>...</tool_call> or one <answer>...</answer>."
)


def default_system_prompt() -> str:
    return resources.files("gensearch.assets").joinpath("system_prompt.txt").read_text(encoding="utf-8")


def count_tokens(text: str) -> int:
    """Approximate tokens: each whitespace-separated piece costs ceil(len / 4)."""
    return sum(math.ceil(len(piece) / 4) for piece in text.split())


@dataclass
class EpisodeConfig:
    max_tool_calls: int = 8
    max_turns: int = 10
    max_images_per_turn: int = 5
    max_context_tokens: int = 36000
    max_response_tokens_per_turn: int = 4000
    temperature: float = 0.6
    top_p: float = 0.9
    policy_retries: int = 2
    format_retries: int = 1
    final_step_on_context_overflow: bool = True
    first_image_ordinal: int = 1
    system_prompt: str | None = None

    def __post_init__(self) -> None:
        for name in (
            "max_tool_calls",
            "max_turns",
            "max_images_per_turn",
            "max_context_tokens",
            "max_response_tokens_per_turn",
            "first_image_ordinal",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.policy_retries < 0 or self.format_retries < 0:
            raise ValueError("retry counts must be >= 0")

    @classmethod
    def for_eval(cls, **overrides: Any) -> EpisodeConfig:
        return cls(**{"max_context_tokens": 64000, **overrides})

    @property
    def decoding(self) -> dict[str, Any]:
        return {"temperature": self.temperature, "top_p": self.top_p, "max_tokens": self.max_response_tokens_per_turn}


class TerminalOutcome(str, enum.Enum):
    ANSWERED = "Answered"
    FALLBACK_BUDGET = "FallbackBudget"
    FALLBACK_CONTEXT = "FallbackContext"
    FALLBACK_MALFORMED = "FallbackMalformed"
    FALLBACK_VALIDATION = "FallbackValidation"


class DecisionKind(str, enum.Enum):
    PROCEED = "Proceed"
    INJECT_FINAL_STEP = "InjectFinalStep"
    INJECT_TRUNCATED = "InjectTruncated"
    TERMINATE = "Terminate"


@dataclass(frozen=True)
class ControlDecision:
    kind: DecisionKind
    reason: TerminalOutcome | None = None


PROCEED = ControlDecision(DecisionKind.PROCEED)


@dataclass
class EpisodeState:
    original_prompt: str
    config: EpisodeConfig = field(default_factory=EpisodeConfig)
    conversation: list[Message] = field(default_factory=list)
    tool_calls_used: int = 0
    turns_used: int = 0
    context_tokens_used: int = 0
    registry: ImageRegistry = field(default_factory=ImageRegistry)
    terminal: TerminalOutcome | None = None
    final_step_injected: bool = False
    final_step_reason: TerminalOutcome = TerminalOutcome.FALLBACK_BUDGET
    truncation_pending: bool = False
    format_retries_used: int = 0

    @property
    def mode(self) -> ParseMode:
        if self.final_step_injected:
            return ParseMode.FINAL_STEP
        if self.truncation_pending:
            return ParseMode.TRUNCATION_RECOVERY
        return ParseMode.NORMAL

    def append(self, role: str, content: str) -> None:
        self.conversation.append({"role": role, "content": content})
        self.context_tokens_used += count_tokens(content)

    def pop_last(self) -> Message:
        msg = self.conversation.pop()
        self.context_tokens_used -= count_tokens(msg["content"])
        return msg

    def set_terminal(self, outcome: TerminalOutcome) -> None:
        if self.terminal is not None:
            raise RuntimeError(f"episode already terminated as {self.terminal.value}")
        self.terminal = outcome

    def budget_exhausted(self) -> TerminalOutcome | None:
        """Which budget (if any) calls for FINAL STEP before the next turn."""
        cfg = self.config
        if self.tool_calls_used >= cfg.max_tool_calls or self.turns_used >= cfg.max_turns - 1:
            return TerminalOutcome.FALLBACK_BUDGET
        if self.context_tokens_used >= cfg.max_context_tokens:
            return TerminalOutcome.FALLBACK_CONTEXT
        return None


def enforce_budgets(state: EpisodeState, incoming: ParsedRound | None, response_tokens: int = 0) -> ControlDecision:
    """Decide what to do with the round just received.

    ``state.turns_used`` already counts the incoming round. Answers always
    proceed; a tool call only proceeds while every budget has slack.
    """
    cfg = state.config
    if response_tokens > cfg.max_response_tokens_per_turn:
        return ControlDecision(DecisionKind.INJECT_TRUNCATED)
    if incoming is None or incoming.is_answer:
        return PROCEED
    if state.final_step_injected:
        return ControlDecision(DecisionKind.TERMINATE, state.final_step_reason)
    if state.turns_used >= cfg.max_turns:
        return ControlDecision(DecisionKind.TERMINATE, TerminalOutcome.FALLBACK_BUDGET)
    exhausted = state.budget_exhausted()
    if exhausted is TerminalOutcome.FALLBACK_CONTEXT and not cfg.final_step_on_context_overflow:
        return ControlDecision(DecisionKind.TERMINATE, TerminalOutcome.FALLBACK_CONTEXT)
    if exhausted is not None:
        return ControlDecision(DecisionKind.INJECT_FINAL_STEP, exhausted)
    return PROCEED


@dataclass(frozen=True)
class GenerationRequest:
    grounded_prompt: str
    references: tuple[ImageResult, ...]
    fallback_used: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "grounded_prompt": self.grounded_prompt,
            "references": [r.to_dict() for r in self.references],
            "fallback_used": self.fallback_used,
        }


def finalize(state: EpisodeState, answer: AnswerPayload | None) -> GenerationRequest:
    if answer is not None and validate_answer(answer, state.registry.known_ids()).ok:
        refs = tuple(state.registry.resolve(i) for i in answer.image_ids)
        return GenerationRequest(answer.gen_prompt, refs, fallback_used=False)
    return GenerationRequest(state.original_prompt, (), fallback_used=True)


@dataclass
class RoundRecord:
    raw: str
    response_tokens: int
    parsed: ParsedRound | None = None
    error: str | None = None
    feedback: str | None = None
    control: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "raw": self.raw,
            "response_tokens": self.response_tokens,
            "parsed": self.parsed.to_dict() if self.parsed else None,
            "error": self.error,
            "feedback": self.feedback,
            "control": self.control,
        }


TRAJECTORY_VERSION = 1


@dataclass
class Trajectory:
    prompt: str
    rounds: list[RoundRecord]
    outcome: TerminalOutcome
    request: GenerationRequest
    validation: ValidationReport | None
    tool_calls_used: int
    turns_used: int
    context_tokens_used: int
    images: list[ImageResult]
    answer: AnswerPayload | None = None

    @property
    def responses(self) -> list[str]:
        return [r.raw for r in self.rounds]

    @property
    def total_tokens(self) -> int:
        return self.context_tokens_used

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": TRAJECTORY_VERSION,
            "prompt": self.prompt,
            "outcome": self.outcome.value,
            "tool_calls_used": self.tool_calls_used,
            "turns_used": self.turns_used,
            "context_tokens_used": self.context_tokens_used,
            "rounds": [r.to_dict() for r in self.rounds],
            "images": [img.to_dict() for img in self.images],
            "answer": self.answer.to_dict() if self.answer else None,
            "validation": self.validation.to_dict() if self.validation else None,
            "request": self.request.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


class Episode:
    def __init__(self, prompt: str, policy: ChatClient, tools: ToolBackend, config: EpisodeConfig | None = None):
        self.config = config or EpisodeConfig()
        self.policy = policy
        self.tools = tools
        self.state = EpisodeState(
            original_prompt=prompt,
            config=self.config,
            registry=ImageRegistry(next_ordinal=self.config.first_image_ordinal),
        )
        self.rounds: list[RoundRecord] = []
        self.answer: AnswerPayload | None = None
        self.validation: ValidationReport | None = None

    def _ask_policy(self) -> str | None:
        for attempt in range(self.config.policy_retries + 1):
            try:
                return self.policy.complete(list(self.state.conversation), **self.config.decoding)
            except PolicyUnavailable as exc:
                log.warning("policy unavailable (attempt %d): %s", attempt + 1, exc)
        return None

    def _control(self, record: RoundRecord, kind: str, message: str) -> None:
        record.control = kind
        self.state.append("user", message)

    def _inject_final_step(self, record: RoundRecord, reason: TerminalOutcome) -> None:
        self.state.final_step_injected = True
        self.state.final_step_reason = reason
        self.state.truncation_pending = False
        self._control(record, "final_step", FINAL_STEP_MESSAGE)

    def _after_round(self, record: RoundRecord) -> bool:
        """Budget checks between turns. Returns True when the episode ended."""
        st, cfg = self.state, self.config
        if st.turns_used >= cfg.max_turns:
            st.set_terminal(st.final_step_reason if st.final_step_injected else TerminalOutcome.FALLBACK_BUDGET)
            return True
        if st.final_step_injected:
            return False
        exhausted = st.budget_exhausted()
        if exhausted is TerminalOutcome.FALLBACK_CONTEXT and not cfg.final_step_on_context_overflow:
            st.set_terminal(TerminalOutcome.FALLBACK_CONTEXT)
            return True
        if exhausted is not None:
            if record.control is not None:
                # the final-step message replaces any retry/truncation notice
                st.pop_last()
            self._inject_final_step(record, exhausted)
        return False

    def _step(self) -> bool:
        st = self.state
        mode = st.mode
        raw = self._ask_policy()
        if raw is None:
            st.set_terminal(TerminalOutcome.FALLBACK_MALFORMED)
            return True

        tokens = count_tokens(raw)
        record = RoundRecord(raw=raw, response_tokens=tokens)
        self.rounds.append(record)
        st.turns_used += 1
        st.append("assistant", raw)

        if tokens > self.config.max_response_tokens_per_turn:
            record.error = f"Truncated: {tokens} tokens > {self.config.max_response_tokens_per_turn}"
            st.truncation_pending = not st.final_step_injected
            self._control(record, "truncated", TRUNCATED_MESSAGE)
            return self._after_round(record)

        try:
            parsed = parse_round(raw, mode)
        except ProtocolError as exc:
            record.error = str(exc)
            if mode is ParseMode.FINAL_STEP:
                if isinstance(exc, ToolCallInFinalStep):
                    st.set_terminal(st.final_step_reason)
                else:
                    st.set_terminal(TerminalOutcome.FALLBACK_MALFORMED)
                return True
            if st.format_retries_used >= self.config.format_retries:
                st.set_terminal(TerminalOutcome.FALLBACK_MALFORMED)
                return True
            st.format_retries_used += 1
            self._control(record, "format_retry", FORMAT_ERROR_MESSAGE.format(error=exc))
            return self._after_round(record)

        record.parsed = parsed
        st.truncation_pending = False

        if isinstance(parsed.action, AnswerPayload):
            self.answer = parsed.action
            self.validation = validate_answer(parsed.action, st.registry.known_ids())
            st.set_terminal(TerminalOutcome.ANSWERED if self.validation.ok else TerminalOutcome.FALLBACK_VALIDATION)
            return True

        decision = enforce_budgets(st, parsed, tokens)
        if decision.kind is DecisionKind.TERMINATE:
            st.set_terminal(decision.reason or TerminalOutcome.FALLBACK_BUDGET)
            return True
        if decision.kind is DecisionKind.INJECT_FINAL_STEP:
            self._inject_final_step(record, decision.reason or TerminalOutcome.FALLBACK_BUDGET)
            return self._after_round(record)

        call: ToolCallRequest = parsed.action
        output = execute_tool(
            call.name, call.arguments, self.tools, st.registry, image_limit=self.config.max_images_per_turn
        )
        st.tool_calls_used += 1
        record.feedback = render_tool_feedback(output)
        st.append("user", f"<tool_response>\n{record.feedback}\n</tool_response>")
        return self._after_round(record)

    def run(self) -> Trajectory:
        st = self.state
        st.append("system", self.config.system_prompt or default_system_prompt())
        st.append("user", st.original_prompt)
        while not self._step():
            pass
        request = finalize(st, self.answer)
        return Trajectory(
            prompt=st.original_prompt,
            rounds=self.rounds,
            outcome=st.terminal,
            request=request,
            validation=self.validation,
            tool_calls_used=st.tool_calls_used,
            turns_used=st.turns_used,
            context_tokens_used=st.context_tokens_used,
            images=list(st.registry.entries.values()),
            answer=self.answer,
        )


def run_episode(prompt: str, policy: ChatClient, tools: ToolBackend, config: EpisodeConfig | None = None) -> Trajectory:
    return Episode(prompt, policy, tools, config).run()


def run_rollouts(
    prompts: list[str],
    policy: ChatClient,
    tools: ToolBackend,
    config: EpisodeConfig | None = None,
    group_size: int = 1,
    parallel: int | None = None,
) -> list[list[Trajectory]]:
    """``group_size`` episodes per prompt on a bounded pool; results keep input order."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    workers = parallel or min(group_size, 8)
    jobs = [(i, p) for i, p in enumerate(prompts) for _ in range(group_size)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda job: run_episode(job[1], policy, tools, config), jobs))
    grouped: list[list[Trajectory]] = [[] for _ in prompts]
    for (i, _), traj in zip(jobs, results):
        grouped[i].append(traj)
    return grouped


def config_dict(config: EpisodeConfig) -> dict[str, Any]:
    return {k: v for k, v in asdict(config).items() if k != "system_prompt"}
