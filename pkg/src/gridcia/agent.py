"""LLM-first conversation loop with layered anti-fabrication defenses.

Turn order: (1) forced capacity routing, (2) required-input clarification
for assessment-like prompts, (3) up to five tool-call rounds against an
OpenAI-compatible chat endpoint, (4) grounding validation of the final
text.  A deterministic scripted stand-in for the endpoint makes the whole
loop testable offline.
"""

from __future__ import annotations

import json
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import httpx

from . import capacity as capacity_mod
from .guardrails import (
    ContextHints,
    classify_capacity_question,
    default_lexicon,
    extract_context_hints,
    grounding_scan,
    missing_required_inputs,
)
from .memory import new_study, rank_relevant
from .pipeline import CiaReport
from .tools import ToolSession, execute, tool_specs

MAX_TOOL_ROUNDS = 5
MEMORY_INJECTION_CAP = 5

MEMORY_CAVEAT = (
    "These entries come from earlier simulations in the current session or "
    "recent runs of this assistant. They are not independent historical "
    "studies; prefer fresh simulations for new questions and cite these only "
    "as supplementary context."
)

BASE_IDENTITY = """\
You are a grid interconnection engineer. You plan studies, run them through \
the registered tools, and explain the results.

Before acting, reason through four considerations:
1. What is the user actually requesting?
2. What data is required to answer it?
3. Which tools, in what order, will produce that data?
4. Does each intermediate result fully address the question, or is another \
step needed?

Anti-fabrication rules (mandatory): never state specific MW, pu, MVA, or \
percentage values for individual grid elements unless those values \
originated from a tool result in the current conversation or are well-known \
published standards (e.g. the 0.95-1.05 pu planning band). If you have not \
run the relevant simulation, say so and offer to run it. Decisions (approve, \
reject, borderline) come only from assessment tools, never from intuition.

You are encouraged to add engineering judgment around tool results: \
characterize margin severity, contextualize capacity numbers, and suggest \
mitigation or next analysis steps.\
"""

ESCALATION_NOTICE = (
    "[Escalation] I could not complete this request autonomously; it has "
    "been routed for human review."
)


class LlmTransportError(Exception):
    pass


@dataclass(frozen=True)
class ToolCallRequest:
    id: str
    name: str
    arguments: dict


@dataclass
class Message:
    role: str  # system | user | assistant | tool
    content: str = ""
    tool_calls: list[ToolCallRequest] = field(default_factory=list)
    tool_call_id: str | None = None

    def to_wire(self) -> dict:
        msg: dict = {"role": self.role, "content": self.content}
        if self.tool_calls:
            msg["tool_calls"] = [
                {
                    "id": c.id,
                    "type": "function",
                    "function": {"name": c.name, "arguments": json.dumps(c.arguments)},
                }
                for c in self.tool_calls
            ]
        if self.tool_call_id:
            msg["tool_call_id"] = self.tool_call_id
        return msg


@dataclass(frozen=True)
class LlmResponse:
    content: str | None = None
    tool_calls: tuple[ToolCallRequest, ...] = ()
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_s: float = 0.0

    def __post_init__(self):
        if self.content is None and not self.tool_calls:
            raise ValueError("LLM response carries neither content nor tool calls")


class LlmClient(Protocol):
    def chat(self, messages: list[dict], tools: list[dict]) -> LlmResponse: ...


@dataclass(frozen=True)
class PriceTable:
    """USD per 1k tokens; used for provider-independent cost accounting."""

    prompt_per_1k: float = 0.0
    completion_per_1k: float = 0.0

    def cost(self, prompt_tokens: int, completion_tokens: int) -> float:
        return (
            prompt_tokens * self.prompt_per_1k
            + completion_tokens * self.completion_per_1k
        ) / 1000.0


class HttpLlmClient:
    """Minimal OpenAI-compatible chat-completions client (tools wire format).

    Requests are sent at temperature 0 so repeated runs are deterministic
    up to provider behavior.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str = "",
        timeout_s: float = 120.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout_s = timeout_s

    def chat(self, messages: list[dict], tools: list[dict]) -> LlmResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "temperature": 0,
            "messages": messages,
        }
        if tools:
            body["tools"] = tools
        started = time.perf_counter()
        try:
            response = httpx.post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers=headers,
                timeout=self.timeout_s,
            )
            response.raise_for_status()
        except httpx.HTTPError as exc:
            raise LlmTransportError(f"chat endpoint failure: {exc}") from exc
        latency = time.perf_counter() - started
        try:
            payload = response.json()
            message = payload["choices"][0]["message"]
        except (ValueError, KeyError, IndexError) as exc:
            raise LlmTransportError(f"malformed chat response: {exc}") from exc
        calls = []
        for call in message.get("tool_calls") or []:
            try:
                calls.append(
                    ToolCallRequest(
                        id=call["id"],
                        name=call["function"]["name"],
                        arguments=json.loads(call["function"]["arguments"] or "{}"),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise LlmTransportError(f"malformed tool call: {exc}") from exc
        usage = payload.get("usage") or {}
        return LlmResponse(
            content=message.get("content"),
            tool_calls=tuple(calls),
            prompt_tokens=usage.get("prompt_tokens", 0),
            completion_tokens=usage.get("completion_tokens", 0),
            latency_s=latency,
        )


@dataclass
class ScriptStep:
    """One scripted endpoint reply, optionally guarded by a predicate over
    the wire messages."""

    response: LlmResponse
    expect: Callable[[list[dict]], bool] | None = None

    @staticmethod
    def tool(name: str, arguments: dict, expect=None) -> "ScriptStep":
        call = ToolCallRequest(id=f"call_{uuid.uuid4().hex[:8]}", name=name,
                               arguments=arguments)
        return ScriptStep(response=LlmResponse(tool_calls=(call,)), expect=expect)

    @staticmethod
    def text(content: str, expect=None) -> "ScriptStep":
        return ScriptStep(response=LlmResponse(content=content), expect=expect)


class ScriptedLlm:
    """Deterministic LLM stand-in for tests and offline benchmarks.

    Raises AssertionError on script exhaustion or a failed step predicate;
    that is a test failure, not a production path.
    """

    def __init__(self, steps: Sequence[ScriptStep]):
        self.steps = list(steps)
        self.calls = 0

    def chat(self, messages: list[dict], tools: list[dict]) -> LlmResponse:
        if self.calls >= len(self.steps):
            raise AssertionError(
                f"scripted LLM exhausted after {len(self.steps)} steps"
            )
        step = self.steps[self.calls]
        self.calls += 1
        if step.expect is not None and not step.expect(messages):
            raise AssertionError(f"script step {self.calls} predicate failed")
        return step.response


@dataclass
class PromptAssembly:
    base_identity: str
    lessons_block: str
    memory_block: str
    hints_block: str

    @property
    def text(self) -> str:
        return "\n\n".join(
            block
            for block in (
                self.base_identity,
                self.lessons_block,
                self.memory_block,
                self.hints_block,
            )
            if block
        )


def build_system_prompt(
    lessons: Sequence[str],
    memory_entries: Sequence,
    hints: ContextHints,
) -> PromptAssembly:
    """Assemble identity + lessons + session-caveated memory + hints."""
    lessons_block = ""
    if lessons:
        lines = "\n".join(f"- {text}" for text in lessons)
        lessons_block = f"Lessons learned from earlier failures:\n{lines}"
    memory_block = ""
    if memory_entries:
        lines = "\n".join(f"- {r.summary}" for r in memory_entries)
        memory_block = f"Prior study results. {MEMORY_CAVEAT}\n{lines}"
    labeled = [
        f"{label}: {value}"
        for label, value in (
            ("bus", hints.bus),
            ("p_mw", hints.p_mw),
            ("type", hints.ctype),
            ("case", hints.case_alias),
            ("mitigations", hints.mitigations or None),
            ("last_report_status", hints.last_report_status),
        )
        if value is not None
    ]
    hints_block = (
        "Context hints detected from the conversation:\n" + "\n".join(labeled)
        if labeled
        else ""
    )
    return PromptAssembly(
        base_identity=BASE_IDENTITY,
        lessons_block=lessons_block,
        memory_block=memory_block,
        hints_block=hints_block,
    )


@dataclass
class TurnDiagnostics:
    tools_called: list[str] = field(default_factory=list)
    llm_calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost_usd: float = 0.0
    latency_s: float = 0.0
    forced_routing: bool = False
    clarification: bool = False
    grounding_flagged: bool = False
    escalated: bool = False

    def to_dict(self) -> dict:
        return vars(self).copy()


@dataclass
class SessionContext:
    session_id: str
    tools: ToolSession
    case_alias: str = "ieee118"
    history: list[Message] = field(default_factory=list)
    last_report: CiaReport | None = None
    last_diagnostics: TurnDiagnostics = field(default_factory=TurnDiagnostics)

    def add_user(self, text: str) -> None:
        self.history.append(Message(role="user", content=text))


class Agent:
    """Conversation agent: guardrails first, the model in the middle,
    grounding validation last."""

    def __init__(
        self,
        llm: LlmClient | None = None,
        lessons: Sequence[str] | Callable[[], Sequence[str]] = (),
        prices: PriceTable = PriceTable(),
    ):
        self.llm = llm
        self._lessons = lessons
        self.prices = prices
        self.lexicon = default_lexicon()

    def _lesson_texts(self) -> list[str]:
        lessons = self._lessons() if callable(self._lessons) else self._lessons
        return list(lessons)

    # ------------------------------------------------------------------
    # forced capacity routing
    # ------------------------------------------------------------------

    def _summarize_capacity(self, result: dict, case_alias: str) -> str:
        lines = [
            f"Capacity search on {case_alias} for {result['ctype']} at bus "
            f"{result['bus']}: maximum approved capacity "
            f"{result['max_approved_mw']:g} MW.",
            f"The search ran {result['iterations']} full assessments over "
            f"{result['mw_min']:g}-{result['mw_max']:g} MW at "
            f"{result['tol_mw']:g} MW tolerance.",
        ]
        explanation = result.get("rejection_explanation")
        if explanation:
            lines.append(
                "Limiting factor at the boundary: "
                f"{explanation['limiting_factor']}."
            )
        if result.get("fallback_used"):
            lines.append(
                "Feasibility was not monotone across samples; the result is "
                "the highest sampled feasible point from a coarse scan "
                "(diagnostics recorded)."
            )
        return "\n".join(lines)

    def _summarize_best_bus(self, best_bus: int, best: dict, summary: dict,
                            case_alias: str, ctype: str) -> str:
        ranked = sorted(summary.items(), key=lambda kv: -kv[1])[:3]
        top = ", ".join(f"bus {b}: {mw:g} MW" for b, mw in ranked)
        return (
            f"Best-bus capacity sweep on {case_alias} for {ctype}: bus "
            f"{best_bus} hosts the most at {best['max_approved_mw']:g} MW "
            f"(searched {len(summary)} load-serving buses; top results: {top})."
        )

    def _forced_capacity_routing(
        self, session: SessionContext, classification, hints: ContextHints
    ) -> tuple[str, CiaReport | None]:
        diag = session.last_diagnostics
        diag.forced_routing = True
        missing = missing_required_inputs(session.history, "capacity", self.lexicon)
        if classification.family == "best_bus" and "bus" in missing:
            missing.remove("bus")
        if missing:
            diag.clarification = True
            return self._clarification_text(missing, "capacity search"), None
        case_alias = hints.case_alias or session.case_alias
        if classification.family == "specific_bus":
            result = execute(
                "find_max_capacity",
                {
                    "case_path": case_alias,
                    "bus": classification.bus,
                    "connection_type": hints.ctype,
                },
                session.tools,
            )
            diag.tools_called.append("find_max_capacity")
            if not result.ok:
                return (
                    f"{ESCALATION_NOTICE}\nThe capacity search failed: {result.error}",
                    None,
                )
            return self._summarize_capacity(result.payload, case_alias), None
        # best-bus family: sweep load-serving buses through the same search
        case = session.tools.case(case_alias)
        best_bus, best, summary = capacity_mod.find_best_bus_capacity(
            case, hints.ctype, cfg=session.tools.pipeline_config
        )
        diag.tools_called.append("find_max_capacity")
        if session.tools.memory is not None:
            from .tools import _persist

            _persist(
                session.tools,
                new_study(
                    session_id=session.session_id,
                    case_name=case.name,
                    bus=best_bus,
                    p_mw=best.max_approved_mw,
                    ctype=hints.ctype,
                    status="approve" if best.max_approved_mw > 0 else "reject",
                    kind="max_capacity",
                    max_mw=best.max_approved_mw,
                    summary=(
                        f"best-bus capacity on {case.name}: bus {best_bus} "
                        f"hosts {best.max_approved_mw:g} MW ({hints.ctype})"
                    ),
                ),
            )
        return (
            self._summarize_best_bus(
                best_bus, best.to_dict(), summary, case_alias, hints.ctype
            ),
            None,
        )

    @staticmethod
    def _clarification_text(missing: list[str], task: str) -> str:
        fields = ", ".join(missing)
        return (
            f"To run the {task} I still need: {fields}. "
            "Please provide the missing details (for example the "
            "point-of-interconnection bus, the capacity in MW, and the "
            "resource type: load, solar, wind, bess, hybrid, or synchronous)."
        )

    # ------------------------------------------------------------------
    # the LLM loop
    # ------------------------------------------------------------------

    def respond(self, session: SessionContext) -> tuple[str, CiaReport | None]:
        """Produce the assistant reply for the latest user message."""
        if not session.history or session.history[-1].role != "user":
            raise ValueError("session history must end with a user message")
        session.last_diagnostics = TurnDiagnostics()
        diag = session.last_diagnostics
        started = time.perf_counter()
        try:
            text, report = self._respond_inner(session)
        finally:
            diag.latency_s = time.perf_counter() - started
        session.history.append(Message(role="assistant", content=text))
        if report is not None:
            session.last_report = report
        return text, report

    def _respond_inner(self, session: SessionContext) -> tuple[str, CiaReport | None]:
        diag = session.last_diagnostics
        hints = extract_context_hints(session.history, self.lexicon)
        if session.last_report is not None:
            hints.last_report_status = session.last_report.decision
        if hints.case_alias:
            session.case_alias = hints.case_alias

        # Layer 2: forced routing for high-risk capacity questions
        classification = classify_capacity_question(session.history, self.lexicon)
        if classification.family != "none":
            return self._forced_capacity_routing(session, classification, hints)

        # clarification gate for assessment-like prompts
        latest = session.history[-1].content.lower()
        if self.lexicon.has("assess_intent", latest):
            missing = missing_required_inputs(session.history, "cia", self.lexicon)
            if missing:
                diag.clarification = True
                return self._clarification_text(missing, "impact assessment"), None

        if self.llm is None:
            diag.escalated = True
            return (
                f"{ESCALATION_NOTICE}\nNo language model endpoint is configured; "
                "use the direct tools or the command line instead.",
                None,
            )

        prompt = build_system_prompt(
            self._lesson_texts(),
            self._relevant_memory(session, hints),
            hints,
        )
        messages = [Message(role="system", content=prompt.text)] + session.history
        wire = [m.to_wire() for m in messages]
        specs = [s.to_openai() for s in tool_specs()]

        analytic_called = False
        report: CiaReport | None = None
        final_text: str | None = None
        pending_after_budget = False

        for _round in range(MAX_TOOL_ROUNDS):
            try:
                response = self.llm.chat(wire, specs)
            except LlmTransportError as exc:
                diag.escalated = True
                return (
                    f"{ESCALATION_NOTICE}\nThe language model endpoint failed "
                    f"({exc}); no answer was fabricated.",
                    report,
                )
            diag.llm_calls += 1
            diag.prompt_tokens += response.prompt_tokens
            diag.completion_tokens += response.completion_tokens
            diag.cost_usd += self.prices.cost(
                response.prompt_tokens, response.completion_tokens
            )
            if not response.tool_calls:
                final_text = response.content or ""
                break
            wire.append(
                Message(
                    role="assistant",
                    content=response.content or "",
                    tool_calls=list(response.tool_calls),
                ).to_wire()
            )
            for call in response.tool_calls:
                result = execute(call.name, call.arguments, session.tools)
                diag.tools_called.append(call.name)
                if result.ok and result.grounding:
                    analytic_called = True
                if result.report is not None:
                    report = result.report
                wire.append(
                    Message(
                        role="tool",
                        content=json.dumps(result.to_dict()),
                        tool_call_id=call.id,
                    ).to_wire()
                )
            pending_after_budget = True
        if final_text is None:
            executed = ", ".join(diag.tools_called) or "none"
            diag.escalated = True
            final_text = (
                f"I reached the tool-round limit ({MAX_TOOL_ROUNDS}) before "
                f"finishing. Tools executed this turn: {executed}. "
                f"{ESCALATION_NOTICE}"
            )
            _ = pending_after_budget

        findings, amended = grounding_scan(final_text, analytic_called, self.lexicon)
        diag.grounding_flagged = any(not f.safe for f in findings)
        return amended, report

    def _relevant_memory(self, session: SessionContext, hints: ContextHints):
        if session.tools.memory is None:
            return []
        records = session.tools.memory.records()
        ranked = rank_relevant(
            records, hints.case_alias or session.case_alias, hints.bus
        )
        # current-session studies take priority over other sessions
        ranked.sort(key=lambda r: r.session_id != session.session_id)
        return ranked[:MEMORY_INJECTION_CAP]
