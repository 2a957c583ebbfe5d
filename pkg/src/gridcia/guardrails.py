"""Deterministic safety layers around the language model.

Pre-LLM: a capacity-question classifier that force-routes high-risk
quantitative queries to the search tool, and required-input gates that ask
for clarification instead of assuming parameters.  Post-LLM: a regex
grounding scanner that flags numeric claims produced without an analytic
tool and appends a disclaimer.

Intent vocabulary and safe phrases live in a versioned data file
(data/lexicon.tsv) so the word lists are auditable without touching code.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

CONTEXT_WINDOW_CHARS = 150

GROUNDING_DISCLAIMER = (
    "\n\n[Grounding notice] The figures above were not produced by a "
    "simulation in this conversation. Ask me to run the appropriate study "
    "(power flow, impact assessment, or capacity search) for verified values."
)

_TYPE_KINDS = {
    "type_load": "load",
    "type_solar": "solar",
    "type_wind": "wind",
    "type_bess": "bess",
    "type_hybrid": "hybrid",
    "type_synchronous": "synchronous",
}

_NUMERIC_PATTERNS = (
    ("mw_value", re.compile(r"\b\d[\d,]*(?:\.\d+)?\s*(?:mw|megawatts?)\b", re.I)),
    ("mva_value", re.compile(r"\b\d[\d,]*(?:\.\d+)?\s*mva\b", re.I)),
    ("pu_value", re.compile(r"\b\d[\d,]*(?:\.\d+)?\s*(?:pu\b|p\.u\.?)", re.I)),
    ("percent_value", re.compile(r"\b\d[\d,]*(?:\.\d+)?\s*%", re.I)),
    ("capacity_is", re.compile(
        r"\bcapacity\s+(?:is|was|of)\s+(?:approximately\s+|about\s+|roughly\s+)?"
        r"\d[\d,]*(?:\.\d+)?", re.I)),
)

_BUS_RE = re.compile(r"\bbus\s*#?\s*(\d+)", re.I)
_MW_RE = re.compile(r"(\d[\d,]*(?:\.\d+)?)\s*(?:mw\b|megawatts?\b)", re.I)
_CASE_RE = re.compile(r"\bieee\s*[-_]?\s*(14|30|57|118)\b|\b(14|30|57|118)[- ]bus\b", re.I)
_MITIGATION_RE = re.compile(
    r"([-+]?\d+(?:\.\d+)?)\s*mvar\b(?:\s+(?:shunt|capacitor|cap|bank))?"
    r"[^.;\n]*?\bbus\s*#?\s*(\d+)",
    re.I,
)


@dataclass(frozen=True)
class Lexicon:
    phrases: dict[str, tuple[str, ...]]
    patterns: dict[str, tuple[re.Pattern, ...]] = field(repr=False, default_factory=dict)

    def matches(self, kind: str, text: str) -> list[str]:
        """Phrases of ``kind`` present in ``text`` (word-boundary matching,
        prefix-tolerant final word)."""
        found = []
        for phrase, pattern in zip(self.phrases.get(kind, ()), self.patterns.get(kind, ())):
            if pattern.search(text):
                found.append(phrase)
        return found

    def has(self, kind: str, text: str) -> bool:
        return bool(self.matches(kind, text))


def _phrase_pattern(phrase: str) -> re.Pattern:
    words = [re.escape(w) for w in phrase.split()]
    words[-1] = words[-1] + r"\w*"
    return re.compile(r"\b" + r"\s+".join(words), re.I)


def load_lexicon(path: str | Path | None = None) -> Lexicon:
    if path is None:
        text = resources.files("gridcia.data").joinpath("lexicon.tsv").read_text()
    else:
        text = Path(path).read_text()
    phrases: dict[str, list[str]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            kind, phrase = line.split("\t", 1)
        except ValueError:
            raise ValueError(f"lexicon line {line_no}: expected kind<TAB>phrase")
        phrases.setdefault(kind.strip(), []).append(phrase.strip().lower())
    frozen = {k: tuple(v) for k, v in phrases.items()}
    patterns = {
        k: tuple(_phrase_pattern(p) for p in v) for k, v in frozen.items()
    }
    return Lexicon(phrases=frozen, patterns=patterns)


@lru_cache(maxsize=1)
def default_lexicon() -> Lexicon:
    return load_lexicon()


# ---------------------------------------------------------------------------
# Context-hint extraction
# ---------------------------------------------------------------------------

@dataclass
class ContextHints:
    bus: int | None = None
    p_mw: float | None = None
    ctype: str | None = None
    case_alias: str | None = None
    mitigations: list[tuple[int, float]] = field(default_factory=list)
    last_report_status: str | None = None

    def to_dict(self) -> dict:
        return {
            "bus": self.bus,
            "p_mw": self.p_mw,
            "ctype": self.ctype,
            "case_alias": self.case_alias,
            "mitigations": [list(m) for m in self.mitigations],
            "last_report_status": self.last_report_status,
        }


def _user_texts(history) -> list[str]:
    texts = []
    for msg in history:
        role = getattr(msg, "role", None) or msg.get("role")
        content = getattr(msg, "content", None) or msg.get("content") or ""
        if role == "user" and content:
            texts.append(content)
    return texts


def _detect_ctype(text: str, lexicon: Lexicon) -> str | None:
    """Latest type keyword in the text; for overlapping matches the longer
    phrase wins ("gas turbine" beats "turbine").  Load-indicative domain
    terms count as an explicit 'load'.  No default fallback."""
    best: tuple[tuple[int, int], str] | None = None
    kinds = dict(_TYPE_KINDS)
    kinds["load_term"] = "load"
    for kind, ctype in kinds.items():
        for pattern in lexicon.patterns.get(kind, ()):
            for m in pattern.finditer(text):
                rank = (m.end(), m.end() - m.start())
                if best is None or rank > best[0]:
                    best = (rank, ctype)
    return best[1] if best else None


def extract_context_hints(history, lexicon: Lexicon | None = None) -> ContextHints:
    """Pull (bus, MW, type, case, mitigations) from the conversation;
    the latest mention of each field wins."""
    lexicon = lexicon or default_lexicon()
    hints = ContextHints()
    for text in _user_texts(history):
        low = text.lower()
        for m in _BUS_RE.finditer(low):
            hints.bus = int(m.group(1))
        for m in _MW_RE.finditer(low):
            hints.p_mw = float(m.group(1).replace(",", ""))
        for m in _CASE_RE.finditer(low):
            hints.case_alias = f"ieee{m.group(1) or m.group(2)}"
        ctype = _detect_ctype(low, lexicon)
        if ctype:
            hints.ctype = ctype
        for m in _MITIGATION_RE.finditer(low):
            hints.mitigations.append((int(m.group(2)), float(m.group(1))))
    return hints


# ---------------------------------------------------------------------------
# Capacity-question classification (forced-routing layer)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CapacityClassification:
    family: str  # specific_bus | best_bus | none
    bus: int | None = None
    matched_phrases: tuple[str, ...] = ()


def classify_capacity_question(
    history, lexicon: Lexicon | None = None
) -> CapacityClassification:
    """Deterministic classifier for the two high-risk capacity families.

    Intent is read from the latest user turn; the bus reference may resolve
    from earlier turns (conversation context).
    """
    lexicon = lexicon or default_lexicon()
    texts = _user_texts(history)
    if not texts:
        return CapacityClassification(family="none")
    latest = texts[-1].lower()
    capacity_phrases = lexicon.matches("capacity_intent", latest)
    if not capacity_phrases:
        return CapacityClassification(family="none")
    best_phrases = lexicon.matches("bestbus_intent", latest)
    if best_phrases:
        return CapacityClassification(
            family="best_bus",
            matched_phrases=tuple(capacity_phrases + best_phrases),
        )
    bus_match = _BUS_RE.search(latest)
    if bus_match:
        return CapacityClassification(
            family="specific_bus",
            bus=int(bus_match.group(1)),
            matched_phrases=tuple(capacity_phrases),
        )
    # bus resolution from conversation context
    for text in reversed(texts[:-1]):
        m = _BUS_RE.search(text.lower())
        if m:
            return CapacityClassification(
                family="specific_bus",
                bus=int(m.group(1)),
                matched_phrases=tuple(capacity_phrases),
            )
    return CapacityClassification(family="none")


def missing_required_inputs(
    history, kind: str, lexicon: Lexicon | None = None
) -> list[str]:
    """Fields the conversation has not yet provided.

    kind="cia" requires bus, MW and type; kind="capacity" requires bus and
    type.  The type counts as present only under the explicit-keyword rule
    (a load-indicative term such as "data center" maps to load).
    """
    if kind not in ("cia", "capacity"):
        raise ValueError("kind must be 'cia' or 'capacity'")
    hints = extract_context_hints(history, lexicon)
    missing = []
    if hints.bus is None:
        missing.append("bus")
    if kind == "cia" and hints.p_mw is None:
        missing.append("MW")
    if hints.ctype is None:
        missing.append("type")
    return missing


# ---------------------------------------------------------------------------
# Post-response grounding validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroundingFinding:
    matched_text: str
    pattern_kind: str
    context_window: str  # 150 characters around the match
    safe: bool


def grounding_scan(
    response: str,
    analytic_tool_called: bool,
    lexicon: Lexicon | None = None,
) -> tuple[list[GroundingFinding], str]:
    """Scan a response for ungrounded numeric claims.

    When an analytic tool ran this turn the response is exempt.  Otherwise
    each numeric-claim match is checked against the safe-phrase list inside
    a 150-character window; any unsafe finding appends the grounding
    disclaimer (never twice).
    """
    if analytic_tool_called:
        return [], response
    lexicon = lexicon or default_lexicon()
    body = response
    already_amended = GROUNDING_DISCLAIMER in response
    if already_amended:
        body = response.replace(GROUNDING_DISCLAIMER, "")

    safe_phrases = lexicon.phrases.get("safe_phrase", ())
    findings: list[GroundingFinding] = []
    for kind, pattern in _NUMERIC_PATTERNS:
        for m in pattern.finditer(body):
            half = CONTEXT_WINDOW_CHARS // 2
            lo = max(0, m.start() - half)
            window = body[lo: m.end() + half]
            window_low = window.lower()
            safe = any(p in window_low for p in safe_phrases)
            findings.append(
                GroundingFinding(
                    matched_text=m.group(0),
                    pattern_kind=kind,
                    context_window=window,
                    safe=safe,
                )
            )
    if any(not f.safe for f in findings) and not already_amended:
        return findings, response + GROUNDING_DISCLAIMER
    return findings, response
