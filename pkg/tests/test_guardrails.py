"""Guardrails: capacity classification, clarification gates, hint
extraction, grounding scanner."""

import pytest

from gridcia.guardrails import (
    GROUNDING_DISCLAIMER,
    classify_capacity_question,
    default_lexicon,
    extract_context_hints,
    grounding_scan,
    missing_required_inputs,
)


def user(text):
    return {"role": "user", "content": text}


# 20 prompts spanning both high-risk families (specific-bus and best-bus)
CAPACITY_PROMPTS = [
    ("What is the maximum load bus 14 can accept?", "specific_bus", 14),
    ("max capacity at bus 14", "specific_bus", 14),
    ("How much solar can bus 5 host?", "specific_bus", 5),
    ("What's the max solar capacity at bus 10?", "specific_bus", 10),
    ("Tell me the maximum wind injection bus 23 can take.", "specific_bus", 23),
    ("What is the hosting capacity for a battery at bus 7?", "specific_bus", 7),
    ("Maximum MW of load at bus 42?", "specific_bus", 42),
    ("How much generation can we add at bus 49 before violations?", "specific_bus", 49),
    ("what's the largest data center bus 30 could serve?", "specific_bus", 30),
    ("Up to what capacity can bus 100 absorb solar?", "specific_bus", 100),
    ("What is the capacity limit for wind at bus 61?", "specific_bus", 61),
    ("whats the max bess at bus 80", "specific_bus", 80),
    ("Which is the best bus for maximum solar capacity?", "best_bus", None),
    ("Which bus can host the most solar?", "best_bus", None),
    ("Find the best location for the largest battery installation.", "best_bus", None),
    ("which bus is optimal for max wind capacity?", "best_bus", None),
    ("What's the best place to add the most load?", "best_bus", None),
    ("Which bus accepts the biggest solar plant?", "best_bus", None),
    ("best bus for max load?", "best_bus", None),
    ("Where is the ideal bus for maximum storage capacity?", "best_bus", None),
]

# 20 control prompts that must NOT trigger forced routing
CONTROL_PROMPTS = [
    "Run a CIA for 100 MW solar at bus 5",
    "Connect a 50 MW data center at bus 10",
    "Please assess 20 MW of wind at bus 3 on ieee57",
    "What is a short-circuit ratio?",
    "Explain the difference between Rate A and Rate B.",
    "Show me the network data for ieee118",
    "List the available backends",
    "Switch to the reference backend",
    "Run a power flow on ieee14",
    "What contingencies fail on ieee30?",
    "Why was my last request rejected?",
    "Add a 10 MVAr shunt at bus 4 and rerun the study",
    "What were the violations in the last report?",
    "Is the system N-1 secure today?",
    "Interconnect 75 MW of hybrid at bus 66",
    "What does borderline mean in the report?",
    "Hello there, can you help me with interconnection studies?",
    "Run the assessment again with contingencies disabled",
    "What voltage limits do you apply under emergency conditions?",
    "Check violations on the 57-bus system",
]


class TestCapacityClassifier:
    @pytest.mark.parametrize("text,family,bus", CAPACITY_PROMPTS)
    def test_recall_on_capacity_families(self, text, family, bus):
        result = classify_capacity_question([user(text)])
        assert result.family == family, text
        if bus is not None:
            assert result.bus == bus
        assert result.matched_phrases

    @pytest.mark.parametrize("text", CONTROL_PROMPTS)
    def test_no_false_positives_on_controls(self, text):
        result = classify_capacity_question([user(text)])
        assert result.family == "none", text

    def test_bus_resolves_from_context(self):
        history = [
            user("I'm studying bus 14 on ieee118"),
            user("what's the maximum load it can accept?"),
        ]
        result = classify_capacity_question(history)
        assert result.family == "specific_bus"
        assert result.bus == 14

    def test_determinism(self):
        history = [user("max capacity at bus 14")]
        assert classify_capacity_question(history) == classify_capacity_question(history)

    def test_empty_history(self):
        assert classify_capacity_question([]).family == "none"


class TestMissingInputs:
    def test_missing_type_only(self):
        missing = missing_required_inputs([user("Connect 50 MW at bus 10")], "cia")
        assert missing == ["type"]

    def test_data_center_maps_to_load(self):
        missing = missing_required_inputs(
            [user("Connect a 50 MW data center at bus 10")], "cia"
        )
        assert missing == []

    def test_missing_mw(self):
        missing = missing_required_inputs([user("Connect a solar farm at bus 10")], "cia")
        assert missing == ["MW"]

    def test_missing_bus(self):
        missing = missing_required_inputs([user("Connect 50 MW of solar")], "cia")
        assert missing == ["bus"]

    def test_capacity_kind_ignores_mw(self):
        missing = missing_required_inputs(
            [user("what's the max load at bus 12?")], "capacity"
        )
        assert missing == []

    def test_no_default_type_fallback(self):
        missing = missing_required_inputs(
            [user("Connect 50 MW at bus 10, it's important")], "capacity"
        )
        assert "type" in missing

    def test_fields_accumulate_across_turns(self):
        history = [user("I want solar at bus 14"), user("make it 50 MW")]
        assert missing_required_inputs(history, "cia") == []

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            missing_required_inputs([], "opf")


# hand-labeled extraction fixtures (utterances -> expected hints)
EXTRACTION_FIXTURES = [
    (["I want solar at bus 14", "make it 50 MW"], dict(bus=14, p_mw=50.0, ctype="solar")),
    ([], dict(bus=None, p_mw=None, ctype=None)),
    (["100 MW at bus 3", "actually bus 7"], dict(bus=7, p_mw=100.0)),
    (["Connect 3.9 MW load at bus 14 on ieee118"],
     dict(bus=14, p_mw=3.9, ctype="load", case_alias="ieee118")),
    (["a 250MW wind farm at bus 23"], dict(bus=23, p_mw=250.0, ctype="wind")),
    (["1,200 MW at bus 80"], dict(bus=80, p_mw=1200.0)),
    (["study a battery at bus 59"], dict(bus=59, ctype="bess")),
    (["hybrid plant, 75 megawatts, bus 66"], dict(bus=66, p_mw=75.0, ctype="hybrid")),
    (["what about a data center instead?"], dict(ctype="load")),
    (["synchronous condenser at bus 8"], dict(bus=8, ctype="synchronous")),
    (["use the ieee57 case"], dict(case_alias="ieee57")),
    (["switch to the 30-bus system"], dict(case_alias="ieee30")),
    (["run it on IEEE 14"], dict(case_alias="ieee14")),
    (["bus#12 please"], dict(bus=12)),
    (["make it 80 MW not 50"], dict(p_mw=80.0)),
    (["add 20 MVAr at bus 4"], dict(mitigations=[(4, 20.0)])),
    (["try a 15 mvar capacitor at bus 9"], dict(mitigations=[(9, 15.0)])),
    (["first 10 MVAr at bus 4, then 5 MVAr at bus 7"],
     dict(mitigations=[(4, 10.0), (7, 5.0)])),
    (["solar then wind at bus 2"], dict(bus=2, ctype="wind")),
    (["load of 5 MW", "no, make that solar"], dict(p_mw=5.0, ctype="solar")),
    (["PV at bus 33"], dict(bus=33, ctype="solar")),
    (["We need 40 MW for a factory at bus 21"], dict(bus=21, p_mw=40.0, ctype="load")),
    (["photovoltaic install, 12 MW, bus 45"], dict(bus=45, p_mw=12.0, ctype="solar")),
    (["bus 101 with 22 MW of energy storage"], dict(bus=101, p_mw=22.0, ctype="bess")),
    (["check bus 5", "then bus 6", "finally bus 7"], dict(bus=7)),
    (["7 MW", "8 MW", "9 MW"], dict(p_mw=9.0)),
    (["a gas turbine at bus 31"], dict(bus=31, ctype="synchronous")),
    (["an EV charging hub at bus 94, about 30 MW"],
     dict(bus=94, p_mw=30.0, ctype="load")),
    (["wind for bus 40; capacity 120 MW; on ieee118"],
     dict(bus=40, p_mw=120.0, ctype="wind", case_alias="ieee118")),
    (["just theory: what is N-1?"], dict(bus=None, p_mw=None, ctype=None)),
    (["turbine upgrade near bus 18"], dict(bus=18, ctype="wind")),
]


class TestHintExtraction:
    @pytest.mark.parametrize("turns,expected", EXTRACTION_FIXTURES)
    def test_fixture(self, turns, expected):
        hints = extract_context_hints([user(t) for t in turns])
        for key, value in expected.items():
            assert getattr(hints, key) == value, (turns, key)


class TestGroundingScan:
    def test_fabricated_mw_flagged(self):
        text = "The maximum load is approximately 127 MW at that bus."
        findings, amended = grounding_scan(text, analytic_tool_called=False)
        assert any(not f.safe for f in findings)
        assert amended.endswith(GROUNDING_DISCLAIMER)
        assert any(f.pattern_kind == "mw_value" for f in findings)

    def test_standard_limits_are_safe(self):
        text = "Planning criteria keep voltages within 0.95-1.05 pu on the grid."
        findings, amended = grounding_scan(text, analytic_tool_called=False)
        assert findings  # the pu pattern matches
        assert all(f.safe for f in findings)
        assert amended == text

    def test_analytic_tool_exempts(self):
        text = "The study found a limit of 3.9 MW."
        findings, amended = grounding_scan(text, analytic_tool_called=True)
        assert findings == []
        assert amended == text

    def test_idempotent(self):
        text = "It can host about 127 MW."
        _, amended = grounding_scan(text, analytic_tool_called=False)
        findings, again = grounding_scan(amended, analytic_tool_called=False)
        assert again == amended
        assert again.count(GROUNDING_DISCLAIMER) == 1

    def test_capacity_is_pattern(self):
        text = "I'd estimate the capacity is 85 for that corner of the network."
        findings, amended = grounding_scan(text, analytic_tool_called=False)
        assert any(f.pattern_kind == "capacity_is" for f in findings)
        assert amended.endswith(GROUNDING_DISCLAIMER)

    def test_no_numbers_no_disclaimer(self):
        text = "I'll run the assessment and report back with the stage results."
        findings, amended = grounding_scan(text, analytic_tool_called=False)
        assert findings == []
        assert amended == text

    def test_window_is_150_chars(self):
        filler = "x" * 400
        text = filler + " 42 MW " + filler
        findings, _ = grounding_scan(text, analytic_tool_called=False)
        assert findings
        assert all(len(f.context_window) <= 155 for f in findings)


class TestLexicon:
    def test_kinds_present(self):
        lex = default_lexicon()
        for kind in ("capacity_intent", "bestbus_intent", "assess_intent",
                     "load_term", "safe_phrase", "type_solar", "type_load"):
            assert lex.phrases.get(kind), kind
