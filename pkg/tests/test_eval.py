import json
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from bridgekit.evaluation import (
    CORRECT,
    FALLBACK,
    NO_TOOL_CALL,
    PARTIAL,
    TAGGED,
    WRONG_TOOL,
    aggregate,
    bootstrap_ci,
    classify_failure,
    evaluate_output,
    extract_tool_calls,
    failure_breakdown,
    load_eval_samples,
    macro_metrics,
    normalize_name,
    run_evaluation,
    score_sample,
    used_format_heuristic,
)


# -- extraction -------------------------------------------------------------

def test_single_tagged_call():
    text = 'Sure.\n<tool_call>\n{"name": "get_weather", "arguments": {"city": "Oslo"}}\n</tool_call>'
    calls = extract_tool_calls(text)
    assert len(calls) == 1
    assert calls[0].name == "get_weather"
    assert calls[0].arguments == {"city": "Oslo"}
    assert calls[0].source == TAGGED


def test_multiple_tagged_calls_in_order():
    text = (
        '<tool_call>{"name": "a", "arguments": {}}</tool_call>'
        "meanwhile"
        '<tool_call>{"name": "b", "arguments": {"x": 1}}</tool_call>'
    )
    assert [c.name for c in extract_tool_calls(text)] == ["a", "b"]


def test_tagged_accepts_parameters_alias_and_missing_arguments():
    text = (
        '<tool_call>{"name": "a", "parameters": {"p": 2}}</tool_call>'
        '<tool_call>{"name": "b"}</tool_call>'
    )
    calls = extract_tool_calls(text)
    assert calls[0].arguments == {"p": 2}
    assert calls[1].arguments == {}


def test_one_good_tag_suppresses_fallback():
    text = (
        '<tool_call>{"name": "good", "arguments": {}}</tool_call>'
        '<tool_call>{"name": broken</tool_call>'
        ' stray {"name": "bare", "arguments": {}} object'
    )
    calls = extract_tool_calls(text)
    assert [c.name for c in calls] == ["good"]
    assert all(c.source == TAGGED for c in calls)


def test_fallback_fires_only_when_no_tag_parses():
    text = '<tool_call>{oops}</tool_call> then {"name": "rescued", "arguments": {"k": 1}}'
    calls = extract_tool_calls(text)
    assert [(c.name, c.source) for c in calls] == [("rescued", FALLBACK)]


def test_fallback_requires_an_arguments_object():
    assert extract_tool_calls('The value {"name": "Bob"} is a person, not a call.') == []
    calls = extract_tool_calls('{"name": "f", "parameters": {}}')
    assert [(c.name, c.source) for c in calls] == [("f", FALLBACK)]


def test_fallback_descends_into_wrappers_but_not_into_calls():
    wrapped = '{"response": {"name": "inner", "arguments": {"a": 1}}}'
    assert [c.name for c in extract_tool_calls(wrapped)] == ["inner"]

    # a call whose arguments embed something call-shaped still counts once
    nested = '{"name": "outer", "arguments": {"cb": {"name": "inner", "arguments": {}}}}'
    assert [c.name for c in extract_tool_calls(nested)] == ["outer"]


def test_plain_prose_yields_nothing():
    assert extract_tool_calls("I would simply check the weather myself.") == []
    assert extract_tool_calls("") == []


def test_fallback_handles_multiple_objects():
    text = 'first {"name": "a", "arguments": {}} then {"name": "b", "arguments": {}}'
    assert [c.name for c in extract_tool_calls(text)] == ["a", "b"]


# -- name normalization -----------------------------------------------------

GOLDEN_NORMALIZATIONS = [
    ("Server::tool_name", "tool_name"),
    ("Get-Weather", "get_weather"),
    ("mcp-search tool", "search_tool"),
    ("get_weather", "get_weather"),
    ("GET_WEATHER", "get_weather"),
    ("functions.get_weather", "get_weather"),
    ("mcp_get_weather", "get_weather"),
    ("mcp_mcp_get", "get"),
    ("functions.mcp_run", "run"),
    ("mcp-run", "run"),
    ("weather-tool", "weather"),
    ("weather-tool-tool", "weather"),
    ("Weather tool", "weather_tool"),
    ("weather_tool", "weather_tool"),
    ("a::b::c", "c"),
    ("ns::mcp-fetch", "fetch"),
    ("Files::Read-File", "read_file"),
    ("search  engine", "search_engine"),
    ("a--b", "a_b"),
    ("a - b", "a_b"),
    ("MCP_Search", "search"),
    ("functions.functions.call", "call"),
    ("-tool", "-tool"),
    ("mcp_", "mcp_"),
    ("", ""),
    ("A::-Tool", "a::-tool"),
    ("Browser::open-url-tool", "open_url"),
    ("fetch.data", "fetch.data"),
    ("mcp tool", "tool"),
    ("x-tool tool", "x_tool_tool"),
]


@pytest.mark.parametrize("raw,expected", GOLDEN_NORMALIZATIONS)
def test_normalization_golden(raw, expected):
    assert normalize_name(raw) == expected


@given(st.text(alphabet=st.sampled_from("AbC_-: .mcptolfunctions"), max_size=40))
@settings(max_examples=300, deadline=None)
def test_normalization_idempotent(raw):
    once = normalize_name(raw)
    assert normalize_name(once) == once


@given(st.text(max_size=60))
@settings(max_examples=200, deadline=None)
def test_normalization_idempotent_on_arbitrary_text(raw):
    once = normalize_name(raw)
    assert normalize_name(once) == once


def test_aliases_collapse_to_one_name():
    variants = ["get_weather", "Get-Weather", "mcp_get_weather", "functions.get_weather", "Server::get_weather"]
    assert {normalize_name(v) for v in variants} == {"get_weather"}


# -- scoring ----------------------------------------------------------------

def test_score_exact_match():
    s = score_sample({"a", "b"}, {"b", "a"})
    assert (s.precision, s.recall, s.f1) == (Fraction(1), Fraction(1), Fraction(1))
    assert s.exact_match


def test_score_partial_overlap():
    s = score_sample({"a", "b"}, {"a"})
    assert s.precision == Fraction(1, 2)
    assert s.recall == Fraction(1)
    assert s.f1 == Fraction(2, 3)
    assert not s.exact_match


def test_score_disjoint_sets():
    s = score_sample({"a"}, {"b"})
    assert (s.precision, s.recall, s.f1) == (Fraction(0), Fraction(0), Fraction(0))


def test_score_empty_cases():
    both = score_sample(set(), set())
    assert both.exact_match and both.f1 == Fraction(1)

    nothing_predicted = score_sample(set(), {"a"})
    assert (nothing_predicted.precision, nothing_predicted.recall, nothing_predicted.f1) == (
        Fraction(0), Fraction(0), Fraction(0),
    )
    assert not nothing_predicted.exact_match

    nothing_expected = score_sample({"a"}, set())
    assert nothing_expected.f1 == Fraction(0)
    assert not nothing_expected.exact_match


_name_sets = st.sets(st.sampled_from("abcdefgh"), max_size=8)


@given(_name_sets, _name_sets)
@settings(max_examples=300, deadline=None)
def test_score_bounds_and_identities(P, G):
    s = score_sample(P, G)
    for value in (s.precision, s.recall, s.f1):
        assert Fraction(0) <= value <= Fraction(1)
    assert s.exact_match == (frozenset(P) == frozenset(G))
    if s.precision + s.recall:
        assert s.f1 == 2 * s.precision * s.recall / (s.precision + s.recall)
    if P and G:
        assert s.precision == Fraction(len(P & G), len(P))
        assert s.recall == Fraction(len(P & G), len(G))


@given(_name_sets, _name_sets)
@settings(max_examples=200, deadline=None)
def test_score_swap_symmetry(P, G):
    ab = score_sample(P, G)
    ba = score_sample(G, P)
    if P and G:
        assert ab.precision == ba.recall and ab.recall == ba.precision
    assert ab.f1 == ba.f1 or not (P and G)


# -- failure classes --------------------------------------------------------

def _classify(output: str, truth) -> tuple[str, bool]:
    _, score = evaluate_output(output, truth)
    return score.failure_class, score.format_heuristic


def test_failure_classes_cover_all_cases():
    tagged = '<tool_call>{"name": "a", "arguments": {}}</tool_call>'
    assert _classify(tagged, ["a"]) == (CORRECT, False)
    assert _classify("no call here", ["a"]) == (NO_TOOL_CALL, False)
    assert _classify(tagged, ["b"]) == (WRONG_TOOL, False)
    two = tagged + '<tool_call>{"name": "z", "arguments": {}}</tool_call>'
    assert _classify(two, ["a", "b"]) == (PARTIAL, False)


def test_format_heuristic_is_orthogonal_to_correctness():
    bare = '{"name": "a", "arguments": {}}'
    assert _classify(bare, ["a"]) == (CORRECT, True)
    assert _classify(bare, ["b"]) == (WRONG_TOOL, True)
    # one well-formed tag among the calls clears the flag
    mixed = '<tool_call>{"name": "a", "arguments": {}}</tool_call>'
    assert _classify(mixed, ["a"]) == (CORRECT, False)


def test_both_empty_counts_as_correct():
    assert _classify("just prose", []) == (CORRECT, False)


def test_normalization_applies_to_both_sides():
    _, score = evaluate_output(
        '<tool_call>{"name": "Server::Get-Weather", "arguments": {}}</tool_call>',
        ["mcp_get_weather"],
    )
    assert score.exact_match and score.failure_class == CORRECT


def test_used_format_heuristic_requires_all_fallback():
    tagged = extract_tool_calls('<tool_call>{"name": "a", "arguments": {}}</tool_call>')
    bare = extract_tool_calls('{"name": "b", "arguments": {}}')
    assert used_format_heuristic(bare)
    assert not used_format_heuristic(tagged)
    assert not used_format_heuristic([])
    assert not used_format_heuristic(tagged + bare)


# -- aggregation ------------------------------------------------------------

def test_bootstrap_is_deterministic():
    values = [0.0, 0.25, 0.5, 0.75, 1.0, 0.5, 0.5, 1.0]
    assert bootstrap_ci(values, seed=7) == bootstrap_ci(values, seed=7)
    lo, hi = bootstrap_ci(values, seed=7)
    assert lo <= sum(values) / len(values) <= hi


def test_bootstrap_constant_input_zero_width():
    lo, hi = bootstrap_ci([0.5] * 40, seed=3)
    assert lo == hi == 0.5


def test_bootstrap_rejects_empty():
    with pytest.raises(ValueError):
        bootstrap_ci([])


def test_aggregate_means():
    scores = [
        score_sample({"a"}, {"a"}),          # f1 1, hit
        score_sample({"a", "b"}, {"a"}),     # f1 2/3
        score_sample(set(), {"a"}),          # f1 0
    ]
    m = aggregate(scores, with_ci=False)
    assert m.n == 3
    assert m.mean_f1 == pytest.approx(float((Fraction(1) + Fraction(2, 3)) / 3))
    assert m.accuracy == pytest.approx(1 / 3)
    assert m.ci95_f1 is None


def test_macro_is_unweighted():
    small = aggregate([score_sample({"a"}, {"a"})], with_ci=False)
    large = aggregate([score_sample(set(), {"a"})] * 9, with_ci=False)
    macro = macro_metrics({"small": small, "large": large})
    assert macro["meanF1"] == pytest.approx(0.5)  # pooled would be 0.1
    assert macro["accuracy"] == pytest.approx(0.5)


def test_failure_breakdown_partitions_to_100():
    outputs = [
        ('<tool_call>{"name": "a", "arguments": {}}</tool_call>', ["a"]),
        ("prose", ["a"]),
        ('<tool_call>{"name": "z", "arguments": {}}</tool_call>', ["a"]),
        ('{"name": "a", "arguments": {}}', ["a", "b"]),
    ]
    scores = [evaluate_output(o, t)[1] for o, t in outputs]
    breakdown = failure_breakdown(scores)
    assert breakdown[CORRECT] == 25.0
    assert breakdown[NO_TOOL_CALL] == 25.0
    assert breakdown[WRONG_TOOL] == 25.0
    assert breakdown[PARTIAL] == 25.0
    assert breakdown["format_heuristic"] == 25.0
    assert sum(breakdown[k] for k in (CORRECT, NO_TOOL_CALL, WRONG_TOOL, PARTIAL)) == 100.0


# -- dataset I/O and the full run -------------------------------------------

def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def test_load_eval_samples(tmp_path):
    path = tmp_path / "eval.jsonl"
    _write_jsonl(
        path,
        [
            {"id": "1", "category": "single", "ground_truth": ["a"], "model_output": "x", "query": "q"},
            {"id": "2", "category": "multi", "ground_truth": ["a", "b"], "model_output": "y"},
        ],
    )
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("\n")  # blank lines are tolerated
    samples = load_eval_samples(str(path))
    assert [s.id for s in samples] == ["1", "2"]
    assert samples[0].query == "q" and samples[1].query == ""


def test_load_eval_samples_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "1", "category": "c", "ground_truth": [], "model_output": ""}\n{broken\n')
    with pytest.raises(ValueError, match=r"bad\.jsonl:2"):
        load_eval_samples(str(path))

    path.write_text('{"id": "1", "category": "c"}\n')
    with pytest.raises(ValueError, match="missing field"):
        load_eval_samples(str(path))


def test_run_evaluation_is_deterministic(tmp_path):
    path = tmp_path / "eval.jsonl"
    rows = []
    for i in range(12):
        correct = i % 3 != 0
        name = "a" if correct else "z"
        rows.append(
            {
                "id": str(i),
                "category": "single" if i % 2 else "multi",
                "ground_truth": ["a"],
                "model_output": f'<tool_call>{{"name": "{name}", "arguments": {{}}}}</tool_call>',
            }
        )
    _write_jsonl(path, rows)
    samples = load_eval_samples(str(path))
    first = run_evaluation(samples, seed=11, iterations=500)
    second = run_evaluation(samples, seed=11, iterations=500)
    assert first == second
    assert first["n"] == 12
    assert set(first["categories"]) == {"single", "multi"}
    assert first["config"] == {"seed": 11, "bootstrapIterations": 500, "confidenceLevel": 0.95}
    for metrics in first["categories"].values():
        lo, hi = metrics["ci95F1"]
        assert lo <= metrics["meanF1"] <= hi


def test_classify_failure_is_total():
    # every (P, G) pair lands in exactly one class
    universe = ["a", "b"]
    for bits_p in range(4):
        for bits_g in range(4):
            P = {universe[i] for i in range(2) if bits_p >> i & 1}
            G = {universe[i] for i in range(2) if bits_g >> i & 1}
            s = score_sample(P, G)
            klass = classify_failure(s, [])
            assert klass in (CORRECT, NO_TOOL_CALL, WRONG_TOOL, PARTIAL)
