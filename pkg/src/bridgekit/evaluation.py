"""Tool-call extraction, name normalization, and set-based scoring.

A model output is reduced to the set of tool names it tried to call,
compared against the ground-truth set. Tagged blocks are authoritative:
every well-formed <tool_call>...</tool_call> body is parsed first, and
only when none parse does the scanner fall back to hunting for bare
JSON objects that look like calls (a "name" plus an "arguments" or
"parameters" object). Calls recovered that way are marked so the
format-robustness share can be reported separately.

Scores are exact rationals (fractions.Fraction), which keeps the
harmonic-mean identity f1 = 2|P&G| / (|P|+|G|) true under equality
comparison instead of approximately true under floats.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

logger = logging.getLogger(__name__)

TAG_OPEN = "<tool_call>"
_TAG_RE = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)

TAGGED = "tagged"
FALLBACK = "fallback"

CORRECT = "correct"
NO_TOOL_CALL = "no_tool_call"
WRONG_TOOL = "wrong_tool"
PARTIAL = "partial"
FAILURE_CLASSES = (CORRECT, NO_TOOL_CALL, WRONG_TOOL, PARTIAL)

_STRIP_PREFIXES = ("mcp_", "functions.")
_STRIP_SUFFIXES = ("-tool",)
_UNDERSCORE_RUN = re.compile(r"_+")


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict
    source: str  # TAGGED or FALLBACK


def has_tool_call_tags(text: str) -> bool:
    return TAG_OPEN in text


def _call_from_object(obj: object, source: str) -> ToolCall | None:
    if not isinstance(obj, dict):
        return None
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        return None
    arguments = obj.get("arguments")
    if not isinstance(arguments, dict):
        arguments = obj.get("parameters")
    if not isinstance(arguments, dict):
        if source == FALLBACK:
            # The fallback only trusts objects that really look like
            # calls; a lone "name" key matches too much prose JSON.
            return None
        arguments = {}
    return ToolCall(name=name, arguments=arguments, source=source)


def _scan_fallback(text: str) -> list[ToolCall]:
    decoder = json.JSONDecoder()
    calls: list[ToolCall] = []
    idx = 0
    while True:
        brace = text.find("{", idx)
        if brace < 0:
            return calls
        try:
            obj, end = decoder.raw_decode(text, brace)
        except ValueError:
            idx = brace + 1
            continue
        call = _call_from_object(obj, FALLBACK)
        if call is not None:
            calls.append(call)
            idx = end  # do not re-scan the call's own internals
        else:
            idx = brace + 1  # descend: a call may be nested inside


def extract_tool_calls(text: str) -> list[ToolCall]:
    """All well-formed tagged calls, else whatever the fallback finds."""
    tagged: list[ToolCall] = []
    for match in _TAG_RE.finditer(text):
        try:
            obj = json.loads(match.group(1).strip())
        except ValueError:
            continue
        call = _call_from_object(obj, TAGGED)
        if call is not None:
            tagged.append(call)
    if tagged:
        return tagged
    return _scan_fallback(text)


def normalize_name(raw: str) -> str:
    """Canonical form used on both sides of the comparison.

    Ordered rules: lowercase; keep the last "::" segment; strip the
    "-tool" suffix; turn "-" and " " into "_" and collapse runs; strip
    leading "mcp_" / "functions." decorations. Stripping repeats until
    nothing applies, which makes every output a fixed point:
    normalize_name is idempotent. An empty survivor falls back to the
    lowercased original.
    """
    lowered = raw.lower()
    name = lowered.rsplit("::", 1)[-1]

    changed = True
    while changed:
        changed = False
        for suffix in _STRIP_SUFFIXES:
            if name.endswith(suffix):
                name = name[: -len(suffix)]
                changed = True

    name = name.replace("-", "_").replace(" ", "_")
    name = _UNDERSCORE_RUN.sub("_", name)

    changed = True
    while changed:
        changed = False
        for prefix in _STRIP_PREFIXES:
            if name.startswith(prefix):
                name = name[len(prefix):]
                changed = True

    return name if name else lowered


@dataclass
class SampleScore:
    precision: Fraction
    recall: Fraction
    f1: Fraction
    exact_match: bool
    predicted: frozenset
    ground_truth: frozenset
    failure_class: str | None = None
    format_heuristic: bool = False


def score_sample(predicted, ground_truth) -> SampleScore:
    """Set precision/recall/F1 with pinned empty-set behavior:
    both empty is a perfect score, predicting nothing against a
    non-empty truth is all zeros."""
    P = frozenset(predicted)
    G = frozenset(ground_truth)
    if not P and not G:
        one = Fraction(1)
        return SampleScore(one, one, one, True, P, G)
    if not P:
        zero = Fraction(0)
        return SampleScore(zero, zero, zero, False, P, G)
    inter = len(P & G)
    precision = Fraction(inter, len(P))
    recall = Fraction(inter, len(G)) if G else Fraction(0)
    denom = precision + recall
    f1 = 2 * precision * recall / denom if denom else Fraction(0)
    return SampleScore(precision, recall, f1, P == G, P, G)


def classify_failure(score: SampleScore, calls: list[ToolCall]) -> str:
    """Exactly one class per sample; the flag for fallback-recovered
    calls is orthogonal and lives on the score itself."""
    if score.exact_match:
        return CORRECT
    if not score.predicted:
        return NO_TOOL_CALL
    if not (score.predicted & score.ground_truth):
        return WRONG_TOOL
    return PARTIAL


def used_format_heuristic(calls: list[ToolCall]) -> bool:
    return bool(calls) and all(c.source == FALLBACK for c in calls)


def evaluate_output(model_output: str, ground_truth_names) -> tuple[list[ToolCall], SampleScore]:
    """Full pipeline for one sample: extract, normalize, score, classify."""
    calls = extract_tool_calls(model_output)
    predicted = {normalize_name(c.name) for c in calls}
    truth = {normalize_name(g) for g in ground_truth_names}
    score = score_sample(predicted, truth)
    score.failure_class = classify_failure(score, calls)
    score.format_heuristic = used_format_heuristic(calls)
    return calls, score


# -- aggregation ------------------------------------------------------------


def bootstrap_ci(values, iterations: int = 10_000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap CI for the mean: resample n of n with
    replacement, take the empirical quantiles of the resampled means.
    Deterministic for a given seed; constant input gives zero width."""
    arr = np.asarray([float(v) for v in values], dtype=float)
    if arr.size == 0:
        raise ValueError("cannot bootstrap an empty sample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, arr.size, size=(int(iterations), arr.size))
    means = arr[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(lo), float(hi)


@dataclass
class CategoryMetrics:
    n: int
    mean_precision: float
    mean_recall: float
    mean_f1: float
    accuracy: float
    ci95_f1: tuple[float, float] | None = None
    ci95_accuracy: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        out = {
            "n": self.n,
            "meanPrecision": self.mean_precision,
            "meanRecall": self.mean_recall,
            "meanF1": self.mean_f1,
            "accuracy": self.accuracy,
        }
        if self.ci95_f1 is not None:
            out["ci95F1"] = list(self.ci95_f1)
        if self.ci95_accuracy is not None:
            out["ci95Accuracy"] = list(self.ci95_accuracy)
        return out


def aggregate(scores: list[SampleScore], iterations: int = 10_000, level: float = 0.95, seed: int = 0, with_ci: bool = True) -> CategoryMetrics:
    if not scores:
        raise ValueError("cannot aggregate an empty category")
    n = len(scores)
    f1s = [float(s.f1) for s in scores]
    hits = [1.0 if s.exact_match else 0.0 for s in scores]
    metrics = CategoryMetrics(
        n=n,
        mean_precision=float(sum(s.precision for s in scores) / n),
        mean_recall=float(sum(s.recall for s in scores) / n),
        mean_f1=float(sum(s.f1 for s in scores) / n),
        accuracy=sum(hits) / n,
    )
    if with_ci:
        metrics.ci95_f1 = bootstrap_ci(f1s, iterations, level, seed)
        metrics.ci95_accuracy = bootstrap_ci(hits, iterations, level, seed + 1)
    return metrics


def macro_metrics(categories: dict[str, CategoryMetrics]) -> dict:
    """Unweighted mean over categories, regardless of their sizes."""
    if not categories:
        raise ValueError("no categories to average")
    cats = list(categories.values())
    k = len(cats)
    return {
        "meanPrecision": sum(c.mean_precision for c in cats) / k,
        "meanRecall": sum(c.mean_recall for c in cats) / k,
        "meanF1": sum(c.mean_f1 for c in cats) / k,
        "accuracy": sum(c.accuracy for c in cats) / k,
    }


def failure_breakdown(scores: list[SampleScore]) -> dict:
    """Percent of samples per failure class, plus the share of samples
    whose calls only existed thanks to the fallback scanner."""
    n = len(scores)
    if n == 0:
        raise ValueError("no samples")
    out = {}
    for klass in FAILURE_CLASSES:
        out[klass] = 100.0 * sum(1 for s in scores if s.failure_class == klass) / n
    out["format_heuristic"] = 100.0 * sum(1 for s in scores if s.format_heuristic) / n
    return out


# -- dataset I/O ------------------------------------------------------------


@dataclass
class EvalSample:
    id: str
    category: str
    ground_truth: list[str]
    model_output: str
    query: str = ""
    tools: list | None = None


def load_eval_samples(path: str) -> list[EvalSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            try:
                samples.append(
                    EvalSample(
                        id=str(obj["id"]),
                        category=str(obj["category"]),
                        ground_truth=[str(g) for g in obj["ground_truth"]],
                        model_output=str(obj["model_output"]),
                        query=str(obj.get("query", "")),
                        tools=obj.get("tools"),
                    )
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from exc
    return samples


def run_evaluation(samples: list[EvalSample], seed: int = 0, iterations: int = 10_000, level: float = 0.95) -> dict:
    """Score a dataset and assemble the report document.

    Deterministic: the same samples and seed produce an identical report.
    Each category's bootstrap gets its own seed offset in sorted
    category order, so adding a category never reshuffles the others'
    draws.
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    by_category: dict[str, list[SampleScore]] = {}
    all_scores: list[SampleScore] = []
    for sample in samples:
        _, score = evaluate_output(sample.model_output, sample.ground_truth)
        by_category.setdefault(sample.category, []).append(score)
        all_scores.append(score)

    categories: dict[str, CategoryMetrics] = {}
    for offset, name in enumerate(sorted(by_category)):
        categories[name] = aggregate(
            by_category[name], iterations=iterations, level=level, seed=seed + 2 * offset
        )
    return {
        "n": len(samples),
        "config": {"seed": seed, "bootstrapIterations": iterations, "confidenceLevel": level},
        "categories": {name: m.to_dict() for name, m in categories.items()},
        "macro": macro_metrics(categories),
        "failures": failure_breakdown(all_scores),
    }


def write_report(report: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
