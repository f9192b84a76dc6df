"""Scalar rewards over model outputs: selection quality plus format.

The total is a plain sum of the two components, so ablating one is the
same as zeroing it, and full == selection-only + format-only holds
exactly. Both piecewise tables can be overridden through the config
dataclasses; the defaults span [-1.25, +2.5].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .evaluation import (
    FALLBACK,
    TAGGED,
    evaluate_output,
    extract_tool_calls,
    has_tool_call_tags,
)


@dataclass(frozen=True)
class SelectionTable:
    """F1 breakpoints for the selection component."""

    perfect_threshold: float = 0.99
    good_threshold: float = 0.5
    perfect: float = 2.0
    good: float = 1.0
    partial: float = 0.25
    wrong: float = -0.5
    missing: float = -1.0


@dataclass(frozen=True)
class FormatTable:
    """Emission-shape component."""

    tagged: float = 0.5
    fallback: float = 0.1
    malformed: float = -0.25
    none: float = 0.0


@dataclass(frozen=True)
class RewardConfig:
    use_selection: bool = True
    use_format: bool = True
    selection: SelectionTable = field(default_factory=SelectionTable)
    format: FormatTable = field(default_factory=FormatTable)

    def __post_init__(self) -> None:
        if not (self.use_selection or self.use_format):
            raise ValueError("at least one reward component must be enabled")

    @classmethod
    def selection_only(cls) -> "RewardConfig":
        return cls(use_selection=True, use_format=False)

    @classmethod
    def format_only(cls) -> "RewardConfig":
        return cls(use_selection=False, use_format=True)


@dataclass(frozen=True)
class RewardBreakdown:
    selection: float
    format: float
    total: float

    def to_dict(self) -> dict:
        return {"selection": self.selection, "format": self.format, "total": self.total}


def selection_reward(model_output: str, ground_truth_names, table: SelectionTable | None = None) -> float:
    """Piecewise map of the sample's F1.

    The empty/empty case rides the zero-handling rules: no calls against
    an empty truth scores f1 = 1 and lands in the perfect band.
    """
    table = table or SelectionTable()
    calls, score = evaluate_output(model_output, ground_truth_names)
    if not calls and score.ground_truth:
        return table.missing
    f1 = float(score.f1)
    if f1 >= table.perfect_threshold:
        return table.perfect
    if f1 >= table.good_threshold:
        return table.good
    if f1 > 0:
        return table.partial
    return table.wrong


def format_reward(model_output: str, table: FormatTable | None = None) -> float:
    """Rewards the emission shape, independent of which tool was named.

    Precedence: a well-formed tagged block wins; otherwise the presence
    of tag markers means the model tried the format and fumbled it and
    scores the malformed penalty even if the fallback rescued a call
    elsewhere; otherwise fallback-only finds earn a small credit.
    """
    table = table or FormatTable()
    calls = extract_tool_calls(model_output)
    if any(c.source == TAGGED for c in calls):
        return table.tagged
    if has_tool_call_tags(model_output):
        return table.malformed
    if calls and all(c.source == FALLBACK for c in calls):
        return table.fallback
    return table.none


def total_reward(model_output: str, ground_truth_names, config: RewardConfig | None = None) -> RewardBreakdown:
    config = config or RewardConfig()
    sel = selection_reward(model_output, ground_truth_names, config.selection) if config.use_selection else 0.0
    fmt = format_reward(model_output, config.format) if config.use_format else 0.0
    return RewardBreakdown(selection=sel, format=fmt, total=sel + fmt)


def reward_bounds(config: RewardConfig | None = None) -> tuple[float, float]:
    """Reachable [min, max] of the total under a config."""
    config = config or RewardConfig()
    lo = hi = 0.0
    if config.use_selection:
        t = config.selection
        lo += min(t.perfect, t.good, t.partial, t.wrong, t.missing)
        hi += max(t.perfect, t.good, t.partial, t.wrong, t.missing)
    if config.use_format:
        t = config.format
        lo += min(t.tagged, t.fallback, t.malformed, t.none)
        hi += max(t.tagged, t.fallback, t.malformed, t.none)
    return lo, hi


def score_file(input_path: str, output_path: str, mode: str = "full") -> int:
    """JSONL to JSONL reward pass; returns the number of samples scored."""
    if mode == "full":
        config = RewardConfig()
    elif mode == "selection":
        config = RewardConfig.selection_only()
    elif mode == "format":
        config = RewardConfig.format_only()
    else:
        raise ValueError(f"unknown reward mode: {mode!r}")
    count = 0
    with open(input_path, "r", encoding="utf-8") as src, open(output_path, "w", encoding="utf-8") as dst:
        for lineno, line in enumerate(src, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                output = str(obj["model_output"])
                truth = [str(g) for g in obj.get("ground_truth", [])]
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{input_path}:{lineno}: bad sample ({exc})") from exc
            breakdown = total_reward(output, truth, config)
            row = {"id": obj.get("id", lineno)}
            row.update(breakdown.to_dict())
            dst.write(json.dumps(row) + "\n")
            count += 1
    return count
