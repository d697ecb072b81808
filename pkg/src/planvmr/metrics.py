"""Evaluation metrics: temporal IoU and Recall@k, threshold sweeps, ROUGE-L,
exact match, and parsing/aggregation of LLM-judge outputs."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

from . import kernels
from .errors import DataError, InvariantError
from .extraction import MomentCandidate, Method, extract
from .plan_model import FrameInterval
from .retrieval import Profile, ProfileLike, as_profile

DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(20))


# -- moment retrieval ------------------------------------------------------

def temporal_iou(a: FrameInterval, b: FrameInterval) -> float:
    """IoU of two inclusive frame intervals."""
    inter = max(0, min(a.end_frame, b.end_frame) - max(a.start_frame, b.start_frame) + 1)
    union = len(a) + len(b) - inter
    return inter / union


@dataclass(frozen=True)
class EvalRecord:
    dialogue_id: str
    turn_index: int
    ground_truth: Union[FrameInterval, str]
    candidates: Union[Sequence[MomentCandidate], str]

    def __post_init__(self):
        interval_gt = isinstance(self.ground_truth, FrameInterval)
        text_cands = isinstance(self.candidates, str)
        if interval_gt == text_cands:
            raise InvariantError(
                f"record {self.dialogue_id}/{self.turn_index}: ground truth and candidates must both be "
                "intervals or both be text"
            )


def _record_hit(rec: EvalRecord, k: int, m: float) -> bool:
    return any(temporal_iou(c.interval, rec.ground_truth) >= m for c in list(rec.candidates)[:k])


def recall_at_k(records: Sequence[EvalRecord], k: int, m: float) -> float:
    """Fraction of records whose top-k candidates include one with IoU >= m."""
    if not records:
        raise InvariantError("recall over an empty record set")
    if k < 1:
        raise InvariantError("k must be at least 1")
    hits = 0
    for rec in records:
        if not isinstance(rec.ground_truth, FrameInterval):
            raise InvariantError("recall_at_k needs interval records")
        if len(rec.candidates) == 0:
            raise InvariantError(f"record {rec.dialogue_id}/{rec.turn_index} has no candidates")
        hits += _record_hit(rec, k, m)
    return hits / len(records)


@dataclass(frozen=True)
class ProfileRecord:
    """Start/end profiles of one retrieval query and its ground-truth moment."""

    dialogue_id: str
    turn_index: int
    ground_truth: FrameInterval
    profile_start: Profile
    profile_end: Profile

    def __post_init__(self):
        object.__setattr__(self, "profile_start", as_profile(self.profile_start))
        object.__setattr__(self, "profile_end", as_profile(self.profile_end))


def evaluate_profiles(profiles: Sequence[ProfileRecord], method: Method, k: int, tau: float) -> list[EvalRecord]:
    return [
        EvalRecord(p.dialogue_id, p.turn_index, p.ground_truth,
                   extract(p.profile_start, p.profile_end, method, k=k, tau=tau))
        for p in profiles
    ]


def threshold_sweep(profiles: Sequence[ProfileRecord], grid: Sequence[float] = DEFAULT_GRID,
                    k: int = 1, m: float = 0.5) -> list[tuple[float, float]]:
    """Recall@k at IoU ``m`` of adjusted extraction for each threshold in ``grid``."""
    grid = [float(t) for t in grid]
    if not grid:
        raise InvariantError("threshold grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvariantError("threshold grid must be strictly increasing")
    return [(tau, recall_at_k(evaluate_profiles(profiles, Method.ADJUSTED, k, tau), k, m)) for tau in grid]


def sweep_table(profiles: Sequence[ProfileRecord], grid: Sequence[float] = DEFAULT_GRID) -> list[dict]:
    """Rows of the sweep CSV: R@{1,5} at IoU {0.5, 0.7} per threshold."""
    rows = []
    for tau in grid:
        row = {"tau": float(tau)}
        for k in (1, 5):
            recs = evaluate_profiles(profiles, Method.ADJUSTED, k, tau)
            for m, tag in ((0.5, "05"), (0.7, "07")):
                row[f"recall_k{k}_m{tag}"] = recall_at_k(recs, k, m)
        rows.append(row)
    return rows


def parse_grid(text: str) -> list[float]:
    vals = [float(x) for x in text.replace(" ", "").split(",") if x]
    if not vals:
        raise InvariantError("threshold grid is empty")
    return vals


# -- text metrics ----------------------------------------------------------

def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _lcs_tokens(a: list[str], b: list[str]) -> int:
    vocab: dict[str, int] = {}
    ia = [vocab.setdefault(t, len(vocab)) for t in a]
    ib = [vocab.setdefault(t, len(vocab)) for t in b]
    return kernels.lcs_length(ia, ib)


def rouge_l(candidate: str, reference: str) -> tuple[float, float, float]:
    """ROUGE-L (precision, recall, F1) on lowercased whitespace tokens."""
    c, r = tokenize(candidate), tokenize(reference)
    if not c and not r:
        return 1.0, 1.0, 1.0
    if not c or not r:
        return 0.0, 0.0, 0.0
    lcs = _lcs_tokens(c, r)
    if lcs == 0:
        return 0.0, 0.0, 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return p, rec, 2 * p * rec / (p + rec)


def _squash(text: str) -> str:
    return " ".join(text.split())


def exact_match(generated: str, step_text: str) -> int:
    return int(_squash(step_text) in _squash(generated))


# -- judge outputs ---------------------------------------------------------

class Verdict(str, Enum):
    YES = "yes"
    NO = "no"
    UNPARSEABLE = "unparseable"


@dataclass(frozen=True)
class JudgeVerdict:
    judge_id: str
    raw_text: str
    verdict: Verdict


_MARKER = re.compile(r"FINAL ANSWER:", re.IGNORECASE)
_STRIP = "*_`'\".,!?:;()[]{}<>"


def parse_judge_verdict(raw: str, judge_id: str = "") -> JudgeVerdict:
    """Read YES/NO from the token right after the last ``FINAL ANSWER:``."""
    verdict = Verdict.UNPARSEABLE
    hits = list(_MARKER.finditer(raw))
    if hits:
        rest = raw[hits[-1].end():].split(None, 1)
        if rest:
            token = rest[0].strip(_STRIP).lower()
            if token in ("yes", "no"):
                verdict = Verdict(token)
    return JudgeVerdict(judge_id, raw, verdict)


def majority_accuracy(verdicts: Sequence[Sequence[JudgeVerdict]]) -> float:
    """Fraction of records where at least two of three judges said yes."""
    if not verdicts:
        raise InvariantError("no records to score")
    correct = 0
    for i, vs in enumerate(verdicts):
        if len(vs) != 3:
            raise InvariantError(f"record {i}: expected 3 judge verdicts, got {len(vs)}")
        correct += sum(v.verdict is Verdict.YES for v in vs) >= 2
    return correct / len(verdicts)


def group_transcripts(rows: Sequence[dict]) -> dict[str, list[JudgeVerdict]]:
    """Group judge transcript rows by record id, ordered by judge id."""
    out: dict[str, list[JudgeVerdict]] = {}
    for row in rows:
        try:
            rid, jid, text = str(row["record_id"]), str(row["judge_id"]), row["raw_text"]
        except KeyError as exc:
            raise DataError(f"judge transcript row missing {exc}") from None
        out.setdefault(rid, []).append(parse_judge_verdict(text, jid))
    return {rid: sorted(vs, key=lambda v: v.judge_id) for rid, vs in sorted(out.items())}


@dataclass(frozen=True)
class DialogueScores:
    state_tracking: int
    instruction_clarity: int
    plan_adherence: int

    def __post_init__(self):
        for name in ("state_tracking", "instruction_clarity", "plan_adherence"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= 5:
                raise InvariantError(f"{name} score must be an integer in 1..5, got {v!r}")


_SCORE_KEYS = {
    "state_tracking_score": "state_tracking",
    "succinctness_score": "instruction_clarity",
    "plan_adherence_score": "plan_adherence",
}
_TRAILING_COMMA = re.compile(r",(\s*[}\]])")


def _brace_spans(text: str) -> list[tuple[int, int]]:
    """Top-level ``{...}`` spans, skipping braces inside JSON strings."""
    spans, depth, start, in_str, esc = [], 0, -1, False, False
    for i, ch in enumerate(text):
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"' and depth > 0:
            in_str = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                spans.append((start, i + 1))
    return spans


def _load_block(block: str) -> Optional[dict]:
    # judges echo the template's doubled braces and trailing commas
    candidates = [block]
    if block.startswith("{{") and block.endswith("}}"):
        candidates.append(block[1:-1])
    for c in list(candidates):
        candidates.append(_TRAILING_COMMA.sub(r"\1", c))
    for c in candidates:
        try:
            obj = json.loads(c)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def parse_dialogue_scores(raw: str) -> DialogueScores:
    """Scores from the last parseable JSON object in a dialogue-judge response."""
    obj = None
    for a, b in reversed(_brace_spans(raw)):
        obj = _load_block(raw[a:b])
        if obj is not None:
            break
    if obj is None:
        raise DataError("no JSON block found in judge output")
    values = {}
    for key, field_name in _SCORE_KEYS.items():
        if key not in obj:
            raise DataError(f"judge JSON is missing {key!r}")
        values[field_name] = obj[key]
    return DialogueScores(**values)
