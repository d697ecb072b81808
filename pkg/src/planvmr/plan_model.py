"""Plans, dialogues and turns, plus the JSON-lines corpus format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Union

from .errors import CorpusParseError, InvariantError

PLANS_FILE = "plans.jsonl"
DIALOGUES_FILE = "dialogues.jsonl"


class DomainTag(str, Enum):
    COOKING = "cooking"
    DIY = "diy"
    OTHER = "other"


class TurnType(str, Enum):
    PGAG = "PGAG"
    PVQA = "pVQA"
    VSG = "VSG"
    CVMR = "CVMR"


MULTIMODAL_TURN_TYPES = frozenset({TurnType.PVQA, TurnType.VSG, TurnType.CVMR})


@dataclass(frozen=True)
class FrameInterval:
    """Inclusive, 0-based frame range."""

    start_frame: int
    end_frame: int

    def __post_init__(self):
        for name in ("start_frame", "end_frame"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise InvariantError(f"interval {name} must be a non-negative integer, got {v!r}")
        if self.start_frame > self.end_frame:
            raise InvariantError(
                f"interval end_frame {self.end_frame} < start_frame {self.start_frame}"
            )

    def __len__(self):
        return self.end_frame - self.start_frame + 1

    def contains(self, frame: int) -> bool:
        return self.start_frame <= frame <= self.end_frame

    def overlaps(self, other: "FrameInterval") -> bool:
        return self.start_frame <= other.end_frame and other.start_frame <= self.end_frame


@dataclass(frozen=True)
class Action:
    index: int
    text: str
    moment: FrameInterval

    def __post_init__(self):
        if isinstance(self.index, bool) or not isinstance(self.index, int) or self.index < 1:
            raise InvariantError(f"action index must be a positive integer, got {self.index!r}")
        if not isinstance(self.text, str) or not self.text.strip():
            raise InvariantError(f"action {self.index} has empty text")


@dataclass(frozen=True)
class Plan:
    plan_id: str
    title: str
    domain_tag: DomainTag
    actions: tuple[Action, ...]

    def __post_init__(self):
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))
        object.__setattr__(self, "actions", tuple(self.actions))
        if not self.actions:
            raise InvariantError(f"plan {self.plan_id!r}: actions list is empty")
        for pos, action in enumerate(self.actions, start=1):
            if action.index != pos:
                raise InvariantError(
                    f"plan {self.plan_id!r}: action indices must be 1..m contiguous, "
                    f"found {action.index} at position {pos}"
                )
        for prev, nxt in zip(self.actions, self.actions[1:]):
            if prev.moment.start_frame > nxt.moment.start_frame:
                raise InvariantError(
                    f"plan {self.plan_id!r}: action {nxt.index} starts before action {prev.index}"
                )

    def action(self, index: int) -> Action:
        if not 1 <= index <= len(self.actions):
            raise InvariantError(f"plan {self.plan_id!r} has no action {index}")
        return self.actions[index - 1]

    @property
    def moments(self) -> list[FrameInterval]:
        return [a.moment for a in self.actions]

    def overlapping_actions(self) -> list[tuple[int, int]]:
        """Pairs of action indices whose moments overlap (allowed, but linted)."""
        out = []
        for i, a in enumerate(self.actions):
            for b in self.actions[i + 1:]:
                if a.moment.overlaps(b.moment):
                    out.append((a.index, b.index))
        return out


ImageRef = Union[int, str, None]


@dataclass(frozen=True)
class Turn:
    user_text: str
    system_text: str
    image_ref: ImageRef
    turn_type: TurnType
    next_step_intent: bool
    current_action_index: int

    def __post_init__(self):
        object.__setattr__(self, "turn_type", TurnType(self.turn_type))
        if isinstance(self.current_action_index, bool) or not isinstance(self.current_action_index, int) \
                or self.current_action_index < 1:
            raise InvariantError(
                f"current_action_index must be a positive integer, got {self.current_action_index!r}"
            )
        if self.image_ref is not None and (isinstance(self.image_ref, bool)
                                           or not isinstance(self.image_ref, (int, str))):
            raise InvariantError(f"image_ref must be a frame index, an image id or null, got {self.image_ref!r}")
        if self.turn_type in (TurnType.PVQA, TurnType.VSG) and self.image_ref is None:
            raise InvariantError(f"{self.turn_type.value} turn requires an image_ref")
        if self.turn_type is TurnType.PGAG and self.image_ref is not None:
            raise InvariantError("PGAG turn must not carry an image_ref")


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    plan_id: str
    turns: tuple[Turn, ...]

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))

    def check_against(self, plan: Plan) -> None:
        if plan.plan_id != self.plan_id:
            raise InvariantError(f"dialogue {self.dialogue_id!r} belongs to plan {self.plan_id!r}, not {plan.plan_id!r}")
        m = len(plan.actions)
        for i, turn in enumerate(self.turns):
            if turn.current_action_index > m:
                raise InvariantError(
                    f"dialogue {self.dialogue_id!r} turn {i}: action {turn.current_action_index} "
                    f"not in plan {plan.plan_id!r} ({m} actions)"
                )

    def multimodal_count(self) -> int:
        return sum(t.turn_type in MULTIMODAL_TURN_TYPES for t in self.turns)


@dataclass(frozen=True)
class ContextWindow:
    turns: tuple[Turn, ...]
    w: int = 4

    def __post_init__(self):
        if self.w < 1:
            raise InvariantError("context window size must be positive")
        if len(self.turns) > self.w:
            raise InvariantError("context window holds more than w turns")


def context_window(dialogue: Dialogue, target_turn_index: int, w: int = 4) -> ContextWindow:
    """The ``w`` turns immediately preceding ``target_turn_index``, in order."""
    if not 0 <= target_turn_index < len(dialogue.turns):
        raise IndexError(
            f"turn index {target_turn_index} out of range for dialogue "
            f"{dialogue.dialogue_id!r} with {len(dialogue.turns)} turns"
        )
    if w < 1:
        raise ValueError("w must be positive")
    lo = max(0, target_turn_index - w)
    return ContextWindow(turns=dialogue.turns[lo:target_turn_index], w=w)


@dataclass
class Corpus:
    """Plans with their dialogues attached, in file order."""

    plans: list[Plan] = field(default_factory=list)
    dialogues: dict[str, list[Dialogue]] = field(default_factory=dict)

    def items(self) -> list[tuple[Plan, list[Dialogue]]]:
        return [(p, list(self.dialogues.get(p.plan_id, []))) for p in self.plans]

    def plan(self, plan_id: str) -> Plan:
        for p in self.plans:
            if p.plan_id == plan_id:
                return p
        raise KeyError(plan_id)

    def all_dialogues(self) -> list[Dialogue]:
        return [d for p in self.plans for d in self.dialogues.get(p.plan_id, [])]

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.items() == other.items()


# -- serialization ---------------------------------------------------------

def plan_to_record(plan: Plan) -> dict:
    return {
        "plan_id": plan.plan_id,
        "title": plan.title,
        "domain_tag": plan.domain_tag.value,
        "actions": [
            {
                "index": a.index,
                "text": a.text,
                "start_frame": a.moment.start_frame,
                "end_frame": a.moment.end_frame,
            }
            for a in plan.actions
        ],
    }


def turn_to_record(turn: Turn) -> dict:
    return {
        "user_text": turn.user_text,
        "system_text": turn.system_text,
        "image_ref": turn.image_ref,
        "turn_type": turn.turn_type.value,
        "next_step_intent": turn.next_step_intent,
        "current_action_index": turn.current_action_index,
    }


def dialogue_to_record(dialogue: Dialogue) -> dict:
    return {
        "dialogue_id": dialogue.dialogue_id,
        "plan_id": dialogue.plan_id,
        "turns": [turn_to_record(t) for t in dialogue.turns],
    }


def _require(rec: dict, keys: Iterable[str], where: str) -> None:
    missing = [k for k in keys if k not in rec]
    if missing:
        raise InvariantError(f"{where}: missing field(s) {', '.join(missing)}")


def plan_from_record(rec: dict) -> Plan:
    _require(rec, ("plan_id", "title", "domain_tag", "actions"), "plan record")
    pid = rec["plan_id"]
    try:
        actions = []
        for a in rec["actions"]:
            _require(a, ("index", "text", "start_frame", "end_frame"), "action record")
            try:
                moment = FrameInterval(a["start_frame"], a["end_frame"])
            except InvariantError as exc:
                raise InvariantError(f"action {a.get('index')!r}: {exc}") from None
            actions.append(Action(a["index"], a["text"], moment))
        return Plan(pid, rec["title"], rec["domain_tag"], tuple(actions))
    except (InvariantError, ValueError) as exc:
        raise InvariantError(f"plan {pid!r}: {exc}") from None


def turn_from_record(rec: dict) -> Turn:
    _require(rec, ("user_text", "system_text", "image_ref", "turn_type",
                   "next_step_intent", "current_action_index"), "turn record")
    if not isinstance(rec["next_step_intent"], bool):
        raise InvariantError("next_step_intent must be a boolean")
    return Turn(rec["user_text"], rec["system_text"], rec["image_ref"], rec["turn_type"],
                rec["next_step_intent"], rec["current_action_index"])


def dialogue_from_record(rec: dict) -> Dialogue:
    _require(rec, ("dialogue_id", "plan_id", "turns"), "dialogue record")
    did = rec["dialogue_id"]
    turns = []
    for i, t in enumerate(rec["turns"]):
        try:
            turns.append(turn_from_record(t))
        except (InvariantError, ValueError) as exc:
            raise InvariantError(f"dialogue {did!r} turn {i}: {exc}") from None
    return Dialogue(did, rec["plan_id"], tuple(turns))


def read_jsonl(path: Path) -> list[tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    out = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CorpusParseError(path, lineno, f"invalid UTF-8: {exc}") from None
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(path, lineno, exc.msg) from None
            if not isinstance(rec, dict):
                raise CorpusParseError(path, lineno, "record is not a JSON object")
            out.append((lineno, rec))
    return out


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False, sort_keys=False, separators=(", ", ": "))


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_record(rec))
            fh.write("\n")


def load_corpus(path) -> Corpus:
    """Load and validate a corpus directory holding plans.jsonl and dialogues.jsonl."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus path not found: {path}")
    plans_path, dialogues_path = path / PLANS_FILE, path / DIALOGUES_FILE
    corpus = Corpus()
    seen = set()
    for lineno, rec in read_jsonl(plans_path):
        try:
            plan = plan_from_record(rec)
        except InvariantError as exc:
            raise InvariantError(f"{plans_path}:{lineno}: {exc}") from None
        if plan.plan_id in seen:
            raise InvariantError(f"{plans_path}:{lineno}: duplicate plan_id {plan.plan_id!r}")
        seen.add(plan.plan_id)
        corpus.plans.append(plan)
        corpus.dialogues[plan.plan_id] = []
    by_id = {p.plan_id: p for p in corpus.plans}
    dialogue_ids = set()
    for lineno, rec in read_jsonl(dialogues_path):
        try:
            dialogue = dialogue_from_record(rec)
            if dialogue.plan_id not in by_id:
                raise InvariantError(
                    f"dialogue {dialogue.dialogue_id!r} references unknown plan {dialogue.plan_id!r}"
                )
            dialogue.check_against(by_id[dialogue.plan_id])
        except InvariantError as exc:
            raise InvariantError(f"{dialogues_path}:{lineno}: {exc}") from None
        if dialogue.dialogue_id in dialogue_ids:
            raise InvariantError(f"{dialogues_path}:{lineno}: duplicate dialogue_id {dialogue.dialogue_id!r}")
        dialogue_ids.add(dialogue.dialogue_id)
        corpus.dialogues[dialogue.plan_id].append(dialogue)
    return corpus


def save_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_jsonl(path / PLANS_FILE, (plan_to_record(p) for p in corpus.plans))
    write_jsonl(path / DIALOGUES_FILE, (dialogue_to_record(d) for d in corpus.all_dialogues()))


def lint_corpus(corpus: Corpus) -> list[str]:
    """Non-fatal findings: overlapping moments, regressing action indices."""
    warnings = []
    for plan, dialogues in corpus.items():
        for a, b in plan.overlapping_actions():
            warnings.append(f"plan {plan.plan_id!r}: moments of actions {a} and {b} overlap")
        for d in dialogues:
            prev: Optional[int] = None
            for i, t in enumerate(d.turns):
                if prev is not None and t.current_action_index < prev:
                    warnings.append(
                        f"dialogue {d.dialogue_id!r} turn {i}: action index regresses "
                        f"{prev} -> {t.current_action_index}"
                    )
                prev = t.current_action_index
    return warnings
