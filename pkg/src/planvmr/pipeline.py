"""Instructional video-dialogue dataset construction.

``build_dataset`` runs curate -> pVQA insertion -> frame subsampling ->
plan-level split and writes a self-describing dataset directory. Each plan
has one video whose feature file is ``features/<plan_id>.feat``; optional
per-dialogue token-state files ``tokens/<dialogue_id>.tok`` are carried
along with their turn indices remapped after insertion.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import shutil
import tempfile
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import formats
from .errors import DataError, GenerationError, InvariantError, StageError
from .plan_model import (
    DIALOGUES_FILE,
    PLANS_FILE,
    Action,
    Corpus,
    Dialogue,
    FrameInterval,
    Plan,
    Turn,
    TurnType,
    context_window,
    load_corpus,
    read_jsonl,
    save_corpus,
)
from .retrieval import FrameEmbeddingSet

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
SPLIT_FILE = "split.json"
PROVENANCE_FILE = "provenance.json"
MANIFEST_FILE = "run_manifest.json"
HASH_NAME = "sha256"


@dataclass(frozen=True)
class PipelineConfig:
    pvqa_probability: float = 0.30
    keep_per_plan: int = 4
    subsample_stride: int = 20
    split_fractions: tuple = (0.90, 0.05, 0.05)
    seed: int = 0
    backend: str = "mock"

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if not 0.0 <= self.pvqa_probability <= 1.0:
            raise InvariantError("pvqa_probability must lie in [0, 1]")
        if self.keep_per_plan < 1:
            raise InvariantError("keep_per_plan must be at least 1")
        if self.subsample_stride < 1:
            raise InvariantError("subsample_stride must be at least 1")
        _check_fractions(self.split_fractions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d


def _check_fractions(fractions) -> None:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise InvariantError("split fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InvariantError(f"split fractions sum to {sum(fractions)!r}, not 1")


# -- curation --------------------------------------------------------------

def curate(dialogues: dict[str, list[Dialogue]], keep: int) -> dict[str, list[Dialogue]]:
    """Keep the ``keep`` dialogues per plan with the most multimodal turns.

    Ties go to the lexicographically smaller dialogue id. Survivors stay in
    their original order.
    """
    if keep < 1:
        raise InvariantError("keep must be at least 1")
    out = {}
    for plan_id, ds in dialogues.items():
        ranked = sorted(ds, key=lambda d: (-d.multimodal_count(), d.dialogue_id))
        chosen = {d.dialogue_id for d in ranked[:keep]}
        out[plan_id] = [d for d in ds if d.dialogue_id in chosen]
    return out


def middle_frame(moment: FrameInterval) -> int:
    return (moment.start_frame + moment.end_frame) // 2


# -- text generation client ------------------------------------------------

class RequestKind(str, Enum):
    PVQA_PAIR = "pvqa_pair"
    PLAN_REWRITE = "plan_rewrite"


PROMPT_TEMPLATES = {
    "pvqa_pair_v1": (
        "You write one user question about a photo the user just took while following the task below, "
        "and the assistant's answer. The question must concern the photo and be answerable from it, "
        "the dialogue so far and the task.\n"
        "Reply exactly as:\nQ: <question>\nA: <answer>\n---\n"
        "Task: {title}\n{plan_text}\n\nDialogue so far:\n{history}\n---\n"
        "Current step: {step_number} - {step_text}\nImage: {image}\n"
    ),
    "plan_rewrite_v1": (
        "Rewrite the following video segment annotations into a numbered list of short imperative "
        "steps, one per line, in the same order.\nTask: {title}\nAnnotations:\n{annotations}\n"
    ),
}
_KIND_TEMPLATE = {RequestKind.PVQA_PAIR: "pvqa_pair_v1", RequestKind.PLAN_REWRITE: "plan_rewrite_v1"}


@dataclass(frozen=True)
class GenerationRequest:
    kind: RequestKind
    context: dict
    prompt_template_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", RequestKind(self.kind))
        if not self.prompt_template_id:
            object.__setattr__(self, "prompt_template_id", _KIND_TEMPLATE[self.kind])
        if self.prompt_template_id not in PROMPT_TEMPLATES:
            raise InvariantError(f"unknown prompt template {self.prompt_template_id!r}")

    def prompt(self) -> str:
        try:
            return PROMPT_TEMPLATES[self.prompt_template_id].format(**self.context)
        except KeyError as exc:
            raise InvariantError(f"request context lacks {exc} for template {self.prompt_template_id!r}") from None

    def digest(self) -> str:
        blob = json.dumps({"kind": self.kind.value, "template": self.prompt_template_id, "context": self.context},
                          sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def describe(self) -> str:
        return f"{self.kind.value} request {self.digest()[:12]}"


Backend = Callable[[GenerationRequest], str]

_MOCK_QUESTIONS = (
    "Does this look right for {step}?",
    "Is what I have here ready for the next part of {step}?",
    "Am I doing {step} correctly, judging by this picture?",
    "What should I check in this photo before finishing {step}?",
)
_MOCK_ANSWERS = (
    "From the image it looks on track. Keep following the step: {text}",
    "It seems close. Make sure you complete this: {text}",
    "Yes, that matches what this step needs. Remember: {text}",
    "Check it against the instruction before moving on: {text}",
)


def mock_backend(request: GenerationRequest) -> str:
    """Deterministic stand-in for an LLM: output is a pure function of the request."""
    h = int(request.digest(), 16)
    ctx = request.context
    if request.kind is RequestKind.PVQA_PAIR:
        step = f"step {ctx.get('step_number', '?')}"
        q = _MOCK_QUESTIONS[h % len(_MOCK_QUESTIONS)].format(step=step)
        a = _MOCK_ANSWERS[(h >> 8) % len(_MOCK_ANSWERS)].format(text=ctx.get("step_text", ""))
        return f"Q: {q}\nA: {a}"
    lines = []
    for n, ann in enumerate(str(ctx.get("annotations", "")).splitlines(), start=1):
        ann = ann.strip().rstrip(".")
        if ann:
            lines.append(f"{n}. {ann[0].upper()}{ann[1:]}.")
    return "\n".join(lines)


def http_backend(endpoint: Optional[str] = None, api_key: Optional[str] = None, timeout: float = 60.0) -> Backend:
    """Backend that POSTs ``{"prompt": ...}`` and reads ``{"text": ...}``.

    Endpoint and key default to ``PLANVMR_GEN_ENDPOINT`` / ``PLANVMR_GEN_API_KEY``.
    """
    endpoint = endpoint or os.environ.get("PLANVMR_GEN_ENDPOINT")
    api_key = api_key or os.environ.get("PLANVMR_GEN_API_KEY")
    if not endpoint:
        raise GenerationError("http backend needs PLANVMR_GEN_ENDPOINT")

    def call(request: GenerationRequest) -> str:
        body = json.dumps({"prompt": request.prompt(), "kind": request.kind.value}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        req = urllib.request.Request(endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError) as exc:
            raise GenerationError(f"{request.describe()}: backend unreachable: {exc}") from None
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise GenerationError(f"{request.describe()}: backend response lacks 'text'")
        return payload["text"]

    return call


def get_backend(name: str) -> Backend:
    if name == "mock":
        return mock_backend
    if name == "http":
        return http_backend()
    raise DataError(f"unknown generation backend {name!r}")


_Q = re.compile(r"^\s*Q:\s*(.+?)\s*$", re.MULTILINE)
_A = re.compile(r"^\s*A:\s*(.+?)\s*$", re.MULTILINE)


def parse_qa_pair(text: str, request: Optional[GenerationRequest] = None) -> tuple[str, str]:
    q, a = _Q.search(text), _A.search(text)
    if not q or not a or q.start() > a.start():
        where = request.describe() if request is not None else "generation output"
        raise GenerationError(f"{where}: expected 'Q: ...' then 'A: ...' lines")
    return q.group(1), a.group(1)


def generation_client(request: GenerationRequest, backend: Backend = mock_backend) -> str:
    """Run ``request`` through ``backend``; pVQA output must hold a Q/A pair."""
    try:
        text = backend(request)
    except GenerationError:
        raise
    except Exception as exc:  # backends are user-pluggable
        raise GenerationError(f"{request.describe()}: backend failed: {exc}") from exc
    if request.kind is RequestKind.PVQA_PAIR:
        parse_qa_pair(text, request)
    return text


_NUMBERED = re.compile(r"^\s*\d+[.)]\s*(.+?)\s*$")


def rewrite_plan(plan_id: str, title: str, annotations: Sequence[str], moments: Sequence[FrameInterval],
                 backend: Backend = mock_backend, domain_tag: str = "diy") -> Plan:
    """Turn a video's segment annotations into a plan via the generation client."""
    if len(annotations) != len(moments):
        raise InvariantError("one moment per annotation is required")
    req = GenerationRequest(RequestKind.PLAN_REWRITE, {"title": title, "annotations": "\n".join(annotations)})
    steps = [m.group(1) for m in map(_NUMBERED.match, generation_client(req, backend).splitlines()) if m]
    if len(steps) != len(annotations):
        raise GenerationError(f"{req.describe()}: got {len(steps)} steps for {len(annotations)} annotations")
    return Plan(plan_id, title, domain_tag,
                tuple(Action(i, s, m) for i, (s, m) in enumerate(zip(steps, moments), start=1)))


def select_videos(videos_by_task: dict[str, Sequence[str]], per_task: int, seed: int) -> dict[str, list[str]]:
    """Seeded choice of ``per_task`` videos for each task (all of them when fewer exist)."""
    if per_task < 1:
        raise InvariantError("per_task must be at least 1")
    rng = np.random.default_rng(seed)
    out = {}
    for task in sorted(videos_by_task):
        vids = sorted(videos_by_task[task])
        pick = rng.permutation(len(vids))[:per_task]
        out[task] = [vids[i] for i in sorted(pick)]
    return out


# -- pVQA insertion --------------------------------------------------------

def _history(turns: Sequence[Turn]) -> str:
    return "\n".join(f"User: {t.user_text}\nAssistant: {t.system_text}" for t in turns) or "(none)"


def pvqa_request(dialogue: Dialogue, plan: Plan, trigger: int, frame: int) -> GenerationRequest:
    turn = dialogue.turns[trigger]
    action = plan.action(turn.current_action_index)
    window = context_window(dialogue, trigger, 4).turns + (turn,)
    return GenerationRequest(RequestKind.PVQA_PAIR, {
        "title": plan.title,
        "plan_text": "\n".join(f"{a.index}. {a.text}" for a in plan.actions),
        "history": _history(window[-4:]),
        "step_number": action.index,
        "step_text": action.text,
        "image": f"{plan.plan_id}#frame={frame}",
    })


def insert_pvqa(dialogue: Dialogue, plan: Plan, p: float, rng: np.random.Generator,
                backend: Backend = mock_backend) -> tuple[Dialogue, list[int]]:
    """Insert pVQA turns after next-step turns, each with probability ``p``.

    One draw is taken per trigger turn, in turn order. The inserted turn's
    image is the middle frame of the trigger's current action moment.
    Returns the new dialogue and the new index of each original turn.
    """
    if not 0.0 <= p <= 1.0:
        raise InvariantError("insertion probability must lie in [0, 1]")
    dialogue.check_against(plan)
    turns: list[Turn] = []
    index_map: list[int] = []
    for i, turn in enumerate(dialogue.turns):
        index_map.append(len(turns))
        turns.append(turn)
        if not turn.next_step_intent:
            continue
        if rng.random() >= p:
            continue
        frame = middle_frame(plan.action(turn.current_action_index).moment)
        req = pvqa_request(dialogue, plan, i, frame)
        try:
            q, a = parse_qa_pair(generation_client(req, backend), req)
        except GenerationError as exc:
            log.warning("dialogue %s turn %d: skipping pVQA insertion: %s", dialogue.dialogue_id, i, exc)
            continue
        turns.append(Turn(q, a, frame, TurnType.PVQA, False, turn.current_action_index))
    return replace(dialogue, turns=tuple(turns)), index_map


# -- subsampling -----------------------------------------------------------

def remap_moment(moment: FrameInterval, kept: np.ndarray) -> FrameInterval:
    lo = np.searchsorted(kept, moment.start_frame, side="left")
    hi = np.searchsorted(kept, moment.end_frame, side="right") - 1
    if lo <= hi:
        return FrameInterval(int(kept[lo]), int(kept[hi]))
    mid = (moment.start_frame + moment.end_frame) / 2.0
    # nearest kept frame to the midpoint, earlier one on ties
    nearest = int(kept[np.argmin(np.abs(kept - mid))])
    return FrameInterval(nearest, nearest)


def subsample(frames: FrameEmbeddingSet, plan: Plan, stride: int) -> tuple[FrameEmbeddingSet, Plan]:
    """Keep frames whose raw index is a multiple of ``stride`` and snap moments onto them."""
    if stride < 1:
        raise InvariantError("stride must be at least 1")
    mask = frames.frame_indices % stride == 0
    if not np.any(mask):
        raise DataError(f"video {frames.video_id!r} has no frames left after subsampling with stride {stride}")
    kept = FrameEmbeddingSet(frames.video_id, frames.frame_indices[mask], frames.vectors[mask])
    actions, floor = [], None
    for a in plan.actions:
        m = remap_moment(a.moment, kept.frame_indices)
        # midpoint snapping of overlapping moments can reorder starts; keep them non-decreasing
        if floor is not None and m.start_frame < floor:
            m = FrameInterval(floor, max(floor, m.end_frame))
        floor = m.start_frame
        actions.append(replace(a, moment=m))
    return kept, replace(plan, actions=tuple(actions))


# -- splits ----------------------------------------------------------------

def split(plan_ids: Sequence[str], fractions=(0.90, 0.05, 0.05), seed: int = 0) -> dict[str, str]:
    """Seeded plan-level split: floor for train and dev, the remainder to test."""
    _check_fractions(fractions)
    ids = sorted(set(plan_ids))
    if len(ids) != len(plan_ids):
        raise InvariantError("duplicate plan ids")
    n = len(ids)
    if n < sum(f > 0 for f in fractions):
        raise InvariantError(f"{n} plans cannot fill {sum(f > 0 for f in fractions)} non-empty splits")
    n_train = math.floor(fractions[0] * n + 1e-9)
    n_dev = math.floor(fractions[1] * n + 1e-9)
    order = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
    out = {}
    for pos, pid in enumerate(order):
        out[pid] = "train" if pos < n_train else "dev" if pos < n_train + n_dev else "test"
    return out


def split_manifest(assignment: dict[str, str]) -> dict[str, list[str]]:
    return {s: sorted(pid for pid, v in assignment.items() if v == s) for s in SPLITS}


# -- hashing and build -----------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(path) -> str:
    """sha256 over canonical JSON records for .jsonl/.json files, raw bytes otherwise."""
    path = Path(path)
    h = hashlib.sha256()
    if path.suffix == ".jsonl":
        for _, rec in read_jsonl(path):
            h.update(canonical_json(rec).encode("utf-8"))
            h.update(b"\n")
    elif path.suffix == ".json":
        h.update(canonical_json(json.loads(path.read_text(encoding="utf-8"))).encode("utf-8"))
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def tree_hashes(root) -> dict[str, str]:
    root = Path(root)
    return {p.relative_to(root).as_posix(): content_hash(p)
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != MANIFEST_FILE}


def write_json(path, obj) -> None:
    formats.atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8"))


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        return inner
    return wrap


def prepare_output_dir(out: Path) -> None:
    if out.exists():
        if not out.is_dir():
            raise DataError(f"output path {out} exists and is not a directory")
        if any(out.iterdir()) and not (out / PROVENANCE_FILE).exists():
            raise DataError(f"refusing to overwrite non-empty directory {out} (no {PROVENANCE_FILE})")


def build_dataset(corpus_dir, out_dir, config: PipelineConfig, backend: Optional[Backend] = None) -> dict:
    """Build a dataset directory; returns the provenance record.

    Output is written to a temporary sibling directory and moved into place
    only when every stage succeeds.
    """
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    backend = backend or get_backend(config.backend)
    prepare_output_dir(out_dir)

    corpus = _stage("load")(load_corpus)(corpus_dir)
    input_hashes = _stage("load")(tree_hashes)(corpus_dir)
    curated = _stage("curate")(curate)(corpus.dialogues, config.keep_per_plan)

    @_stage("insert_pvqa")
    def augment():
        rng = np.random.default_rng(config.seed)
        dialogues, maps = {}, {}
        for plan in corpus.plans:
            dialogues[plan.plan_id] = []
            for d in curated.get(plan.plan_id, []):
                new, index_map = insert_pvqa(d, plan, config.pvqa_probability, rng, backend)
                dialogues[plan.plan_id].append(new)
                maps[d.dialogue_id] = index_map
        return dialogues, maps

    dialogues, index_maps = augment()

    @_stage("subsample")
    def sub():
        plans, feats = [], {}
        for plan in corpus.plans:
            frames = formats.load_features(corpus_dir / "features" / f"{plan.plan_id}{formats.FEATURE_SUFFIX}")
            kept, new_plan = subsample(frames, plan, config.subsample_stride)
            plans.append(new_plan)
            feats[plan.plan_id] = kept
        return plans, feats

    plans, feats = sub()
    assignment = _stage("split")(split)([p.plan_id for p in plans], config.split_fractions, config.seed)

    @_stage("write")
    def write():
        out_dir.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=out_dir.parent, prefix=f".{out_dir.name}.tmp-"))
        try:
            out_corpus = Corpus(plans=plans, dialogues=dialogues)
            for plan in plans:
                for d in dialogues[plan.plan_id]:
                    d.check_against(plan)
            save_corpus(out_corpus, tmp)
            for pid, kept in feats.items():
                formats.save_features(kept, tmp / "features" / f"{pid}{formats.FEATURE_SUFFIX}")
            tok_dir = corpus_dir / "tokens"
            for d in out_corpus.all_dialogues():
                src = tok_dir / f"{d.dialogue_id}{formats.TOKEN_SUFFIX}"
                if not src.exists():
                    continue
                did, states = formats.load_token_states(src)
                index_map = index_maps[d.dialogue_id]
                remapped = {}
                for t, s in states.items():
                    if not 0 <= t < len(index_map):
                        raise DataError(f"{src}: turn {t} out of range")
                    remapped[index_map[t]] = s
                formats.save_token_states(did, remapped, tmp / "tokens" / src.name)
            write_json(tmp / SPLIT_FILE, split_manifest(assignment))
            provenance = {
                "config": config.to_dict(),
                "seed": config.seed,
                "hash": HASH_NAME,
                "inputs": input_hashes,
                "outputs": tree_hashes(tmp),
                "counts": {
                    "plans": len(plans),
                    "dialogues": len(out_corpus.all_dialogues()),
                    "pvqa_inserted": sum(
                        len(new.turns) - len(index_maps[new.dialogue_id]) for new in out_corpus.all_dialogues()
                    ),
                },
            }
            write_json(tmp / PROVENANCE_FILE, provenance)
            if out_dir.exists():
                shutil.rmtree(out_dir)
            os.replace(tmp, out_dir)
            return provenance
        finally:
            if tmp.exists():
                shutil.rmtree(tmp, ignore_errors=True)

    return write()


def load_split(dataset_dir) -> dict[str, list[str]]:
    path = Path(dataset_dir) / SPLIT_FILE
    if not path.exists():
        raise FileNotFoundError(f"split manifest not found: {path}")
    raw = json.loads(path.read_text(encoding="utf-8"))
    seen = {}
    for s in SPLITS:
        for pid in raw.get(s, []):
            if pid in seen:
                raise InvariantError(f"plan {pid!r} appears in splits {seen[pid]!r} and {s!r}")
            seen[pid] = s
    return {s: list(raw.get(s, [])) for s in SPLITS}
