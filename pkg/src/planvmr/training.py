"""Losses, analytic gradients and the desk-scale trainer for the retrieval head.

The retrieval objective is the contrastive loss of each retrieval token
against its region target, with the other batch entries as negatives:

    L_RET  = InfoNCE(g_start, target_start) + InfoNCE(g_end, target_end)
    L_CVMR = L_RET / 2 + L_PGAG

Each InfoNCE term is a batch mean, query-to-target only. The PGAG term is a
token negative log-likelihood over supplied probability tables; it does not
depend on the head, so it contributes nothing to the head gradients.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import DataError, DegenerateInputError, DivergenceError, InvariantError, NumericalError, ShapeError
from .retrieval import RetrievalHead, rope_encode_many, rope_transpose_many

log = logging.getLogger(__name__)

MATRICES = ("w_start", "w_end", "w_ret")


# -- token NLL -------------------------------------------------------------

@dataclass(frozen=True)
class TokenProbTable:
    """Per-step vocabulary distributions with the reference token id."""

    steps: tuple

    def __post_init__(self):
        steps = []
        for t, (dist, target) in enumerate(self.steps):
            dist = np.asarray(dist, dtype=np.float64).reshape(-1)
            if np.any(dist < 0) or not np.all(np.isfinite(dist)):
                raise InvariantError(f"step {t}: distribution has negative or non-finite entries")
            if abs(dist.sum() - 1.0) > 1e-9:
                raise InvariantError(f"step {t}: distribution sums to {dist.sum()!r}, not 1")
            if not 0 <= int(target) < dist.shape[0]:
                raise InvariantError(f"step {t}: target id {target} outside vocabulary of size {dist.shape[0]}")
            steps.append((dist, int(target)))
        object.__setattr__(self, "steps", tuple(steps))


def nll_loss(table: TokenProbTable) -> float:
    total = 0.0
    for t, (dist, target) in enumerate(table.steps):
        p = dist[target]
        if p <= 0.0:
            raise NumericalError(f"step {t}: reference token has probability 0, loss is infinite")
        total -= math.log(p)
    return total


# -- InfoNCE ---------------------------------------------------------------

def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def infonce(sim_matrix, temperature: float) -> float:
    """Mean over rows of the cross-entropy with the diagonal as the positive."""
    s = np.asarray(sim_matrix, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got shape {s.shape}")
    if s.shape[0] < 2:
        raise InvariantError("InfoNCE needs at least two samples for in-batch negatives")
    if not np.all(np.isfinite(s)):
        raise NumericalError("non-finite similarity")
    if not temperature > 0:
        raise InvariantError("temperature must be positive")
    ls = _log_softmax_rows(s / temperature)
    return float(-np.mean(np.diag(ls)))


# -- batches ---------------------------------------------------------------

@dataclass(frozen=True)
class RegionFrames:
    """Raw features and RoPE positions of the frames averaged into one target."""

    vectors: np.ndarray
    positions: np.ndarray


@dataclass
class RetrievalBatch:
    queries_start: np.ndarray
    queries_end: np.ndarray
    targets_start: np.ndarray
    targets_end: np.ndarray
    regions_start: Optional[list] = None
    regions_end: Optional[list] = None
    pgag: Optional[TokenProbTable] = None

    def __post_init__(self):
        self.queries_start = np.atleast_2d(np.asarray(self.queries_start, dtype=np.float64))
        self.queries_end = np.atleast_2d(np.asarray(self.queries_end, dtype=np.float64))
        self.targets_start = np.atleast_2d(np.asarray(self.targets_start, dtype=np.float64))
        self.targets_end = np.atleast_2d(np.asarray(self.targets_end, dtype=np.float64))
        b = self.queries_start.shape[0]
        lens = {self.queries_end.shape[0], self.targets_start.shape[0], self.targets_end.shape[0]}
        if lens != {b}:
            raise ShapeError("queries and targets must all have the batch length")
        if b < 2:
            raise InvariantError("a retrieval batch needs at least two samples")
        for regions in (self.regions_start, self.regions_end):
            if regions is not None and len(regions) != b:
                raise ShapeError("region frame lists must have the batch length")

    @property
    def batch_size(self) -> int:
        return self.queries_start.shape[0]

    @property
    def has_regions(self) -> bool:
        return self.regions_start is not None and self.regions_end is not None


def _live_targets(head: RetrievalHead, regions: Sequence[RegionFrames]) -> np.ndarray:
    base = head.config.rope_base
    out = []
    for r in regions:
        proj = np.asarray(r.vectors) @ head.w_ret.T
        out.append(rope_encode_many(proj, r.positions, base).mean(axis=0))
    return np.array(out)


def _normalise(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(m, axis=1)
    if np.any(n == 0.0):
        raise DegenerateInputError(f"zero-norm {what} in retrieval batch")
    return m / n[:, None], n


def sim_matrix(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """``[i, j] = cosine(queries[i], targets[j])``."""
    qh, _ = _normalise(queries, "query")
    th, _ = _normalise(targets, "target")
    return qh @ th.T


def _side_targets(head, batch, side, live):
    if live:
        if not batch.has_regions:
            raise DataError("live-target mode needs region frames in the batch")
        return _live_targets(head, batch.regions_start if side == "start" else batch.regions_end)
    return batch.targets_start if side == "start" else batch.targets_end


def cvmr_loss(head: RetrievalHead, batch: RetrievalBatch, pgag: Optional[TokenProbTable] = None,
              live_targets: bool = False) -> tuple[float, dict]:
    tau = head.config.temperature
    pgag = pgag if pgag is not None else batch.pgag
    g_start = batch.queries_start @ head.w_start.T
    g_end = batch.queries_end @ head.w_end.T
    ret_start = infonce(sim_matrix(g_start, _side_targets(head, batch, "start", live_targets)), tau)
    ret_end = infonce(sim_matrix(g_end, _side_targets(head, batch, "end", live_targets)), tau)
    pg = nll_loss(pgag) if pgag is not None else 0.0
    parts = {"ret_start": ret_start, "ret_end": ret_end, "pgag": pg}
    return (ret_start + ret_end) / 2.0 + pg, parts


def _side_grad(q: np.ndarray, t: np.ndarray, tau: float, scale: float):
    """Gradients of ``scale * InfoNCE(cos(q_i, t_j) / tau)`` w.r.t. q and t."""
    qh, qn = _normalise(q, "query")
    th, tn = _normalise(t, "target")
    s = qh @ th.T
    b = s.shape[0]
    p = np.exp(_log_softmax_rows(s / tau))
    g = scale * (p - np.eye(b)) / (b * tau)
    gs = g * s
    dq = (g @ th - gs.sum(axis=1)[:, None] * qh) / qn[:, None]
    dt = (g.T @ qh - gs.sum(axis=0)[:, None] * th) / tn[:, None]
    return dq, dt


def cvmr_grad(head: RetrievalHead, batch: RetrievalBatch, live_targets: bool = False) -> dict[str, np.ndarray]:
    """Analytic gradients of ``L_RET / 2`` for the three head matrices.

    With ``live_targets=False`` the targets are constants and the ``w_ret``
    gradient is zero. With ``live_targets=True`` the targets are recomputed
    from the batch's region frames and the gradient flows into ``w_ret``.
    """
    tau = head.config.temperature
    c = head.config
    if batch.queries_start.shape[1] != c.d_lm or batch.queries_end.shape[1] != c.d_lm:
        raise ShapeError(f"queries must have d_lm={c.d_lm} columns")
    grads = {"w_start": None, "w_end": None, "w_ret": np.zeros_like(head.w_ret)}
    for side, w, h in (("start", head.w_start, batch.queries_start), ("end", head.w_end, batch.queries_end)):
        t = _side_targets(head, batch, side, live_targets)
        if t.shape[1] != c.d:
            raise ShapeError(f"targets must have d={c.d} columns")
        dq, dt = _side_grad(h @ w.T, t, tau, 0.5)
        grads["w_" + side] = dq.T @ h
        if live_targets:
            regions = batch.regions_start if side == "start" else batch.regions_end
            for j, r in enumerate(regions):
                pos = np.asarray(r.positions)
                back = rope_transpose_many(np.repeat(dt[j][None, :], len(pos), axis=0), pos, c.rope_base)
                grads["w_ret"] += back.T @ np.asarray(r.vectors) / len(pos)
    return grads


def numerical_grad(loss_fn: Callable[[RetrievalHead], float], head: RetrievalHead,
                   names: Iterable[str] = MATRICES, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of ``loss_fn`` w.r.t. each entry of the named matrices."""
    out = {}
    for name in names:
        base = getattr(head, name)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            probe = head.copy()
            m = getattr(probe, name)
            m[idx] = base[idx] + eps
            fp = loss_fn(probe)
            m[idx] = base[idx] - eps
            fm = loss_fn(probe)
            g[idx] = (fp - fm) / (2 * eps)
        out[name] = g
    return out


# -- optimizer -------------------------------------------------------------

@dataclass
class OptState:
    """AdamW state; the defaults are the retrieval-head settings."""

    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise InvariantError("learning rate and weight decay must be non-negative")


def adamw_step(head: RetrievalHead, grads: dict[str, np.ndarray], opt: OptState) -> None:
    """One in-place decoupled-weight-decay Adam update."""
    opt.step_count += 1
    t = opt.step_count
    lr = opt.learning_rate
    for name, g in grads.items():
        w = getattr(head, name)
        if name not in opt.m:
            opt.m[name] = np.zeros_like(w)
            opt.v[name] = np.zeros_like(w)
        elif opt.m[name].shape != w.shape:
            raise ShapeError(f"optimizer buffer for {name} does not match the head")
        m, v = opt.m[name], opt.v[name]
        m *= opt.beta1
        m += (1 - opt.beta1) * g
        v *= opt.beta2
        v += (1 - opt.beta2) * g * g
        m_hat = m / (1 - opt.beta1 ** t)
        v_hat = v / (1 - opt.beta2 ** t)
        w -= lr * opt.weight_decay * w
        w -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)


# -- trainer ---------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalSample:
    h_rets: np.ndarray
    h_rete: np.ndarray
    target_start: np.ndarray
    target_end: np.ndarray
    region_start: Optional[RegionFrames] = None
    region_end: Optional[RegionFrames] = None


def make_batch(samples: Sequence[RetrievalSample]) -> RetrievalBatch:
    has_regions = all(s.region_start is not None and s.region_end is not None for s in samples)
    return RetrievalBatch(
        np.array([s.h_rets for s in samples]),
        np.array([s.h_rete for s in samples]),
        np.array([s.target_start for s in samples]),
        np.array([s.target_end for s in samples]),
        [s.region_start for s in samples] if has_regions else None,
        [s.region_end for s in samples] if has_regions else None,
    )


def shuffled_batches(samples: Sequence[RetrievalSample], batch_size: int) -> Callable[[np.random.Generator], Iterator[RetrievalBatch]]:
    """Endless epochs of shuffled batches; a trailing batch smaller than 2 is dropped."""
    if len(samples) < 2:
        raise DataError("need at least two training samples")
    batch_size = min(batch_size, len(samples))
    if batch_size < 2:
        raise InvariantError("batch size must be at least 2")

    def gen(rng: np.random.Generator) -> Iterator[RetrievalBatch]:
        while True:
            order = rng.permutation(len(samples))
            for lo in range(0, len(order), batch_size):
                chunk = order[lo:lo + batch_size]
                if len(chunk) >= 2:
                    yield make_batch([samples[i] for i in chunk])

    return gen


BatchSource = Union[Iterable[RetrievalBatch], Callable[[np.random.Generator], Iterator[RetrievalBatch]]]


def train_head(head: RetrievalHead, data: BatchSource, opt: OptState, steps: int, seed: int,
               live_targets: bool = False) -> tuple[RetrievalHead, list[dict]]:
    """Run ``steps`` AdamW updates on a copy of ``head``.

    ``data`` is either an iterable of batches or a callable taking a seeded
    generator and returning an iterator (the seed then fixes shuffling).
    Returns the trained head and one trace row per step with the loss
    measured before that step's update.
    """
    if steps < 0:
        raise InvariantError("steps must be non-negative")
    head = head.copy()
    rng = np.random.default_rng(seed)
    it = iter(data(rng) if callable(data) else data)
    trace = []
    for step in range(steps):
        try:
            batch = next(it)
        except StopIteration:
            raise DataError(f"batch stream exhausted after {step} of {steps} steps") from None
        try:
            loss, parts = cvmr_loss(head, batch, live_targets=live_targets)
        except NumericalError as exc:
            raise DivergenceError(step, float("nan")) from exc
        if not math.isfinite(loss):
            raise DivergenceError(step, loss)
        trace.append({"step": step, "loss": loss, **parts})
        grads = cvmr_grad(head, batch, live_targets=live_targets)
        if not live_targets:
            grads.pop("w_ret")
        adamw_step(head, grads, opt)
        for name in MATRICES:
            if not np.all(np.isfinite(getattr(head, name))):
                raise DivergenceError(step, float("nan"))
    return head, trace


def trace_csv(trace: Sequence[dict]) -> str:
    lines = ["step,loss,ret_start,ret_end,pgag"]
    for row in trace:
        lines.append(",".join([str(row["step"])] + [repr(float(row[k])) for k in ("loss", "ret_start", "ret_end", "pgag")]))
    return "\n".join(lines) + "\n"


# -- multistage descriptor -------------------------------------------------

TRAINABLE = frozenset({"head", "connector", "lm", "ve"})


@dataclass(frozen=True)
class Stage:
    name: str
    trainable: frozenset
    datasets: tuple
    steps: int
    task_batch_sizes: dict

    @property
    def trains_head(self) -> bool:
        return "head" in self.trainable


@dataclass(frozen=True)
class TrainSchedule:
    stages: tuple

    def __post_init__(self):
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise InvariantError("stage names must be unique")
        for s in self.stages:
            if s.steps < 1:
                raise InvariantError(f"stage {s.name!r}: steps must be positive")
            unknown = set(s.trainable) - TRAINABLE
            if unknown:
                raise InvariantError(f"stage {s.name!r}: unknown trainable component(s) {sorted(unknown)}")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainSchedule":
        stages = []
        for s in raw["stages"]:
            stages.append(Stage(
                name=s["name"],
                trainable=frozenset(s["trainable"]),
                datasets=tuple(s.get("datasets", [])),
                steps=int(s["steps"]),
                task_batch_sizes=dict(s.get("task_batch_sizes", {})),
            ))
        return cls(tuple(stages))

    @classmethod
    def load(cls, path) -> "TrainSchedule":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls.from_dict(raw)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: invalid schedule: {exc}") from None

    def to_dict(self) -> dict:
        return {"stages": [
            {"name": s.name, "trainable": sorted(s.trainable), "datasets": list(s.datasets),
             "steps": s.steps, "task_batch_sizes": dict(s.task_batch_sizes)}
            for s in self.stages
        ]}

    def head_steps(self) -> int:
        """Steps this artifact can execute: only the head part of each stage is trained."""
        return sum(s.steps for s in self.stages if s.trains_head)


def multistage_default() -> TrainSchedule:
    """Four-stage layout with the step counts and batch sizes of the reference setup."""
    return TrainSchedule((
        Stage("initialization", frozenset({"head", "connector"}), ("laion400m",), 19500,
              {"captioning": 512, "retrieval": 512}),
        Stage("visual_instruction_tuning", frozenset({"head", "connector", "lm", "ve"}),
              ("sharegpt4o", "mammoth_vl", "vqav2", "gqa", "sharegpt4v", "pixmo_cap", "llava_pretrain"), 15000,
              {"instruction": 64, "retrieval": 96}),
        Stage("domain_specific_tuning", frozenset({"head", "connector", "lm"}),
              ("food_dialogues", "food_reason_seg", "youcook2", "coin", "crosstask"), 866,
              {"instruction": 128, "retrieval": 192}),
        Stage("task_specific_training", frozenset({"head", "connector", "lm"}),
              ("instruction_vid_dial",), 3252, {"all": 32}),
    ))


# -- multitask batch schedule ----------------------------------------------

def multitask_schedule(task_sizes: dict[str, int], task_batch_sizes: dict[str, int], seed: int) -> list[tuple[str, int]]:
    """One epoch of (task, batch index) pairs.

    Every task draws ``floor(S_min / batch_size)`` batches, where ``S_min``
    is the smallest task's sample count, so each task contributes about the
    same number of samples. Tasks alternate round-robin in a seeded order;
    a task that has used up its batches is skipped.
    """
    if set(task_sizes) != set(task_batch_sizes):
        raise InvariantError("task_sizes and task_batch_sizes must name the same tasks")
    if not task_sizes:
        return []
    for task in task_sizes:
        size, bs = task_sizes[task], task_batch_sizes[task]
        if size < 1 or bs < 1:
            raise InvariantError(f"task {task!r}: sizes must be positive")
        if bs > size:
            raise InvariantError(f"task {task!r}: batch size {bs} exceeds task size {size}")
    s_min = min(task_sizes.values())
    counts = {t: s_min // task_batch_sizes[t] for t in task_sizes}
    tasks = sorted(task_sizes)
    order = [tasks[i] for i in np.random.default_rng(seed).permutation(len(tasks))]
    used = dict.fromkeys(tasks, 0)
    out = []
    while any(used[t] < counts[t] for t in order):
        for t in order:
            if used[t] < counts[t]:
                out.append((t, used[t]))
                used[t] += 1
    return out
