"""Command-line entry point: ``planvmr <command> ...``.

Every command accepts ``--config`` (a JSON object whose keys are the long
option names with underscores); explicit flags win over the file. Each run
writes ``run_manifest.json`` into its output directory, and
``planvmr rerun <manifest>`` replays it and checks the output hashes.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, formats, kernels
from .errors import DataError, GenerationError, NumericalError, PlanVMRError, StageError
from .extraction import Method, extract
from .metrics import (DEFAULT_GRID, EvalRecord, ProfileRecord, evaluate_profiles, exact_match, group_transcripts,
                      majority_accuracy, parse_dialogue_scores, parse_grid, recall_at_k, rouge_l, sweep_table)
from .pipeline import MANIFEST_FILE, PipelineConfig, build_dataset, content_hash, load_split, write_json
from .plan_model import Corpus, FrameInterval, TurnType, context_window, load_corpus, lint_corpus, read_jsonl
from .retrieval import (FrameEmbeddingSet, Profile, RetrievalConfig, RetrievalHead, TokenHiddenStates,
                        frame_vectors, project_tokens, region_positions, region_target)
from .training import OptState, RegionFrames, RetrievalSample, TrainSchedule, shuffled_batches, trace_csv, train_head

log = logging.getLogger("planvmr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_METHODS = {"firm": Method.FIRM, "adjusted": Method.ADJUSTED, "midframe": Method.MIDFRAME_EXPAND}

DEFAULTS = {
    "build": {"pvqa_probability": 0.30, "keep_per_plan": 4, "subsample_stride": 20,
              "split_fractions": "0.9,0.05,0.05", "seed": 0, "backend": "mock"},
    "train": {"steps": 500, "lr": 1e-3, "weight_decay": 0.01, "seed": 0, "temperature": 0.07,
              "batch_size": 32, "d": 512, "n_region": 5, "rope_base": 10000.0, "split": "train",
              "live_targets": False, "init": None, "schedule": None},
    "evaluate": {"method": "adjusted", "tau": 0.35, "k": 1, "tau_b": 0.3, "split": "test", "task": "cvmr",
                 "seed": 0},
    "sweep": {"grid": None, "split": "dev", "seed": 0},
    "lint": {"seed": 0},
    "inspect": {"seed": 0},
    "synth": {"seed": 0},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- argument parsing ------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="planvmr", description="Plan-grounded video moment retrieval toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", type=Path, help="JSON config; flags override its values")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", type=Path, required=True)

    b = sub.add_parser("build", help="build a dataset directory from a raw corpus")
    common(b)
    b.add_argument("--corpus", type=Path, required=True)
    b.add_argument("--pvqa-probability", type=float)
    b.add_argument("--keep-per-plan", type=int)
    b.add_argument("--subsample-stride", type=int)
    b.add_argument("--split-fractions", help="train,dev,test fractions")
    b.add_argument("--backend", choices=["mock", "http"])

    t = sub.add_parser("train", help="train the retrieval head")
    common(t)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--init", type=Path, help="initial checkpoint; also fixes the frozen region targets")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--temperature", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--d", type=int, help="retrieval-space width when no --init is given")
    t.add_argument("--n-region", type=int)
    t.add_argument("--rope-base", type=float)
    t.add_argument("--split", choices=["train", "dev", "test"])
    t.add_argument("--schedule", type=Path, help="multistage schedule JSON; head stages run in order")
    t.add_argument("--live-targets", action="store_true", default=None,
                   help="backpropagate into W_ret through the region targets")

    e = sub.add_parser("evaluate", help="score moment retrieval or text-task outputs")
    common(e)
    e.add_argument("--task", choices=["cvmr", "text", "judge", "dialogue"])
    e.add_argument("--data", type=Path)
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--method", choices=sorted(_METHODS))
    e.add_argument("--tau", type=float)
    e.add_argument("--k", type=int)
    e.add_argument("--tau-b", type=float)
    e.add_argument("--split", choices=["train", "dev", "test"])
    e.add_argument("--predictions", type=Path, help="JSONL with generated/reference text (task text)")
    e.add_argument("--judgements", type=Path, help="JSONL judge transcripts (task judge or dialogue)")

    s = sub.add_parser("sweep", help="recall over a grid of extraction thresholds")
    common(s)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--grid", help="comma-separated thresholds (default: 0.00..0.95 step 0.05)")
    s.add_argument("--split", choices=["train", "dev", "test"])

    ln = sub.add_parser("lint", help="validate a corpus directory")
    common(ln, out=False)
    ln.add_argument("--out", type=Path)
    ln.add_argument("--corpus", type=Path, required=True)

    ins = sub.add_parser("inspect", help="print a dialogue next to its plan")
    common(ins, out=False)
    ins.add_argument("--out", type=Path)
    ins.add_argument("--corpus", type=Path, required=True)
    ins.add_argument("--dialogue", required=True)

    sy = sub.add_parser("synth", help="write the synthetic fixture corpus")
    common(sy)

    r = sub.add_parser("rerun", help="replay a run manifest and verify its outputs")
    r.add_argument("manifest", type=Path)
    return p


def _effective(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS.get(args.command, {}))
    if getattr(args, "config", None) is not None:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FileNotFoundError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise DataError(f"{args.config}: config must be a JSON object")
        unknown = set(raw) - set(cfg)
        if unknown:
            raise UsageError(f"{args.config}: unknown config keys {sorted(unknown)}")
        cfg.update(raw)
    for key, value in vars(args).items():
        if key in cfg and value is not None:
            cfg[key] = value
    for key, value in cfg.items():
        if isinstance(value, Path):
            cfg[key] = str(value)
    return cfg


# -- manifests -------------------------------------------------------------

def _hash_paths(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file() and f.name != MANIFEST_FILE:
                    out[str(f)] = content_hash(f)
        elif p.is_file():
            out[str(p)] = content_hash(p)
    return out


def _write_manifest(out: Path, command: str, argv: list[str], cfg: dict, inputs, outputs, started: float) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "cwd": os.getcwd(),
        "config": cfg,
        "seed": cfg.get("seed"),
        "inputs": _hash_paths(inputs),
        "outputs": _hash_paths(outputs),
        "wall_time_s": round(time.perf_counter() - started, 6),
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
    }
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / MANIFEST_FILE, manifest)


def _write_text(path: Path, text: str) -> None:
    formats.atomic_write_bytes(path, text.encode("utf-8"))


def _write_jsonl(path: Path, rows) -> None:
    _write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


# -- dataset access --------------------------------------------------------

@dataclass(frozen=True)
class Query:
    dialogue_id: str
    turn_index: int
    plan_id: str
    moment: FrameInterval
    tokens: TokenHiddenStates


def _load_features(data: Path, plan_id: str) -> FrameEmbeddingSet:
    path = data / "features" / f"{plan_id}{formats.FEATURE_SUFFIX}"
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    return formats.load_features(path)


def _split_plans(data: Path, split_name: str) -> list[str]:
    plans = load_split(data)[split_name]
    if not plans:
        raise DataError(f"{data}: split {split_name!r} is empty")
    return plans


def cvmr_queries(data: Path, corpus: Corpus, plan_ids) -> list[Query]:
    """Every CVMR turn of the given plans' dialogues with its token states."""
    out = []
    for pid in plan_ids:
        plan = corpus.plan(pid)
        for d in corpus.dialogues.get(pid, []):
            idx = [i for i, t in enumerate(d.turns) if t.turn_type is TurnType.CVMR]
            if not idx:
                continue
            path = data / "tokens" / f"{d.dialogue_id}{formats.TOKEN_SUFFIX}"
            if not path.exists():
                raise FileNotFoundError(f"token file not found: {path}")
            _, states = formats.load_token_states(path)
            for i in idx:
                if i not in states:
                    raise DataError(f"{path}: no token states for CVMR turn {i}")
                moment = plan.action(d.turns[i].current_action_index).moment
                out.append(Query(d.dialogue_id, i, pid, moment, states[i]))
    return out


def _profiles(data: Path, corpus: Corpus, plan_ids, head: RetrievalHead) -> tuple[list, list]:
    """Start/end profile records plus the mid-frame profiles used by the expansion baseline."""
    queries = cvmr_queries(data, corpus, plan_ids)
    if not queries:
        raise DataError(f"{data}: no CVMR turns in the selected split")
    cache: dict[str, tuple[FrameEmbeddingSet, np.ndarray]] = {}
    records, mids = [], []
    for q in queries:
        if q.plan_id not in cache:
            frames = _load_features(data, q.plan_id)
            vf = frame_vectors(frames, head)
            cache[q.plan_id] = (frames, vf / np.linalg.norm(vf, axis=1, keepdims=True))
        frames, vf = cache[q.plan_id]
        gs, ge = project_tokens(head, q.tokens)
        gs, ge = gs / np.linalg.norm(gs), ge / np.linalg.norm(ge)
        mid = gs + ge
        ps = Profile(frames.frame_indices, np.clip(vf @ gs, -1.0, 1.0))
        pe = Profile(frames.frame_indices, np.clip(vf @ ge, -1.0, 1.0))
        pm = Profile(frames.frame_indices, np.clip(vf @ (mid / np.linalg.norm(mid)), -1.0, 1.0))
        records.append(ProfileRecord(q.dialogue_id, q.turn_index, q.moment, ps, pe))
        mids.append(pm)
    return records, mids


def _load_head(path) -> RetrievalHead:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return formats.load_checkpoint(path)


# -- commands --------------------------------------------------------------

def cmd_synth(args, cfg) -> tuple[list, list]:
    from .synthetic import write_fixture

    write_fixture(args.out, seed=cfg["seed"])
    return [], [args.out]


def _fractions(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    try:
        return tuple(float(x) for x in str(text).split(","))
    except ValueError:
        raise UsageError(f"invalid --split-fractions {text!r}") from None


def cmd_build(args, cfg) -> tuple[list, list]:
    config = PipelineConfig(
        pvqa_probability=cfg["pvqa_probability"], keep_per_plan=cfg["keep_per_plan"],
        subsample_stride=cfg["subsample_stride"], split_fractions=_fractions(cfg["split_fractions"]),
        seed=cfg["seed"], backend=cfg["backend"],
    )
    prov = build_dataset(args.corpus, args.out, config)
    c = prov["counts"]
    print(f"built {args.out}: {c['plans']} plans, {c['dialogues']} dialogues, {c['pvqa_inserted']} pVQA turns inserted")
    return [args.corpus], [args.out]


def training_samples(data: Path, corpus: Corpus, plan_ids, reference: RetrievalHead,
                     live: bool) -> list[RetrievalSample]:
    """CVMR training samples; region targets come from ``reference`` and stay fixed."""
    frames_of: dict[str, FrameEmbeddingSet] = {}
    out = []
    n = reference.config.n_region
    for q in cvmr_queries(data, corpus, plan_ids):
        if q.plan_id not in frames_of:
            frames_of[q.plan_id] = _load_features(data, q.plan_id)
        frames = frames_of[q.plan_id]
        regions = (None, None)
        if live:
            regions = tuple(
                RegionFrames(frames.vectors[pos], pos)
                for pos in (region_positions(frames, q.moment, side, n) for side in ("start", "end"))
            )
        out.append(RetrievalSample(
            q.tokens.h_rets, q.tokens.h_rete,
            region_target(frames, reference, q.moment, "start"),
            region_target(frames, reference, q.moment, "end"),
            *regions,
        ))
    return out


def _stage_batch(stage, default: int) -> int:
    sizes = stage.task_batch_sizes
    return int(sizes.get("retrieval", sizes.get("all", default)))


def cmd_train(args, cfg) -> tuple[list, list]:
    data, out = Path(args.data), Path(args.out)
    corpus = load_corpus(data)
    plan_ids = _split_plans(data, cfg["split"])
    inputs = [data]
    if cfg["init"]:
        head = _load_head(cfg["init"])
        inputs.append(Path(cfg["init"]))
        c = head.config
        config = RetrievalConfig(d_lm=c.d_lm, d_fv=c.d_fv, d=c.d, n_region=c.n_region,
                                 rope_base=c.rope_base, temperature=cfg["temperature"])
        head = RetrievalHead(head.w_start, head.w_end, head.w_ret, config)
        cfg.update(d=c.d, n_region=c.n_region, rope_base=c.rope_base)
    else:
        queries = cvmr_queries(data, corpus, plan_ids)
        if not queries:
            raise DataError(f"{data}: no CVMR turns in split {cfg['split']!r}")
        d_fv = _load_features(data, queries[0].plan_id).d_fv
        config = RetrievalConfig(d_lm=queries[0].tokens.h_rets.size, d_fv=d_fv, d=cfg["d"],
                                 n_region=cfg["n_region"], rope_base=cfg["rope_base"],
                                 temperature=cfg["temperature"])
        head = RetrievalHead.init(config, cfg["seed"])
    samples = training_samples(data, corpus, plan_ids, head, cfg["live_targets"])

    if cfg["schedule"]:
        schedule = TrainSchedule.load(cfg["schedule"])
        inputs.append(Path(cfg["schedule"]))
        phases = [(s.name, s.steps, _stage_batch(s, cfg["batch_size"])) for s in schedule.stages if s.trains_head]
        for s in schedule.stages:
            if not s.trains_head:
                log.warning("stage %r does not train the head; skipped", s.name)
    else:
        phases = [("train", cfg["steps"], cfg["batch_size"])]

    trace = []
    opt = OptState(learning_rate=cfg["lr"], weight_decay=cfg["weight_decay"])
    for i, (name, steps, batch) in enumerate(phases):
        if steps == 0:
            continue
        head, part = train_head(head, shuffled_batches(samples, batch), opt, steps, cfg["seed"] + i,
                                live_targets=cfg["live_targets"])
        offset = len(trace)
        trace.extend({**row, "step": row["step"] + offset} for row in part)

    out.mkdir(parents=True, exist_ok=True)
    formats.save_checkpoint(head, out / "head.ckpt")
    _write_text(out / "loss.csv", trace_csv(trace))
    report = {
        "task": "train",
        "n": len(samples),
        "metrics": {
            "steps": len(trace),
            "initial_loss": trace[0]["loss"] if trace else None,
            "final_loss": trace[-1]["loss"] if trace else None,
            "loss_ratio": trace[-1]["loss"] / trace[0]["loss"] if trace else None,
        },
        "config": _report_config(cfg),
    }
    write_json(out / "train_report.json", report)
    ratio = report["metrics"]["loss_ratio"]
    print(f"final/initial loss ratio: {ratio:.6g}" if ratio is not None else "no training steps run")
    return inputs, [out / "head.ckpt", out / "loss.csv", out / "train_report.json"]


def _report_config(cfg: dict) -> dict:
    return {k: v for k, v in sorted(cfg.items()) if k not in ("out", "config")}


def _recall_metrics(records, k: int) -> dict:
    metrics = {}
    for kk in sorted({1, k}):
        for m in (0.5, 0.7):
            metrics[f"R@{kk}_m{m}"] = recall_at_k(records, kk, m)
    return metrics


def _eval_cvmr(args, cfg, out: Path) -> tuple[list, list]:
    if args.data is None or args.checkpoint is None:
        raise UsageError("evaluate --task cvmr needs --data and --checkpoint")
    data = Path(args.data)
    head = _load_head(args.checkpoint)
    corpus = load_corpus(data)
    plan_ids = _split_plans(data, cfg["split"])
    records, mids = _profiles(data, corpus, plan_ids, head)
    method = _METHODS[cfg["method"]]
    k, tau = int(cfg["k"]), float(cfg["tau"])
    if method is Method.MIDFRAME_EXPAND:
        evaluated = [
            EvalRecord(r.dialogue_id, r.turn_index, r.ground_truth,
                extract(r.profile_start, r.profile_end, method, k=k, tau=tau, tau_b=cfg["tau_b"], profile_mid=pm))
            for r, pm in zip(records, mids)
        ]
    else:
        evaluated = evaluate_profiles(records, method, k, tau)
    report = {"task": "cvmr", "n": len(evaluated), "metrics": _recall_metrics(evaluated, k),
              "config": _report_config(cfg)}
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", report)
    _write_jsonl(out / "candidates.jsonl", (
        {"dialogue_id": r.dialogue_id, "turn_index": r.turn_index, "method": method.value, "k": k,
         "ground_truth": [r.ground_truth.start_frame, r.ground_truth.end_frame],
         "candidates": [{"start": c.start, "end": c.end, "score": c.score, "degenerate": c.degenerate} for c in r.candidates]}
        for r in evaluated
    ))
    _print_metrics(report)
    return [data, Path(args.checkpoint)], [out / "metrics.json", out / "candidates.jsonl"]


def _rows(path: Optional[Path], what: str) -> list[dict]:
    if path is None:
        raise UsageError(f"evaluate needs --{what}")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} file not found: {path}")
    return [rec for _, rec in read_jsonl(Path(path))]


def _eval_text(args, cfg, out: Path) -> tuple[list, list]:
    rows = _rows(args.predictions, "predictions")
    by_task: dict[str, list[dict]] = {}
    for i, row in enumerate(rows, start=1):
        for key in ("task", "generated", "reference"):
            if key not in row:
                raise DataError(f"{args.predictions}:{i}: missing {key!r}")
        by_task.setdefault(str(row["task"]), []).append(row)
    metrics = {}
    for task, group in sorted(by_task.items()):
        scores = np.array([rouge_l(r["generated"], r["reference"]) for r in group])
        metrics[f"{task}_rouge_l_p"] = float(scores[:, 0].mean())
        metrics[f"{task}_rouge_l_r"] = float(scores[:, 1].mean())
        metrics[f"{task}_rouge_l_f1"] = float(scores[:, 2].mean())
        metrics[f"{task}_exact_match"] = float(np.mean([exact_match(r["generated"], r["reference"]) for r in group]))
    report = {"task": "text", "n": len(rows), "metrics": metrics, "config": _report_config(cfg)}
    write_json(out / "metrics.json", report)
    _print_metrics(report)
    return [args.predictions], [out / "metrics.json"]


def _eval_judge(args, cfg, out: Path) -> tuple[list, list]:
    grouped = group_transcripts(_rows(args.judgements, "judgements"))
    if not grouped:
        raise DataError(f"{args.judgements}: no judge transcripts")
    counts = {"yes": 0, "no": 0, "unparseable": 0}
    for vs in grouped.values():
        for v in vs:
            counts[v.verdict.value] += 1
    report = {"task": "judge", "n": len(grouped),
              "metrics": {"majority_accuracy": majority_accuracy(list(grouped.values())),
                          **{f"verdicts_{k}": v for k, v in counts.items()}},
              "config": _report_config(cfg)}
    write_json(out / "metrics.json", report)
    _print_metrics(report)
    return [args.judgements], [out / "metrics.json"]


def _eval_dialogue(args, cfg, out: Path) -> tuple[list, list]:
    rows = _rows(args.judgements, "judgements")
    if not rows:
        raise DataError(f"{args.judgements}: no judge transcripts")
    scores = []
    for i, row in enumerate(rows, start=1):
        try:
            scores.append(parse_dialogue_scores(row["raw_text"]))
        except KeyError:
            raise DataError(f"{args.judgements}:{i}: missing 'raw_text'") from None
        except DataError as exc:
            raise DataError(f"{args.judgements}:{i}: {exc}") from None
    metrics = {name: float(np.mean([getattr(s, name) for s in scores]))
               for name in ("state_tracking", "instruction_clarity", "plan_adherence")}
    report = {"task": "dialogue", "n": len(scores), "metrics": metrics, "config": _report_config(cfg)}
    write_json(out / "metrics.json", report)
    _print_metrics(report)
    return [args.judgements], [out / "metrics.json"]


def cmd_evaluate(args, cfg) -> tuple[list, list]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg["k"] < 1:
        raise UsageError("--k must be at least 1")
    return {"cvmr": _eval_cvmr, "text": _eval_text, "judge": _eval_judge,
            "dialogue": _eval_dialogue}[cfg["task"]](args, cfg, out)


def _print_metrics(report: dict) -> None:
    print(f"{report['task']} (n={report['n']})")
    for key, value in report["metrics"].items():
        print(f"  {key}: {value:.4f}" if isinstance(value, float) else f"  {key}: {value}")


SWEEP_COLUMNS = ("tau", "recall_k1_m05", "recall_k1_m07", "recall_k5_m05", "recall_k5_m07")


def cmd_sweep(args, cfg) -> tuple[list, list]:
    data, out = Path(args.data), Path(args.out)
    grid = parse_grid(cfg["grid"]) if cfg["grid"] is not None else list(DEFAULT_GRID)
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise DataError("threshold grid must be strictly increasing")
    head = _load_head(args.checkpoint)
    corpus = load_corpus(data)
    records, _ = _profiles(data, corpus, _split_plans(data, cfg["split"]), head)
    rows = sweep_table(records, grid)
    out.mkdir(parents=True, exist_ok=True)
    lines = [",".join(SWEEP_COLUMNS)] + [",".join(repr(float(r[c])) for c in SWEEP_COLUMNS) for r in rows]
    _write_text(out / "sweep.csv", "\n".join(lines) + "\n")
    best = max(rows, key=lambda r: r["recall_k1_m05"])
    write_json(out / "sweep.json", {"task": "sweep", "n": len(records), "rows": rows,
                                    "best_tau": best["tau"], "config": _report_config(cfg)})
    print(f"{len(rows)} thresholds, best R@1 m=0.5 {best['recall_k1_m05']:.4f} at tau={best['tau']}")
    return [data, Path(args.checkpoint)], [out / "sweep.csv", out / "sweep.json"]


def cmd_lint(args, cfg) -> tuple[list, list]:
    corpus = load_corpus(args.corpus)
    problems = lint_corpus(corpus)
    for msg in problems:
        print(f"warning: {msg}")
    print(f"{len(corpus.plans)} plans, {len(corpus.all_dialogues())} dialogues, {len(problems)} warnings")
    outputs = []
    if args.out is not None:
        write_json(Path(args.out) / "lint.json", {"task": "lint", "n": len(problems), "warnings": problems,
                                                 "config": _report_config(cfg)})
        outputs.append(Path(args.out) / "lint.json")
    return [args.corpus], outputs


def cmd_inspect(args, cfg) -> tuple[list, list]:
    corpus = load_corpus(args.corpus)
    for d in corpus.all_dialogues():
        if d.dialogue_id == args.dialogue:
            break
    else:
        raise DataError(f"dialogue {args.dialogue!r} not found in {args.corpus}")
    plan = corpus.plan(d.plan_id)
    lines = [f"{plan.plan_id}: {plan.title} [{plan.domain_tag.value}]"]
    for a in plan.actions:
        lines.append(f"  {a.index:>2}. {a.text}  frames {a.moment.start_frame}-{a.moment.end_frame}")
    lines.append(f"dialogue {d.dialogue_id}")
    for i, t in enumerate(d.turns):
        img = f" image={t.image_ref}" if t.image_ref is not None else ""
        ctx = len(context_window(d, i).turns)
        lines.append(f"  [{i}] {t.turn_type.value:<4} step {t.current_action_index}{img} (context {ctx})")
        lines.append(f"      user:   {t.user_text}")
        lines.append(f"      system: {t.system_text}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out is not None:
        _write_text(Path(args.out) / f"{d.dialogue_id}.txt", text)
        return [args.corpus], [Path(args.out) / f"{d.dialogue_id}.txt"]
    return [args.corpus], []


COMMANDS = {
    "build": cmd_build, "train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
    "lint": cmd_lint, "inspect": cmd_inspect, "synth": cmd_synth,
}


def cmd_rerun(path: Path) -> int:
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest not found: {path}") from None
    recorded = manifest["outputs"]
    prev = os.getcwd()
    os.chdir(manifest["cwd"])
    try:
        code = main([manifest["command"], *manifest["argv"]])
        if code != EXIT_OK:
            return code
        now = _hash_paths(recorded)
    finally:
        os.chdir(prev)
    bad = sorted(p for p in recorded if now.get(p) != recorded[p])
    for p in bad:
        print(f"mismatch: {p}", file=sys.stderr)
    if bad:
        return EXIT_DATA
    print(f"rerun reproduced {len(recorded)} output files")
    return EXIT_OK


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parser().parse_args(argv)
        if args.command is None:
            raise UsageError("planvmr: a command is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "rerun":
            return cmd_rerun(args.manifest)
        cfg = _effective(args)
        started = time.perf_counter()
        inputs, outputs = COMMANDS[args.command](args, cfg)
        out = getattr(args, "out", None)
        if out is not None:
            _write_manifest(Path(out), args.command, argv[argv.index(args.command) + 1:], cfg,
                            inputs, outputs, started)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PlanVMRError, FileNotFoundError, KeyError, ValueError, GenerationError) as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
