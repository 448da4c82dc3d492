"""Command line front end: power sweeps, reports, reward audits, self-test.

Run directory layout (under the spec's `output_dir` or `--out`)::

    <spec-hash>/spec.yaml          spec bytes as given
    <spec-hash>/reward.txt         canonical reward used for training
    <spec-hash>/prompt.txt         LLM prompt (llm mode)
    <spec-hash>/response.txt       raw LLM reply (llm mode)
    <spec-hash>/record.json        RunRecord
    <spec-hash>/cells/p<dBm>_s<seed>/metrics.csv, checkpoint.pt

Report files written by `sweep-report`:

    curves.csv      method,p_max_dbm,n_seeds,rate_mean,rate_std,crb_mean,crb_std,
                    log10_crb_mean,log10_crb_std,return_mean,return_std
    comparison.csv  method_a,method_b,p_max_dbm,rate_improvement_pct,crb_improvement_pct
    summary.json    curves, comparisons and trend/ordering checks
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import torch

from isaclab import agent as sac
from isaclab import llm
from isaclab import reward as dsl
from isaclab.config import ConfigError, load_spec
from isaclab.core import make_env_factory
from isaclab.selftest import run_selftest

logger = logging.getLogger(__name__)

CURVES_HEADER = ("method", "p_max_dbm", "n_seeds", "rate_mean", "rate_std", "crb_mean",
                 "crb_std", "log10_crb_mean", "log10_crb_std", "return_mean", "return_std")
COMPARISON_HEADER = ("method_a", "method_b", "p_max_dbm", "rate_improvement_pct",
                     "crb_improvement_pct")

SOFT_RATE_MARGIN = 1.1


class SweepMismatchError(Exception):
    pass


def tool_version():
    try:
        return metadata.version("isaclab")
    except metadata.PackageNotFoundError:
        return "unknown"


def spec_hash(raw, seed_override=None):
    digest = hashlib.sha256(raw)
    if seed_override is not None:
        digest.update("\nseed-override={}".format(seed_override).encode())
    return digest.hexdigest()[:12]


@dataclass
class RunRecord:
    """Outcome of one `train` invocation; cells are ordered power-major."""
    spec_hash: str
    method: str
    agent_kind: str
    reward_mode: str
    reward_canonical: str
    sweep: List[float]
    seeds: List[int]
    cells: List[Dict[str, Any]]
    tool_version: str = ""
    timestamp: str = ""
    transcripts: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def write_record(record, path):
    Path(path).write_text(json.dumps(record.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_record(path):
    return RunRecord.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# train

@dataclass(frozen=True)
class CellTask:
    spec: Any
    p_max_dbm: float
    seed: int
    train_reward: dsl.RewardExpr
    eval_reward: dsl.RewardExpr
    cell_dir: str


def _cell_name(p_max_dbm, seed):
    return "p{}_s{}".format(dsl.format_number(p_max_dbm), seed)


def _init_worker():
    torch.set_num_threads(1)


def run_cell(task):
    """Train or evaluate one (power, seed) cell; failures are recorded."""
    spec = task.spec
    row = {"p_max_dbm": task.p_max_dbm, "seed": task.seed, "status": "ok",
           "final_mean_rate": None, "final_mean_crb": None, "mean_return": None,
           "n_updates": 0, "error": None}
    cell_dir = Path(task.cell_dir)
    try:
        cell_dir.mkdir(parents=True, exist_ok=True)
        system = dataclasses.replace(spec.system, p_max_dbm=task.p_max_dbm)
        if spec.agent_kind == "mlp_sac":
            system = dataclasses.replace(system, history_len=1)
        trainer = dataclasses.replace(spec.trainer, seed=task.seed)
        factory = make_env_factory(system, task.eval_reward)

        if spec.agent_kind in ("random", "mrt"):
            policy = sac.baseline_heuristics(spec.agent_kind, system, task.seed)
            result = sac.evaluate_policy(policy, factory, trainer.eval_episodes,
                                         sac.EVAL_SEED_OFFSET + task.seed, task.eval_reward)
            metrics = [{"env_step": 0, "mean_return": result.mean_return,
                        "mean_rate": result.mean_rate, "mean_crb": result.mean_crb}]
        else:
            torch.manual_seed(task.seed)
            if spec.agent_kind == "mlp_sac":
                trained = sac.baseline_mlp_sac(factory, task.train_reward, trainer,
                                               eval_reward=task.eval_reward)
            else:
                trained = sac.train(factory, task.train_reward, trainer,
                                    eval_reward=task.eval_reward)
            metrics = trained.metrics
            row["n_updates"] = trained.n_updates
            state = trained.best_state or trained.agent.state()
            sac.save_checkpoint(cell_dir / "checkpoint.pt", state,
                                reward_text=task.train_reward.canonical(),
                                extra={"p_max_dbm": task.p_max_dbm, "seed": task.seed,
                                       "optimizer": "Adam"})
        sac.write_metrics_csv(metrics, cell_dir / "metrics.csv")
        final = metrics[-1]
        row.update(final_mean_rate=final["mean_rate"], final_mean_crb=final["mean_crb"],
                   mean_return=final["mean_return"])
    except Exception as e:
        logger.exception("cell %s failed", _cell_name(task.p_max_dbm, task.seed))
        row.update(status="failed", error="{}: {}".format(type(e).__name__, e))
    return row


def _select_reward(spec, offline, client, run_dir):
    notes = []
    try:
        provenance = llm.design_reward(spec.system, spec.reward_mode,
                                       shaping=spec.reward_shaping, endpoint=spec.llm,
                                       offline=offline, client=client)
    except llm.LlmError as e:
        if isinstance(e, llm.ExtractionError):
            llm.write_exchange(e.bundle, e.response, run_dir)
        if spec.reward_mode != "llm" or not spec.llm.fallback_on_error:
            raise
        logger.warning("LLM reward design failed (%s); using the normalized fallback", e)
        notes.append("llm failed ({}); fell back to normalized reward".format(e))
        provenance = llm.design_reward(spec.system, "fallback", shaping=spec.reward_shaping)
        provenance.notes.extend(notes)
    return provenance, notes


def cmd_train(spec_path, out=None, seed_override=None, offline=False, workers=1, client=None):
    """Run every (power, seed) cell of a spec; returns the RunRecord."""
    spec, raw = load_spec(spec_path)
    if seed_override is not None:
        spec = dataclasses.replace(spec, seeds=(int(seed_override),))
    digest = spec_hash(raw, seed_override)
    run_dir = Path(out if out is not None else spec.output_dir) / digest
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "spec.yaml").write_bytes(raw)
    logger.info("run %s (%s) in %s", digest, spec.method, run_dir)

    provenance, notes = _select_reward(spec, offline, client, run_dir)
    llm.write_transcript(provenance, run_dir)
    transcripts = sorted(p.name for p in run_dir.glob("*.txt"))
    # returns are compared across methods, so all cells score on one reward
    eval_reward = dsl.builtin_normalized_reward(spec.reward_shaping)

    tasks = [CellTask(spec=spec, p_max_dbm=p, seed=s, train_reward=provenance.expr,
                      eval_reward=eval_reward,
                      cell_dir=str(run_dir / "cells" / _cell_name(p, s)))
             for p in spec.sweep for s in spec.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as pool:
            cells = list(pool.map(run_cell, tasks))
    else:
        cells = [run_cell(t) for t in tasks]

    failed = sum(c["status"] != "ok" for c in cells)
    if failed:
        logger.warning("%d of %d cells failed", failed, len(cells))
    record = RunRecord(spec_hash=digest, method=spec.method, agent_kind=spec.agent_kind,
                       reward_mode=spec.reward_mode, reward_canonical=provenance.canonical,
                       sweep=list(spec.sweep), seeds=list(spec.seeds), cells=cells,
                       tool_version=tool_version(),
                       timestamp=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                       transcripts=transcripts, notes=notes)
    write_record(record, run_dir / "record.json")
    return record


# sweep-report

def _mean_std(values):
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return math.nan, math.nan
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return float(np.mean(values)), std


def method_curves(record):
    """Mean and sample std over successful seeds, per sweep power."""
    rows = []
    for p in record.sweep:
        ok = [c for c in record.cells if c["p_max_dbm"] == p and c["status"] == "ok"]
        rate = _mean_std([c["final_mean_rate"] for c in ok])
        crb = _mean_std([c["final_mean_crb"] for c in ok])
        log_crb = _mean_std([math.log10(c["final_mean_crb"]) for c in ok])
        ret = _mean_std([c["mean_return"] for c in ok])
        rows.append({"method": record.method, "p_max_dbm": p, "n_seeds": len(ok),
                     "rate_mean": rate[0], "rate_std": rate[1],
                     "crb_mean": crb[0], "crb_std": crb[1],
                     "log10_crb_mean": log_crb[0], "log10_crb_std": log_crb[1],
                     "return_mean": ret[0], "return_std": ret[1]})
    return rows


def _percent(delta, base):
    if base == 0 or not math.isfinite(base):
        return None
    return delta / base * 100.0


def rate_improvement(a, b):
    """Percent rate gain of a over b; None when b has no rate to compare to."""
    return _percent(a - b, b)


def crb_improvement(a, b):
    return _percent(b - a, b)


def _strictly(values, increasing):
    pairs = list(zip(values, values[1:]))
    if increasing:
        return all(y > x for x, y in pairs)
    return all(y < x for x, y in pairs)


def _find(records, agent_kind, modes=None):
    for r in records:
        if r.agent_kind == agent_kind and (modes is None or r.reward_mode in modes):
            return r
    return None


def ordering_checks(records, curves):
    """Method-ordering flags at the middle sweep power."""
    by_method = {r.method: {row["p_max_dbm"]: row for row in curves[r.method]}
                 for r in records}
    sweep = records[0].sweep
    mid = sweep[len(sweep) // 2]

    def at(record, key):
        return by_method[record.method][mid][key]

    checks = []
    agentic = _find(records, "agentic", ("fallback", "llm")) or _find(records, "agentic")
    random_ = _find(records, "random")
    mrt = _find(records, "mrt")
    mlp = _find(records, "mlp_sac")
    manual = _find(records, "agentic", ("manual",))
    if agentic and random_:
        checks.append({"name": "agentic > random rate", "kind": "hard",
                       "passed": at(agentic, "rate_mean") > at(random_, "rate_mean")})
    if mrt and random_:
        checks.append({"name": "mrt > random rate", "kind": "hard",
                       "passed": at(mrt, "rate_mean") > at(random_, "rate_mean")})
    if agentic and mlp:
        checks.append({"name": "agentic >= mlp_sac rate", "kind": "soft",
                       "passed": at(agentic, "rate_mean") >= at(mlp, "rate_mean")})
        checks.append({"name": "agentic >= 1.1 mlp_sac rate", "kind": "soft",
                       "passed": at(agentic, "rate_mean")
                       >= SOFT_RATE_MARGIN * at(mlp, "rate_mean")})
    if mlp and random_:
        checks.append({"name": "mlp_sac >= random rate", "kind": "soft",
                       "passed": at(mlp, "rate_mean") >= at(random_, "rate_mean")})
    if agentic and manual and agentic is not manual:
        checks.append({"name": "designed >= manual return", "kind": "soft",
                       "passed": at(agentic, "return_mean") >= at(manual, "return_mean")})
    for c in checks:
        c["p_max_dbm"] = mid
    return checks


def cmd_sweep_report(record_paths, out=None):
    """Aggregate run records into curves, comparisons and check flags."""
    assert record_paths, "need at least one run record"
    records = [read_record(p) for p in record_paths]
    sweep = records[0].sweep
    for path, r in zip(record_paths, records):
        if r.sweep != sweep:
            raise SweepMismatchError("{} sweeps {} but {} sweeps {}".format(
                path, r.sweep, record_paths[0], sweep))
    names = [r.method for r in records]
    if len(set(names)) != len(names):
        raise SweepMismatchError("duplicate method labels: {}".format(names))

    out_dir = Path(out) if out is not None else Path(record_paths[0]).parent.parent / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    curves = {r.method: method_curves(r) for r in records}
    comparisons = []
    for a in records:
        for b in records:
            if a is b:
                continue
            for ra, rb in zip(curves[a.method], curves[b.method]):
                comparisons.append({
                    "method_a": a.method, "method_b": b.method, "p_max_dbm": ra["p_max_dbm"],
                    "rate_improvement_pct": rate_improvement(ra["rate_mean"], rb["rate_mean"]),
                    "crb_improvement_pct": crb_improvement(ra["crb_mean"], rb["crb_mean"]),
                })

    trends = []
    for r in records:
        rates = [row["rate_mean"] for row in curves[r.method]]
        crbs = [row["crb_mean"] for row in curves[r.method]]
        trends.append({"method": r.method,
                       "rate_increasing": _strictly(rates, True),
                       "crb_decreasing": _strictly(crbs, False)})
    checks = ordering_checks(records, curves)
    for c in comparisons:
        if c["rate_improvement_pct"] is None or c["crb_improvement_pct"] is None:
            logger.warning("%s vs %s at %s dBm: baseline is zero, no percentage",
                           c["method_a"], c["method_b"], c["p_max_dbm"])

    with (out_dir / "curves.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CURVES_HEADER)
        writer.writeheader()
        for r in records:
            writer.writerows(curves[r.method])
    if comparisons:
        with (out_dir / "comparison.csv").open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=COMPARISON_HEADER)
            writer.writeheader()
            writer.writerows(comparisons)

    summary = {"sweep": sweep, "methods": names, "curves": curves,
               "comparisons": comparisons, "trends": trends, "checks": checks}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n",
                                          encoding="utf-8")
    for t in trends:
        if not (t["rate_increasing"] and t["crb_decreasing"]):
            logger.warning("%s does not follow the power trend", t["method"])
    for c in checks:
        if not c["passed"]:
            log = logger.error if c["kind"] == "hard" else logger.warning
            log("ordering check failed: %s", c["name"])
    return summary


# reward-audit

def cmd_reward_audit(spec_path, offline=False, client=None):
    """Human-readable account of how the spec's reward is obtained."""
    spec, _ = load_spec(spec_path)
    lines = ["reward mode: {}".format(spec.reward_mode), ""]
    if spec.reward_mode == "llm":
        provenance = llm.design_reward(spec.system, "llm", shaping=spec.reward_shaping,
                                       endpoint=spec.llm, offline=offline, client=client)
        bundle = provenance.bundle
    else:
        provenance = llm.design_reward(spec.system, spec.reward_mode,
                                       shaping=spec.reward_shaping)
        bundle = llm.build_prompt(spec.system, llm.DEFAULT_OBJECTIVE,
                                  llm.default_store(), spec.llm.top_k)

    lines.append("retrieved snippets:")
    for s in bundle.retrieved_snippets:
        lines.append("  {} (score {:.4f})".format(s.doc_id, s.score))
    lines += ["", "prompt:", bundle.full_prompt, ""]
    if provenance.response is not None:
        lines += ["raw response:", provenance.response.raw_text, ""]
    elif spec.reward_mode == "fallback":
        lines += ["no LLM call: built-in normalized reward", ""]
    elif spec.reward_mode == "manual":
        lines += ["no LLM call: built-in manual reward", ""]
    else:
        lines += ["no LLM call: reward file contents:", provenance.file_text, ""]

    try:
        dsl.validate(provenance.expr)
        verdict = "valid"
    except dsl.ParseError as e:
        verdict = "invalid: {}".format(e)
    lines += ["canonical: {}".format(provenance.canonical),
              "features: {}".format(", ".join(sorted(provenance.expr.features()))),
              "validation: {}".format(verdict)]
    return "\n".join(lines) + "\n"


# selftest

def cmd_selftest():
    results = run_selftest()
    ok = all(r.passed for r in results)
    return ok, results


def main(argv=None):
    parser = argparse.ArgumentParser(prog="isaclab",
                                     description="Agentic ISAC beamforming laboratory")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a power sweep for one method")
    p.add_argument("--spec", required=True, type=Path)
    p.add_argument("--out", type=Path, help="overrides the spec's output_dir")
    p.add_argument("--seed-override", type=int)
    p.add_argument("--offline", action="store_true", help="forbid network access")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("sweep-report", help="compare run records")
    p.add_argument("records", nargs="+", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("reward-audit", help="show how the reward is designed")
    p.add_argument("--spec", required=True, type=Path)
    p.add_argument("--offline", action="store_true")

    sub.add_parser("selftest", help="run the numerical self-checks")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)

    try:
        if args.command == "train":
            record = cmd_train(args.spec, args.out, args.seed_override, args.offline,
                               args.workers)
            return 0 if all(c["status"] == "ok" for c in record.cells) else 1
        if args.command == "sweep-report":
            summary = cmd_sweep_report(args.records, args.out)
            hard_failed = any(c["kind"] == "hard" and not c["passed"]
                              for c in summary["checks"])
            return 1 if hard_failed else 0
        if args.command == "reward-audit":
            sys.stdout.write(cmd_reward_audit(args.spec, args.offline))
            return 0
        ok, results = cmd_selftest()
        for r in results:
            print("{:<20} {:<4} {:7.2f}s  {}".format(r.name, "ok" if r.passed else "FAIL",
                                                     r.seconds, r.detail))
        return 0 if ok else 1
    except (ConfigError, SweepMismatchError, llm.LlmError, dsl.ParseError) as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
