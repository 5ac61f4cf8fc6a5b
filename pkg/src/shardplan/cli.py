"""Command-line entry point: ``shardplan <command> ...``.

Exit codes: 0 success, 2 infeasible placement, 3 bad input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .errors import BadInput, Infeasible, ShardplanError
from .harness import RunConfig, benchmark, infer, report_json, report_text, sample_tasks, train
from .oracle import CostBreakdown, CostOracle, OracleConfig, PlacementTask
from .tablegen import LookupBatch, PoolSpec, TablePool, ingest_lookup_batch, synth_pool
from .trace import emit_trace

EXIT_OK, EXIT_INFEASIBLE, EXIT_BAD_INPUT = 0, 2, 3


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise BadInput(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise BadInput(f"{path}: not JSON ({e})") from e


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _int_list(s: str, n: int | None = None) -> list[int]:
    try:
        vals = [int(x) for x in s.split(",") if x.strip()]
    except ValueError as e:
        raise BadInput(f"expected comma-separated integers, got {s!r}") from e
    if n is not None and len(vals) == 1:
        vals = vals * n
    return vals


def _oracle(path) -> CostOracle:
    return CostOracle(OracleConfig.from_dict(_read_json(path)) if path else OracleConfig())


def cmd_gen_pool(a) -> int:
    spec = PoolSpec.from_dict(_read_json(a.spec)) if a.spec else PoolSpec()
    _write(a.output, synth_pool(spec, a.seed).to_json())
    return EXIT_OK


def cmd_ingest(a) -> int:
    batch = LookupBatch.load(a.batch)
    dims = _int_list(a.dims, batch.num_tables)
    hashes = _int_list(a.hash_sizes, batch.num_tables)
    _write(a.output, ingest_lookup_batch(batch, dims, hashes).to_json())
    return EXIT_OK


def cmd_sample_tasks(a) -> int:
    pool = TablePool.load(a.pool)
    tasks = sample_tasks(pool, a.num_tables, a.count, a.devices, a.mem_cap, a.seed)
    if a.count == 1:
        _write(a.output, json.dumps(tasks[0].to_dict(), sort_keys=True))
    else:
        _write(a.output, json.dumps([t.to_dict() for t in tasks], sort_keys=True))
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = RunConfig.load(a.config)
    log = None
    fh = open(a.metrics, "w") if a.metrics else None
    try:
        if fh is not None:
            log = lambda rec: (fh.write(json.dumps(rec, sort_keys=True) + "\n"), fh.flush())  # noqa: E731
        res = train(cfg, log=log)
    finally:
        if fh is not None:
            fh.close()
    res.checkpoint.save(a.output)
    return EXIT_OK


def cmd_place(a) -> int:
    ck = Checkpoint.load(a.model)
    task = PlacementTask.from_dict(_read_json(a.task))
    oracle = _oracle(a.oracle) if a.evaluate else None
    res = infer(ck, task, oracle=oracle, evaluate=a.evaluate)
    _write(a.output, json.dumps(res.to_dict(), sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_eval(a) -> int:
    task = PlacementTask.from_dict(_read_json(a.task))
    p = _read_json(a.placement)
    placement = p["placement"] if isinstance(p, dict) else p
    if not isinstance(placement, list) or len(placement) != task.num_tables:
        raise BadInput("placement must list one device per table")
    if any((not isinstance(d, int)) or d < 0 or d >= task.num_devices for d in placement):
        raise BadInput("placement has device ids out of range")
    b = _oracle(a.oracle).evaluate_placement(task, np.asarray(placement, dtype=np.int64))
    _write(a.output, json.dumps(b.to_dict(), sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_bench(a) -> int:
    cfg = RunConfig.load(a.config)
    ck = Checkpoint.load(a.model) if a.model else None
    report = benchmark(cfg, a.strategies, ck=ck)
    _write(a.output, report_json(report))
    if a.text:
        _write(a.text, report_text(report))
    elif a.output not in (None, "-"):
        sys.stdout.write(report_text(report))
    return EXIT_OK


def cmd_trace(a) -> int:
    b = CostBreakdown.from_dict(_read_json(a.breakdown))
    _write(a.output, emit_trace(b, "svg" if a.svg else "json"))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage errors are bad input, not argparse's default exit status 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_BAD_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shardplan", description="Learned embedding-table placement.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-pool", help="synthesize a table pool")
    s.add_argument("--spec", help="pool spec JSON (defaults used when omitted)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(fn=cmd_gen_pool)

    s = sub.add_parser("ingest", help="build a pool from a binary lookup batch")
    s.add_argument("--batch", required=True)
    s.add_argument("--dims", required=True, help="comma-separated, or one value for all tables")
    s.add_argument("--hash-sizes", required=True, help="comma-separated, or one value for all tables")
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("sample-tasks", help="draw placement tasks from a pool")
    s.add_argument("--pool", required=True)
    s.add_argument("--num-tables", type=int, required=True)
    s.add_argument("--devices", type=int, required=True)
    s.add_argument("--mem-cap", type=float, default=16.0, help="GB per device")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(fn=cmd_sample_tasks)

    s = sub.add_parser("train", help="train cost and policy networks")
    s.add_argument("--config", required=True)
    s.add_argument("--metrics", help="write per-iteration JSON lines here")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("place", help="place one task with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--evaluate", action="store_true", help="also measure the placement with the oracle")
    s.add_argument("--oracle", help="oracle config JSON")
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(fn=cmd_place)

    s = sub.add_parser("eval", help="oracle cost breakdown of a placement")
    s.add_argument("--task", required=True)
    s.add_argument("--placement", required=True)
    s.add_argument("--oracle", help="oracle config JSON")
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench", help="compare strategies on train and test tasks")
    s.add_argument("--config", required=True)
    s.add_argument("--strategies", default="all", help="comma-separated names or 'all'")
    s.add_argument("--model", help="checkpoint for dreamshard (trained from the config if omitted)")
    s.add_argument("--text", help="also write the aligned text table here")
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("trace", help="render a breakdown as a JSON trace or SVG timeline")
    s.add_argument("--breakdown", required=True)
    s.add_argument("--svg", action="store_true")
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(fn=cmd_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Infeasible as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ShardplanError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
