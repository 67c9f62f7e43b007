"""Command-line entry points: campaigns, reports, replay.

    microfuzz --database out.json --local afl -t 0.5
    microfuzz --database out.json --instrumentor http://host:8000 \\
              --agent host:4444 genetic
    microfuzz --database spec.json spec
    microfuzz report a.json b.json --csv matrices.csv
    microfuzz --database out.json replay 0

Exit codes: 0 success, 1 usage or reproduction failure, 2 services
unreachable, 3 database schema mismatch.  ``UFUZZ_SEED`` overrides the
configured campaign seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

from . import corpus as corpus_mod
from . import oracle
from .agent import fault_model_from_dict
from .controller import (
    AgentClient,
    CampaignConfig,
    CampaignDatabase,
    CampaignPaused,
    Controller,
    SchemaMismatch,
    WatchdogClient,
    WatchdogUnreachable,
    validate_schema,
)
from .engine import Engine, FaultModel
from .oracle import TraceAlignmentLost, evaluate_pair, trace_divergence
from .report import compute_matrices, render_csv, render_text
from .rom import shared_rom
from .serializer import SerializeError, serialize
from .vm import run_testcase

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_UNREACHABLE = 2
EXIT_SCHEMA = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microfuzz",
        description="microcode-coverage-guided CPU fuzzing on a deterministic simulator",
    )
    parser.add_argument("--database", default="campaign.json", help="campaign store")
    parser.add_argument("--instrumentor", help="watchdog REST base URL")
    parser.add_argument("--agent", help="agent address as host:port")
    parser.add_argument("--local", action="store_true",
                        help="spawn a watchdog and agent locally")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--fault-model", help="JSON fault-rule file for local services")

    sub = parser.add_subparsers(dest="command", required=True)

    for mode in ("afl", "genetic"):
        cmd = sub.add_parser(mode, help=f"{mode}-style fuzzing campaign")
        cmd.add_argument("-s", "--solutions", help="directory for finding testcases")
        cmd.add_argument("-c", "--corpus", help="directory to export the final corpus")
        cmd.add_argument("-a", "--afl-corpus", help="directory of raw seeds to import")
        cmd.add_argument("-t", "--timeout-hours", type=float, default=None)
        cmd.add_argument("-d", "--disable-feedback", action="store_true")
        cmd.add_argument("-p", "--printable-input-generation", action="store_true")
        cmd.add_argument("-i", "--iterations", type=int, default=200)
        cmd.add_argument("--corpus-kind", choices=["random", "valid"], default="random")

    spec = sub.add_parser("spec", help="speculative-window micro-op sweep")
    spec.add_argument("--trials", type=int, default=16)
    spec.add_argument("--catalog", help="candidate catalog file")

    rep = sub.add_parser("report", help="coverage matrices across databases")
    rep.add_argument("databases", nargs="+")
    rep.add_argument("--csv", help="write machine-readable matrices here")

    replay = sub.add_parser("replay", help="re-derive a stored finding locally")
    replay.add_argument("finding_id", type=int)
    return parser


# ---------------------------------------------------------------------------
# Local service stack
# ---------------------------------------------------------------------------

class LocalStack:
    """A watchdog-supervised agent on loopback, for --local runs."""

    def __init__(self, seed: int, fault: FaultModel) -> None:
        import socket
        import threading

        from .agent import fault_model_to_dict
        from .watchdog import TargetHandle, serve

        probe = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        probe.bind(("127.0.0.1", 0))
        agent_port = probe.getsockname()[1]
        probe.close()

        self._fault_file = tempfile.NamedTemporaryFile(
            "w", suffix=".json", delete=False)
        json.dump(fault_model_to_dict(fault), self._fault_file)
        self._fault_file.close()

        handle = TargetHandle(
            argv=[sys.executable, "-m", "microfuzz.agent",
                  "--port", str(agent_port), "--seed", str(seed),
                  "--fault-model", self._fault_file.name],
            agent_addr=("127.0.0.1", agent_port),
        )
        self.server, self.watchdog = serve(("127.0.0.1", 0), handle)
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()
        self.watchdog.reset_target()
        self.agent_addr = ("127.0.0.1", agent_port)
        self.url = "http://127.0.0.1:%d" % self.server.server_address[1]

    def close(self) -> None:
        self.watchdog.shutdown()
        self.server.shutdown()
        self.server.server_close()
        os.unlink(self._fault_file.name)


def _parse_agent(text: str) -> tuple[str, int]:
    host, port = text.rsplit(":", 1)
    return host, int(port)


def _load_fault(path: str | None) -> FaultModel:
    if not path:
        return FaultModel.correct()
    with open(path, encoding="utf-8") as handle:
        return fault_model_from_dict(json.load(handle))


def _import_seeds(directory: str) -> list[bytes]:
    seeds = []
    for name in sorted(os.listdir(directory)):
        with open(os.path.join(directory, name), "rb") as handle:
            seeds.append(handle.read()[:corpus_mod.DEFAULT_MAX_SIZE])
    return seeds


def _export_corpus(db: CampaignDatabase, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    for entry in db.data["seeds"]:
        path = os.path.join(directory, f"{entry['id']:08x}")
        with open(path, "wb") as handle:
            handle.write(bytes.fromhex(entry["data"]))


def _export_solutions(db: CampaignDatabase, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    for finding in db.data["findings"]:
        path = os.path.join(directory, f"{finding['id']:08x}")
        with open(path, "wb") as handle:
            handle.write(bytes.fromhex(finding["testcase"]))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_fuzz(args) -> int:
    seed = int(os.environ.get("UFUZZ_SEED", args.seed))
    fault = _load_fault(args.fault_model)
    config = CampaignConfig(
        seed=seed,
        mode=corpus_mod.MODE_HAVOC if args.command == "afl" else corpus_mod.MODE_GENETIC,
        iterations=args.iterations,
        timeout_hours=args.timeout_hours,
        feedback=not args.disable_feedback,
        corpus_kind=args.corpus_kind,
        printable=args.printable_input_generation,
        fault=fault,
        name=os.path.splitext(os.path.basename(args.database))[0],
    )
    if args.afl_corpus:
        config.initial_seeds = _import_seeds(args.afl_corpus)

    stack = None
    try:
        if args.local:
            stack = LocalStack(seed, fault)
            agent_addr, watchdog_url = stack.agent_addr, stack.url
        else:
            if not args.agent:
                print("error: --agent (or --local) is required", file=sys.stderr)
                return EXIT_USAGE
            agent_addr = _parse_agent(args.agent)
            watchdog_url = args.instrumentor
        agent = AgentClient(agent_addr)
        watchdog = WatchdogClient(watchdog_url) if watchdog_url else None
        if watchdog is not None:
            try:
                watchdog.status()
            except WatchdogUnreachable as err:
                print(f"error: watchdog unreachable: {err}", file=sys.stderr)
                return EXIT_UNREACHABLE
        if not agent.ping(timeout=1.0):
            print("error: agent unreachable", file=sys.stderr)
            return EXIT_UNREACHABLE
        controller = Controller(config, agent, watchdog, db_path=args.database)
        try:
            db = controller.run_campaign()
        except CampaignPaused as err:
            print(f"campaign paused: {err}", file=sys.stderr)
            return EXIT_UNREACHABLE
        if args.corpus:
            _export_corpus(db, args.corpus)
        if args.solutions:
            _export_solutions(db, args.solutions)
        print(f"{len(db.data['seeds'])} seeds, {len(db.data['findings'])} findings, "
              f"{len(db.data['coverage'])} covered addresses -> {args.database}")
        return EXIT_OK
    finally:
        if stack is not None:
            stack.close()


def cmd_spec(args) -> int:
    from . import specfuzz

    seed = int(os.environ.get("UFUZZ_SEED", args.seed))
    if args.catalog:
        with open(args.catalog, encoding="utf-8") as handle:
            rows = specfuzz.parse_catalog(handle.read())
    else:
        rows = specfuzz.load_bundled_catalog()
    fault = specfuzz.catalog_fault_model(rows)
    engine = Engine(shared_rom().copy(), fault=fault, rng_seed=seed)
    results = specfuzz.sweep_catalog(engine, [row.word for row in rows],
                                     trials=args.trials)

    config = CampaignConfig(seed=seed, iterations=0, name="spec")
    db = CampaignDatabase(args.database, config=config)
    for row, result in zip(rows, results):
        kind = oracle.LOCKUP if result.locked else oracle.SPEC_PERSISTENCE
        db.add_finding({
            "kind": kind,
            "testcase": f"{row.word.raw:012x}",
            "iteration": None,
            "divergent_index": None,
            "details": f"{row.disasm}: class {result.lockup}, "
                       f"rate {result.lockup_rate:.3f}, "
                       f"{len(result.persisted)} persisted effects",
            "expected_class": row.lockup,
            "observed_class": result.lockup,
        })
    db.add_event("spec-sweep", f"{len(rows)} candidates, {args.trials} trials each")
    db.save()
    print(specfuzz.render_results(results), end="")
    mismatches = [r for row, r in zip(rows, results) if r.lockup != row.lockup]
    print(f"{len(rows)} candidates swept, {len(mismatches)} class mismatches "
          f"-> {args.database}")
    return EXIT_OK


def cmd_report(args) -> int:
    coverage_sets: dict[str, set[int]] = {}
    for path in args.databases:
        try:
            db = CampaignDatabase.load(path)
        except FileNotFoundError:
            print(f"error: {path}: no such database", file=sys.stderr)
            return EXIT_SCHEMA
        except SchemaMismatch as err:
            print(f"error: {err}", file=sys.stderr)
            return EXIT_SCHEMA
        name = db.data["config"].get("name") or os.path.splitext(os.path.basename(path))[0]
        coverage_sets[name] = db.coverage_addresses()
    matrices = compute_matrices(coverage_sets)
    print(render_text(matrices), end="")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as handle:
            handle.write(render_csv(matrices))
    return EXIT_OK


def cmd_replay(args) -> int:
    from .controller import SLOTS_PER_ITERATION
    from .protocol import rng_supply_for
    from .vm import VmConfig, trace_run

    try:
        db = CampaignDatabase.load(args.database)
    except (FileNotFoundError, SchemaMismatch) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    findings = {f["id"]: f for f in db.data["findings"]}
    if args.finding_id not in findings:
        print(f"error: no finding {args.finding_id}", file=sys.stderr)
        return EXIT_USAGE
    finding = findings[args.finding_id]
    config = CampaignConfig.from_snapshot(db.data["config"])
    code = bytes.fromhex(finding["testcase"])

    if finding["kind"] not in (oracle.ARCH_DIVERGENCE, oracle.LOCKUP):
        print(f"finding {args.finding_id} ({finding['kind']}) has no replay procedure")
        return EXIT_USAGE

    base_id = (finding["iteration"] or 0) * SLOTS_PER_ITERATION
    try:
        program = serialize(code)
    except SerializeError as err:
        print(f"not reproducible: serialization failed ({err})", file=sys.stderr)
        return EXIT_USAGE

    def local(run_code: bytes, slot: int):
        supply = rng_supply_for(config.seed, base_id + slot)
        return run_testcase(VmConfig(code=run_code, rng_supply=supply),
                            fault=config.fault, trial_id=base_id + slot)

    p_res, q_res = local(code, 0), local(program.code, 1)
    verdict = evaluate_pair(p_res, q_res, program)

    if finding["kind"] == oracle.LOCKUP:
        if verdict.status == "lockup":
            print(f"finding {args.finding_id} reproduced: {verdict.reason}")
            return EXIT_OK
        print(f"not reproducible: pair verdict {verdict.status}", file=sys.stderr)
        return EXIT_USAGE

    if verdict.status != "divergent":
        print(f"not reproducible: pair verdict {verdict.status} "
              f"(fault model drift?)", file=sys.stderr)
        return EXIT_USAGE
    p_trace = trace_run(VmConfig(code=code, rng_supply=rng_supply_for(config.seed, base_id)),
                        fault=config.fault, trial_id=base_id)
    q_trace = trace_run(VmConfig(code=program.code,
                                 rng_supply=rng_supply_for(config.seed, base_id)),
                        fault=config.fault, trial_id=base_id + 1)
    try:
        index = trace_divergence(p_trace, q_trace, code, program)
    except TraceAlignmentLost as err:
        print(f"not reproducible: {err}", file=sys.stderr)
        return EXIT_USAGE
    stored = finding.get("divergent_index")
    if index != stored:
        print(f"not reproducible: divergence at {index}, stored {stored}",
              file=sys.stderr)
        return EXIT_USAGE
    print(f"finding {args.finding_id} reproduced: divergence at instruction {index}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else EXIT_OK
    if args.command in ("afl", "genetic"):
        return cmd_fuzz(args)
    if args.command == "spec":
        return cmd_spec(args)
    if args.command == "report":
        return cmd_report(args)
    if args.command == "replay":
        return cmd_replay(args)
    return EXIT_USAGE  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
