"""Fuzzer controller: campaign orchestration and triage.

The controller owns all campaign state — corpus, coverage, findings,
event log — and drives one agent at a time over the datagram protocol:
mutate a seed, build its serialized twin, dispatch both, compare the
final states, collect microcode coverage through scheduled
instrumentation rounds, and persist everything after every iteration so
an agent crash can never lose work.  When the agent stops answering,
the controller pings it, escalates to the watchdog for a power cycle,
and re-dispatches the in-flight task.

Task ids encode the iteration: ``iteration * 64 + slot`` with slot 0 the
plain run, slot 1 the serialized twin and slots 2+ the coverage rounds;
the agent keys its deterministic random supply on ``id >> 6`` so every
dispatch of an iteration draws the same hardware-random stream.
"""

from __future__ import annotations

import json
import logging
import os
import random
import socket
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from fractions import Fraction

from . import corpus as corpus_mod
from . import oracle, protocol
from .agent import fault_model_from_dict, fault_model_to_dict
from .engine import ArchState, FaultModel
from .instrument import CoverageReport
from .protocol import (
    ITERATION_SHIFT,
    MSG_HELLO,
    MSG_PING,
    MSG_PONG,
    MSG_RESULT,
    VARIANT_PLAIN,
    VARIANT_SERIALIZED,
    EXIT_NAMES,
    MalformedReply,
    ResultMessage,
    TaskMessage,
    decode_frame,
    encode_frame,
)
from .rom import shared_rom
from .scheduler import CoverageEpisode, default_entries, extract_basic_blocks, \
    plan_initial_rounds
from .serializer import CapacityExceeded, SerializeError, serialize
from .vm import ExitReason, RunResult, VmConfig, trace_run

log = logging.getLogger("microfuzz.controller")

SLOTS_PER_ITERATION = 1 << ITERATION_SHIFT
PING_INTERVAL = 0.5
PING_MISS_LIMIT = 3

DB_SCHEMA_KEYS = ("config", "seeds", "coverage", "findings", "events")


class AgentUnreachable(Exception):
    pass


class WatchdogUnreachable(Exception):
    pass


class CampaignPaused(Exception):
    """Recovery failed; durable state is intact and the campaign can resume."""


class SchemaMismatch(Exception):
    pass


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------

class AgentClient:
    def __init__(self, addr: tuple[str, int], timeout: float = 2.0) -> None:
        self.addr = addr
        self.timeout = timeout
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.settimeout(timeout)

    def close(self) -> None:
        self.sock.close()

    def _roundtrip(self, frame: bytes, timeout: float) -> tuple[int, bytes]:
        self.sock.settimeout(timeout)
        self.sock.sendto(frame, self.addr)
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise socket.timeout()
            self.sock.settimeout(remaining)
            datagram, peer = self.sock.recvfrom(protocol.MAX_FRAME)
            if peer[1] != self.addr[1]:
                continue  # stray datagram
            return decode_frame(datagram)

    def ping(self, timeout: float = 0.5) -> bool:
        try:
            msg_type, _ = self._roundtrip(encode_frame(MSG_PING), timeout)
            return msg_type == MSG_PONG
        except (socket.timeout, OSError, protocol.ProtocolError):
            return False

    def hello(self, timeout: float = 1.0) -> str | None:
        try:
            msg_type, payload = self._roundtrip(encode_frame(MSG_HELLO), timeout)
            return payload.decode(errors="replace") if msg_type == MSG_HELLO else None
        except (socket.timeout, OSError, protocol.ProtocolError):
            return None

    def dispatch(self, task: TaskMessage, retries: int = 3) -> ResultMessage:
        """Request/response with exponential backoff; corrupt replies are
        retried, silence escalates to the caller."""
        frame = task.encode()
        delay = 0.2
        last_error: Exception | None = None
        for _ in range(retries):
            try:
                msg_type, payload = self._roundtrip(frame, self.timeout)
                if msg_type != MSG_RESULT:
                    raise MalformedReply(f"expected result, got type {msg_type}")
                result = ResultMessage.decode(payload)
                if result.task_id != task.task_id:
                    raise MalformedReply(
                        f"reply for task {result.task_id}, wanted {task.task_id}")
                return result
            except (MalformedReply, protocol.VersionMismatch) as err:
                last_error = err
                log.warning("retrying task %d: %s", task.task_id, err)
            except (socket.timeout, OSError) as err:
                last_error = err
            time.sleep(delay)
            delay *= 2
        raise AgentUnreachable(str(last_error))


class WatchdogClient:
    def __init__(self, base_url: str, timeout: float = 15.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _request(self, method: str, path: str, body: dict | None = None) -> dict:
        data = json.dumps(body).encode() if body is not None else None
        request = urllib.request.Request(
            self.base_url + path, data=data, method=method,
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                return json.loads(response.read() or b"{}")
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as err:
            raise WatchdogUnreachable(str(err)) from err

    def status(self) -> dict:
        return self._request("GET", "/status")

    def reset(self) -> dict:
        return self._request("POST", "/reset")

    def boot(self, app: str) -> dict:
        return self._request("POST", "/boot", {"app": app})


# ---------------------------------------------------------------------------
# Campaign state
# ---------------------------------------------------------------------------

@dataclass
class CampaignConfig:
    seed: int = 0
    mode: str = corpus_mod.MODE_HAVOC
    iterations: int = 100
    timeout_hours: float | None = None
    feedback: bool = True
    corpus_kind: str = "random"  # random | valid
    corpus_count: int = 8
    corpus_size: int = 48
    printable: bool = False
    alpha: int = 64
    top_k: int = 16
    max_stack: int = 128
    fault: FaultModel = field(default_factory=FaultModel.correct)
    initial_seeds: list[bytes] = field(default_factory=list)
    coverage_rounds: bool = True
    max_followup_rounds: int = 8
    name: str = "campaign"

    def snapshot(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "mode": self.mode,
            "iterations": self.iterations,
            "feedback": self.feedback,
            "corpus_kind": self.corpus_kind,
            "corpus_count": self.corpus_count,
            "corpus_size": self.corpus_size,
            "printable": self.printable,
            "alpha": self.alpha,
            "top_k": self.top_k,
            "max_stack": self.max_stack,
            "fault": fault_model_to_dict(self.fault),
            "initial_seeds": [blob.hex() for blob in self.initial_seeds],
            "coverage_rounds": self.coverage_rounds,
            "max_followup_rounds": self.max_followup_rounds,
        }

    @classmethod
    def from_snapshot(cls, data: dict) -> "CampaignConfig":
        return cls(
            name=data.get("name", "campaign"),
            seed=data["seed"],
            mode=data["mode"],
            iterations=data["iterations"],
            feedback=data["feedback"],
            corpus_kind=data["corpus_kind"],
            corpus_count=data["corpus_count"],
            corpus_size=data["corpus_size"],
            printable=data.get("printable", False),
            alpha=data["alpha"],
            top_k=data["top_k"],
            max_stack=data["max_stack"],
            fault=fault_model_from_dict(data["fault"]),
            initial_seeds=[bytes.fromhex(s) for s in data.get("initial_seeds", [])],
            coverage_rounds=data.get("coverage_rounds", True),
            max_followup_rounds=data.get("max_followup_rounds", 8),
        )


class CampaignDatabase:
    """Durable campaign store: one JSON document, atomically replaced."""

    def __init__(self, path: str, config: CampaignConfig | None = None) -> None:
        self.path = path
        if config is not None:
            self.data: dict = {
                "config": config.snapshot(),
                "seeds": [],
                "coverage": {},
                "findings": [],
                "events": [],
            }
        else:
            self.data = self._load(path)

    @staticmethod
    def _load(path: str) -> dict:
        with open(path, encoding="utf-8") as handle:
            try:
                data = json.load(handle)
            except json.JSONDecodeError as err:
                raise SchemaMismatch(f"{path}: not valid JSON ({err})") from err
        validate_schema(data, path)
        return data

    @classmethod
    def load(cls, path: str) -> "CampaignDatabase":
        return cls(path)

    def save(self) -> None:
        blob = json.dumps(self.data, sort_keys=True, indent=1)
        tmp = f"{self.path}.tmp.{os.getpid()}"
        with open(tmp, "w", encoding="utf-8") as handle:
            handle.write(blob)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, self.path)

    def add_event(self, kind: str, detail: str) -> None:
        self.data["events"].append({"time": time.time(), "kind": kind, "detail": detail})

    def add_finding(self, finding: dict) -> None:
        finding["id"] = len(self.data["findings"])
        self.data["findings"].append(finding)

    def coverage_addresses(self) -> set[int]:
        return {int(addr, 16) for addr in self.data["coverage"]}

    def comparable_view(self) -> dict:
        """Everything except the timestamped event log."""
        return {key: self.data[key] for key in self.data if key != "events"}


def validate_schema(data: dict, path: str = "<memory>") -> None:
    if not isinstance(data, dict):
        raise SchemaMismatch(f"{path}: top level must be an object")
    for key in DB_SCHEMA_KEYS:
        if key not in data:
            raise SchemaMismatch(f"{path}: missing key {key!r}")
    if not isinstance(data["seeds"], list) or not isinstance(data["findings"], list):
        raise SchemaMismatch(f"{path}: seeds/findings must be lists")
    if not isinstance(data["coverage"], dict) or not isinstance(data["events"], list):
        raise SchemaMismatch(f"{path}: coverage must be an object, events a list")


# ---------------------------------------------------------------------------
# Result plumbing
# ---------------------------------------------------------------------------

def result_to_run(msg: ResultMessage) -> RunResult:
    """Lift a wire result into the shape the comparison logic consumes."""
    arch = ArchState(r=list(msg.regs), zf=msg.zf, cf=msg.cf, ip=msg.ip)
    return RunResult(
        arch=arch,
        exit=ExitReason(EXIT_NAMES[msg.exit_code], msg.exit_detail),
        retired=msg.retired,
        rw_digest=msg.rw_digest,
        cmp_digest=msg.rw_digest,
        executed_bytes=msg.executed_bytes,
    )


def coverage_report_from(msg: ResultMessage) -> CoverageReport:
    report = CoverageReport()
    for addr, count, last_ip in msg.coverage:
        report.counts[addr] = count
        report.last_ip[addr] = last_ip
    return report


# ---------------------------------------------------------------------------
# The controller
# ---------------------------------------------------------------------------

class Controller:
    def __init__(
        self,
        config: CampaignConfig,
        agent: AgentClient,
        watchdog: WatchdogClient | None = None,
        db_path: str = "campaign.json",
    ) -> None:
        self.config = config
        self.agent = agent
        self.watchdog = watchdog
        self.db = CampaignDatabase(db_path, config=config)
        rom = shared_rom()
        self.entries = default_entries(rom)
        self.blocks = extract_basic_blocks(rom, self.entries)
        self.select_rng = random.Random(f"select:{config.seed}")
        self.mutator = corpus_mod.Mutator(corpus_mod.MutatorConfig(
            mode=config.mode, k=config.top_k, alpha=config.alpha,
            max_stack=config.max_stack, rng_seed=config.seed,
        ))
        self.coverage_counts: dict[int, int] = {}
        self.resets = 0

    # -- dispatch with recovery -------------------------------------------------

    def dispatch(self, task: TaskMessage) -> ResultMessage:
        while True:
            try:
                return self.agent.dispatch(task)
            except AgentUnreachable as err:
                self._recover(f"task {task.task_id}: {err}")
                # loop: re-dispatch the in-flight task after recovery

    RESET_ATTEMPTS = 10

    def _recover(self, reason: str) -> None:
        misses = 0
        while misses < PING_MISS_LIMIT:
            if self.agent.ping(timeout=PING_INTERVAL):
                return  # transient loss; the caller re-dispatches
            misses += 1
        self.db.add_event("agent-lost", reason)
        if self.watchdog is None:
            self.db.save()
            raise CampaignPaused("agent unreachable and no watchdog configured")
        # The agent may keep dying while we recover (it is the component
        # under test, after all); keep power-cycling until it answers.
        for _ in range(self.RESET_ATTEMPTS):
            try:
                self.watchdog.reset()
            except WatchdogUnreachable as err:
                self.db.add_event("watchdog-unreachable", str(err))
                self.db.save()
                raise CampaignPaused(str(err)) from err
            deadline = time.monotonic() + 10.0
            while time.monotonic() < deadline:
                if self.agent.hello(timeout=0.5) is not None:
                    self.resets += 1
                    self.db.add_event("agent-reset", reason)
                    return
                time.sleep(0.1)
        self.db.add_event("watchdog-reset-failed", reason)
        self.db.save()
        raise CampaignPaused("agent did not return after reset")

    # -- local replay (the tracer) ----------------------------------------------

    def _local_config(self, code: bytes, task_id: int) -> VmConfig:
        supply = protocol.rng_supply_for(self.config.seed, task_id)
        return VmConfig(code=code, rng_supply=supply)

    def trace_pair(self, code: bytes, program, base_id: int):
        p_trace = trace_run(self._local_config(code, base_id),
                            fault=self.config.fault, trial_id=base_id)
        q_trace = trace_run(self._local_config(program.code, base_id + 1),
                            fault=self.config.fault, trial_id=base_id + 1)
        return p_trace, q_trace

    # -- one fuzzing iteration ----------------------------------------------------

    def run_iteration(self, iteration: int, seed: corpus_mod.Seed,
                      population: list[corpus_mod.Seed]) -> None:
        base_id = iteration * SLOTS_PER_ITERATION
        code = seed.data
        try:
            program = serialize(code)
        except SerializeError as err:
            self.db.add_event("serialize-failed", f"seed {seed.seed_id}: {err}")
            seed.fitness = Fraction(0)
            return

        p_msg = self.dispatch(TaskMessage(base_id, VARIANT_PLAIN, code))
        q_msg = self.dispatch(TaskMessage(base_id + 1, VARIANT_SERIALIZED, program.code))
        p_run, q_run = result_to_run(p_msg), result_to_run(q_msg)

        verdict = oracle.evaluate_pair(p_run, q_run, program)
        if verdict.status == "skipped":
            self.db.add_event("pair-skipped", f"iteration {iteration}: {verdict.reason}")
        elif verdict.status == "lockup":
            self.db.add_finding({
                "kind": oracle.LOCKUP,
                "testcase": code.hex(),
                "seed_id": seed.seed_id,
                "iteration": iteration,
                "divergent_index": None,
                "details": verdict.reason,
                "p_exit": [p_msg.exit_code, p_msg.exit_detail],
                "q_exit": [q_msg.exit_code, q_msg.exit_detail],
            })
        elif verdict.status == "divergent":
            self._triage_divergence(iteration, seed, code, program, verdict,
                                    p_msg, q_msg, base_id)

        new_addresses = 0
        if self.config.feedback and self.config.coverage_rounds:
            new_addresses = self._coverage_rounds(iteration, code, base_id)
        total = max(len(code), 1)
        seed.fitness = corpus_mod.fitness(
            new_addresses, p_msg.executed_bytes, total, self.config.alpha)
        seed.coverage_fingerprint = frozenset()
        self._store_seed(seed)

    def _triage_divergence(self, iteration, seed, code, program, verdict,
                           p_msg, q_msg, base_id) -> None:
        try:
            p_trace, q_trace = self.trace_pair(code, program, base_id)
            index = oracle.trace_divergence(p_trace, q_trace, code, program)
        except oracle.TraceAlignmentLost as err:
            self.db.add_event("alignment-lost", f"iteration {iteration}: {err}")
            return
        self.db.add_finding({
            "kind": oracle.ARCH_DIVERGENCE,
            "testcase": code.hex(),
            "seed_id": seed.seed_id,
            "iteration": iteration,
            "divergent_index": index,
            "details": verdict.reason,
            "p_state": {"regs": list(p_msg.regs), "ip": p_msg.ip,
                        "exit": [p_msg.exit_code, p_msg.exit_detail]},
            "q_state": {"regs": list(q_msg.regs), "ip": q_msg.ip,
                        "exit": [q_msg.exit_code, q_msg.exit_detail]},
        })

    def _coverage_rounds(self, iteration: int, code: bytes, base_id: int) -> int:
        episode = CoverageEpisode(self.blocks, self.entries)
        queue = list(plan_initial_rounds(self.entries).rounds)
        slot = 2
        followups = 0
        before = set(self.coverage_counts)
        while queue and slot < SLOTS_PER_ITERATION:
            plan = queue.pop(0)
            msg = self.dispatch(TaskMessage(base_id + slot, VARIANT_PLAIN, code,
                                            hooks=plan.hooks))
            slot += 1
            _, more = episode.ingest(coverage_report_from(msg))
            if followups + len(more) > self.config.max_followup_rounds:
                more = more[:max(self.config.max_followup_rounds - followups, 0)]
            followups += len(more)
            queue.extend(more)
        for addr, count in episode.coverage.counts.items():
            self.coverage_counts[addr] = max(self.coverage_counts.get(addr, 0), count)
        self.db.data["coverage"] = {
            f"{addr:#06x}": count for addr, count in sorted(self.coverage_counts.items())
        }
        return len(set(self.coverage_counts) - before)

    def _store_seed(self, seed: corpus_mod.Seed) -> None:
        self.db.data["seeds"].append({
            "id": seed.seed_id,
            "parent": seed.parent,
            "data": seed.data.hex(),
            "fitness": str(seed.fitness),
        })

    # -- the campaign loop ---------------------------------------------------------

    def _initial_corpus(self) -> list[corpus_mod.Seed]:
        config = self.config
        seeds: list[corpus_mod.Seed] = []
        for blob in config.initial_seeds:
            seeds.append(corpus_mod.Seed(data=blob, seed_id=len(seeds)))
        if not seeds:
            if config.corpus_kind == "valid":
                seeds = corpus_mod.gen_valid_corpus(
                    config.corpus_count, config.corpus_size, config.seed)
            else:
                seeds = corpus_mod.gen_random_corpus(
                    config.corpus_count, config.corpus_size, config.seed)
            if config.printable:
                seeds = [
                    corpus_mod.Seed(
                        data=bytes(0x20 + (b % 0x5F) for b in s.data), seed_id=s.seed_id)
                    for s in seeds
                ]
        return seeds

    def run_campaign(self) -> CampaignDatabase:
        config = self.config
        self.db.add_event("campaign-start", config.name)
        self.db.save()
        deadline = None
        if config.timeout_hours is not None:
            deadline = time.monotonic() + config.timeout_hours * 3600.0

        pending = self._initial_corpus()
        population: list[corpus_mod.Seed] = []
        next_id = len(pending)
        iteration = 0
        try:
            while iteration < config.iterations:
                if deadline is not None and time.monotonic() >= deadline:
                    self.db.add_event("campaign-timeout", f"iteration {iteration}")
                    break
                if pending:
                    candidate = pending.pop(0)
                else:
                    if config.feedback:
                        pool = corpus_mod.select_top_k(population, config.top_k)
                    else:
                        pool = population  # uniform choice; fitness is ignored
                    parent = self.select_rng.choice(pool)
                    candidate = self.mutator.mutate(
                        parent, pool=pool if config.feedback else [],
                        next_id=next_id)
                    next_id += 1
                self.run_iteration(iteration, candidate, population)
                population.append(candidate)
                iteration += 1
                self.db.save()
        finally:
            self.db.add_event("campaign-end", f"{iteration} iterations, "
                                              f"{self.resets} agent resets")
            self.db.save()
        return self.db


def health_monitor(agent: AgentClient, watchdog: WatchdogClient | None,
                   duration: float, db: CampaignDatabase | None = None) -> list[dict]:
    """Standalone liveness loop: PING every 500 ms; three consecutive
    misses trigger a watchdog reset.  Returns the events observed."""
    events: list[dict] = []
    misses = 0
    deadline = time.monotonic() + duration
    while time.monotonic() < deadline:
        if agent.ping(timeout=PING_INTERVAL):
            misses = 0
        else:
            misses += 1
            if misses >= PING_MISS_LIMIT:
                events.append({"kind": "reset", "time": time.time()})
                if db is not None:
                    db.add_event("health-reset", "ping misses exceeded")
                if watchdog is None:
                    raise WatchdogUnreachable("no watchdog configured")
                watchdog.reset()
                misses = 0
        time.sleep(PING_INTERVAL)
    return events
