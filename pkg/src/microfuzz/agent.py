"""Fuzzer agent: executes dispatched testcases on its own virtual CPU.

Runs as a separate process holding the engine and VM; the only channel
to the controller is the datagram protocol, so a crash or lockup here
never touches campaign state.  Tasks execute strictly serially: reset,
install the requested hook plan, run, collect coverage, reply.
"""

from __future__ import annotations

import argparse
import json
import logging
import socket
import sys

from . import protocol
from .engine import FaultModel, FaultRule
from .instrument import HookPlan, InstrumentationError, install_plan, read_coverage, \
    synthesize_hook_patch
from .protocol import (
    MSG_ERROR,
    MSG_HELLO,
    MSG_PING,
    MSG_PONG,
    MSG_RESULT,
    MSG_TASK,
    EXIT_CODES,
    ResultMessage,
    TaskMessage,
    decode_frame,
    encode_frame,
    rng_supply_for,
)
from .rom import shared_rom
from .vm import GuestVm, VmConfig

log = logging.getLogger("microfuzz.agent")

APP_FUZZER_DEVICE = "fuzzer_device"
APP_SPEC_FUZZ = "spec_fuzz"


def fault_model_from_dict(data: dict) -> FaultModel:
    rules = [
        FaultRule(
            opcode=r.get("opcode"),
            crbus=r.get("crbus"),
            src=r.get("src"),
            persists_through_rollback=r.get("persists", False),
            lockup=r.get("lockup", "None"),
            probability=r.get("probability", 0.5),
        )
        for r in data.get("rules", [])
    ]
    return FaultModel(
        rules=rules,
        spec_window_uops=data.get("spec_window_uops", 8),
        spec_stops_at_ms_dispatch=data.get("spec_stops_at_ms_dispatch", False),
        perf_counts_speculative=data.get("perf_counts_speculative", False),
    )


def fault_model_to_dict(fault: FaultModel) -> dict:
    return {
        "rules": [
            {
                "opcode": r.opcode,
                "crbus": r.crbus,
                "src": r.src,
                "persists": r.persists_through_rollback,
                "lockup": r.lockup,
                "probability": r.probability,
            }
            for r in fault.rules
        ],
        "spec_window_uops": fault.spec_window_uops,
        "spec_stops_at_ms_dispatch": fault.spec_stops_at_ms_dispatch,
        "perf_counts_speculative": fault.perf_counts_speculative,
    }


def execute_task(task: TaskMessage, fault: FaultModel, agent_seed: int) -> ResultMessage:
    """Run one task deterministically; same id and payload, same reply."""
    supply = rng_supply_for(agent_seed, task.task_id)
    config = VmConfig(code=task.code, rng_supply=supply)
    vm = GuestVm(config, rom=shared_rom(), fault=fault)
    vm.engine.set_trial(task.task_id)
    vm.reset()
    coverage: tuple[tuple[int, int, int], ...] = ()
    plan = None
    if task.hooks:
        plan = HookPlan(tuple(task.hooks))
        patch = synthesize_hook_patch(plan, vm.engine.image)
        install_plan(vm.engine, patch)
    result = vm.run()
    if plan is not None:
        report = read_coverage(vm.engine, plan)
        coverage = tuple(
            (addr, report.counts[addr], report.last_ip[addr])
            for addr in sorted(report.counts)
        )
    return ResultMessage(
        task_id=task.task_id,
        exit_code=EXIT_CODES[result.exit.kind],
        exit_detail=result.exit.detail,
        regs=tuple(result.arch.r),
        zf=result.arch.zf,
        cf=result.arch.cf,
        ip=result.arch.ip,
        rw_digest=result.cmp_digest,
        coverage=coverage,
        executed_bytes=result.executed_bytes,
        retired=result.retired,
    )


class AgentServer:
    """Serial task executor behind a datagram socket."""

    def __init__(self, host: str, port: int, fault: FaultModel | None = None,
                 seed: int = 0, app: str = APP_FUZZER_DEVICE) -> None:
        self.fault = fault if fault is not None else FaultModel.correct()
        self.seed = seed
        self.app = app
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.running = False

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def serve_forever(self) -> None:
        self.running = True
        self.sock.settimeout(0.5)
        while self.running:
            try:
                datagram, peer = self.sock.recvfrom(protocol.MAX_FRAME)
            except socket.timeout:
                continue
            except OSError:
                break
            reply = self.handle(datagram)
            if reply is not None:
                try:
                    self.sock.sendto(reply, peer)
                except OSError:
                    pass

    def stop(self) -> None:
        self.running = False
        self.sock.close()

    def handle(self, datagram: bytes) -> bytes | None:
        try:
            msg_type, payload = decode_frame(datagram)
        except protocol.ProtocolError as err:
            log.warning("dropping malformed frame: %s", err)
            return encode_frame(MSG_ERROR, str(err).encode()[:200])
        if msg_type == MSG_PING:
            return encode_frame(MSG_PONG, payload)
        if msg_type == MSG_HELLO:
            return encode_frame(MSG_HELLO, self.app.encode())
        if msg_type == MSG_TASK:
            try:
                task = TaskMessage.decode(payload)
            except protocol.ProtocolError as err:
                return encode_frame(MSG_ERROR, str(err).encode()[:200])
            try:
                result = execute_task(task, self.fault, self.seed)
            except InstrumentationError as err:
                log.warning("task %d rejected: %s", task.task_id, err)
                return encode_frame(MSG_ERROR, f"task {task.task_id}: {err}".encode()[:200])
            return result.encode()
        return encode_frame(MSG_ERROR, f"unexpected message type {msg_type}".encode())


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="microfuzz-agent")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=4444)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--app", choices=[APP_FUZZER_DEVICE, APP_SPEC_FUZZ],
                        default=APP_FUZZER_DEVICE)
    parser.add_argument("--fault-model", help="JSON file of injected fault rules")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

    fault = FaultModel.correct()
    if args.fault_model:
        with open(args.fault_model, encoding="utf-8") as handle:
            fault = fault_model_from_dict(json.load(handle))

    server = AgentServer(args.host, args.port, fault=fault, seed=args.seed, app=args.app)
    log.info("agent (%s) listening on %s:%d", args.app, *server.address)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
