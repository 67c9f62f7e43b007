"""Watchdog: REST-controlled supervisor for the agent process.

Models the power-cycling recovery path: when the controller loses the
agent it POSTs ``/reset`` here, and the watchdog kills the process (no
matter how wedged), relaunches it and probes its datagram port until it
answers a HELLO.  ``/boot`` selects which agent application runs
(``fuzzer_device`` or ``spec_fuzz``); ``/status`` reports the state
machine: Down, Booting, Up.

Request handling is concurrent; process management is serialized by a
lock, so overlapping resets coalesce into a single restart.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import protocol

log = logging.getLogger("microfuzz.watchdog")

STATE_DOWN = "Down"
STATE_BOOTING = "Booting"
STATE_UP = "Up"

BOOT_TIMEOUT = 10.0
LAUNCH_ATTEMPTS = 3
_PROBE_INTERVAL = 0.05


class LaunchFailure(Exception):
    pass


@dataclass
class TargetHandle:
    """Launch specification and liveness state of the supervised agent."""

    argv: list[str]
    agent_addr: tuple[str, int]
    env: dict[str, str] | None = None
    app: str = "fuzzer_device"
    state: str = STATE_DOWN
    last_reset: float = 0.0
    booted_at: float = 0.0
    process: subprocess.Popen | None = field(default=None, repr=False)

    def command(self) -> list[str]:
        return self.argv + ["--app", self.app]


def probe_agent(addr: tuple[str, int], timeout: float = 0.2) -> bool:
    """One HELLO round-trip against the agent port."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.settimeout(timeout)
    try:
        sock.sendto(protocol.encode_frame(protocol.MSG_HELLO), addr)
        datagram, _ = sock.recvfrom(protocol.MAX_FRAME)
        msg_type, _ = protocol.decode_frame(datagram)
        return msg_type == protocol.MSG_HELLO
    except (socket.timeout, OSError, protocol.ProtocolError):
        return False
    finally:
        sock.close()


class Watchdog:
    def __init__(self, handle: TargetHandle) -> None:
        self.handle = handle
        self._lock = threading.Lock()
        self._reset_in_progress = threading.Event()

    # -- process management ----------------------------------------------------

    def _kill(self) -> None:
        proc = self.handle.process
        if proc is not None and proc.poll() is None:
            proc.kill()
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:  # pragma: no cover - kill is final
                pass
        self.handle.process = None
        self.handle.state = STATE_DOWN

    def _launch_once(self) -> bool:
        self.handle.state = STATE_BOOTING
        self.handle.process = subprocess.Popen(
            self.handle.command(),
            env=self.handle.env,
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
        )
        deadline = time.monotonic() + BOOT_TIMEOUT
        while time.monotonic() < deadline:
            if self.handle.process.poll() is not None:
                return False  # process died during boot
            if probe_agent(self.handle.agent_addr):
                self.handle.state = STATE_UP
                self.handle.booted_at = time.monotonic()
                return True
            time.sleep(_PROBE_INTERVAL)
        return False

    def reset_target(self) -> str:
        """Hard reset: kill, relaunch, wait until the agent answers."""
        if self._reset_in_progress.is_set():
            # A reset is already running; wait for it instead of stacking
            # another power cycle.
            while self._reset_in_progress.is_set():
                time.sleep(0.02)
            return self.handle.state
        with self._lock:
            self._reset_in_progress.set()
            try:
                self.handle.last_reset = time.monotonic()
                self._kill()
                for attempt in range(LAUNCH_ATTEMPTS):
                    if self._launch_once():
                        return self.handle.state
                    self._kill()
                    log.warning("launch attempt %d failed", attempt + 1)
                self.handle.state = STATE_DOWN
                raise LaunchFailure(
                    f"agent did not come up after {LAUNCH_ATTEMPTS} attempts")
            finally:
                self._reset_in_progress.clear()

    def boot(self, app: str) -> str:
        with self._lock:
            self.handle.app = app
        return self.reset_target()

    def shutdown(self) -> None:
        with self._lock:
            self._kill()

    def status(self) -> dict:
        uptime = 0
        if self.handle.state == STATE_UP:
            uptime = int((time.monotonic() - self.handle.booted_at) * 1000)
        return {"state": self.handle.state, "uptime_ms": uptime, "app": self.handle.app}


class _Handler(BaseHTTPRequestHandler):
    watchdog: Watchdog  # set by serve()

    def log_message(self, fmt, *args):  # quiet the default stderr spam
        log.debug(fmt, *args)

    def _reply(self, status: int, body: dict) -> None:
        blob = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def do_GET(self) -> None:
        if self.path == "/status":
            self._reply(200, self.watchdog.status())
        else:
            self._reply(404, {"error": "unknown endpoint"})

    def do_POST(self) -> None:
        if self.path == "/reset":
            threading.Thread(target=self._reset_bg, daemon=True).start()
            self._reply(202, {"state": self.watchdog.handle.state})
        elif self.path == "/boot":
            length = int(self.headers.get("Content-Length", 0))
            try:
                body = json.loads(self.rfile.read(length) or b"{}")
            except json.JSONDecodeError:
                self._reply(400, {"error": "bad JSON"})
                return
            app = body.get("app", "fuzzer_device")
            if app not in ("fuzzer_device", "spec_fuzz"):
                self._reply(400, {"error": f"unknown app {app!r}"})
                return
            threading.Thread(target=self.watchdog.boot, args=(app,), daemon=True).start()
            self._reply(202, {"state": self.watchdog.handle.state, "app": app})
        else:
            self._reply(404, {"error": "unknown endpoint"})

    def _reset_bg(self) -> None:
        try:
            self.watchdog.reset_target()
        except LaunchFailure as err:
            log.error("reset failed: %s", err)


def serve(bind: tuple[str, int], handle: TargetHandle) -> tuple[ThreadingHTTPServer, Watchdog]:
    """Start the REST service; returns (server, watchdog) for the caller to
    run and eventually shut down."""
    watchdog = Watchdog(handle)
    handler = type("BoundHandler", (_Handler,), {"watchdog": watchdog})
    try:
        server = ThreadingHTTPServer(bind, handler)
    except OSError as err:
        raise LaunchFailure(f"cannot bind {bind}: {err}") from err
    return server, watchdog


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="microfuzz-watchdog")
    parser.add_argument("--bind", default="127.0.0.1:8000")
    parser.add_argument("--agent-addr", default="127.0.0.1:4444")
    parser.add_argument("--agent-cmd", required=True,
                        help="command line that launches the agent")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

    host, port = args.bind.rsplit(":", 1)
    agent_host, agent_port = args.agent_addr.rsplit(":", 1)
    handle = TargetHandle(
        argv=shlex.split(args.agent_cmd),
        agent_addr=(agent_host, int(agent_port)),
    )
    server, watchdog = serve((host, int(port)), handle)
    log.info("watchdog on %s:%d supervising %s", host, int(port), handle.argv)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        watchdog.shutdown()
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
