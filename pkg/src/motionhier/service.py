"""Rollout server.

Exposes live episodes over newline-delimited JSON so a correction console
(or scripted client) can watch state updates, intervene with language
motions, and save corrected episodes.  Connections are plain TCP sockets;
a client that opens with an HTTP WebSocket upgrade gets the same frames
carried in RFC 6455 text frames, so browsers can connect directly.

Protocol (field ``type``), one JSON object per frame:

The client speaks first (the first bytes identify the transport); the
server then replies with ``hello`` before answering the opening message.

  client -> server
    start      {task, seed, mode?, max_steps?}
    intervene  {}
    correction {motion}
    keep       {}
    resume     {}
    save       {}
  server -> client
    hello   {protocol, version, tasks, variant}
    state   {step, poses, predicted_motion, z_used, corrected, stage, status}
    requery {predicted_motion}
    ack     {of}
    error   {code, detail, suggestions?}
    done    {success, stages, steps}
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import threading
import time
from pathlib import Path

from .core import MotionHierError
from .correction import CorrectionEvent, save_session
from .infer import CorrectionQueue, RolloutConfig, run_episode
from .labeler import MotionParseError, parse_motion
from .model import PolicySet
from . import sim

PROTOCOL_VERSION = 1
_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class ServiceError(MotionHierError):
    pass


# ---------------------------------------------------------------------------
# Transports: line-delimited TCP and minimal WebSocket text frames


class _LineTransport:
    def __init__(self, conn, initial=b""):
        self.conn = conn
        self.buf = initial

    def recv_message(self):
        while b"\n" not in self.buf:
            chunk = self.conn.recv(4096)
            if not chunk:
                return None
            self.buf += chunk
        line, self.buf = self.buf.split(b"\n", 1)
        line = line.strip()
        return line.decode("utf-8") if line else self.recv_message()

    def send_message(self, text: str):
        self.conn.sendall(text.encode("utf-8") + b"\n")


class _WebSocketTransport:
    """Server side of RFC 6455, text frames only, no extensions."""

    def __init__(self, conn, request: bytes):
        self.conn = conn
        self.buf = b""
        key = None
        for line in request.decode("latin-1").split("\r\n"):
            if line.lower().startswith("sec-websocket-key:"):
                key = line.split(":", 1)[1].strip()
        if key is None:
            raise ServiceError("websocket upgrade without Sec-WebSocket-Key")
        accept = base64.b64encode(
            hashlib.sha1((key + _WS_GUID).encode()).digest()
        ).decode()
        conn.sendall(
            (
                "HTTP/1.1 101 Switching Protocols\r\n"
                "Upgrade: websocket\r\n"
                "Connection: Upgrade\r\n"
                f"Sec-WebSocket-Accept: {accept}\r\n\r\n"
            ).encode()
        )

    def _read_exact(self, n: int):
        while len(self.buf) < n:
            chunk = self.conn.recv(4096)
            if not chunk:
                return None
            self.buf += chunk
        out, self.buf = self.buf[:n], self.buf[n:]
        return out

    def recv_message(self):
        while True:
            head = self._read_exact(2)
            if head is None:
                return None
            opcode = head[0] & 0x0F
            masked = head[1] & 0x80
            length = head[1] & 0x7F
            if length == 126:
                length = int.from_bytes(self._read_exact(2), "big")
            elif length == 127:
                length = int.from_bytes(self._read_exact(8), "big")
            mask = self._read_exact(4) if masked else b"\x00" * 4
            payload = self._read_exact(length) or b""
            if masked:
                payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
            if opcode == 0x8:  # close
                return None
            if opcode == 0x9:  # ping -> pong
                self._send_frame(0xA, payload)
                continue
            if opcode in (0x1, 0x2):
                return payload.decode("utf-8")

    def _send_frame(self, opcode: int, payload: bytes):
        header = bytes([0x80 | opcode])
        n = len(payload)
        if n < 126:
            header += bytes([n])
        elif n < 1 << 16:
            header += bytes([126]) + n.to_bytes(2, "big")
        else:
            header += bytes([127]) + n.to_bytes(8, "big")
        self.conn.sendall(header + payload)

    def send_message(self, text: str):
        self._send_frame(0x1, text.encode("utf-8"))


def _make_transport(conn):
    first = conn.recv(4096)
    if not first:
        return None
    if first.startswith(b"GET "):
        while b"\r\n\r\n" not in first:
            chunk = conn.recv(4096)
            if not chunk:
                return None
            first += chunk
        head, rest = first.split(b"\r\n\r\n", 1)
        t = _WebSocketTransport(conn, head)
        t.buf = rest
        return t
    return _LineTransport(conn, initial=first)


# ---------------------------------------------------------------------------
# Sessions


def _poses(world: sim.WorldState):
    return {
        "ee": [float(v) for v in world.ee_pose],
        "grip": float(world.grip_state),
        "objects": {
            oid: [float(v) for v in o.pose] for oid, o in sorted(world.objects.items())
        },
        "joints": {k: float(j.value) for k, j in sorted(world.joints.items())},
    }


class _Session:
    def __init__(self, server, transport, sid):
        self.server = server
        self.transport = transport
        self.sid = sid
        self.queue = CorrectionQueue()
        self.lock = threading.Lock()
        self.rollout_thread = None
        self.trace = None
        self.events = []
        self.status = "idle"
        self.step_index = -1
        self.requery_countdown = None

    def send(self, **frame):
        with self.lock:
            try:
                self.transport.send_message(json.dumps(frame, sort_keys=True))
            except OSError:
                pass

    def run(self):
        self.send(
            type="hello",
            protocol="motionhier",
            version=PROTOCOL_VERSION,
            tasks=list(self.server.tasks),
            variant=self.server.policy.variant,
        )
        while True:
            try:
                raw = self.transport.recv_message()
            except (OSError, ServiceError):
                break
            if raw is None:
                break
            try:
                msg = json.loads(raw)
                if not isinstance(msg, dict) or "type" not in msg:
                    raise ValueError("frame must be an object with a 'type' field")
            except ValueError as e:
                self.send(type="error", code="malformed", detail=str(e))
                continue
            self.handle(msg)
        if self.rollout_thread is not None:
            self.rollout_thread.join(timeout=10.0)

    def handle(self, msg):
        kind = msg["type"]
        if kind == "start":
            self.handle_start(msg)
        elif kind == "correction":
            self.handle_correction(msg)
        elif kind == "intervene":
            self.requery_countdown = self.server.requery_period
            self.status = "awaiting_requery"
            self.send(type="ack", of="intervene")
        elif kind == "keep":
            self.send(type="ack", of="keep")
        elif kind == "resume":
            ev = CorrectionEvent(
                step_index=self.step_index + 1, motion=None, source="human", kind="resume"
            )
            self.queue.inject(ev)
            self.events.append(ev)
            self.requery_countdown = None
            self.send(type="ack", of="resume")
        elif kind == "save":
            self.handle_save()
        else:
            self.send(type="error", code="unknown_type", detail=f"unknown type {kind!r}")

    def handle_start(self, msg):
        if self.rollout_thread is not None and self.rollout_thread.is_alive():
            self.send(type="error", code="busy", detail="a rollout is already running")
            return
        task = msg.get("task")
        if task not in self.server.tasks:
            self.send(
                type="error",
                code="unknown_task",
                detail=f"task {task!r} not in {list(self.server.tasks)}",
            )
            return
        seed = int(msg.get("seed", 0))
        mode = msg.get("mode", "async")
        try:
            cfg = RolloutConfig(
                mode=mode,
                max_steps=int(msg.get("max_steps", self.server.max_steps)),
                correction_source="live",
            )
        except ValueError as e:
            self.send(type="error", code="bad_config", detail=str(e))
            return
        self.events = []
        self.trace = None
        self.status = "running"
        self.send(type="ack", of="start")

        def work():
            def on_step(ts, world):
                self.step_index = ts.step_index
                z_pred = ts.z_predicted_next
                self.send(
                    type="state",
                    step=ts.step_index,
                    poses=_poses(world),
                    predicted_motion=z_pred,
                    z_used=ts.z_used,
                    corrected=ts.corrected,
                    stage=ts.stage,
                    status=self.status,
                )
                if ts.corrected and self.requery_countdown is not None:
                    self.requery_countdown -= 1
                    if self.requery_countdown <= 0:
                        self.requery_countdown = self.server.requery_period
                        self.send(type="requery", predicted_motion=z_pred)
                if self.server.step_delay:
                    time.sleep(self.server.step_delay)

            trace = run_episode(
                self.server.policy, task, seed, cfg, events=self.queue, on_step=on_step
            )
            self.trace = trace
            self.status = "done"
            self.send(
                type="done",
                success=trace.success,
                stages=trace.final_stage,
                steps=len(trace.steps),
            )

        self.rollout_thread = threading.Thread(target=work, daemon=True)
        self.rollout_thread.start()

    def handle_correction(self, msg):
        text = msg.get("motion", "")
        try:
            motion = parse_motion(text)
        except MotionParseError as e:
            self.send(
                type="error",
                code="unparseable_motion",
                detail=str(e),
                suggestions=list(e.suggestions),
            )
            return
        kind = "update" if self.requery_countdown is not None else "intervene"
        ev = CorrectionEvent(
            step_index=self.step_index + 1, motion=motion, source="human", kind=kind
        )
        ack = self.queue.inject(ev)
        if not ack.get("ok"):
            self.send(type="error", code="rejected", detail=ack.get("error", ""))
            return
        self.events.append(ev)
        if self.requery_countdown is None:
            self.requery_countdown = self.server.requery_period
        self.send(type="ack", of="correction", motion=motion.canonical)

    def handle_save(self):
        if self.trace is None or self.status != "done":
            self.send(type="error", code="not_done", detail="no finished episode to save")
            return
        if self.server.trace_dir is None:
            self.send(type="error", code="no_trace_dir", detail="server has no trace directory")
            return
        name = f"session_{self.sid}_{self.trace.task.task_id}_{self.trace.seed}.mhtr"
        path = Path(self.server.trace_dir) / name
        save_session(self.trace, self.events, path)
        self.send(type="ack", of="save", path=str(path), success=self.trace.success)


# ---------------------------------------------------------------------------
# Server


class RolloutServer:
    """One session per connection; the loaded model is shared read-only."""

    def __init__(
        self,
        policy: PolicySet,
        host: str = "127.0.0.1",
        port: int = 0,
        tasks=None,
        trace_dir=None,
        step_delay: float = 0.1,
        max_steps: int = 150,
        requery_period: int = 5,
    ):
        self.policy = policy
        for t in tasks or policy.task_ids:
            sim.task_spec(t)  # validate early
        self.tasks = tuple(tasks or policy.task_ids)
        self.trace_dir = trace_dir
        self.step_delay = step_delay
        self.max_steps = max_steps
        self.requery_period = requery_period
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._threads = []
        self._running = False
        self._next_sid = 0

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def start(self):
        self._sock.listen()
        self._running = True
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _accept_loop(self):
        while self._running:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            self._next_sid += 1
            sid = self._next_sid
            t = threading.Thread(target=self._serve_conn, args=(conn, sid), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn, sid):
        try:
            transport = _make_transport(conn)
            if transport is None:
                return
            _Session(self, transport, sid).run()
        except (OSError, ServiceError):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def stop(self):
        self._running = False
        # A blocked accept() is not reliably woken by close() alone;
        # shutdown (or a dummy self-connection) forces it to return.
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            try:
                socket.create_connection(self.address, timeout=1.0).close()
            except OSError:
                pass
        try:
            self._sock.close()
        except OSError:
            pass
        for t in self._threads:
            t.join(timeout=5.0)

    def serve_forever(self):
        self.start()
        try:
            while True:
                time.sleep(0.5)
        except KeyboardInterrupt:
            self.stop()


def serve(checkpoint_path, host="127.0.0.1", port=8765, **kwargs) -> RolloutServer:
    policy = PolicySet.load(checkpoint_path)
    return RolloutServer(policy, host=host, port=port, **kwargs)
