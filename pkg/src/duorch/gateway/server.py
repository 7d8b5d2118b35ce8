"""Newline-delimited JSON envelopes over TCP: the gateway server and a small client."""

from __future__ import annotations

import base64
import binascii
import json
import logging
import socket
import socketserver
import threading
import uuid
from typing import Any, Iterator, Mapping

from .runtime import GatewayError, Runtime

logger = logging.getLogger(__name__)

__all__ = ["GatewayServer", "Client", "parse_address", "REQUEST_TYPES"]

REQUEST_TYPES = ("RUN", "RUN_ARCHIVE", "STATUS", "AUDIT")
MAX_LINE = 256 * 1024 * 1024


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _error(msg_id: Any, code: str, detail: str, **extra: Any) -> dict[str, Any]:
    return {"id": msg_id, "type": "ERROR", "code": code, "detail": detail, **extra}


def _audit_summary(rec) -> dict[str, Any]:
    return {"instance": rec.instance_id, "model": rec.model_id, "status": rec.status,
            "started_at": rec.started_at, "finished_at": rec.finished_at, "durations": rec.durations()}


class _Connection:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.lock = threading.Lock()
        self.open = True

    def send(self, envelope: Mapping[str, Any]) -> None:
        data = (json.dumps(envelope, sort_keys=True, default=str) + "\n").encode()
        with self.lock:
            if not self.open:
                return
            try:
                self.sock.sendall(data)
            except OSError:
                self.open = False


class _Handler(socketserver.StreamRequestHandler):
    server: "GatewayServer"

    def handle(self) -> None:
        conn = _Connection(self.connection)
        workers = []
        while True:
            try:
                line = self.rfile.readline(MAX_LINE)
            except OSError:
                break
            if not line:
                break
            if not line.strip():
                continue
            t = threading.Thread(target=self.server.handle_line, args=(line, conn), daemon=True)
            t.start()
            workers.append(t)
        for t in workers:
            t.join()
        conn.open = False


class GatewayServer(socketserver.ThreadingTCPServer):
    """Reads envelopes, answers each request with ACK (or ERROR) and, for runs, a final RESULT/ERROR."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, runtime: Runtime, address: tuple[str, int] = ("127.0.0.1", 0), *, max_deployments: int = 4):
        super().__init__(address, _Handler)
        self.runtime = runtime
        self.deployments = threading.BoundedSemaphore(max_deployments)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> None:
        self.runtime.start()
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05},
                                        name="duorch-gateway", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        self.runtime.stop()

    # -- message handling -------------------------------------------------

    def handle_line(self, line: bytes, conn: _Connection) -> None:
        try:
            envelope = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            conn.send(_error(None, "malformed", f"not a JSON document: {exc}"))
            return
        if not isinstance(envelope, dict):
            conn.send(_error(None, "malformed", "envelope must be a JSON object"))
            return
        msg_id = envelope.get("id") or uuid.uuid4().hex
        kind = envelope.get("type")
        if not isinstance(kind, str):
            conn.send(_error(msg_id, "malformed", "envelope lacks a type"))
            return
        if kind not in REQUEST_TYPES:
            conn.send(_error(msg_id, "unknown_type", f"unknown message type {kind!r}"))
            return
        try:
            getattr(self, f"_on_{kind.lower()}")(str(msg_id), envelope, conn)
        except GatewayError as exc:
            conn.send(_error(msg_id, exc.code, exc.detail))
        except Exception as exc:  # keep the connection usable whatever happened
            logger.exception("handling %s %s failed", kind, msg_id)
            conn.send(_error(msg_id, "internal", str(exc)))

    @staticmethod
    def _params(envelope: Mapping[str, Any]) -> dict[str, Any]:
        params = envelope.get("params", {})
        if not isinstance(params, dict):
            raise GatewayError("bad_params", "params must be an object")
        return params

    def _follow(self, msg_id: str, handle, conn: _Connection) -> None:
        conn.send({"id": msg_id, "type": "ACK", "instance": handle.instance_id})
        result = handle.future.result()
        if result["status"] == "completed":
            conn.send({"id": msg_id, "type": "RESULT", "instance": result["instance"], "status": result["status"],
                       "variables": result["variables"]})
        else:
            conn.send(_error(msg_id, "workflow_failed", "; ".join(result["errors"]) or result["status"],
                             instance=result["instance"], status=result["status"]))

    def _on_run(self, msg_id: str, envelope: Mapping[str, Any], conn: _Connection) -> None:
        workflow = envelope.get("workflow")
        if not isinstance(workflow, str) or not workflow:
            raise GatewayError("malformed", "RUN needs a non-empty workflow name")
        handle = self.runtime.run(workflow, self._params(envelope), message_id=msg_id)
        self._follow(msg_id, handle, conn)

    def _on_run_archive(self, msg_id: str, envelope: Mapping[str, Any], conn: _Connection) -> None:
        try:
            archive = base64.b64decode(envelope.get("archive_b64") or "", validate=True)
        except (binascii.Error, ValueError) as exc:
            raise GatewayError("malformed", f"archive_b64 is not base64: {exc}") from None
        if not archive:
            raise GatewayError("malformed", "RUN_ARCHIVE needs archive_b64")
        params = self._params(envelope)
        with self.deployments:
            handle = self.runtime.run_archive(archive, params, message_id=msg_id)
        self._follow(msg_id, handle, conn)

    def _on_status(self, msg_id: str, envelope: Mapping[str, Any], conn: _Connection) -> None:
        instance = envelope.get("instance")
        if not isinstance(instance, str):
            raise GatewayError("malformed", "STATUS needs an instance id")
        status = self.runtime.status(instance)
        conn.send({"id": msg_id, "type": "ACK", **status})

    def _on_audit(self, msg_id: str, envelope: Mapping[str, Any], conn: _Connection) -> None:
        records = self.runtime.audit(model=envelope.get("model"), instance=envelope.get("instance"))
        conn.send({"id": msg_id, "type": "ACK", "records": [_audit_summary(r) for r in records]})


class Client:
    """Blocking client; one connection, requests answered in arrival order per id."""

    def __init__(self, address: str | tuple[str, int], timeout: float | None = 60.0):
        self.address = parse_address(address) if isinstance(address, str) else address
        self.sock = socket.create_connection(self.address, timeout=timeout)
        self.reader = self.sock.makefile("rb")

    def close(self) -> None:
        self.reader.close()
        self.sock.close()

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def send(self, envelope: Mapping[str, Any]) -> None:
        self.sock.sendall((json.dumps(envelope) + "\n").encode())

    def send_raw(self, data: bytes) -> None:
        self.sock.sendall(data)

    def receive(self) -> dict[str, Any]:
        line = self.reader.readline(MAX_LINE)
        if not line:
            raise ConnectionError("gateway closed the connection")
        return json.loads(line)

    def responses(self, msg_id: str) -> Iterator[dict[str, Any]]:
        while True:
            env = self.receive()
            if env.get("id") == msg_id:
                yield env

    def request(self, envelope: dict[str, Any]) -> dict[str, Any]:
        envelope.setdefault("id", uuid.uuid4().hex)
        self.send(envelope)
        return next(self.responses(envelope["id"]))

    def submit(self, *, workflow: str | None = None, archive: bytes | None = None,
               params: Mapping[str, Any] | None = None) -> list[dict[str, Any]]:
        """Send RUN or RUN_ARCHIVE and return every envelope up to the terminal one."""
        msg_id = uuid.uuid4().hex
        if archive is not None:
            env = {"id": msg_id, "type": "RUN_ARCHIVE", "archive_b64": base64.b64encode(archive).decode(),
                   "params": dict(params or {})}
        else:
            env = {"id": msg_id, "type": "RUN", "workflow": workflow, "params": dict(params or {})}
        self.send(env)
        out = []
        for reply in self.responses(msg_id):
            out.append(reply)
            if reply["type"] in ("RESULT", "ERROR"):
                return out

    def status(self, instance: str) -> dict[str, Any]:
        return self.request({"type": "STATUS", "instance": instance})

    def audit(self, model: str | None = None) -> dict[str, Any]:
        env: dict[str, Any] = {"type": "AUDIT"}
        if model:
            env["model"] = model
        return self.request(env)
