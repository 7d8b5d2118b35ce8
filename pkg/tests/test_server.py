from __future__ import annotations

import base64
import json
import threading

import pytest

from duorch.archive import pack_dir
from duorch.fixtures import minimal_app
from duorch.gateway.runtime import Runtime
from duorch.gateway.server import Client, GatewayServer, parse_address


@pytest.fixture
def server(tmp_path):
    srv = GatewayServer(Runtime(tmp_path / "state"))
    srv.start()
    yield srv
    srv.stop()


@pytest.fixture
def client(server):
    with Client(server.address, timeout=30) as c:
        yield c


def _sorter(tmp_path):
    return pack_dir(minimal_app(tmp_path / "sorter"))


def test_run_archive_gets_one_ack_then_one_result(client, sample_qaa):
    replies = client.submit(archive=sample_qaa, params={"dataset": "costumes"})
    assert [r["type"] for r in replies] == ["ACK", "RESULT"]
    ack, result = replies
    assert ack["instance"] == result["instance"]
    assert result["status"] == "completed"
    assert "cluster_assignment" in result["variables"]


def test_run_after_archive_is_deployed(client, tmp_path):
    client.submit(archive=_sorter(tmp_path), params={"text": "x\n"})
    replies = client.submit(workflow="sort", params={"text": "c\nb\na\n"})
    assert [r["type"] for r in replies] == ["ACK", "RESULT"]
    assert replies[1]["variables"]["text"] == "a\nb\nc\n"


def test_failed_workflow_ends_with_error(client, tmp_path):
    wf = {"id": "bad", "activities": [{"id": "f", "impl": {"target": "builtin:fail", "topology_node": "Host"}}]}
    replies = client.submit(archive=pack_dir(minimal_app(tmp_path / "bad", wf)))
    assert [r["type"] for r in replies] == ["ACK", "ERROR"]
    assert replies[1]["code"] == "workflow_failed"
    assert replies[1]["status"] == "failed"


def test_not_deployed(client):
    (reply,) = client.submit(workflow="nowhere")
    assert (reply["type"], reply["code"]) == ("ERROR", "not_deployed")


def test_invalid_archive(client, sample_qaa):
    damaged = bytearray(sample_qaa)
    damaged[100] ^= 0x40
    (reply,) = client.submit(archive=bytes(damaged))
    assert (reply["type"], reply["code"]) == ("ERROR", "invalid_archive")


@pytest.mark.parametrize("envelope, code", [
    ({"id": "1", "type": "DANCE"}, "unknown_type"),
    ({"id": "2"}, "malformed"),
    ({"id": "3", "type": "RUN"}, "malformed"),
    ({"id": "4", "type": "RUN_ARCHIVE", "archive_b64": "@@@"}, "malformed"),
    ({"id": "5", "type": "RUN_ARCHIVE"}, "malformed"),
    ({"id": "6", "type": "RUN", "workflow": "w", "params": [1]}, "bad_params"),
    ({"id": "7", "type": "STATUS"}, "malformed"),
    ({"id": "8", "type": "STATUS", "instance": "ghost"}, "unknown_instance"),
])
def test_request_errors(client, envelope, code):
    reply = client.request(envelope)
    assert (reply["id"], reply["type"], reply["code"]) == (envelope["id"], "ERROR", code)


def test_garbage_keeps_the_connection_open(client, tmp_path):
    client.send_raw(b"this is not json\n")
    assert client.receive()["code"] == "malformed"
    client.send_raw(b"[1, 2]\n\n")
    assert client.receive()["code"] == "malformed"
    replies = client.submit(archive=_sorter(tmp_path), params={"text": "b\na\n"})
    assert replies[-1]["type"] == "RESULT"


def test_concurrent_runs_get_distinct_instances(server, tmp_path):
    archive = _sorter(tmp_path)
    with Client(server.address) as c:
        c.submit(archive=archive, params={"text": "a\n"})
    results = {}

    def one(n):
        with Client(server.address) as c:
            results[n] = c.submit(workflow="sort", params={"text": f"{n}\n0\n"})

    threads = [threading.Thread(target=one, args=(n,)) for n in range(1, 7)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(60)
    assert sorted(results) == list(range(1, 7))
    instances = {r[0]["instance"] for r in results.values()}
    assert len(instances) == 6
    for n, replies in results.items():
        assert replies[1]["variables"]["text"] == f"0\n{n}\n"


def test_pipelined_requests_on_one_connection(client, tmp_path):
    client.submit(archive=_sorter(tmp_path), params={"text": "a\n"})
    for n in range(3):
        client.send({"id": f"r{n}", "type": "RUN", "workflow": "sort", "params": {"text": f"{n}\n"}})
    seen = {}
    while len([e for e in seen.values() if e[-1] in ("RESULT", "ERROR")]) < 3:
        env = client.receive()
        seen.setdefault(env["id"], []).append(env["type"])
    assert seen == {f"r{n}": ["ACK", "RESULT"] for n in range(3)}


def test_status_and_audit(client, tmp_path):
    replies = client.submit(archive=_sorter(tmp_path), params={"text": "b\na\n"})
    instance = replies[0]["instance"]
    status = client.status(instance)
    assert (status["type"], status["status"], status["archived"]) == ("ACK", "completed", True)
    audit = client.audit("sort")
    assert audit["type"] == "ACK"
    (rec,) = audit["records"]
    assert rec["instance"] == instance and set(rec["durations"]) == {"sort"}


def test_envelope_is_newline_delimited_json(server, tmp_path):
    import socket

    host, port = parse_address(server.address)
    with socket.create_connection((host, port), timeout=30) as sock:
        archive = base64.b64encode(_sorter(tmp_path)).decode()
        sock.sendall(json.dumps({"id": "z", "type": "RUN_ARCHIVE", "archive_b64": archive,
                                 "params": {"text": "q\np\n"}}).encode() + b"\n")
        data = b""
        while data.count(b"\n") < 2:
            data += sock.recv(65536)
    lines = [json.loads(line) for line in data.splitlines()]
    assert [(e["id"], e["type"]) for e in lines] == [("z", "ACK"), ("z", "RESULT")]


def test_parse_address():
    assert parse_address("127.0.0.1:7411") == ("127.0.0.1", 7411)
    assert parse_address(":9") == ("127.0.0.1", 9)
    with pytest.raises(ValueError):
        parse_address("localhost")
