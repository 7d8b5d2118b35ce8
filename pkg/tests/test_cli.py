from __future__ import annotations

import base64
import json
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import pytest

from duorch.archive import pack_dir
from duorch.cli import main
from duorch.fixtures import build_sample_app, minimal_app
from duorch.gateway.runtime import Runtime
from duorch.gateway.server import Client


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


# -- offline commands ------------------------------------------------------------


def test_pack_and_validate(tmp_path, capsys):
    app = build_sample_app(tmp_path / "clustering")
    out = tmp_path / "c.qaa"
    assert main(["pack", str(app), "-o", str(out)]) == 0
    assert capsys.readouterr().out.strip() == str(out)
    assert main(["validate", str(out)]) == 0
    assert capsys.readouterr().out.strip() == "ok"
    assert main(["validate", "--json", str(out)]) == 0
    assert json.loads(capsys.readouterr().out) == {"ok": True, "diagnostics": []}


def test_validate_reports_corruption(tmp_path, capsys, sample_qaa):
    data = bytearray(sample_qaa)
    data[200] ^= 1
    bad = tmp_path / "bad.qaa"
    bad.write_bytes(bytes(data))
    assert main(["validate", str(bad)]) == 1
    assert "checksum_mismatch" in capsys.readouterr().err


def test_validate_missing_file(tmp_path):
    assert main(["validate", str(tmp_path / "nope.qaa")]) == 2


def test_pack_reports_manifest_problems(tmp_path, capsys):
    app = minimal_app(tmp_path / "app")
    manifest = json.loads((app / "manifest.json").read_text())
    manifest["data"] = ["missing.csv"]
    (app / "manifest.json").write_text(json.dumps(manifest))
    assert main(["pack", str(app), "-o", str(tmp_path / "x.qaa")]) == 1
    assert "missing_file" in capsys.readouterr().err
    assert not (tmp_path / "x.qaa").exists()


def test_plan(tmp_path, capsys):
    app = build_sample_app(tmp_path / "clustering")
    assert main(["plan", str(app / "topology" / "topology.json")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("stage 1\t")
    assert lines[-1] == "connect\tRetrieveData->CustomerDB"
    assert main(["plan", "--json", str(app / "topology" / "topology.json")]) == 0
    assert json.loads(capsys.readouterr().out)["connections"] == [["RetrieveData", "CustomerDB"]]


def test_plan_of_cyclic_topology(tmp_path, capsys):
    topo = _write(tmp_path / "t.json", json.dumps({"id": "t", "nodes": [{"id": "A"}, {"id": "B"}], "edges": [
        {"from": "A", "to": "B", "relation": "hosted_on"}, {"from": "B", "to": "A", "relation": "hosted_on"}]}))
    assert main(["plan", str(topo)]) == 1
    assert "hosted_on_cycle" in capsys.readouterr().err


def test_bench_reservation(tmp_path, capsys):
    assert main(["bench-reservation", "-n", "10", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert (doc["shared"]["makespan_ms"], doc["reserved"]["makespan_ms"], doc["saving_ms"]) == (6000, 1500, 4500)
    assert doc["variables_match"] is True
    assert main(["bench-reservation", "-n", "3", "--csv", str(tmp_path / "m.csv"), "--plot", str(tmp_path / "m.png")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1].split("\t") == ["3", "500", "100", "1800", "800", "1000"]
    assert (tmp_path / "m.csv").is_file() and (tmp_path / "m.png").is_file()


def test_bench_rejects_bad_arguments():
    assert main(["bench-reservation", "-n", "0"]) == 2


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["submit", "-a", "127.0.0.1:1"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["submit", "-a", "x:1", "--workflow", "w", "-p", "novalue"])
    assert err.value.code == 2


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", json.dumps({"clock": "sundial"}))
    assert main(["serve", "-c", str(cfg)]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert main(["serve", "-c", str(_write(tmp_path / "d.json", "{"))]) == 2
    assert main(["serve", "-c", str(tmp_path / "absent.json")]) == 2


def test_unreachable_gateway_is_a_domain_error(capsys):
    assert main(["status", "-a", "127.0.0.1:1", "--timeout", "2", "abc"]) == 1
    assert "cannot reach gateway" in capsys.readouterr().err


# -- against a live server ---------------------------------------------------------


def _serve(config: Path, *extra: str) -> tuple[subprocess.Popen, str]:
    proc = subprocess.Popen([sys.executable, "-m", "duorch.cli", "serve", "-c", str(config), *extra],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    line = proc.stdout.readline()
    if not line.startswith("listening "):
        proc.kill()
        raise AssertionError(f"server did not start: {line!r} {proc.stderr.read()}")
    return proc, line.split()[1]


def _stop(proc: subprocess.Popen) -> None:
    if proc.poll() is None:
        proc.send_signal(signal.SIGTERM)
        try:
            proc.wait(10)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()


@pytest.fixture
def live(tmp_path):
    cfg = _write(tmp_path / "duorch.json", json.dumps({"state_dir": "state", "listen": "127.0.0.1:0"}))
    proc, address = _serve(cfg)
    yield address
    _stop(proc)


def test_submit_status_audit_round_trip(live, tmp_path, capsys, sample_qaa):
    archive = tmp_path / "c.qaa"
    archive.write_bytes(sample_qaa)
    assert main(["submit", "-a", live, "--archive", str(archive), "-p", "k=2", "--json"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["type"] == "RESULT" and result["status"] == "completed"
    assert main(["submit", "-a", live, "--workflow", "pca", "-p", 'covariance=[[1,0],[0,1]]',
                 "-p", "eigenvalues=[1,1]", "-p", "embedding=[[3,4]]"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("instance\t")
    assert "features\t[[3.0, 4.0]]" in out
    assert main(["status", "-a", live, result["instance"]]) == 0
    assert json.loads(capsys.readouterr().out)["status"] == "completed"
    assert main(["audit", "-a", live, "--model", "clustering-main"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0].startswith("instance\tmodel\tstatus")
    assert rows[1].split("\t")[:3] == [result["instance"], "clustering-main", "completed"]


def test_submit_errors_exit_1(live, capsys):
    assert main(["submit", "-a", live, "--workflow", "ghost"]) == 1
    assert "not_deployed" in capsys.readouterr().err
    assert main(["status", "-a", live, "ghost"]) == 1


def test_serve_deploys_configured_apps(tmp_path, capsys):
    qaa = tmp_path / "sort.qaa"
    qaa.write_bytes(pack_dir(minimal_app(tmp_path / "sort")))
    cfg = _write(tmp_path / "c.json", json.dumps({"state_dir": "s", "listen": "127.0.0.1:0", "apps": ["sort.qaa"]}))
    proc, address = _serve(cfg)
    try:
        assert main(["submit", "-a", address, "--workflow", "sort", "-p", 'text="b\\na\\n"', "--json"]) == 0
        assert json.loads(capsys.readouterr().out)["variables"]["text"] == "a\nb\n"
    finally:
        _stop(proc)


# -- crash and restart -------------------------------------------------------------

SLOW = """import time


def step(inputs):
    time.sleep(0.25)
    return {"n": inputs["n"] + 1}
"""


def _slow_app(tmp_path: Path) -> bytes:
    ids = [f"s{i}" for i in range(6)]
    wf = {
        "id": "slow",
        "params": ["n"],
        "activities": [{"id": a, "impl": {"target": "programs/slow.py:step", "topology_node": "Host"},
                        "in": ["n"], "out": ["n"]} for a in ids],
        "edges": [{"from": a, "to": b} for a, b in zip(ids, ids[1:])],
    }
    return pack_dir(minimal_app(tmp_path / "slow", wf, extra_files={"programs/slow.py": SLOW}))


def _completed(log: Path) -> list[str]:
    if not log.exists():
        return []
    out = []
    for line in log.read_text().splitlines():
        try:
            ev = json.loads(line)
        except json.JSONDecodeError:
            continue
        if ev["kind"] == "activity_completed":
            out.append(ev["payload"]["activity"])
    return out


def test_kill_9_mid_run_then_restart_finishes_the_instance(tmp_path):
    cfg = _write(tmp_path / "duorch.json", json.dumps({"state_dir": "state", "listen": "127.0.0.1:0"}))
    proc, address = _serve(cfg)
    try:
        client = Client(address, timeout=30)
        client.send({"id": "crash", "type": "RUN_ARCHIVE", "archive_b64": base64.b64encode(_slow_app(tmp_path)).decode(),
                     "params": {"n": 0}})
        ack = client.receive()
        assert ack["type"] == "ACK"
        log = tmp_path / "state" / "instances" / f"{ack['instance']}.log"
        deadline = time.monotonic() + 20
        while len(_completed(log)) < 2 and time.monotonic() < deadline:
            time.sleep(0.02)
        os.kill(proc.pid, signal.SIGKILL)
        proc.wait()
        client.close()
    finally:
        _stop(proc)
    done_before = _completed(log)
    assert 2 <= len(done_before) < 6
    proc, address = _serve(cfg)
    try:
        deadline = time.monotonic() + 30
        with Client(address, timeout=30) as client:
            while time.monotonic() < deadline:
                reply = client.status(ack["instance"])
                if reply.get("archived"):
                    break
                time.sleep(0.05)
            assert reply["status"] == "completed"
            assert reply["variables"]["n"] == 6
            (summary,) = client.audit("slow")["records"]
    finally:
        _stop(proc)
    assert summary["instance"] == ack["instance"]
    record = json.loads(next((tmp_path / "state" / "audit").rglob(f"{ack['instance']}.json")).read_text())
    started = [e["payload"]["activity"] for e in record["events"] if e["kind"] == "activity_started"]
    for activity in done_before:
        assert started.count(activity) == 1, activity
    assert list((tmp_path / "state" / "instances").iterdir()) == []


def test_stored_archive_is_resumed_after_restart(tmp_path, sample_qaa):
    """An archive accepted but not yet instantiated before a crash is run on restart."""
    state = tmp_path / "state"
    (state / "inbox").mkdir(parents=True)
    (state / "inbox" / "m1.qaa").write_bytes(sample_qaa)
    (state / "inbox" / "m1.json").write_text(json.dumps({"params": {"k": 2}}))
    rt = Runtime(state)
    (iid,) = rt.recover()
    rt.run_until_idle()
    assert rt.status(iid)["status"] == "completed"
    assert [e["step"] for e in rt.steps_of("m1")][:2] == ["store", "unpack"]
    assert list((state / "inbox").iterdir()) == []
