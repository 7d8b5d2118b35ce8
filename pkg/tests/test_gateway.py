from __future__ import annotations

import importlib.util
import json

import pytest

from duorch.archive import pack_dir, write_manifest
from duorch.fixtures import SAMPLE_APP_DIR, minimal_app, sample_archive
from duorch.gateway.config import ConfigError, RuntimeConfig, build_runtime, load_config
from duorch.gateway.policy import ResourcePolicy, decide_reservation
from duorch.gateway.runtime import STEPS, GatewayError, Runtime
from duorch.model import fragment_for, parse_workflow
from duorch.qpusim import LatencyModel

EIGEN = {"hamiltonian": {"I": 0.5, "Z": 0.25, "X": 0.1}}


def _runtime(tmp_path=None, **kw):
    return Runtime(tmp_path / "state" if tmp_path else None, **kw)


def _steps_by_id(rt, message_id):
    return [(e["step"], e["outcome"]) for e in rt.steps_of(message_id)]


def _steps(rt, handle):
    return _steps_by_id(rt, handle.message_id)


def _sorted_archive(tmp_path):
    return pack_dir(minimal_app(tmp_path / "sorter"))


# -- the six deployment steps --------------------------------------------------


def test_run_archive_walks_the_six_steps(tmp_path, sample_qaa):
    rt = _runtime(tmp_path)
    handle = rt.run_archive(sample_qaa, {"dataset": "costumes"})
    result = handle.result()
    assert result["status"] == "completed"
    assert [s for s, _ in _steps(rt, handle)] == list(STEPS)
    assert all(o == "ok" for _, o in _steps(rt, handle))
    assert rt.steps_of(handle.message_id)[4]["instance"] == handle.instance_id
    logged = [json.loads(line) for line in (tmp_path / "state" / "gateway.log").read_text().splitlines()]
    assert [e["step"] for e in logged] == list(STEPS)


def test_one_provisioning_fault_is_retried_once(tmp_path, sample_qaa):
    # four failures outlast the installer's own three retries, so the deployment step retries once
    rt = _runtime(tmp_path, installers={"database": {"kind": "mock", "fail_times": 4}})
    handle = rt.run_archive(sample_qaa)
    assert handle.result()["status"] == "completed"
    assert [s for s, _ in _steps(rt, handle)] == ["store", "unpack", "provision", "provision", "env_ready",
                                                  "instantiate", "execute"]
    assert [o for s, o in _steps(rt, handle) if s == "provision"] == ["retry", "ok"]


def test_persistent_provisioning_fault_fails_the_deployment(tmp_path, sample_qaa):
    rt = _runtime(tmp_path, installers={"database": {"kind": "mock", "fail_nodes": ["DB2"]}}, deploy_retries=1)
    with pytest.raises(GatewayError) as err:
        rt.run_archive(sample_qaa, message_id="m1")
    assert err.value.code == "provisioning_failed"
    assert "DB2" in err.value.detail
    assert [o for s, o in _steps_by_id(rt, "m1") if s == "provision"] == ["retry", "failed"]
    assert list((tmp_path / "state" / "inbox").iterdir()) == []


def test_corrupt_archive_leaves_no_residue(tmp_path, sample_qaa):
    rt = _runtime(tmp_path)
    damaged = bytearray(sample_qaa)
    damaged[len(damaged) // 3] ^= 0xFF
    with pytest.raises(GatewayError) as err:
        rt.run_archive(bytes(damaged))
    assert err.value.code == "invalid_archive"
    assert rt.gateway_log == []
    assert rt.apps == {}
    for sub in ("inbox", "apps", "environments", "runs", "instances"):
        d = tmp_path / "state" / sub
        assert not d.exists() or list(d.iterdir()) == []


def test_run_of_unknown_workflow(tmp_path):
    rt = _runtime(tmp_path)
    with pytest.raises(GatewayError) as err:
        rt.run("nothing-here")
    assert err.value.code == "not_deployed"
    with pytest.raises(GatewayError) as err:
        rt.run("")
    assert err.value.code == "bad_params"


def test_bad_parameters_are_rejected_before_execution(tmp_path):
    rt = _runtime(tmp_path)
    rt.deploy(_sorted_archive(tmp_path))
    with pytest.raises(GatewayError) as err:
        rt.run("sort", {})
    assert err.value.code == "bad_params"
    assert "missing parameter text" in err.value.detail
    assert rt.engine.instances() == []


def test_run_after_deploy(tmp_path):
    rt = _runtime(tmp_path)
    rt.deploy(_sorted_archive(tmp_path), message_id="d1")
    assert [s for s, _ in _steps_by_id(rt, "d1")] == ["store", "unpack", "provision", "env_ready"]
    result = rt.run("sort", {"text": "b\na\n"}).result()
    assert result["variables"]["text"] == "a\nb\n"
    (rec,) = rt.audit(model="sort")
    assert rec.status == "completed"
    assert rt.status(result["instance"])["archived"] is True


def test_status_of_unknown_instance(tmp_path):
    with pytest.raises(GatewayError) as err:
        _runtime(tmp_path).status("ghost")
    assert err.value.code == "unknown_instance"


# -- environment lifecycle -----------------------------------------------------


def test_keep_alive_reuses_the_environment(tmp_path, sample_qaa):
    rt = _runtime(tmp_path)
    rt.run_archive(sample_qaa).result()
    prov = rt.apps["clustering"].provisioner
    calls = prov.installer_calls
    assert calls == 11
    second = rt.run_archive(sample_qaa)
    assert second.result()["status"] == "completed"
    assert prov.installer_calls == calls
    assert rt.steps_of(second.message_id)[1]["reused"] is True
    assert rt.installed_nodes("clustering") == set(rt.apps["clustering"].application.topology.node_ids)


def test_per_run_environment_is_torn_down_after_each_run(tmp_path):
    rt = _runtime(tmp_path, policy=ResourcePolicy(lifecycle="per_run"))
    qaa = sample_archive(tmp_path / "src")
    for n in (1, 2):
        assert rt.run_archive(qaa).result()["status"] == "completed"
        prov = rt.apps["clustering"].provisioner
        assert prov.state.installed == set()
        installs = [e for e in prov.log if e["action"] == "install" and e["outcome"] == "ok"]
        removals = [e for e in prov.log if e["action"] == "uninstall" and e["outcome"] == "ok"]
        assert len(installs) == len(removals) == 11 * n


def test_per_run_from_manifest_overrides_the_default(tmp_path):
    rt = _runtime(tmp_path)
    qaa = sample_archive(tmp_path / "src", lifecycle="per_run")
    rt.run_archive(qaa).result()
    assert rt.apps["clustering"].lifecycle == "per_run"
    assert rt.apps["clustering"].lazy
    assert rt.installed_nodes("clustering") == set()


def test_lazy_provisioning_never_dispatches_into_a_missing_environment(tmp_path, sample_qaa):
    lazy = _runtime(tmp_path / "lazy", policy=ResourcePolicy(provisioning="lazy"))
    result = lazy.run_archive(sample_qaa).result()
    assert result["status"] == "completed"
    assert lazy.dispatcher.violations == 0
    assert lazy.dispatcher.dispatched > 0
    eager = _runtime(tmp_path / "eager", policy=ResourcePolicy(provisioning="eager"))
    eager.run_archive(sample_qaa).result()
    app = lazy.apps["clustering"].application
    fragments = set()
    for model in app.workflows.values():
        for a in model.activities:
            if a.implementation.topology_node:
                fragments |= fragment_for(model, app.topology, a.id).node_ids
    assert lazy.installed_nodes("clustering") == fragments == eager.installed_nodes("clustering")
    assert [e["mode"] for e in lazy.gateway_log if e["step"] == "provision"] == ["plan"]


def test_lazy_installs_follow_first_use(tmp_path, sample_qaa):
    rt = _runtime(tmp_path, policy=ResourcePolicy(provisioning="lazy"))
    rt.run_archive(sample_qaa).result()
    prov = rt.apps["clustering"].provisioner
    first = [e["node"] for e in prov.log if e["action"] == "install" and e["outcome"] == "ok"]
    # the data retrieval fragment comes first, the QPU fragment with the first quantum activity
    assert set(first[:7]) == {"VM", "Server", "Linux", "JVM", "DB2", "CustomerDB", "RetrieveData"}
    assert first.index("QPUAccess") > first.index("StubPrograms")


def test_dispatch_guard_is_enforced(tmp_path, sample_qaa):
    rt = _runtime(tmp_path, policy=ResourcePolicy(provisioning="lazy"))
    rt.deploy(sample_qaa)
    dep = rt.apps["clustering"]
    handle = rt.run("compute-eigenvalue", EIGEN)
    # sabotage on-demand provisioning: the guard must refuse rather than run blind
    dep.provisioner.provision_fragment = lambda *a, **k: dep.provisioner.state
    result = handle.result()
    assert result["status"] == "failed"
    assert rt.dispatcher.violations == 1
    assert "not provisioned" in result["errors"][0]


# -- QPU reservation -------------------------------------------------------------


def _eigen_record(tmp_path, sample_qaa, reservation, **kw):
    rt = _runtime(tmp_path / reservation, policy=ResourcePolicy(qpu_reservation=reservation), **kw)
    rt.deploy(sample_qaa)
    result = rt.run("compute-eigenvalue", EIGEN).result()
    (rec,) = rt.audit(instance=result["instance"])
    return rt, rec


def test_reservation_leaves_results_unchanged(tmp_path, sample_qaa):
    off_rt, off = _eigen_record(tmp_path, sample_qaa, "off")
    auto_rt, auto = _eigen_record(tmp_path, sample_qaa, "auto")
    assert off.variables == auto.variables
    assert off_rt.qpu.stats()["sessions"] == 0
    assert auto_rt.qpu.stats()["sessions"] == 1
    jobs = len(auto.activities["execute_circuit"])
    assert jobs > 1
    # every job but the first skips the queue
    assert (off.finished_at - off.started_at) - (auto.finished_at - auto.started_at) == (jobs - 1) * 500


def test_full_run_results_equal_under_both_policies(tmp_path, sample_qaa):
    results = []
    for reservation in ("off", "auto"):
        rt = _runtime(tmp_path / reservation, policy=ResourcePolicy(qpu_reservation=reservation))
        results.append(rt.run_archive(sample_qaa).result()["variables"])
    assert results[0] == results[1]


def test_session_opens_and_closes_once_per_loop(tmp_path, sample_qaa):
    rt, rec = _eigen_record(tmp_path, sample_qaa, "auto")
    assert [d["event"] for d in rt.decisions] == ["session_open", "session_close"]
    session = rt.qpu.sessions[0]
    assert not session.open
    assert session.holder == rec.instance_id


def test_acyclic_workflow_never_reserves(tmp_path, sample_qaa):
    rt = _runtime(tmp_path)
    rt.deploy(sample_qaa)
    result = rt.run("pca", {"covariance": [[1.0, 0.0], [0.0, 0.5]], "eigenvalues": [1.0, 0.5],
                            "embedding": [[1.0, 2.0]]}).result()
    assert result["variables"]["features"] == [[1.0, 2.0]]
    assert rt.qpu.sessions == []
    assert rt.decisions == []


def test_second_loop_falls_back_to_the_shared_queue(tmp_path, sample_qaa):
    rt = _runtime(tmp_path)
    rt.deploy(sample_qaa)
    first = rt.run("compute-eigenvalue", EIGEN)
    second = rt.run("compute-eigenvalue", EIGEN)
    a, b = first.result(), second.result()
    assert a["status"] == b["status"] == "completed"
    assert a["variables"] == b["variables"]
    events = [(d["event"], d["instance"]) for d in rt.decisions]
    assert events[0] == ("session_open", first.instance_id)
    assert ("fallback_shared", second.instance_id) in events
    assert [s.holder for s in rt.qpu.sessions] == [first.instance_id]


def test_run_scope_holds_the_session_until_the_instance_ends(tmp_path, sample_qaa):
    rt = _runtime(tmp_path, policy=ResourcePolicy(reservation_scope="run"))
    rt.deploy(sample_qaa)
    result = rt.run("compute-eigenvalue", EIGEN).result()
    (rec,) = rt.audit(instance=result["instance"])
    report = rec.activities["report_eigenvalue"][0]
    assert rt.qpu.sessions[0].closed_at >= report["finished"]


def test_reservation_directives():
    model = parse_workflow((SAMPLE_APP_DIR / "workflows" / "compute-eigenvalue.json").read_bytes())
    (d,) = decide_reservation(model, ResourcePolicy())
    assert d.open_on == {"execute_circuit"}
    assert [(model.edges[i].source, model.edges[i].target) for i in d.close_on] == [("optimize_parameters", "execute_circuit")]
    assert decide_reservation(model, ResourcePolicy(qpu_reservation="off")) == []
    main = parse_workflow((SAMPLE_APP_DIR / "workflows" / "clustering-main.json").read_bytes())
    assert decide_reservation(main, ResourcePolicy()) == []


def test_policy_rejects_unknown_values():
    with pytest.raises(ValueError, match="lifecycle"):
        ResourcePolicy(lifecycle="forever")
    with pytest.raises(ValueError, match="unknown policy keys"):
        ResourcePolicy.from_dict({"colour": "red"})


# -- data flow through the whole application -------------------------------------


def _stubs(name):
    spec = importlib.util.spec_from_file_location(name, SAMPLE_APP_DIR / "programs" / "classical" / f"{name}.py")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_classical_stages_compose_like_direct_calls(tmp_path, sample_qaa):
    """Chain the stub programs by hand and compare with what the engine produced."""
    rt = _runtime(tmp_path)
    final = rt.run_archive(sample_qaa, {"dataset": "costumes", "k": 3}).result()["variables"]
    prep, feat, clus = _stubs("data_preparation"), _stubs("features"), _stubs("clustering")
    v = prep.retrieve_data({"dataset": "costumes"}, {"root": str(SAMPLE_APP_DIR)})
    v |= prep.compute_distances(v)
    v |= prep.normalize(v)
    v |= feat.covariance(v)
    v |= feat.pauli_terms(v)
    for key in ("points", "labels", "distances", "embedding", "scale", "covariance", "hamiltonian"):
        assert final[key] == v[key], key
    # the quantum stages are taken from the run; the classical tail is recomputed
    v["eigenvalues"] = final["eigenvalues"]
    v |= feat.select_components(v)
    v |= feat.project(v)
    assert final["features"] == v["features"]
    v |= clus.assign_clusters({"cut": final["cut"], "features": v["features"], "k": 3})
    assert final["cluster_assignment"] == v["cluster_assignment"]
    assert final["clusters"] == 3


def test_sample_run_is_reproducible(tmp_path, sample_qaa):
    first = _runtime(tmp_path / "a").run_archive(sample_qaa).result()["variables"]
    second = _runtime(tmp_path / "b").run_archive(sample_qaa).result()["variables"]
    assert first == second


def test_phases_run_in_order(tmp_path, sample_qaa):
    rt = _runtime(tmp_path)
    result = rt.run_archive(sample_qaa).result()
    (rec,) = rt.audit(instance=result["instance"])
    model = rt.apps["clustering"].application.entry
    order = [ev["payload"]["activity"] for ev in rec.events if ev["kind"] == "activity_started"]
    phases = [model.activity(a).annotations.get("phase") for a in order]
    assert phases == sorted(phases, key=["data_preparation", "feature_engineering", "clustering"].index)
    assert phases[0] == "data_preparation" and phases[-1] == "clustering"


def test_subworkflow_failure_fails_the_parent(tmp_path):
    wf = {"id": "parent", "activities": [{"id": "child", "kind": "subworkflow", "impl": {"target": "boom"}}]}
    app = minimal_app(tmp_path / "app", wf)
    (app / "workflows" / "boom.json").write_text(json.dumps({
        "id": "boom", "activities": [{"id": "f", "impl": {"target": "builtin:fail", "topology_node": "Host"}}]}))
    manifest = json.loads((app / "manifest.json").read_text())
    manifest["workflows"].append("workflows/boom.json")
    (app / "manifest.json").write_text(json.dumps(manifest))
    write_manifest(app)
    rt = _runtime(tmp_path)
    result = rt.run_archive(pack_dir(app)).result()
    assert result["status"] == "failed"
    assert "sub-workflow boom failed" in result["errors"][0]
    assert {r.model_id: r.status for r in rt.audit()} == {"parent": "failed", "boom": "failed"}


# -- configuration -------------------------------------------------------------


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "duorch.json"
    path.write_text(json.dumps({"state_dir": "st", "qpu": {"queue_wait_ms": 50, "seed": 3},
                                "policy": {"lifecycle": "per_run"}, "retries": {"deploy": 1}}))
    cfg = load_config(path)
    assert cfg.state_dir == str(tmp_path / "st")
    assert cfg.latency() == LatencyModel(50, 100, 0)
    rt = build_runtime(cfg)
    assert rt.policy.lifecycle == "per_run"
    assert rt.deploy_retries == 1
    assert rt.qpu.seed == 3


@pytest.mark.parametrize("doc, message", [
    ({"clock": "sundial"}, "clock"),
    ({"colour": 1}, "unknown configuration keys"),
    ({"qpu": {"speed": 1}}, "unknown qpu keys"),
    ({"qpu": {"queue_wait_ms": -5}}, "queue_wait_ms"),
    ({"policy": {"qpu_reservation": "always"}}, "qpu_reservation"),
    ({"installers": {"x": {"kind": "ftp"}}}, "unknown kind"),
    ({"max_deployments": 0}, "max_deployments"),
])
def test_bad_configuration(doc, message):
    with pytest.raises(ConfigError, match=message):
        RuntimeConfig.from_dict(doc)


def test_unreadable_configuration(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{oops")
    with pytest.raises(ConfigError, match="invalid JSON at line 1"):
        load_config(path)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.json")
