from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given, settings

import oracles
from conftest import make_topology as _topo
from conftest import topologies
from duorch.fixtures import FIG3_NODES, diamond_workflow, fig3_topology
from duorch.model import (
    ModelError,
    Relation,
    TopologyModel,
    fragment_for,
    fragment_of_node,
    parse_topology,
    serialize_topology,
    topology_from_dict,
    validate_topology,
)
from duorch.provisioner import plan


def test_fig3_is_valid():
    topo = fig3_topology()
    assert validate_topology(topo) == []
    assert sorted(topo.node_ids) == sorted(FIG3_NODES)
    assert len(topo.edges_of(Relation.HOSTED_ON)) == 5
    assert len(topo.edges_of(Relation.CONNECTS_TO)) == 1


def test_hosted_on_cycle():
    diags = validate_topology(_topo("AB", hosted=[("A", "B"), ("B", "A")]))
    assert [d.code for d in diags] == ["hosted_on_cycle"]
    assert "hosted_on cycle" in diags[0].message


def test_connects_to_cycle_is_allowed():
    assert validate_topology(_topo("AB", connects=[("A", "B"), ("B", "A")])) == []


def test_empty_topology():
    assert validate_topology(_topo("")) == []


def test_unknown_node_and_relation():
    assert [d.code for d in validate_topology(_topo("A", hosted=[("A", "Z")]))] == ["unknown_node"]
    with pytest.raises(ModelError) as err:
        topology_from_dict({"nodes": [{"id": "A"}], "edges": [{"from": "A", "to": "A", "relation": "depends_on"}]})
    assert [d.code for d in err.value.diagnostics] == ["bad_relation"]


def test_serialize_round_trip(sample_dir):
    for topo in (fig3_topology(), parse_topology((sample_dir / "topology" / "topology.json").read_bytes())):
        assert parse_topology(serialize_topology(topo)) == topo


# -- fragments ---------------------------------------------------------------


def test_fragment_of_retrieve_data_is_whole_fig3():
    assert fragment_of_node(fig3_topology(), "RetrieveData") == set(FIG3_NODES)


def test_fragment_of_database_stays_below_it():
    assert fragment_of_node(fig3_topology(), "CustomerDB") == {"CustomerDB", "DB2", "Linux", "VM"}


def test_leaf_fragment():
    assert fragment_of_node(_topo("AB"), "A") == {"A"}


def test_three_node_chain_fragment():
    topo = _topo(["node", "X", "Y"], hosted=[("node", "X"), ("X", "Y")])
    succ = {"node": {"X"}, "X": {"Y"}}
    assert fragment_of_node(topo, "node") == oracles.reachable("node", succ) == {"node", "X", "Y"}


def test_fragment_for_activity_without_binding():
    wf = diamond_workflow()
    topo = _topo(["Host"])
    assert fragment_for(wf, topo, "A").node_ids == {"Host"}
    a = wf.activity("A")
    unbound = replace(wf, activities=(replace(a, implementation=replace(a.implementation, topology_node=None)),))
    with pytest.raises(ValueError, match="no topology binding"):
        fragment_for(unbound, topo, "A")


def _oracle_fragment(topo, node):
    host = {n: set(topo.hosted_on(n)) for n in topo.node_ids}
    both = {n: set(topo.hosted_on(n)) | set(topo.connects_to(n)) for n in topo.node_ids}
    # everything reachable over either relation, then closed under hosting
    return set().union(*(oracles.reachable(m, host) for m in oracles.reachable(node, both)))


@settings(max_examples=200, deadline=None)
@given(topologies())
def test_fragment_matches_reachability_oracle_and_is_a_fixed_point(topo):
    for node in topo.node_ids:
        frag = fragment_of_node(topo, node)
        assert frag == _oracle_fragment(topo, node)
        for member in frag:
            assert fragment_of_node(topo, member) <= frag
        for member in frag:
            assert set(topo.hosted_on(member)) <= frag


# -- plans -------------------------------------------------------------------


def test_fig3_plan():
    p = plan(fig3_topology())
    assert [set(s) for s in p.stages] == [{"Server", "VM"}, {"JVM", "Linux"}, {"DB2"}, {"CustomerDB"}, {"RetrieveData"}]
    assert p.connections == (("RetrieveData", "CustomerDB"),)


def test_single_node_plan():
    p = plan(_topo("A"))
    assert p.stages == (("A",),)
    assert p.connections == ()


def test_empty_plan():
    assert plan(_topo("")).stages == ()


def test_plan_is_sorted_within_stages():
    p = plan(_topo("DCBA"))
    assert p.stages == (("A", "B", "C", "D"),)


def test_mutual_connections_do_not_deadlock_the_plan():
    p = plan(_topo("AB", connects=[("A", "B"), ("B", "A")]))
    assert p.stages == (("B",), ("A",))
    assert set(p.connections) == {("A", "B"), ("B", "A")}


@settings(max_examples=300, deadline=None)
@given(topologies())
def test_plan_respects_every_dependency(topo):
    p = plan(topo)
    assert sorted(p.nodes) == sorted(topo.node_ids)
    for e in topo.edges_of(Relation.HOSTED_ON):
        assert p.stage_of(e.target) < p.stage_of(e.source)
    assert set(p.connections) == {(e.source, e.target) for e in topo.edges_of(Relation.CONNECTS_TO)}
    for stage in p.stages:
        assert list(stage) == sorted(stage)


@settings(max_examples=300, deadline=None)
@given(topologies())
def test_hosting_only_plan_equals_brute_force_levels(topo):
    hosting = TopologyModel(topo.id, topo.nodes, tuple(topo.edges_of(Relation.HOSTED_ON)))
    levels = oracles.dependency_levels(hosting.node_ids, {n: set(hosting.hosted_on(n)) for n in hosting.node_ids})
    p = plan(hosting)
    assert {n: p.stage_of(n) for n in hosting.node_ids} == levels


def test_plan_of_subset():
    p = plan(fig3_topology(), {"CustomerDB", "DB2", "Linux", "VM"})
    assert p.stages == (("VM",), ("Linux",), ("DB2",), ("CustomerDB",))
    assert p.connections == ()
