"""REST control surface: instance CRUD, aspects, state, callbacks, subscriptions."""

from __future__ import annotations

import time

import pytest
from fastapi.testclient import TestClient

from procflow.engine import EngineConfig
from procflow.protocol import LocalTransport, TransportResponse
from procflow.runtime import EngineRuntime
from procflow.server import build_app

from conftest import model_doc, register_echo


@pytest.fixture
def client():
    transport = LocalTransport()
    register_echo(transport)
    runtime = EngineRuntime(config=EngineConfig(retry_delay=0.01),
                            transport=transport)
    with TestClient(build_app(runtime)) as c:
        c.runtime = runtime
        c.transport = transport
        yield c
    runtime.shutdown()


def simple_doc():
    return model_doc({"id": "root", "kind": "sequence", "children": [
        {"id": "m", "kind": "manipulate",
         "scripts": {"finalize": "data.x = 41 + 1"}}]})


def wait_state(client, iid, state, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if client.get(f"/instances/{iid}/state").json()["state"] == state:
            return True
        time.sleep(0.02)
    return False


def test_instance_creation_and_listing(client):
    resp = client.post("/instances")
    assert resp.status_code == 201
    doc = resp.json()
    assert doc["id"] == 1 and doc["uuid"]
    assert resp.headers["Location"].endswith("/instances/1")
    assert client.post("/instances").json()["id"] == 2
    listing = client.get("/instances").json()
    assert [i["id"] for i in listing] == [1, 2]
    assert all(i["state"] == "ready" for i in listing)


def test_unknown_instance_404(client):
    assert client.get("/instances/99").status_code == 404
    assert client.put("/instances/99/state",
                      json={"state": "running"}).status_code == 404


def test_model_load_and_full_run(client):
    iid = client.post("/instances").json()["id"]
    assert client.put(f"/instances/{iid}/model",
                      json=simple_doc()).status_code == 200
    assert client.get(f"/instances/{iid}/model").json()["root"]["id"] == "root"
    resp = client.put(f"/instances/{iid}/state", json={"state": "running"})
    assert resp.status_code == 200
    assert wait_state(client, iid, "finished")
    assert client.get(f"/instances/{iid}/dataelements").json() == {"x": 42}


def test_invalid_model_rejected_with_node_names(client):
    iid = client.post("/instances").json()["id"]
    bad = {"root": {"id": "root", "kind": "sequence", "children": [
        {"id": "c", "kind": "call"}]}}
    resp = client.put(f"/instances/{iid}/model", json=bad)
    assert resp.status_code == 400
    assert any("c" in e for e in resp.json()["errors"])


def test_state_rules(client):
    iid = client.post("/instances").json()["id"]
    # finished is never settable
    resp = client.put(f"/instances/{iid}/state", json={"state": "finished"})
    assert resp.status_code == 400
    resp = client.put(f"/instances/{iid}/state", json={"state": "flying"})
    assert resp.status_code == 400
    # same-state is idempotent
    client.put(f"/instances/{iid}/model", json=simple_doc())
    client.put(f"/instances/{iid}/state", json={"state": "running"})
    wait_state(client, iid, "finished")
    # illegal transitions are conflicts
    resp = client.put(f"/instances/{iid}/state", json={"state": "running"})
    assert resp.status_code == 409


def test_abandon_and_purge(client):
    iid = client.post("/instances").json()["id"]
    assert client.put(f"/instances/{iid}/state",
                      json={"state": "abandoned"}).status_code == 200
    assert client.put(f"/instances/{iid}/state",
                      json={"state": "purged"}).status_code == 200
    assert client.get(f"/instances/{iid}").status_code == 404


def test_delete_purges_abandoned(client):
    iid = client.post("/instances").json()["id"]
    client.put(f"/instances/{iid}/state", json={"state": "abandoned"})
    assert client.delete(f"/instances/{iid}").status_code == 200
    assert client.get(f"/instances/{iid}").status_code == 404


def test_context_patching(client):
    iid = client.post("/instances").json()["id"]
    resp = client.patch(f"/instances/{iid}/dataelements",
                        json={"a": 1, "b": "two"})
    assert resp.status_code == 200
    assert resp.json()["added"] == {"a": 1, "b": "two"}
    resp = client.patch(f"/instances/{iid}/dataelements",
                        json={"change": {"a": 5}, "delete": ["b"]})
    assert resp.json()["changed"] == {"a": {"from": 1, "to": 5}}
    assert client.get(f"/instances/{iid}/dataelements").json() == {"a": 5}
    resp = client.patch(f"/instances/{iid}/dataelements",
                        json={"change": {"nope": 1}})
    assert resp.status_code == 400
    assert client.patch(f"/instances/{iid}/nonsense", json={}).status_code == 404


def test_context_mutation_requires_resting_state(client):
    # a model whose activity never answers keeps the instance running
    block = {"root": {"id": "root", "kind": "sequence", "children": [
        {"id": "a", "kind": "call", "endpoint_key": "svc"}]},
        "endpoints": {"svc": "http://svc/hang"}}
    client.transport.register(
        "http://svc/hang",
        lambda *a: TransportResponse(200, {"CPEE-CALLBACK": "true"}, None))
    iid = client.post("/instances").json()["id"]
    client.put(f"/instances/{iid}/model", json=block)
    client.put(f"/instances/{iid}/state", json={"state": "running"})
    time.sleep(0.2)
    resp = client.patch(f"/instances/{iid}/dataelements", json={"a": 1})
    assert resp.status_code == 409
    resp = client.put(f"/instances/{iid}/model", json=simple_doc())
    assert resp.status_code == 409


def test_positions_aspect_validation(client):
    iid = client.post("/instances").json()["id"]
    client.put(f"/instances/{iid}/model", json=simple_doc())
    resp = client.patch(f"/instances/{iid}/positions",
                        json=[{"node_id": "m", "mode": "at"}])
    assert resp.status_code == 200
    assert client.get(f"/instances/{iid}/positions").json() == \
        [{"node_id": "m", "mode": "at"}]
    resp = client.patch(f"/instances/{iid}/positions",
                        json=[{"node_id": "ghost", "mode": "at"}])
    assert resp.status_code == 400
    resp = client.patch(f"/instances/{iid}/positions",
                        json=[{"node_id": "root", "mode": "at"}])
    assert resp.status_code == 400   # 'at' only on activities


def test_callback_endpoint(client):
    captured = {}
    client.transport.register(
        "http://svc/wait",
        lambda method, url, headers, body:
            (captured.update(cb=headers["CPEE-CALLBACK-ID"]),
             TransportResponse(200, {"CPEE-CALLBACK": "true"}, None))[1])
    doc = model_doc({"id": "root", "kind": "sequence", "children": [
        {"id": "a", "kind": "call", "endpoint_key": "svc",
         "scripts": {"finalize": "data.got = result.v"}}]},
        endpoints={"svc": "http://svc/wait"})
    iid = client.post("/instances").json()["id"]
    client.put(f"/instances/{iid}/model", json=doc)
    client.put(f"/instances/{iid}/state", json={"state": "running"})
    deadline = time.monotonic() + 5
    while "cb" not in captured and time.monotonic() < deadline:
        time.sleep(0.01)
    cb = captured["cb"]
    resp = client.put(f"/instances/{iid}/callbacks/{cb}", json={"v": 7})
    assert resp.status_code == 200
    assert wait_state(client, iid, "finished")
    assert client.get(f"/instances/{iid}/dataelements").json() == {"got": 7}
    # post-final PUT: the callback is gone
    assert client.put(f"/instances/{iid}/callbacks/{cb}",
                      json={}).status_code == 404


def test_subscription_crud(client):
    resp = client.post("/subscriptions", json={
        "selections": [{"topic": "state", "event": "*"}]})
    assert resp.status_code == 201
    sub = resp.json()
    assert sub["mode"] == "sse"
    assert sub["sse_url"].endswith(f"/subscriptions/{sub['id']}/sse")
    assert client.get(f"/subscriptions/{sub['id']}").status_code == 200
    assert any(s["id"] == sub["id"]
               for s in client.get("/subscriptions").json())
    assert client.delete(f"/subscriptions/{sub['id']}").status_code == 200
    assert client.get(f"/subscriptions/{sub['id']}").status_code == 404
    resp = client.post("/subscriptions", json={
        "selections": [{"topic": "bogus"}]})
    assert resp.status_code == 400


def test_instance_document_shape(client):
    iid = client.post("/instances").json()["id"]
    doc = client.get(f"/instances/{iid}").json()
    for key in ("id", "uuid", "url", "state", "status", "positions",
                "dataelements", "endpoints", "attributes", "subprocesses"):
        assert key in doc
    assert doc["status"] == {"code": 0, "text": "ok"}
