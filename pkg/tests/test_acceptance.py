"""Acceptance gate: one test per acceptance criterion, each printing a
pass/fail line.  Criteria cover lifecycle legality, activity event grammar,
vote combination, the asynchronous answer protocol, stop-drain semantics,
enactment identifiers, the repair scenario, worklist strategies, log
completeness at scale, and cross-engine sub-processes."""

from __future__ import annotations

import contextlib
import random
import re
import threading
import time

import pytest
import requests

from procflow.engine import EngineConfig, IllegalTransition
from procflow.protocol import LocalTransport, TransportResponse
from procflow.runtime import EngineRuntime
from procflow.server import ServerHandle
from procflow.services.extras import spawn_subprocess
from procflow.services.logger import attach_logger

from conftest import (EventCollector, free_port, make_local_runtime,
                      model_doc, register_echo, run_to_completion)


@contextlib.contextmanager
def criterion(capsys, number: int, title: str):
    try:
        yield
    except BaseException:
        with capsys.disabled():
            print(f"[FAIL] criterion {number}: {title}")
        raise
    with capsys.disabled():
        print(f"[PASS] criterion {number}: {title}")


def http_engine(transport=None, **overrides):
    port = free_port()
    root = f"http://127.0.0.1:{port}"
    config = EngineConfig(base_url=f"{root}/instances", retry_delay=0.01,
                          **overrides)
    runtime = EngineRuntime(config=config, transport=transport,
                            server_root=root)
    handle = ServerHandle(runtime, port=port)
    handle.start()
    return runtime, handle, root


# -- criterion 1 --------------------------------------------------------------

def test_criterion_1_instance_fsm_conformance(capsys):
    with criterion(capsys, 1, "instance lifecycle legality is exhaustive"):
        from procflow.engine import Engine
        oracle = {
            ("ready", "running", "command"),
            ("ready", "abandoned", "command"),
            ("running", "stopping", "command"),
            ("running", "stopping", "error"),
            ("running", "finished", "completion"),
            ("running", "purged", "command"),
            ("stopping", "stopped", "completion"),
            ("stopped", "running", "command"),
            ("stopped", "abandoned", "command"),
            ("abandoned", "purged", "command"),
        }
        states = ("ready", "running", "stopping", "stopped", "finished",
                  "abandoned", "purged")
        started = time.monotonic()
        engine = Engine(config=EngineConfig())
        for current in states:
            for target in states:
                for cause in ("command", "error", "completion"):
                    instance = engine.create_instance()
                    instance.state = current
                    if (current, target, cause) in oracle:
                        assert engine.transition(instance, target, cause) \
                            == target
                    else:
                        with pytest.raises(IllegalTransition):
                            engine.transition(instance, target, cause)
                        assert instance.state == current
        assert time.monotonic() - started < 1.0


# -- criterion 2 --------------------------------------------------------------

EVENT_GRAMMAR = re.compile(
    r"^calling( receiving manipulating)+( failed)? status done$")


def _random_model(rng: random.Random, runtime):
    """Random tree, depth <= 4, <= 20 activities, over scripted services."""
    ids = [0]
    budget = [rng.randint(1, 20)]
    data = {}

    def fresh(prefix):
        ids[0] += 1
        return f"{prefix}{ids[0]}"

    def activity():
        budget[0] -= 1
        kind = rng.choice(["sync", "sync", "async", "failing"])
        if kind == "failing":
            return {"id": fresh("a"), "kind": "call", "endpoint_key": "svc",
                    "scripts": {"finalize": "data.x = data.absent_name",
                                "rescue": "status(0, 'ignored')"}}
        key = "svc" if kind == "sync" else "asvc"
        return {"id": fresh("a"), "kind": "call", "endpoint_key": key}

    def tree(depth):
        if depth <= 0 or budget[0] <= 1 or rng.random() < 0.4:
            return activity()
        kind = rng.choice(["sequence", "parallel", "choose", "loop"])
        if kind == "sequence":
            return {"id": fresh("s"), "kind": "sequence",
                    "children": [tree(depth - 1)
                                 for _ in range(rng.randint(1, 2))]}
        if kind == "parallel":
            branches = [{"id": fresh("b"), "kind": "parallel_branch",
                         "children": [tree(depth - 1)]}
                        for _ in range(rng.randint(1, 2))]
            return {"id": fresh("p"), "kind": "parallel", "wait": "all",
                    "children": branches}
        if kind == "choose":
            return {"id": fresh("c"), "kind": "choose", "children": [
                {"id": fresh("alt"), "kind": "alternative",
                 "condition": rng.choice(["true", "false"]),
                 "children": [tree(depth - 1)]},
                {"id": fresh("oth"), "kind": "otherwise",
                 "children": [tree(depth - 1)]}]}
        var = fresh("v")
        data[var] = 0
        iterations = rng.randint(1, 2)
        return {"id": fresh("l"), "kind": "loop",
                "condition": f"data.{var} < {iterations}",
                "children": [
                    {"id": fresh("m"), "kind": "manipulate",
                     "scripts": {"finalize":
                                 f"data.{var} = data.{var} + 1"}},
                    activity()]}

    root = {"id": "root", "kind": "sequence", "children": [tree(3)]}
    return model_doc(root, endpoints={"svc": "http://svc/echo",
                                      "asvc": "http://svc/async"},
                     dataelements=data)


def test_criterion_2_activity_event_grammar(capsys):
    with criterion(capsys, 2, "1000 random models obey the activity "
                              "event grammar"):
        rng = random.Random(2024)
        runtime, transport = make_local_runtime()
        register_echo(transport)
        engine = runtime.engine

        def async_svc(method, url, headers, body):
            cb = headers["CPEE-CALLBACK-ID"]
            def answer():
                for i in range(rng.randint(0, 2)):
                    engine.callbacks.deliver(cb, {"i": i}, update=True)
                engine.callbacks.deliver(cb, {"done": True}, update=False)
            threading.Thread(target=answer, daemon=True).start()
            return TransportResponse(200, {"CPEE-CALLBACK": "true"}, None)

        transport.register("http://svc/async", async_svc)
        collector = EventCollector(runtime)
        started = time.monotonic()
        try:
            for _ in range(1000):
                document = _random_model(rng, runtime)
                instance = run_to_completion(runtime, document)
                assert instance.state == "finished", instance.state
                sequences: dict[str, list[str]] = {}
                for m in collector.of_topic("activity", instance.id):
                    sequences.setdefault(m.payload["enactment"],
                                         []).append(m.event)
                for enactment, events in sequences.items():
                    if events[0] != "calling":
                        continue   # manipulate activities use a shorter form
                    assert EVENT_GRAMMAR.match(" ".join(events)), \
                        (enactment, events)
        finally:
            runtime.shutdown()
        assert time.monotonic() - started < 60.0


# -- criterion 3 --------------------------------------------------------------

def test_criterion_3_vote_combination_oracle(capsys):
    with criterion(capsys, 3, "vote combination equals the rule-table "
                              "oracle on all small multisets"):
        from procflow.votes import combine_votes
        from test_votes import ALPHABET, all_multisets, oracle
        for combo in all_multisets(3):
            responses = [ALPHABET[k] for k in combo]
            assert combine_votes(responses) == oracle(responses), combo


# -- criterion 4 --------------------------------------------------------------

def test_criterion_4_async_update_protocol(capsys):
    with criterion(capsys, 4, "N update answers run the update script N "
                              "times before one finalize"):
        transport = LocalTransport()
        captured = {}

        def async_svc(method, url, headers, body):
            captured["url"] = headers["CPEE-CALLBACK"]
            return TransportResponse(200, {"CPEE-CALLBACK": "true"}, None)

        transport.register("http://svc/async", async_svc)
        runtime, handle, root = http_engine(transport=transport)
        engine = runtime.engine
        try:
            for n in range(11):
                captured.clear()
                doc = model_doc(
                    {"id": "root", "kind": "sequence", "children": [
                        {"id": "a", "kind": "call", "endpoint_key": "svc",
                         "scripts": {
                             "update": "data.updates = data.updates + 1",
                             "finalize": "data.final = data.final + 1"}}]},
                    endpoints={"svc": "http://svc/async"},
                    dataelements={"updates": 0, "final": 0})
                instance = engine.create_instance()
                engine.mutate_context(instance, {"model": doc})
                engine.transition(instance, "running", "command")
                deadline = time.monotonic() + 5
                while "url" not in captured and time.monotonic() < deadline:
                    time.sleep(0.005)
                url = captured["url"]
                for i in range(n):
                    resp = requests.put(url, json={"i": i},
                                        headers={"CPEE-UPDATE": "true"},
                                        timeout=5)
                    assert resp.status_code == 200
                time.sleep(0.1)
                assert instance.state == "running", \
                    "updates must not complete the activity"
                assert requests.put(url, json={}, timeout=5).status_code == 200
                assert engine.wait_idle(instance)
                assert instance.state == "finished"
                assert instance.dataelements == {"updates": n, "final": 1}
                assert requests.put(url, json={}, timeout=5).status_code == 404
        finally:
            handle.stop()


# -- criterion 5 --------------------------------------------------------------

def test_criterion_5_stop_drain_semantics(capsys):
    with criterion(capsys, 5, "stopping drains synchronous work and "
                              "suspends asynchronous callbacks"):
        # part A: a synchronous call in flight in a parallel branch completes
        # between stopping and stopped
        runtime, transport = make_local_runtime()
        register_echo(transport)
        gate = threading.Event()
        transport.register(
            "http://svc/block",
            lambda *a: (gate.wait(10),
                        TransportResponse(200, {}, {"ok": True}))[1])
        collector = EventCollector(runtime)
        try:
            doc = model_doc(
                {"id": "root", "kind": "sequence", "children": [
                    {"id": "p", "kind": "parallel", "wait": "all",
                     "children": [
                         {"id": "b1", "kind": "parallel_branch", "children": [
                             {"id": "slow", "kind": "call",
                              "endpoint_key": "blocker"}]},
                         {"id": "b2", "kind": "parallel_branch", "children": [
                             {"id": "quick", "kind": "manipulate",
                              "scripts": {"finalize": "data.q = 1"}}]}]}]},
                endpoints={"blocker": "http://svc/block"})
            engine = runtime.engine
            instance = engine.create_instance()
            engine.mutate_context(instance, {"model": doc})
            engine.transition(instance, "running", "command")
            assert collector.wait_for(
                lambda m: m.topic == "activity" and m.event == "calling"
                and m.payload["activity"] == "slow")
            engine.transition(instance, "stopping", "command")
            gate.set()
            assert engine.wait_idle(instance)
            assert instance.state == "stopped"
            trail = [(m.topic, m.event,
                      m.payload.get("state") or m.payload.get("activity"))
                     for m in collector.of_topic("state", instance.id)
                     + collector.of_topic("activity", instance.id)]
            ordered = [(m.topic, m.event, m.payload)
                       for m in collector.messages
                       if m.instance_id == instance.id]
            i_stopping = next(i for i, e in enumerate(ordered)
                              if e[:2] == ("state", "change")
                              and e[2]["state"] == "stopping")
            i_receiving = next(i for i, e in enumerate(ordered)
                               if e[:2] == ("activity", "receiving")
                               and e[2]["activity"] == "slow")
            i_stopped = next(i for i, e in enumerate(ordered)
                             if e[:2] == ("state", "change")
                             and e[2]["state"] == "stopped")
            assert i_stopping < i_receiving < i_stopped, trail
        finally:
            gate.set()
            runtime.shutdown()

        # part B: an open asynchronous callback answers 503 while stopped and
        # is accepted again after a restart
        transport = LocalTransport()
        captured = {}
        transport.register(
            "http://svc/async",
            lambda method, url, headers, body:
                (captured.update(url=headers["CPEE-CALLBACK"]),
                 TransportResponse(200, {"CPEE-CALLBACK": "true"}, None))[1])
        runtime, handle, root = http_engine(transport=transport)
        engine = runtime.engine
        try:
            doc = model_doc(
                {"id": "root", "kind": "sequence", "children": [
                    {"id": "a", "kind": "call", "endpoint_key": "svc",
                     "scripts": {"finalize": "data.v = result.v"}}]},
                endpoints={"svc": "http://svc/async"})
            instance = engine.create_instance()
            engine.mutate_context(instance, {"model": doc})
            engine.transition(instance, "running", "command")
            deadline = time.monotonic() + 5
            while "url" not in captured and time.monotonic() < deadline:
                time.sleep(0.005)
            engine.transition(instance, "stopping", "command")
            assert engine.wait_idle(instance)
            assert instance.state == "stopped"
            resp = requests.put(captured["url"], json={"v": 1}, timeout=5)
            assert resp.status_code == 503
            assert "Retry-After" in resp.headers
            engine.transition(instance, "running", "command")
            deadline = time.monotonic() + 5
            while time.monotonic() < deadline:
                resp = requests.put(captured["url"], json={"v": 1}, timeout=5)
                if resp.status_code == 200:
                    break
                time.sleep(0.05)
            assert resp.status_code == 200
            assert engine.wait_idle(instance)
            assert instance.state == "finished"
            assert instance.dataelements == {"v": 1}
        finally:
            handle.stop()


# -- criterion 6 --------------------------------------------------------------

def test_criterion_6_loop_enactment_identifiers(capsys):
    with criterion(capsys, 6, "a five-iteration loop enacts t1-enactment-1 "
                              "through -5 exactly once each"):
        runtime, transport = make_local_runtime()
        register_echo(transport)
        collector = EventCollector(runtime)
        try:
            doc = model_doc(
                {"id": "root", "kind": "sequence", "children": [
                    {"id": "l", "kind": "loop", "condition": "data.n < 5",
                     "children": [
                         {"id": "t1", "kind": "call", "endpoint_key": "svc",
                          "scripts": {"finalize": "data.n = data.n + 1"}}]}]},
                dataelements={"n": 0})
            instance = run_to_completion(runtime, doc)
            callings = [m.payload["enactment"]
                        for m in collector.of_topic("activity", instance.id)
                        if m.event == "calling"]
            assert callings == [f"t1-enactment-{i}" for i in range(1, 6)]
        finally:
            runtime.shutdown()


# -- criterion 7 --------------------------------------------------------------

def test_criterion_7_repair_singleton_scenario(capsys):
    with criterion(capsys, 7, "failed instance is repaired, extended, "
                              "restarted from its position, and marked "
                              "singleton"):
        transport = LocalTransport()
        register_echo(transport)
        transport.register("http://svc/broken",
                           lambda *a: TransportResponse(500, {}, "down"))
        runtime, handle, root = http_engine(transport=transport)
        collector = EventCollector(runtime)
        try:
            doc = model_doc(
                {"id": "root", "kind": "sequence", "children": [
                    {"id": "pre", "kind": "manipulate",
                     "scripts": {"finalize": "data.pre = 1"}},
                    {"id": "work", "kind": "call", "endpoint_key": "svc",
                     "scripts": {"finalize": "data.work = result.ok"}}]},
                endpoints={"svc": "http://svc/broken"})
            iid = requests.post(f"{root}/instances", timeout=5).json()["id"]
            requests.put(f"{root}/instances/{iid}/model", json=doc,
                         timeout=5).raise_for_status()
            requests.put(f"{root}/instances/{iid}/state",
                         json={"state": "running"},
                         timeout=5).raise_for_status()
            instance = runtime.engine.get(iid)
            assert runtime.engine.wait_idle(instance)
            assert instance.state == "stopped"
            assert [p.to_dict() for p in instance.positions] == \
                [{"node_id": "work", "mode": "at"}]

            # repair the endpoint, insert one activity, restart
            requests.patch(f"{root}/instances/{iid}/endpoints",
                           json={"change": {"svc": "http://svc/echo"}},
                           timeout=5).raise_for_status()
            repaired = {
                "root": {"id": "root", "kind": "sequence", "children": [
                    {"id": "pre", "kind": "manipulate",
                     "scripts": {"finalize": "data.pre = 1"}},
                    {"id": "work", "kind": "call", "endpoint_key": "svc",
                     "scripts": {"finalize": "data.work = result.ok"}},
                    {"id": "inserted", "kind": "manipulate",
                     "scripts": {"finalize": "data.extra = true"}}]},
                "endpoints": {}}
            requests.put(f"{root}/instances/{iid}/model", json=repaired,
                         timeout=5).raise_for_status()
            requests.put(f"{root}/instances/{iid}/state",
                         json={"state": "running"},
                         timeout=5).raise_for_status()
            assert runtime.engine.wait_idle(instance)
            assert instance.state == "finished"
            assert instance.dataelements == {"pre": 1, "work": True,
                                             "extra": True}
            # the already-completed activity did not run again
            assert instance.enactment_counters["pre"] == 1
            attributes = requests.get(f"{root}/instances/{iid}/attributes",
                                      timeout=5).json()
            assert attributes.get("singleton") == "true"
            pairs = collector.pairs(iid)
            assert ("description", "change") in pairs
            assert ("endpoints", "change") in pairs
        finally:
            handle.stop()


# -- criterion 8 --------------------------------------------------------------

def test_criterion_8_worklist_strategies(capsys):
    with criterion(capsys, 8, "assignment strategies and duty constraints "
                              "hold under randomized load"):
        import test_worklist
        test_worklist.test_round_robin_exact_fairness()
        test_worklist.test_workload_min_count_invariant()
        test_worklist.test_skill_based_matches_brute_force()
        test_worklist.test_sod_bod_invariants_over_random_sequences()


# -- criterion 9 --------------------------------------------------------------

def test_criterion_9_log_completeness_and_scale(capsys, tmp_path):
    with criterion(capsys, 9, "100 concurrent instances are logged without "
                              "loss and finish quickly"):
        runtime, transport = make_local_runtime()
        register_echo(transport)
        engine = runtime.engine
        writer = attach_logger(runtime.gateway, tmp_path)
        collector = EventCollector(runtime)
        try:
            children = [{"id": f"a{i}", "kind": "call", "endpoint_key": "svc",
                         "scripts": {"finalize": f"data.r{i} = result.ok"}}
                        for i in range(10)]
            doc = model_doc({"id": "root", "kind": "sequence",
                             "children": children})
            started = time.monotonic()
            instances = []
            for _ in range(100):
                instance = engine.create_instance()
                engine.mutate_context(instance, {"model": doc})
                instances.append(instance)
            for instance in instances:
                engine.transition(instance, "running", "command")
            for instance in instances:
                assert engine.wait_idle(instance, timeout=60)
                assert instance.state == "finished"
            elapsed = time.monotonic() - started
            assert elapsed < 60.0, f"took {elapsed:.1f}s"

            # zero loss: the log holds exactly what the stream carried
            for instance in instances:
                expected = len(collector.pairs(instance.id))
                deadline = time.monotonic() + 30
                while writer.event_count(instance.uuid) < expected and \
                        time.monotonic() < deadline:
                    time.sleep(0.02)
                assert writer.event_count(instance.uuid) == expected

            # emit latency: median publish cost under a millisecond
            probe = instances[0]
            timings = []
            for _ in range(1000):
                t0 = time.perf_counter()
                engine.emit("status", "change", probe, {"code": 0,
                                                        "text": "probe"})
                timings.append(time.perf_counter() - t0)
            timings.sort()
            median = timings[len(timings) // 2]
            assert median < 0.001, f"median emit latency {median * 1e3:.3f}ms"
        finally:
            runtime.shutdown()


# -- criterion 10 -------------------------------------------------------------

def test_criterion_10_federated_subprocess(capsys):
    with criterion(capsys, 10, "a sub-process on a second engine is spawned, "
                               "announced, and awaited"):
        child_runtime, child_handle, child_root = http_engine()
        parent_transport = LocalTransport()
        runtime, handle, root = http_engine(transport=parent_transport)
        collector = EventCollector(runtime)

        def spawn_handler(method, url, headers, body):
            try:
                resp_headers, child_url = spawn_subprocess(headers, body,
                                                           poll_interval=0.05)
            except Exception:
                return TransportResponse(200, {"CPEE-SALVAGE": "true"}, None)
            return TransportResponse(200, resp_headers, child_url)

        parent_transport.register("http://svc/spawn", spawn_handler)
        try:
            child_model = {
                "root": {"id": "root", "kind": "sequence", "children": [
                    {"id": "m", "kind": "manipulate",
                     "scripts": {"finalize": "data.child_ran = true"}}]},
                "endpoints": {}}
            doc = model_doc(
                {"id": "root", "kind": "sequence", "children": [
                    {"id": "sub", "kind": "call", "endpoint_key": "spawner",
                     "parameters": {"arguments": {
                         "engine": child_root,
                         "model": child_model}},
                     "scripts": {"finalize":
                                 "data.child_state = result.state"}}]},
                endpoints={"spawner": "http://svc/spawn"})
            engine = runtime.engine
            instance = engine.create_instance()
            engine.mutate_context(instance, {"model": doc})
            engine.transition(instance, "running", "command")
            assert engine.wait_idle(instance, timeout=30)
            assert instance.state == "finished"
            assert instance.dataelements == {"child_state": "finished"}

            announce = [m for m in collector.of_topic("task", instance.id)
                        if m.event == "instantiation"]
            assert len(announce) == 1
            child_url = announce[0].payload["url"]
            assert child_url.startswith(child_root)
            assert instance.spawned == [child_url]
            child_doc = requests.get(child_url, timeout=5).json()
            assert child_doc["state"] == "finished"
            assert child_doc["dataelements"] == {"child_ran": True}
        finally:
            handle.stop()
            child_handle.stop()
