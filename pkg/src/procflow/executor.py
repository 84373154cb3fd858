"""Execution of process models inside an instance's execution unit.

A model is compiled into an executable plan (a tree of step closures) once
per run; the plan drives the activity lifecycle: syncing votes, prepare,
invocation through the operation protocol, receiving/manipulating cycles,
failure handling with rescue verdicts, and position/condition event emission.
"""

from __future__ import annotations

import copy
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Optional

from . import datascript
from .datascript import ScriptContext, ScriptError
from .engine import Engine, IllegalTransition, Instance
from .model import Node, Position, ProcessModel
from .protocol import (InvocationFailed, InvokeContext, ProtocolError, invoke)


class _Frozen(Exception):
    """Stop requested: carries the positions execution froze at."""

    def __init__(self, positions: list[Position]):
        super().__init__("frozen")
        self.positions = positions


class _FailStop(Exception):
    """An activity failure (or stop vote) demands the instance stop."""

    def __init__(self, position: Position):
        super().__init__("fail-stop")
        self.position = position


class _Terminate(Exception):
    pass


class _Cancelled(Exception):
    pass


class SeekState:
    """Targets still to be reached when resuming from stored positions."""

    def __init__(self, positions: list[Position]):
        self.targets: dict[str, Position] = {p.node_id: p for p in positions}

    @property
    def active(self) -> bool:
        return bool(self.targets)

    def relevant(self, step: "Step") -> bool:
        return any(t in step.ids for t in self.targets)

    def take(self, node_id: str) -> Optional[Position]:
        return self.targets.pop(node_id, None)

    def split(self, step: "Step") -> "SeekState":
        mine = [self.targets.pop(t) for t in list(self.targets)
                if t in step.ids]
        return SeekState(mine)


@dataclass
class Step:
    node: Node
    ids: frozenset[str] = frozenset()

    def run(self, rt: "Runtime", seek: SeekState) -> None:
        raise NotImplementedError


@dataclass
class ExecutablePlan:
    root: Step
    model: ProcessModel


def compile_model(model: ProcessModel) -> ExecutablePlan:
    """Translate the model tree into an executable plan.

    Compiling the same model twice yields behaviorally identical plans: each
    node maps to exactly one step, and the node->step index backs position
    reporting.
    """
    return ExecutablePlan(root=_compile(model.root), model=model)


def _subtree_ids(node: Node) -> frozenset[str]:
    return frozenset(n.id for n in node.walk())


def _compile(node: Node) -> Step:
    ids = _subtree_ids(node)
    if node.kind in ("sequence", "parallel_branch", "alternative", "otherwise"):
        return SequenceStep(node, ids, tuple(_compile(c) for c in node.children))
    if node.kind == "call":
        return CallStep(node, ids)
    if node.kind == "manipulate":
        return ManipulateStep(node, ids)
    if node.kind == "parallel":
        return ParallelStep(node, ids, tuple(_compile(c) for c in node.children))
    if node.kind == "choose":
        alts = tuple(_compile(c) for c in node.children if c.kind == "alternative")
        other = next((_compile(c) for c in node.children
                      if c.kind == "otherwise"), None)
        return ChooseStep(node, ids, alts, other)
    if node.kind == "loop":
        return LoopStep(node, ids, SequenceStep(node, ids,
                        tuple(_compile(c) for c in node.children)))
    if node.kind == "terminate":
        return TerminateStep(node, ids)
    raise ValueError(f"cannot compile node kind {node.kind}")


@dataclass
class SequenceStep(Step):
    children: tuple[Step, ...] = ()

    def run(self, rt: "Runtime", seek: SeekState) -> None:
        for child in self.children:
            if seek.active and not seek.relevant(child) \
                    and child.node.id not in seek.targets:
                continue
            child.run(rt, seek)


@dataclass
class CallStep(Step):
    def run(self, rt: "Runtime", seek: SeekState) -> None:
        passthrough = None
        if seek.active:
            pos = seek.take(self.node.id)
            if pos is None:
                return
            if pos.mode == "after":
                return
            passthrough = pos.passthrough
        rt.gate(self.node)
        rt.enact_call(self.node, passthrough)


@dataclass
class ManipulateStep(Step):
    def run(self, rt: "Runtime", seek: SeekState) -> None:
        if seek.active:
            pos = seek.take(self.node.id)
            if pos is None:
                return
            if pos.mode == "after":
                return
        rt.gate(self.node)
        rt.enact_manipulate(self.node)


@dataclass
class TerminateStep(Step):
    def run(self, rt: "Runtime", seek: SeekState) -> None:
        raise _Terminate()


@dataclass
class ChooseStep(Step):
    alternatives: tuple[Step, ...] = ()
    otherwise: Optional[Step] = None

    def run(self, rt: "Runtime", seek: SeekState) -> None:
        if seek.active:
            for branch in self.alternatives + \
                    ((self.otherwise,) if self.otherwise else ()):
                if seek.relevant(branch):
                    branch.run(rt, seek)
                    return
            return
        for branch in self.alternatives:
            if rt.eval_condition(branch.node):
                branch.run(rt, seek)
                return
        if self.otherwise is not None:
            self.otherwise.run(rt, seek)


@dataclass
class LoopStep(Step):
    body: Optional[Step] = None

    def run(self, rt: "Runtime", seek: SeekState) -> None:
        assert self.body is not None
        if seek.active and seek.relevant(self.body):
            # finish the interrupted iteration, then loop normally
            self.body.run(rt, seek)
        elif self.node.loop_mode == "post_test":
            self.body.run(rt, seek)
        while rt.eval_condition(self.node):
            self.body.run(rt, SeekState([]))


@dataclass
class ParallelStep(Step):
    branches: tuple[Step, ...] = ()

    def run(self, rt: "Runtime", seek: SeekState) -> None:
        if seek.active:
            active = [(b, seek.split(b)) for b in self.branches
                      if seek.relevant(b)]
        else:
            active = [(b, SeekState([])) for b in self.branches]
        if not active:
            return
        wait = self.node.wait
        needed = len(active) if wait == "all" else min(int(wait), len(active))

        results: list[Optional[BaseException]] = [None] * len(active)
        done = threading.Semaphore(0)

        def branch_main(ix: int, step: Step, branch_seek: SeekState) -> None:
            try:
                step.run(rt, branch_seek)
            except BaseException as exc:  # frozen/terminate/failstop propagate
                results[ix] = exc
            finally:
                done.release()

        threads = []
        for ix, (step, branch_seek) in enumerate(active):
            t = threading.Thread(target=branch_main, args=(ix, step, branch_seek),
                                 daemon=True,
                                 name=f"branch-{self.node.id}-{ix}")
            threads.append(t)
            t.start()

        finished = 0
        while finished < needed:
            done.acquire()
            finished += 1
        if needed < len(active):
            # wait-for-n: stragglers run to completion in the background but
            # the instance only finishes once they are all done
            rt.register_stragglers(threads)
        else:
            for t in threads:
                t.join()
        self._propagate(rt, [r for r in results if r is not None], threads,
                        needed < len(active))

    def _propagate(self, rt: "Runtime", errors: list[BaseException],
                   threads: list[threading.Thread], partial: bool) -> None:
        frozen: list[Position] = []
        failstop: Optional[_FailStop] = None
        terminate = False
        for exc in errors:
            if isinstance(exc, _Frozen):
                frozen.extend(exc.positions)
            elif isinstance(exc, _FailStop):
                failstop = exc
                frozen.append(exc.position)
            elif isinstance(exc, _Terminate):
                terminate = True
            elif isinstance(exc, _Cancelled):
                pass
            else:
                raise exc
        if failstop is not None or frozen:
            if partial:
                for t in threads:
                    t.join()
            raise _Frozen(frozen)
        if terminate:
            rt.cancel.set()
            raise _Terminate()


class Runtime:
    """Per-run execution services shared by all branches of one instance."""

    def __init__(self, engine: Engine, instance: Instance, unit: "ExecutionUnit"):
        self.engine = engine
        self.instance = instance
        self.unit = unit
        self.cancel = threading.Event()
        self._lock = threading.Lock()
        self._active: set[str] = set()
        self._last_done: Optional[str] = None
        self._stragglers: list[threading.Thread] = []

    # -- plumbing ------------------------------------------------------------

    def stop_requested(self) -> bool:
        return self.instance.stop_requested.is_set() or self.unit.aborted

    def gate(self, node: Node) -> None:
        if self.unit.aborted or self.cancel.is_set():
            raise _Cancelled()
        if self.instance.stop_requested.is_set():
            raise _Frozen([Position(node.id, "at")])

    def register_stragglers(self, threads: list[threading.Thread]) -> None:
        with self._lock:
            self._stragglers.extend(threads)

    def join_stragglers(self) -> None:
        while True:
            with self._lock:
                if not self._stragglers:
                    return
                t = self._stragglers.pop()
            t.join()

    def emit(self, topic: str, event: str, content: dict[str, Any]) -> None:
        if self.unit.aborted:
            return
        self.engine.emit(topic, event, self.instance, content)

    def emit_activity(self, state: str, node: Node, enactment: str,
                      extra: Optional[dict[str, Any]] = None) -> None:
        content = {"activity": node.id, "label": node.label,
                   "enactment": enactment}
        if extra:
            content.update(extra)
        self.emit("activity", state, content)

    def position_enter(self, node: Node) -> None:
        with self._lock:
            self._active.add(node.id)
            content = {"at": sorted(self._active), "after": []}
            if self._last_done:
                content["transition"] = {"from": self._last_done,
                                         "to": node.id}
        self.emit("position", "change", content)

    def position_exit(self, node: Node) -> None:
        with self._lock:
            self._active.discard(node.id)
            self._last_done = node.id
            content = {"at": sorted(self._active), "after": [node.id]}
        self.emit("position", "change", content)

    # -- conditions ----------------------------------------------------------

    def eval_condition(self, node: Node) -> bool:
        try:
            result, involved = datascript.eval_condition(
                node.condition or "false", self.instance.dataelements,
                self.instance.endpoints)
        except ScriptError as exc:
            self.emit("condition", "evaluation",
                      {"condition": node.condition, "error": str(exc)})
            self._request_stop(node, "at")
            raise AssertionError("unreachable")
        content = {"condition": node.condition, "dataelements": involved,
                   "result": result}
        verdict = self.engine.shaper.collect_verdict(
            "condition", "evaluation", self.instance, content,
            context="condition")
        for target, _name, value in verdict.set_values:
            if target == "condition" and isinstance(value, bool):
                result = value
                content = dict(content, result=result, shaped=True)
        self.emit("condition", "evaluation", content)
        if verdict.has("stop_instance"):
            self._request_stop(node, "at")
        return result

    def _request_stop(self, node: Node, mode: str) -> None:
        try:
            self.engine.transition(self.instance, "stopping", cause="error")
        except IllegalTransition:
            pass  # already stopping
        raise _Frozen([Position(node.id, mode)])

    # -- scripts -------------------------------------------------------------

    def run_permanent_script(self, source: str, result: Any,
                             node: Node) -> Optional[tuple[int, str]]:
        """finalize/update/rescue: dataelement and endpoint writes are
        permanent and flow through the votable context-mutation path."""
        work_data = copy.deepcopy(self.instance.dataelements)
        work_ep = dict(self.instance.endpoints)
        ctx = ScriptContext(data=work_data, endpoints=work_ep, result=result)
        datascript.run_script(source, ctx)
        changes: dict[str, Any] = {}
        if work_data != self.instance.dataelements:
            changes["dataelements"] = {"add": work_data}
        if work_ep != self.instance.endpoints:
            changes["endpoints"] = {"add": work_ep}
        if changes:
            self.engine.mutate_context(self.instance, changes, by_activity=True)
        if ctx.status is not None:
            self.engine.set_status(self.instance, *ctx.status)
        return ctx.status

    # -- activity enactment --------------------------------------------------

    def enact_call(self, node: Node, passthrough: Optional[str] = None) -> None:
        cfg = self.engine.config
        attempts = 0
        while True:
            attempts += 1
            try:
                outcome = self._enact_once(node, passthrough)
            finally:
                passthrough = None
            if outcome == "retry":
                if attempts > cfg.max_retries:
                    self._request_stop(node, "at")
                if self.stop_requested():
                    raise _Frozen([Position(node.id, "at")])
                time.sleep(cfg.retry_delay)
                continue
            return

    def _enact_once(self, node: Node, passthrough: Optional[str]) -> str:
        """One enactment attempt; returns "done", "skipped", or "retry"."""
        instance = self.instance
        cfg = self.engine.config

        if passthrough is not None:
            record = self.engine.callbacks.get(passthrough)
            if record is None:
                passthrough = None   # answered and removed while stopped
            else:
                self.position_enter(node)
                try:
                    return self._await_answers(node, record,
                                               record.enactment_id)
                finally:
                    self.position_exit(node)

        enactment = instance.next_enactment(node.id)

        verdict = self.engine.shaper.collect_verdict(
            "activity", "syncing_before", instance,
            {"activity": node.id, "label": node.label, "enactment": enactment},
            context="activity")
        self.engine._apply_set_values(instance, verdict)
        if verdict.has("skip_activity"):
            return "skipped"
        if verdict.has("stop_instance"):
            self._request_stop(node, "at")

        # prepare: scoped to this enactment, writes are discarded afterwards
        scratch = copy.deepcopy(instance.dataelements)
        scratch_ep = dict(instance.endpoints)
        failure: Optional[str] = None
        arguments: Any = None
        if node.scripts.prepare:
            try:
                datascript.run_script(node.scripts.prepare,
                                      ScriptContext(data=scratch,
                                                    endpoints=scratch_ep))
            except ScriptError as exc:
                failure = f"prepare script failed: {exc}"
        if failure is None:
            try:
                arguments = self._eval_arguments(node, scratch, scratch_ep)
            except ScriptError as exc:
                failure = f"argument evaluation failed: {exc}"

        endpoint = scratch_ep.get(node.endpoint_key or "")
        if failure is None and endpoint is None:
            failure = f"endpoint key {node.endpoint_key!r} unbound"

        record = self.engine.callbacks.create(instance.id, node.id, enactment)
        callback_url = (f"{cfg.base_url}/{instance.id}/callbacks/"
                        f"{record.callback_id}")
        ctx = InvokeContext(
            base=cfg.base_url, instance_id=instance.id,
            instance_url=f"{cfg.base_url}/{instance.id}",
            instance_uuid=instance.uuid, callback_url=callback_url,
            callback_id=record.callback_id, activity_id=node.id,
            label=node.label)

        self.position_enter(node)
        self.emit_activity("calling", node, enactment,
                           {"endpoint": endpoint,
                            "parameters": node.parameters,
                            "arguments": arguments})
        try:
            if failure is not None:
                self.engine.callbacks.remove(record.callback_id)
                return self._fail(node, enactment, failure)
            try:
                outcome = invoke(self.engine.transport, endpoint,
                                 node.parameters, ctx, arguments,
                                 timeout=cfg.invoke_timeout)
            except (InvocationFailed, ProtocolError) as exc:
                self.engine.callbacks.remove(record.callback_id)
                return self._fail(node, enactment, str(exc))

            if outcome.spawned_url:
                with instance.lock:
                    instance.spawned.append(outcome.spawned_url)
                self.emit("task", "instantiation",
                          {"activity": node.id, "enactment": enactment,
                           "url": outcome.spawned_url})
            if outcome.custom_event:
                self.emit("task", outcome.custom_event,
                          {"activity": node.id, "enactment": enactment})

            if outcome.pattern == "salvage":
                self.engine.callbacks.remove(record.callback_id)
                return self._fail(node, enactment,
                                  "functionality signalled salvage",
                                  salvage=True)
            if outcome.pattern == "synchronous":
                self.engine.callbacks.remove(record.callback_id)
                self.emit_activity("receiving", node, enactment,
                                   {"payload": outcome.body})
                self.emit_activity("manipulating", node, enactment)
                if node.scripts.finalize:
                    try:
                        self.run_permanent_script(node.scripts.finalize,
                                                  outcome.body, node)
                    except ScriptError as exc:
                        return self._fail(node, enactment,
                                          f"finalize script failed: {exc}")
                self._finish_enactment(node, enactment)
                return "done"
            # asynchronous: wait for PUTs against the callback
            return self._await_answers(node, record, enactment)
        finally:
            self.position_exit(node)

    def _eval_arguments(self, node: Node, data: dict[str, Any],
                        endpoints: dict[str, str]) -> Any:
        """Argument values starting with "=" are DataScript expressions
        evaluated against the (prepare-adjusted) context."""
        raw = node.parameters.get("arguments")
        if raw is None:
            return None

        def resolve(value: Any) -> Any:
            if isinstance(value, str) and value.startswith("="):
                ctx = ScriptContext(data=data, endpoints=endpoints)
                from .datascript import _Evaluator, parse_expression
                return _Evaluator(ctx).eval(parse_expression(value[1:]))
            if isinstance(value, dict):
                return {k: resolve(v) for k, v in value.items()}
            if isinstance(value, list):
                return [resolve(v) for v in value]
            return value

        return resolve(raw)

    def _await_answers(self, node: Node, record, enactment: str) -> str:
        while True:
            try:
                payload, update, event, salvage = record.channel.get(timeout=0.05)
            except queue.Empty:
                if self.unit.aborted or self.cancel.is_set():
                    self.engine.callbacks.remove(record.callback_id)
                    raise _Cancelled()
                if self.instance.stop_requested.is_set():
                    # asynchronous waits never delay stopping; the callback
                    # stays registered (suspended) for the next run
                    raise _Frozen([Position(node.id, "at",
                                            passthrough=record.callback_id)])
                continue
            if event:
                self.emit("task", event,
                          {"activity": node.id, "enactment": enactment})
            if salvage:
                self.engine.callbacks.remove(record.callback_id)
                return self._fail(node, enactment,
                                  "asynchronous answer signalled salvage",
                                  salvage=True)
            self.emit_activity("receiving", node, enactment,
                               {"payload": payload, "update": update})
            self.emit_activity("manipulating", node, enactment)
            source = node.scripts.update if update else node.scripts.finalize
            if source:
                try:
                    self.run_permanent_script(source, payload, node)
                except ScriptError as exc:
                    self.engine.callbacks.remove(record.callback_id)
                    kind = "update" if update else "finalize"
                    return self._fail(node, enactment,
                                      f"{kind} script failed: {exc}")
            if update:
                continue
            self._finish_enactment(node, enactment)
            return "done"

    def _finish_enactment(self, node: Node, enactment: str) -> None:
        self.emit_activity("status", node, enactment,
                           {"status": dict(self.instance.status)})
        self.emit_activity("done", node, enactment)
        verdict = self.engine.shaper.collect_verdict(
            "activity", "syncing_after", self.instance,
            {"activity": node.id, "label": node.label, "enactment": enactment},
            context="activity")
        self.engine._apply_set_values(self.instance, verdict)
        if verdict.has("stop_instance"):
            self._request_stop(node, "after")

    def _fail(self, node: Node, enactment: str, reason: str,
              salvage: bool = False) -> str:
        self.emit_activity("failed", node, enactment,
                           {"error": reason, "salvage": salvage})
        # rescue decides: status 0 ignore, 1 retry, >=2 stop the instance
        verdict_code = 1 if salvage else 2
        if node.scripts.rescue:
            try:
                status = self.run_permanent_script(node.scripts.rescue,
                                                   {"error": reason}, node)
                if status is not None:
                    verdict_code = status[0]
            except ScriptError:
                verdict_code = 2
        self.emit_activity("status", node, enactment,
                           {"status": dict(self.instance.status),
                            "verdict": verdict_code})
        self.emit_activity("done", node, enactment)
        if verdict_code == 0:
            return "done"
        if verdict_code == 1:
            return "retry"
        self._request_stop(node, "at")
        raise AssertionError("unreachable")

    def enact_manipulate(self, node: Node) -> None:
        enactment = self.instance.next_enactment(node.id)
        self.position_enter(node)
        try:
            self.emit_activity("manipulating", node, enactment)
            if node.scripts.finalize:
                try:
                    self.run_permanent_script(node.scripts.finalize, None, node)
                except ScriptError as exc:
                    self._fail(node, enactment,
                               f"finalize script failed: {exc}")
                    return
            self.emit_activity("status", node, enactment,
                               {"status": dict(self.instance.status)})
            self.emit_activity("done", node, enactment)
        finally:
            self.position_exit(node)


class ExecutionUnit:
    """One isolated execution unit per running instance."""

    def __init__(self, engine: Engine, instance: Instance):
        self.engine = engine
        self.instance = instance
        self.aborted = False
        self._drained = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"instance-{instance.id}")

    def start(self) -> None:
        self._thread.start()

    def wait_drained(self, timeout: float) -> bool:
        return self._drained.wait(timeout)

    def abort(self) -> None:
        self.aborted = True
        self._drained.set()

    def _run(self) -> None:
        engine = self.engine
        instance = self.instance
        rt = Runtime(engine, instance, self)
        plan = compile_model(instance.model)
        seek = SeekState(list(instance.positions))
        root_after = any(p.node_id == instance.model.root.id
                         and p.mode == "after" for p in instance.positions)
        try:
            if not root_after:
                plan.root.run(rt, seek)
            rt.join_stragglers()
            self._complete()
        except _Terminate:
            rt.join_stragglers()
            self._complete()
        except _Frozen as frozen:
            self._freeze(frozen.positions)
        except _FailStop as failstop:
            try:
                engine.transition(instance, "stopping", cause="error")
            except IllegalTransition:
                pass
            self._freeze([failstop.position])
        except _Cancelled:
            pass
        except Exception as exc:  # defensive: never lose the unit silently
            try:
                engine.set_status(instance, 500, f"executor error: {exc}")
                engine.transition(instance, "stopping", cause="error")
            except IllegalTransition:
                pass
            self._freeze([Position(instance.model.root.id, "at")])
        finally:
            self._drained.set()

    def _complete(self) -> None:
        instance = self.instance
        if instance.stop_requested.is_set():
            # the run finished while stopping; resuming later is a no-op
            self._freeze([Position(instance.model.root.id, "after")])
            return
        with instance.lock:
            instance.positions = []
        try:
            self.engine.transition(instance, "finished", cause="completion")
        except IllegalTransition:
            self._freeze([Position(instance.model.root.id, "after")])

    def _freeze(self, positions: list[Position]) -> None:
        instance = self.instance
        with instance.lock:
            if positions:
                instance.positions = positions
            self.engine._save(instance)
