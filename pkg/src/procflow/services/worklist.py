"""Worklist functionality: human task lifecycle with assignment strategies.

The worklist is invoked asynchronously by activity enactments.  Every
non-terminal task transition is reported back as an asynchronous update (with
a worklist/task-<state> custom event); reaching finished or failed sends the
final answer.  One configurable service covers both auto-assigning worklists
(round robin / workload / skill based) and self-service lists (take/return).
"""

from __future__ import annotations

import itertools
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

TASK_STATES = ("added", "assigned", "taken", "returned", "timeout",
               "invalid", "deleted", "failed", "finished")
TERMINAL_STATES = ("failed", "finished")

LEGAL_TASK_EDGES: dict[str, frozenset[str]] = {
    "added": frozenset({"assigned", "taken", "deleted", "invalid", "timeout"}),
    "assigned": frozenset({"finished", "returned", "timeout"}),
    "returned": frozenset({"assigned", "taken"}),
    "taken": frozenset({"finished", "returned", "assigned", "timeout"}),
    "timeout": frozenset({"assigned", "failed"}),
    "invalid": frozenset({"failed"}),
    "deleted": frozenset({"finished"}),
    "failed": frozenset(),
    "finished": frozenset(),
}


class TaskError(Exception):
    pass


@dataclass
class WorklistTask:
    task_id: str
    callback_url: Optional[str]
    candidate_role: str
    state: str = "added"
    excluded_users: list[str] = field(default_factory=list)   # SoD
    bound_user: Optional[str] = None                          # BoD
    form: dict[str, Any] = field(default_factory=dict)
    payload: dict[str, Any] = field(default_factory=dict)
    deadline: Optional[float] = None
    assigned_user: Optional[str] = None
    worked_by: list[str] = field(default_factory=list)
    result: Any = None
    activity_key: str = ""    # activity id + enactment, for duplicate detection

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "state": self.state,
            "role": self.candidate_role,
            "excluded_users": list(self.excluded_users),
            "bound_user": self.bound_user,
            "form": self.form,
            "payload": self.payload,
            "deadline": self.deadline,
            "assigned_user": self.assigned_user,
            "worked_by": list(self.worked_by),
        }


@dataclass
class WorklistConfig:
    roles: dict[str, list[str]] = field(default_factory=dict)
    mode: str = "auto"             # "auto" (assign on add) or "self" (take)
    strategy: str = "round_robin"  # round_robin | workload | skill_based
    skills: dict[str, dict[str, float]] = field(default_factory=dict)
    seed: int = 0
    reassign_on_timeout: bool = True
    deadline_tick: float = 1.0


# transition callback: (task, event_name, final, payload, failed)
Sender = Callable[[WorklistTask, str, bool, Any, bool], None]


class AssignmentStrategy:
    """Deterministic given the seed and the request order."""

    def __init__(self, config: WorklistConfig):
        self.config = config
        self._rng = random.Random(config.seed)
        self._rr_pointers: dict[str, int] = {}

    def eligible_users(self, task: WorklistTask,
                       open_counts: dict[str, int]) -> list[str]:
        if task.bound_user is not None:
            pool = [task.bound_user] \
                if task.bound_user in self.config.roles.get(
                    task.candidate_role, []) else [task.bound_user]
        else:
            pool = list(self.config.roles.get(task.candidate_role, []))
        return [u for u in pool if u not in task.excluded_users]

    def pick(self, task: WorklistTask, open_counts: dict[str, int]) -> Optional[str]:
        users = self.eligible_users(task, open_counts)
        if not users:
            return None
        kind = self.config.strategy
        if kind == "round_robin":
            pointer = self._rr_pointers.get(task.candidate_role, 0)
            user = users[pointer % len(users)]
            self._rr_pointers[task.candidate_role] = pointer + 1
            return user
        if kind == "workload":
            low = min(open_counts.get(u, 0) for u in users)
            candidates = [u for u in users if open_counts.get(u, 0) == low]
            return self._rng.choice(candidates)
        if kind == "skill_based":
            required = task.payload.get("skills", {})
            best = max(sorted(users),
                       key=lambda u: skill_score(self.config.skills.get(u, {}),
                                                 required))
            return best
        raise TaskError(f"unknown strategy {kind!r}")


def skill_score(user_skills: dict[str, float],
                required: dict[str, float]) -> float:
    return sum(user_skills.get(name, 0.0) * weight
               for name, weight in required.items())


class Worklist:
    """Task store plus lifecycle mechanics; transport-agnostic."""

    def __init__(self, config: Optional[WorklistConfig] = None,
                 sender: Optional[Sender] = None):
        self.config = config or WorklistConfig()
        self.sender = sender or (lambda *a: None)
        self.strategy = AssignmentStrategy(self.config)
        self._lock = threading.RLock()
        self._tasks: dict[str, WorklistTask] = {}
        self._counter = itertools.count(1)
        self._ticker: Optional[threading.Thread] = None
        self._stop_tick = threading.Event()

    # -- lifecycle mechanics -------------------------------------------------

    def _transition(self, task: WorklistTask, target: str) -> None:
        if target not in LEGAL_TASK_EDGES[task.state]:
            raise TaskError(f"illegal task transition {task.state} -> {target}")
        task.state = target
        final = target in TERMINAL_STATES
        failed = target == "failed"
        payload: Any = {"task": task.task_id, "state": target}
        if final and not failed:
            payload = {"result": task.result,
                       "worked_by": list(task.worked_by)}
        if failed:
            payload = {"error": f"task {task.task_id} failed",
                       "worked_by": list(task.worked_by)}
        self.sender(task, f"worklist/task-{target}", final, payload, failed)

    def open_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for task in self._tasks.values():
            if task.state in ("assigned", "taken") and task.assigned_user:
                counts[task.assigned_user] = \
                    counts.get(task.assigned_user, 0) + 1
        return counts

    # -- operations ----------------------------------------------------------

    def create_task(self, headers: dict[str, str],
                    payload: dict[str, Any]) -> WorklistTask:
        lowered = {k.lower(): v for k, v in headers.items()}
        callback_url = lowered.get("cpee-callback")
        activity_key = (f"{lowered.get('cpee-activity', '')}"
                        f"/{lowered.get('cpee-instance', '')}"
                        f"/{payload.get('enactment', '')}")
        with self._lock:
            task = WorklistTask(
                task_id=f"task-{next(self._counter)}",
                callback_url=callback_url,
                candidate_role=payload.get("role", ""),
                excluded_users=list(payload.get("excluded_users", [])),
                bound_user=payload.get("bound_user"),
                form=payload.get("form", {}),
                payload=payload,
                deadline=payload.get("deadline"),
                activity_key=activity_key,
            )
            duplicate = any(
                t.activity_key == activity_key and t.task_id != task.task_id
                and t.state not in TERMINAL_STATES
                for t in self._tasks.values()) and bool(activity_key.strip("/"))
            self._tasks[task.task_id] = task
            self.sender(task, "worklist/task-added", False,
                        {"task": task.task_id, "state": "added"}, False)
            if duplicate:
                self._transition(task, "deleted")
                self._transition(task, "finished")
                return task
            if self.config.mode == "auto":
                self.assign(task)
            return task

    def assign(self, task: WorklistTask,
               user: Optional[str] = None) -> Optional[str]:
        with self._lock:
            if task.state not in ("added", "returned", "timeout"):
                raise TaskError(f"cannot assign a task in state {task.state}")
            user = user or self.strategy.pick(task, self.open_counts())
            if user is None:
                self._transition(task, "invalid")
                self._transition(task, "failed")
                return None
            task.assigned_user = user
            task.worked_by.append(user)
            self._transition(task, "assigned")
            return user

    def visible_tasks(self, role: Optional[str] = None,
                      user: Optional[str] = None) -> list[WorklistTask]:
        """Taken tasks are visible only to their taker; assigned tasks only
        to their assignee."""
        with self._lock:
            out = []
            for task in self._tasks.values():
                if task.state in TERMINAL_STATES + ("deleted", "invalid"):
                    continue
                if role and task.candidate_role != role:
                    continue
                if task.state in ("taken", "assigned"):
                    if user and task.assigned_user != user:
                        continue
                elif user is not None:
                    members = self.config.roles.get(task.candidate_role, [])
                    if user not in members or user in task.excluded_users:
                        continue
                out.append(task)
            return out

    def user_action(self, task_id: str, user: str, action: str,
                    result: Any = None) -> WorklistTask:
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                raise TaskError(f"unknown task {task_id}")
            if user in task.excluded_users:
                raise TaskError(f"user {user} is excluded from this task "
                                "(separation of duty)")
            if task.bound_user is not None and user != task.bound_user:
                raise TaskError(f"task is bound to {task.bound_user} "
                                "(binding of duty)")
            if action == "take":
                if self.config.mode != "self":
                    raise TaskError("take is only available on self-service "
                                    "worklists")
                members = self.config.roles.get(task.candidate_role, [])
                if user not in members:
                    raise TaskError(f"user {user} is not in role "
                                    f"{task.candidate_role}")
                task.assigned_user = user
                task.worked_by.append(user)
                self._transition(task, "taken")
                return task
            if action == "return":
                if task.assigned_user != user:
                    raise TaskError(f"task is not held by {user}")
                task.assigned_user = None
                self._transition(task, "returned")
                return task
            if action == "complete":
                if task.assigned_user != user:
                    raise TaskError(f"task is not held by {user}")
                task.result = result
                self._transition(task, "finished")
                return task
            raise TaskError(f"unknown action {action!r}")

    def check_deadlines(self, now: Optional[float] = None) -> list[WorklistTask]:
        now = time.time() if now is None else now
        timed_out = []
        with self._lock:
            for task in self._tasks.values():
                if task.deadline is None or task.deadline > now:
                    continue
                if task.state not in ("added", "assigned", "taken"):
                    continue
                task.assigned_user = None
                self._transition(task, "timeout")
                timed_out.append(task)
                if self.config.reassign_on_timeout:
                    task.deadline = None
                    self.assign(task)
                else:
                    self._transition(task, "failed")
        return timed_out

    def get(self, task_id: str) -> Optional[WorklistTask]:
        with self._lock:
            return self._tasks.get(task_id)

    def all_tasks(self) -> list[WorklistTask]:
        with self._lock:
            return list(self._tasks.values())

    # -- deadline ticker -----------------------------------------------------

    def start_ticker(self) -> None:
        if self._ticker is not None:
            return
        self._stop_tick.clear()

        def tick() -> None:
            while not self._stop_tick.wait(self.config.deadline_tick):
                try:
                    self.check_deadlines()
                except Exception:
                    pass

        self._ticker = threading.Thread(target=tick, daemon=True,
                                        name="worklist-deadlines")
        self._ticker.start()

    def stop_ticker(self) -> None:
        self._stop_tick.set()
        self._ticker = None


def http_sender(task: WorklistTask, event: str, final: bool, payload: Any,
                failed: bool) -> None:
    """Report a transition to the engine via the task's callback URL."""
    if not task.callback_url:
        return
    import requests
    headers = {"CPEE-EVENT": event}
    if not final:
        headers["CPEE-UPDATE"] = "true"
    if failed:
        headers["CPEE-SALVAGE"] = "true"

    def send() -> None:
        for _attempt in range(30):
            try:
                resp = requests.put(task.callback_url, json=payload,
                                    headers=headers, timeout=5)
            except requests.RequestException:
                return
            if resp.status_code == 503:   # instance stopped; retry later
                time.sleep(0.5)
                continue
            return

    threading.Thread(target=send, daemon=True).start()
