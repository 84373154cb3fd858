"""HTTP composition of the reference external functionalities.

One FastAPI application exposes:

- POST /worklist/tasks      engine-facing: create a task, answer later
- GET  /worklist/tasks      user-facing: list visible tasks (?role=&user=)
- GET  /worklist/tasks/{id}
- POST /worklist/tasks/{id}/{action}   take | return | complete (body: user, result)
- POST /timeout             engine-facing: wait `duration` seconds, answer later
- POST /spawn               engine-facing: instantiate a child process elsewhere

Run standalone with `python3 -m procflow.services.app`.
"""

from __future__ import annotations

import json
from typing import Any, Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response

from .extras import ServiceError, spawn_subprocess, start_timeout
from .worklist import TaskError, Worklist, WorklistConfig, http_sender


def build_services_app(worklist: Optional[Worklist] = None) -> FastAPI:
    app = FastAPI(title="procflow reference services",
                  docs_url=None, redoc_url=None)
    wl = worklist or Worklist(WorklistConfig(), sender=http_sender)
    wl.start_ticker()
    app.state.worklist = wl

    @app.exception_handler(TaskError)
    async def _task_error(_req, exc):
        return JSONResponse(status_code=409, content={"error": str(exc)})

    @app.exception_handler(ServiceError)
    async def _service_error(_req, exc):
        return JSONResponse(status_code=exc.status,
                            content={"error": str(exc)})

    async def _body(request: Request) -> dict[str, Any]:
        raw = await request.body()
        if not raw:
            return {}
        try:
            parsed = json.loads(raw)
        except ValueError:
            return {}
        return parsed if isinstance(parsed, dict) else {}

    # -- worklist ------------------------------------------------------------

    @app.post("/worklist/tasks", status_code=200)
    async def create_task(request: Request):
        payload = await _body(request)
        task = wl.create_task(dict(request.headers), payload)
        return JSONResponse(content={"task": task.task_id},
                            headers={"CPEE-CALLBACK": "true"})

    @app.get("/worklist/tasks")
    async def list_tasks(role: Optional[str] = None,
                         user: Optional[str] = None):
        return [t.to_dict() for t in wl.visible_tasks(role=role, user=user)]

    @app.get("/worklist/tasks/{task_id}")
    async def get_task(task_id: str):
        task = wl.get(task_id)
        if task is None:
            return JSONResponse(status_code=404,
                                content={"error": f"unknown task {task_id}"})
        return task.to_dict()

    @app.post("/worklist/tasks/{task_id}/{action}")
    async def task_action(task_id: str, action: str, request: Request):
        body = await _body(request)
        user = body.get("user")
        if not user:
            return JSONResponse(status_code=400,
                                content={"error": "body must name the user"})
        task = wl.user_action(task_id, user, action,
                              result=body.get("result"))
        return task.to_dict()

    # -- timeout -------------------------------------------------------------

    @app.post("/timeout")
    async def timeout(request: Request):
        payload = await _body(request)
        headers = start_timeout(dict(request.headers), payload)
        return JSONResponse(content={"scheduled": True}, headers=headers)

    # -- sub-process spawner -------------------------------------------------

    @app.post("/spawn")
    async def spawn(request: Request):
        payload = await _body(request)
        try:
            headers, child_url = spawn_subprocess(dict(request.headers),
                                                  payload)
        except ServiceError as exc:
            if exc.status == 502:
                # target engine down: salvage pattern, body explains why
                return Response(content=json.dumps({"error": str(exc)}),
                                media_type="application/json",
                                headers={"CPEE-SALVAGE": "true"})
            raise
        return Response(content=child_url, media_type="text/plain",
                        headers=headers)

    return app


def main() -> None:
    import argparse
    import uvicorn
    parser = argparse.ArgumentParser(description="procflow reference services")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8010)
    parser.add_argument("--worklist-config", default=None,
                        help="JSON file with roles/mode/strategy/skills/seed")
    args = parser.parse_args()
    config = WorklistConfig()
    if args.worklist_config:
        with open(args.worklist_config) as fh:
            raw = json.load(fh)
        config = WorklistConfig(**raw)
    app = build_services_app(Worklist(config, sender=http_sender))
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


if __name__ == "__main__":
    main()
