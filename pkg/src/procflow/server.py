"""REST control surface, operation callback endpoint, and data stream
subscription management with SSE delivery."""

from __future__ import annotations

import asyncio
import json
import threading
from typing import Any, Optional

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles

from .engine import (EngineConfig, IllegalState, IllegalTransition,
                     UnknownInstance, VoteRejected)
from .model import ModelError, parse_model, serialize_model
from .runtime import EngineRuntime

SETTABLE_STATES = ("running", "stopping", "abandoned", "purged")
CONTEXT_ASPECTS = ("dataelements", "endpoints", "attributes", "positions")


def _instance_doc(runtime: EngineRuntime, instance) -> dict[str, Any]:
    return {
        "id": instance.id,
        "uuid": instance.uuid,
        "url": f"{runtime.config.base_url}/{instance.id}",
        "state": instance.state,
        "status": dict(instance.status),
        "positions": [p.to_dict() for p in instance.positions],
        "dataelements": dict(instance.dataelements),
        "endpoints": dict(instance.endpoints),
        "attributes": dict(instance.attributes),
        "subprocesses": list(instance.spawned),
    }


def build_app(runtime: EngineRuntime,
              static_dir: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="procflow engine", docs_url=None, redoc_url=None)
    engine = runtime.engine
    gateway = runtime.gateway

    @app.exception_handler(UnknownInstance)
    async def _unknown(_req, exc):
        return JSONResponse(status_code=404, content={"error": str(exc)})

    @app.exception_handler(IllegalTransition)
    async def _illegal_transition(_req, exc):
        return JSONResponse(status_code=409, content={"error": str(exc)})

    @app.exception_handler(IllegalState)
    async def _illegal_state(_req, exc):
        return JSONResponse(status_code=409, content={"error": str(exc)})

    @app.exception_handler(VoteRejected)
    async def _vote_rejected(_req, exc):
        return JSONResponse(status_code=422, content={"error": str(exc)})

    @app.exception_handler(ModelError)
    async def _model_error(_req, exc):
        return JSONResponse(status_code=400, content={"errors": exc.errors})

    async def _body_json(request: Request) -> Any:
        raw = await request.body()
        if not raw:
            return None
        try:
            return json.loads(raw)
        except ValueError:
            return raw.decode(errors="replace")

    # -- instances -----------------------------------------------------------

    @app.post("/instances", status_code=201)
    async def create_instance():
        instance = await asyncio.to_thread(engine.create_instance)
        doc = {"id": instance.id, "uuid": instance.uuid,
               "url": f"{runtime.config.base_url}/{instance.id}"}
        return JSONResponse(status_code=201, content=doc,
                            headers={"Location": doc["url"]})

    @app.get("/instances")
    async def list_instances():
        return [{"id": i.id, "state": i.state, "uuid": i.uuid}
                for i in engine.list_instances()]

    @app.get("/instances/{instance_id}")
    async def get_instance(instance_id: int):
        return _instance_doc(runtime, engine.get(instance_id))

    @app.delete("/instances/{instance_id}", status_code=200)
    async def purge_instance(instance_id: int):
        instance = engine.get(instance_id)
        await asyncio.to_thread(engine.purge, instance)
        return {"purged": instance_id}

    @app.get("/instances/{instance_id}/model")
    async def get_model(instance_id: int):
        instance = engine.get(instance_id)
        return Response(content=serialize_model(instance.model),
                        media_type="application/json")

    @app.put("/instances/{instance_id}/model")
    async def put_model(instance_id: int, request: Request):
        instance = engine.get(instance_id)
        document = await _body_json(request)
        model = parse_model(document, executable=False)
        await asyncio.to_thread(engine.mutate_context, instance,
                                {"model": model})
        return {"ok": True, "nodes": len(model.node_ids())}

    @app.put("/instances/{instance_id}/state")
    async def put_state(instance_id: int, request: Request):
        instance = engine.get(instance_id)
        body = await _body_json(request) or {}
        target = body.get("state")
        if target == "finished":
            return JSONResponse(status_code=400, content={
                "error": "finished cannot be set through the control "
                         "interface"})
        if target not in SETTABLE_STATES:
            return JSONResponse(status_code=400,
                                content={"error": f"unknown state {target!r}"})
        if target == instance.state:
            return {"state": target, "idempotent": True}
        if target == "purged":
            await asyncio.to_thread(engine.purge, instance)
            return {"state": "purged"}
        await asyncio.to_thread(engine.transition, instance, target, "command")
        return {"state": instance.state}

    @app.get("/instances/{instance_id}/{aspect}")
    async def get_aspect(instance_id: int, aspect: str):
        instance = engine.get(instance_id)
        if aspect == "positions":
            return [p.to_dict() for p in instance.positions]
        if aspect == "state":
            return {"state": instance.state}
        if aspect == "status":
            return dict(instance.status)
        if aspect not in CONTEXT_ASPECTS:
            return JSONResponse(status_code=404,
                                content={"error": f"unknown aspect {aspect}"})
        return dict(getattr(instance, aspect))

    @app.patch("/instances/{instance_id}/{aspect}")
    async def patch_aspect(instance_id: int, aspect: str, request: Request):
        if aspect not in CONTEXT_ASPECTS:
            return JSONResponse(status_code=404,
                                content={"error": f"unknown aspect {aspect}"})
        instance = engine.get(instance_id)
        patch = await _body_json(request)
        report = await asyncio.to_thread(engine.mutate_context, instance,
                                         {aspect: patch})
        return report.get(aspect, {})

    # -- operation callbacks -------------------------------------------------

    @app.put("/instances/{instance_id}/callbacks/{callback_id}")
    async def operation_callback(instance_id: int, callback_id: str,
                                 request: Request):
        payload = await _body_json(request)
        update = (request.headers.get("CPEE-UPDATE", "").lower() == "true")
        event = request.headers.get("CPEE-EVENT")
        salvage = (request.headers.get("CPEE-SALVAGE", "").lower() == "true")
        status = engine.callbacks.deliver(callback_id, payload, update, event,
                                          salvage)
        if status == "unknown":
            return JSONResponse(status_code=404,
                                content={"error": "unknown callback"})
        if status == "suspended":
            return JSONResponse(
                status_code=503,
                content={"error": "instance stopped; retry after restart"},
                headers={"Retry-After": "5"})
        return {"accepted": True, "update": update}

    # -- subscriptions -------------------------------------------------------

    @app.post("/subscriptions", status_code=201)
    async def create_subscription(request: Request):
        spec = await _body_json(request) or {}
        try:
            sub = gateway.subscribe(spec)
        except Exception as exc:
            return JSONResponse(status_code=400, content={"error": str(exc)})
        doc = sub.to_dict()
        if sub.mode == "sse":
            doc["sse_url"] = gateway.sse_url(sub)
        return doc

    @app.get("/subscriptions")
    async def list_subscriptions():
        return [s.to_dict() for s in gateway.list_subscriptions()]

    @app.get("/subscriptions/{sub_id}")
    async def get_subscription(sub_id: str):
        sub = gateway.get(sub_id)
        if sub is None:
            return JSONResponse(status_code=404,
                                content={"error": "unknown subscription"})
        return sub.to_dict()

    @app.delete("/subscriptions/{sub_id}")
    async def delete_subscription(sub_id: str):
        if not gateway.unsubscribe(sub_id):
            return JSONResponse(status_code=404,
                                content={"error": "unknown subscription"})
        return {"deleted": sub_id}

    @app.get("/subscriptions/{sub_id}/sse")
    async def sse_stream(sub_id: str):
        sub = gateway.get(sub_id)
        if sub is None or sub.mode != "sse":
            return JSONResponse(status_code=404,
                                content={"error": "unknown SSE subscription"})
        heartbeat = runtime.config.heartbeat_interval

        async def stream():
            while gateway.get(sub_id) is not None:
                item = await asyncio.to_thread(sub.queue.get, heartbeat)
                if item is None:
                    yield ": heartbeat\n\n"
                    continue
                name = f"{item.get('topic')}/{item.get('event')}"
                yield f"event: {name}\ndata: {json.dumps(item)}\n\n"

        return StreamingResponse(stream(), media_type="text/event-stream",
                                 headers={"Cache-Control": "no-cache"})

    @app.put("/subscriptions/{sub_id}/votes/{vote_id}")
    async def vote_response(sub_id: str, vote_id: str, request: Request):
        raw = await _body_json(request) or {}
        if not gateway.receive_vote_response(vote_id, raw):
            return JSONResponse(status_code=404,
                                content={"error": "unknown or expired vote"})
        return {"accepted": True}

    if static_dir:
        app.mount("/ui", StaticFiles(directory=static_dir, html=True),
                  name="ui")

    return app


class ServerHandle:
    """Uvicorn in a background thread; used by tests, the CLI, and federation."""

    def __init__(self, runtime: EngineRuntime, host: str = "127.0.0.1",
                 port: int = 0, static_dir: Optional[str] = None):
        import uvicorn
        self.runtime = runtime
        app = build_app(runtime, static_dir=static_dir)
        self._config = uvicorn.Config(app, host=host, port=port,
                                      log_level="warning", access_log=False)
        self._server = uvicorn.Server(self._config)
        self._thread = threading.Thread(target=self._server.run, daemon=True)

    def start(self, wait: float = 10.0) -> "ServerHandle":
        import time
        self._thread.start()
        deadline = time.monotonic() + wait
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server failed to start")
            time.sleep(0.01)
        return self

    @property
    def port(self) -> int:
        servers = self._server.servers
        return servers[0].sockets[0].getsockname()[1]

    @property
    def root(self) -> str:
        return f"http://{self._config.host}:{self.port}"

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10)
        self.runtime.shutdown()


def serve(host: str = "127.0.0.1", port: int = 8000,
          persistence_dir: Optional[str] = None,
          static_dir: Optional[str] = None, **config_overrides) -> None:
    """Run a single engine in the foreground."""
    import uvicorn
    from .engine import EngineConfig
    from .persistence import FilePersistence
    root = f"http://{host}:{port}"
    config = EngineConfig(base_url=f"{root}/instances", **config_overrides)
    persistence = FilePersistence(persistence_dir) if persistence_dir else None
    runtime = EngineRuntime(config=config, persistence=persistence,
                            server_root=root)
    app = build_app(runtime, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")


def main() -> None:
    import argparse
    parser = argparse.ArgumentParser(description="procflow engine server")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--persistence-dir", default=None)
    parser.add_argument("--static-dir", default=None,
                        help="serve the monitor UI from this directory at /ui")
    args = parser.parse_args()
    serve(host=args.host, port=args.port,
          persistence_dir=args.persistence_dir, static_dir=args.static_dir)


if __name__ == "__main__":
    main()
