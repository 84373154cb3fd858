"""Command line client for a running engine.

Talks to the REST control surface; the engine root is taken from --engine or
the PROCFLOW_ENGINE environment variable (default http://127.0.0.1:8000).

Exit codes: 0 success, 1 request rejected by the engine, 2 usage or
connection error.
"""

from __future__ import annotations

import json
import sys
from typing import Any, Optional

import click
import requests

DEFAULT_ENGINE = "http://127.0.0.1:8000"


class EngineClient:
    def __init__(self, root: str):
        self.root = root.rstrip("/")

    def request(self, method: str, path: str, body: Any = None) -> Any:
        url = f"{self.root}{path}"
        try:
            resp = requests.request(method, url, json=body, timeout=30)
        except requests.RequestException as exc:
            click.echo(f"cannot reach engine at {self.root}: {exc}", err=True)
            sys.exit(2)
        if resp.status_code >= 400:
            try:
                detail = resp.json()
            except ValueError:
                detail = resp.text
            click.echo(f"engine answered {resp.status_code}: "
                       f"{json.dumps(detail)}", err=True)
            sys.exit(1)
        try:
            return resp.json()
        except ValueError:
            return resp.text


def _emit(doc: Any, table: bool) -> None:
    if not table:
        click.echo(json.dumps(doc, indent=2, sort_keys=True))
        return
    rows = doc if isinstance(doc, list) else [doc]
    if not rows:
        click.echo("(empty)")
        return
    if not isinstance(rows[0], dict):
        for row in rows:
            click.echo(str(row))
        return
    keys = list(rows[0].keys())
    widths = {k: max(len(k), *(len(str(r.get(k, ""))) for r in rows))
              for k in keys}
    click.echo("  ".join(k.ljust(widths[k]) for k in keys))
    for row in rows:
        click.echo("  ".join(str(row.get(k, "")).ljust(widths[k])
                             for k in keys))


@click.group()
@click.option("--engine", envvar="PROCFLOW_ENGINE", default=DEFAULT_ENGINE,
              show_default=True, help="engine root URL")
@click.option("--table", is_flag=True, help="table output instead of JSON")
@click.pass_context
def main(ctx: click.Context, engine: str, table: bool) -> None:
    """Control and observe process instances."""
    ctx.obj = {"client": EngineClient(engine), "table": table}


@main.group()
def instance() -> None:
    """Instance lifecycle and context commands."""


@instance.command("create")
@click.option("--model", "model_file", type=click.Path(exists=True),
              help="JSON process model to load after creation")
@click.option("--start", "start_now", is_flag=True,
              help="start execution immediately")
@click.pass_obj
def instance_create(obj: dict, model_file: Optional[str],
                    start_now: bool) -> None:
    client: EngineClient = obj["client"]
    doc = client.request("POST", "/instances")
    iid = doc["id"]
    if model_file:
        with open(model_file) as fh:
            model = json.load(fh)
        client.request("PUT", f"/instances/{iid}/model", model)
    if start_now:
        client.request("PUT", f"/instances/{iid}/state",
                       {"state": "running"})
        doc = client.request("GET", f"/instances/{iid}")
    _emit(doc, obj["table"])


def _state_command(name: str, target: str) -> None:
    @instance.command(name)
    @click.argument("instance_id", type=int)
    @click.pass_obj
    def cmd(obj: dict, instance_id: int) -> None:
        client: EngineClient = obj["client"]
        doc = client.request("PUT", f"/instances/{instance_id}/state",
                             {"state": target})
        _emit(doc, obj["table"])
    cmd.__doc__ = f"Set the instance state to {target}."


_state_command("start", "running")
_state_command("stop", "stopping")
_state_command("abandon", "abandoned")
_state_command("purge", "purged")


@instance.command("show")
@click.argument("instance_id", type=int)
@click.pass_obj
def instance_show(obj: dict, instance_id: int) -> None:
    client: EngineClient = obj["client"]
    _emit(client.request("GET", f"/instances/{instance_id}"), obj["table"])


@instance.command("list")
@click.pass_obj
def instance_list(obj: dict) -> None:
    client: EngineClient = obj["client"]
    _emit(client.request("GET", "/instances"), obj["table"])


@instance.command("patch")
@click.argument("instance_id", type=int)
@click.option("--dataelements", "dataelements_json", default=None)
@click.option("--endpoints", "endpoints_json", default=None)
@click.option("--attributes", "attributes_json", default=None)
@click.option("--positions", "positions_json", default=None)
@click.pass_obj
def instance_patch(obj: dict, instance_id: int,
                   dataelements_json: Optional[str],
                   endpoints_json: Optional[str],
                   attributes_json: Optional[str],
                   positions_json: Optional[str]) -> None:
    """Apply JSON patches to instance context aspects."""
    client: EngineClient = obj["client"]
    patches = {"dataelements": dataelements_json,
               "endpoints": endpoints_json,
               "attributes": attributes_json,
               "positions": positions_json}
    applied = False
    for aspect, raw in patches.items():
        if raw is None:
            continue
        try:
            body = json.loads(raw)
        except ValueError as exc:
            click.echo(f"--{aspect} is not valid JSON: {exc}", err=True)
            sys.exit(2)
        doc = client.request("PATCH", f"/instances/{instance_id}/{aspect}",
                             body)
        _emit({aspect: doc}, obj["table"])
        applied = True
    if not applied:
        click.echo("nothing to patch; pass at least one --<aspect> option",
                   err=True)
        sys.exit(2)


@main.command("watch")
@click.option("--topics", default="state,activity,dataelements",
              show_default=True, help="comma separated topic list, or 'all'")
@click.option("--instance", "instance_id", type=int, default=None,
              help="restrict to one instance")
@click.pass_obj
def watch(obj: dict, topics: str, instance_id: Optional[int]) -> None:
    """Stream events as JSON lines until interrupted."""
    client: EngineClient = obj["client"]
    all_topics = ["state", "activity", "task", "position", "dataelements",
                  "endpoints", "attributes", "condition", "description",
                  "status"]
    wanted = all_topics if topics == "all" else \
        [t.strip() for t in topics.split(",") if t.strip()]
    selections = [{"topic": t, "events": ["*"]} for t in wanted]
    spec: dict[str, Any] = {"mode": "sse", "selections": selections}
    if instance_id is not None:
        spec["instance"] = instance_id
    sub = client.request("POST", "/subscriptions", spec)
    sse_url = sub.get("sse_url") or \
        f"{client.root}/subscriptions/{sub['id']}/sse"
    try:
        with requests.get(sse_url, stream=True, timeout=(10, None)) as resp:
            for line in resp.iter_lines(decode_unicode=True):
                if not line or not line.startswith("data:"):
                    continue
                click.echo(line[5:].strip())
    except KeyboardInterrupt:
        pass
    except requests.RequestException as exc:
        click.echo(f"stream ended: {exc}", err=True)
        sys.exit(2)
    finally:
        try:
            requests.delete(f"{client.root}/subscriptions/{sub['id']}",
                            timeout=5)
        except requests.RequestException:
            pass


if __name__ == "__main__":
    main()
