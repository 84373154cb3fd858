/**
 * Browser entry point: wires the engine's HTTP/SSE interfaces to the pure
 * reducer/renderer.  All state lives in the reducer; this file only moves
 * bytes in and DOM nodes out.
 */

import { EngineClient } from "./api.js";
import { allowedCommands, type Command } from "./fsm.js";
import {
  applyEnvelope,
  emptyState,
  ingestInstanceDoc,
  ingestModel,
  type MonitorState,
} from "./reducer.js";
import { renderInstance } from "./render.js";
import { SseParser } from "./sse.js";
import type { Envelope, TaskDoc } from "./types.js";

const TOPICS = [
  "state",
  "activity",
  "position",
  "status",
  "dataelements",
  "description",
  "endpoints",
  "attributes",
  "condition",
  "task",
];

const params = new URLSearchParams(window.location.search);
const engineRoot = params.get("engine") ?? window.location.origin;
const servicesRoot = params.get("services");
const client = new EngineClient(engineRoot);

let state: MonitorState = emptyState();

function update(next: MonitorState): void {
  state = next;
  draw();
}

const COMMAND_ACTIONS: Record<Command, (id: number) => Promise<unknown>> = {
  start: (id) => client.setState(id, "running"),
  stop: (id) => client.setState(id, "stopping"),
  abandon: (id) => client.setState(id, "abandoned"),
  purge: (id) => client.purge(id),
  "patch-context": async (id) => {
    const raw = window.prompt(
      'dataelements patch, e.g. {"add": {"x": 1}} or a plain map',
    );
    if (raw) {
      await client.patch(id, "dataelements", JSON.parse(raw));
      update(ingestInstanceDoc(state, await client.getInstance(id)));
    }
  },
  "patch-model": async (id) => {
    const raw = window.prompt("full model document (JSON)");
    if (raw) {
      await client.loadModel(id, JSON.parse(raw));
      update(ingestModel(state, id, await client.getModel(id)));
    }
  },
};

function card(id: number): HTMLElement {
  const view = state.instances[id];
  const el = document.createElement("section");
  el.className = `instance instance-${view.state}`;

  const controls = document.createElement("div");
  controls.className = "controls";
  for (const command of allowedCommands(view.state)) {
    const btn = document.createElement("button");
    btn.textContent = command;
    btn.onclick = () => {
      COMMAND_ACTIONS[command](id).catch((err) =>
        window.alert(String(err)),
      );
    };
    controls.appendChild(btn);
  }
  el.appendChild(controls);

  const pre = document.createElement("pre");
  pre.textContent = renderInstance(view);
  el.appendChild(pre);
  return el;
}

function draw(): void {
  const host = document.getElementById("instances");
  if (!host) {
    return;
  }
  host.replaceChildren(
    ...Object.keys(state.instances)
      .map(Number)
      .sort((a, b) => a - b)
      .map(card),
  );
}

async function refreshInstance(id: number): Promise<void> {
  const doc = await client.getInstance(id);
  let next = ingestInstanceDoc(state, doc);
  try {
    next = ingestModel(next, id, await client.getModel(id));
  } catch {
    // no model loaded yet
  }
  update(next);
}

async function connect(): Promise<void> {
  for (const item of await client.listInstances()) {
    await refreshInstance(item.id);
  }
  const sub = await client.subscribeSse(
    TOPICS.map((topic) => ({ topic, event: "*" })),
  );
  // stream with fetch + SseParser rather than EventSource: the engine names
  // SSE events "<topic>/<event>" and custom task events cannot be enumerated
  // up front for addEventListener
  void streamEnvelopes(sub.sse_url);
  // safety net: pick up instances created elsewhere
  window.setInterval(async () => {
    for (const item of await client.listInstances()) {
      if (!(item.id in state.instances)) {
        await refreshInstance(item.id);
      }
    }
  }, 3000);
}

async function streamEnvelopes(url: string): Promise<void> {
  for (;;) {
    try {
      const res = await fetch(url);
      const reader = res.body?.getReader();
      if (!reader) {
        return;
      }
      const parser = new SseParser();
      const decoder = new TextDecoder();
      for (;;) {
        const { done, value } = await reader.read();
        if (done) {
          break;
        }
        for (const message of parser.push(decoder.decode(value))) {
          onEnvelope(message.data);
        }
      }
    } catch {
      // fall through to reconnect
    }
    await new Promise((resolve) => window.setTimeout(resolve, 1000));
  }
}

function onEnvelope(data: string): void {
  const env = JSON.parse(data) as Envelope;
  let next = applyEnvelope(state, env);
  update(next);
  if (
    env.topic === "description" &&
    env.instance !== null &&
    !next.instances[env.instance]?.model
  ) {
    client.getModel(env.instance).then((model) => {
      next = ingestModel(state, env.instance as number, model);
      update(next);
    });
  }
}

async function drawWorklist(): Promise<void> {
  const host = document.getElementById("worklist");
  if (!host || !servicesRoot) {
    return;
  }
  const user = params.get("user") ?? "";
  const role = params.get("role") ?? "";
  const res = await fetch(
    `${servicesRoot}/worklist/tasks?role=${encodeURIComponent(role)}` +
      `&user=${encodeURIComponent(user)}`,
  );
  const tasks = (await res.json()) as TaskDoc[];
  host.replaceChildren(
    ...tasks.map((task) => {
      const el = document.createElement("div");
      el.className = `task task-${task.state}`;
      el.textContent = `${task.label} [${task.state}] `;
      for (const action of ["take", "return", "complete"]) {
        const btn = document.createElement("button");
        btn.textContent = action;
        btn.onclick = async () => {
          await fetch(`${servicesRoot}/worklist/tasks/${task.id}/${action}`, {
            method: "POST",
            headers: { "Content-Type": "application/json" },
            body: JSON.stringify({ user, result: {} }),
          });
          await drawWorklist();
        };
        el.appendChild(btn);
      }
      return el;
    }),
  );
}

connect().catch((err) => window.alert(String(err)));
if (servicesRoot) {
  drawWorklist().catch(() => undefined);
  window.setInterval(() => drawWorklist().catch(() => undefined), 2000);
}

const create = document.getElementById("create");
if (create) {
  create.addEventListener("click", async () => {
    const made = await client.createInstance();
    await refreshInstance(made.id);
  });
}
