/**
 * Pure state reducer for the monitor.
 *
 * All rendered UI state is a function of (snapshots ingested, envelopes
 * applied in order).  Nothing here touches the network or the DOM, so a
 * recorded stream can be replayed and must reproduce the exact same state.
 */

import type {
  Envelope,
  InstanceDoc,
  ModelDoc,
  ModelNode,
  PositionDoc,
} from "./types.js";

export interface ActivityEntry {
  activity: string;
  label: string;
  enactment: string;
  lastEvent: string;
  error?: string;
}

export interface ConditionEntry {
  condition: string;
  result?: boolean;
  dataelements?: string[];
  error?: string;
}

export interface TaskEntry {
  event: string;
  content: Record<string, unknown>;
}

export interface InstanceView {
  id: number;
  uuid: string | null;
  state: string;
  status: { code: number; text: string };
  dataelements: Record<string, unknown>;
  endpoints: Record<string, string>;
  attributes: Record<string, string>;
  /** node ids currently being worked on ("at") */
  activeNodes: string[];
  /** node ids most recently completed ("after") */
  completedNodes: string[];
  model: ModelNode | null;
  activities: Record<string, ActivityEntry>;
  activityOrder: string[];
  conditions: ConditionEntry[];
  subprocesses: string[];
  tasks: TaskEntry[];
  deliveryWarnings: number;
  eventCount: number;
}

export interface MonitorState {
  instances: Record<number, InstanceView>;
}

const LOG_LIMIT = 50;

export function emptyState(): MonitorState {
  return { instances: {} };
}

function emptyView(id: number): InstanceView {
  return {
    id,
    uuid: null,
    state: "ready",
    status: { code: 0, text: "ok" },
    dataelements: {},
    endpoints: {},
    attributes: {},
    activeNodes: [],
    completedNodes: [],
    model: null,
    activities: {},
    activityOrder: [],
    conditions: [],
    subprocesses: [],
    tasks: [],
    deliveryWarnings: 0,
    eventCount: 0,
  };
}

function withView(
  state: MonitorState,
  id: number,
  update: (view: InstanceView) => InstanceView,
): MonitorState {
  const current = state.instances[id] ?? emptyView(id);
  return {
    instances: { ...state.instances, [id]: update(current) },
  };
}

interface ChangeTriple {
  added?: Record<string, unknown>;
  deleted?: Record<string, unknown>;
  changed?: Record<string, { from: unknown; to: unknown }>;
}

function applyTriple<T>(
  map: Record<string, T>,
  triple: ChangeTriple,
): Record<string, T> {
  const next: Record<string, T> = { ...map };
  for (const [k, v] of Object.entries(triple.added ?? {})) {
    next[k] = v as T;
  }
  for (const k of Object.keys(triple.deleted ?? {})) {
    delete next[k];
  }
  for (const [k, change] of Object.entries(triple.changed ?? {})) {
    next[k] = change.to as T;
  }
  return next;
}

/** Seed or refresh a view from a full instance document. */
export function ingestInstanceDoc(
  state: MonitorState,
  doc: InstanceDoc,
): MonitorState {
  return withView(state, doc.id, (view) => ({
    ...view,
    uuid: doc.uuid,
    state: doc.state,
    status: { ...doc.status },
    dataelements: { ...doc.dataelements },
    endpoints: { ...doc.endpoints },
    attributes: { ...doc.attributes },
    activeNodes: doc.positions
      .filter((p) => p.mode === "at")
      .map((p) => p.node_id)
      .sort(),
    completedNodes: doc.positions
      .filter((p) => p.mode === "after")
      .map((p) => p.node_id)
      .sort(),
    subprocesses: [...doc.subprocesses],
  }));
}

/** Attach a model document fetched from GET /instances/{id}/model. */
export function ingestModel(
  state: MonitorState,
  id: number,
  model: ModelDoc,
): MonitorState {
  return withView(state, id, (view) => ({ ...view, model: model.root }));
}

export function applyEnvelope(
  state: MonitorState,
  env: Envelope,
): MonitorState {
  if (env.instance === null || env.instance === undefined) {
    return state;
  }
  return withView(state, env.instance, (view) => {
    const next: InstanceView = {
      ...view,
      uuid: env["instance-uuid"] ?? view.uuid,
      eventCount: view.eventCount + 1,
    };
    const content = env.content ?? {};
    switch (env.topic) {
      case "state": {
        next.state = String(content.state ?? next.state);
        break;
      }
      case "position": {
        if (Array.isArray(content.at) || Array.isArray(content.after)) {
          next.activeNodes = [...((content.at as string[]) ?? [])].sort();
          next.completedNodes = [
            ...((content.after as string[]) ?? []),
          ].sort();
        } else if (Array.isArray(content.to)) {
          const to = content.to as PositionDoc[];
          next.activeNodes = to
            .filter((p) => p.mode === "at")
            .map((p) => p.node_id)
            .sort();
          next.completedNodes = to
            .filter((p) => p.mode === "after")
            .map((p) => p.node_id)
            .sort();
        }
        break;
      }
      case "dataelements": {
        next.dataelements = applyTriple(next.dataelements, content);
        break;
      }
      case "endpoints": {
        next.endpoints = applyTriple(
          next.endpoints as Record<string, unknown>,
          content,
        ) as Record<string, string>;
        break;
      }
      case "attributes": {
        next.attributes = applyTriple(
          next.attributes as Record<string, unknown>,
          content,
        ) as Record<string, string>;
        break;
      }
      case "description": {
        const doc = content.document as ModelDoc | undefined;
        if (doc && doc.root) {
          next.model = doc.root;
        }
        break;
      }
      case "activity": {
        const enactment = String(content.enactment ?? "");
        const entry: ActivityEntry = {
          activity: String(content.activity ?? ""),
          label: String(content.label ?? ""),
          enactment,
          lastEvent: env.event,
        };
        if (env.event === "failed") {
          entry.error = String(content.error ?? "");
        } else {
          const prev = next.activities[enactment];
          if (prev?.error !== undefined) {
            entry.error = prev.error;
          }
        }
        if (!(enactment in next.activities)) {
          next.activityOrder = [...next.activityOrder, enactment];
        }
        next.activities = { ...next.activities, [enactment]: entry };
        break;
      }
      case "condition": {
        const entry: ConditionEntry = {
          condition: String(content.condition ?? ""),
        };
        if (typeof content.result === "boolean") {
          entry.result = content.result;
        }
        if (Array.isArray(content.dataelements)) {
          entry.dataelements = content.dataelements as string[];
        }
        if (content.error !== undefined) {
          entry.error = String(content.error);
        }
        next.conditions = [...next.conditions, entry].slice(-LOG_LIMIT);
        break;
      }
      case "status": {
        if (env.event === "change") {
          next.status = {
            code: Number(content.code ?? 0),
            text: String(content.text ?? ""),
          };
        } else if (env.event === "delivery_warning") {
          next.deliveryWarnings += 1;
        }
        break;
      }
      case "task": {
        if (env.event === "instantiation" && content.url) {
          const url = String(content.url);
          if (!next.subprocesses.includes(url)) {
            next.subprocesses = [...next.subprocesses, url];
          }
        }
        next.tasks = [
          ...next.tasks,
          { event: env.event, content: { ...content } },
        ].slice(-LOG_LIMIT);
        break;
      }
      default:
        break;
    }
    return next;
  });
}

export function applyAll(
  state: MonitorState,
  envelopes: Iterable<Envelope>,
): MonitorState {
  let current = state;
  for (const env of envelopes) {
    current = applyEnvelope(current, env);
  }
  return current;
}
