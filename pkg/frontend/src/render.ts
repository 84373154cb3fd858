/**
 * Deterministic text rendering of an instance view.
 *
 * The browser app puts these lines into the DOM; the tests compare them as
 * state snapshots.  Rendering must therefore be a pure function of the view.
 */

import type { InstanceView } from "./reducer.js";
import type { ModelNode } from "./types.js";
import { allowedCommands } from "./fsm.js";

function stable(value: unknown): string {
  if (value === null || typeof value !== "object" || Array.isArray(value)) {
    return JSON.stringify(value);
  }
  const obj = value as Record<string, unknown>;
  const inner = Object.keys(obj)
    .sort()
    .map((k) => `${JSON.stringify(k)}: ${stable(obj[k])}`)
    .join(", ");
  return `{${inner}}`;
}

function nodeMarker(node: ModelNode, view: InstanceView): string {
  if (view.activeNodes.includes(node.id)) {
    return "▶";
  }
  if (view.completedNodes.includes(node.id)) {
    return "✓";
  }
  return " ";
}

export function renderTree(
  node: ModelNode,
  view: InstanceView,
  depth = 0,
): string[] {
  const indent = "  ".repeat(depth);
  const label = node.label ? ` "${node.label}"` : "";
  const cond = node.condition ? ` [${node.condition}]` : "";
  const lines = [
    `${nodeMarker(node, view)} ${indent}${node.kind} ${node.id}${label}${cond}`,
  ];
  for (const child of node.children ?? []) {
    lines.push(...renderTree(child, view, depth + 1));
  }
  return lines;
}

export function renderInstance(view: InstanceView): string {
  const lines: string[] = [];
  lines.push(`instance ${view.id} (${view.uuid ?? "?"})`);
  lines.push(`state: ${view.state}`);
  lines.push(`status: ${view.status.code} ${view.status.text}`);
  lines.push(`controls: ${allowedCommands(view.state).join(", ") || "none"}`);
  if (view.model) {
    lines.push("model:");
    lines.push(...renderTree(view.model, view).map((l) => `  ${l}`));
  }
  lines.push(`dataelements: ${stable(view.dataelements)}`);
  lines.push(`endpoints: ${stable(view.endpoints)}`);
  lines.push(`attributes: ${stable(view.attributes)}`);
  if (view.subprocesses.length > 0) {
    lines.push("subprocesses:");
    for (const url of view.subprocesses) {
      lines.push(`  - ${url}`);
    }
  }
  if (view.activityOrder.length > 0) {
    lines.push("activities:");
    for (const enactment of view.activityOrder) {
      const a = view.activities[enactment];
      const err = a.error !== undefined ? ` error=${JSON.stringify(a.error)}` : "";
      lines.push(`  ${a.enactment}: ${a.lastEvent}${err}`);
    }
  }
  if (view.conditions.length > 0) {
    lines.push("conditions:");
    for (const c of view.conditions) {
      const outcome =
        c.error !== undefined ? `error ${c.error}` : String(c.result);
      lines.push(`  ${c.condition} -> ${outcome}`);
    }
  }
  if (view.tasks.length > 0) {
    lines.push("task events:");
    for (const t of view.tasks) {
      lines.push(`  ${t.event}: ${stable(t.content)}`);
    }
  }
  if (view.deliveryWarnings > 0) {
    lines.push(`delivery warnings: ${view.deliveryWarnings}`);
  }
  lines.push(`events seen: ${view.eventCount}`);
  return lines.join("\n");
}
