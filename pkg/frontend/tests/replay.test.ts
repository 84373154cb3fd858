/**
 * Replay determinism: feeding a recorded SSE stream (captured from a live
 * engine running the repair scenario) through the parser and reducer must
 * reproduce the exact same rendered snapshots every time, independent of
 * how the bytes were chunked.
 */

import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { applyEnvelope, emptyState, type MonitorState } from "../src/reducer.js";
import { renderInstance } from "../src/render.js";
import { SseParser, type SseMessage } from "../src/sse.js";
import type { Envelope } from "../src/types.js";

const FIXTURES = join(dirname(fileURLToPath(import.meta.url)), "fixtures");
const STREAM = readFileSync(join(FIXTURES, "recorded-stream.txt"), "utf8");
const FINAL_DOC = JSON.parse(
  readFileSync(join(FIXTURES, "final-instance.json"), "utf8"),
);

function parseChunked(raw: string, chunkSize: number): SseMessage[] {
  const parser = new SseParser();
  const out: SseMessage[] = [];
  for (let i = 0; i < raw.length; i += chunkSize) {
    out.push(...parser.push(raw.slice(i, i + chunkSize)));
  }
  return out;
}

function toEnvelopes(messages: SseMessage[]): Envelope[] {
  return messages.map((m) => JSON.parse(m.data) as Envelope);
}

/** Rendered snapshot after every single event — the full UI trajectory. */
function snapshotTrajectory(envelopes: Envelope[]): string[] {
  let state: MonitorState = emptyState();
  const snapshots: string[] = [];
  for (const env of envelopes) {
    state = applyEnvelope(state, env);
    const view = state.instances[FINAL_DOC.id];
    if (view) {
      snapshots.push(renderInstance(view));
    }
  }
  return snapshots;
}

describe("recorded stream replay", () => {
  it("chunking does not change the decoded envelope sequence", () => {
    const whole = parseChunked(STREAM, STREAM.length);
    expect(whole.length).toBeGreaterThan(20);
    for (const size of [1, 7, 64, 4096]) {
      expect(parseChunked(STREAM, size)).toEqual(whole);
    }
  });

  it("replaying twice yields identical rendered snapshots", () => {
    const envelopes = toEnvelopes(parseChunked(STREAM, 64));
    const first = snapshotTrajectory(envelopes);
    const second = snapshotTrajectory(envelopes);
    expect(second).toEqual(first);
    // and a differently-chunked decode feeds the same trajectory
    const third = snapshotTrajectory(toEnvelopes(parseChunked(STREAM, 1)));
    expect(third).toEqual(first);
  });

  it("the final snapshot matches the engine's final instance document", () => {
    const envelopes = toEnvelopes(parseChunked(STREAM, 256));
    let state: MonitorState = emptyState();
    for (const env of envelopes) {
      state = applyEnvelope(state, env);
    }
    const view = state.instances[FINAL_DOC.id];
    expect(view.state).toBe("finished");
    expect(view.uuid).toBe(FINAL_DOC.uuid);
    expect(view.dataelements).toEqual(FINAL_DOC.dataelements);
    expect(view.attributes).toEqual(FINAL_DOC.attributes);
    expect(view.attributes.singleton).toBe("true");
    expect(view.activeNodes).toEqual([]);

    const rendered = renderInstance(view);
    expect(rendered).toContain("state: finished");
    // repaired model (with the inserted node) replaced the broken one
    expect(rendered).toContain("manipulate inserted");
    // the failure before the repair is still visible in the activity log
    const failed = Object.values(view.activities).filter(
      (a) => a.error !== undefined,
    );
    expect(failed.length).toBeGreaterThan(0);
  });

  it("the stream shows the steering sequence stop -> patch -> restart", () => {
    const envelopes = toEnvelopes(parseChunked(STREAM, 128));
    const states = envelopes
      .filter((e) => e.topic === "state")
      .map((e) => e.content.state);
    expect(states).toEqual([
      "ready",
      "running",
      "stopping",
      "stopped",
      "running",
      "finished",
    ]);
    const topics = envelopes.map((e) => e.topic);
    expect(topics).toContain("description");
    expect(topics).toContain("endpoints");
    // two description changes: initial load + repaired singleton model
    expect(topics.filter((t) => t === "description").length).toBe(2);
  });
});
