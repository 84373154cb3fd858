/**
 * Thin fetch client for the engine's control interface.  Works unchanged in
 * the browser and under node 20 (global fetch).
 */

import type { InstanceDoc, ModelDoc } from "./types.js";

export class EngineError extends Error {
  constructor(
    public status: number,
    public body: unknown,
  ) {
    super(`engine answered ${status}: ${JSON.stringify(body)}`);
  }
}

async function parseBody(res: Response): Promise<unknown> {
  const text = await res.text();
  try {
    return text ? JSON.parse(text) : null;
  } catch {
    return text;
  }
}

export class EngineClient {
  constructor(public root: string) {
    this.root = root.replace(/\/$/, "");
  }

  private async request(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<unknown> {
    const res = await fetch(`${this.root}${path}`, {
      method,
      headers:
        body !== undefined ? { "Content-Type": "application/json" } : {},
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const parsed = await parseBody(res);
    if (!res.ok) {
      throw new EngineError(res.status, parsed);
    }
    return parsed;
  }

  createInstance(): Promise<{ id: number; uuid: string; url: string }> {
    return this.request("POST", "/instances") as Promise<{
      id: number;
      uuid: string;
      url: string;
    }>;
  }

  listInstances(): Promise<{ id: number; state: string; uuid: string }[]> {
    return this.request("GET", "/instances") as Promise<
      { id: number; state: string; uuid: string }[]
    >;
  }

  getInstance(id: number): Promise<InstanceDoc> {
    return this.request("GET", `/instances/${id}`) as Promise<InstanceDoc>;
  }

  getModel(id: number): Promise<ModelDoc> {
    return this.request("GET", `/instances/${id}/model`) as Promise<ModelDoc>;
  }

  loadModel(id: number, model: ModelDoc): Promise<unknown> {
    return this.request("PUT", `/instances/${id}/model`, model);
  }

  setState(id: number, state: string): Promise<unknown> {
    return this.request("PUT", `/instances/${id}/state`, { state });
  }

  purge(id: number): Promise<unknown> {
    return this.request("DELETE", `/instances/${id}`);
  }

  patch(
    id: number,
    aspect: "dataelements" | "endpoints" | "attributes" | "positions",
    patch: unknown,
  ): Promise<unknown> {
    return this.request("PATCH", `/instances/${id}/${aspect}`, patch);
  }

  /** Create an SSE subscription over the given topic selections. */
  async subscribeSse(
    selections: { topic: string; event: string }[],
  ): Promise<{ id: string; sse_url: string }> {
    return (await this.request("POST", "/subscriptions", {
      selections,
    })) as { id: string; sse_url: string };
  }

  unsubscribe(subId: string): Promise<unknown> {
    return this.request("DELETE", `/subscriptions/${subId}`);
  }
}
