/** Event envelope as published on the engine's data stream. */
export interface Envelope {
  topic: string;
  event: string;
  timestamp: string;
  instance: number | null;
  "instance-uuid": string | null;
  content: Record<string, unknown>;
}

/** Full instance document as returned by GET /instances/{id}. */
export interface InstanceDoc {
  id: number;
  uuid: string;
  url: string;
  state: string;
  status: { code: number; text: string };
  positions: PositionDoc[];
  dataelements: Record<string, unknown>;
  endpoints: Record<string, string>;
  attributes: Record<string, string>;
  subprocesses: string[];
}

export interface PositionDoc {
  node_id: string;
  mode: "at" | "after";
  passthrough?: string | null;
}

/** Node of a process model document. */
export interface ModelNode {
  id: string;
  kind: string;
  label?: string;
  children?: ModelNode[];
  endpoint_key?: string;
  condition?: string;
  wait?: number | "all";
  loop_mode?: string;
}

export interface ModelDoc {
  root: ModelNode;
  endpoints?: Record<string, string>;
  dataelements?: Record<string, unknown>;
  attributes?: Record<string, string>;
}

/** Worklist task document as served by the reference worklist service. */
export interface TaskDoc {
  id: string;
  state: string;
  label: string;
  role: string;
  user: string | null;
  instance: string | null;
  activity: string | null;
}
