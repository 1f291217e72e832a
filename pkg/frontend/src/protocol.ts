/** Wire protocol: newline-delimited JSON frames (or the same JSON payloads
 * over a WebSocket).  The client speaks first. */

export type ClientFrame =
  | { type: "start"; task: string; seed: number; mode?: string; max_steps?: number }
  | { type: "intervene" }
  | { type: "correction"; motion: string }
  | { type: "keep" }
  | { type: "resume" }
  | { type: "save" };

export interface HelloFrame {
  type: "hello";
  protocol: string;
  version: number;
  tasks: string[];
  variant: string;
}

export interface StateFrame {
  type: "state";
  step: number;
  poses: Record<string, number[]>;
  predicted_motion: string;
  z_used: string;
  corrected: boolean;
  stage: number;
  status: string;
}

export interface RequeryFrame {
  type: "requery";
  predicted_motion: string;
}

export interface AckFrame {
  type: "ack";
  of: string;
  motion?: string;
  path?: string;
  success?: boolean;
}

export interface ErrorFrame {
  type: "error";
  code: string;
  detail: string;
  suggestions?: string[];
}

export interface DoneFrame {
  type: "done";
  success: boolean;
  stages: number;
  steps: number;
}

export type ServerFrame =
  | HelloFrame
  | StateFrame
  | RequeryFrame
  | AckFrame
  | ErrorFrame
  | DoneFrame;

const SERVER_TYPES = new Set(["hello", "state", "requery", "ack", "error", "done"]);

export class ProtocolError extends Error {}

/** Parse one server frame, rejecting anything that is not a JSON object
 * with a known "type". */
export function parseServerFrame(text: string): ServerFrame {
  let value: unknown;
  try {
    value = JSON.parse(text);
  } catch {
    throw new ProtocolError(`not JSON: ${text.slice(0, 80)}`);
  }
  if (typeof value !== "object" || value === null || Array.isArray(value)) {
    throw new ProtocolError("frame must be a JSON object");
  }
  const type = (value as { type?: unknown }).type;
  if (typeof type !== "string" || !SERVER_TYPES.has(type)) {
    throw new ProtocolError(`unknown frame type: ${String(type)}`);
  }
  return value as ServerFrame;
}

export function encodeClientFrame(frame: ClientFrame): string {
  return JSON.stringify(frame);
}
