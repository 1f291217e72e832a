/** Pure reducer from server frames to the console's view state. */

import type {
  DoneFrame,
  ErrorFrame,
  HelloFrame,
  ServerFrame,
  StateFrame,
} from "./protocol.js";

export type Phase = "connecting" | "idle" | "running" | "done";

export interface ConsoleState {
  phase: Phase;
  hello: HelloFrame | null;
  steps: StateFrame[];
  correctedSteps: number;
  /** Set while the server is asking whether to keep its own prediction. */
  pendingRequery: string | null;
  intervening: boolean;
  lastError: ErrorFrame | null;
  done: DoneFrame | null;
  savedPath: string | null;
  log: string[];
}

export function initialState(): ConsoleState {
  return {
    phase: "connecting",
    hello: null,
    steps: [],
    correctedSteps: 0,
    pendingRequery: null,
    intervening: false,
    lastError: null,
    done: null,
    savedPath: null,
    log: [],
  };
}

function withLog(s: ConsoleState, line: string): ConsoleState {
  return { ...s, log: [...s.log, line] };
}

/** Fold one server frame into the state.  Never mutates its input. */
export function reduce(s: ConsoleState, frame: ServerFrame): ConsoleState {
  switch (frame.type) {
    case "hello":
      return withLog(
        { ...s, phase: "idle", hello: frame },
        `connected: ${frame.protocol} v${frame.version}, tasks ${frame.tasks.join(", ")}`,
      );
    case "state":
      return {
        ...s,
        phase: "running",
        steps: [...s.steps, frame],
        correctedSteps: s.correctedSteps + (frame.corrected ? 1 : 0),
      };
    case "requery":
      return withLog(
        { ...s, pendingRequery: frame.predicted_motion },
        `policy now predicts: ${frame.predicted_motion}`,
      );
    case "ack":
      switch (frame.of) {
        case "start":
          return withLog(
            { ...s, phase: "running", steps: [], correctedSteps: 0, done: null, savedPath: null },
            "episode started",
          );
        case "intervene":
          return withLog({ ...s, intervening: true }, "paused for correction");
        case "correction":
          return withLog(s, `correction accepted: ${frame.motion}`);
        case "keep":
          return withLog({ ...s, pendingRequery: null }, "kept the correction");
        case "resume":
          return withLog(
            { ...s, intervening: false, pendingRequery: null },
            "resumed autonomous control",
          );
        case "save":
          return withLog({ ...s, savedPath: frame.path ?? null }, `saved: ${frame.path}`);
        default:
          return withLog(s, `ack: ${frame.of}`);
      }
    case "error": {
      const hint = frame.suggestions?.length
        ? ` (did you mean: ${frame.suggestions.join(", ")}?)`
        : "";
      return withLog({ ...s, lastError: frame }, `error [${frame.code}]: ${frame.detail}${hint}`);
    }
    case "done":
      return withLog(
        { ...s, phase: "done", done: frame },
        `episode done: success=${frame.success} stages=${frame.stages} steps=${frame.steps}`,
      );
  }
}

/** The motion currently steering the robot, per the latest state frame. */
export function currentMotion(s: ConsoleState): string | null {
  const last = s.steps[s.steps.length - 1];
  return last ? last.z_used : null;
}
