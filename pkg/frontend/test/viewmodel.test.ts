import { describe, expect, it } from "vitest";

import { parseServerFrame, ProtocolError } from "../src/protocol.js";
import type { ServerFrame, StateFrame } from "../src/protocol.js";
import { currentMotion, initialState, reduce } from "../src/viewmodel.js";

const hello: ServerFrame = {
  type: "hello",
  protocol: "motionhier",
  version: 1,
  tasks: ["pick"],
  variant: "rt_h",
};

function state(step: number, corrected = false): StateFrame {
  return {
    type: "state",
    step,
    poses: { ee: [0, 0, 0, 0, 0, 0] },
    predicted_motion: "move arm forward",
    z_used: corrected ? "close gripper" : "move arm forward",
    corrected,
    stage: 0,
    status: "running",
  };
}

describe("protocol", () => {
  it("parses known frames and rejects garbage", () => {
    expect(parseServerFrame(JSON.stringify(hello)).type).toBe("hello");
    expect(() => parseServerFrame("not json")).toThrow(ProtocolError);
    expect(() => parseServerFrame("[1,2]")).toThrow(ProtocolError);
    expect(() => parseServerFrame('{"type":"mystery"}')).toThrow(ProtocolError);
    expect(() => parseServerFrame('{"no_type":1}')).toThrow(ProtocolError);
  });
});

describe("viewmodel reducer", () => {
  it("accumulates state frames and counts corrected steps", () => {
    let s = reduce(initialState(), hello);
    expect(s.phase).toBe("idle");
    s = reduce(s, { type: "ack", of: "start" });
    s = reduce(s, state(0));
    s = reduce(s, state(1, true));
    s = reduce(s, state(2, true));
    expect(s.phase).toBe("running");
    expect(s.steps.length).toBe(3);
    expect(s.correctedSteps).toBe(2);
    expect(currentMotion(s)).toBe("close gripper");
  });

  it("tracks the intervene/requery/keep/resume lifecycle", () => {
    let s = reduce(initialState(), hello);
    s = reduce(s, { type: "ack", of: "intervene" });
    expect(s.intervening).toBe(true);
    s = reduce(s, { type: "requery", predicted_motion: "move arm up" });
    expect(s.pendingRequery).toBe("move arm up");
    s = reduce(s, { type: "ack", of: "keep" });
    expect(s.pendingRequery).toBeNull();
    s = reduce(s, { type: "ack", of: "resume" });
    expect(s.intervening).toBe(false);
  });

  it("records errors with suggestions in the log", () => {
    const s = reduce(initialState(), {
      type: "error",
      code: "unparseable_motion",
      detail: "bad motion",
      suggestions: ["close gripper"],
    });
    expect(s.lastError?.code).toBe("unparseable_motion");
    expect(s.log[s.log.length - 1]).toContain("close gripper");
  });

  it("finishes with done and save", () => {
    let s = reduce(initialState(), hello);
    s = reduce(s, { type: "done", success: true, stages: 4, steps: 31 });
    expect(s.phase).toBe("done");
    expect(s.done?.success).toBe(true);
    s = reduce(s, { type: "ack", of: "save", path: "/tmp/t.mhtr", success: true });
    expect(s.savedPath).toBe("/tmp/t.mhtr");
  });

  it("starting a new episode clears the previous one", () => {
    let s = reduce(initialState(), hello);
    s = reduce(s, state(0, true));
    s = reduce(s, { type: "done", success: false, stages: 0, steps: 1 });
    s = reduce(s, { type: "ack", of: "start" });
    expect(s.steps).toEqual([]);
    expect(s.correctedSteps).toBe(0);
    expect(s.done).toBeNull();
  });

  it("never mutates its input", () => {
    const a = reduce(initialState(), hello);
    const frozen = JSON.stringify(a);
    reduce(a, state(0, true));
    reduce(a, { type: "ack", of: "resume" });
    expect(JSON.stringify(a)).toBe(frozen);
  });
});
