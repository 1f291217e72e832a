/** Thin typed client over a Transport: sends client frames, parses server
 * frames, and lets callers await specific frames. */

import {
  type ClientFrame,
  type ServerFrame,
  encodeClientFrame,
  parseServerFrame,
} from "./protocol.js";
import type { Transport } from "./transport.js";

interface Waiter {
  predicate: (frame: ServerFrame) => boolean;
  resolve: (frame: ServerFrame) => void;
  timer: ReturnType<typeof setTimeout>;
}

export class ConsoleClient {
  private listeners: Array<(frame: ServerFrame) => void> = [];
  private waiters: Waiter[] = [];
  /** Frames seen so far; `next()` consumes them through `cursor` so that
   * sequential awaits never miss a frame that arrived in between. */
  private history: ServerFrame[] = [];
  private cursor = 0;
  private closed = false;

  constructor(private transport: Transport) {
    transport.onMessage((text) => {
      const frame = parseServerFrame(text);
      this.history.push(frame);
      for (const cb of [...this.listeners]) cb(frame);
      for (const w of this.waiters) {
        if (w.predicate(frame)) {
          clearTimeout(w.timer);
          this.waiters = this.waiters.filter((x) => x !== w);
          this.cursor = this.history.length;
          w.resolve(frame);
          break;
        }
      }
    });
    transport.onClose(() => {
      this.closed = true;
    });
  }

  onFrame(cb: (frame: ServerFrame) => void): void {
    this.listeners.push(cb);
  }

  send(frame: ClientFrame): void {
    this.transport.send(encodeClientFrame(frame));
  }

  start(task: string, seed: number, maxSteps?: number): void {
    this.send({ type: "start", task, seed, ...(maxSteps ? { max_steps: maxSteps } : {}) });
  }

  intervene(): void {
    this.send({ type: "intervene" });
  }

  correct(motion: string): void {
    this.send({ type: "correction", motion });
  }

  keep(): void {
    this.send({ type: "keep" });
  }

  resume(): void {
    this.send({ type: "resume" });
  }

  save(): void {
    this.send({ type: "save" });
  }

  /** Resolve with the first unconsumed frame matching the predicate,
   * looking at already-received frames before waiting for new ones. */
  next(
    predicate: (frame: ServerFrame) => boolean,
    timeoutMs = 15000,
  ): Promise<ServerFrame> {
    for (let i = this.cursor; i < this.history.length; i++) {
      const frame = this.history[i]!;
      if (predicate(frame)) {
        this.cursor = i + 1;
        return Promise.resolve(frame);
      }
    }
    this.cursor = this.history.length;
    return new Promise((resolve, reject) => {
      if (this.closed) {
        reject(new Error("transport closed"));
        return;
      }
      const timer = setTimeout(() => {
        this.waiters = this.waiters.filter((w) => w.resolve !== resolve);
        reject(new Error("timed out waiting for frame"));
      }, timeoutMs);
      this.waiters.push({ predicate, resolve, timer });
    });
  }

  close(): void {
    this.transport.close();
  }
}
