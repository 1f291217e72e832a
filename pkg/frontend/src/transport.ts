/** Message transports.  The console core only depends on this interface;
 * the browser uses the WebSocket implementation below, while tests drive
 * the same protocol over raw TCP (see test/tcp.ts). */

export interface Transport {
  send(text: string): void;
  onMessage(cb: (text: string) => void): void;
  onClose(cb: () => void): void;
  close(): void;
}

export class WebSocketTransport implements Transport {
  private ws: WebSocket;
  private messageCbs: Array<(text: string) => void> = [];
  private closeCbs: Array<() => void> = [];

  constructor(url: string) {
    this.ws = new WebSocket(url);
    this.ws.onmessage = (ev) => {
      const text = typeof ev.data === "string" ? ev.data : "";
      for (const cb of this.messageCbs) cb(text);
    };
    this.ws.onclose = () => {
      for (const cb of this.closeCbs) cb();
    };
  }

  ready(): Promise<void> {
    if (this.ws.readyState === WebSocket.OPEN) return Promise.resolve();
    return new Promise((resolve, reject) => {
      this.ws.addEventListener("open", () => resolve(), { once: true });
      this.ws.addEventListener("error", () => reject(new Error("connect failed")), {
        once: true,
      });
    });
  }

  send(text: string): void {
    this.ws.send(text);
  }

  onMessage(cb: (text: string) => void): void {
    this.messageCbs.push(cb);
  }

  onClose(cb: () => void): void {
    this.closeCbs.push(cb);
  }

  close(): void {
    this.ws.close();
  }
}
