// WebSocket stream with reconnect plus a small HTTP client for the two POST
// endpoints. Both take injectable factories so tests can drive them without
// sockets or servers.

import type { Snapshot } from "./types.js";

export type ConnectionStatus = "connecting" | "open" | "retrying" | "closed";

export interface SocketLike {
  onopen: (() => void) | null;
  onmessage: ((event: { data: unknown }) => void) | null;
  onerror: ((event: unknown) => void) | null;
  onclose: (() => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;
export type Scheduler = (fn: () => void, delayMs: number) => void;

export interface StreamHandlers {
  onSnapshot: (snapshot: Snapshot) => void;
  onStatus: (status: ConnectionStatus) => void;
}

export class ReconnectingStream {
  private socket: SocketLike | null = null;
  private attempt = 0;
  private stopped = false;

  constructor(
    private readonly url: string,
    private readonly handlers: StreamHandlers,
    private readonly factory: SocketFactory = (u) => new WebSocket(u) as unknown as SocketLike,
    private readonly schedule: Scheduler = (fn, ms) => {
      setTimeout(fn, ms);
    },
    private readonly baseDelayMs = 500,
    private readonly maxDelayMs = 8000,
  ) {}

  start(): void {
    this.stopped = false;
    this.open();
  }

  stop(): void {
    this.stopped = true;
    this.handlers.onStatus("closed");
    if (this.socket) this.socket.close();
    this.socket = null;
  }

  delayFor(attempt: number): number {
    return Math.min(this.maxDelayMs, this.baseDelayMs * 2 ** attempt);
  }

  private open(): void {
    this.handlers.onStatus(this.attempt === 0 ? "connecting" : "retrying");
    const socket = this.factory(this.url);
    this.socket = socket;
    socket.onerror = () => {
      // the close event always follows and drives the retry
    };
    socket.onopen = () => {
      this.attempt = 0;
      this.handlers.onStatus("open");
    };
    socket.onmessage = (event) => {
      let parsed: unknown;
      try {
        parsed = JSON.parse(String(event.data));
      } catch {
        return; // not a snapshot frame
      }
      if (parsed && typeof parsed === "object") {
        this.handlers.onSnapshot(parsed as Snapshot);
      }
    };
    socket.onclose = () => {
      if (this.stopped) return;
      const delay = this.delayFor(this.attempt);
      this.attempt += 1;
      this.handlers.onStatus("retrying");
      this.schedule(() => {
        if (!this.stopped) this.open();
      }, delay);
    };
  }
}

export type FeedbackReply =
  | { accepted: true }
  | { accepted: false; error: string; position: number | null };

export interface RuntimeClient {
  postFeedback(statement: string): Promise<FeedbackReply>;
  postControl(command: string): Promise<string>;
}

type FetchLike = (url: string, init: {
  method: string;
  headers: Record<string, string>;
  body: string;
}) => Promise<{ status: number; json(): Promise<unknown> }>;

export class HttpRuntimeClient implements RuntimeClient {
  constructor(
    private readonly base: string,
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  async postFeedback(statement: string): Promise<FeedbackReply> {
    const response = await this.fetchFn(`${this.base}/feedback`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ statement }),
    });
    const payload = (await response.json()) as Record<string, unknown>;
    if (response.status === 200 && payload["accepted"] === true) {
      return { accepted: true };
    }
    const position = typeof payload["position"] === "number" ? (payload["position"] as number) : null;
    const error = typeof payload["error"] === "string" ? (payload["error"] as string) : `rejected (${response.status})`;
    return { accepted: false, error, position };
  }

  async postControl(command: string): Promise<string> {
    const response = await this.fetchFn(`${this.base}/control`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ command }),
    });
    const payload = (await response.json()) as Record<string, unknown>;
    if (typeof payload["status"] === "string") return payload["status"] as string;
    if (typeof payload["error"] === "string") return `error: ${payload["error"]}`;
    return `error (${response.status})`;
  }
}
