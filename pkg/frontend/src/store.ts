// Holds everything the page renders: connection status, the latest accepted
// snapshot, and the feedback composer. Snapshots are applied one at a time in
// arrival order; values are kept exactly as received.

import { SCHEMA_VERSION, type Snapshot } from "./types.js";
import { validateFeedback } from "./grammar.js";
import type { ConnectionStatus, RuntimeClient } from "./transport.js";

export type StatementKind = "match" | "overlap" | "align-edge" | "align-vert" | "pass";

export interface ComposerState {
  kind: StatementKind;
  side: string;
  scene: string;
  demo: string;
  raw: string;
  useRaw: boolean;
  error: string | null;
  busy: boolean;
}

export interface ConsoleState {
  connection: ConnectionStatus;
  versionError: string | null;
  snapshot: Snapshot | null;
  composer: ComposerState;
}

const freshComposer = (): ComposerState => ({
  kind: "match",
  side: "left",
  scene: "",
  demo: "",
  raw: "",
  useRaw: false,
  error: null,
  busy: false,
});

export class ConsoleStore {
  readonly state: ConsoleState = {
    connection: "closed",
    versionError: null,
    snapshot: null,
    composer: freshComposer(),
  };

  private listeners: Array<(state: ConsoleState) => void> = [];

  constructor(private readonly client: RuntimeClient) {}

  subscribe(listener: (state: ConsoleState) => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener(this.state);
  }

  setConnection(status: ConnectionStatus): void {
    this.state.connection = status;
    this.emit();
  }

  onSnapshot(frame: unknown): void {
    if (!frame || typeof frame !== "object") return;
    const snapshot = frame as Snapshot;
    if (typeof snapshot.schema_version !== "number" || typeof snapshot.seq !== "number") {
      return;
    }
    if (snapshot.schema_version !== SCHEMA_VERSION) {
      this.state.versionError =
        `runtime speaks schema ${snapshot.schema_version}, this console expects ${SCHEMA_VERSION}`;
      this.emit();
      return; // never render a mismatched payload, not even partially
    }
    if (this.state.snapshot && snapshot.seq <= this.state.snapshot.seq) return;
    this.state.versionError = null;
    this.state.snapshot = snapshot;
    const composer = this.state.composer;
    if (!composer.scene && snapshot.labels.scene.length > 0) {
      composer.scene = snapshot.labels.scene[0] ?? "";
    }
    if (!composer.demo && snapshot.labels.demo.length > 0) {
      composer.demo = snapshot.labels.demo[0] ?? "";
    }
    this.emit();
  }

  composerEnabled(): boolean {
    const snapshot = this.state.snapshot;
    return (
      snapshot !== null &&
      snapshot.status === "waiting_feedback" &&
      snapshot.pending_query !== null &&
      !this.state.composer.busy
    );
  }

  statement(): string {
    const composer = this.state.composer;
    if (composer.useRaw) return composer.raw;
    switch (composer.kind) {
      case "match":
        return `match ${composer.scene} with ${composer.demo}`;
      case "overlap":
        return `overlap ${composer.scene} ${composer.demo}`;
      case "align-edge":
        return `align-edge ${composer.side} ${composer.scene} ${composer.demo}`;
      case "align-vert":
        return `align-vert ${composer.side} ${composer.scene} ${composer.demo}`;
      case "pass":
        return "pass";
    }
  }

  setComposer(patch: Partial<ComposerState>): void {
    Object.assign(this.state.composer, patch);
    if (patch.kind === "align-vert" && !["top", "base"].includes(this.state.composer.side)) {
      this.state.composer.side = "top";
    }
    if (patch.kind === "align-edge" && !["left", "right"].includes(this.state.composer.side)) {
      this.state.composer.side = "left";
    }
    this.emit();
  }

  async submit(): Promise<void> {
    const snapshot = this.state.snapshot;
    const composer = this.state.composer;
    if (!this.composerEnabled() || snapshot === null) {
      composer.error = "no query is pending";
      this.emit();
      return;
    }
    const text = this.statement();
    const verdict = validateFeedback(text, snapshot.labels.scene, snapshot.labels.demo);
    if (!verdict.ok) {
      composer.error = `${verdict.issue.message} (at position ${verdict.issue.position})`;
      this.emit();
      return; // never forward malformed input to the runtime
    }
    composer.busy = true;
    composer.error = null;
    this.emit();
    const reply = await this.client.postFeedback(text);
    composer.busy = false;
    if (reply.accepted) {
      const scene = snapshot.labels.scene[0] ?? "";
      const demo = snapshot.labels.demo[0] ?? "";
      Object.assign(composer, freshComposer(), { scene, demo });
    } else {
      composer.error = reply.error; // server diagnostics verbatim, input kept
    }
    this.emit();
  }

  async control(command: "pause" | "resume" | "step"): Promise<string> {
    const status = await this.client.postControl(command);
    this.emit();
    return status;
  }
}
