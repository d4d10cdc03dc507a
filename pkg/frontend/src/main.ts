// Entry point: wires the store, the DOM view, and a reconnecting snapshot
// stream against whatever runtime base URL the operator types in.

import { ConsoleStore } from "./store.js";
import { ConsoleView } from "./view.js";
import {
  HttpRuntimeClient,
  ReconnectingStream,
  type FeedbackReply,
  type RuntimeClient,
} from "./transport.js";

class SwitchableClient implements RuntimeClient {
  target: RuntimeClient | null = null;

  postFeedback(statement: string): Promise<FeedbackReply> {
    if (!this.target) {
      return Promise.resolve({ accepted: false, error: "not connected", position: null });
    }
    return this.target.postFeedback(statement);
  }

  postControl(command: string): Promise<string> {
    if (!this.target) return Promise.resolve("error: not connected");
    return this.target.postControl(command);
  }
}

const root = document.getElementById("app");
if (root) {
  const client = new SwitchableClient();
  const store = new ConsoleStore(client);
  let stream: ReconnectingStream | null = null;
  new ConsoleView(root, store, (base) => {
    const trimmed = base.replace(/\/+$/, "");
    client.target = new HttpRuntimeClient(trimmed);
    if (stream) stream.stop();
    stream = new ReconnectingStream(`${trimmed.replace(/^http/, "ws")}/ws/state`, {
      onSnapshot: (snapshot) => store.onSnapshot(snapshot),
      onStatus: (status) => store.setConnection(status),
    });
    stream.start();
  });
}
