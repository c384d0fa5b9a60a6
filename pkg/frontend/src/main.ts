import { GatewayApi } from "./api.js";
import {
  applyRules,
  applyServerEvent,
  applyThings,
  emptyState,
  setConnection,
  type ConsoleState,
  type FeedEntry,
} from "./model.js";
import { ReconnectingStream } from "./sse.js";
import { ConsoleView, type Actions } from "./ui.js";

const api = new GatewayApi("");
let state: ConsoleState = emptyState();

function update(next: ConsoleState): void {
  state = next;
  view.render(state);
}

const actions: Actions = {
  refreshRules: async () => update(applyRules(state, await api.rules())),
  refreshThings: async () => update(applyThings(state, await api.things())),
  install: async (bytes) => {
    await api.install(bytes);
    await actions.refreshRules();
  },
  lifecycle: async (name, action) => {
    if (action === "start") {
      await api.start(name);
    } else if (action === "stop") {
      await api.stop(name);
    } else {
      await api.uninstall(name);
    }
    await actions.refreshRules();
  },
  setParam: async (name, key, value) => {
    await api.setParam(name, key, value);
    await actions.refreshRules();
  },
  query: (text) => api.query(text),
};

const view = new ConsoleView(actions);

const stream = new ReconnectingStream("/events", {
  onDoc: (doc) => {
    update(applyServerEvent(state, doc as FeedEntry));
    const type = (doc as FeedEntry).type;
    if (type === "device") {
      // device snapshots are cheap and keep the browser current
      void actions.refreshThings().catch(() => undefined);
    }
  },
  onStateChange: (conn) => update(setConnection(state, conn)),
});

window.addEventListener("DOMContentLoaded", () => {
  view.bind();
  void actions.refreshRules().catch(() => undefined);
  void actions.refreshThings().catch(() => undefined);
  stream.start();
});
