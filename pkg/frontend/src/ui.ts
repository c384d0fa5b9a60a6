// DOM rendering and event wiring. All state lives in model.ts; this file
// only paints it and forwards user intent to the API.

import { ApiError, type QueryResult, type RuleRow, type Scalar } from "./api.js";
import {
  caretLines,
  describeQueryError,
  eventRateBuckets,
  filterThings,
  parseParamInput,
  sparkline,
  type ConsoleState,
} from "./model.js";

export interface Actions {
  refreshRules: () => Promise<void>;
  refreshThings: () => Promise<void>;
  install: (bytes: Uint8Array) => Promise<void>;
  lifecycle: (name: string, action: "start" | "stop" | "uninstall") => Promise<void>;
  setParam: (name: string, key: string, value: Scalar) => Promise<void>;
  query: (text: string) => Promise<QueryResult>;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, className?: string, text?: string): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

function byId<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

export class ConsoleView {
  private toastTimer: number | undefined;

  constructor(private actions: Actions) {}

  bind(): void {
    byId<HTMLInputElement>("upload").addEventListener("change", async (ev) => {
      const input = ev.target as HTMLInputElement;
      const file = input.files?.[0];
      if (!file) {
        return;
      }
      try {
        await this.actions.install(new Uint8Array(await file.arrayBuffer()));
        this.toast(`installed ${file.name}`);
      } catch (err) {
        this.toast(this.describe(err), true);
      } finally {
        input.value = "";
      }
    });

    const queryInput = byId<HTMLInputElement>("query-input");
    const run = async () => {
      const text = queryInput.value;
      const out = byId<HTMLDivElement>("query-result");
      out.textContent = "";
      try {
        this.renderQueryResult(await this.actions.query(text));
      } catch (err) {
        if (err instanceof ApiError && err.problem.position !== undefined) {
          const [line, caret] = caretLines(text, err.problem.position);
          const pre = el("pre", "query-error");
          pre.textContent = `${line}\n${caret}\n${describeQueryError(err.problem)}`;
          out.appendChild(pre);
        } else {
          out.appendChild(el("pre", "query-error", this.describe(err)));
        }
      }
    };
    byId<HTMLButtonElement>("query-run").addEventListener("click", () => void run());
    queryInput.addEventListener("keydown", (ev) => {
      if (ev.key === "Enter") {
        void run();
      }
    });

    byId<HTMLInputElement>("thing-filter").addEventListener("input", () => {
      this.lastState && this.renderThings(this.lastState);
    });
  }

  private lastState: ConsoleState | null = null;

  render(state: ConsoleState): void {
    this.lastState = state;
    const dot = byId<HTMLSpanElement>("conn");
    dot.className = `conn ${state.connection}`;
    dot.title = state.connection;
    this.renderRules(state);
    this.renderFeed(state);
    this.renderThings(state);
  }

  private renderRules(state: ConsoleState): void {
    const body = byId<HTMLTableSectionElement>("rules-body");
    body.textContent = "";
    if (state.rules.length === 0) {
      const row = body.insertRow();
      row.insertCell().colSpan = 5;
      row.cells[0].textContent = "no rules installed";
      row.cells[0].className = "empty";
      return;
    }
    for (const rule of state.rules) {
      const row = body.insertRow();
      row.insertCell().textContent = rule.name;
      const stateCell = row.insertCell();
      stateCell.textContent = rule.state;
      stateCell.className = `state-${rule.state.toLowerCase()}`;
      row.insertCell().textContent = rule.version;
      row.insertCell().appendChild(this.paramsEditor(rule));
      const actions = row.insertCell();
      for (const action of ["start", "stop", "uninstall"] as const) {
        const button = el("button", "", action);
        button.addEventListener("click", () =>
          void this.actions.lifecycle(rule.name, action).catch((err) => {
            // 409s and friends render inline, non-modally
            this.renderInlineError(rule.name, this.describe(err));
          }));
        actions.appendChild(button);
      }
      const errorRow = body.insertRow();
      errorRow.className = "rule-error-row";
      const errorCell = errorRow.insertCell();
      errorCell.colSpan = 5;
      errorCell.className = "rule-error";
      errorCell.id = `rule-error-${rule.name}`;
      errorCell.textContent = state.ruleErrors[rule.name] ?? "";
      if (!errorCell.textContent) {
        errorRow.style.display = "none";
      }
    }
  }

  private renderInlineError(name: string, message: string): void {
    const cell = document.getElementById(`rule-error-${name}`);
    if (cell) {
      cell.textContent = message;
      (cell.parentElement as HTMLElement).style.display = "";
    }
  }

  private paramsEditor(rule: RuleRow): HTMLElement {
    const wrap = el("div", "params");
    for (const [key, value] of Object.entries(rule.params)) {
      const label = el("label", "", `${key} `);
      const input = el("input") as HTMLInputElement;
      input.value = String(value);
      input.size = 8;
      const set = el("button", "", "set");
      const fieldError = el("span", "field-error", "");
      set.addEventListener("click", async () => {
        fieldError.textContent = "";
        const parsed = parseParamInput(input.value, value);
        if (typeof parsed === "object") {
          fieldError.textContent = parsed.message;
          return;
        }
        try {
          await this.actions.setParam(rule.name, key, parsed);
          this.toast(`${rule.name}.${key} = ${parsed} (effective next cycle)`);
        } catch (err) {
          fieldError.textContent = this.describe(err);
        }
      });
      label.append(input, set, fieldError);
      wrap.appendChild(label);
    }
    if (Object.keys(rule.params).length === 0) {
      wrap.appendChild(el("span", "empty", "none"));
    }
    return wrap;
  }

  private renderQueryResult(result: QueryResult): void {
    const out = byId<HTMLDivElement>("query-result");
    out.textContent = "";
    if (result.kind === "value") {
      out.appendChild(el("div", "big-number", String(result.value)));
      return;
    }
    if (result.things.length === 0) {
      out.appendChild(el("div", "empty", "no matching things"));
      return;
    }
    const table = el("table");
    for (const id of result.things) {
      const row = table.insertRow();
      row.insertCell().textContent = id;
    }
    out.appendChild(table);
  }

  private renderFeed(state: ConsoleState): void {
    byId<HTMLSpanElement>("feed-spark").textContent =
      sparkline(eventRateBuckets(state.feed, Date.now()));
    const dropped = byId<HTMLSpanElement>("feed-dropped");
    dropped.textContent = state.feedDropped > 0
      ? `${state.feedDropped} older entries dropped` : "";
    const list = byId<HTMLUListElement>("feed-list");
    list.textContent = "";
    for (const entry of [...state.feed].reverse().slice(0, 100)) {
      const item = el("li", `feed-${entry.type}`);
      item.textContent = this.describeFeedEntry(entry);
      list.appendChild(item);
    }
  }

  private describeFeedEntry(entry: Record<string, unknown>): string {
    const t = entry.type;
    if (t === "notify") {
      return `notify [${entry.level}] ${entry.rule}: ${entry.message}`;
    }
    if (t === "lifecycle") {
      const detail = entry.action === "set_param"
        ? `${entry.key}=${entry.value}` : entry.state ?? "";
      return `lifecycle ${entry.action} ${entry.rule} ${detail}`.trimEnd();
    }
    if (t === "device") {
      if (entry.capability !== undefined) {
        return `device ${entry.thing_id}.${entry.capability}: `
          + `${entry.old_value} -> ${entry.new_value}`;
      }
      return `device ${entry.kind} ${entry.thing_id}`;
    }
    return JSON.stringify(entry);
  }

  private renderThings(state: ConsoleState): void {
    const filter = byId<HTMLInputElement>("thing-filter").value;
    const body = byId<HTMLTableSectionElement>("things-body");
    body.textContent = "";
    for (const thing of filterThings(state.things, filter)) {
      const row = body.insertRow();
      row.insertCell().textContent = thing.id;
      row.insertCell().textContent = Object.entries(thing.tags)
        .map(([k, v]) => `${k}:${v}`).sort().join(" ");
      row.insertCell().textContent = thing.capabilities
        .map((c) => `${c.name}=${c.value}${c.unit ? " " + c.unit : ""}`).join(", ");
    }
  }

  toast(message: string, isError = false): void {
    const node = byId<HTMLDivElement>("toast");
    node.textContent = message;
    node.className = isError ? "toast error show" : "toast show";
    window.clearTimeout(this.toastTimer);
    this.toastTimer = window.setTimeout(() => {
      node.className = node.className.replace(" show", "");
    }, 4000);
  }

  private describe(err: unknown): string {
    if (err instanceof ApiError) {
      return `${err.problem.code}: ${err.problem.message}`;
    }
    return String(err);
  }
}
