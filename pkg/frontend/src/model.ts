// Pure view-model: every UI state transition lives here so it can be
// tested without a DOM. State derives only from API responses and the SSE
// stream; nothing below computes anything the gateway doesn't expose.

import type { Problem, RuleRow, Scalar, ThingDoc } from "./api.js";

export const FEED_CAPACITY = 500;

export interface FeedEntry {
  type: string;
  at?: number;
  [key: string]: unknown;
}

export interface ConsoleState {
  rules: RuleRow[];
  ruleErrors: Record<string, string>; // inline, non-modal error per rule row
  feed: FeedEntry[]; // ring buffer, newest last
  feedDropped: number;
  things: ThingDoc[];
  connection: "connecting" | "live" | "retrying";
}

export function emptyState(): ConsoleState {
  return {
    rules: [],
    ruleErrors: {},
    feed: [],
    feedDropped: 0,
    things: [],
    connection: "connecting",
  };
}

export function applyRules(state: ConsoleState, rules: RuleRow[]): ConsoleState {
  return { ...state, rules: [...rules].sort((a, b) => a.name.localeCompare(b.name)) };
}

export function applyThings(state: ConsoleState, things: ThingDoc[]): ConsoleState {
  return { ...state, things };
}

export function upsertRule(state: ConsoleState, row: RuleRow): ConsoleState {
  const rules = state.rules.filter((r) => r.name !== row.name);
  rules.push(row);
  return applyRules({ ...state, ruleErrors: { ...state.ruleErrors, [row.name]: "" } },
                    rules);
}

export function setRuleError(state: ConsoleState, name: string,
                             problem: Problem): ConsoleState {
  return {
    ...state,
    ruleErrors: { ...state.ruleErrors,
                  [name]: `${problem.code}: ${problem.message}` },
  };
}

function pushFeed(state: ConsoleState, entry: FeedEntry): ConsoleState {
  const feed = [...state.feed, entry];
  let dropped = state.feedDropped;
  while (feed.length > FEED_CAPACITY) {
    feed.shift();
    dropped += 1;
  }
  return { ...state, feed, feedDropped: dropped };
}

/** Fold one SSE document into the console state. */
export function applyServerEvent(state: ConsoleState, doc: FeedEntry): ConsoleState {
  let next = pushFeed(state, doc);
  if (doc.type !== "lifecycle") {
    return next;
  }
  const name = doc.rule as string;
  const action = doc.action as string;
  if (action === "uninstall") {
    return applyRules(next, next.rules.filter((r) => r.name !== name));
  }
  const existing = next.rules.find((r) => r.name === name);
  if (action === "set_param") {
    if (existing !== undefined) {
      const params = { ...existing.params, [doc.key as string]: doc.value as Scalar };
      next = upsertRule(next, { ...existing, params });
    }
    return next;
  }
  if (typeof doc.state === "string") {
    if (existing !== undefined) {
      next = upsertRule(next, { ...existing, state: doc.state });
    } else if (action === "install") {
      next = upsertRule(next, {
        name,
        state: doc.state,
        version: (doc.version as string) ?? "?",
        params: {},
      });
    }
  }
  return next;
}

export function setConnection(state: ConsoleState,
                              connection: ConsoleState["connection"]): ConsoleState {
  return { ...state, connection };
}

// --- query panel -----------------------------------------------------------

/** Two monospace lines: the query text and a caret under the error offset. */
export function caretLines(query: string, position: number): [string, string] {
  const clamped = Math.max(0, Math.min(position, query.length));
  return [query, " ".repeat(clamped) + "^"];
}

export function describeQueryError(problem: Problem): string {
  const where = problem.position !== undefined ? ` at ${problem.position}` : "";
  return `${problem.code}${where}: ${problem.message}`;
}

// --- thing browser ----------------------------------------------------------

/** Filter "key:value" matches one tag exactly; plain text matches the id or
 * any tag substring. */
export function filterThings(things: ThingDoc[], filter: string): ThingDoc[] {
  const trimmed = filter.trim();
  if (trimmed === "") {
    return things;
  }
  const colon = trimmed.indexOf(":");
  if (colon > 0) {
    const key = trimmed.slice(0, colon).toLowerCase();
    const value = trimmed.slice(colon + 1);
    return things.filter((t) => t.tags[key === "loc" ? "location" : key] === value);
  }
  const needle = trimmed.toLowerCase();
  return things.filter(
    (t) =>
      t.id.toLowerCase().includes(needle) ||
      Object.entries(t.tags).some(([k, v]) =>
        `${k}:${v}`.toLowerCase().includes(needle)),
  );
}

// --- event-rate sparkline ------------------------------------------------------

/** Events-per-second buckets over the trailing window, oldest first. */
export function eventRateBuckets(feed: FeedEntry[], nowMs: number,
                                 windowS = 60): number[] {
  const buckets = new Array<number>(windowS).fill(0);
  for (const entry of feed) {
    if (typeof entry.at !== "number") {
      continue;
    }
    const age = Math.floor((nowMs - entry.at) / 1000);
    if (age >= 0 && age < windowS) {
      buckets[windowS - 1 - age] += 1;
    }
  }
  return buckets;
}

export function sparkline(buckets: number[]): string {
  const glyphs = "▁▂▃▄▅▆▇█";
  const top = Math.max(1, ...buckets);
  return buckets
    .map((b) => glyphs[Math.min(glyphs.length - 1,
                                Math.floor((b / top) * (glyphs.length - 1)))])
    .join("");
}

export function parseParamInput(raw: string, reference: Scalar): Scalar | Problem {
  if (typeof reference === "boolean") {
    if (raw === "true" || raw === "false") {
      return raw === "true";
    }
    return { code: "TypeMismatch", message: "expected true or false" };
  }
  if (typeof reference === "number") {
    const value = Number(raw);
    if (raw.trim() === "" || Number.isNaN(value)) {
      return { code: "TypeMismatch", message: "expected a number" };
    }
    return value;
  }
  return raw;
}
