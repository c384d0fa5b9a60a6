// Server-sent-events consumption over fetch streams: an incremental line
// parser (unit-tested) plus a reconnecting reader with capped backoff.

export interface ParsedChunk {
  docs: unknown[];
  heartbeats: number;
}

export class SSEParser {
  private buffer = "";
  private dataLines: string[] = [];

  feed(chunk: string): ParsedChunk {
    const out: ParsedChunk = { docs: [], heartbeats: 0 };
    this.buffer += chunk;
    let idx: number;
    while ((idx = this.buffer.indexOf("\n")) >= 0) {
      let line = this.buffer.slice(0, idx);
      this.buffer = this.buffer.slice(idx + 1);
      if (line.endsWith("\r")) {
        line = line.slice(0, -1);
      }
      if (line === "") {
        if (this.dataLines.length > 0) {
          const payload = this.dataLines.join("\n");
          this.dataLines = [];
          try {
            out.docs.push(JSON.parse(payload));
          } catch {
            // tolerate malformed frames rather than killing the stream
          }
        }
        continue;
      }
      if (line.startsWith(":")) {
        out.heartbeats += 1;
        continue;
      }
      if (line.startsWith("data:")) {
        this.dataLines.push(line.slice(5).trimStart());
      }
    }
    return out;
  }
}

export interface StreamHandlers {
  onDoc: (doc: unknown) => void;
  onHeartbeat?: () => void;
  onStateChange?: (state: "connecting" | "live" | "retrying") => void;
}

const BACKOFF_START_MS = 500;
const BACKOFF_CAP_MS = 8000;

export function nextBackoff(previous: number): number {
  return Math.min(previous <= 0 ? BACKOFF_START_MS : previous * 2, BACKOFF_CAP_MS);
}

export class ReconnectingStream {
  private controller: AbortController | null = null;
  private stopped = false;
  private backoffMs = 0;

  constructor(private url: string, private handlers: StreamHandlers) {}

  start(): void {
    this.stopped = false;
    void this.loop();
  }

  stop(): void {
    this.stopped = true;
    this.controller?.abort();
  }

  private async loop(): Promise<void> {
    while (!this.stopped) {
      this.handlers.onStateChange?.(this.backoffMs === 0 ? "connecting" : "retrying");
      try {
        this.controller = new AbortController();
        const resp = await fetch(this.url, { signal: this.controller.signal });
        if (!resp.ok || resp.body === null) {
          throw new Error(`stream returned ${resp.status}`);
        }
        this.handlers.onStateChange?.("live");
        this.backoffMs = 0;
        const reader = resp.body.getReader();
        const decoder = new TextDecoder();
        const parser = new SSEParser();
        for (;;) {
          const { done, value } = await reader.read();
          if (done) {
            break;
          }
          const parsed = parser.feed(decoder.decode(value, { stream: true }));
          for (const doc of parsed.docs) {
            this.handlers.onDoc(doc);
          }
          if (parsed.heartbeats > 0) {
            this.handlers.onHeartbeat?.();
          }
        }
      } catch {
        // fall through to reconnect
      }
      if (this.stopped) {
        return;
      }
      this.backoffMs = nextBackoff(this.backoffMs);
      await new Promise((resolve) => setTimeout(resolve, this.backoffMs));
    }
  }
}
