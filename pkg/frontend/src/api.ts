// Typed client for the gateway management API. The console performs no
// computation the API cannot: every action below maps 1:1 onto a route.

export type Scalar = boolean | number | string;

export interface RuleRow {
  name: string;
  state: string;
  version: string;
  params: Record<string, Scalar>;
}

export interface CapabilityDoc {
  name: string;
  type: string;
  value: Scalar;
  unit: string | null;
  writable: boolean;
  updated_at: number;
}

export interface ThingDoc {
  id: string;
  tags: Record<string, string>;
  capabilities: CapabilityDoc[];
}

export interface Problem {
  code: string;
  message: string;
  detail?: string;
  position?: number;
  line?: number;
  column?: number;
}

export class ApiError extends Error {
  constructor(public status: number, public problem: Problem) {
    super(`${problem.code}: ${problem.message}`);
  }
}

export type QueryResult =
  | { kind: "things"; things: string[] }
  | { kind: "value"; value: number };

async function problemOf(resp: Response): Promise<Problem> {
  try {
    return (await resp.json()) as Problem;
  } catch {
    return { code: `HTTP${resp.status}`, message: resp.statusText };
  }
}

export class GatewayApi {
  constructor(private base: string = "") {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const resp = await fetch(this.base + path, init);
    if (!resp.ok) {
      throw new ApiError(resp.status, await problemOf(resp));
    }
    return resp;
  }

  async health(): Promise<{ ok: boolean }> {
    const resp = await this.request("/health");
    return resp.json();
  }

  async rules(): Promise<RuleRow[]> {
    const resp = await this.request("/rules");
    return (await resp.json()).rules;
  }

  async things(): Promise<ThingDoc[]> {
    const resp = await this.request("/things");
    return (await resp.json()).things;
  }

  async install(packageBytes: Uint8Array): Promise<RuleRow> {
    // copy defensively: Node Buffers are views into a shared pool
    const copy = new Uint8Array(packageBytes.byteLength);
    copy.set(packageBytes);
    const body = copy.buffer as ArrayBuffer;
    const resp = await this.request("/rules", {
      method: "POST",
      body,
      headers: { "Content-Type": "application/zip" },
    });
    return resp.json();
  }

  async start(name: string): Promise<{ name: string; state: string }> {
    const resp = await this.request(`/rules/${encodeURIComponent(name)}/start`, {
      method: "POST",
    });
    return resp.json();
  }

  async stop(name: string): Promise<{ name: string; state: string }> {
    const resp = await this.request(`/rules/${encodeURIComponent(name)}/stop`, {
      method: "POST",
    });
    return resp.json();
  }

  async uninstall(name: string): Promise<void> {
    await this.request(`/rules/${encodeURIComponent(name)}`, { method: "DELETE" });
  }

  async setParam(name: string, key: string, value: Scalar): Promise<Scalar> {
    const resp = await this.request(
      `/rules/${encodeURIComponent(name)}/params/${encodeURIComponent(key)}`,
      {
        method: "PUT",
        body: JSON.stringify(value),
        headers: { "Content-Type": "application/json" },
      },
    );
    return (await resp.json()).value;
  }

  async query(text: string): Promise<QueryResult> {
    const resp = await this.request("/query", {
      method: "POST",
      body: JSON.stringify({ q: text }),
      headers: { "Content-Type": "application/json" },
    });
    const doc = await resp.json();
    if ("things" in doc) {
      return { kind: "things", things: doc.things };
    }
    return { kind: "value", value: doc.value };
  }
}
