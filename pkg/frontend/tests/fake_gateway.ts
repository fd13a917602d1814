// In-memory stand-in for the control plane, faithful to the documented
// /v1 semantics the portal relies on: token auth, integrate validation
// with enumerated field paths, single-use scripts carrying the activation
// pair, half-open reservation conflicts, and the session lifecycle.
// Installed as a fetch stub; every request is captured for the
// API-surface assertions.

import type {
  FleetEntry,
  IntegrateRequest,
  Reservation,
  SessionView,
} from "../src/types.js";

export interface CapturedCall {
  method: string;
  url: string;
  headers: Record<string, string>;
  body: unknown;
}

interface FakeNode {
  node_id: string;
  testbed_id: string;
  public_identifier: string;
  control_mode: string;
  federation_state: string;
  namespace: string | null;
  activation_id: string;
  activation_code: string;
}

let counter = 0;
const nextId = (prefix: string) => `${prefix}-${(++counter).toString().padStart(4, "0")}`;

function overlap(aStart: number, aEnd: number, bStart: number, bEnd: number): boolean {
  return Math.max(aStart, bStart) < Math.min(aEnd, bEnd);
}

export class FakeGateway {
  calls: CapturedCall[] = [];
  users = new Map([
    ["owner", { password: "owner-pw", role: "OWNER", user_id: "user-owner" }],
    ["alice", { password: "alice-pw", role: "EXPERIMENTER", user_id: "user-alice" }],
  ]);
  tokens = new Map<string, string>(); // token -> username
  testbeds: { testbed_id: string; public_name: string; lab_id: string }[] = [];
  nodes = new Map<string, FakeNode>();
  reservations: Reservation[] = [];
  sessions = new Map<string, SessionView>();
  unreachable = false;
  now = Date.parse("2026-01-01T00:00:00Z");

  install(): void {
    globalThis.fetch = (async (input: string | URL, init?: RequestInit) => {
      const url = String(input);
      const method = (init?.method ?? "GET").toUpperCase();
      const headers = Object.fromEntries(
        Object.entries((init?.headers as Record<string, string>) ?? {}).map(([k, v]) => [
          k.toLowerCase(),
          v,
        ]),
      );
      const body = init?.body ? JSON.parse(String(init.body)) : undefined;
      this.calls.push({ method, url, headers, body });
      if (this.unreachable) throw new TypeError("fetch failed");
      const [status, payload] = this.route(method, url, headers, body);
      return {
        ok: status >= 200 && status < 300,
        status,
        text: async () => JSON.stringify(payload),
      } as Response;
    }) as typeof fetch;
  }

  // -- helpers for tests ---------------------------------------------------

  authOf(headers: Record<string, string>): string | null {
    const token = (headers["authorization"] ?? "").replace("Bearer ", "");
    return this.tokens.get(token) ?? null;
  }

  /** Simulates the operator running a deployment script on the host: the
   * embedded pair enrolls the node, which flips to FEDERATED. */
  runScript(script: string): string {
    const id = script.match(/--activation-id\s+(\S+)/)?.[1];
    const code = script.match(/--activation-code\s+(\S+)/)?.[1];
    const node = [...this.nodes.values()].find(
      (n) => n.activation_id === id && n.activation_code === code,
    );
    if (!node) throw new Error("script carries no valid activation pair");
    node.federation_state = "FEDERATED";
    node.namespace = `lab/testbed/${node.public_identifier.toLowerCase()}`;
    return node.node_id;
  }

  agentReportsReady(sessionId: string, url = "http://edge-host:36000/"): void {
    const session = this.sessions.get(sessionId);
    if (!session || (session.state !== "REQUESTED" && session.state !== "DEPLOYING")) return;
    session.state = "READY";
    session.access_url = url;
    session.ready_at = new Date(this.now).toISOString();
    session.access_latency_s = 1.5;
  }

  fleetEntries(): FleetEntry[] {
    return [...this.nodes.values()]
      .sort((a, b) => (a.node_id < b.node_id ? -1 : 1))
      .map((node) => ({
        node_id: node.node_id,
        public_identifier: node.public_identifier,
        federation_state: node.federation_state,
        namespace: node.namespace,
        testbed: { testbed_id: node.testbed_id, public_name: "Bed" },
        lab: { lab_id: "lab-1", name: "Lab" },
        agent_version: node.federation_state === "FEDERATED" ? "0.1.0" : null,
        liveness: node.federation_state === "FEDERATED" ? "ONLINE" : node.federation_state === "OFFLINE" ? "OFFLINE" : null,
        last_heartbeat_age_s: node.federation_state === "FEDERATED" ? 2.5 : null,
        metrics: node.federation_state === "REGISTERED" ? {} : { agent_memory_mb: 55 },
        stale: false,
      }));
  }

  // -- request routing ------------------------------------------------------

  private route(
    method: string,
    url: string,
    headers: Record<string, string>,
    body: any,
  ): [number, unknown] {
    const path = url.replace(/^https?:\/\/[^/]+/, "");
    const deny: [number, unknown] = [
      401,
      { code: "UNAUTHORIZED", message: "token required", details: [] },
    ];
    const match = (m: string, pattern: RegExp) => method === m && pattern.exec(path);

    if (match("POST", /^\/v1\/login$/)) {
      const user = this.users.get(body.username);
      if (!user || user.password !== body.credential) {
        return [401, { code: "INVALID_CREDENTIALS", message: "invalid username or credential", details: [] }];
      }
      const token = nextId("token");
      this.tokens.set(token, body.username);
      return [200, {
        token,
        user_id: user.user_id,
        username: body.username,
        role: user.role,
        expires_at: new Date(this.now + 12 * 3600_000).toISOString(),
      }];
    }

    const username = this.authOf(headers);
    if (!username) return deny;
    const user = this.users.get(username)!;

    if (match("POST", /^\/v1\/integrate$/)) {
      if (user.role !== "OWNER" && user.role !== "ADMIN") {
        return [403, { code: "FORBIDDEN", message: "requires role OWNER or higher", details: [] }];
      }
      const request = body as IntegrateRequest;
      const missing: string[] = [];
      if (!request.lab_name?.trim()) missing.push("lab_name");
      if (!request.public_name?.trim()) missing.push("public_name");
      if (!request.description?.trim()) missing.push("description");
      if (!request.nodes?.length) missing.push("nodes");
      request.nodes?.forEach((node, i) => {
        if (!node.public_identifier?.trim()) missing.push(`nodes[${i}].public_identifier`);
        if (!node.devices?.length) missing.push(`nodes[${i}].devices`);
      });
      if (missing.length) {
        return [422, { code: "VALIDATION", message: "integration request is incomplete", details: missing }];
      }
      const testbed_id = nextId("tb");
      this.testbeds.push({ testbed_id, public_name: request.public_name, lab_id: "lab-1" });
      const nodes = request.nodes.map((entry) => {
        const node: FakeNode = {
          node_id: nextId("node"),
          testbed_id,
          public_identifier: entry.public_identifier,
          control_mode: entry.control_mode,
          federation_state: "ACTIVATION_ISSUED",
          namespace: null,
          activation_id: nextId("act"),
          activation_code: nextId("secret"),
        };
        this.nodes.set(node.node_id, node);
        return {
          node_id: node.node_id,
          activation_id: node.activation_id,
          expires_at: new Date(this.now + 86_400_000).toISOString(),
          //  Odd spacing below is deliberate: the portal must render the
          //  script byte-identically, tabs and trailing spaces included.
          script: `#!/bin/sh\n# one-shot enrollment for ${node.public_identifier}\nset -eu\t \nagent enroll \\\n    --server-url http://plane.test \\\n    --activation-id ${node.activation_id} \\\n    --activation-code ${node.activation_code}\n`,
          checksum: "0".repeat(64),
        };
      });
      return [200, { lab_id: "lab-1", testbed_id, nodes }];
    }

    if (match("GET", /^\/v1\/testbeds$/)) return [200, this.testbeds];

    const nodesMatch = match("GET", /^\/v1\/testbeds\/([^/]+)\/nodes$/);
    if (nodesMatch) {
      return [200, [...this.nodes.values()].filter((n) => n.testbed_id === nodesMatch[1])];
    }

    const nodeMatch = match("GET", /^\/v1\/nodes\/([^/]+)$/);
    if (nodeMatch) {
      const node = this.nodes.get(nodeMatch[1]);
      if (!node) return [404, { code: "NOT_FOUND", message: "no such node", details: [] }];
      return [200, { node, edges: [], sessions: [] }];
    }

    const scheduleMatch = match("GET", /^\/v1\/nodes\/([^/]+)\/schedule$/);
    if (scheduleMatch) {
      return [200, this.reservations
        .filter((r) => r.node_ids.includes(scheduleMatch[1]) && r.status !== "CANCELLED")
        .sort((a, b) => Date.parse(a.start_at) - Date.parse(b.start_at))];
    }

    if (match("POST", /^\/v1\/reservations$/)) {
      const start = Date.parse(body.start_at);
      const end = Date.parse(body.end_at);
      if (!(start < end)) {
        return [422, { code: "BAD_INTERVAL", message: "start must precede end", details: [] }];
      }
      const unfederated = (body.node_ids as string[]).find(
        (n) => this.nodes.get(n)?.federation_state !== "FEDERATED",
      );
      if (unfederated) {
        return [409, {
          code: "NODE_NOT_FEDERATED",
          message: `node ${unfederated} is not FEDERATED`,
          details: [],
        }];
      }
      const clashes = this.reservations.filter(
        (r) =>
          r.status === "ACTIVE" &&
          r.node_ids.some((n) => body.node_ids.includes(n)) &&
          overlap(start, end, Date.parse(r.start_at), Date.parse(r.end_at)),
      );
      if (clashes.length) {
        return [409, {
          code: "CONFLICT",
          message: "requested interval overlaps existing reservations",
          details: clashes.map((r) => r.reservation_id),
        }];
      }
      const reservation: Reservation = {
        reservation_id: nextId("res"),
        user_id: user.user_id,
        node_ids: body.node_ids,
        start_at: new Date(start).toISOString(),
        end_at: new Date(end).toISOString(),
        status: "ACTIVE",
        created_at: new Date(this.now).toISOString(),
      };
      this.reservations.push(reservation);
      return [200, reservation];
    }

    if (match("POST", /^\/v1\/sessions$/)) {
      const node = this.nodes.get(body.node_id);
      if (!node) return [404, { code: "NOT_FOUND", message: "no such node", details: [] }];
      if (node.federation_state !== "FEDERATED") {
        return [409, { code: "NODE_OFFLINE", message: "node agent is OFFLINE", details: [] }];
      }
      const covering = this.reservations.find(
        (r) =>
          r.status === "ACTIVE" &&
          r.node_ids.includes(body.node_id) &&
          Date.parse(r.start_at) <= this.now &&
          this.now < Date.parse(r.end_at),
      );
      if (covering && covering.user_id !== user.user_id) {
        return [403, { code: "NOT_AUTHORIZED", message: "another reservation covers this node", details: [] }];
      }
      const session: SessionView = {
        session_id: nextId("sess"),
        reservation_id: covering?.reservation_id ?? nextId("res"),
        node_id: body.node_id,
        user_id: user.user_id,
        state: "REQUESTED",
        access_url: null,
        failure: null,
        requested_at: new Date(this.now).toISOString(),
        ready_at: null,
        ended_at: null,
        access_latency_s: null,
      };
      this.sessions.set(session.session_id, session);
      return [200, session];
    }

    const sessionMatch = match("GET", /^\/v1\/sessions\/([^/]+)$/);
    if (sessionMatch) {
      const session = this.sessions.get(sessionMatch[1]);
      return session
        ? [200, session]
        : [404, { code: "NOT_FOUND", message: "no such session", details: [] }];
    }

    const endMatch = match("DELETE", /^\/v1\/sessions\/([^/]+)$/);
    if (endMatch) {
      const session = this.sessions.get(endMatch[1]);
      if (!session) return [404, { code: "NOT_FOUND", message: "no such session", details: [] }];
      session.state = "ENDED";
      session.ended_at = new Date(this.now).toISOString();
      return [200, session];
    }

    if (match("GET", /^\/v1\/fleet$/)) {
      return [200, {
        revision: this.calls.length,
        heartbeat_interval_s: 5,
        agent_memory_budget_mb: 200,
        entries: this.fleetEntries(),
      }];
    }

    return [404, { code: "NOT_FOUND", message: `no route ${method} ${path}`, details: [] }];
  }
}

// The documented API surface; the capture test checks every portal request
// against this list (method + path pattern).
export const DOCUMENTED_ROUTES: [string, RegExp][] = [
  ["POST", /^\/v1\/login$/],
  ["GET", /^\/v1\/status$/],
  ["POST", /^\/v1\/integrate$/],
  ["GET", /^\/v1\/testbeds$/],
  ["GET", /^\/v1\/testbeds\/[^/]+\/nodes$/],
  ["GET", /^\/v1\/nodes\/[^/]+$/],
  ["GET", /^\/v1\/nodes\/[^/]+\/schedule$/],
  ["POST", /^\/v1\/reservations$/],
  ["DELETE", /^\/v1\/reservations\/[^/]+$/],
  ["POST", /^\/v1\/sessions$/],
  ["GET", /^\/v1\/sessions\/[^/]+$/],
  ["DELETE", /^\/v1\/sessions\/[^/]+$/],
  ["GET", /^\/v1\/fleet$/],
];

export function assertOnlyDocumentedRoutes(calls: CapturedCall[]): void {
  for (const call of calls) {
    const path = call.url.replace(/^https?:\/\/[^/]+/, "").split("?")[0];
    const matched = DOCUMENTED_ROUTES.some(
      ([method, pattern]) => method === call.method && pattern.test(path),
    );
    if (!matched) {
      throw new Error(`undocumented request: ${call.method} ${path}`);
    }
    if (!path.startsWith("/v1/")) {
      throw new Error(`request outside /v1: ${call.method} ${path}`);
    }
  }
}
