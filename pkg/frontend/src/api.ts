// Gateway client. Every request the portal makes goes through this module
// and therefore through the documented /v1 API — nothing else. A capture
// hook records each call so tests can prove that property.

import type {
  ErrorEnvelope,
  FleetReply,
  IntegrateReply,
  IntegrateRequest,
  LoginReply,
  NodeView,
  Reservation,
  SessionView,
} from "./types.js";

export const API_PREFIX = "/v1";

export interface CapturedRequest {
  method: string;
  url: string;
}

export class ApiError extends Error {
  readonly code: string;
  readonly details: string[];
  readonly status: number;

  constructor(status: number, envelope: ErrorEnvelope) {
    super(envelope.message);
    this.status = status;
    this.code = envelope.code;
    this.details = envelope.details ?? [];
  }
}

let requestLog: CapturedRequest[] = [];

export function capturedRequests(): readonly CapturedRequest[] {
  return requestLog;
}

export function clearCapturedRequests(): void {
  requestLog = [];
}

function newIdempotencyKey(): string {
  const bytes = new Uint8Array(12);
  crypto.getRandomValues(bytes);
  return Array.from(bytes, (b) => b.toString(16).padStart(2, "0")).join("");
}

export class GatewayClient {
  token: string | null = null;
  username: string | null = null;
  userId: string | null = null;
  role: string | null = null;

  constructor(private readonly base: string = "") {}

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    idempotent = false,
  ): Promise<T> {
    const url = `${this.base}${API_PREFIX}${path}`;
    requestLog.push({ method, url });
    const headers: Record<string, string> = {};
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    if (body !== undefined) headers["Content-Type"] = "application/json";
    if (idempotent) headers["Idempotency-Key"] = newIdempotencyKey();
    const response = await fetch(url, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    const parsed = text ? JSON.parse(text) : {};
    if (!response.ok) {
      throw new ApiError(response.status, parsed as ErrorEnvelope);
    }
    return parsed as T;
  }

  async login(username: string, credential: string): Promise<LoginReply> {
    const reply = await this.request<LoginReply>("POST", "/login", {
      username,
      credential,
    });
    this.token = reply.token;
    this.username = reply.username;
    this.userId = reply.user_id;
    this.role = reply.role;
    return reply;
  }

  logout(): void {
    this.token = null;
    this.username = null;
    this.userId = null;
    this.role = null;
  }

  status(): Promise<{ ok: boolean; server_time: string }> {
    return this.request("GET", "/status");
  }

  integrate(request: IntegrateRequest): Promise<IntegrateReply> {
    return this.request("POST", "/integrate", request, true);
  }

  listTestbeds(): Promise<{ testbed_id: string; public_name: string; lab_id: string }[]> {
    return this.request("GET", "/testbeds");
  }

  listNodes(testbedId: string): Promise<NodeView[]> {
    return this.request("GET", `/testbeds/${testbedId}/nodes`);
  }

  getNode(nodeId: string): Promise<{ node: NodeView }> {
    return this.request("GET", `/nodes/${nodeId}`);
  }

  schedule(nodeId: string): Promise<Reservation[]> {
    return this.request("GET", `/nodes/${nodeId}/schedule`);
  }

  reserve(nodeIds: string[], startAt: string, endAt: string): Promise<Reservation> {
    return this.request(
      "POST",
      "/reservations",
      { node_ids: nodeIds, start_at: startAt, end_at: endAt },
      true,
    );
  }

  cancelReservation(reservationId: string): Promise<Reservation> {
    return this.request("DELETE", `/reservations/${reservationId}`);
  }

  connect(nodeId: string): Promise<SessionView> {
    return this.request("POST", "/sessions", { node_id: nodeId }, true);
  }

  getSession(sessionId: string): Promise<SessionView> {
    return this.request("GET", `/sessions/${sessionId}`);
  }

  disconnect(sessionId: string): Promise<SessionView> {
    return this.request("DELETE", `/sessions/${sessionId}`);
  }

  fleet(): Promise<FleetReply> {
    return this.request("GET", "/fleet");
  }
}
