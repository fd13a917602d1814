// Wire shapes of the /v1 gateway API. Every field here comes straight off
// a gateway response; the portal never fabricates IDs or states.

export interface LoginReply {
  token: string;
  user_id: string;
  username: string;
  role: "EXPERIMENTER" | "OWNER" | "ADMIN";
  expires_at: string;
}

export interface ErrorEnvelope {
  code: string;
  message: string;
  details: string[];
}

export interface DeviceIn {
  kind: string;
  model: string;
  notes: string;
}

export interface IntegrateNodeIn {
  public_identifier: string;
  control_mode: "CENTRALIZED" | "DISTRIBUTED";
  devices: DeviceIn[];
}

export interface IntegrateRequest {
  lab_name: string;
  public_name: string;
  description: string;
  nodes: IntegrateNodeIn[];
}

export interface IntegratedNode {
  node_id: string;
  activation_id: string;
  expires_at: string;
  script: string;
  checksum: string;
}

export interface IntegrateReply {
  lab_id: string;
  testbed_id: string;
  nodes: IntegratedNode[];
}

export interface NodeView {
  node_id: string;
  testbed_id: string;
  public_identifier: string;
  control_mode: string;
  federation_state: "REGISTERED" | "ACTIVATION_ISSUED" | "FEDERATED" | "OFFLINE";
  namespace: string | null;
  created_at: string;
}

export interface Reservation {
  reservation_id: string;
  user_id: string;
  node_ids: string[];
  start_at: string;
  end_at: string;
  status: "ACTIVE" | "CANCELLED" | "COMPLETED";
  created_at: string;
}

export interface SessionView {
  session_id: string;
  reservation_id: string;
  node_id: string;
  user_id: string;
  state: "REQUESTED" | "DEPLOYING" | "READY" | "ENDED" | "FAILED";
  access_url: string | null;
  failure: string | null;
  requested_at: string;
  ready_at: string | null;
  ended_at: string | null;
  access_latency_s: number | null;
}

export interface FleetEntry {
  node_id: string;
  public_identifier: string;
  federation_state: string;
  namespace: string | null;
  testbed: { testbed_id: string; public_name: string };
  lab: { lab_id: string; name: string };
  agent_version: string | null;
  liveness: "ONLINE" | "DEGRADED" | "OFFLINE" | null;
  last_heartbeat_age_s: number | null;
  metrics: { agent_memory_mb?: number; host_memory_mb?: number; cpu_percent?: number };
  stale: boolean;
}

export interface FleetReply {
  revision: number;
  heartbeat_interval_s: number;
  agent_memory_budget_mb: number;
  entries: FleetEntry[];
}
