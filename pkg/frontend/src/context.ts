import type { GatewayClient } from "./api.js";

export type ViewName = "login" | "integrate" | "reserve" | "fleet";

export interface PortalContext {
  client: GatewayClient;
  navigate: (view: ViewName) => void;
  // Poll cadences (ms); tests shrink these.
  fleetPollMs: number;
  nodePollMs: number;
  sessionPollMs: number;
}
