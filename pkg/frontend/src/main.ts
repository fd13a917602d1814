// Portal entry point: hash routing over four views, one shared gateway
// client, and a nav bar that reflects the signed-in user.

import { GatewayClient } from "./api.js";
import type { PortalContext, ViewName } from "./context.js";
import { el } from "./format.js";
import { renderFleet } from "./views/fleet.js";
import { renderIntegrate } from "./views/integrate.js";
import { renderLogin } from "./views/login.js";
import { renderReserve } from "./views/reserve.js";

const VIEWS: Record<ViewName, (root: HTMLElement, ctx: PortalContext) => () => void> = {
  login: renderLogin,
  integrate: renderIntegrate,
  reserve: renderReserve,
  fleet: renderFleet,
};

export function mountPortal(
  root: HTMLElement,
  overrides: Partial<Omit<PortalContext, "navigate">> = {},
): { navigate: (view: ViewName) => void; ctx: PortalContext } {
  const client = overrides.client ?? new GatewayClient();
  let teardown: () => void = () => undefined;

  const nav = el(
    "nav",
    { class: "topnav" },
    el("strong", {}, "fedplane"),
    el("a", { href: "#/fleet", "data-view": "fleet" }, "Fleet"),
    el("a", { href: "#/reserve", "data-view": "reserve" }, "Reserve"),
    el("a", { href: "#/integrate", "data-view": "integrate" }, "Integrate"),
    el("span", { class: "whoami" }),
  );
  const outlet = el("main", { class: "outlet" });
  root.replaceChildren(nav, outlet);

  const ctx: PortalContext = {
    client,
    navigate,
    fleetPollMs: overrides.fleetPollMs ?? 2000,
    nodePollMs: overrides.nodePollMs ?? 5000,
    sessionPollMs: overrides.sessionPollMs ?? 1000,
  };

  function navigate(view: ViewName): void {
    if (!client.token && view !== "login") view = "login";
    teardown();
    const who = nav.querySelector<HTMLElement>(".whoami");
    if (who) who.textContent = client.username ? `${client.username} (${client.role})` : "";
    teardown = VIEWS[view](outlet, ctx);
    if (typeof location !== "undefined") location.hash = `#/${view}`;
  }

  return { navigate, ctx };
}

declare global {
  interface Window {
    __portal?: ReturnType<typeof mountPortal>;
  }
}

if (typeof document !== "undefined" && document.getElementById("portal-root")) {
  const portal = mountPortal(document.getElementById("portal-root") as HTMLElement);
  window.__portal = portal;
  const fromHash = (): ViewName => {
    const name = location.hash.replace("#/", "") as ViewName;
    return name in VIEWS ? name : "login";
  };
  window.addEventListener("hashchange", () => portal.navigate(fromHash()));
  portal.navigate(fromHash());
}
