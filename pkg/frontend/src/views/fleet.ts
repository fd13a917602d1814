// Global fleet dashboard: polls /v1/fleet and shows liveness, agent
// memory against the 200 MB reference line, and heartbeat age.

import { el, heartbeatAge, megabytes } from "../format.js";
import type { PortalContext } from "../context.js";
import type { FleetReply } from "../types.js";

export function renderFleet(root: HTMLElement, ctx: PortalContext): () => void {
  const banner = el("p", { class: "degraded-banner", hidden: "" }, "gateway unreachable; retrying");
  const table = el("section", { class: "fleet" });
  root.replaceChildren(el("h2", {}, "Fleet"), banner, table);

  function memoryBar(value: number | undefined, budget: number): HTMLElement {
    const bar = el("div", { class: "memory-bar" });
    const scale = budget * 2; // reference line lands mid-bar
    if (value !== undefined) {
      const fill = el("div", { class: "memory-fill" });
      fill.style.width = `${Math.min(100, (value / scale) * 100)}%`;
      fill.dataset.over = String(value >= budget);
      bar.append(fill);
    }
    const reference = el("div", { class: "memory-reference", title: `${budget} MB reference` });
    reference.style.left = `${(budget / scale) * 100}%`;
    bar.append(reference);
    return bar;
  }

  function render(reply: FleetReply): void {
    banner.hidden = true;
    if (!reply.entries.length) {
      table.replaceChildren(
        el(
          "div",
          { class: "empty-state" },
          el("p", {}, "No federated devices yet."),
          el("p", {}, "Integrate a testbed to see its fleet here."),
        ),
      );
      return;
    }
    const header = el(
      "tr",
      {},
      ...["Node", "Testbed / Lab", "State", "Liveness", "Agent memory", "Last heartbeat"].map(
        (h) => el("th", {}, h),
      ),
    );
    const rows = reply.entries.map((entry) =>
      el(
        "tr",
        { "data-node": entry.node_id },
        el("td", {}, entry.public_identifier, " ", el("code", {}, entry.namespace ?? "")),
        el("td", {}, `${entry.testbed.public_name} / ${entry.lab.name}`),
        el("td", {}, entry.federation_state),
        el(
          "td",
          {},
          el(
            "span",
            {
              class: "liveness-badge",
              "data-liveness": entry.liveness ?? "NONE",
            },
            entry.liveness ?? "not enrolled",
          ),
          entry.stale ? el("span", { class: "stale-flag", title: "no contact for 31+ days" }, " stale") : "",
        ),
        el(
          "td",
          {},
          megabytes(entry.metrics.agent_memory_mb),
          memoryBar(entry.metrics.agent_memory_mb, reply.agent_memory_budget_mb),
        ),
        el("td", {}, heartbeatAge(entry.last_heartbeat_age_s)),
      ),
    );
    table.replaceChildren(
      el("p", { class: "revision" }, `revision ${reply.revision}`),
      el("table", { class: "fleet-table" }, header, ...rows),
    );
  }

  async function poll(): Promise<void> {
    try {
      render(await ctx.client.fleet());
    } catch {
      banner.hidden = false;
    }
  }

  void poll();
  const timer = window.setInterval(() => void poll(), ctx.fleetPollMs);
  return () => clearInterval(timer);
}
