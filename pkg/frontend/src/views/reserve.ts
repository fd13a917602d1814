// Experimenter flow: browse a node's schedule, book a slot, and connect
// inside it; a READY session renders its access link for a new tab.

import { ApiError } from "../api.js";
import { el, localSlot } from "../format.js";
import type { PortalContext } from "../context.js";
import type { NodeView, Reservation, SessionView } from "../types.js";

export function renderReserve(root: HTMLElement, ctx: PortalContext): () => void {
  const pollers: number[] = [];
  const stop = () => pollers.forEach((id) => clearInterval(id));

  const nodePicker = el("select", { name: "node" });
  const scheduleBox = el("section", { class: "schedule" });
  const toast = el("p", { class: "toast", hidden: "" });
  const sessionBox = el("section", { class: "session-box" });

  const startInput = el("input", { name: "start_at", placeholder: "2026-01-01T10:00:00Z" });
  const endInput = el("input", { name: "end_at", placeholder: "2026-01-01T11:00:00Z" });
  const bookButton = el("button", { type: "submit" }, "Reserve");
  const connectButton = el("button", { type: "button", class: "connect", disabled: "" }, "Connect");

  let nodes: NodeView[] = [];
  let schedule: Reservation[] = [];

  function selectedNode(): NodeView | undefined {
    return nodes.find((n) => n.node_id === nodePicker.value);
  }

  function renderSchedule(): void {
    const items = schedule.map((r) =>
      el(
        "li",
        {
          class: r.status === "ACTIVE" ? "slot active" : "slot",
          "data-owned": String(r.user_id === ctx.client.userId),
          "data-reservation": r.reservation_id,
        },
        `${localSlot(r.start_at, r.end_at)} [${r.status}]`,
      ),
    );
    scheduleBox.replaceChildren(
      el("h3", {}, "Schedule"),
      items.length ? el("ul", { class: "slots" }, ...items) : el("p", {}, "No reservations yet."),
    );
  }

  async function refreshSchedule(): Promise<void> {
    const node = selectedNode();
    if (!node) return;
    schedule = await ctx.client.schedule(node.node_id);
    renderSchedule();
    updateConnectGate();
  }

  function updateConnectGate(): void {
    const node = selectedNode();
    const offline = !node || node.federation_state !== "FEDERATED";
    if (offline) {
      connectButton.setAttribute("disabled", "");
      connectButton.title = "node is offline";
    } else {
      connectButton.removeAttribute("disabled");
      connectButton.title = "";
    }
  }

  async function loadNodes(): Promise<void> {
    const testbeds = await ctx.client.listTestbeds();
    nodes = [];
    for (const tb of testbeds) {
      nodes.push(...(await ctx.client.listNodes(tb.testbed_id)));
    }
    nodePicker.replaceChildren(
      ...nodes.map((n) =>
        el("option", { value: n.node_id }, `${n.public_identifier} (${n.federation_state})`),
      ),
    );
    await refreshSchedule();
  }

  function watchSession(session: SessionView): void {
    const renderSession = (s: SessionView) => {
      if (s.state === "READY" && s.access_url) {
        const link = el(
          "a",
          { href: s.access_url, target: "_blank", rel: "noopener", class: "access-link" },
          `Open session ${s.session_id}`,
        );
        const disconnect = el("button", { type: "button", class: "disconnect" }, "Disconnect");
        disconnect.addEventListener("click", async () => {
          await ctx.client.disconnect(s.session_id);
          sessionBox.replaceChildren(el("p", {}, "session ended"));
        });
        sessionBox.replaceChildren(
          el("p", {}, `session ${s.state}`),
          link,
          disconnect,
        );
      } else {
        sessionBox.replaceChildren(
          el("p", {}, `session ${s.state}${s.failure ? `: ${s.failure}` : ""}`),
        );
      }
    };
    renderSession(session);
    if (session.state === "READY" || session.state === "FAILED") return;
    const timer = window.setInterval(async () => {
      const current = await ctx.client.getSession(session.session_id);
      renderSession(current);
      if (current.state !== "REQUESTED" && current.state !== "DEPLOYING") {
        clearInterval(timer);
      }
    }, ctx.sessionPollMs);
    pollers.push(timer);
  }

  const form = el(
    "form",
    { class: "card reserve-form" },
    el("h2", {}, "Reserve and connect"),
    el("label", {}, "Node ", nodePicker),
    el("label", {}, "From (UTC) ", startInput),
    el("label", {}, "To (UTC) ", endInput),
    bookButton,
    connectButton,
    toast,
  );

  form.addEventListener("submit", async (event) => {
    event.preventDefault();
    toast.hidden = true;
    const node = selectedNode();
    if (!node) return;
    try {
      await ctx.client.reserve([node.node_id], startInput.value, endInput.value);
      await refreshSchedule();
    } catch (err) {
      if (err instanceof ApiError && err.code === "CONFLICT") {
        const clashes = schedule.filter((r) => err.details.includes(r.reservation_id));
        const described = clashes
          .map((r) => localSlot(r.start_at, r.end_at))
          .join("; ");
        toast.textContent = `slot conflicts with existing booking: ${described || err.details.join(", ")}`;
      } else if (err instanceof ApiError) {
        toast.textContent = `${err.code}: ${err.message}`;
      } else {
        toast.textContent = "gateway unreachable";
      }
      toast.hidden = false;
    }
  });

  connectButton.addEventListener("click", async () => {
    toast.hidden = true;
    const node = selectedNode();
    if (!node) return;
    try {
      const session = await ctx.client.connect(node.node_id);
      watchSession(session);
    } catch (err) {
      toast.textContent =
        err instanceof ApiError ? `${err.code}: ${err.message}` : "gateway unreachable";
      toast.hidden = false;
    }
  });

  nodePicker.addEventListener("change", () => void refreshSchedule());

  root.replaceChildren(form, scheduleBox, sessionBox);
  void loadNodes();
  return stop;
}
