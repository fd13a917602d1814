// Owner flow: submit an integration request, get one single-use script per
// control interface, and watch each node flip to FEDERATED after the
// script runs on its host.

import { ApiError } from "../api.js";
import { el } from "../format.js";
import type { PortalContext } from "../context.js";
import type { IntegrateNodeIn, IntegrateReply } from "../types.js";

interface NodeFormRow {
  container: HTMLElement;
  identifier: HTMLInputElement;
  mode: HTMLSelectElement;
  deviceKind: HTMLInputElement;
  deviceModel: HTMLInputElement;
  deviceNotes: HTMLInputElement;
}

function nodeRow(index: number): NodeFormRow {
  const identifier = el("input", { name: `node-${index}-id` });
  const mode = el("select", { name: `node-${index}-mode` });
  mode.append(el("option", { value: "CENTRALIZED" }, "centralized"));
  mode.append(el("option", { value: "DISTRIBUTED" }, "distributed"));
  const deviceKind = el("input", { name: `node-${index}-device-kind` });
  const deviceModel = el("input", { name: `node-${index}-device-model` });
  const deviceNotes = el("input", { name: `node-${index}-device-notes` });
  const container = el(
    "fieldset",
    { class: "node-entry" },
    el("legend", {}, `Control interface ${index + 1}`),
    el("label", {}, "Public identifier ", identifier),
    el("label", {}, "Control mode ", mode),
    el("label", {}, "Device kind ", deviceKind),
    el("label", {}, "Device model ", deviceModel),
    el("label", {}, "Device notes ", deviceNotes),
    el("p", { class: "field-error", "data-field": `nodes[${index}]`, hidden: "" }),
  );
  return { container, identifier, mode, deviceKind, deviceModel, deviceNotes };
}

export function renderIntegrate(root: HTMLElement, ctx: PortalContext): () => void {
  const rows: NodeFormRow[] = [];
  const nodesBox = el("div", { class: "node-entries" });
  const addRow = () => {
    const row = nodeRow(rows.length);
    rows.push(row);
    nodesBox.append(row.container);
  };
  addRow();

  const labName = el("input", { name: "lab_name" });
  const publicName = el("input", { name: "public_name" });
  const description = el("textarea", { name: "description" });
  const formError = el("p", { class: "form-error", hidden: "" });
  const addButton = el("button", { type: "button" }, "Add control interface");
  addButton.addEventListener("click", addRow);

  const results = el("section", { class: "script-results" });
  const form = el(
    "form",
    { class: "card integrate-form" },
    el("h2", {}, "Integrate a testbed"),
    el("label", {}, "Laboratory name ", labName),
    el("label", {}, "Public testbed identifier ", publicName),
    el("label", {}, "Purpose and key capabilities ", description),
    nodesBox,
    addButton,
    el("button", { type: "submit" }, "Integrate"),
    formError,
  );

  const pollers: number[] = [];
  const stop = () => pollers.forEach((id) => clearInterval(id));

  function showValidation(err: ApiError): void {
    form.querySelectorAll<HTMLElement>(".field-error").forEach((box) => {
      box.hidden = true;
    });
    const unmatched: string[] = [];
    for (const detail of err.details) {
      const match = detail.match(/^nodes\[(\d+)\]/);
      if (match) {
        const box = form.querySelector<HTMLElement>(
          `.field-error[data-field="nodes[${match[1]}]"]`,
        );
        if (box) {
          box.textContent = box.hidden ? `missing: ${detail}` : `${box.textContent}, ${detail}`;
          box.hidden = false;
          continue;
        }
      }
      unmatched.push(detail);
    }
    formError.textContent = unmatched.length
      ? `missing fields: ${unmatched.join(", ")}`
      : err.message;
    formError.hidden = false;
  }

  function watchNodeState(nodeId: string, badge: HTMLElement): void {
    const timer = window.setInterval(async () => {
      try {
        const { node } = await ctx.client.getNode(nodeId);
        badge.textContent = node.federation_state;
        badge.dataset.state = node.federation_state;
        if (node.federation_state === "FEDERATED") clearInterval(timer);
      } catch {
        // transient; next poll retries
      }
    }, ctx.nodePollMs);
    pollers.push(timer);
  }

  function showScripts(reply: IntegrateReply): void {
    results.replaceChildren(
      el("h3", {}, "Deployment scripts"),
      el(
        "ol",
        { class: "two-step" },
        el("li", {}, "Copy the generated deployment script for each control interface."),
        el("li", {}, "Run it once on that host; the node reports in as federated."),
      ),
    );
    for (const node of reply.nodes) {
      // The script is rendered exactly as the gateway returned it.
      const scriptText = el("pre", { class: "script-text" });
      scriptText.textContent = node.script;
      const copy = el("button", { type: "button", class: "copy-script" }, "Copy script");
      copy.addEventListener("click", () => {
        void navigator.clipboard?.writeText(node.script);
        copy.textContent = "Copied";
      });
      const badge = el(
        "span",
        { class: "state-badge", "data-node": node.node_id, "data-state": "ACTIVATION_ISSUED" },
        "ACTIVATION_ISSUED",
      );
      results.append(
        el(
          "article",
          { class: "script-panel", "data-node": node.node_id },
          el("h4", {}, `Node ${node.node_id} `, badge),
          el("p", {}, `activation expires ${node.expires_at}`),
          copy,
          scriptText,
        ),
      );
      watchNodeState(node.node_id, badge);
    }
  }

  form.addEventListener("submit", async (event) => {
    event.preventDefault();
    formError.hidden = true;
    const nodes: IntegrateNodeIn[] = rows.map((row) => ({
      public_identifier: row.identifier.value,
      control_mode: row.mode.value as IntegrateNodeIn["control_mode"],
      devices: row.deviceKind.value
        ? [
            {
              kind: row.deviceKind.value,
              model: row.deviceModel.value,
              notes: row.deviceNotes.value,
            },
          ]
        : [],
    }));
    try {
      const reply = await ctx.client.integrate({
        lab_name: labName.value,
        public_name: publicName.value,
        description: description.value,
        nodes,
      });
      showScripts(reply);
    } catch (err) {
      if (err instanceof ApiError && err.code === "VALIDATION") showValidation(err);
      else if (err instanceof ApiError) {
        formError.textContent = `${err.code}: ${err.message}`;
        formError.hidden = false;
      } else {
        formError.textContent = "gateway unreachable";
        formError.hidden = false;
      }
    }
  });

  root.replaceChildren(form, results);
  return stop;
}
