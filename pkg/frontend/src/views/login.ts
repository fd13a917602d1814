import { ApiError } from "../api.js";
import { el } from "../format.js";
import type { PortalContext } from "../context.js";

export function renderLogin(root: HTMLElement, ctx: PortalContext): () => void {
  const error = el("p", { class: "form-error", hidden: "" });
  const username = el("input", { name: "username", autocomplete: "username" });
  const credential = el("input", { name: "credential", type: "password" });
  const form = el(
    "form",
    { class: "card login-form" },
    el("h2", {}, "Sign in"),
    el("label", {}, "Username ", username),
    el("label", {}, "Password ", credential),
    el("button", { type: "submit" }, "Log in"),
    error,
  );
  form.addEventListener("submit", async (event) => {
    event.preventDefault();
    error.hidden = true;
    try {
      await ctx.client.login(username.value, credential.value);
      ctx.navigate("fleet");
    } catch (err) {
      error.textContent =
        err instanceof ApiError ? err.message : "gateway unreachable";
      error.hidden = false;
    }
  });
  root.replaceChildren(form);
  return () => undefined;
}
