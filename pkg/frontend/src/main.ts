import { Client } from "./api.js";
import { createViewer } from "./viewer.js";

const DEFAULT_BASE = "http://127.0.0.1:8088";

function boot(): void {
  const app = document.getElementById("app");
  if (!app) throw new Error("missing #app");

  const bar = document.createElement("div");
  bar.className = "connect-bar";
  const baseInput = document.createElement("input");
  baseInput.type = "text";
  baseInput.value = DEFAULT_BASE;
  baseInput.size = 32;
  const connectBtn = document.createElement("button");
  connectBtn.textContent = "connect";
  bar.append("service ", baseInput, " ", connectBtn);

  const mount = document.createElement("div");
  app.append(bar, mount);

  connectBtn.addEventListener("click", () => {
    mount.innerHTML = "";
    const inner = document.createElement("div");
    mount.appendChild(inner);
    const viewer = createViewer(inner, new Client(baseInput.value));
    void viewer.connect();
  });
  connectBtn.click();
}

boot();
