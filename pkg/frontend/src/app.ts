import { GatewayClient } from "./api.js";
import { compareScenarios, deltaLabel } from "./compare.js";
import { ScenarioPanel } from "./panel.js";
import { DEFAULT_POLL_INTERVAL_MS, PanelPoller } from "./poller.js";
import { TargetingDraft } from "./targeting.js";
import type { SchemaInfo } from "./types.js";

const state = {
  client: null as GatewayClient | null,
  schema: null as SchemaInfo | null,
  draft: null as TargetingDraft | null,
  panels: [] as ScenarioPanel[],
  pollers: [] as PanelPoller[],
  seq: 0,
};

function el<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) {
    throw new Error(`missing element #${id}`);
  }
  return found as T;
}

function renderPicker(): void {
  const host = el<HTMLDivElement>("picker");
  host.innerHTML = "";
  if (!state.schema || !state.draft) {
    return;
  }
  for (const feature of state.schema.features) {
    const group = document.createElement("fieldset");
    const legend = document.createElement("legend");
    legend.textContent = feature.name;
    group.appendChild(legend);
    for (let value = 1; value <= feature.cardinality; value += 1) {
      const button = document.createElement("button");
      button.textContent = String(value);
      button.className = state.draft.selected(feature.name).includes(value)
        ? "value on"
        : "value";
      button.addEventListener("click", () => {
        state.draft?.toggle(feature.name, value);
        renderPicker();
      });
      group.appendChild(button);
    }
    host.appendChild(group);
  }
  el<HTMLSpanElement>("draft-summary").textContent = state.draft.describe();
}

function renderPanels(): void {
  const host = el<HTMLDivElement>("panels");
  host.innerHTML = "";
  for (const panel of state.panels) {
    const card = document.createElement("div");
    card.className = `panel ${panel.phase}`;
    const latest = panel.latest;
    const estimate =
      latest === null
        ? "—"
        : `${Math.round(latest.estimate).toLocaleString()} ± ${Math.round(latest.margin).toLocaleString()}`;
    const progress = Math.round(panel.progressFraction() * 100);
    card.innerHTML = `
      <h3>${panel.label}</h3>
      <div class="estimate">${estimate}</div>
      <div class="bar"><div class="fill" style="width:${progress}%"></div></div>
      <div class="meta">
        <span class="badge ${panel.phase}">${panel.phase}</span>
        <span>${progress}% scanned</span>
        ${panel.lastError ? `<span class="error">${panel.lastError} (retrying)</span>` : ""}
      </div>`;
    host.appendChild(card);
  }
  renderComparison();
}

function renderComparison(): void {
  const host = el<HTMLDivElement>("comparison");
  const view = compareScenarios(state.panels);
  if (view.deltas.length === 0) {
    host.textContent = "";
    return;
  }
  const lines = view.deltas.map(
    (d) => `<tr><td>${d.a}</td><td>${d.b}</td><td>${deltaLabel(d)}</td></tr>`,
  );
  host.innerHTML = `<table><tr><th>scenario</th><th>vs</th><th>difference</th></tr>${lines.join("")}</table>`;
}

async function launchForecast(): Promise<void> {
  if (!state.client || !state.draft) {
    return;
  }
  state.seq += 1;
  const panel = new ScenarioPanel(`scenario ${state.seq}`, state.draft.toQueryBody());
  panel.markLaunching();
  state.panels.push(panel);
  renderPanels();
  try {
    const reportId = await state.client.createReport({ query: panel.queryBody });
    panel.attachReport(reportId);
    const poller = new PanelPoller(
      state.client,
      panel,
      DEFAULT_POLL_INTERVAL_MS,
      () => Date.now(),
    );
    state.pollers.push(poller);
    poller.start();
  } catch (err) {
    panel.applyError(err instanceof Error ? err.message : String(err));
  }
  renderPanels();
}

async function connect(): Promise<void> {
  const base = el<HTMLInputElement>("gateway-url").value.replace(/\/+$/, "");
  state.client = new GatewayClient(base);
  try {
    state.schema = await state.client.schema();
    state.draft = new TargetingDraft(state.schema);
    el<HTMLSpanElement>("status").textContent = `connected (${state.schema.features.length} features)`;
    renderPicker();
  } catch (err) {
    el<HTMLSpanElement>("status").textContent = String(err);
  }
}

export function boot(): void {
  el<HTMLButtonElement>("connect").addEventListener("click", () => void connect());
  el<HTMLButtonElement>("launch").addEventListener("click", () => void launchForecast());
  el<HTMLButtonElement>("reset").addEventListener("click", () => {
    state.draft?.clear();
    renderPicker();
  });
  setInterval(renderPanels, 250);
}

if (typeof document !== "undefined" && document.getElementById("connect")) {
  boot();
}
