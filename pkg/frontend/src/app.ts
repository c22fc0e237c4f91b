/** Browser wiring: loop dashboard plus the scoring panel for pending sessions.
 * Every number on screen comes from a service response; the poll loop is the
 * single source of truth for button state. */

import { Api, ApiError, LoopStatus, RoundMetrics } from "./api.js";
import { SessionController } from "./session.js";

const POLL_MS = 1500;
const TRACKED: (keyof RoundMetrics)[] = [
  "mean_judge_score_heldout",
  "surrogate_rmse_validation",
  "decision_accuracy_heldout",
];

const api = new Api("");
const history = new Map<number, RoundMetrics>();
let controller: SessionController | null = null;

function el<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

function sparkline(values: number[]): string {
  if (values.length === 0) return "";
  const w = 160;
  const h = 36;
  const lo = Math.min(...values);
  const hi = Math.max(...values);
  const span = hi - lo || 1;
  const pts = values
    .map((v, i) => {
      const x = values.length === 1 ? w / 2 : (i / (values.length - 1)) * w;
      const y = h - 4 - ((v - lo) / span) * (h - 8);
      return `${x.toFixed(1)},${y.toFixed(1)}`;
    })
    .join(" ");
  return (
    `<svg width="${w}" height="${h}" viewBox="0 0 ${w} ${h}">` +
    `<polyline points="${pts}" fill="none" stroke="#4a7" stroke-width="2"/></svg>`
  );
}

function renderMetrics(): void {
  const rounds = [...history.keys()].sort((a, b) => a - b);
  const rows = TRACKED.map((name) => {
    const values = rounds.map((r) => history.get(r)![name]);
    const last = values.length ? values[values.length - 1].toFixed(4) : "-";
    return (
      `<tr><td>${name.replace(/_/g, " ")}</td>` +
      `<td class="spark">${sparkline(values)}</td><td>${last}</td></tr>`
    );
  }).join("");
  el("metrics").innerHTML =
    `<table><tr><th>metric</th><th>trend</th><th>last</th></tr>${rows}</table>`;
}

function renderStatus(status: LoopStatus): void {
  el("round").textContent = String(status.round);
  el("loop-error").textContent = status.error ?? "";
  const busy = status.running || status.pending_session !== null;
  el<HTMLButtonElement>("step").disabled = busy;
  el("loop-state").textContent = status.running
    ? "round running"
    : status.pending_session
      ? `waiting on session ${status.pending_session}`
      : "idle";
  if (status.metrics) history.set(status.metrics.round, status.metrics);
  renderMetrics();
}

async function renderSession(): Promise<void> {
  const panel = el("session");
  if (!controller) {
    panel.hidden = true;
    return;
  }
  const view = controller.view;
  panel.hidden = false;
  el("session-error").textContent = view.error ?? "";
  el<HTMLButtonElement>("retry").hidden = !view.error;
  if (view.done) {
    el("item").hidden = true;
    el("session-done").hidden = false;
    return;
  }
  el("session-done").hidden = true;
  if (!view.item) return;
  el("item").hidden = false;
  el("scan-summary").textContent = view.item.scan_summary;
  el("guidance").textContent = view.item.guidance_text;
  const p = controller.progress();
  el("progress").textContent = p ? `${p.scored} of ${p.total} scored` : "";
}

function sliderValue(): number {
  return Number(el<HTMLInputElement>("score").value);
}

async function poll(): Promise<void> {
  try {
    const status = await api.loopStatus();
    renderStatus(status);
    if (status.pending_session) {
      if (!controller || controller.sessionId !== status.pending_session) {
        controller = new SessionController(api, status.pending_session);
        await controller.load();
      }
    } else {
      controller = null;
    }
    await renderSession();
    el("conn").textContent = "";
  } catch {
    el("conn").textContent = "service unreachable, retrying";
  }
}

export function start(): void {
  el("step").addEventListener("click", async () => {
    try {
      await api.loopStep();
    } catch (e) {
      // conflict: a round or session is already in flight; the poll refreshes
      el("loop-error").textContent = e instanceof ApiError ? e.message : String(e);
    }
    await poll();
  });
  el("submit").addEventListener("click", async () => {
    if (!controller) return;
    await controller.submit(sliderValue());
    await renderSession();
  });
  el("retry").addEventListener("click", async () => {
    if (!controller) return;
    await controller.load();
    await renderSession();
  });
  el<HTMLInputElement>("score").addEventListener("input", () => {
    el("score-value").textContent = sliderValue().toFixed(2);
  });
  void poll();
  setInterval(() => void poll(), POLL_MS);
}

start();
