// Pure DOM builders. Every number placed in the document is copied from a
// service payload field through fmt() -- no arithmetic happens here, which is
// what makes the pass-through property testable.

import type {
  BubbleReportPayload, ControlResponse, MetricSummary, SlatePayload,
} from "./api.js";

export function fmt(value: number | null | undefined): string {
  if (value === null || value === undefined) return "-";
  return Number.isInteger(value) ? String(value) : value.toFixed(4);
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, className?: string, text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function renderSlate(slate: SlatePayload, highlight: Set<string> = new Set()): HTMLElement {
  const list = el("ol", "slate");
  for (const item of slate.items) {
    const row = el("li", highlight.has(item.item_id) ? "slate-item changed" : "slate-item");
    row.dataset.itemId = item.item_id;
    const name = el("span", "item-name", item.item_id);
    const cats = el("span", "item-cats", item.categories.join(", "));
    row.append(name, cats);
    if (item.score !== undefined) {
      const score = el("span", "item-score", fmt(item.score));
      score.dataset.testid = "item-score";
      row.append(score);
    }
    list.append(row);
  }
  return list;
}

export function renderSeverityBadge(severity: number): HTMLElement {
  const badge = el("span", `severity severity-${severity}`, `bubble severity ${severity}/5`);
  badge.dataset.testid = "severity-badge";
  badge.dataset.severity = String(severity);
  return badge;
}

function gauge(label: string, testid: string, value: number): HTMLElement {
  const wrap = el("div", "gauge");
  wrap.append(el("span", "gauge-label", label));
  const amount = el("span", "gauge-value", fmt(value));
  amount.dataset.testid = testid;
  wrap.append(amount);
  return wrap;
}

export function renderBubbleReport(payload: BubbleReportPayload): HTMLElement {
  const root = el("section", "bubble-report");
  root.append(renderSeverityBadge(payload.report.severity));
  const gauges = el("div", "gauges");
  gauges.append(
    gauge("coverage", "gauge-coverage", payload.report.coverage),
    gauge("isolation", "gauge-iso", payload.report.iso_index),
    gauge("majority domination", "gauge-mcd", payload.report.mcd),
  );
  root.append(gauges);
  root.append(renderCategoryBars(payload));
  return root;
}

/** Paired history-vs-recommendation bars per category. Bar widths are the
 * payload shares scaled to percent for CSS; the printed numbers are the raw
 * payload values. */
export function renderCategoryBars(payload: BubbleReportPayload): HTMLElement {
  const root = el("div", "category-bars");
  payload.categories.forEach((name, idx) => {
    const hist = payload.history_distribution[idx] ?? 0;
    const rec = payload.recommendation_distribution[idx] ?? 0;
    if (hist === 0 && rec === 0) return;
    const row = el("div", "category-row");
    row.dataset.category = name;
    row.append(el("span", "category-name", name));
    const histBar = el("div", "bar bar-history");
    histBar.style.width = `${hist * 100}%`;
    histBar.title = `history ${fmt(hist)}`;
    const recBar = el("div", "bar bar-recommendation");
    recBar.style.width = `${rec * 100}%`;
    recBar.title = `recommendations ${fmt(rec)}`;
    const histValue = el("span", "bar-value", fmt(hist));
    histValue.dataset.testid = `hist-${name}`;
    const recValue = el("span", "bar-value", fmt(rec));
    recValue.dataset.testid = `rec-${name}`;
    row.append(histBar, histValue, recBar, recValue);
    root.append(row);
  });
  return root;
}

function metricCells(prefix: string, summary: MetricSummary): HTMLElement[] {
  const cells: HTMLElement[] = [];
  for (const [key, value] of Object.entries(summary) as [string, number | null][]) {
    const cell = el("span", "delta-cell", fmt(value));
    cell.dataset.testid = `${prefix}-${key}`;
    cells.push(cell);
  }
  return cells;
}

export function renderDelta(response: ControlResponse): HTMLElement {
  const root = el("section", "delta-summary");
  const entered = el("div", "delta-entered",
    response.delta.entered.length ? `in: ${response.delta.entered.join(", ")}` : "in: none");
  entered.dataset.testid = "delta-entered";
  const left = el("div", "delta-left",
    response.delta.left.length ? `out: ${response.delta.left.join(", ")}` : "out: none");
  left.dataset.testid = "delta-left";
  root.append(entered, left);
  const table = el("div", "delta-table");
  table.append(el("span", "delta-head", "before"), ...metricCells("before", response.delta.before));
  table.append(el("span", "delta-head", "after"), ...metricCells("after", response.delta.after));
  root.append(table);
  return root;
}

/** Side-by-side baseline and adjusted slates with entering/leaving marks. */
export function renderComparison(response: ControlResponse): HTMLElement {
  const root = el("section", "comparison");
  const baseIds = new Set(response.baseline.items.map((i) => i.item_id));
  const adjIds = new Set(response.adjusted.items.map((i) => i.item_id));
  const leftPane = el("div", "pane pane-baseline");
  leftPane.append(el("h3", undefined, "baseline"));
  leftPane.append(renderSlate(response.baseline, new Set(
    response.baseline.items.map((i) => i.item_id).filter((id) => !adjIds.has(id)),
  )));
  const rightPane = el("div", "pane pane-adjusted");
  rightPane.append(el("h3", undefined, "adjusted"));
  rightPane.append(renderSlate(response.adjusted, new Set(
    response.adjusted.items.map((i) => i.item_id).filter((id) => !baseIds.has(id)),
  )));
  root.append(leftPane, rightPane, renderDelta(response));
  return root;
}

export function renderError(message: string, retry?: () => void): HTMLElement {
  const root = el("div", "error-box");
  root.dataset.testid = "error-box";
  root.append(el("span", "error-message", message));
  if (retry) {
    const button = el("button", "retry", "retry");
    button.addEventListener("click", retry);
    root.append(button);
  }
  return root;
}
