// Typed client for the recommendation service. The panel never computes a
// metric itself: every number it shows comes from one of these payloads.

export interface SlateItem {
  item_id: string;
  categories: string[];
  score?: number;
}

export interface SlatePayload {
  user_id: string;
  items: SlateItem[];
  provenance: Record<string, unknown>;
  truncated: boolean;
}

export interface BubbleReport {
  coverage: number;
  iso_index: number;
  mcd: number;
  severity: number;
  window: [number, number] | null;
}

export interface BubbleReportPayload {
  user_id: string;
  report: BubbleReport;
  history_distribution: number[];
  recommendation_distribution: number[];
  categories: string[];
}

export interface MetricSummary {
  coverage: number;
  mcd: number | null;
  tcd: number | null;
}

export interface ControlResponse {
  baseline: SlatePayload;
  adjusted: SlatePayload;
  delta: {
    entered: string[];
    left: string[];
    before: MetricSummary;
    after: MetricSummary;
  };
}

export interface HistoryEvent {
  item_id: string;
  timestamp: number;
  categories: string[];
}

export type CommandType = "user_fine" | "user_coarse" | "item_fine" | "item_coarse";

export interface CommandPayload {
  type: CommandType;
  target?: string;
  alpha: number;
  beta?: number;
  k_targets?: number;
  use_prediction?: boolean;
}

export class ApiError extends Error {
  constructor(public status: number, public code: string, message: string) {
    super(message);
  }
}

async function request<T>(base: string, path: string, init?: RequestInit): Promise<T> {
  const response = await fetch(base + path, init);
  const body = await response.json();
  if (!response.ok) {
    throw new ApiError(response.status, body.code ?? "error", body.message ?? response.statusText);
  }
  return body as T;
}

export class ServiceClient {
  constructor(private base: string) {}

  recommendations(userId: string, k = 10): Promise<SlatePayload> {
    return request(this.base, `/users/${encodeURIComponent(userId)}/recommendations?k=${k}`);
  }

  bubbleReport(userId: string): Promise<BubbleReportPayload> {
    return request(this.base, `/users/${encodeURIComponent(userId)}/bubble-report`);
  }

  history(userId: string): Promise<{ user_id: string; events: HistoryEvent[]; features: string[] }> {
    return request(this.base, `/users/${encodeURIComponent(userId)}/history`);
  }

  categories(): Promise<{ categories: string[] }> {
    return request(this.base, "/catalog/categories");
  }

  userFeatures(): Promise<{ groups: Record<string, string[]> }> {
    return request(this.base, "/catalog/user-features");
  }

  applyControl(userId: string, command: CommandPayload): Promise<ControlResponse> {
    return request(this.base, `/users/${encodeURIComponent(userId)}/controls`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(command),
    });
  }
}
