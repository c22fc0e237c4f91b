/** Typed client for the guideloop annotation service HTTP API. */

export interface SessionItem {
  item_id: string;
  scan_id: string;
  scan_summary: string;
  guidance_text: string;
  scored: number;
  total: number;
}

export interface SessionState {
  session_id: string;
  items: { item_id: string }[];
  scores: Record<string, number>;
  state: "open" | "complete" | "cancelled";
}

export interface RoundMetrics {
  round: number;
  nll_validation: number;
  surrogate_rmse_validation: number;
  mean_judge_score_heldout: number;
  decision_accuracy_heldout: number;
  mean_surrogate_score_finetune: number;
}

export interface LoopStatus {
  round: number;
  running: boolean;
  metrics: RoundMetrics | null;
  pending_session: string | null;
  error: string | null;
}

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class Api {
  constructor(
    private base: string = "",
    private fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const resp = await this.fetchFn(this.base + path, init);
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        detail = (await resp.json()).detail ?? detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(resp.status, detail);
    }
    return resp;
  }

  private post(path: string, body?: unknown): Promise<Response> {
    return this.request(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
  }

  async createSession(
    items: Omit<SessionItem, "scored" | "total">[],
  ): Promise<string> {
    const resp = await this.post("/sessions", { items });
    return (await resp.json()).session_id;
  }

  async sessionState(sessionId: string): Promise<SessionState> {
    const resp = await this.request(`/sessions/${sessionId}`);
    return resp.json();
  }

  /** Next unscored item, or null when the session is complete (204). */
  async nextItem(sessionId: string): Promise<SessionItem | null> {
    const resp = await this.request(`/sessions/${sessionId}/next`);
    if (resp.status === 204) return null;
    return resp.json();
  }

  async submitScore(
    sessionId: string,
    itemId: string,
    score: number,
  ): Promise<{ accepted: boolean; clamped: boolean }> {
    const resp = await this.post(`/sessions/${sessionId}/scores`, {
      item_id: itemId,
      score,
    });
    return resp.json();
  }

  async loopStatus(): Promise<LoopStatus> {
    const resp = await this.request("/loop/status");
    return resp.json();
  }

  async loopStep(): Promise<void> {
    await this.post("/loop/step");
  }
}
