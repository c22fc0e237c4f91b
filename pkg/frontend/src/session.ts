/** DOM-free controller for one scoring session: fetch next, submit, advance. */

import { Api, ApiError, SessionItem } from "./api.js";

export interface SessionView {
  item: SessionItem | null; // null once the session is complete
  done: boolean;
  error: string | null;
  retryable: boolean;
}

export class SessionController {
  view: SessionView = { item: null, done: false, error: null, retryable: false };

  constructor(private api: Api, readonly sessionId: string) {}

  /** Fetch the current unscored item; safe to call again after an error. */
  async load(): Promise<SessionView> {
    try {
      const item = await this.api.nextItem(this.sessionId);
      this.view = { item, done: item === null, error: null, retryable: false };
    } catch (e) {
      this.view = { ...this.view, ...describe(e), item: this.view.item };
    }
    return this.view;
  }

  /** Submit a score for the displayed item, then advance. The server acks
   * (and fsyncs) before we move on; a conflict means the item was already
   * scored, so we just resync. */
  async submit(score: number): Promise<SessionView> {
    const item = this.view.item;
    if (!item) return this.view;
    try {
      await this.api.submitScore(this.sessionId, item.item_id, score);
    } catch (e) {
      if (!(e instanceof ApiError && e.status === 409)) {
        this.view = { ...this.view, ...describe(e) };
        return this.view;
      }
    }
    return this.load();
  }

  /** "k of n scored" progress, for the item currently on screen. */
  progress(): { scored: number; total: number } | null {
    const item = this.view.item;
    return item ? { scored: item.scored, total: item.total } : null;
  }
}

function describe(e: unknown): { error: string; retryable: boolean } {
  if (e instanceof ApiError) {
    return { error: `server error ${e.status}: ${e.message}`, retryable: e.status >= 500 };
  }
  // network failure: the service is down or unreachable, nothing was lost
  return { error: "service unreachable, retry when it is back", retryable: true };
}
