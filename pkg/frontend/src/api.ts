/** Typed client for the dialog service HTTP+JSON API.
 *
 * The UI talks to the service exclusively through this module; there is no
 * build-time coupling to the Python package.
 */

export interface CreateSessionOptions {
  preset?: string;
  checkpoint?: string;
  seed?: number;
}

export interface CreateSessionResponse {
  id: string;
  disclosure: string;
  preset: string;
  opening: string | null;
}

export interface MessageResponse {
  reply: string;
  turn_index: number;
}

export interface TurnView {
  role: string;
  text: string;
  index: number;
}

export interface HistoryResponse {
  turns: TurnView[];
  full: boolean;
}

/** Non-2xx response; `detail` carries the service's error message. */
export class ApiError extends Error {
  constructor(readonly status: number, readonly detail: string) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }

  /** The session already has a reply in flight (retryable). */
  get isBusy(): boolean {
    return this.status === 409 && !this.detail.includes("full");
  }

  /** The session's memory is exhausted (terminal). */
  get isFull(): boolean {
    return this.status === 409 && this.detail.includes("full");
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ChatApi {
  constructor(
    readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = await response.json();
        if (typeof body?.detail === "string") detail = body.detail;
      } catch {
        // non-JSON error body: keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return response;
  }

  async health(): Promise<boolean> {
    try {
      const response = await this.fetchFn(this.baseUrl + "/healthz");
      return response.ok;
    } catch {
      return false;
    }
  }

  async createSession(
    options: CreateSessionOptions = {},
  ): Promise<CreateSessionResponse> {
    const response = await this.request("/sessions", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(options),
    });
    return response.json();
  }

  async sendMessage(sessionId: string, text: string): Promise<MessageResponse> {
    const response = await this.request(`/sessions/${sessionId}/messages`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ text }),
    });
    return response.json();
  }

  async history(sessionId: string): Promise<HistoryResponse> {
    const response = await this.request(`/sessions/${sessionId}/history`);
    return response.json();
  }

  /** Raw transcript JSONL, byte-for-byte as the service serialized it. */
  async exportTranscript(sessionId: string): Promise<string> {
    const response = await this.request(`/sessions/${sessionId}/export`);
    return response.text();
  }
}
