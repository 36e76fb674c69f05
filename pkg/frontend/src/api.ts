/** Typed client over the session service REST API (the UI's only backend). */

import type {
  CreateSessionRequest,
  GalleryInfo,
  SessionView,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class SessionApi {
  private readonly base: string;
  private readonly fetchFn: FetchLike;

  constructor(baseUrl: string, fetchFn?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  listGalleries(): Promise<GalleryInfo[]> {
    return this.request<GalleryInfo[]>("GET", "/v1/galleries");
  }

  createSession(req: CreateSessionRequest): Promise<SessionView> {
    return this.request<SessionView>("POST", "/v1/sessions", req);
  }

  getSession(sessionId: string): Promise<SessionView> {
    return this.request<SessionView>("GET", `/v1/sessions/${encodeURIComponent(sessionId)}`);
  }

  postFeedback(sessionId: string, caption: string): Promise<SessionView> {
    return this.request<SessionView>(
      "POST",
      `/v1/sessions/${encodeURIComponent(sessionId)}/feedback`,
      { caption },
    );
  }

  imageUrl(imageId: string): string {
    return `${this.base}/v1/images/${encodeURIComponent(imageId)}`;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method, headers: { "Content-Type": "application/json" } };
    if (body !== undefined) {
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchFn(this.base + path, init);
    if (!response.ok) {
      let code = "http_error";
      let message = `HTTP ${response.status}`;
      try {
        const parsed = (await response.json()) as { code?: string; message?: string };
        if (parsed.code) code = parsed.code;
        if (parsed.message) message = parsed.message;
      } catch {
        // non-JSON error body: keep the generic message
      }
      throw new ApiError(response.status, code, message);
    }
    return (await response.json()) as T;
  }
}
