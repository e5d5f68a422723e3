/** API client. The portal writes nothing except file uploads; everything
 * else is a read. Credentials live in sessionStorage for the session. */

import type { Credentials, JourneyResponse, RequestPage, RequestStatus, UploadReceipt } from "./types.js";

const CREDS_KEY = "tracepipe.session.credentials";

export class AuthRequiredError extends Error {
  constructor(message = "authentication required") {
    super(message);
    this.name = "AuthRequiredError";
  }
}

export class RequestFailedError extends Error {
  readonly status: number;
  readonly detail: string;
  constructor(status: number, detail: string) {
    super(`request failed (${status}): ${detail}`);
    this.name = "RequestFailedError";
    this.status = status;
    this.detail = detail;
  }
}

export function loadCredentials(storage: Storage = sessionStorage): Credentials | null {
  const raw = storage.getItem(CREDS_KEY);
  if (!raw) return null;
  try {
    const parsed = JSON.parse(raw);
    if (typeof parsed.username === "string" && typeof parsed.apiKey === "string") {
      return parsed;
    }
  } catch {
    /* corrupt entry: treat as logged out */
  }
  return null;
}

export function saveCredentials(creds: Credentials, storage: Storage = sessionStorage): void {
  storage.setItem(CREDS_KEY, JSON.stringify(creds));
}

export function clearCredentials(storage: Storage = sessionStorage): void {
  storage.removeItem(CREDS_KEY);
}

export class ApiClient {
  private readonly baseUrl: string;
  private creds: Credentials | null;
  private readonly fetchFn: typeof fetch;

  constructor(baseUrl = "", creds: Credentials | null = null, fetchFn: typeof fetch = fetch) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.creds = creds;
    this.fetchFn = fetchFn;
  }

  setCredentials(creds: Credentials | null): void {
    this.creds = creds;
  }

  get credentials(): Credentials | null {
    return this.creds;
  }

  private headers(): Record<string, string> {
    if (!this.creds) return {};
    return { "X-Username": this.creds.username, "X-Api-Key": this.creds.apiKey };
  }

  private async request(path: string, init: RequestInit = {}): Promise<Response> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, {
      ...init,
      headers: { ...this.headers(), ...(init.headers ?? {}) },
    });
    if (resp.status === 401) {
      throw new AuthRequiredError(await errorDetail(resp));
    }
    return resp;
  }

  /** POST /upload — the portal's only write besides authentication. */
  async upload(file: File): Promise<UploadReceipt> {
    const form = new FormData();
    form.append("file", file, file.name);
    const resp = await this.request("/upload", { method: "POST", body: form });
    if (!resp.ok) {
      throw new RequestFailedError(resp.status, await errorDetail(resp));
    }
    return (await resp.json()) as UploadReceipt;
  }

  async getStatus(requestId: string): Promise<RequestStatus> {
    const resp = await this.request(`/status/${encodeURIComponent(requestId)}`);
    if (!resp.ok) {
      throw new RequestFailedError(resp.status, await errorDetail(resp));
    }
    return (await resp.json()) as RequestStatus;
  }

  async listRequests(state: string | null, page = 0, pageSize = 100): Promise<RequestPage> {
    const params = new URLSearchParams({ page: String(page), page_size: String(pageSize) });
    if (state) params.set("state", state);
    const resp = await this.request(`/requests?${params}`);
    if (!resp.ok) {
      throw new RequestFailedError(resp.status, await errorDetail(resp));
    }
    return (await resp.json()) as RequestPage;
  }

  async journey(epc: string): Promise<JourneyResponse> {
    const resp = await this.request(`/journey/${encodeURIComponent(epc)}`);
    if (!resp.ok) {
      throw new RequestFailedError(resp.status, await errorDetail(resp));
    }
    return (await resp.json()) as JourneyResponse;
  }

  /** Cheap credential probe: any authenticated read will do. */
  async checkAuth(): Promise<void> {
    await this.listRequests(null, 0, 1);
  }
}

async function errorDetail(resp: Response): Promise<string> {
  try {
    const body = await resp.json();
    if (body && body.error) {
      return `${body.error.code}: ${body.error.message}`;
    }
  } catch {
    /* non-JSON body */
  }
  return resp.statusText || `HTTP ${resp.status}`;
}
