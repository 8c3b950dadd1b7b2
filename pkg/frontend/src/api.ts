export interface Suggestion {
  query: string;
  score: number;
}

/** Per-list diagnostics; arrays run parallel to `suggestions`. */
export interface DebugInfo {
  alpha_e: number[][] | null;
  cosine: number[] | null;
}

export interface SuggestResponse {
  suggestions: Suggestion[];
  variant?: string;
  status?: string;
  debug?: DebugInfo;
  latency_ms?: number;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Thin typed wrapper over the suggest service's three endpoints. */
export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  async suggest(
    uid: string,
    prefix: string,
    k: number,
    debug: boolean,
  ): Promise<SuggestResponse> {
    const params = new URLSearchParams({ uid, prefix, k: String(k) });
    if (debug) params.set('debug', '1');
    const res = await this.fetchImpl(`${this.baseUrl}/suggest?${params}`);
    if (!res.ok) throw new Error(`suggest failed: ${res.status}`);
    return (await res.json()) as SuggestResponse;
  }

  /** Posts a click, retrying once before giving up. */
  async click(uid: string, text: string, kind: 'query' | 'item'): Promise<void> {
    const send = async () => {
      const res = await this.fetchImpl(`${this.baseUrl}/click`, {
        method: 'POST',
        headers: { 'Content-Type': 'application/json' },
        body: JSON.stringify({ uid, text, kind }),
      });
      if (!res.ok) throw new Error(`click failed: ${res.status}`);
    };
    try {
      await send();
    } catch {
      await send();
    }
  }
}
