export interface SessionInfo {
  id: string;
  subject: string;
  lights: number;
  resolution: [number, number];
}

export interface LightInfo {
  index: number;
  label: string;
  direction: [number, number, number];
}

export interface RelightParams {
  envId?: string;
  weights?: number[][];
  rotation?: number;
  exposure?: number;
  gamma?: number;
  maxLights?: number;
}

type FetchFn = typeof fetch;

/** Thin typed client over the /api endpoints. Never touches pixel data:
 * relight responses are passed through as opaque blobs so displayed bytes
 * are exactly what the server produced. */
export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: FetchFn = (...args) => fetch(...args),
  ) {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.base + path, init);
    if (!resp.ok) throw new Error(`${path}: HTTP ${resp.status}`);
    return (await resp.json()) as T;
  }

  sessions(): Promise<SessionInfo[]> {
    return this.json("/api/sessions");
  }

  lights(sessionId: string): Promise<LightInfo[]> {
    return this.json(`/api/sessions/${sessionId}/lights`);
  }

  uploadEnv(
    sessionId: string,
    bytes: ArrayBuffer | Blob,
  ): Promise<{ env_id: string; width: number; height: number }> {
    return this.json(`/api/sessions/${sessionId}/envs`, {
      method: "POST",
      body: bytes,
      headers: { "content-type": "application/octet-stream" },
    });
  }

  async weights(sessionId: string, envId: string, rotation: number): Promise<number[][]> {
    const body = await this.json<{ weights: number[][] }>(
      `/api/sessions/${sessionId}/weights`,
      {
        method: "POST",
        body: JSON.stringify({ env_id: envId, rotation }),
        headers: { "content-type": "application/json" },
      },
    );
    return body.weights;
  }

  async relight(sessionId: string, params: RelightParams): Promise<Blob> {
    const payload: Record<string, unknown> = {
      rotation: params.rotation ?? 0,
      exposure: params.exposure ?? 0,
      gamma: params.gamma ?? 2.2,
    };
    if (params.weights) payload.weights = params.weights;
    else payload.env_id = params.envId;
    if (params.maxLights) payload.max_lights = params.maxLights;
    const resp = await this.fetchFn(`${this.base}/api/sessions/${sessionId}/relight`, {
      method: "POST",
      body: JSON.stringify(payload),
      headers: { "content-type": "application/json" },
    });
    if (!resp.ok) throw new Error(`relight: HTTP ${resp.status}`);
    return await resp.blob();
  }

  async olat(sessionId: string, index: number, exposure: number, gamma: number): Promise<Blob> {
    const url = this.olatUrl(sessionId, index, exposure, gamma);
    const resp = await this.fetchFn(url);
    if (!resp.ok) throw new Error(`olat: HTTP ${resp.status}`);
    return await resp.blob();
  }

  olatUrl(sessionId: string, index: number, exposure: number, gamma: number): string {
    return (
      `${this.base}/api/sessions/${sessionId}/olat/${index}` +
      `?exposure=${encodeURIComponent(exposure)}&gamma=${encodeURIComponent(gamma)}`
    );
  }
}
