import {
  ComponentsResponse,
  ControlRequest,
  ControlResponse,
  ErrorBody,
  MetaResponse,
  NeighborsResponse,
  ServiceError,
} from "./types.js";

async function parseError(resp: Response): Promise<ServiceError> {
  try {
    const body = (await resp.json()) as ErrorBody;
    return new ServiceError(body.error, body.message);
  } catch {
    return new ServiceError(resp.status, resp.statusText);
  }
}

export class ApiClient {
  constructor(public baseUrl: string) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/+$/, "") + path;
  }

  private async get<T>(path: string): Promise<T> {
    const resp = await fetch(this.url(path));
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as T;
  }

  meta(): Promise<MetaResponse> {
    return this.get<MetaResponse>("/meta");
  }

  neighbors(itemId: string, n: number): Promise<NeighborsResponse> {
    return this.get<NeighborsResponse>(
      `/items/${encodeURIComponent(itemId)}/neighbors?n=${n}`,
    );
  }

  components(userId: string): Promise<ComponentsResponse> {
    return this.get<ComponentsResponse>(
      `/users/${encodeURIComponent(userId)}/components`,
    );
  }

  async control(req: ControlRequest, signal?: AbortSignal): Promise<ControlResponse> {
    const resp = await fetch(this.url("/control"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
      signal,
    });
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as ControlResponse;
  }
}
