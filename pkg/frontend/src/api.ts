import type {
  Axis,
  JobStatus,
  SearchRequest,
  VolumeInfo,
  WindowPreset,
} from "./types.js";

export type FetchFn = (
  url: string,
  init?: { method?: string; body?: string; headers?: Record<string, string> },
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown> }>;

export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

/** Thin typed client over the explorer service's JSON endpoints. */
export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: FetchFn = (url, init) => fetch(url, init),
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchFn(this.base + path);
    if (!res.ok) {
      throw new ApiError(`GET ${path} failed (${res.status})`, res.status);
    }
    return (await res.json()) as T;
  }

  listVolumes(): Promise<VolumeInfo[]> {
    return this.getJson<VolumeInfo[]>("/api/volumes");
  }

  sliceUrl(
    id: string,
    axis: Axis,
    index: number,
    preset: WindowPreset,
  ): string {
    return `${this.base}/api/volumes/${encodeURIComponent(id)}/slice` +
      `?axis=${axis}&index=${index}&preset=${preset}`;
  }

  heatmapUrl(jobId: string, targetId: string, axis: Axis, index: number): string {
    return `${this.base}/api/search/${jobId}/heatmap/` +
      `${encodeURIComponent(targetId)}?axis=${axis}&index=${index}`;
  }

  async startSearch(request: SearchRequest): Promise<string> {
    const res = await this.fetchFn(`${this.base}/api/search`, {
      method: "POST",
      body: JSON.stringify(request),
      headers: { "Content-Type": "application/json" },
    });
    if (!res.ok) {
      throw new ApiError(`search request failed (${res.status})`, res.status);
    }
    const body = (await res.json()) as { job_id: string };
    return body.job_id;
  }

  jobStatus(jobId: string): Promise<JobStatus> {
    return this.getJson<JobStatus>(`/api/search/${jobId}`);
  }
}
