export class ApiError extends Error {
    status;
    constructor(message, status) {
        super(message);
        this.status = status;
    }
}
/** Thin typed client over the explorer service's JSON endpoints. */
export class ApiClient {
    base;
    fetchFn;
    constructor(base = "", fetchFn = (url, init) => fetch(url, init)) {
        this.base = base;
        this.fetchFn = fetchFn;
    }
    async getJson(path) {
        const res = await this.fetchFn(this.base + path);
        if (!res.ok) {
            throw new ApiError(`GET ${path} failed (${res.status})`, res.status);
        }
        return (await res.json());
    }
    listVolumes() {
        return this.getJson("/api/volumes");
    }
    sliceUrl(id, axis, index, preset) {
        return `${this.base}/api/volumes/${encodeURIComponent(id)}/slice` +
            `?axis=${axis}&index=${index}&preset=${preset}`;
    }
    heatmapUrl(jobId, targetId, axis, index) {
        return `${this.base}/api/search/${jobId}/heatmap/` +
            `${encodeURIComponent(targetId)}?axis=${axis}&index=${index}`;
    }
    async startSearch(request) {
        const res = await this.fetchFn(`${this.base}/api/search`, {
            method: "POST",
            body: JSON.stringify(request),
            headers: { "Content-Type": "application/json" },
        });
        if (!res.ok) {
            throw new ApiError(`search request failed (${res.status})`, res.status);
        }
        const body = (await res.json());
        return body.job_id;
    }
    jobStatus(jobId) {
        return this.getJson(`/api/search/${jobId}`);
    }
}
