import assert from "node:assert/strict";
import { test } from "node:test";
import { ApiClient } from "../src/api.js";
import { JobSuperseded, JobTimeout, pollJob } from "../src/polling.js";
function apiWithStatuses(statuses) {
    let call = 0;
    const fetchFn = async () => {
        const status = statuses[Math.min(call, statuses.length - 1)];
        call += 1;
        return { ok: true, status: 200, json: async () => status };
    };
    return new ApiClient("", fetchFn);
}
const running = { status: "running", results: [] };
const done = {
    status: "done",
    results: [{ target_id: "t", best_position: [0, 0, 0], best_similarity: 1 }],
};
test("polls until the job reports done", async () => {
    const api = apiWithStatuses([running, running, done]);
    const status = await pollJob(api, "j1", { intervalMs: 1 });
    assert.equal(status.status, "done");
    assert.equal(status.results.length, 1);
});
test("stale responses for superseded jobs are discarded", async () => {
    const api = apiWithStatuses([running, done]);
    let current = "j1";
    const poll = pollJob(api, "j1", {
        intervalMs: 1,
        isCurrent: (id) => id === current,
        sleep: async () => {
            current = "j2"; // a newer job replaced this one mid-poll
        },
    });
    await assert.rejects(poll, JobSuperseded);
});
test("times out when the job never finishes", async () => {
    const api = apiWithStatuses([running]);
    await assert.rejects(pollJob(api, "j1", { intervalMs: 1, timeoutMs: 5 }), JobTimeout);
});
