import type { ApiClient } from "./api.js";
import type { JobStatus } from "./types.js";

export interface PollOptions {
  intervalMs?: number;
  timeoutMs?: number;
  /** Stale-poll guard: responses for superseded jobs are discarded. */
  isCurrent?: (jobId: string) => boolean;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) =>
  new Promise<void>((resolve) => setTimeout(resolve, ms));

export class JobSuperseded extends Error {}
export class JobTimeout extends Error {}

/**
 * Poll a search job every 500 ms (by default) until done/failed, up to a
 * 120 s timeout. Throws JobSuperseded as soon as the job stops being the
 * active one, so stale responses never reach the caller.
 */
export async function pollJob(
  api: ApiClient,
  jobId: string,
  options: PollOptions = {},
): Promise<JobStatus> {
  const interval = options.intervalMs ?? 500;
  const timeout = options.timeoutMs ?? 120_000;
  const isCurrent = options.isCurrent ?? (() => true);
  const sleep = options.sleep ?? defaultSleep;
  const deadline = Date.now() + timeout;
  for (;;) {
    if (!isCurrent(jobId)) throw new JobSuperseded(jobId);
    const status = await api.jobStatus(jobId);
    if (!isCurrent(jobId)) throw new JobSuperseded(jobId);
    if (status.status === "done" || status.status === "failed") {
      return status;
    }
    if (Date.now() >= deadline) {
      throw new JobTimeout(`job ${jobId} still ${status.status}`);
    }
    await sleep(interval);
  }
}
