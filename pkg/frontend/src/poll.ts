import type { JobInfo } from "./types.js"

/** The one endpoint polling needs; Api satisfies it, as do test stubs. */
export interface JobSource {
  getJob(id: string): Promise<JobInfo>
}

export interface PollOptions {
  intervalMs?: number
  /** Ceiling for the backoff applied after network failures. */
  maxBackoffMs?: number
  onUpdate?: (job: JobInfo) => void
  /** Injectable clock for tests. */
  sleep?: (ms: number) => Promise<void>
}

const TERMINAL = new Set(["done", "failed"])

/**
 * Poll one job until it reaches a terminal state. Exactly one request is in
 * flight at any time; network errors back off exponentially and keep the
 * last known state instead of surfacing.
 */
export async function pollJob(api: JobSource, id: string, opts: PollOptions = {}): Promise<JobInfo> {
  const interval = opts.intervalMs ?? 1000
  const maxBackoff = opts.maxBackoffMs ?? 8 * interval
  const sleep = opts.sleep ?? ((ms) => new Promise((r) => setTimeout(r, ms)))
  let backoff = interval
  for (;;) {
    let job: JobInfo
    try {
      job = await api.getJob(id)
    } catch (err) {
      // server errors (404 etc.) are permanent; only transport errors retry
      if (err && typeof err === "object" && "status" in err) throw err
      await sleep(backoff)
      backoff = Math.min(backoff * 2, maxBackoff)
      continue
    }
    backoff = interval
    opts.onUpdate?.(job)
    if (TERMINAL.has(job.state)) return job
    await sleep(interval)
  }
}
