import type { BankDetail, BankSummary, FieldError, JobInfo, LayoutDoc } from "./types.js"

/** Server-side rejection carrying the per-field messages from a 400. */
export class ApiError extends Error {
  readonly status: number
  readonly fields: FieldError[]

  constructor(status: number, message: string, fields: FieldError[] = []) {
    super(message)
    this.status = status
    this.fields = fields
  }
}

async function reject(res: Response): Promise<never> {
  let detail: unknown
  try {
    detail = (await res.json()).detail
  } catch {
    detail = null
  }
  if (detail && typeof detail === "object" && Array.isArray((detail as any).errors)) {
    const fields = (detail as any).errors as FieldError[]
    const text = fields.map((e) => `${e.field}: ${e.message}`).join("; ")
    throw new ApiError(res.status, text, fields)
  }
  const text =
    detail && typeof detail === "object" && (detail as any).error
      ? String((detail as any).error)
      : `${res.status} ${res.statusText}`
  throw new ApiError(res.status, text)
}

/**
 * Thin typed client for the job service. All mutation goes through these
 * documented endpoints; the base URL is injectable so tests can point at a
 * live server.
 */
export class Api {
  readonly base: string

  constructor(base = "") {
    this.base = base.replace(/\/$/, "")
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await fetch(this.base + path, init)
    if (!res.ok) await reject(res)
    return (await res.json()) as T
  }

  async listBanks(): Promise<BankSummary[]> {
    const doc = await this.json<{ banks: BankSummary[] }>("/api/banks")
    return doc.banks
  }

  getBank(id: string): Promise<BankDetail> {
    return this.json(`/api/banks/${id}`)
  }

  async submitEdit(bank: string, layout: LayoutDoc, seed?: number): Promise<string> {
    const params: Record<string, unknown> = { bank, layout }
    if (seed !== undefined) params.seed = seed
    const doc = await this.json<{ id: string }>("/api/jobs", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ kind: "edit", params }),
    })
    return doc.id
  }

  getJob(id: string): Promise<JobInfo> {
    return this.json(`/api/jobs/${id}`)
  }

  cancelJob(id: string): Promise<JobInfo> {
    return this.json(`/api/jobs/${id}`, { method: "DELETE" })
  }

  /** Raw bytes of a PNG artifact (result image, mask, heatmap). */
  async png(path: string): Promise<Uint8Array> {
    const res = await fetch(this.base + path)
    if (!res.ok) await reject(res)
    return new Uint8Array(await res.arrayBuffer())
  }

  attentionUrl(job: JobInfo, object: number): string | null {
    const base = job.artifacts.attention
    return base ? `${base}?object=${object}` : null
  }
}
