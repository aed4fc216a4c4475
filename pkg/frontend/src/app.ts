import { Api, ApiError } from "./api.js"
import { normalizeHeatmap, type Heatmap } from "./heatmap.js"
import { decodeGrayPng } from "./png.js"
import { pollJob } from "./poll.js"
import { EditorState } from "./state.js"
import type { BankSummary, JobInfo, LayoutDoc } from "./types.js"

/** One submitted edit with everything needed to compare it to its siblings. */
export interface GalleryEntry {
  order: number
  jobId: string
  layout: LayoutDoc
  job: JobInfo
  resultPng: Uint8Array | null
  cancelled: boolean
}

export interface OverlayState {
  jobId: string
  object: number
  opacity: number
  available: boolean
  map: Heatmap | null
}

export interface AppOptions {
  baseUrl?: string
  pollIntervalMs?: number
}

/**
 * DOM-free application core: bank/editor state, job submission and polling,
 * the result gallery, and attention-overlay data. The browser shell and the
 * scripted session tests drive exactly this surface; every server mutation
 * goes through the typed Api client.
 */
export class App {
  readonly api: Api
  banks: BankSummary[] = []
  editor: EditorState | null = null
  gallery: GalleryEntry[] = []
  overlay: OverlayState | null = null
  lastError: string | null = null
  private readonly pollInterval: number
  private readonly polling = new Set<string>()
  private listeners: (() => void)[] = []
  private nextOrder = 1

  constructor(opts: AppOptions = {}) {
    this.api = new Api(opts.baseUrl ?? "")
    this.pollInterval = opts.pollIntervalMs ?? 1000
  }

  onChange(fn: () => void): void {
    this.listeners.push(fn)
  }

  private notify(): void {
    for (const fn of this.listeners) fn()
  }

  // -- banks -----------------------------------------------------------------

  async loadBanks(): Promise<void> {
    this.banks = await this.api.listBanks()
    this.notify()
  }

  async selectBank(id: string): Promise<EditorState> {
    const bank = await this.api.getBank(id)
    this.editor = new EditorState(bank)
    this.overlay = null
    this.notify()
    return this.editor
  }

  reset(): void {
    this.editor?.reset()
    this.notify()
  }

  // -- gestures ---------------------------------------------------------------

  pointerDown(x: number, y: number): void {
    if (this.editor?.pointerDown(x, y)) this.notify()
  }

  pointerMove(x: number, y: number): void {
    if (this.editor?.pointerMove(x, y)) this.notify()
  }

  pointerUp(): void {
    this.editor?.pointerUp()
    this.notify()
  }

  // -- jobs and gallery --------------------------------------------------------

  /**
   * POST the current layout as an edit job and start its poll loop. The
   * entry appears immediately as queued and is reconciled against server
   * state on every poll. Returns null (with lastError set) when the editor
   * is invalid or the server rejects the document.
   */
  async submit(seed?: number): Promise<GalleryEntry | null> {
    if (!this.editor) return null
    const layout = this.editor.emitLayout()
    if (!layout) {
      this.lastError = this.editor.issues().map((i) => i.message).join("; ")
      this.notify()
      return null
    }
    let jobId: string
    try {
      jobId = await this.api.submitEdit(this.editor.bank.id, layout, seed)
    } catch (err) {
      this.lastError = err instanceof ApiError ? err.message : String(err)
      this.notify()
      return null
    }
    this.lastError = null
    const entry: GalleryEntry = {
      order: this.nextOrder++,
      jobId,
      layout,
      job: {
        id: jobId,
        kind: "edit",
        state: "queued",
        progress: 0,
        error: null,
        artifacts: {},
      },
      resultPng: null,
      cancelled: false,
    }
    this.gallery.push(entry)
    this.notify()
    void this.watch(entry)
    return entry
  }

  /** Single poll loop per job; completion pulls the result bytes. */
  private async watch(entry: GalleryEntry): Promise<void> {
    if (this.polling.has(entry.jobId)) return
    this.polling.add(entry.jobId)
    try {
      const final = await pollJob(this.api, entry.jobId, {
        intervalMs: this.pollInterval,
        onUpdate: (job) => {
          entry.job = job
          entry.cancelled = job.error === "cancelled"
          this.notify()
        },
      })
      if (final.state === "done" && final.artifacts.result) {
        entry.resultPng = await this.api.png(final.artifacts.result)
      }
    } catch (err) {
      this.lastError = String(err)
    } finally {
      this.polling.delete(entry.jobId)
      this.notify()
    }
  }

  async cancel(jobId: string): Promise<void> {
    const job = await this.api.cancelJob(jobId)
    const entry = this.gallery.find((e) => e.jobId === jobId)
    if (entry) {
      entry.job = job
      entry.cancelled = true
    }
    this.notify()
  }

  // -- attention overlay --------------------------------------------------------

  /** Point the overlay at one gallery entry; disabled when no maps exist. */
  async selectOverlay(jobId: string, object = 0, opacity = 0.6): Promise<OverlayState> {
    const entry = this.gallery.find((e) => e.jobId === jobId)
    const available = Boolean(entry?.job.artifacts.attention)
    this.overlay = { jobId, object, opacity, available, map: null }
    this.notify()
    if (available) await this.fetchOverlayMap()
    return this.overlay
  }

  async setOverlayObject(object: number): Promise<void> {
    if (!this.overlay) return
    this.overlay.object = object
    this.overlay.map = null
    this.notify()
    if (this.overlay.available) await this.fetchOverlayMap()
  }

  setOverlayOpacity(opacity: number): void {
    if (!this.overlay) return
    this.overlay.opacity = Math.min(Math.max(opacity, 0), 1)
    this.notify()
  }

  private async fetchOverlayMap(): Promise<void> {
    const overlay = this.overlay
    if (!overlay) return
    const entry = this.gallery.find((e) => e.jobId === overlay.jobId)
    const url = entry && this.api.attentionUrl(entry.job, overlay.object)
    if (!url) return
    const img = await decodeGrayPng(await this.api.png(url))
    // the selection may have moved on while the bytes were in flight
    if (this.overlay === overlay) {
      overlay.map = normalizeHeatmap(img)
      this.notify()
    }
  }
}
