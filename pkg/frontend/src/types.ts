/** Wire types mirroring the service's JSON payloads. */

export interface Rect {
  x: number
  y: number
  w: number
  h: number
}

export interface RleMask {
  rle: number[]
}

export interface LayoutObject {
  token_id: number
  source_mask: RleMask
  target_rect: Rect
}

/** The layout document POSTed as an edit job's params.layout. */
export interface LayoutDoc {
  version: 1
  width: number
  height: number
  objects: LayoutObject[]
}

export interface BankObject {
  token_id: number
  token_name: string
  mask: string
  mask_rle: number[]
  bbox: Rect
}

export interface BankDetail {
  id: string
  width: number
  height: number
  token_ids: number[]
  append_ids: number[]
  source_image: string
  objects: BankObject[]
}

export interface BankSummary {
  id: string
  objects: number
  token_ids: number[]
}

export type JobState = "queued" | "running" | "done" | "failed"

export interface JobInfo {
  id: string
  kind: string
  state: JobState
  progress: number
  error: string | null
  artifacts: {
    report?: string
    result?: string
    attention?: string
  }
}

export interface FieldError {
  field: string
  message: string
}
