import {
  hitCorner,
  moveRect,
  rectContains,
  rectInside,
  rectsIntersect,
  resizeRect,
  type Corner,
} from "./geometry.js"
import type { BankDetail, LayoutDoc, Rect } from "./types.js"

export interface ObjectState {
  tokenId: number
  tokenName: string
  sourceRle: number[]
  sourceBbox: Rect
  target: Rect
}

interface DragState {
  object: number
  mode: "move" | Corner
  /** Pointer offset from the box origin at grab time, for jump-free moves. */
  offX: number
  offY: number
}

/** Geometry problems that block submission, per object index. */
export interface ValidationIssue {
  object: number
  message: string
}

/**
 * The editor's client-side model of one bank: object target rectangles in
 * image coordinates plus the active drag gesture. Rectangles always stay
 * on the canvas (gestures clamp); overlap is representable but flagged and
 * blocks submission, mirroring the server's layout invariants.
 */
export class EditorState {
  readonly bank: BankDetail
  readonly size: number
  readonly objects: ObjectState[]
  selected = 0
  private drag: DragState | null = null

  constructor(bank: BankDetail) {
    this.bank = bank
    this.size = bank.width
    this.objects = bank.objects.map((o) => ({
      tokenId: o.token_id,
      tokenName: o.token_name,
      sourceRle: o.mask_rle,
      sourceBbox: { ...o.bbox },
      target: { ...o.bbox },
    }))
  }

  /** Back to the source layout: every target equals its source bbox. */
  reset(): void {
    for (const obj of this.objects) obj.target = { ...obj.sourceBbox }
  }

  issues(): ValidationIssue[] {
    const out: ValidationIssue[] = []
    this.objects.forEach((obj, i) => {
      if (!rectInside(obj.target, this.size)) {
        out.push({ object: i, message: `${obj.tokenName}: box leaves the canvas` })
      }
      for (let j = 0; j < i; j++) {
        if (rectsIntersect(obj.target, this.objects[j]!.target)) {
          out.push({
            object: i,
            message: `${obj.tokenName} overlaps ${this.objects[j]!.tokenName}`,
          })
        }
      }
    })
    return out
  }

  valid(): boolean {
    return this.issues().length === 0
  }

  /** The layout document the service expects, or null while invalid. */
  emitLayout(): LayoutDoc | null {
    if (!this.valid()) return null
    return {
      version: 1,
      width: this.size,
      height: this.size,
      objects: this.objects.map((obj) => ({
        token_id: obj.tokenId,
        source_mask: { rle: obj.sourceRle.slice() },
        target_rect: { ...obj.target },
      })),
    }
  }

  // -- gestures, in image coordinates ---------------------------------------

  /** Corner handles win over box bodies; topmost (last-drawn) box wins ties. */
  pointerDown(x: number, y: number): boolean {
    for (let i = this.objects.length - 1; i >= 0; i--) {
      const target = this.objects[i]!.target
      const corner = hitCorner(target, x, y, HANDLE_GRAB)
      if (corner) {
        this.drag = { object: i, mode: corner, offX: 0, offY: 0 }
        this.selected = i
        return true
      }
    }
    for (let i = this.objects.length - 1; i >= 0; i--) {
      const target = this.objects[i]!.target
      if (rectContains(target, x, y)) {
        this.drag = { object: i, mode: "move", offX: x - target.x, offY: y - target.y }
        this.selected = i
        return true
      }
    }
    return false
  }

  /** Targets snap to whole cells so the emitted rects stay integral. */
  pointerMove(x: number, y: number): boolean {
    if (!this.drag) return false
    const obj = this.objects[this.drag.object]!
    if (this.drag.mode === "move") {
      const nx = Math.round(x - this.drag.offX)
      const ny = Math.round(y - this.drag.offY)
      obj.target = moveRect(obj.target, nx - obj.target.x, ny - obj.target.y, this.size)
    } else {
      obj.target = resizeRect(obj.target, this.drag.mode, Math.round(x), Math.round(y), this.size)
    }
    return true
  }

  pointerUp(): void {
    this.drag = null
  }

  dragging(): boolean {
    return this.drag !== null
  }
}

const HANDLE_GRAB = 1.5
