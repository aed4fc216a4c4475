import { cornerPoint, CORNERS } from "./geometry.js"
import { heatColor, type Heatmap } from "./heatmap.js"
import type { EditorState } from "./state.js"
import type { Rect } from "./types.js"

/**
 * The 2D-context surface the app draws through. A strict subset of
 * CanvasRenderingContext2D so tests can substitute a recording fake.
 */
export interface Ctx2D {
  fillStyle: string
  strokeStyle: string
  lineWidth: number
  globalAlpha: number
  clearRect(x: number, y: number, w: number, h: number): void
  fillRect(x: number, y: number, w: number, h: number): void
  strokeRect(x: number, y: number, w: number, h: number): void
  setLineDash(segments: number[]): void
  drawImage(image: object, dx: number, dy: number, dw: number, dh: number): void
}

export const PALETTE = ["#e4572e", "#17bebb", "#ffc914", "#76b041", "#b95f89"]

export function objectColor(index: number): string {
  return PALETTE[index % PALETTE.length]!
}

export interface EditorDrawOptions {
  scale: number
  image?: object | null
  invalid?: Set<number>
}

/** Paint the editor surface: source image, source outlines, target boxes. */
export function drawEditor(ctx: Ctx2D, state: EditorState, opts: EditorDrawOptions): void {
  const px = state.size * opts.scale
  ctx.globalAlpha = 1
  ctx.setLineDash([])
  ctx.clearRect(0, 0, px, px)
  if (opts.image) {
    ctx.drawImage(opts.image, 0, 0, px, px)
  } else {
    ctx.fillStyle = "#202330"
    ctx.fillRect(0, 0, px, px)
  }

  state.objects.forEach((obj, i) => {
    const color = objectColor(i)
    ctx.lineWidth = 1
    ctx.setLineDash([4, 3])
    ctx.strokeStyle = color
    strokeScaled(ctx, obj.sourceBbox, opts.scale)
  })

  state.objects.forEach((obj, i) => {
    const color = opts.invalid?.has(i) ? "#ff2d2d" : objectColor(i)
    ctx.setLineDash([])
    ctx.lineWidth = i === state.selected ? 3 : 2
    ctx.strokeStyle = color
    strokeScaled(ctx, obj.target, opts.scale)
    ctx.fillStyle = color
    for (const corner of CORNERS) {
      const p = cornerPoint(obj.target, corner)
      const s = HANDLE_PX
      ctx.fillRect(p.x * opts.scale - s / 2, p.y * opts.scale - s / 2, s, s)
    }
  })
}

const HANDLE_PX = 7

function strokeScaled(ctx: Ctx2D, r: Rect, scale: number): void {
  ctx.strokeRect(r.x * scale, r.y * scale, r.w * scale, r.h * scale)
}

export interface OverlayDrawOptions {
  /** Image pixels per heatmap step times display scale: imageSize * scale. */
  displaySize: number
  imageSize: number
  opacity: number
  targetRect?: Rect | null
}

/**
 * Paint an attention map over a result image: nearest-upsampled colored
 * cells under a global opacity, with the target box outlined on top.
 * Opacity 0 leaves the surface fully cleared.
 */
export function drawOverlay(ctx: Ctx2D, map: Heatmap, opts: OverlayDrawOptions): void {
  ctx.clearRect(0, 0, opts.displaySize, opts.displaySize)
  if (opts.opacity <= 0) return
  const cell = opts.displaySize / map.width
  let peak = 0
  for (const v of map.cells) peak = Math.max(peak, v)
  ctx.globalAlpha = opts.opacity
  for (let y = 0; y < map.height; y++) {
    for (let x = 0; x < map.width; x++) {
      const v = map.cells[y * map.width + x]!
      if (v <= 0) continue
      ctx.fillStyle = heatColor(v, peak)
      ctx.fillRect(x * cell, y * cell, cell, cell)
    }
  }
  ctx.globalAlpha = 1
  if (opts.targetRect) {
    const s = opts.displaySize / opts.imageSize
    ctx.lineWidth = 2
    ctx.setLineDash([])
    ctx.strokeStyle = "#ffffff"
    ctx.strokeRect(opts.targetRect.x * s, opts.targetRect.y * s, opts.targetRect.w * s, opts.targetRect.h * s)
  }
}
