import type { Rect } from "./types.js"

/** True when the two rectangles share at least one cell. */
export function rectsIntersect(a: Rect, b: Rect): boolean {
  return a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h
}

export function rectInside(r: Rect, size: number): boolean {
  return r.x >= 0 && r.y >= 0 && r.w >= 1 && r.h >= 1 && r.x + r.w <= size && r.y + r.h <= size
}

export function rectContains(r: Rect, x: number, y: number): boolean {
  return x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h
}

/** Shift the rectangle, clamping so it stays on the canvas at full size. */
export function moveRect(r: Rect, dx: number, dy: number, size: number): Rect {
  const x = Math.min(Math.max(r.x + dx, 0), size - r.w)
  const y = Math.min(Math.max(r.y + dy, 0), size - r.h)
  return { x, y, w: r.w, h: r.h }
}

/**
 * Resize by dragging the given corner. The opposite corner stays fixed and
 * the result is normalized to positive extents of at least one cell, clipped
 * to the canvas.
 */
export function resizeRect(r: Rect, corner: Corner, px: number, py: number, size: number): Rect {
  const x0 = corner.includes("w") ? r.x + r.w : r.x
  const y0 = corner.includes("n") ? r.y + r.h : r.y
  const cx = Math.min(Math.max(px, 0), size)
  const cy = Math.min(Math.max(py, 0), size)
  const w = Math.max(Math.abs(cx - x0), 1)
  const h = Math.max(Math.abs(cy - y0), 1)
  // the min() guard matters only when the 1-cell floor fires at the far edge
  return {
    x: Math.min(Math.min(x0, cx), size - w),
    y: Math.min(Math.min(y0, cy), size - h),
    w,
    h,
  }
}

export type Corner = "nw" | "ne" | "sw" | "se"

export const CORNERS: Corner[] = ["nw", "ne", "sw", "se"]

export function cornerPoint(r: Rect, corner: Corner): { x: number; y: number } {
  return {
    x: corner.includes("w") ? r.x : r.x + r.w,
    y: corner.includes("n") ? r.y : r.y + r.h,
  }
}

/** The corner whose handle covers (x, y), if any. Handles span `grab` cells. */
export function hitCorner(r: Rect, x: number, y: number, grab: number): Corner | null {
  for (const corner of CORNERS) {
    const p = cornerPoint(r, corner)
    if (Math.abs(x - p.x) <= grab && Math.abs(y - p.y) <= grab) return corner
  }
  return null
}

/**
 * Decode row-major run lengths (alternating zero/one runs, zeros first)
 * into a flat boolean grid.
 */
export function decodeRle(runs: number[], size: number): boolean[] {
  const total = runs.reduce((a, b) => a + b, 0)
  if (total !== size * size) {
    throw new Error(`RLE covers ${total} cells, expected ${size * size}`)
  }
  const flat = new Array<boolean>(size * size)
  let pos = 0
  let val = false
  for (const run of runs) {
    if (run < 0) throw new Error("RLE runs must be nonnegative")
    flat.fill(val, pos, pos + run)
    pos += run
    val = !val
  }
  return flat
}

export function encodeRle(flat: boolean[]): number[] {
  const runs: number[] = []
  let current = false
  let count = 0
  for (const v of flat) {
    if (v === current) {
      count += 1
    } else {
      runs.push(count)
      current = v
      count = 1
    }
  }
  runs.push(count)
  return runs
}
