import type { GrayImage } from "./png.js"

/**
 * A display-normalized attention map: cell weights rescaled to sum to 1 so
 * the legend reads total mass directly.
 */
export interface Heatmap {
  width: number
  height: number
  cells: Float64Array
  /** Sum over all cells after normalization; 1.0 unless the map was empty. */
  legendTotal: number
}

export function normalizeHeatmap(img: GrayImage): Heatmap {
  const cells = Float64Array.from(img.values)
  let total = 0
  for (const v of cells) total += v
  if (total > 0) {
    for (let i = 0; i < cells.length; i++) cells[i]! /= total
  }
  let check = 0
  for (const v of cells) check += v
  return { width: img.width, height: img.height, cells, legendTotal: check }
}

/**
 * Fraction of the map's mass inside a rectangle given in image pixels;
 * the map grid is coarser than the image by an integer factor.
 */
export function massInRect(
  map: Heatmap,
  rect: { x: number; y: number; w: number; h: number },
  imageSize: number,
): number {
  const scale = imageSize / map.width
  let inside = 0
  for (let gy = 0; gy < map.height; gy++) {
    for (let gx = 0; gx < map.width; gx++) {
      const cx = (gx + 0.5) * scale
      const cy = (gy + 0.5) * scale
      if (cx >= rect.x && cx < rect.x + rect.w && cy >= rect.y && cy < rect.y + rect.h) {
        inside += map.cells[gy * map.width + gx]!
      }
    }
  }
  return inside
}

/** Perceptually ordered ramp from transparent blue-black to opaque yellow. */
export function heatColor(value: number, peak: number): string {
  const t = peak > 0 ? Math.min(value / peak, 1) : 0
  const r = Math.round(255 * Math.min(1.5 * t, 1))
  const g = Math.round(255 * Math.max(0, 1.5 * t - 0.5))
  const b = Math.round(96 * (1 - t))
  return `rgba(${r},${g},${b},${(0.15 + 0.85 * t).toFixed(3)})`
}
