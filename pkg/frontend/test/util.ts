import type { Ctx2D } from "../src/render.js"

/** mulberry32: tiny deterministic PRNG for property-style tests. */
export function rng(seed: number): () => number {
  let a = seed >>> 0
  return () => {
    a = (a + 0x6d2b79f5) >>> 0
    let t = a
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

export function randInt(r: () => number, lo: number, hi: number): number {
  return lo + Math.floor(r() * (hi - lo + 1))
}

/**
 * Validator for the JSON-schema subset used by the layout schema fixture:
 * type/object/array/integer, const, required, properties,
 * additionalProperties:false, items, minItems, minimum.
 */
export function schemaErrors(doc: unknown, schema: any, path = "$"): string[] {
  const errs: string[] = []
  if ("const" in schema && doc !== schema.const) {
    errs.push(`${path}: expected ${JSON.stringify(schema.const)}`)
    return errs
  }
  switch (schema.type) {
    case "integer":
      if (typeof doc !== "number" || !Number.isInteger(doc)) {
        errs.push(`${path}: not an integer`)
      } else if (schema.minimum !== undefined && doc < schema.minimum) {
        errs.push(`${path}: ${doc} < minimum ${schema.minimum}`)
      }
      break
    case "array": {
      if (!Array.isArray(doc)) {
        errs.push(`${path}: not an array`)
        break
      }
      if (schema.minItems !== undefined && doc.length < schema.minItems) {
        errs.push(`${path}: fewer than ${schema.minItems} items`)
      }
      if (schema.items) {
        doc.forEach((v, i) => errs.push(...schemaErrors(v, schema.items, `${path}[${i}]`)))
      }
      break
    }
    case "object": {
      if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
        errs.push(`${path}: not an object`)
        break
      }
      const obj = doc as Record<string, unknown>
      for (const key of schema.required ?? []) {
        if (!(key in obj)) errs.push(`${path}: missing ${key}`)
      }
      for (const [key, value] of Object.entries(obj)) {
        const sub = schema.properties?.[key]
        if (sub) {
          errs.push(...schemaErrors(value, sub, `${path}.${key}`))
        } else if (schema.additionalProperties === false) {
          errs.push(`${path}: unexpected property ${key}`)
        }
      }
      break
    }
    default:
      if (schema.type !== undefined) errs.push(`${path}: unhandled schema type ${schema.type}`)
  }
  return errs
}

/** Recording canvas context double; stores one line per draw call. */
export class RecordingCtx implements Ctx2D {
  fillStyle = ""
  strokeStyle = ""
  lineWidth = 1
  globalAlpha = 1
  ops: string[] = []

  clearRect(x: number, y: number, w: number, h: number): void {
    this.ops.push(`clear ${x},${y},${w},${h}`)
  }
  fillRect(x: number, y: number, w: number, h: number): void {
    this.ops.push(`fill(${this.fillStyle};a=${this.globalAlpha}) ${x},${y},${w},${h}`)
  }
  strokeRect(x: number, y: number, w: number, h: number): void {
    this.ops.push(`stroke(${this.strokeStyle}) ${x},${y},${w},${h}`)
  }
  setLineDash(segments: number[]): void {
    this.ops.push(`dash ${segments.join(",")}`)
  }
  drawImage(_image: object, dx: number, dy: number, dw: number, dh: number): void {
    this.ops.push(`image ${dx},${dy},${dw},${dh}`)
  }

  count(prefix: string): number {
    return this.ops.filter((op) => op.startsWith(prefix)).length
  }
}
