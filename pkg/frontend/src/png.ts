/**
 * Minimal grayscale PNG reader for the service's mask and heatmap
 * responses (8-bit, color type 0, non-interlaced). Runs in both the
 * browser and node via DecompressionStream.
 */

export interface GrayImage {
  width: number
  height: number
  /** Row-major samples in [0, 255]. */
  values: Uint8Array
}

const SIGNATURE = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]

export async function decodeGrayPng(bytes: Uint8Array): Promise<GrayImage> {
  for (let i = 0; i < SIGNATURE.length; i++) {
    if (bytes[i] !== SIGNATURE[i]) throw new Error("not a PNG")
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength)
  let pos = 8
  let width = 0
  let height = 0
  const idat: Uint8Array[] = []
  while (pos + 8 <= bytes.length) {
    const length = view.getUint32(pos)
    const type = String.fromCharCode(bytes[pos + 4]!, bytes[pos + 5]!, bytes[pos + 6]!, bytes[pos + 7]!)
    const data = bytes.subarray(pos + 8, pos + 8 + length)
    if (type === "IHDR") {
      width = view.getUint32(pos + 8)
      height = view.getUint32(pos + 12)
      const bitDepth = bytes[pos + 16]
      const colorType = bytes[pos + 17]
      const interlace = bytes[pos + 20]
      if (bitDepth !== 8 || colorType !== 0 || interlace !== 0) {
        throw new Error(`unsupported PNG layout: depth=${bitDepth} color=${colorType} interlace=${interlace}`)
      }
    } else if (type === "IDAT") {
      idat.push(data)
    } else if (type === "IEND") {
      break
    }
    pos += 12 + length // length + type + data + crc
  }
  if (!width || !height) throw new Error("PNG missing IHDR")
  const raw = await inflate(concat(idat))
  return { width, height, values: unfilter(raw, width, height) }
}

function concat(parts: Uint8Array[]): Uint8Array {
  const total = parts.reduce((n, p) => n + p.length, 0)
  const out = new Uint8Array(total)
  let at = 0
  for (const p of parts) {
    out.set(p, at)
    at += p.length
  }
  return out
}

async function inflate(data: Uint8Array): Promise<Uint8Array> {
  const stream = new Blob([data as BlobPart]).stream().pipeThrough(new DecompressionStream("deflate"))
  return new Uint8Array(await new Response(stream).arrayBuffer())
}

/** Undo per-scanline filters (one byte per pixel, bpp = 1). */
function unfilter(raw: Uint8Array, width: number, height: number): Uint8Array {
  const stride = width + 1
  if (raw.length < stride * height) throw new Error("truncated PNG data")
  const out = new Uint8Array(width * height)
  for (let y = 0; y < height; y++) {
    const filter = raw[y * stride]!
    for (let x = 0; x < width; x++) {
      const value = raw[y * stride + 1 + x]!
      const left = x > 0 ? out[y * width + x - 1]! : 0
      const up = y > 0 ? out[(y - 1) * width + x]! : 0
      const upLeft = x > 0 && y > 0 ? out[(y - 1) * width + x - 1]! : 0
      let recon: number
      switch (filter) {
        case 0:
          recon = value
          break
        case 1:
          recon = value + left
          break
        case 2:
          recon = value + up
          break
        case 3:
          recon = value + Math.floor((left + up) / 2)
          break
        case 4:
          recon = value + paeth(left, up, upLeft)
          break
        default:
          throw new Error(`unknown PNG filter ${filter}`)
      }
      out[y * width + x] = recon & 0xff
    }
  }
  return out
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c
  const pa = Math.abs(p - a)
  const pb = Math.abs(p - b)
  const pc = Math.abs(p - c)
  if (pa <= pb && pa <= pc) return a
  if (pb <= pc) return b
  return c
}
