import { App, type GalleryEntry } from "./app.js"
import { massInRect } from "./heatmap.js"
import { drawEditor, drawOverlay, objectColor, type Ctx2D } from "./render.js"

const app = new App({ baseUrl: "" })

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id)
  if (!el) throw new Error(`missing #${id}`)
  return el as T
}

const bankSelect = $<HTMLSelectElement>("bank")
const bankMeta = $("bank-meta")
const editorCanvas = $<HTMLCanvasElement>("editor")
const issuesBox = $("issues")
const errorBox = $("error")
const submitBtn = $<HTMLButtonElement>("submit")
const resetBtn = $<HTMLButtonElement>("reset")
const seedInput = $<HTMLInputElement>("seed")
const resultImg = $<HTMLImageElement>("result")
const overlayCanvas = $<HTMLCanvasElement>("overlay")
const legendBox = $("legend")
const objectButtons = $("object-buttons")
const opacitySlider = $<HTMLInputElement>("opacity")
const cancelBtn = $<HTMLButtonElement>("cancel")
const jobStateBox = $("job-state")
const galleryBox = $("gallery")

const editorCtx = editorCanvas.getContext("2d") as Ctx2D
const overlayCtx = overlayCanvas.getContext("2d") as Ctx2D

let sourceImage: HTMLImageElement | null = null
let selectedJob: string | null = null
let resultUrl: string | null = null

// -- editor gestures ----------------------------------------------------------

function imageCoords(e: PointerEvent): { x: number; y: number } {
  const size = app.editor?.size ?? 1
  const rect = editorCanvas.getBoundingClientRect()
  return {
    x: ((e.clientX - rect.left) / rect.width) * size,
    y: ((e.clientY - rect.top) / rect.height) * size,
  }
}

editorCanvas.addEventListener("pointerdown", (e) => {
  const { x, y } = imageCoords(e)
  editorCanvas.setPointerCapture(e.pointerId)
  app.pointerDown(x, y)
})
editorCanvas.addEventListener("pointermove", (e) => {
  const { x, y } = imageCoords(e)
  app.pointerMove(x, y)
})
editorCanvas.addEventListener("pointerup", () => app.pointerUp())

resetBtn.addEventListener("click", () => app.reset())

submitBtn.addEventListener("click", () => {
  const seed = parseInt(seedInput.value, 10)
  void app.submit(Number.isFinite(seed) ? seed : undefined).then((entry) => {
    if (entry) {
      selectedJob = entry.jobId
      void app.selectOverlay(entry.jobId, 0, parseFloat(opacitySlider.value))
    }
  })
})

cancelBtn.addEventListener("click", () => {
  if (selectedJob) void app.cancel(selectedJob)
})

opacitySlider.addEventListener("input", () => {
  app.setOverlayOpacity(parseFloat(opacitySlider.value))
})

bankSelect.addEventListener("change", () => void loadBank(bankSelect.value))

// -- rendering ----------------------------------------------------------------

function selectedEntry(): GalleryEntry | null {
  return app.gallery.find((e) => e.jobId === selectedJob) ?? null
}

function redrawEditor(): void {
  const editor = app.editor
  if (!editor) return
  const scale = editorCanvas.width / editor.size
  const invalid = new Set(editor.issues().map((i) => i.object))
  drawEditor(editorCtx, editor, { scale, image: sourceImage, invalid })
  issuesBox.textContent = editor.issues().map((i) => i.message).join("\n")
  submitBtn.disabled = !editor.valid()
}

function redrawInspector(): void {
  const entry = selectedEntry()
  cancelBtn.disabled = !entry || entry.job.state === "done" || entry.job.state === "failed"
  if (!entry) {
    jobStateBox.textContent = "no job selected"
    legendBox.textContent = ""
    return
  }
  const job = entry.job
  jobStateBox.innerHTML = ""
  const label = document.createElement("span")
  label.textContent = `#${entry.order} ${job.state}${entry.cancelled ? " (cancelled)" : ""} `
  if (entry.cancelled) label.className = "cancelled"
  jobStateBox.append(label)
  if (job.state === "queued" || job.state === "running") {
    const bar = document.createElement("progress")
    bar.max = 1
    bar.value = job.progress
    jobStateBox.append(bar)
  } else if (job.error && !entry.cancelled) {
    jobStateBox.append(` ${job.error}`)
  }

  if (entry.resultPng && resultImg.dataset.job !== entry.jobId) {
    if (resultUrl) URL.revokeObjectURL(resultUrl)
    resultUrl = URL.createObjectURL(new Blob([entry.resultPng as BlobPart], { type: "image/png" }))
    resultImg.src = resultUrl
    resultImg.dataset.job = entry.jobId
  }

  const overlay = app.overlay
  overlayCtx.clearRect(0, 0, overlayCanvas.width, overlayCanvas.height)
  if (overlay && overlay.jobId === entry.jobId && overlay.map) {
    const rect = entry.layout.objects[overlay.object]?.target_rect ?? null
    drawOverlay(overlayCtx, overlay.map, {
      displaySize: overlayCanvas.width,
      imageSize: entry.layout.width,
      opacity: overlay.opacity,
      targetRect: rect,
    })
    const total = overlay.map.legendTotal
    const inTarget = rect ? massInRect(overlay.map, rect, entry.layout.width) : 0
    legendBox.textContent =
      `object ${overlay.object} · mass ${total.toFixed(2)} · in target ${(inTarget * 100).toFixed(0)}%`
  } else if (overlay && !overlay.available) {
    legendBox.textContent = "attention maps not available for this job"
  } else {
    legendBox.textContent = ""
  }

  objectButtons.innerHTML = ""
  entry.layout.objects.forEach((_, k) => {
    const btn = document.createElement("button")
    btn.className = "ghost"
    btn.textContent = `obj ${k}`
    btn.style.borderLeft = `4px solid ${objectColor(k)}`
    btn.disabled = !overlay?.available
    btn.addEventListener("click", () => void app.setOverlayObject(k))
    objectButtons.append(btn)
  })
}

function redrawGallery(): void {
  galleryBox.innerHTML = ""
  for (const entry of app.gallery) {
    const card = document.createElement("div")
    card.className = "card" + (entry.jobId === selectedJob ? " selected" : "")
    const tag = document.createElement("div")
    tag.className = "tag"
    const state = entry.cancelled ? "cancelled" : entry.job.state
    tag.innerHTML = `<span>#${entry.order}</span><span class="${entry.cancelled ? "cancelled" : ""}">${state}</span>`
    card.append(tag)
    if (entry.resultPng) {
      const img = document.createElement("img")
      img.src = URL.createObjectURL(new Blob([entry.resultPng as BlobPart], { type: "image/png" }))
      card.append(img)
    } else {
      const ph = document.createElement("div")
      ph.className = "placeholder"
      ph.textContent = entry.job.state === "failed" ? "failed" : `${Math.round(entry.job.progress * 100)}%`
      card.append(ph)
    }
    card.addEventListener("click", () => {
      selectedJob = entry.jobId
      resultImg.dataset.job = ""
      void app.selectOverlay(entry.jobId, 0, parseFloat(opacitySlider.value))
    })
    galleryBox.append(card)
  }
}

async function loadBank(id: string): Promise<void> {
  const editor = await app.selectBank(id)
  bankMeta.textContent = editor.objects.map((o) => o.tokenName).join(" + ")
  sourceImage = new Image()
  sourceImage.onload = () => redrawEditor()
  sourceImage.src = editor.bank.source_image
}

app.onChange(() => {
  redrawEditor()
  redrawInspector()
  redrawGallery()
  errorBox.textContent = app.lastError ?? ""
})

void (async () => {
  await app.loadBanks()
  bankSelect.innerHTML = ""
  for (const bank of app.banks) {
    const opt = document.createElement("option")
    opt.value = bank.id
    opt.textContent = `${bank.id} (${bank.objects} objects)`
    bankSelect.append(opt)
  }
  const first = app.banks[0]
  if (first) await loadBank(first.id)
})()
