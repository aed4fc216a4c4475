"""HTTP job service.

A small FastAPI app over the library: jobs are submitted as {kind, params},
executed on a bounded thread pool, and observed by polling. Status reads
never touch the compute path (progress is a plain attribute write), state
transitions are queued -> running -> done|failed, and cancellation is
cooperative at sampler-step boundaries.
"""
from __future__ import annotations

import dataclasses
import io
import os
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from . import checkpoint as ckpt_io
from . import inversion as inv
from . import layout as lay
from . import scenes
from .config import ProjectConfig, default_config
from .diffusion import train_base
from .layout import EditAborted, EditConfig
from .tokens import token_name

JOB_KINDS = ("train", "invert", "finetune", "edit", "eval")
DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 8000
HOST_ENV = "LAYOUTFLOW_HOST"
PORT_ENV = "LAYOUTFLOW_PORT"


class JobCancelled(Exception):
    pass


class Job:
    """One unit of work. Progress/state writes are single attribute stores,
    so polls never wait on compute."""

    def __init__(self, kind: str, params: dict):
        self.id = uuid.uuid4().hex[:12]
        self.kind = kind
        self.params = params
        self.state = "queued"
        self.progress = 0.0
        self.error: str | None = None
        self.result_png: bytes | None = None
        self.report: dict | None = None
        self.attention: dict[int, list[np.ndarray]] = {}
        self.cancel = threading.Event()

    def check_cancel(self) -> None:
        if self.cancel.is_set():
            raise JobCancelled()

    def set_progress(self, done: float, total: float) -> None:
        self.check_cancel()
        if total > 0:
            self.progress = max(self.progress, min(done / total, 0.999))

    def to_json(self, base: str = "/api/jobs") -> dict:
        artifacts = {}
        if self.report is not None:
            artifacts["report"] = f"{base}/{self.id}/report"
        if self.result_png is not None:
            artifacts["result"] = f"{base}/{self.id}/result"
        if self.attention:
            artifacts["attention"] = f"{base}/{self.id}/attention"
        return {
            "id": self.id,
            "kind": self.kind,
            "state": self.state,
            "progress": round(float(self.progress), 4),
            "error": self.error,
            "artifacts": artifacts,
        }


def _field_errors(errors: list[tuple[str, str]]) -> HTTPException:
    return HTTPException(
        status_code=400,
        detail={"errors": [{"field": f, "message": m} for f, m in errors]},
    )


class ServiceState:
    def __init__(
        self,
        model,
        bank_root: str | Path,
        cfg: ProjectConfig | None = None,
        workers: int = 2,
        queue_limit: int = 8,
        checkpoint: str | None = None,
    ):
        self.model = model
        self.bank_root = Path(bank_root)
        self.cfg = cfg or default_config()
        self.checkpoint = checkpoint
        self.queue_limit = queue_limit
        self.jobs: dict[str, Job] = {}
        self._bank_cache: dict[str, inv.ConceptBank] = {}
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="job")

    # -- banks ---------------------------------------------------------------

    def bank_ids(self) -> list[str]:
        if not self.bank_root.is_dir():
            return []
        return sorted(p.name for p in self.bank_root.iterdir() if (p / "bank.json").exists())

    def bank(self, bank_id: str) -> inv.ConceptBank:
        with self._lock:
            cached = self._bank_cache.get(bank_id)
        if cached is not None:
            return cached
        path = self.bank_root / bank_id
        if not (path / "bank.json").exists():
            raise KeyError(bank_id)
        loaded = inv.load_bank(path)
        with self._lock:
            self._bank_cache[bank_id] = loaded
        return loaded

    # -- job table -----------------------------------------------------------

    def submit(self, kind: str, params: dict) -> Job:
        job = Job(kind, params)
        with self._lock:
            outstanding = sum(1 for j in self.jobs.values() if j.state in ("queued", "running"))
            if outstanding >= self.queue_limit:
                raise HTTPException(status_code=429, detail={"error": "job queue full"})
            self.jobs[job.id] = job
        self._pool.submit(self._run, job)
        return job

    def get(self, job_id: str) -> Job:
        job = self.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail={"error": f"no job {job_id}"})
        return job

    def _transition(self, job: Job, state: str, error: str | None = None) -> None:
        with self._lock:
            job.error = error
            job.state = state

    def _run(self, job: Job) -> None:
        with self._lock:
            if job.cancel.is_set():
                job.error = "cancelled"
                job.state = "failed"
                return
            job.state = "running"
        try:
            EXECUTORS[job.kind](self, job)
            job.progress = 1.0
            self._transition(job, "done")
        except (JobCancelled, EditAborted) as e:
            if job.cancel.is_set():
                self._transition(job, "failed", "cancelled")
            else:
                self._transition(job, "failed", str(e))
        except Exception as e:
            self._transition(job, "failed", f"{type(e).__name__}: {e}")

    def shutdown(self) -> None:
        for job in self.jobs.values():
            job.cancel.set()
        self._pool.shutdown(wait=False, cancel_futures=True)


# ---------------------------------------------------------------------------
# per-kind validation and execution


def _edit_config(state: ServiceState, overrides: dict) -> EditConfig:
    cfg = state.cfg.edit
    if not overrides:
        return cfg
    fields = {f.name: f for f in dataclasses.fields(EditConfig)}
    clean = {}
    for key, value in overrides.items():
        if key not in fields:
            raise ValueError(f"unknown edit config key {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        clean[key] = value
    return dataclasses.replace(cfg, **clean)


def _validate_edit(state: ServiceState, params: dict) -> list[tuple[str, str]]:
    errors = []
    bank_id = params.get("bank")
    if not isinstance(bank_id, str) or not bank_id:
        errors.append(("params.bank", "bank id required"))
    else:
        try:
            bank = state.bank(bank_id)
        except KeyError:
            errors.append(("params.bank", f"unknown bank {bank_id!r}"))
            bank = None
        if bank is not None and isinstance(params.get("layout"), dict):
            try:
                layout = lay.layout_from_json(params["layout"])
                if layout.token_ids != bank.concept_tokens:
                    errors.append(("params.layout", "layout tokens do not match the bank"))
            except (ValueError, KeyError, TypeError) as e:
                errors.append(("params.layout", str(e)))
    if not isinstance(params.get("layout"), dict):
        errors.append(("params.layout", "layout document required"))
    if "seed" in params and not isinstance(params["seed"], int):
        errors.append(("params.seed", "seed must be an integer"))
    if "config" in params:
        if not isinstance(params["config"], dict):
            errors.append(("params.config", "config must be an object"))
        else:
            try:
                _edit_config(state, params["config"])
            except (ValueError, TypeError) as e:
                errors.append(("params.config", str(e)))
    return errors


def _exec_edit(state: ServiceState, job: Job) -> None:
    p = job.params
    bank = state.bank(p["bank"])
    layout = lay.layout_from_json(p["layout"])
    cfg = _edit_config(state, p.get("config") or {})
    seed = int(p.get("seed", 0))
    image, report = lay.edit_layout(
        bank.source_image, bank, layout, cfg, state.model, seed, progress=job.set_progress
    )
    job.result_png = scenes.image_to_png_bytes(image)
    job.report = report.to_json()
    attention = dict(report.attention_at)
    if report.final_attention:
        attention[report.steps[-1].t] = report.final_attention
    job.attention = attention


def _validate_eval(state: ServiceState, params: dict) -> list[tuple[str, str]]:
    errors = _validate_edit(state, params)
    seeds = params.get("seeds")
    if seeds is not None and (
        not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds)
    ):
        errors.append(("params.seeds", "seeds must be a non-empty integer list"))
    return [e for e in errors if e[0] != "params.seed"]


def _exec_eval(state: ServiceState, job: Job) -> None:
    p = job.params
    bank = state.bank(p["bank"])
    layout = lay.layout_from_json(p["layout"])
    cfg = _edit_config(state, p.get("config") or {})
    seeds = p.get("seeds") or list(range(10))
    base_cfg = cfg.no_control()
    rows = []
    for i, seed in enumerate(seeds):
        job.check_cancel()
        image, report = lay.edit_layout(bank.source_image, bank, layout, cfg, state.model, seed)
        att = scenes.attention_alignment(report.final_attention, layout.target_masks_at(16))
        sim = scenes.visual_similarity(bank.source_image, image, bank.source_masks)
        base_img, base_rep = lay.edit_layout(bank.source_image, bank, layout, base_cfg, state.model, seed)
        base_att = scenes.attention_alignment(base_rep.final_attention, layout.target_masks_at(16))
        rows.append({
            "seed": seed,
            "attention": att.attention,
            "attention_no_control": base_att.attention,
            "visual_similarity": sim.score,
        })
        job.set_progress(i + 1, len(seeds))
    job.report = {
        "rows": rows,
        "mean_attention": float(np.mean([r["attention"] for r in rows])),
        "attention_wins": sum(r["attention"] > r["attention_no_control"] for r in rows),
    }


def _validate_invert(state: ServiceState, params: dict) -> list[tuple[str, str]]:
    errors = []
    data = params.get("data")
    if not isinstance(data, str) or not (Path(data) / "index.json").exists():
        errors.append(("params.data", "dataset directory with index.json required"))
    if not isinstance(params.get("index"), int):
        errors.append(("params.index", "record index required"))
    if not isinstance(params.get("out"), str) or not params.get("out"):
        errors.append(("params.out", "output directory required"))
    return errors


def _exec_invert(state: ServiceState, job: Job) -> None:
    p = job.params
    records = scenes.load_dataset(p["data"])
    index = int(p["index"])
    if not 0 <= index < len(records):
        raise ValueError(f"record index {index} outside dataset of {len(records)}")
    rec = records[index]
    if not rec.masks:
        raise ValueError("record has no object masks")
    hints = [rec.tokens[2 * k] for k in range(len(rec.masks))]
    from .tokens import CONCEPT_IDS

    slots = list(CONCEPT_IDS[: len(rec.masks)])
    rows, report = inv.masked_textual_inversion(
        rec.image, list(rec.masks), slots, state.model, state.cfg.invert,
        seed=int(p.get("seed", state.cfg.seed)), class_hints=hints, progress=job.set_progress,
    )
    out = inv.save_concepts(p["out"], inv.ConceptSet(
        token_ids=tuple(slots), rows=rows, masks=list(rec.masks), image=rec.image,
        class_hints=hints, final_losses=[c[-1] if c else None for c in report.losses],
    ))
    job.report = {"out": str(out), "objects": len(rec.masks)}


def _validate_finetune(state: ServiceState, params: dict) -> list[tuple[str, str]]:
    errors = []
    concepts = params.get("concepts")
    if not isinstance(concepts, str) or not (Path(concepts) / "concepts.json").exists():
        errors.append(("params.concepts", "concepts directory required"))
    if not isinstance(params.get("out"), str) or not params.get("out"):
        errors.append(("params.out", "output bank directory required"))
    return errors


def _exec_finetune(state: ServiceState, job: Job) -> None:
    p = job.params
    cs = inv.load_concepts(p["concepts"])
    seed = int(p.get("seed", state.cfg.seed))
    prior = inv.build_prior_set(
        state.model, inv.generic_token_pairs(seed, state.cfg.finetune.prior_set_size),
        state.cfg.finetune.prior_set_size, seed,
    )
    bank, _report = inv.finetune_kv(
        cs.image, cs.token_ids, cs.rows, cs.masks, state.model, state.cfg.finetune,
        prior, seed=seed, base_ref=state.checkpoint, progress=job.set_progress,
    )
    out = inv.save_bank(Path(state.bank_root) / Path(p["out"]).name, bank)
    job.report = {"bank": out.name}


def _validate_train(state: ServiceState, params: dict) -> list[tuple[str, str]]:
    errors = []
    data = params.get("data")
    if not isinstance(data, str) or not (Path(data) / "index.json").exists():
        errors.append(("params.data", "dataset directory with index.json required"))
    if not isinstance(params.get("out"), str) or not params.get("out"):
        errors.append(("params.out", "output checkpoint path required"))
    return errors


def _exec_train(state: ServiceState, job: Job) -> None:
    p = job.params
    records = scenes.load_dataset(p["data"])
    tc = dataclasses.replace(state.cfg.train, seed=int(p.get("seed", state.cfg.seed)))

    def prog(step, _loss):
        job.set_progress(step, tc.steps)

    model, report = train_base(records, tc, model_cfg=state.cfg.model, progress=prog)
    out = Path(p["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt_io.save_model(out, model)
    job.report = {
        "checkpoint": str(out),
        "holdout_before": report.holdout_before,
        "holdout_after": report.holdout_after,
    }


VALIDATORS = {
    "edit": _validate_edit,
    "eval": _validate_eval,
    "invert": _validate_invert,
    "finetune": _validate_finetune,
    "train": _validate_train,
}
EXECUTORS = {
    "edit": _exec_edit,
    "eval": _exec_eval,
    "invert": _exec_invert,
    "finetune": _exec_finetune,
    "train": _exec_train,
}


# ---------------------------------------------------------------------------
# app


def _png_response(data: bytes) -> Response:
    return Response(content=data, media_type="image/png")


def _mask_png(mask: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _heatmap_png(amap: np.ndarray) -> bytes:
    a = np.asarray(amap, dtype=np.float64)
    top = float(a.max())
    scaled = (a / top * 255.0) if top > 0 else a
    buf = io.BytesIO()
    Image.fromarray(np.clip(np.round(scaled), 0, 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _bbox(mask: np.ndarray) -> dict:
    ys, xs = np.nonzero(np.asarray(mask, dtype=bool))
    if ys.size == 0:
        return {"x": 0, "y": 0, "w": 0, "h": 0}
    return {
        "x": int(xs.min()), "y": int(ys.min()),
        "w": int(xs.max() - xs.min() + 1), "h": int(ys.max() - ys.min() + 1),
    }


def create_app(state: ServiceState, ui_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="layoutflow")
    app.state.service = state

    @app.post("/api/jobs")
    async def create_job(request: Request):
        body = await request.json()
        if not isinstance(body, dict):
            raise _field_errors([("body", "expected a JSON object")])
        kind = body.get("kind")
        errors: list[tuple[str, str]] = []
        if kind not in JOB_KINDS:
            raise _field_errors([("kind", f"kind must be one of {list(JOB_KINDS)}")])
        params = body.get("params")
        if not isinstance(params, dict):
            raise _field_errors([("params", "params object required")])
        errors = VALIDATORS[kind](state, params)
        if errors:
            raise _field_errors(errors)
        job = state.submit(kind, params)
        return JSONResponse({"id": job.id}, status_code=201)

    @app.get("/api/jobs")
    def list_jobs():
        return {"jobs": [j.to_json() for j in state.jobs.values()]}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        return state.get(job_id).to_json()

    @app.delete("/api/jobs/{job_id}")
    def cancel_job(job_id: str):
        job = state.get(job_id)
        job.cancel.set()
        return job.to_json()

    @app.get("/api/jobs/{job_id}/result")
    def job_result(job_id: str):
        job = state.get(job_id)
        if job.result_png is None:
            raise HTTPException(status_code=404, detail={"error": "no result image for this job"})
        return _png_response(job.result_png)

    @app.get("/api/jobs/{job_id}/report")
    def job_report(job_id: str):
        job = state.get(job_id)
        if job.report is None:
            raise HTTPException(status_code=404, detail={"error": "no report for this job"})
        return job.report

    @app.get("/api/jobs/{job_id}/attention")
    def job_attention(job_id: str, object: int = Query(0, ge=0), t: int | None = Query(None)):
        job = state.get(job_id)
        if not job.attention:
            raise HTTPException(status_code=404, detail={"error": "no attention maps for this job"})
        times = sorted(job.attention)
        at = times[0] if t is None else min(times, key=lambda x: abs(x - t))
        maps = job.attention[at]
        if object >= len(maps):
            raise HTTPException(status_code=404, detail={"error": f"object {object} out of range"})
        return _png_response(_heatmap_png(maps[object]))

    @app.get("/api/banks")
    def list_banks():
        out = []
        for bid in state.bank_ids():
            bank = state.bank(bid)
            out.append({
                "id": bid,
                "objects": bank.n_objects,
                "token_ids": list(bank.concept_tokens),
            })
        return {"banks": out}

    def _bank_or_404(bank_id: str) -> inv.ConceptBank:
        try:
            return state.bank(bank_id)
        except KeyError:
            raise HTTPException(status_code=404, detail={"error": f"no bank {bank_id}"})

    @app.get("/api/banks/{bank_id}")
    def get_bank(bank_id: str):
        bank = _bank_or_404(bank_id)
        size = bank.source_image.shape[0]
        objects = []
        for k, mask in enumerate(bank.source_masks):
            objects.append({
                "token_id": bank.concept_tokens[k],
                "token_name": token_name(bank.concept_tokens[k]),
                "mask": f"/api/banks/{bank_id}/masks/{k}",
                "mask_rle": lay.encode_rle(mask),
                "bbox": _bbox(mask),
            })
        return {
            "id": bank_id,
            "width": size,
            "height": size,
            "token_ids": list(bank.concept_tokens),
            "append_ids": list(bank.append_tokens),
            "source_image": f"/api/banks/{bank_id}/source",
            "objects": objects,
        }

    @app.get("/api/banks/{bank_id}/source")
    def bank_source(bank_id: str):
        bank = _bank_or_404(bank_id)
        return _png_response(scenes.image_to_png_bytes(bank.source_image))

    @app.get("/api/banks/{bank_id}/masks/{index}")
    def bank_mask(bank_id: str, index: int):
        bank = _bank_or_404(bank_id)
        if not 0 <= index < len(bank.source_masks):
            raise HTTPException(status_code=404, detail={"error": f"no mask {index}"})
        return _png_response(_mask_png(bank.source_masks[index]))

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def run_service(
    checkpoint: str | Path,
    bank_root: str | Path,
    cfg: ProjectConfig | None = None,
    host: str | None = None,
    port: int | None = None,
    ui_dir: str | Path | None = None,
    workers: int = 2,
) -> None:
    import uvicorn

    model = ckpt_io.load_model(checkpoint)
    state = ServiceState(model, bank_root, cfg=cfg, workers=workers, checkpoint=str(checkpoint))
    app = create_app(state, ui_dir=ui_dir)
    bind_host = host or os.environ.get(HOST_ENV, DEFAULT_HOST)
    bind_port = port or int(os.environ.get(PORT_ENV, DEFAULT_PORT))
    try:
        uvicorn.run(app, host=bind_host, port=bind_port, log_level="info")
    finally:
        state.shutdown()
