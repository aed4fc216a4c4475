"""Job service: submission, polling, artifacts, cancellation, backpressure."""
import io
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from layoutflow.config import default_config
from layoutflow.denoiser import Denoiser, UNetConfig
from layoutflow.inversion import ConceptBank, save_bank
from layoutflow.layout import encode_rle, rect_mask
from layoutflow.scenes import make_dataset
from layoutflow.service import ServiceState, create_app
from layoutflow.tokens import CONCEPT_IDS

TINY = UNetConfig(channels=(8, 8, 8), d_model=8, d_head=8, num_groups=4, temb_dim=8, temb_hidden=16)
SLOW_EDIT = {"plan_steps": 50, "max_iters": 40}  # several seconds on the tiny model


def tiny_model():
    m = Denoiser.create(TINY, seed=0)
    g = np.random.default_rng(99)
    m.params["out.w"].data[...] = 0.05 * g.standard_normal(m.params["out.w"].shape, dtype=np.float32)
    return m


def fast_cfg():
    return default_config([
        "edit.plan_steps=4", "edit.max_iters=2",
        "invert.steps=1", "invert.batch=1",
        "finetune.steps=1", "finetune.batch=1",
        "finetune.prior_set_size=0",
        "train.steps=5", "train.batch=2", "train.holdout=4", "train.log_every=100",
    ])


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    banks = root / "banks"
    data = root / "data"
    make_dataset(2, 1, object_counts=(2,), out_dir=data)
    model = tiny_model()
    g = np.random.default_rng(3)
    bank = ConceptBank(
        concept_tokens=CONCEPT_IDS[:2],
        concept_rows=0.1 * g.standard_normal((2, TINY.d_model)).astype(np.float32),
        append_tokens=(),
        append_rows=np.zeros((0, TINY.d_model), dtype=np.float32),
        kv={},
        source_image=g.random((32, 32, 3), dtype=np.float32),
        source_masks=[rect_mask(2, 2, 8, 8, 32), rect_mask(20, 20, 8, 8, 32)],
    )
    save_bank(banks / "demo", bank)
    state = ServiceState(model, banks, cfg=fast_cfg(), workers=2)
    client = TestClient(create_app(state))
    yield {"client": client, "state": state, "bank": bank, "root": root, "data": data}
    state.shutdown()


def layout_doc(bank, swap=True):
    order = [1, 0] if swap else [0, 1]
    return {
        "version": 1,
        "width": 32,
        "height": 32,
        "objects": [
            {
                "token_id": int(tok),
                "source_mask": {"rle": encode_rle(bank.source_masks[k])},
                "target_mask": {"rle": encode_rle(bank.source_masks[order[k]])},
            }
            for k, tok in enumerate(bank.concept_tokens)
        ],
    }


def submit(client, kind, **params):
    return client.post("/api/jobs", json={"kind": kind, "params": params})


def wait(client, job_id, timeout=180.0):
    deadline = time.time() + timeout
    seen = []
    while time.time() < deadline:
        doc = client.get(f"/api/jobs/{job_id}").json()
        seen.append(doc["progress"])
        if doc["state"] in ("done", "failed"):
            return doc, seen
        time.sleep(0.02)
    raise AssertionError(f"job {job_id} still {doc['state']} after {timeout}s")


def error_fields(resp):
    return {e["field"] for e in resp.json()["detail"]["errors"]}


# --------------------------------------------------------------------------
# banks


def test_bank_listing_and_detail(world):
    client, bank = world["client"], world["bank"]
    listing = client.get("/api/banks").json()
    assert [b["id"] for b in listing["banks"]] == ["demo"]
    assert listing["banks"][0]["objects"] == 2

    doc = client.get("/api/banks/demo").json()
    assert doc["width"] == doc["height"] == 32
    assert doc["token_ids"] == list(bank.concept_tokens)
    first = doc["objects"][0]
    assert first["bbox"] == {"x": 2, "y": 2, "w": 8, "h": 8}
    assert first["token_name"]
    mask = np.asarray(Image.open(io.BytesIO(client.get(first["mask"]).content))) > 127
    assert np.array_equal(mask, bank.source_masks[0])
    src = client.get(doc["source_image"])
    assert src.headers["content-type"] == "image/png"
    img = np.asarray(Image.open(io.BytesIO(src.content)), dtype=np.float32) / 255.0
    assert np.allclose(img, bank.source_image, atol=1 / 255)


def test_unknown_bank_and_mask_404(world):
    client = world["client"]
    assert client.get("/api/banks/ghost").status_code == 404
    assert client.get("/api/banks/demo/masks/9").status_code == 404


# --------------------------------------------------------------------------
# validation


def test_submit_rejects_unknown_kind(world):
    resp = submit(world["client"], "repaint")
    assert resp.status_code == 400
    assert error_fields(resp) == {"kind"}


def test_edit_validation_collects_field_errors(world):
    client, bank = world["client"], world["bank"]
    resp = submit(client, "edit")
    assert resp.status_code == 400
    assert error_fields(resp) == {"params.bank", "params.layout"}

    doc = layout_doc(bank)
    doc["objects"][0]["token_id"] = int(CONCEPT_IDS[5])
    resp = submit(client, "edit", bank="demo", layout=doc)
    assert resp.status_code == 400
    assert error_fields(resp) == {"params.layout"}

    resp = submit(client, "edit", bank="demo", layout=layout_doc(bank), seed="one")
    assert error_fields(resp) == {"params.seed"}

    resp = submit(client, "edit", bank="demo", layout=layout_doc(bank), config={"warp": 1})
    assert error_fields(resp) == {"params.config"}

    masks_as_files = layout_doc(bank)
    masks_as_files["objects"][0]["source_mask"] = "mask.png"
    resp = submit(client, "edit", bank="demo", layout=masks_as_files)
    assert resp.status_code == 400  # file references are rejected over the wire


def test_eval_validation(world):
    client, bank = world["client"], world["bank"]
    resp = submit(client, "eval", bank="demo", layout=layout_doc(bank), seeds=[])
    assert error_fields(resp) == {"params.seeds"}
    resp = submit(client, "eval", bank="demo", layout=layout_doc(bank), seeds=[1, "x"])
    assert error_fields(resp) == {"params.seeds"}


def test_invert_and_train_validation(world):
    client = world["client"]
    resp = submit(client, "invert", data="/nowhere", out="")
    assert error_fields(resp) == {"params.data", "params.index", "params.out"}
    resp = submit(client, "train", data="/nowhere")
    assert error_fields(resp) == {"params.data", "params.out"}
    resp = submit(client, "finetune", concepts="/nowhere")
    assert error_fields(resp) == {"params.concepts", "params.out"}


# --------------------------------------------------------------------------
# the edit job lifecycle


def test_edit_job_lifecycle(world):
    client, bank = world["client"], world["bank"]
    resp = submit(client, "edit", bank="demo", layout=layout_doc(bank), seed=3)
    assert resp.status_code == 201
    job_id = resp.json()["id"]

    doc, seen = wait(client, job_id)
    assert doc["state"] == "done"
    assert doc["progress"] == 1.0
    assert seen == sorted(seen)  # progress never goes backwards
    assert set(doc["artifacts"]) == {"result", "report", "attention"}

    png = client.get(doc["artifacts"]["result"])
    assert png.status_code == 200 and png.headers["content-type"] == "image/png"
    image = Image.open(io.BytesIO(png.content))
    assert image.size == (32, 32)

    report = client.get(doc["artifacts"]["report"]).json()
    assert report["seed"] == 3
    assert len(report["steps"]) == 4
    assert report["final_losses"] and not report["aborted"]

    att = client.get(doc["artifacts"]["attention"], params={"object": 0})
    assert att.status_code == 200
    heat = Image.open(io.BytesIO(att.content))
    assert heat.size == (16, 16)
    assert client.get(doc["artifacts"]["attention"], params={"object": 9}).status_code == 404
    nearest = client.get(doc["artifacts"]["attention"], params={"object": 0, "t": 100000})
    assert nearest.status_code == 200


def test_edit_accepts_tuple_config_overrides(world):
    client, bank = world["client"], world["bank"]
    resp = submit(client, "edit", bank="demo", layout=layout_doc(bank), seed=0,
                  config={"iterative_times": [1.0, 0.8], "thresholds": [0.4, 0.3], "plan_steps": 4})
    assert resp.status_code == 201
    doc, _ = wait(client, resp.json()["id"])
    assert doc["state"] == "done"


def test_parallel_identical_edits_agree(world):
    client, bank = world["client"], world["bank"]
    ids = [submit(client, "edit", bank="demo", layout=layout_doc(bank), seed=11).json()["id"]
           for _ in range(2)]
    docs = [wait(client, i)[0] for i in ids]
    assert all(d["state"] == "done" for d in docs)
    pngs = [client.get(f"/api/jobs/{i}/result").content for i in ids]
    assert pngs[0] == pngs[1]


def test_job_404s(world):
    client = world["client"]
    assert client.get("/api/jobs/unknown").status_code == 404
    assert client.get("/api/jobs/unknown/result").status_code == 404
    resp = submit(client, "edit", bank="demo", layout=layout_doc(world["bank"]), seed=1,
                  config={"plan_steps": 4})
    job_id = resp.json()["id"]
    wait(client, job_id)
    assert client.get(f"/api/jobs/{job_id}").status_code == 200


def test_listing_contains_submitted_jobs(world):
    client = world["client"]
    resp = submit(client, "edit", bank="demo", layout=layout_doc(world["bank"]), seed=2)
    job_id = resp.json()["id"]
    wait(client, job_id)
    listing = client.get("/api/jobs").json()["jobs"]
    assert job_id in {j["id"] for j in listing}


def test_cancellation_is_cooperative(world):
    client, bank = world["client"], world["bank"]
    running = [
        submit(client, "edit", bank="demo", layout=layout_doc(bank), seed=s,
               config=SLOW_EDIT).json()["id"]
        for s in (0, 1)
    ]
    queued = submit(client, "edit", bank="demo", layout=layout_doc(bank), seed=2,
                    config=SLOW_EDIT).json()["id"]
    for job_id in [queued, *running]:
        resp = client.delete(f"/api/jobs/{job_id}")
        assert resp.status_code == 200
    for job_id in [queued, *running]:
        doc, _ = wait(client, job_id)
        assert doc["state"] == "failed"
        assert doc["error"] == "cancelled"
        assert client.get(f"/api/jobs/{job_id}/result").status_code == 404


def test_queue_backpressure_429(world):
    state = ServiceState(world["state"].model, world["root"] / "banks",
                         cfg=fast_cfg(), workers=2, queue_limit=2)
    client = TestClient(create_app(state))
    bank = world["bank"]
    try:
        ids = [submit(client, "edit", bank="demo", layout=layout_doc(bank), seed=s,
                      config=SLOW_EDIT).json()["id"] for s in (0, 1)]
        resp = submit(client, "edit", bank="demo", layout=layout_doc(bank), seed=2,
                      config=SLOW_EDIT)
        assert resp.status_code == 429
        for job_id in ids:
            client.delete(f"/api/jobs/{job_id}")
        for job_id in ids:
            wait(client, job_id)
        # capacity freed: submissions are accepted again
        resp = submit(client, "edit", bank="demo", layout=layout_doc(bank), seed=3,
                      config={"plan_steps": 4})
        assert resp.status_code == 201
        wait(client, resp.json()["id"])
    finally:
        state.shutdown()


# --------------------------------------------------------------------------
# the other job kinds


def test_invert_then_finetune_jobs(world):
    client = world["client"]
    out = world["root"] / "concepts"
    resp = submit(client, "invert", data=str(world["data"]), index=0, out=str(out))
    assert resp.status_code == 201
    doc, _ = wait(client, resp.json()["id"])
    assert doc["state"] == "done"
    assert (out / "concepts.json").exists()

    resp = submit(client, "finetune", concepts=str(out), out="tuned")
    assert resp.status_code == 201
    doc, _ = wait(client, resp.json()["id"])
    assert doc["state"] == "done"
    banks = client.get("/api/banks").json()["banks"]
    assert {b["id"] for b in banks} == {"demo", "tuned"}


def test_train_job(world):
    client = world["client"]
    out = world["root"] / "trained.lfck"
    resp = submit(client, "train", data=str(world["data"]), out=str(out))
    assert resp.status_code == 201
    doc, _ = wait(client, resp.json()["id"])
    assert doc["state"] == "done"
    assert out.exists()
    report = client.get(f"/api/jobs/{resp.json()['id']}/report").json()
    assert {"checkpoint", "holdout_before", "holdout_after"} <= set(report)


def test_eval_job(world):
    client, bank = world["client"], world["bank"]
    resp = submit(client, "eval", bank="demo", layout=layout_doc(bank), seeds=[0])
    assert resp.status_code == 201
    doc, _ = wait(client, resp.json()["id"])
    assert doc["state"] == "done"
    report = client.get(doc["artifacts"]["report"]).json()
    assert len(report["rows"]) == 1
    assert {"seed", "attention", "attention_no_control", "visual_similarity"} <= set(report["rows"][0])
