"""Learning object concepts from a single image.

Stage 1a: masked textual inversion — per object, optimize one token
embedding under the denoising loss restricted to that object's mask.
Stage 1b: fine-tune the cross-attention K/V projections together with a
few appended tokens, with prior preservation against drift.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .tensor import Tensor
from . import checkpoint as ckpt_io
from .denoiser import Denoiser
from .diffusion import (
    IdentityCodec,
    NoiseSchedule,
    SamplerPlan,
    add_noise_batch,
    default_schedule,
    ldm_loss,
    make_plan,
    sample,
)
from .optim import SGD, Adam
from .rng import substream
from .tokens import APPEND_IDS, CLASS_IDS, COLOR_IDS, CONCEPT_IDS, SHAPE_IDS, is_concept


class InversionDiverged(RuntimeError):
    pass


@dataclass
class InversionConfig:
    steps: int = 200
    batch: int = 4
    lr: float = 0.002
    sequential: bool = False  # warm-start later objects from earlier results

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")


@dataclass
class FinetuneConfig:
    steps: int | None = None  # None: 800 for N<=3, 1200 for N=4
    batch: int = 4
    lr: float = 2e-4
    append_count: int = 2
    prior_weight: float = 1.0
    prior_set_size: int = 8
    prior_batch: int = 4

    def __post_init__(self):
        if not 0 <= self.append_count <= len(APPEND_IDS):
            raise ValueError(f"append_count must be in [0, {len(APPEND_IDS)}], got {self.append_count}")
        if self.prior_weight < 0:
            raise ValueError(f"prior_weight must be >= 0, got {self.prior_weight}")

    def resolved_steps(self, n_objects: int) -> int:
        if self.steps is not None:
            return self.steps
        return 1200 if n_objects >= 4 else 800


@dataclass
class ConceptBank:
    concept_tokens: tuple[int, ...]
    concept_rows: np.ndarray  # (N, d_model)
    append_tokens: tuple[int, ...]
    append_rows: np.ndarray  # (L, d_model)
    kv: dict[str, np.ndarray]
    source_image: np.ndarray  # (H, W, 3) float32
    source_masks: list[np.ndarray]  # (H, W) bool, canonical object order
    base_ref: str | None = None

    def __post_init__(self):
        if len(self.concept_tokens) < 1:
            raise ValueError("bank needs at least one concept")
        if len(self.concept_tokens) != self.concept_rows.shape[0]:
            raise ValueError("one embedding row per concept token required")
        if len(self.append_tokens) != self.append_rows.shape[0]:
            raise ValueError("one embedding row per appended token required")
        for name, arr in [("concept", self.concept_rows), ("append", self.append_rows)]:
            if arr.size and not np.isfinite(arr).all():
                raise ValueError(f"{name} embeddings contain non-finite values")
        union = np.zeros(self.source_masks[0].shape, dtype=bool) if self.source_masks else None
        for m in self.source_masks:
            m = np.asarray(m, dtype=bool)
            if (m & union).any():
                raise ValueError("source masks must be pairwise disjoint")
            union |= m

    @property
    def n_objects(self) -> int:
        return len(self.concept_tokens)


def _validate_masks(masks, shape) -> list[np.ndarray]:
    out = []
    union = np.zeros(shape, dtype=bool)
    for i, m in enumerate(masks):
        m = np.asarray(m)
        if m.shape != shape:
            raise ValueError(f"mask {i} shape {m.shape} does not match latent shape {shape}")
        vals = np.unique(m.astype(np.float64))
        if not np.isin(vals, (0.0, 1.0)).all():
            raise ValueError(f"mask {i} must be 0/1 valued")
        m = m.astype(bool)
        if not m.any():
            raise ValueError(f"mask {i} is empty")
        if (m & union).any():
            raise ValueError(f"mask {i} overlaps an earlier mask")
        union |= m
        out.append(m)
    return out


def init_concept_rows(model: Denoiser, n: int, class_hints=None) -> np.ndarray:
    """Start each concept at its class-token embedding, else the class mean."""
    table = model.params["tok.table"].data
    mean_row = table[list(CLASS_IDS)].mean(axis=0)
    rows = np.tile(mean_row, (n, 1))
    if class_hints is not None:
        for i, h in enumerate(class_hints):
            if h is not None:
                rows[i] = table[int(h)]
    return rows.astype(np.float32)


def _condition_from_rows(model: Denoiser, row_tensors: list[Tensor], batch: int) -> Tensor:
    """Stack per-token rows, add positional embeddings, tile to batch size."""
    n = len(row_tensors)
    pos = T.embedding(model.params["tok.pos"], np.arange(n))
    rows = T.concat([T.reshape(r, (1, r.shape[0])) for r in row_tensors], axis=0) + pos
    cond = T.reshape(rows, (1, n, rows.shape[1]))
    if batch == 1:
        return cond
    return T.concat([cond] * batch, axis=0)


@dataclass
class InversionReport:
    losses: list[list[float]]  # per object, per step


def masked_textual_inversion(
    image: np.ndarray,
    masks,
    concept_slots,
    model: Denoiser,
    cfg: InversionConfig,
    seed: int = 0,
    class_hints=None,
    sched: NoiseSchedule | None = None,
    progress=None,
) -> tuple[np.ndarray, InversionReport]:
    """Learn one embedding row per object from a single masked image.

    Each object's inversion is independent: the other tokens hold their
    initial values (cfg.sequential warm-starts them instead). Only row k
    receives updates during object k's loop.
    """
    slots = [int(s) for s in concept_slots]
    for s in slots:
        if not is_concept(s):
            raise ValueError(f"token {s} is not a concept slot ({CONCEPT_IDS})")
    if len(set(slots)) != len(slots):
        raise ValueError(f"concept slots must be distinct, got {slots}")
    codec = IdentityCodec()
    z0 = codec.encode(image)
    masks = _validate_masks(masks, z0.shape[:2])
    if len(masks) != len(slots):
        raise ValueError(f"{len(masks)} masks for {len(slots)} concept slots")
    if sched is None:
        sched = default_schedule(model.cfg.t_train)

    frozen = model.frozen_view()
    n = len(slots)
    init_rows = init_concept_rows(model, n, class_hints)
    result = init_rows.copy()
    losses: list[list[float]] = []

    for k in range(n):
        base_rows = result if cfg.sequential else init_rows
        v = Tensor(base_rows[k].copy(), requires_grad=True)
        others = [Tensor(base_rows[j]) for j in range(n)]
        opt = SGD([v], lr=cfg.lr)
        tgen = substream(seed, f"invert-{k}-t")
        ngen = substream(seed, f"invert-{k}-noise")
        curve: list[float] = []
        z0_batch = Tensor(np.repeat(z0[None], cfg.batch, axis=0))
        for step in range(cfg.steps):
            ts = tgen.integers(0, sched.t_train, size=cfg.batch)
            eps = Tensor(ngen.standard_normal(z0_batch.shape, dtype=np.float32))
            zt = add_noise_batch(z0_batch, ts, eps, sched)
            rows = [v if j == k else others[j] for j in range(n)]
            cond = _condition_from_rows(frozen, rows, cfg.batch)
            try:
                # an exploded embedding row surfaces as non-finite activations mid-forward
                pred = frozen.predict(zt, ts, cond)
                loss = ldm_loss(pred, eps, mask=masks[k].astype(np.float32))
            except ValueError as e:
                raise InversionDiverged(f"non-finite forward for object {k} at step {step}: {e}") from e
            val = loss.item()
            if not np.isfinite(val):
                raise InversionDiverged(f"non-finite inversion loss for object {k} at step {step}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            curve.append(val)
            if progress is not None:
                progress(k * cfg.steps + step + 1, n * cfg.steps)
        result[k] = v.data
        losses.append(curve)
    return result.astype(np.float32), InversionReport(losses=losses)


def masked_probe_loss(
    model: Denoiser,
    image: np.ndarray,
    mask: np.ndarray,
    row_tensors: list[Tensor],
    sched: NoiseSchedule,
    probes: list[tuple[int, int]],
) -> float:
    """Masked denoising loss averaged over fixed (t, noise-seed) probes."""
    z0 = IdentityCodec().encode(image)
    total = 0.0
    with T.no_grad():
        for t, nseed in probes:
            eps = Tensor(substream(nseed, "probe-noise").standard_normal((1,) + z0.shape, dtype=np.float32))
            zt = add_noise_batch(Tensor(z0[None]), np.array([t]), eps, sched)
            cond = _condition_from_rows(model, row_tensors, 1)
            pred = model.predict(zt, np.array([t]), cond)
            total += ldm_loss(pred, eps, mask=np.asarray(mask, dtype=np.float32)).item()
    return total / len(probes)


def build_prior_set(
    model: Denoiser,
    generic_tokens: list[tuple[int, ...]],
    n: int,
    seed: int,
    sched: NoiseSchedule | None = None,
    plan: SamplerPlan | None = None,
) -> list[tuple[np.ndarray, tuple[int, ...]]]:
    """n frozen-model DDIM samples under generic class-token conditions."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if n > 0 and not generic_tokens:
        raise ValueError("need at least one generic token sequence")
    if sched is None:
        sched = default_schedule(model.cfg.t_train)
    if plan is None:
        plan = make_plan(sched)
    frozen = model.frozen_view()
    out = []
    for i in range(n):
        ids = tuple(int(t) for t in generic_tokens[i % len(generic_tokens)])
        child_seed = int(substream(seed, f"prior-{i}").integers(2**31))
        latent = sample(frozen, ids, plan, sched, child_seed)
        out.append((latent, ids))
    return out


@dataclass
class FinetuneReport:
    losses: list[float]
    prior_losses: list[float]


def finetune_kv(
    image: np.ndarray,
    concept_tokens,
    concept_rows: np.ndarray,
    source_masks,
    model: Denoiser,
    cfg: FinetuneConfig,
    prior_set,
    seed: int = 0,
    sched: NoiseSchedule | None = None,
    base_ref: str | None = None,
    progress=None,
) -> tuple[ConceptBank, FinetuneReport]:
    """Fine-tune K/V projections plus appended tokens on the source image.

    Concept rows stay frozen; prior samples are replayed under their own
    conditions to keep the class vocabulary stable. The base model object
    is never mutated.
    """
    if sched is None:
        sched = default_schedule(model.cfg.t_train)
    codec = IdentityCodec()
    z0 = codec.encode(image)
    n = len(concept_tokens)
    steps = cfg.resolved_steps(n)

    kv_names = sorted(model.kv_param_view())
    params = {name: Tensor(t.data, requires_grad=False) for name, t in model.params.items()}
    for name in kv_names:
        params[name] = Tensor(model.params[name].data.copy(), requires_grad=True)
    worker = Denoiser(model.cfg, params)

    append_tokens = tuple(APPEND_IDS[: cfg.append_count])
    append_rows = Tensor(model.params["tok.table"].data[list(append_tokens)].copy(), requires_grad=True)
    concept_row_tensors = [Tensor(concept_rows[i]) for i in range(n)]

    trainable = [params[name] for name in kv_names]
    if cfg.append_count > 0:
        trainable.append(append_rows)
    opt = Adam(trainable, lr=cfg.lr)

    tgen = substream(seed, "finetune-t")
    ngen = substream(seed, "finetune-noise")
    pgen = substream(seed, "finetune-prior")
    z0_batch = Tensor(np.repeat(z0[None], cfg.batch, axis=0))

    prior_latents = [np.asarray(lat, dtype=np.float32) for lat, _ in prior_set]
    prior_ids = [ids for _, ids in prior_set]

    losses: list[float] = []
    prior_losses: list[float] = []
    for step in range(steps):
        rows = list(concept_row_tensors)
        for j in range(cfg.append_count):
            rows.append(append_rows[j])
        cond = _condition_from_rows(worker, rows, cfg.batch)
        ts = tgen.integers(0, sched.t_train, size=cfg.batch)
        eps = Tensor(ngen.standard_normal(z0_batch.shape, dtype=np.float32))
        zt = add_noise_batch(z0_batch, ts, eps, sched)
        try:
            pred = worker.predict(zt, ts, cond)
            loss = ldm_loss(pred, eps)
        except ValueError as e:
            raise InversionDiverged(f"non-finite forward at fine-tune step {step}: {e}") from e
        val = loss.item()
        if not np.isfinite(val):
            raise InversionDiverged(f"non-finite fine-tune loss at step {step}")
        opt.zero_grad()
        T.backward(loss)
        losses.append(val)

        if cfg.prior_weight > 0 and prior_latents:
            take = min(cfg.prior_batch, len(prior_latents))
            idx = pgen.choice(len(prior_latents), size=take, replace=False)
            pz0 = Tensor(np.stack([prior_latents[i] for i in idx]))
            pts = tgen.integers(0, sched.t_train, size=take)
            peps = Tensor(ngen.standard_normal(pz0.shape, dtype=np.float32))
            pzt = add_noise_batch(pz0, pts, peps, sched)
            length = max(len(prior_ids[i]) for i in idx)
            padded = np.zeros((take, length), dtype=np.int64)
            for row, i in enumerate(idx):
                padded[row, : len(prior_ids[i])] = prior_ids[i]
            pcond = worker.encode_tokens(padded)
            ploss = T.scalar_mul(ldm_loss(worker.predict(pzt, pts, pcond), peps), cfg.prior_weight)
            pval = ploss.item()
            if not np.isfinite(pval):
                raise InversionDiverged(f"non-finite prior loss at step {step}")
            T.backward(ploss)
            prior_losses.append(pval)
        opt.step()
        if progress is not None:
            progress(step + 1, steps)

    bank = ConceptBank(
        concept_tokens=tuple(int(t) for t in concept_tokens),
        concept_rows=np.asarray(concept_rows, dtype=np.float32),
        append_tokens=append_tokens,
        append_rows=append_rows.data.copy(),
        kv={name: params[name].data.copy() for name in kv_names},
        source_image=np.asarray(image, dtype=np.float32),
        source_masks=[np.asarray(m, dtype=bool) for m in source_masks],
        base_ref=base_ref,
    )
    return bank, FinetuneReport(losses=losses, prior_losses=prior_losses)


def apply_bank(model: Denoiser, bank: ConceptBank) -> Denoiser:
    """Read-only model with the bank's fine-tuned K/V substituted in."""
    params = {name: Tensor(t.data, requires_grad=False) for name, t in model.params.items()}
    for name, arr in bank.kv.items():
        if name not in params:
            raise ValueError(f"bank K/V entry {name!r} not present in model")
        params[name] = Tensor(arr, requires_grad=False)
    return Denoiser(model.cfg, params)


def bank_condition(model: Denoiser, bank: ConceptBank, include_appended: bool = True) -> Tensor:
    """Condition rows for the bank's tokens: concepts then appended tokens."""
    rows = [Tensor(bank.concept_rows[i]) for i in range(bank.n_objects)]
    if include_appended:
        rows.extend(Tensor(bank.append_rows[j]) for j in range(len(bank.append_tokens)))
    return _condition_from_rows(model, rows, 1)


def reconstruct(
    bank: ConceptBank,
    model: Denoiser,
    seed: int,
    sched: NoiseSchedule | None = None,
    plan: SamplerPlan | None = None,
    include_appended: bool = True,
) -> np.ndarray:
    """Plain DDIM sample under the bank's learned condition."""
    if sched is None:
        sched = default_schedule(model.cfg.t_train)
    if plan is None:
        plan = make_plan(sched)
    tuned = apply_bank(model, bank)
    cond = bank_condition(tuned, bank, include_appended=include_appended)
    ids = bank.concept_tokens + (bank.append_tokens if include_appended else ())
    latent = sample(tuned, ids, plan, sched, seed, cond_rows=cond)
    return IdentityCodec().decode(latent)


# ---------------------------------------------------------------------------
# persistence: LFCK tensors + JSON sidecar + PNG masks


BANK_VERSION = 1


def generic_token_pairs(seed: int, n: int) -> list[tuple[int, ...]]:
    """Deterministic (shape, color) prompts for the prior-preservation set."""
    combos = [(s, c) for s in SHAPE_IDS.values() for c in COLOR_IDS.values()]
    gen = substream(seed, "prior-tokens")
    idx = gen.permutation(len(combos))
    return [combos[i] for i in idx[: max(n, 1)]]


@dataclass
class ConceptSet:
    """Inversion output: learned rows plus the source material they came from."""

    token_ids: tuple[int, ...]
    rows: np.ndarray  # (N, d_model)
    masks: list[np.ndarray]
    image: np.ndarray
    class_hints: list[int | None]
    final_losses: list[float | None]


def save_concepts(out_dir: str | Path, cs: ConceptSet) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_io.save_tensors(out / "concepts.lfck", {"concept.rows": np.asarray(cs.rows, dtype=np.float32)})
    mask_files = []
    for i, m in enumerate(cs.masks):
        name = f"mask_{i}.png"
        Image.fromarray(np.asarray(m, dtype=np.uint8) * 255, mode="L").save(out / name, format="PNG")
        mask_files.append(name)
    src = np.clip(np.round(cs.image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(src, mode="RGB").save(out / "source.png", format="PNG")
    (out / "concepts.json").write_text(json.dumps({
        "version": 1,
        "token_ids": list(cs.token_ids),
        "class_hints": [h if h is None else int(h) for h in cs.class_hints],
        "mask_files": mask_files,
        "source_image": "source.png",
        "final_losses": cs.final_losses,
    }, indent=1))
    return out


def load_concepts(in_dir: str | Path) -> ConceptSet:
    root = Path(in_dir)
    meta_path = root / "concepts.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no concepts.json in {root}")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != 1:
        raise ValueError(f"unsupported concepts version {meta.get('version')!r}")
    missing = [f for f in meta["mask_files"] + [meta["source_image"]] if not (root / f).exists()]
    if missing:
        raise FileNotFoundError(f"concepts {root} reference missing files: {missing}")
    tensors, _ = ckpt_io.load_tensors(root / "concepts.lfck")
    return ConceptSet(
        token_ids=tuple(meta["token_ids"]),
        rows=tensors["concept.rows"],
        masks=[np.asarray(Image.open(root / f)) > 127 for f in meta["mask_files"]],
        image=np.asarray(Image.open(root / meta["source_image"]), dtype=np.float32) / 255.0,
        class_hints=[h if h is None else int(h) for h in meta["class_hints"]],
        final_losses=list(meta.get("final_losses", [])),
    )


def save_bank(out_dir: str | Path, bank: ConceptBank) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {"concept.rows": bank.concept_rows, "append.rows": bank.append_rows}
    tensors.update(bank.kv)
    ckpt_io.save_tensors(out / "bank.lfck", tensors)

    mask_files = []
    for i, m in enumerate(bank.source_masks):
        name = f"mask_{i}.png"
        Image.fromarray(m.astype(np.uint8) * 255, mode="L").save(out / name, format="PNG")
        mask_files.append(name)
    src = np.clip(np.round(bank.source_image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(src, mode="RGB").save(out / "source.png", format="PNG")

    sidecar = {
        "version": BANK_VERSION,
        "n_objects": bank.n_objects,
        "token_ids": list(bank.concept_tokens),
        "append_ids": list(bank.append_tokens),
        "mask_files": mask_files,
        "source_image": "source.png",
        "base_checkpoint": bank.base_ref,
    }
    (out / "bank.json").write_text(json.dumps(sidecar, indent=1))
    return out


def load_bank(in_dir: str | Path) -> ConceptBank:
    root = Path(in_dir)
    sidecar_path = root / "bank.json"
    if not sidecar_path.exists():
        raise FileNotFoundError(f"no bank.json in {root}")
    sidecar = json.loads(sidecar_path.read_text())
    if sidecar.get("version") != BANK_VERSION:
        raise ValueError(f"unsupported bank version {sidecar.get('version')!r}")
    missing = [f for f in sidecar["mask_files"] + [sidecar["source_image"]] if not (root / f).exists()]
    if missing:
        raise FileNotFoundError(f"bank {root} references missing files: {missing}")
    tensors, _meta = ckpt_io.load_tensors(root / "bank.lfck")
    masks = [np.asarray(Image.open(root / f)) > 127 for f in sidecar["mask_files"]]
    source = np.asarray(Image.open(root / sidecar["source_image"]), dtype=np.float32) / 255.0
    kv = {n: a for n, a in tensors.items() if n not in ("concept.rows", "append.rows")}
    return ConceptBank(
        concept_tokens=tuple(sidecar["token_ids"]),
        concept_rows=tensors["concept.rows"],
        append_tokens=tuple(sidecar["append_ids"]),
        append_rows=tensors["append.rows"],
        kv=kv,
        source_image=source,
        source_masks=masks,
        base_ref=sidecar.get("base_checkpoint"),
    )
