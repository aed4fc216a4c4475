"""Command-line interface.

Subcommands cover the whole pipeline: dataset generation, base training,
concept inversion, KV fine-tuning, layout edits, evaluation, the job
service, and the ablation grids. Hyperparameters come from a key=value
config file (--config) plus repeatable --set overrides; artifact paths are
per-command flags.

Exit codes: 0 success, 2 validation/usage error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import diffusion as diff
from . import inversion as inv
from . import layout as lay
from . import scenes
from .config import ConfigError, ProjectConfig, default_config, load_config
from .tokens import CONCEPT_IDS


class ValidationFailure(Exception):
    pass


def _load_cfg(args) -> ProjectConfig:
    if args.config:
        cfg = load_config(args.config, overrides=args.set)
    else:
        cfg = default_config(overrides=args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _emit(args, payload: dict, human: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=1))
    else:
        print(human)


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError as e:
        raise ValidationFailure(f"expected comma-separated integers, got {text!r}") from e


# ---------------------------------------------------------------------------
# commands


def cmd_make_data(args) -> int:
    cfg = _load_cfg(args)
    counts = _parse_int_list(args.objects)
    if not counts or any(c < 0 or c > scenes.MAX_OBJECTS for c in counts):
        raise ValidationFailure(f"object counts must lie in 1..{scenes.MAX_OBJECTS}, got {args.objects!r}")
    out = Path(args.out or cfg.dataset_dir)
    records = scenes.make_dataset(args.n, cfg.seed, object_counts=counts, bg_fraction=args.bg_fraction, out_dir=out)
    _emit(args, {"records": len(records), "dir": str(out)}, f"wrote {len(records)} records to {out}")
    return 0


def cmd_train_base(args) -> int:
    cfg = _load_cfg(args)
    data_dir = Path(args.data or cfg.dataset_dir)
    if not (data_dir / "index.json").exists():
        raise ValidationFailure(f"no dataset at {data_dir}")
    records = scenes.load_dataset(data_dir)
    out = Path(args.out or cfg.checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    tc = replace_dataclass(cfg.train, seed=cfg.seed, curve_path=str(out) + ".curve.json")
    model, report = diff.train_base(records, tc, model_cfg=cfg.model, progress=_train_progress(args))
    ckpt_io.save_model(out, model)
    payload = {
        "checkpoint": str(out),
        "steps": report.steps,
        "holdout_before": report.holdout_before,
        "holdout_after": report.holdout_after,
        "seconds": round(report.seconds, 1),
    }
    _emit(args, payload, f"trained {report.steps} steps in {report.seconds:.0f}s; "
          f"holdout loss {report.holdout_before:.4f} -> {report.holdout_after:.4f}; saved {out}")
    return 0


def _train_progress(args):
    if args.json:
        return None

    def cb(step, loss):
        print(f"  step {step}: loss {loss:.4f}", flush=True)

    return cb


def replace_dataclass(obj, **kw):
    import dataclasses

    return dataclasses.replace(obj, **kw)


def _load_source(args, cfg) -> tuple[np.ndarray, list[np.ndarray], list[int | None]]:
    """Source image + masks for inversion, from a dataset record or files."""
    if args.data is not None:
        records = scenes.load_dataset(args.data)
        if not 0 <= args.index < len(records):
            raise ValidationFailure(f"record index {args.index} outside dataset of {len(records)}")
        rec = records[args.index]
        hints = [rec.tokens[2 * k] for k in range(len(rec.masks))]
        return rec.image, list(rec.masks), hints
    if args.image is None or not args.masks:
        raise ValidationFailure("need --data/--index or --image with --masks")
    from PIL import Image

    img = np.asarray(Image.open(args.image), dtype=np.float32) / 255.0
    masks = [np.asarray(Image.open(p)) > 127 for p in args.masks.split(",")]
    return img, masks, [None] * len(masks)


def cmd_invert(args) -> int:
    cfg = _load_cfg(args)
    image, masks, hints = _load_source(args, cfg)
    if not masks:
        raise ValidationFailure("at least one object mask is required")
    model = ckpt_io.load_model(args.ckpt or cfg.checkpoint)
    slots = list(CONCEPT_IDS[: len(masks)])
    rows, report = inv.masked_textual_inversion(
        image, masks, slots, model, cfg.invert, seed=cfg.seed, class_hints=hints
    )
    out = inv.save_concepts(args.out, inv.ConceptSet(
        token_ids=tuple(slots), rows=rows, masks=list(masks), image=image,
        class_hints=list(hints), final_losses=[c[-1] if c else None for c in report.losses],
    ))
    _emit(args, {"dir": str(out), "objects": len(masks)}, f"inverted {len(masks)} concepts into {out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    cs = inv.load_concepts(args.concepts)
    ckpt_path = args.ckpt or cfg.checkpoint
    model = ckpt_io.load_model(ckpt_path)
    prior = inv.build_prior_set(
        model, inv.generic_token_pairs(cfg.seed, cfg.finetune.prior_set_size),
        cfg.finetune.prior_set_size, cfg.seed,
    )
    bank, report = inv.finetune_kv(
        cs.image, cs.token_ids, cs.rows, cs.masks, model, cfg.finetune, prior,
        seed=cfg.seed, base_ref=str(ckpt_path),
    )
    out = inv.save_bank(args.out, bank)
    payload = {"bank": str(out), "steps": len(report.losses),
               "final_loss": report.losses[-1] if report.losses else None}
    _emit(args, payload, f"fine-tuned bank saved to {out}")
    return 0


def cmd_edit(args) -> int:
    cfg = _load_cfg(args)
    bank = inv.load_bank(args.bank)
    model = ckpt_io.load_model(args.ckpt or bank.base_ref or cfg.checkpoint)
    layout = lay.load_layout(args.layout)
    image, report = lay.edit_layout(bank.source_image, bank, layout, cfg.edit, model, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(scenes.image_to_png_bytes(image))
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_json(), indent=1))
    payload = {"image": str(out), "final_losses": report.final_losses, "seed": cfg.seed}
    _emit(args, payload, f"edit complete: {out} (final region losses "
          + ", ".join(f"{x:.3f}" for x in report.final_losses) + ")")
    return 0


def _edit_metrics(bank, layout, model, edit_cfg, seed, sched):
    """One edited sample plus its report-derived metrics."""
    image, report = lay.edit_layout(bank.source_image, bank, layout, edit_cfg, model, seed, sched=sched)
    att = scenes.attention_alignment(report.final_attention, layout.target_masks_at(16))
    sim = scenes.visual_similarity(bank.source_image, image, bank.source_masks)
    return image, report, att, sim


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    bank = inv.load_bank(args.bank)
    model = ckpt_io.load_model(args.ckpt or bank.base_ref or cfg.checkpoint)
    layout = lay.load_layout(args.layout)
    sched = diff.default_schedule(model.cfg.t_train)
    plan = diff.make_plan(sched, cfg.edit.plan_steps)
    seeds = _parse_int_list(args.seeds) if args.seeds else tuple(range(args.n_seeds))
    rows = []
    for s in seeds:
        image, report, att, sim = _edit_metrics(bank, layout, model, cfg.edit, s, sched)
        # no-control baseline: plain sampling under the same condition
        base_cfg = cfg.edit.no_control()
        base_img, base_rep = lay.edit_layout(bank.source_image, bank, layout, base_cfg, model, s, sched=sched)
        base_att = scenes.attention_alignment(base_rep.final_attention, layout.target_masks_at(16))
        base_sim = scenes.visual_similarity(bank.source_image, base_img, bank.source_masks)
        rows.append({
            "seed": s,
            "attention": att.attention,
            "attention_no_control": base_att.attention,
            "visual_similarity": sim.score,
            "visual_similarity_no_control": base_sim.score,
        })
        if not args.json:
            print(f"  seed {s}: attention {att.attention:.3f} (baseline {base_att.attention:.3f}), "
                  f"similarity {sim.score:.3f} (baseline {base_sim.score:.3f})", flush=True)
    summary = {
        "rows": rows,
        "mean_attention": float(np.mean([r["attention"] for r in rows])),
        "attention_wins": sum(r["attention"] > r["attention_no_control"] for r in rows),
        "similarity_wins": sum(r["visual_similarity"] > r["visual_similarity_no_control"] for r in rows),
    }
    _emit(args, summary, f"mean attention {summary['mean_attention']:.3f}; "
          f"attention wins {summary['attention_wins']}/{len(rows)}; "
          f"similarity wins {summary['similarity_wins']}/{len(rows)}")
    return 0


ABLATE_AXES = ("loss", "iterative-times", "blend-steps")


def _ablate_config(cfg: ProjectConfig, axis: str, variant: str):
    edit = cfg.edit
    if axis == "loss":
        if variant not in lay.LOSS_MODES:
            raise ValidationFailure(f"loss variant must be one of {lay.LOSS_MODES}, got {variant!r}")
        return replace_dataclass(edit, loss_mode=variant)
    if axis == "iterative-times":
        times = tuple(float(p) for p in variant.split(":") if p.strip())
        if not times:
            raise ValidationFailure(f"empty iterative-times variant {variant!r}")
        qs = tuple(edit.thresholds[: len(times)]) if len(times) <= len(edit.thresholds) else (
            edit.thresholds + (edit.thresholds[-1],) * (len(times) - len(edit.thresholds))
        )
        return replace_dataclass(edit, iterative_times=times, thresholds=qs)
    if axis == "blend-steps":
        if variant == "off":
            return replace_dataclass(edit, blend=False)
        return replace_dataclass(edit, t_bld=float(variant))
    raise ValidationFailure(f"unknown ablation axis {axis!r} (expected one of {ABLATE_AXES})")


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    bank = inv.load_bank(args.bank)
    model = ckpt_io.load_model(args.ckpt or bank.base_ref or cfg.checkpoint)
    layout = lay.load_layout(args.layout)
    sched = diff.default_schedule(model.cfg.t_train)
    variants = [v for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ValidationFailure("need at least one variant")
    seeds = list(range(args.n_seeds))
    rows = []
    for variant in variants:
        vcfg = _ablate_config(cfg, args.axis, variant)
        att_scores, max_losses, bg_mse = [], [], []
        for s in seeds:
            image, report, att, _sim = _edit_metrics(bank, layout, model, vcfg, s, sched)
            att_scores.append(att.attention)
            max_losses.append(max(report.final_losses))
            bg = layout.background_mask("union")
            diff_sq = (image - bank.source_image) ** 2
            bg_mse.append(float(diff_sq[bg].mean()))
        rows.append({
            "variant": variant,
            "mean_attention": float(np.mean(att_scores)),
            "mean_max_region_loss": float(np.mean(max_losses)),
            "mean_background_mse": float(np.mean(bg_mse)),
            "seeds": len(seeds),
        })
        if not args.json:
            r = rows[-1]
            print(f"  {variant}: attention {r['mean_attention']:.3f}, "
                  f"max-loss {r['mean_max_region_loss']:.3f}, bg-mse {r['mean_background_mse']:.5f}", flush=True)
    _emit(args, {"axis": args.axis, "rows": rows}, f"{len(rows)} variants evaluated")
    return 0


def cmd_serve(args) -> int:
    cfg = _load_cfg(args)
    from .service import run_service

    run_service(
        checkpoint=args.ckpt or cfg.checkpoint,
        bank_root=args.banks,
        cfg=cfg,
        host=args.host,
        port=args.port,
        ui_dir=args.ui,
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layoutflow", description="Single-image layout editing with a toy diffusion model")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("make-data", help="generate a synthetic scene dataset")
    d.add_argument("--out", help="output directory")
    d.add_argument("--n", type=int, default=2000)
    d.add_argument("--objects", default="1,2,3,4", help="comma list of object counts to draw from")
    d.add_argument("--bg-fraction", type=float, default=0.0)
    d.set_defaults(fn=cmd_make_data)

    t = sub.add_parser("train-base", help="train the base denoiser")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--out", help="checkpoint path")
    t.set_defaults(fn=cmd_train_base)

    i = sub.add_parser("invert", help="masked textual inversion of one image")
    i.add_argument("--data", help="dataset directory (with --index)")
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--image", help="source PNG (with --masks)")
    i.add_argument("--masks", help="comma list of mask PNGs")
    i.add_argument("--ckpt", help="base checkpoint")
    i.add_argument("--out", required=True, help="output concepts directory")
    i.set_defaults(fn=cmd_invert)

    f = sub.add_parser("finetune", help="fine-tune K/V projections into a concept bank")
    f.add_argument("--concepts", required=True, help="directory produced by invert")
    f.add_argument("--ckpt", help="base checkpoint")
    f.add_argument("--out", required=True, help="output bank directory")
    f.set_defaults(fn=cmd_finetune)

    e = sub.add_parser("edit", help="run one layout edit")
    e.add_argument("--layout", required=True, help="layout JSON file")
    e.add_argument("--bank", required=True, help="concept bank directory")
    e.add_argument("--ckpt", help="base checkpoint (default: bank reference)")
    e.add_argument("--out", required=True, help="output PNG")
    e.add_argument("--report", help="write the edit report JSON here")
    e.set_defaults(fn=cmd_edit)

    v = sub.add_parser("eval", help="edit vs no-control metrics over seeds")
    v.add_argument("--layout", required=True)
    v.add_argument("--bank", required=True)
    v.add_argument("--ckpt")
    v.add_argument("--seeds", help="comma list of seeds")
    v.add_argument("--n-seeds", type=int, default=10)
    v.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="metric rows over a config grid")
    a.add_argument("--axis", required=True, choices=ABLATE_AXES)
    a.add_argument("--variants", required=True, help="comma list; iterative-times use colons (1.0:0.8:0.6)")
    a.add_argument("--layout", required=True)
    a.add_argument("--bank", required=True)
    a.add_argument("--ckpt")
    a.add_argument("--n-seeds", type=int, default=10)
    a.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("serve", help="run the HTTP job service")
    s.add_argument("--ckpt", help="base checkpoint")
    s.add_argument("--banks", required=True, help="directory containing bank subdirectories")
    s.add_argument("--host", default=None)
    s.add_argument("--port", type=int, default=None)
    s.add_argument("--ui", help="static UI bundle directory")
    s.set_defaults(fn=cmd_serve)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ValidationFailure, ConfigError, FileNotFoundError, ckpt_io.CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
