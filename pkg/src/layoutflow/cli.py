"""Command line entry points: build-dataset, train, sample, eval, selfcheck."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import vocab
from .checkpoint import load_base, load_model, save_model
from .control import ControlConfig, ControlledModel
from .dataset import (
    DatasetConfig,
    build_dataset,
    detect_boxes,
    parse_clause,
    read_image,
    read_manifest,
    write_image,
)
from .dit import BaseModel, ModelConfig
from .errors import ValidationError
from .layout import BBox, Entity, LayoutCondition
from .metrics import evaluate_records
from .sampling import SampleConfig, euler_sample_many, to_u8
from .training import BaseTrainer, TrainConfig, record_to_sample, train_loop


def _build_dataset_cmd(args) -> int:
    cfg = DatasetConfig(
        image_size=args.image_size,
        min_entities=args.min_entities,
        max_entities=args.max_entities,
        p_size=args.p_size,
        p_pos=args.p_pos,
        iou_threshold=args.iou_thresh,
        jitter=args.jitter,
    )
    build_dataset(args.count, args.seed, cfg, out_dir=Path(args.out))
    print(f"wrote {args.count} records to {args.out}")
    return 0


def _load_train_config(path: Path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: bad config JSON: {e}") from e
    for key in ("dataset", "out"):
        if key not in raw:
            raise ValidationError(f"{path}: missing required key {key!r}")
    model_cfg = ModelConfig(**raw.get("model", {}))
    ctl_cfg = ControlConfig(**raw.get("control", {}))
    train_cfg = TrainConfig(**raw.get("train", {}))
    return raw, model_cfg, ctl_cfg, train_cfg


def _train_cmd(args) -> int:
    raw, model_cfg, ctl_cfg, train_cfg = _load_train_config(Path(args.config))
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    init_seed = int(raw.get("init_seed", 0))
    stage = raw.get("stage", "control")
    if stage not in ("base", "control"):
        raise ValidationError(f"stage must be 'base' or 'control', got {stage!r}")
    if stage == "base":
        base = BaseModel(model_cfg, rng=np.random.default_rng(np.random.SeedSequence((init_seed, 0))))
        model = BaseTrainer(base)
    else:
        if "base_checkpoint" in raw:
            base = load_base(Path(raw["base_checkpoint"]))
            if base.cfg != model_cfg:
                raise ValidationError(
                    f"base checkpoint config {base.cfg} does not match the model section"
                )
        else:
            base = BaseModel(model_cfg, rng=np.random.default_rng(np.random.SeedSequence((init_seed, 0))))
        model = ControlledModel(base, ctl_cfg, rng=np.random.default_rng(np.random.SeedSequence((init_seed, 1))))
    manifest = Path(raw["dataset"])
    _, records = read_manifest(manifest)
    samples = [
        record_to_sample(rec, manifest.parent, model_cfg, train_cfg.region_weight)
        for rec in records
    ]
    out_dir = Path(raw["out"])
    train_loop(samples, model, train_cfg, out_dir=out_dir, progress=True)
    print(f"trained {train_cfg.total_steps} steps; model at {out_dir / 'model.ckpt'}")
    return 0


def _record_condition(rec, cfg_model):
    entities = []
    groups = []
    for ent in rec["entities"]:
        spec = parse_clause(ent["phrase"])
        tokens = vocab.entity_tokens(spec.color, spec.shape, spec.size, spec.position)
        entities.append(Entity(tokens, BBox(*ent["bbox"])))
        groups.append(tokens)
    prompt = vocab.global_tokens(groups, cfg_model.text_len)
    return prompt, LayoutCondition(tuple(entities))


def _sample_cmd(args) -> int:
    model = load_model(Path(args.checkpoint))
    if args.zero_fusion:
        model.zero_fusion()
    _, records = read_manifest(Path(args.layouts))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_model = model.base.cfg
    shape = (cfg_model.image_size, cfg_model.image_size, cfg_model.channels)
    cfg = SampleConfig(steps=args.steps, t_start=args.t_start)
    by_count = {}
    for idx, rec in enumerate(records):
        prompt, cond = _record_condition(rec, cfg_model)
        by_count.setdefault(len(cond.entities), []).append((idx, prompt, cond))
    for n in sorted(by_count):
        group = by_count[n]
        for lo in range(0, len(group), 32):
            chunk = group[lo : lo + 32]
            seeds = [args.seed * 1_000_003 + idx for idx, _, _ in chunk]
            prompts = np.asarray([p for _, p, _ in chunk], dtype=np.intp)
            imgs = euler_sample_many(
                model.forward_np_batch, prompts, [c for _, _, c in chunk], seeds, cfg, shape
            )
            for (idx, _, _), img in zip(chunk, imgs):
                write_image(out_dir / f"{idx:06d}.lsim", to_u8(img))
    print(f"sampled {len(records)} images to {out_dir}")
    return 0


def _eval_cmd(args) -> int:
    images = Path(args.images)
    _, records = read_manifest(Path(args.manifest))
    pairs = []
    for idx, rec in enumerate(records):
        candidate = images / f"{idx:06d}.lsim"
        if not candidate.exists():
            candidate = images / rec["image"]
        img = read_image(candidate)
        detections = detect_boxes(img)
        truths = [
            (parse_clause(e["phrase"]).color, BBox(*e["bbox"])) for e in rec["entities"]
        ]
        pairs.append((detections, truths))
    report = evaluate_records(pairs, threshold=args.iou_thresh)
    with open(args.report, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    print(
        f"miou={report.miou:.4f} success_rate={report.success_rate:.4f} n_entities={report.n_entities}"
    )
    return 0


def _selfcheck_cmd(args) -> int:
    from . import autodiff as ad
    from .rope import GridPos, RopeTable, rotate
    from .training import sample_timestep
    from scipy import stats

    micro = ModelConfig(
        image_size=8, patch=4, d_model=8, heads=2, head_dim=4, depth=2, text_len=8, max_entities=2
    )
    failures = []

    def check(name, fn):
        try:
            fn()
        except Exception as e:  # noqa: BLE001 - report and continue
            failures.append(name)
            print(f"FAIL {name}: {e}")
        else:
            print(f"PASS {name}")

    def grad_check():
        rng = np.random.default_rng(0)
        a = ad.Parameter("a", rng.standard_normal((3, 3)))
        b = ad.Parameter("b", rng.standard_normal((3, 3)))
        err = ad.finite_diff_check(
            lambda: ad.sum_all(ad.mul(ad.softmax_rows(ad.matmul(a, b)), a)), [a, b]
        )
        assert err <= 1e-6, f"gradient error {err:.2e}"

    def rope_identity():
        t = RopeTable(16)
        v = np.random.default_rng(1).standard_normal(16)
        assert np.array_equal(rotate(v, GridPos(0, 0), t), v)

    def init_identity():
        base = BaseModel(micro, rng=np.random.default_rng(2))
        model = ControlledModel(base, ControlConfig(), rng=np.random.default_rng(3))
        rng = np.random.default_rng(4)
        x = rng.standard_normal((8, 8, 3))
        prompt = vocab.null_tokens(micro.text_len)
        cond = LayoutCondition(
            (Entity(vocab.entity_tokens("red", "disk"), BBox(0.1, 0.1, 0.5, 0.5)),)
        )
        got = model.full_forward(x, 0.5, prompt, cond).data
        want = model.base.base_forward(x, 0.5, prompt).data
        assert np.array_equal(got, want), "control branch leaked at init"

    def timestep_dist():
        u = np.random.default_rng(5).random(10_000)
        t = sample_timestep(u, 1.4)
        ks = stats.kstest(t, lambda v: v**1.4).statistic
        assert ks < 0.02, f"KS {ks:.4f}"

    check("gradient-oracle", grad_check)
    check("rotation-identity", rope_identity)
    check("zero-init-identity", init_identity)
    check("timestep-distribution", timestep_dist)
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="layoutflow", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    d = sub.add_parser("build-dataset", help="generate a synthetic blob dataset")
    d.add_argument("--count", type=int, required=True)
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--p-pos", type=float, default=0.5)
    d.add_argument("--p-size", type=float, default=0.5)
    d.add_argument("--iou-thresh", type=float, default=0.9)
    d.add_argument("--image-size", type=int, default=32)
    d.add_argument("--min-entities", type=int, default=1)
    d.add_argument("--max-entities", type=int, default=4)
    d.add_argument("--jitter", action="store_true")
    d.set_defaults(fn=_build_dataset_cmd)

    t = sub.add_parser("train", help="train the control branch from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=_train_cmd)

    s = sub.add_parser("sample", help="sample images for every manifest layout")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--layouts", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--t-start", type=float, default=0.999)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--zero-fusion", action="store_true")
    s.set_defaults(fn=_sample_cmd)

    e = sub.add_parser("eval", help="score sampled images against a manifest")
    e.add_argument("--images", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--iou-thresh", type=float, default=0.5)
    e.set_defaults(fn=_eval_cmd)

    c = sub.add_parser("selfcheck", help="run fast internal invariant checks")
    c.set_defaults(fn=_selfcheck_cmd)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValidationError, ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
