"""End-to-end experiment driver: datasets, paired training runs, evaluation.

Builds the full-scale corpus, pretrains the layout-blind backbone, trains
the copied-control model and its random-init ablation on identical data and
schedules over that shared frozen backbone, then scores sampled images
against held-out layouts with the oracle detector. Artifacts land under a
single root directory and are reused when already present.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_base, load_model
from .cli import _record_condition
from .control import ControlConfig, ControlledModel
from .dataset import (
    DatasetConfig,
    build_dataset,
    detect_boxes,
    parse_clause,
    read_manifest,
    write_image,
)
from .dit import BaseModel, ModelConfig
from .layout import BBox
from .metrics import evaluate_records
from .sampling import SampleConfig, euler_sample_many, to_u8
from .training import BaseTrainer, TrainConfig, record_to_sample, train_loop

TRAIN_RECORDS = 20000
HELDOUT_RECORDS = 200
TRAIN_DATA_SEED = 11
HELDOUT_DATA_SEED = 12
INIT_SEED = 0
SAMPLE_SEED = 7
SAMPLE_STEPS = 50
VARIANTS = ("copy", "nocopy")


def dataset_dir(root: Path, name: str) -> Path:
    return Path(root) / "data" / name


def run_dir(root: Path, variant: str) -> Path:
    return Path(root) / variant


def _ensure_dataset(out: Path, count: int, seed: int) -> None:
    manifest = out / "manifest.jsonl"
    if manifest.exists():
        header, _ = read_manifest(manifest)
        if header["count"] == count and header["seed"] == seed:
            return
    build_dataset(count, seed, DatasetConfig(), out)


def build_corpora(root: Path) -> None:
    _ensure_dataset(dataset_dir(root, "train"), TRAIN_RECORDS, TRAIN_DATA_SEED)
    _ensure_dataset(dataset_dir(root, "heldout"), HELDOUT_RECORDS, HELDOUT_DATA_SEED)


def _train_samples(root: Path, mcfg: ModelConfig, region_weight: float):
    data = dataset_dir(root, "train")
    _, records = read_manifest(data / "manifest.jsonl")
    return [record_to_sample(r, data, mcfg, region_weight) for r in records]


def pretrain_base(root: Path, progress=True) -> Path:
    """Train the layout-blind backbone once; later stages freeze it.

    Plain prompt-conditioned denoising: uniform pixel weights, prompts
    dropped at the usual rate so the backbone also learns the null-prompt
    mode that control training exposes it to.
    """
    out = run_dir(root, "base")
    ckpt = out / "base.ckpt"
    if ckpt.exists():
        return ckpt
    build_corpora(root)
    mcfg = ModelConfig()
    tcfg = TrainConfig(region_weight=1.0)
    base = BaseModel(mcfg, rng=np.random.default_rng(np.random.SeedSequence((INIT_SEED, 0))))
    samples = _train_samples(root, mcfg, tcfg.region_weight)
    train_loop(samples, BaseTrainer(base), tcfg, out_dir=out, progress=progress)
    (out / "model.ckpt").rename(ckpt)
    (out / "model.ckpt.json").rename(out / "base.ckpt.json")
    return ckpt


def train_variant(root: Path, variant: str, progress=True) -> Path:
    """Train one control variant over the shared pretrained backbone."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    out = run_dir(root, variant)
    ckpt = out / "model.ckpt"
    if ckpt.exists():
        return ckpt
    base_ckpt = pretrain_base(root, progress=progress)
    mcfg = ModelConfig()
    tcfg = TrainConfig()
    ctl = ControlConfig(parameter_copy=(variant == "copy"))
    base = load_base(base_ckpt)
    if base.cfg != mcfg:
        raise ValueError(f"backbone config drifted: {base.cfg}")
    model = ControlledModel(
        base, ctl, rng=np.random.default_rng(np.random.SeedSequence((INIT_SEED, 1)))
    )
    samples = _train_samples(root, mcfg, tcfg.region_weight)
    train_loop(samples, model, tcfg, out_dir=out, progress=progress)
    return ckpt


def sample_heldout(root: Path, variant: str, zero_fusion=False, write_images=True):
    """Sample every held-out layout from a trained variant; returns u8 images."""
    model = load_model(run_dir(root, variant) / "model.ckpt")
    if zero_fusion:
        model.zero_fusion()
    data = dataset_dir(root, "heldout")
    _, records = read_manifest(data / "manifest.jsonl")
    mcfg = model.base.cfg
    shape = (mcfg.image_size, mcfg.image_size, mcfg.channels)
    cfg = SampleConfig(steps=SAMPLE_STEPS)
    images = [None] * len(records)
    by_count = {}
    for idx, rec in enumerate(records):
        prompt, cond = _record_condition(rec, mcfg)
        by_count.setdefault(len(cond.entities), []).append((idx, prompt, cond))
    for n in sorted(by_count):
        group = by_count[n]
        for lo in range(0, len(group), 32):
            chunk = group[lo : lo + 32]
            seeds = [SAMPLE_SEED * 1_000_003 + idx for idx, _, _ in chunk]
            prompts = np.asarray([p for _, p, _ in chunk], dtype=np.intp)
            out = euler_sample_many(
                model.forward_np_batch, prompts, [c for _, _, c in chunk], seeds, cfg, shape
            )
            for (idx, _, _), img in zip(chunk, out):
                images[idx] = to_u8(img)
    if write_images:
        tag = "zero_fusion" if zero_fusion else "conditioned"
        out_dir = run_dir(root, variant) / f"samples_{tag}"
        out_dir.mkdir(parents=True, exist_ok=True)
        for idx, img in enumerate(images):
            write_image(out_dir / f"{idx:06d}.lsim", img)
    return records, images


def score_images(records, images, threshold: float = 0.5):
    """Oracle-detector evaluation of sampled images against their layouts."""
    pairs = []
    for rec, img in zip(records, images):
        dets = detect_boxes(np.asarray(img))
        truths = [
            (parse_clause(ent["phrase"]).color, BBox(*ent["bbox"]))
            for ent in rec["entities"]
        ]
        pairs.append((dets, truths))
    return evaluate_records(pairs, threshold=threshold)


def evaluate_variant(root: Path, variant: str, zero_fusion=False):
    records, images = sample_heldout(root, variant, zero_fusion=zero_fusion)
    return score_images(records, images)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="layoutflow-experiment",
        description="build corpora and train both control variants end to end",
    )
    ap.add_argument("root", type=Path, help="artifact directory, e.g. runs/e2e")
    ap.add_argument(
        "--variant", choices=VARIANTS + ("all",), default="all", help="which run to train"
    )
    args = ap.parse_args(argv)
    build_corpora(args.root)
    print("pretraining backbone", file=sys.stderr, flush=True)
    pretrain_base(args.root)
    wanted = VARIANTS if args.variant == "all" else (args.variant,)
    for variant in wanted:
        print(f"training variant {variant}", file=sys.stderr, flush=True)
        ckpt = train_variant(args.root, variant)
        print(f"variant {variant} checkpoint at {ckpt}", file=sys.stderr, flush=True)
    for variant in wanted:
        rep = evaluate_variant(args.root, variant)
        print(f"{variant}: miou={rep.miou:.4f} success_rate={rep.success_rate:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
