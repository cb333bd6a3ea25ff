"""Rectified-flow training of the control branch.

Targets are the drawn noise under linear interpolation x_t = (1-t) x0 + t e,
with squared error up-weighted inside entity boxes. Timesteps follow the
power-law u^(1/alpha); the global prompt is replaced by the null prompt with
probability prompt_drop per sample.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import vocab
from .control import ControlledModel
from .dataset import parse_clause, read_image
from .dit import BaseModel
from .errors import ConfigError, DimensionError, ValidationError
from .layout import BBox, Entity, LayoutCondition


@dataclass(frozen=True)
class TrainConfig:
    region_weight: float = 2.0
    timestep_alpha: float = 1.4
    prompt_drop: float = 0.5
    lr: float = 3e-4
    warmup_steps: int = 1000
    total_steps: int = 20000
    batch_size: int = 16
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.region_weight < 1.0:
            raise ConfigError(f"region_weight must be >= 1, got {self.region_weight}")
        if self.timestep_alpha <= 0.0:
            raise ConfigError(f"timestep_alpha must be positive, got {self.timestep_alpha}")
        if not 0.0 <= self.prompt_drop <= 1.0:
            raise ConfigError(f"prompt_drop must be in [0, 1], got {self.prompt_drop}")
        if self.lr <= 0 or self.total_steps <= 0 or self.batch_size <= 0:
            raise ConfigError("lr, total_steps and batch_size must be positive")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} outside [0, {self.total_steps}]"
            )


def sample_timestep(u, alpha: float):
    """Map uniform draws to the power-law timestep distribution."""
    if alpha <= 0.0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    u = np.asarray(u, dtype=np.float64)
    out = u ** (1.0 / alpha)
    return float(out) if out.ndim == 0 else out


def make_noisy(x0: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
    """Linear interpolation between data and noise at time t."""
    if x0.shape != eps.shape:
        raise DimensionError(f"make_noisy: {x0.shape} vs {eps.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"timestep {t} outside [0, 1]")
    return (1.0 - t) * x0 + t * eps


def region_weight_mask(cond: LayoutCondition, grid_rows: int, grid_cols: int, lam: float) -> np.ndarray:
    """Per-patch weights: lam where the patch center falls in any entity box."""
    if lam < 1.0:
        raise ConfigError(f"region weight must be >= 1, got {lam}")
    mask = np.ones((grid_rows, grid_cols))
    cy = (np.arange(grid_rows) + 0.5) / grid_rows
    cx = (np.arange(grid_cols) + 0.5) / grid_cols
    for e in cond.entities:
        b = e.box
        rows = (cy >= b.y1) & (cy <= b.y2)
        cols = (cx >= b.x1) & (cx <= b.x2)
        mask[np.ix_(rows, cols)] = lam
    return mask


def weighted_loss(eps_hat: ad.Array, eps: np.ndarray, weights: np.ndarray) -> ad.Array:
    """Region-weighted mean squared error over all pixels."""
    h, w, c = eps.shape
    gr, gc = weights.shape
    if h % gr != 0 or w % gc != 0:
        raise DimensionError(f"weights {weights.shape} do not tile image {eps.shape}")
    pix = np.repeat(np.repeat(weights, h // gr, axis=0), w // gc, axis=1)
    wfull = np.broadcast_to(pix[:, :, None], eps.shape)
    d = ad.sub(eps_hat, ad.Array(eps))
    return ad.sdiv(ad.sum_all(ad.mul(ad.mul(d, d), ad.Array(wfull))), eps.size)


def pixel_weights(weights: np.ndarray, h: int, w: int) -> np.ndarray:
    """Per-patch weights expanded to (h, w, 1) for channel broadcast."""
    gr, gc = weights.shape
    if h % gr != 0 or w % gc != 0:
        raise DimensionError(f"weights {weights.shape} do not tile image ({h}, {w})")
    return np.repeat(np.repeat(weights, h // gr, axis=0), w // gc, axis=1)[:, :, None]


def weighted_loss_batch(eps_hat: ad.Array, eps: np.ndarray, pix: np.ndarray) -> ad.Array:
    """Sum over the batch of per-sample region-weighted mean squared errors."""
    d = ad.sub(eps_hat, ad.Array(eps))
    total = ad.sum_all(ad.mul(ad.mul(d, d), ad.Array(pix)))
    return ad.sdiv(total, eps[0].size)


def drop_prompt(tokens, u: float, p_drop: float):
    """Replace the whole prompt by null tokens when u falls under p_drop."""
    if not 0.0 <= p_drop <= 1.0:
        raise ConfigError(f"p_drop must be in [0, 1], got {p_drop}")
    if u < p_drop:
        return vocab.null_tokens(len(tokens))
    return tuple(tokens)


class AdamW:
    """Decoupled weight decay Adam over Parameter objects."""

    def __init__(self, params, weight_decay: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.value.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value.data) for p in self.params}

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value.data -= lr * (update + self.weight_decay * p.value.data)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup then cosine anneal toward zero; step is 1-based.

    The rate is queried before the step runs, so the ramp starts at zero and
    the cosine tail is still nonzero on the final step; zero is reached only
    at the boundary after it.
    """
    current = step - 1
    if current < cfg.warmup_steps:
        return cfg.lr * current / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    frac = (current - cfg.warmup_steps) / span
    return 0.5 * cfg.lr * (1.0 + np.cos(np.pi * frac))


@dataclass
class TrainSample:
    """One record prepared for the training loop."""

    x0: np.ndarray  # float image in [0, 1]
    prompt: tuple
    cond: LayoutCondition
    weights: np.ndarray  # per-patch loss weights


def record_to_sample(rec: dict, image_root, cfg_model, region_weight: float) -> TrainSample:
    """Manifest record to model-ready tensors."""
    img = read_image(image_root / rec["image"]).astype(np.float64) / 255.0
    entities = []
    groups = []
    for ent in rec["entities"]:
        spec = parse_clause(ent["phrase"])
        tokens = vocab.entity_tokens(spec.color, spec.shape, spec.size, spec.position)
        entities.append(Entity(tokens, BBox(*ent["bbox"])))
        groups.append(tokens)
    cond = LayoutCondition(tuple(entities))
    prompt = vocab.global_tokens(groups, cfg_model.text_len)
    weights = region_weight_mask(cond, cfg_model.grid, cfg_model.grid, region_weight)
    return TrainSample(img, prompt, cond, weights)


class BaseTrainer:
    """Adapter that lets train_loop optimize a bare base model.

    Layout conditions in the samples are ignored; the base learns prompt-
    conditioned denoising only. Stands in for the pretrained backbone that
    control training later freezes.
    """

    bucketed = False

    def __init__(self, base: BaseModel):
        self.base = base

    def trainable_parameters(self):
        return [p for p in self.base.parameters() if p.trainable]

    def zero_grads(self) -> None:
        for p in self.trainable_parameters():
            p.zero_grad()

    def batch_forward(self, x, t, prompts, conds) -> ad.Array:
        return self.base.base_forward_batch(x, t, prompts)

    def save_checkpoint(self, path) -> None:
        from .checkpoint import save_base

        save_base(path, self.base)


def train_loop(samples, model, cfg: TrainConfig, out_dir=None, progress=False):
    """Optimize a model's trainable side; returns the per-step metrics list.

    Accepts a ControlledModel (control branch training over a frozen base)
    or a BaseTrainer (backbone pretraining).

    When out_dir is given, writes metrics.jsonl, periodic checkpoints, and a
    final model.ckpt there.
    """
    if len(samples) == 0:
        raise ValidationError("empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))
    order_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 3)))
    opt = AdamW(model.trainable_parameters(), weight_decay=cfg.weight_decay)
    metrics = []
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "w")

    def next_indices():
        while True:
            for i in order_rng.permutation(len(samples)):
                yield int(i)

    idx_stream = next_indices()
    try:
        for step in range(1, cfg.total_steps + 1):
            model.zero_grads()
            t_sum = 0.0
            slots = []
            for _ in range(cfg.batch_size):
                s = samples[next(idx_stream)]
                t = sample_timestep(rng.random(), cfg.timestep_alpha)
                eps = rng.standard_normal(s.x0.shape)
                prompt = drop_prompt(s.prompt, rng.random(), cfg.prompt_drop)
                slots.append((s, t, eps, prompt))
                t_sum += t
            # one joint forward per entity count keeps token shapes rectangular;
            # a layout-blind model takes the whole batch in one group
            buckets = {}
            if getattr(model, "bucketed", True):
                for slot in slots:
                    buckets.setdefault(len(slot[0].cond.entities), []).append(slot)
            else:
                buckets[0] = slots
            tape = ad.Tape()
            with tape:
                total = None
                for n in sorted(buckets):
                    group = buckets[n]
                    xb = np.stack([make_noisy(s.x0, eps, t) for s, t, eps, _ in group])
                    tb = np.array([t for _, t, _, _ in group])
                    eb = np.stack([eps for _, _, eps, _ in group])
                    pb = np.asarray([p for _, _, _, p in group], dtype=np.intp)
                    pix = np.stack(
                        [pixel_weights(s.weights, *s.x0.shape[:2]) for s, _, _, _ in group]
                    )
                    eps_hat = model.batch_forward(
                        xb, tb, pb, [s.cond for s, _, _, _ in group]
                    )
                    part = weighted_loss_batch(eps_hat, eb, pix)
                    total = part if total is None else ad.add(total, part)
                loss = ad.smul(total, 1.0 / cfg.batch_size)
            ad.backward(tape, loss)
            batch_loss = loss.item() * cfg.batch_size
            lr = cosine_lr(step, cfg)
            opt.step(lr)
            if step % cfg.log_every == 0 or step == cfg.total_steps:
                row = {
                    "step": step,
                    "loss": batch_loss / cfg.batch_size,
                    "lr": float(lr),
                    "t_mean": t_sum / cfg.batch_size,
                }
                metrics.append(row)
                if log_fh is not None:
                    log_fh.write(json.dumps(row) + "\n")
            if progress and (step % 500 == 0 or step == 1):
                print(
                    f"step {step}/{cfg.total_steps} loss={batch_loss / cfg.batch_size:.5f} lr={lr:.2e}",
                    file=sys.stderr,
                    flush=True,
                )
            if (
                out_dir is not None
                and cfg.checkpoint_every > 0
                and step % cfg.checkpoint_every == 0
                and step < cfg.total_steps
            ):
                model.save_checkpoint(out_dir / f"checkpoint_{step:06d}.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        model.save_checkpoint(out_dir / "model.ckpt")
    return metrics
