"""Parameter-copied control branch with zero-initialized fusion.

Every n-th base block is copied into a trainable control block that reads
the image stream alongside rotary-positioned layout tokens. Its image-stream
output enters the trunk through per-site zero matrices, so a fresh control
model computes exactly the frozen base function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layout as lay
from .dit import BaseModel, ModelConfig, init_block_params, run_block
from .errors import ConfigError
from .rope import stream_cos_sin

BOX_TEXT = "box_text"
GLIGEN = "gligen"


@dataclass(frozen=True)
class ControlConfig:
    interval: int = 1
    fusion_per_site: bool = True
    parameter_copy: bool = True
    layout_encoder: str = BOX_TEXT
    fourier_freqs: int = 8

    def __post_init__(self):
        if self.interval <= 0:
            raise ConfigError(f"interval must be positive, got {self.interval}")
        if self.layout_encoder not in (BOX_TEXT, GLIGEN):
            raise ConfigError(f"unknown layout encoder {self.layout_encoder!r}")
        if self.fourier_freqs <= 0:
            raise ConfigError(f"fourier_freqs must be positive")


def init_control_params(base: BaseModel, ctl: ControlConfig, rng=None) -> dict:
    """Copy (or re-draw) every n-th base block; zero the fusion matrices."""
    cfg = base.cfg
    if cfg.depth % ctl.interval != 0:
        raise ConfigError(f"depth {cfg.depth} not divisible by interval {ctl.interval}")
    n_blocks = cfg.depth // ctl.interval
    params = {}
    for k in range(n_blocks):
        src = k * ctl.interval
        if ctl.parameter_copy:
            src_prefix = f"block{src}/"
            dst_prefix = f"block{k}/"
            for name, p in base.params.items():
                if name.startswith(src_prefix):
                    dst = dst_prefix + name[len(src_prefix):]
                    params[dst] = ad.Parameter(dst, p.value.data.copy())
        else:
            if rng is None:
                raise ConfigError("random control init needs an rng")
            init_block_params(params, f"block{k}", cfg, rng)
    d = cfg.d_model
    if ctl.fusion_per_site:
        for j in range(cfg.depth):
            name = f"fuse/site{j}/w"
            params[name] = ad.Parameter(name, np.zeros((d, d)))
    else:
        for k in range(n_blocks):
            name = f"fuse/block{k}/w"
            params[name] = ad.Parameter(name, np.zeros((d, d)))
    return params


def fuse(x_base, x_control, w) -> ad.Array:
    """Add the fusion-projected control stream onto the base image stream."""
    if x_control.data.ndim == 3:
        batch, n, d = x_control.data.shape
        flat = ad.matmul(ad.reshape(x_control, (batch * n, d)), w)
        return ad.add(x_base, ad.reshape(flat, (batch, n, d)))
    return ad.add(x_base, ad.matmul(x_control, w))


def control_block_forward(control_params: dict, block_index: int, cfg: ModelConfig, X, C_L, t_emb, cs_img, cs_layout, attn_sink=None):
    """One control block pass over (image stream, layout stream)."""
    return run_block(control_params, f"block{block_index}", cfg, X, C_L, t_emb, cs_img, cs_layout, attn_sink=attn_sink)


class ControlledModel:
    """Frozen base plus trainable control branch and layout encoder."""

    def __init__(self, base: BaseModel, ctl: ControlConfig, rng=None, control: dict | None = None, layout_params: dict | None = None):
        base.freeze()
        base.text_cache_enabled = True
        self.base = base
        self.ctl = ctl
        if control is None:
            control = init_control_params(base, ctl, rng)
        self.control = control
        if layout_params is None:
            if rng is None:
                rng = np.random.default_rng(1)
            if ctl.layout_encoder == BOX_TEXT:
                layout_params = lay.init_box_text_params(base.cfg.d_model, ctl.fourier_freqs, rng)
            else:
                layout_params = lay.init_gligen_params(base.cfg.d_model, ctl.fourier_freqs, rng)
        self.layout_params = layout_params
        self._layout_cs_cache = {}

    # -- parameter bookkeeping ------------------------------------------------

    def trainable_parameters(self):
        out = [p for p in self.control.values() if p.trainable]
        out.extend(p for p in self.layout_params.values() if p.trainable)
        return out

    def control_scalar_count(self) -> int:
        return sum(p.value.data.size for p in self.control.values())

    def fusion_scalar_count(self) -> int:
        return sum(
            p.value.data.size for n, p in self.control.items() if n.startswith("fuse/")
        )

    def zero_fusion(self) -> None:
        """Silence the control branch; the model then equals the frozen base."""
        for name, p in self.control.items():
            if name.startswith("fuse/"):
                p.value.data[...] = 0.0

    def zero_grads(self) -> None:
        for p in self.trainable_parameters():
            p.zero_grad()

    def save_checkpoint(self, path) -> None:
        from .checkpoint import save_model

        save_model(path, self)

    # -- forward --------------------------------------------------------------

    def encode_layout(self, cond: lay.LayoutCondition):
        """Layout tokens plus their rotary tables."""
        cfg = self.base.cfg
        kw = dict(
            text_encode=self.base.encode_text,
            params=self.layout_params,
            grid_rows=cfg.grid,
            grid_cols=cfg.grid,
            token_len=cfg.entity_token_len,
            max_entities=cfg.max_entities,
            freqs=self.ctl.fourier_freqs,
        )
        if self.ctl.layout_encoder == BOX_TEXT:
            tokens, positions = lay.encode_layout(cond, **kw)
        else:
            tokens, positions = lay.encode_layout_gligen(cond, **kw)
        return tokens, self._layout_cs(positions)

    def _layout_cs(self, positions):
        key = tuple((p.i, p.j) for p in positions)
        cs = self._layout_cs_cache.get(key)
        if cs is None:
            if len(self._layout_cs_cache) >= 8192:
                self._layout_cs_cache.clear()
            cs = stream_cos_sin(positions, self.base.rope, self.base.cfg.heads)
            self._layout_cs_cache[key] = cs
        return cs

    def encode_layout_batch(self, conds):
        """Batched layout tokens (B, l, d) plus stacked rotary tables."""
        cfg = self.base.cfg
        kw = dict(
            text_encode=self.base.encode_text,
            params=self.layout_params,
            grid_rows=cfg.grid,
            grid_cols=cfg.grid,
            token_len=cfg.entity_token_len,
            max_entities=cfg.max_entities,
            freqs=self.ctl.fourier_freqs,
        )
        if self.ctl.layout_encoder == BOX_TEXT:
            tokens, positions = lay.encode_layout_batch(conds, **kw)
        else:
            tokens, positions = lay.encode_layout_gligen_batch(conds, **kw)
        tables = [self._layout_cs(pos) for pos in positions]
        cos = np.stack([c for c, _ in tables])
        sin = np.stack([s for _, s in tables])
        return tokens, (cos, sin)

    def _fuse_weight(self, site: int):
        if self.ctl.fusion_per_site:
            return self.control[f"fuse/site{site}/w"]
        return self.control[f"fuse/block{site // self.ctl.interval}/w"]

    def full_forward(self, x, t: float, prompt, cond: lay.LayoutCondition) -> ad.Array:
        """Noise prediction with the control branch steering the trunk."""
        base = self.base
        cfg = base.cfg
        X = base.embed_image(x)
        C_T = base.encode_text(prompt)
        t_emb = base.timestep_embed(t)
        C_L, cs_layout = self.encode_layout(cond)
        cs_text = base.zero_cs(C_T.data.shape[0])
        for k in range(cfg.depth // self.ctl.interval):
            X_ctl, C_L = run_block(
                self.control, f"block{k}", cfg, X, C_L, t_emb, base.img_cs, cs_layout
            )
            for s in range(self.ctl.interval):
                j = k * self.ctl.interval + s
                X, C_T = run_block(
                    base.params, f"block{j}", cfg, X, C_T, t_emb, base.img_cs, cs_text
                )
                X = fuse(X, X_ctl, self._fuse_weight(j))
        return base.finalize(X, t_emb, x)

    def batch_forward(self, x, t, prompts, conds) -> ad.Array:
        """full_forward over a batch whose layouts share an entity count."""
        base = self.base
        cfg = base.cfg
        X = base.embed_image_batch(x)
        C_T = base.encode_text_batch(prompts)
        t_emb = base.timestep_embed_batch(t)
        C_L, cs_layout = self.encode_layout_batch(conds)
        cs_text = base.zero_cs(C_T.data.shape[1])
        for k in range(cfg.depth // self.ctl.interval):
            X_ctl, C_L = run_block(
                self.control, f"block{k}", cfg, X, C_L, t_emb, base.img_cs, cs_layout
            )
            for s in range(self.ctl.interval):
                j = k * self.ctl.interval + s
                X, C_T = run_block(
                    base.params, f"block{j}", cfg, X, C_T, t_emb, base.img_cs, cs_text
                )
                X = fuse(X, X_ctl, self._fuse_weight(j))
        return base.finalize_batch(X, t_emb, x)

    def forward_np(self, x, t, prompt, cond) -> np.ndarray:
        """Off-tape convenience for sampling and evaluation."""
        return self.full_forward(x, t, prompt, cond).data

    def forward_np_batch(self, x, t, prompts, conds) -> np.ndarray:
        return self.batch_forward(x, t, prompts, conds).data
