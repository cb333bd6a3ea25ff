"""Layout conditions and their token encoders.

The main encoder adds a zero-initialized projection of box features onto the
per-token text encoding of the entity phrase, so a fresh model reads layout
tokens as pure text. A pooled single-token encoder is kept as the baseline
for the no-parameter-copy ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .rope import GridPos, center_patch_index


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized [0, 1] coordinates, x1 < x2, y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValidationError(
                f"bad bbox ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def center(self):
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)


@dataclass(frozen=True)
class Entity:
    """One conditioned object: its token ids and its box."""

    tokens: tuple
    box: BBox


@dataclass(frozen=True)
class LayoutCondition:
    """Ordered entities conditioning one image."""

    entities: tuple

    def __post_init__(self):
        if len(self.entities) == 0:
            raise ValidationError("layout needs at least one entity")


def fourier_embed(box: BBox, freqs: int = 8) -> np.ndarray:
    """Sinusoidal features of the four box coordinates, coordinate-major.

    For each coordinate v and k < freqs emits sin(2^k pi v), cos(2^k pi v);
    output length is 8 * freqs and every value lies in [-1, 1].
    """
    if freqs <= 0:
        raise ValidationError(f"freqs must be positive, got {freqs}")
    scales = (2.0 ** np.arange(freqs)) * np.pi
    out = np.empty(8 * freqs)
    for c, v in enumerate(box):
        ang = scales * v
        out[2 * c * freqs : (2 * c + 1) * freqs] = np.sin(ang)
        out[(2 * c + 1) * freqs : (2 * c + 2) * freqs] = np.cos(ang)
    return out


def init_box_text_params(d_model: int, freqs: int, rng) -> dict:
    """Two-layer box MLP plus the zero projection gating it into the text."""
    p = {}
    fan = 8 * freqs
    p["layout/mlp_w1"] = ad.Parameter("layout/mlp_w1", rng.normal(0.0, fan**-0.5, (fan, d_model)))
    p["layout/mlp_b1"] = ad.Parameter("layout/mlp_b1", np.zeros(d_model))
    p["layout/mlp_w2"] = ad.Parameter("layout/mlp_w2", rng.normal(0.0, d_model**-0.5, (d_model, d_model)))
    p["layout/mlp_b2"] = ad.Parameter("layout/mlp_b2", np.zeros(d_model))
    p["layout/proj"] = ad.Parameter("layout/proj", np.zeros((d_model, d_model)))
    return p


def init_gligen_params(d_model: int, freqs: int, rng) -> dict:
    """Pooled-text baseline encoder: MLP over [pooled text, box features]."""
    p = {}
    fan = d_model + 8 * freqs
    p["layout/g_w1"] = ad.Parameter("layout/g_w1", rng.normal(0.0, fan**-0.5, (fan, d_model)))
    p["layout/g_b1"] = ad.Parameter("layout/g_b1", np.zeros(d_model))
    p["layout/g_w2"] = ad.Parameter("layout/g_w2", rng.normal(0.0, d_model**-0.5, (d_model, d_model)))
    p["layout/g_b2"] = ad.Parameter("layout/g_b2", np.zeros(d_model))
    return p


def encode_entity(e: Entity, text_encode, params: dict, token_len: int, freqs: int = 8):
    """Per-token encoding of one entity: text rows plus the projected box shift.

    With the projection still zero this equals the pure text encoding
    bit-for-bit. Returns an Array of shape (token_len, d).
    """
    tokens, _ = encode_layout_batch(
        [LayoutCondition((e,))], text_encode, params, 1, 1, token_len, 1, freqs
    )
    return ad.reshape(tokens, tokens.data.shape[1:])


def encode_layout(cond: LayoutCondition, text_encode, params: dict, grid_rows: int, grid_cols: int, token_len: int, max_entities: int, freqs: int = 8):
    """Stacked entity encodings plus one grid position per layout token.

    Each entity contributes its per-token text encoding shifted by a learned
    projection of its box features; the projection starts at zero. Returns
    (tokens Array of shape (n_entities * token_len, d), positions list of
    GridPos repeated token_len times per entity).
    """
    tokens, positions = encode_layout_batch(
        [cond], text_encode, params, grid_rows, grid_cols, token_len, max_entities, freqs
    )
    return ad.reshape(tokens, tokens.data.shape[1:]), positions[0]


def _check_batch(conds, max_entities: int, token_len: int) -> int:
    n = len(conds[0].entities)
    for c in conds:
        if len(c.entities) != n:
            raise ValidationError("batched layouts must share an entity count")
        for e in c.entities:
            if len(e.tokens) != token_len:
                raise ValidationError(
                    f"entity has {len(e.tokens)} tokens, expected {token_len}"
                )
    if n > max_entities:
        raise ValidationError(f"{n} entities exceeds limit {max_entities}")
    return n


def encode_layout_batch(conds, text_encode, params: dict, grid_rows: int, grid_cols: int, token_len: int, max_entities: int, freqs: int = 8):
    """Batched encode_layout over layouts sharing one entity count.

    Text rows reuse the frozen encoder (safe to treat as constants); box
    features run through the MLP as one stacked product. Returns (tokens
    Array of shape (B, n_entities * token_len, d), per-sample position
    lists).
    """
    n = _check_batch(conds, max_entities, token_len)
    text_rows = []
    feats = []
    positions = []
    for c in conds:
        text_rows.append([text_encode(e.tokens).data for e in c.entities])
        pos = []
        for e in c.entities:
            feats.append(fourier_embed(e.box, freqs))
            pos.extend([center_patch_index(e.box, grid_rows, grid_cols)] * token_len)
        positions.append(pos)
    batch = len(conds)
    h = ad.gelu(ad.add_vec(ad.matmul(ad.Array(np.asarray(feats)), params["layout/mlp_w1"]), params["layout/mlp_b1"]))
    h = ad.add_vec(ad.matmul(h, params["layout/mlp_w2"]), params["layout/mlp_b2"])
    delta = ad.matmul(h, params["layout/proj"])
    d = delta.data.shape[-1]
    tokens = ad.add(ad.Array(np.asarray(text_rows)), ad.reshape(delta, (batch, n, 1, d)))
    return ad.reshape(tokens, (batch, n * token_len, d)), positions


def encode_layout_gligen_batch(conds, text_encode, params: dict, grid_rows: int, grid_cols: int, token_len: int, max_entities: int, freqs: int = 8):
    """Batched pooled-token encoding: one token and one position per entity."""
    n = _check_batch(conds, max_entities, token_len)
    rows = []
    positions = []
    for c in conds:
        for e in c.entities:
            text = text_encode(e.tokens).data
            pooled = np.full((1, token_len), 1.0 / token_len) @ text
            rows.append(np.concatenate([pooled[0], fourier_embed(e.box, freqs)]))
        positions.append([center_patch_index(e.box, grid_rows, grid_cols) for e in c.entities])
    u = ad.Array(np.asarray(rows))
    h = ad.gelu(ad.add_vec(ad.matmul(u, params["layout/g_w1"]), params["layout/g_b1"]))
    h = ad.add_vec(ad.matmul(h, params["layout/g_w2"]), params["layout/g_b2"])
    d = h.data.shape[-1]
    return ad.reshape(h, (len(conds), n, d)), positions


def encode_layout_gligen(cond: LayoutCondition, text_encode, params: dict, grid_rows: int, grid_cols: int, token_len: int, max_entities: int, freqs: int = 8):
    """Pooled-token layout encoding: one token and one position per entity."""
    tokens, positions = encode_layout_gligen_batch(
        [cond], text_encode, params, grid_rows, grid_cols, token_len, max_entities, freqs
    )
    return ad.reshape(tokens, tokens.data.shape[1:]), positions[0]


def gligen_encode(e: Entity, text_encode, params: dict, token_len: int, freqs: int = 8) -> ad.Array:
    """Single pooled token for one entity, shape (d,)."""
    tokens, _ = encode_layout_gligen_batch(
        [LayoutCondition((e,))], text_encode, params, 1, 1, token_len, 1, freqs
    )
    return ad.reshape(tokens, tokens.data.shape[2:])
