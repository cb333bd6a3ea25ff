"""Joint image/condition transformer over patch tokens.

Each block runs one attention pass over the concatenated image and condition
streams with per-stream projections, rotary positions applied to queries and
keys, and timestep modulation on every pre-norm. Image tokens sit at their
patch-grid coordinates; condition tokens sit at rotation-free (0, 0) unless
a layout pins them elsewhere. Streams carry a leading batch axis internally;
the single-sample entry points wrap a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, ValidationError
from .rope import GridPos, RopeTable, stream_cos_sin

TEXT_LAYERS = 2


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 4
    d_model: int = 64
    heads: int = 4
    head_dim: int = 16
    depth: int = 4
    vocab_size: int = 32
    text_len: int = 16
    entity_token_len: int = 4
    max_entities: int = 4
    ff_mult: int = 4

    def __post_init__(self):
        if self.d_model != self.heads * self.head_dim:
            raise ConfigError(
                f"d_model {self.d_model} != heads {self.heads} * head_dim {self.head_dim}"
            )
        if self.head_dim % 4 != 0:
            raise ConfigError(f"head_dim {self.head_dim} not a multiple of 4")
        if self.image_size % self.patch != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch {self.patch}"
            )
        for field in ("image_size", "channels", "patch", "depth", "vocab_size", "text_len", "entity_token_len", "max_entities", "ff_mult"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_image_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


def patchify(x, patch: int) -> ad.Array:
    """Image to patch tokens in row-major order.

    (H, W, C) maps to (H*W/p^2, p*p*C); a leading batch axis is carried
    through unchanged.
    """
    x = x if isinstance(x, ad.Array) else ad.Array(x)
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"patchify: image {x.data.shape}")
    batched = x.data.ndim == 4
    h, w, c = x.data.shape[-3:]
    if h % patch != 0 or w % patch != 0:
        raise DimensionError(f"patchify: image {x.data.shape} vs patch {patch}")
    gh, gw = h // patch, w // patch
    if batched:
        b = x.data.shape[0]
        t = ad.reshape(x, (b, gh, patch, gw, patch, c))
        t = ad.permute(t, (0, 1, 3, 2, 4, 5))
        return ad.reshape(t, (b, gh * gw, patch * patch * c))
    t = ad.reshape(x, (gh, patch, gw, patch, c))
    t = ad.permute(t, (0, 2, 1, 3, 4))
    return ad.reshape(t, (gh * gw, patch * patch * c))


def unpatchify(tokens, patch: int, height: int, width: int, channels: int) -> ad.Array:
    """Inverse of patchify."""
    gh, gw = height // patch, width // patch
    if tokens.data.ndim == 3:
        b = tokens.data.shape[0]
        t = ad.reshape(tokens, (b, gh, gw, patch, patch, channels))
        t = ad.permute(t, (0, 1, 3, 2, 4, 5))
        return ad.reshape(t, (b, height, width, channels))
    t = ad.reshape(tokens, (gh, gw, patch, patch, channels))
    t = ad.permute(t, (0, 2, 1, 3, 4))
    return ad.reshape(t, (height, width, channels))


def timestep_features(t, d_model: int) -> np.ndarray:
    """Interleaved sin/cos features of the scaled timestep; [0,1,0,1,...] at t=0.

    Scalar t gives (d_model,); an array of shape (B,) gives (B, d_model).
    """
    half = d_model // 2
    k = np.arange(half)
    freqs = 10000.0 ** (-k / max(half - 1, 1))
    ts = np.asarray(t, dtype=np.float64)
    ang = 1000.0 * ts[..., None] * freqs
    out = np.empty(ts.shape + (d_model,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _new(params: dict, name: str, value) -> None:
    if name in params:
        raise ConfigError(f"duplicate parameter name {name}")
    params[name] = ad.Parameter(name, value)


def _linear(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, fan_in**-0.5, (fan_in, fan_out))


def init_attention_layer(params: dict, prefix: str, cfg: ModelConfig, rng, modulated: bool, qkv_bias: bool = True) -> None:
    """Pre-norm attention + feed-forward parameter set for one stream.

    The single-stream text encoder runs with qkv_bias=False: with every key
    at the origin rotation a shared key bias shifts whole softmax rows by a
    constant, so the slice could never learn.
    """
    d = cfg.d_model
    _new(params, f"{prefix}/ln1_g", np.ones(d))
    _new(params, f"{prefix}/ln1_b", np.zeros(d))
    _new(params, f"{prefix}/qkv_w", _linear(rng, d, 3 * d))
    if qkv_bias:
        _new(params, f"{prefix}/qkv_b", np.zeros(3 * d))
    _new(params, f"{prefix}/o_w", _linear(rng, d, d))
    _new(params, f"{prefix}/o_b", np.zeros(d))
    _new(params, f"{prefix}/ln2_g", np.ones(d))
    _new(params, f"{prefix}/ln2_b", np.zeros(d))
    _new(params, f"{prefix}/ff1_w", _linear(rng, d, cfg.ff_mult * d))
    _new(params, f"{prefix}/ff1_b", np.zeros(cfg.ff_mult * d))
    _new(params, f"{prefix}/ff2_w", _linear(rng, cfg.ff_mult * d, d))
    _new(params, f"{prefix}/ff2_b", np.zeros(d))
    if modulated:
        # zero init: modulation is a no-op until trained
        _new(params, f"{prefix}/mod_w", np.zeros((d, 4 * d)))
        _new(params, f"{prefix}/mod_b", np.zeros(4 * d))


def init_block_params(params: dict, prefix: str, cfg: ModelConfig, rng) -> None:
    """Both streams of one joint block."""
    init_attention_layer(params, f"{prefix}/img", cfg, rng, modulated=True)
    init_attention_layer(params, f"{prefix}/cond", cfg, rng, modulated=True)


def init_base_params(cfg: ModelConfig, rng) -> dict:
    d = cfg.d_model
    params = {}
    _new(params, "embed/token", rng.normal(0.0, 0.25, (cfg.vocab_size, d)))
    _new(params, "embed/pos", rng.normal(0.0, 0.25, (cfg.text_len, d)))
    for i in range(TEXT_LAYERS):
        init_attention_layer(params, f"text/layer{i}", cfg, rng, modulated=False, qkv_bias=False)
    _new(params, "patch/w", _linear(rng, cfg.patch_dim, d))
    _new(params, "patch/b", np.zeros(d))
    _new(params, "time/w1", _linear(rng, d, d))
    _new(params, "time/b1", np.zeros(d))
    _new(params, "time/w2", _linear(rng, d, d))
    _new(params, "time/b2", np.zeros(d))
    for j in range(cfg.depth):
        init_block_params(params, f"block{j}", cfg, rng)
    _new(params, "final/ln_g", np.ones(d))
    _new(params, "final/ln_b", np.zeros(d))
    _new(params, "final/mod_w", np.zeros((d, 2 * d)))
    _new(params, "final/mod_b", np.zeros(2 * d))
    _new(params, "head/w", _linear(rng, d, cfg.patch_dim))
    _new(params, "head/b", np.zeros(cfg.patch_dim))
    return params


def _lin(x, w, b=None) -> ad.Array:
    """Linear map over the last axis of a (B, n, d) stream via one flat product."""
    batch, n, din = x.data.shape
    h = ad.matmul(ad.reshape(x, (batch * n, din)), w)
    if b is not None:
        h = ad.add_vec(h, b)
    return ad.reshape(h, (batch, n, h.data.shape[-1]))


def _modulate(h, mod, lo: int, d: int):
    batch = mod.data.shape[0]
    scale = ad.reshape(ad.slice_last(mod, lo, lo + d), (batch, 1, d))
    shift = ad.reshape(ad.slice_last(mod, lo + d, lo + 2 * d), (batch, 1, d))
    return ad.add(ad.mul(h, ad.sadd(scale, 1.0)), shift)


def _attn_inputs(params, prefix, cfg, x, t_emb, cos, sin):
    d = cfg.d_model
    h = ad.layer_norm(x, params[f"{prefix}/ln1_g"], params[f"{prefix}/ln1_b"])
    mod = None
    if f"{prefix}/mod_w" in params:
        mod = ad.add_vec(ad.matmul(t_emb, params[f"{prefix}/mod_w"]), params[f"{prefix}/mod_b"])
        h = _modulate(h, mod, 0, d)
    qkv = _lin(h, params[f"{prefix}/qkv_w"], params.get(f"{prefix}/qkv_b"))
    q = ad.rope_pairs(ad.slice_last(qkv, 0, d), cos, sin)
    k = ad.rope_pairs(ad.slice_last(qkv, d, 2 * d), cos, sin)
    v = ad.slice_last(qkv, 2 * d, 3 * d)
    return q, k, v, mod


def _heads(x, heads: int, head_dim: int):
    """(B, n, d) to (B*heads, n, head_dim) for batched attention products."""
    batch, n, _ = x.data.shape
    t = ad.permute(ad.reshape(x, (batch, n, heads, head_dim)), (0, 2, 1, 3))
    return ad.reshape(t, (batch * heads, n, head_dim))


def _merge_heads(x, batch: int, heads: int):
    _, n, hd = x.data.shape
    t = ad.permute(ad.reshape(x, (batch, heads, n, hd)), (0, 2, 1, 3))
    return ad.reshape(t, (batch, n, heads * hd))


def _ff(params, prefix, cfg, x, mod):
    d = cfg.d_model
    h = ad.layer_norm(x, params[f"{prefix}/ln2_g"], params[f"{prefix}/ln2_b"])
    if mod is not None:
        h = _modulate(h, mod, 2 * d, d)
    h = ad.gelu(_lin(h, params[f"{prefix}/ff1_w"], params[f"{prefix}/ff1_b"]))
    return _lin(h, params[f"{prefix}/ff2_w"], params[f"{prefix}/ff2_b"])


def _attention(q, k, v, batch: int, cfg: ModelConfig, attn_sink=None):
    qh = _heads(q, cfg.heads, cfg.head_dim)
    kh = _heads(k, cfg.heads, cfg.head_dim)
    vh = _heads(v, cfg.heads, cfg.head_dim)
    scores = ad.smul(ad.matmul(qh, ad.swap_last2(kh)), cfg.head_dim**-0.5)
    attn = ad.softmax_rows(scores)
    if attn_sink is not None:
        attn_sink.append(attn.data)
    return _merge_heads(ad.matmul(attn, vh), batch, cfg.heads)


def run_block(params: dict, prefix: str, cfg: ModelConfig, X, C, t_emb, cs_img, cs_cond, attn_sink=None):
    """One joint block; returns updated (image stream, condition stream).

    Streams are (B, n, d); a 2-d (n, d) pair is lifted to a batch of one and
    returned in kind.
    """
    lifted = X.data.ndim == 2
    if lifted:
        X = ad.reshape(X, (1,) + X.data.shape)
        C = ad.reshape(C, (1,) + C.data.shape)
    batch, n, _ = X.data.shape
    m = C.data.shape[1]
    qi, ki, vi, mod_i = _attn_inputs(params, f"{prefix}/img", cfg, X, t_emb, *cs_img)
    qc, kc, vc, mod_c = _attn_inputs(params, f"{prefix}/cond", cfg, C, t_emb, *cs_cond)
    o = _attention(
        ad.concat_ax([qi, qc], 1),
        ad.concat_ax([ki, kc], 1),
        ad.concat_ax([vi, vc], 1),
        batch,
        cfg,
        attn_sink=attn_sink,
    )
    oi, oc = ad.slice_ax(o, 0, n, 1), ad.slice_ax(o, n, n + m, 1)
    X = ad.add(X, _lin(oi, params[f"{prefix}/img/o_w"], params[f"{prefix}/img/o_b"]))
    C = ad.add(C, _lin(oc, params[f"{prefix}/cond/o_w"], params[f"{prefix}/cond/o_b"]))
    X = ad.add(X, _ff(params, f"{prefix}/img", cfg, X, mod_i))
    C = ad.add(C, _ff(params, f"{prefix}/cond", cfg, C, mod_c))
    if lifted:
        X = ad.reshape(X, X.data.shape[1:])
        C = ad.reshape(C, C.data.shape[1:])
    return X, C


class BaseModel:
    """Frozen-capable text-to-image flow backbone."""

    def __init__(self, cfg: ModelConfig, rng=None, params: dict | None = None):
        self.cfg = cfg
        if params is None:
            if rng is None:
                rng = np.random.default_rng(0)
            params = init_base_params(cfg, rng)
        self.params = params
        self.rope = RopeTable(cfg.head_dim)
        grid_positions = [
            GridPos(idx // cfg.grid, idx % cfg.grid) for idx in range(cfg.n_image_tokens)
        ]
        self.img_cs = stream_cos_sin(grid_positions, self.rope, cfg.heads)
        self._zero_cs = {}
        self.text_cache_enabled = False
        self._text_cache = {}

    def parameters(self):
        return list(self.params.values())

    def freeze(self):
        for p in self.params.values():
            p.freeze()

    def zero_cs(self, length: int):
        """Identity rotation tables for condition tokens pinned at (0, 0)."""
        cs = self._zero_cs.get(length)
        if cs is None:
            half = self.cfg.d_model // 2
            cs = (np.ones((length, half)), np.zeros((length, half)))
            self._zero_cs[length] = cs
        return cs

    def _check_ids(self, flat) -> None:
        if any(i < 0 or i >= self.cfg.vocab_size for i in flat):
            raise ValidationError(f"token id out of range: {tuple(flat)}")

    def encode_text_batch(self, ids) -> ad.Array:
        """(B, L) token id rows through the small text transformer to (B, L, d)."""
        idx = np.asarray(ids, dtype=np.intp)
        if idx.ndim != 2:
            raise ValidationError(f"prompt batch must be 2-d, got shape {idx.shape}")
        length = idx.shape[1]
        if length == 0 or length > self.cfg.text_len:
            raise ValidationError(f"prompt length {length} not in [1, {self.cfg.text_len}]")
        self._check_ids(idx.reshape(-1).tolist())
        x = ad.add(
            ad.embed(self.params["embed/token"], idx),
            ad.slice0(self.params["embed/pos"].value, 0, length),
        )
        cs = self.zero_cs(length)
        batch = idx.shape[0]
        for i in range(TEXT_LAYERS):
            prefix = f"text/layer{i}"
            q, k, v, _ = _attn_inputs(self.params, prefix, self.cfg, x, None, *cs)
            o = _attention(q, k, v, batch, self.cfg)
            x = ad.add(x, _lin(o, self.params[f"{prefix}/o_w"], self.params[f"{prefix}/o_b"]))
            x = ad.add(x, _ff(self.params, prefix, self.cfg, x, None))
        return x

    def encode_text(self, ids) -> ad.Array:
        """Token + position embedding through the small text transformer."""
        ids = tuple(int(i) for i in ids)
        if len(ids) == 0 or len(ids) > self.cfg.text_len:
            raise ValidationError(f"prompt length {len(ids)} not in [1, {self.cfg.text_len}]")
        self._check_ids(ids)
        if self.text_cache_enabled:
            hit = self._text_cache.get(ids)
            if hit is not None:
                return ad.Array(hit)
        out = self.encode_text_batch(np.asarray([ids], dtype=np.intp))
        out = ad.reshape(out, out.data.shape[1:])
        if self.text_cache_enabled:
            if len(self._text_cache) >= 65536:
                self._text_cache.clear()
            self._text_cache[ids] = out.data
        return out

    def timestep_embed_batch(self, t) -> ad.Array:
        """(B,) timesteps to (B, d) embeddings."""
        ts = np.asarray(t, dtype=np.float64)
        if ts.ndim != 1:
            raise ValidationError(f"timestep batch must be 1-d, got shape {ts.shape}")
        if ts.size == 0 or (ts < 0.0).any() or (ts > 1.0).any():
            raise ValidationError(f"timestep outside [0, 1]: {ts.tolist()}")
        feats = ad.Array(timestep_features(ts, self.cfg.d_model))
        h = ad.gelu(ad.add_vec(ad.matmul(feats, self.params["time/w1"]), self.params["time/b1"]))
        return ad.add_vec(ad.matmul(h, self.params["time/w2"]), self.params["time/b2"])

    def timestep_embed(self, t: float) -> ad.Array:
        if not 0.0 <= t <= 1.0:
            raise ValidationError(f"timestep {t} outside [0, 1]")
        return self.timestep_embed_batch(np.asarray([float(t)]))

    def embed_image_batch(self, x) -> ad.Array:
        xa = x if isinstance(x, ad.Array) else ad.Array(x)
        expect = (self.cfg.image_size, self.cfg.image_size, self.cfg.channels)
        if xa.data.ndim != 4 or xa.data.shape[1:] != expect:
            raise DimensionError(f"image batch {xa.data.shape} vs config {expect}")
        return _lin(patchify(xa, self.cfg.patch), self.params["patch/w"], self.params["patch/b"])

    def embed_image(self, x) -> ad.Array:
        xa = x if isinstance(x, ad.Array) else ad.Array(x)
        expect = (self.cfg.image_size, self.cfg.image_size, self.cfg.channels)
        if xa.data.shape != expect:
            raise DimensionError(f"image {xa.data.shape} vs config {expect}")
        out = self.embed_image_batch(ad.reshape(xa, (1,) + expect))
        return ad.reshape(out, out.data.shape[1:])

    def finalize_batch(self, X, t_emb, x) -> ad.Array:
        """Trunk tokens to a noise image, plus the gated pixel pass-through.

        x is the raw image batch the trunk was fed; its patch tokens reach the
        output through a timestep-gated linear map so per-token magnitude
        survives the final normalization.
        """
        d = self.cfg.d_model
        batch = X.data.shape[0]
        h = ad.layer_norm(X, self.params["final/ln_g"], self.params["final/ln_b"])
        fmod = ad.add_vec(ad.matmul(t_emb, self.params["final/mod_w"]), self.params["final/mod_b"])
        h = _modulate(h, fmod, 0, d)
        out = _lin(h, self.params["head/w"], self.params["head/b"])
        xa = x if isinstance(x, ad.Array) else ad.Array(x)
        pix = patchify(xa, self.cfg.patch)
        gate = ad.add_vec(ad.matmul(t_emb, self.params["head/gate_w"]), self.params["head/gate_b"])
        skip = ad.mul(ad.reshape(gate, (batch, 1, 1)), _lin(pix, self.params["head/skip_w"]))
        out = ad.add(out, skip)
        return unpatchify(out, self.cfg.patch, self.cfg.image_size, self.cfg.image_size, self.cfg.channels)

    def finalize(self, X, t_emb, x) -> ad.Array:
        xa = x if isinstance(x, ad.Array) else ad.Array(x)
        out = self.finalize_batch(
            ad.reshape(X, (1,) + X.data.shape), t_emb, ad.reshape(xa, (1,) + xa.data.shape)
        )
        return ad.reshape(out, out.data.shape[1:])

    def base_forward_batch(self, x, t, prompts) -> ad.Array:
        """Noise prediction from the uncontrolled backbone, batched."""
        X = self.embed_image_batch(x)
        C = self.encode_text_batch(prompts)
        t_emb = self.timestep_embed_batch(t)
        cs_cond = self.zero_cs(C.data.shape[1])
        for j in range(self.cfg.depth):
            X, C = run_block(self.params, f"block{j}", self.cfg, X, C, t_emb, self.img_cs, cs_cond)
        return self.finalize_batch(X, t_emb, x)

    def base_forward(self, x, t: float, prompt) -> ad.Array:
        """Noise prediction from the uncontrolled backbone."""
        xa = x if isinstance(x, ad.Array) else ad.Array(x)
        out = self.base_forward_batch(
            ad.reshape(xa, (1,) + xa.data.shape),
            np.asarray([float(t)]),
            np.asarray([tuple(int(i) for i in prompt)], dtype=np.intp),
        )
        return ad.reshape(out, out.data.shape[1:])
