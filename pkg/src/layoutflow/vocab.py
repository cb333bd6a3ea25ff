"""Closed token vocabulary for the blob world.

Each entity description is exactly four token slots: color, shape, size or
padding, position phrase or padding. Multi-word position phrases are single
tokens. The global prompt is the concatenation of entity token groups.
"""

from __future__ import annotations

from .errors import ValidationError

PAD = 0
NULL = 1

COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta", "black", "white")
SHAPES = ("square", "disk")
SIZES = ("tiny", "small", "modest", "large", "huge")
POSITIONS = (
    "on the top of image",
    "on the bottom of image",
    "on the left of image",
    "on the right of image",
    "in the center of image",
)

WORDS = ("<pad>", "<null>") + COLORS + SHAPES + SIZES + POSITIONS
WORD_ID = {w: i for i, w in enumerate(WORDS)}

ENTITY_TOKEN_LEN = 4

# 8-bit sRGB values drawn on the canvas, one per color word
PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "black": (0, 0, 0),
    "white": (255, 255, 255),
}

BACKGROUND = (204, 204, 204)


def entity_tokens(color: str, shape: str, size=None, position=None) -> tuple:
    """Token ids for one entity phrase, padded to the fixed slot count."""
    for word, table in ((color, COLORS), (shape, SHAPES)):
        if word not in table:
            raise ValidationError(f"unknown word {word!r}")
    if size is not None and size not in SIZES:
        raise ValidationError(f"unknown size {size!r}")
    if position is not None and position not in POSITIONS:
        raise ValidationError(f"unknown position {position!r}")
    return (
        WORD_ID[color],
        WORD_ID[shape],
        WORD_ID[size] if size else PAD,
        WORD_ID[position] if position else PAD,
    )


def global_tokens(entity_token_groups, length: int) -> tuple:
    """Concatenate entity token groups, then pad or truncate to length."""
    flat = [t for group in entity_token_groups for t in group]
    flat = flat[:length]
    flat.extend([PAD] * (length - len(flat)))
    return tuple(flat)


def null_tokens(length: int) -> tuple:
    """The unconditional prompt: every slot is the null token."""
    return (NULL,) * length
