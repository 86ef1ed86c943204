"""The dihedral group of the square acting on H x W maps.

Code ``t`` encodes ``flipH^(t // 4) o rot90^(t % 4)``: rotate first by
``t % 4`` quarter turns counterclockwise, then mirror left-right if
``t >= 4``. ``rot90`` is ``out[i][j] = in[j][W-1-i]`` and ``flipH`` is
``out[i][j] = in[i][W-1-j]``. Code 6 (flipH after rot180) is the vertical
flip.

Every function acts on the last two axes, so stacks of maps are transformed
in one call.
"""
from enum import IntEnum

import numpy as np

from .errors import ShapeError


class D4Code(IntEnum):
    IDENTITY = 0
    ROT90 = 1
    ROT180 = 2
    ROT270 = 3
    FLIP_H = 4
    FLIP_H_ROT90 = 5
    FLIP_V = 6
    FLIP_H_ROT270 = 7


ALL_CODES = tuple(D4Code)
ROTATIONS = ALL_CODES[:4]
REFLECTIONS = ALL_CODES[4:]
# codes that keep a rectangle's shape
SHAPE_PRESERVING = (D4Code.IDENTITY, D4Code.ROT180, D4Code.FLIP_H, D4Code.FLIP_V)


def _check_code(t):
    t = int(t)
    if not 0 <= t < 8:
        raise ValueError(f"D4 code must be in 0..7, got {t}")
    return t


def apply(m, t):
    """Transform the trailing H x W axes of ``m`` by code ``t``.

    Returns a new contiguous array; the input is never modified.
    """
    t = _check_code(t)
    m = np.asarray(m)
    if m.ndim < 2:
        raise ShapeError("D4 transforms need at least 2 dimensions", m.shape)
    if t % 2 == 1 and m.shape[-1] != m.shape[-2]:
        raise ShapeError(f"code {t} needs a square map", m.shape)
    out = np.rot90(m, t % 4, axes=(-2, -1))
    if t >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def compose(a, b):
    """Code of ``apply(apply(m, b), a)``."""
    a, b = _check_code(a), _check_code(b)
    flip_a, rot_a = divmod(a, 4)
    flip_b, rot_b = divmod(b, 4)
    # rot^k o flip == flip o rot^-k
    rot = (rot_b + (-rot_a if flip_b else rot_a)) % 4
    return D4Code(4 * (flip_a ^ flip_b) + rot)


def invert(t):
    t = _check_code(t)
    if t >= 4:
        return D4Code(t)
    return D4Code(-t % 4)


def sample_code(stream, exclude_identity=False):
    """Uniform draw over the 8 codes (or the 7 non-identity codes)."""
    low = 1 if exclude_identity else 0
    return D4Code(int(stream.integers(low, 8)))


def orbit(m):
    """All 8 transforms of a square map, ordered by code."""
    m = np.asarray(m)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ShapeError("orbit needs a square map", m.shape)
    return [apply(m, t) for t in ALL_CODES]
