"""Frozen-backbone token bundles and their synthetic stand-in.

A TokenBundle is everything the pipeline reads from a backbone for one image:
per-layer per-head image token maps, the matching class tokens, and the final
attention-layer query/key rows used to derive pseudo-masks. Bundles are plain
numpy data; nothing downstream ever backpropagates into them.

The synthetic generator builds bundles from small class-id grids so that the
downstream cosine attention provably separates the image's designated class
from everything else (margins +1 / <= -0.52 before noise). Class identities
sit on simplex directions (pairwise cosine -1/(n-1)); each key additionally
carries a signed boost along its image's designated direction, with the boost
weight solved in closed form for the off-class margin.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from .autodiff import bilinear_resize_array
from .seeding import rng_for

TOKEN_MAGIC = b"CSTK"
TOKEN_VERSION = 1

SIGNAL_STRENGTH = 1.0
OFF_CLASS_MARGIN = 0.52
MIN_RECT_SIDE = 3
MAX_RECT_SIDE = 8


class TokenFileError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 2
    heads: int = 4
    head_dim: int = 16
    grid: Tuple[int, int] = (16, 16)
    sigma: float = 0.05


@dataclass
class GridImage:
    """A class-id grid plus its intrinsic designated (primary) class."""
    name: str
    grid: np.ndarray           # (h, w) int, 0 is background
    designated: int
    classes: Tuple[int, ...]   # designated first, remaining visible classes sorted
    num_class_ids: int         # global id count including background


@dataclass
class TokenBundle:
    image_tokens: np.ndarray   # (L, M, C, T)
    class_tokens: np.ndarray   # (L, M, C)
    last_q: np.ndarray         # (M, 1+T, C), row 0 is the class-token row
    last_k: np.ndarray         # (M, 1+T, C), row 0 is the class-token row
    grid: Tuple[int, int]

    @property
    def layers(self) -> int:
        return self.image_tokens.shape[0]

    @property
    def heads(self) -> int:
        return self.image_tokens.shape[1]

    @property
    def tokens(self) -> int:
        return self.image_tokens.shape[3]

    def validate(self) -> None:
        l, m, c, t = self.image_tokens.shape
        h, w = self.grid
        if t != h * w:
            raise ValueError(f"token bundle: T={t} != grid {self.grid}")
        if self.class_tokens.shape != (l, m, c):
            raise ValueError(f"token bundle: class tokens {self.class_tokens.shape}")
        for rows in (self.last_q, self.last_k):
            if rows.shape != (m, 1 + t, c):
                raise ValueError(f"token bundle: attention rows {rows.shape}")


def simplex_directions(n: int, dim: int) -> np.ndarray:
    """n unit vectors in R^dim with pairwise cosine exactly -1/(n-1)."""
    if dim < n:
        raise ValueError(f"simplex of {n} ids needs at least {n} dims, have {dim}")
    basis = np.eye(n) - 1.0 / n
    basis /= np.linalg.norm(basis, axis=1, keepdims=True)
    out = np.zeros((n, dim))
    out[:, :n] = basis
    return out


def designated_boost(num_class_ids: int, margin: float = OFF_CLASS_MARGIN) -> float:
    """Boost weight so off-class keys sit below -margin against their probe."""
    rho = 1.0 / (num_class_ids - 1)
    gamma = -rho + margin * np.sqrt((1.0 - rho * rho) / (1.0 - margin * margin))
    return max(gamma, 0.0)


def random_grid_image(name: str, rng: np.random.Generator, fold_classes,
                      designated: int, num_class_ids: int,
                      grid: Tuple[int, int] = (16, 16)) -> GridImage:
    """1-3 axis-aligned rectangles of distinct classes on a background grid.

    The designated class is drawn last so it is never fully occluded.
    """
    h, w = grid
    cells = np.zeros((h, w), dtype=np.int64)
    others = [c for c in fold_classes if c != designated]
    rng.shuffle(others)
    n_rects = int(rng.integers(1, 4))
    order = others[:n_rects - 1] + [designated]
    for cls in order:
        rh = int(rng.integers(MIN_RECT_SIDE, MAX_RECT_SIDE + 1))
        rw = int(rng.integers(MIN_RECT_SIDE, MAX_RECT_SIDE + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        cells[top:top + rh, left:left + rw] = cls
    visible = sorted(int(c) for c in np.unique(cells) if c != 0 and c != designated)
    return GridImage(name=name, grid=cells, designated=designated,
                     classes=(designated, *visible), num_class_ids=num_class_ids)


def synthetic_tokens(image: GridImage, cfg: BackboneConfig, seed: int) -> TokenBundle:
    """Deterministic bundle for (image, cfg, seed).

    Image tokens are scaled one-hot class embeddings plus per-layer/head noise;
    class tokens average the designated-class tokens. last_q/last_k realize the
    margin construction described in the module docstring.
    """
    n_ids = image.num_class_ids
    if cfg.head_dim < n_ids + 1:
        raise ValueError(
            f"head_dim {cfg.head_dim} too small for {n_ids} class ids")
    h, w = image.grid.shape
    t = h * w
    flat = image.grid.reshape(-1)
    rng = rng_for(seed, "tokens")

    onehot = np.zeros((cfg.head_dim, t))
    onehot[flat, np.arange(t)] = SIGNAL_STRENGTH
    noise = rng.normal(scale=cfg.sigma, size=(cfg.layers, cfg.heads, cfg.head_dim, t)) \
        if cfg.sigma > 0 else np.zeros((cfg.layers, cfg.heads, cfg.head_dim, t))
    image_tokens = onehot[None, None] + noise

    fg = flat == image.designated
    if fg.any():
        class_tokens = image_tokens[:, :, :, fg].mean(axis=3)
    else:
        class_tokens = image_tokens.mean(axis=3)

    directions = simplex_directions(n_ids, cfg.head_dim)
    gamma = designated_boost(n_ids)
    signs = np.where(fg, 1.0, -1.0)
    keys = directions[flat] + (gamma * signs)[:, None] * directions[image.designated]
    probe = directions[image.designated]

    def attention_rows():
        rows = np.empty((cfg.heads, 1 + t, cfg.head_dim))
        rows[:, 0] = probe
        rows[:, 1:] = keys
        if cfg.sigma > 0:
            rows += rng.normal(scale=cfg.sigma, size=rows.shape)
        return rows

    last_q = attention_rows()
    last_k = attention_rows()

    bundle = TokenBundle(image_tokens=image_tokens, class_tokens=class_tokens,
                         last_q=last_q, last_k=last_k, grid=(h, w))
    bundle.validate()
    return bundle


def resize_support_grid(bundle: TokenBundle, target: Tuple[int, int]) -> TokenBundle:
    """Bilinearly resample the token grid; class tokens are untouched."""
    h, w = bundle.grid
    th, tw = target
    if (th, tw) == (h, w):
        return bundle
    l, m, c, t = bundle.image_tokens.shape
    maps = bundle.image_tokens.reshape(l, m, c, h, w)
    image_tokens = bilinear_resize_array(maps, (th, tw)).reshape(l, m, c, th * tw)

    def resize_rows(rows):
        head = rows[:, :1]
        grid_rows = rows[:, 1:].reshape(m, h, w, c).transpose(0, 3, 1, 2)
        resized = bilinear_resize_array(grid_rows, (th, tw))
        back = resized.transpose(0, 2, 3, 1).reshape(m, th * tw, c)
        return np.concatenate([head, back], axis=1)

    out = TokenBundle(image_tokens=image_tokens,
                      class_tokens=bundle.class_tokens.copy(),
                      last_q=resize_rows(bundle.last_q),
                      last_k=resize_rows(bundle.last_k),
                      grid=(th, tw))
    out.validate()
    return out


def save_tokens(bundle: TokenBundle, path) -> None:
    """CSTK layout: magic, version, L M C grid_h grid_w (u32 LE), then image
    tokens (L*M blocks of C x T), class tokens, last_q, last_k as float32 LE."""
    bundle.validate()
    l, m, c, t = bundle.image_tokens.shape
    h, w = bundle.grid
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC)
        fh.write(struct.pack("<IIIIII", TOKEN_VERSION, l, m, c, h, w))
        fh.write(np.ascontiguousarray(bundle.image_tokens, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bundle.class_tokens, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bundle.last_q, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(bundle.last_k, dtype="<f4").tobytes())


def load_tokens(path) -> TokenBundle:
    path = Path(path)
    if not path.exists():
        raise TokenFileError(f"token file not found: {path}")
    data = path.read_bytes()
    if data[:4] != TOKEN_MAGIC:
        raise TokenFileError(f"bad token magic in {path}")
    try:
        version, l, m, c, h, w = struct.unpack_from("<IIIIII", data, 4)
    except struct.error as exc:
        raise TokenFileError(f"truncated token header in {path}: {exc}")
    if version != TOKEN_VERSION:
        raise TokenFileError(f"unsupported token version {version}")
    t = h * w
    counts = [l * m * c * t, l * m * c, m * (1 + t) * c, m * (1 + t) * c]
    if len(data) != 28 + 4 * sum(counts):
        raise TokenFileError(
            f"token payload size mismatch in {path}: "
            f"{len(data)} bytes for extents L={l} M={m} C={c} grid={h}x{w}")
    arrays = []
    offset = 28
    for n in counts:
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=offset)
                      .astype(np.float64))
        offset += 4 * n
    bundle = TokenBundle(image_tokens=arrays[0].reshape(l, m, c, t),
                         class_tokens=arrays[1].reshape(l, m, c),
                         last_q=arrays[2].reshape(m, 1 + t, c),
                         last_k=arrays[3].reshape(m, 1 + t, c),
                         grid=(h, w))
    bundle.validate()
    return bundle
