"""Toy text pipeline: "a {attribute} {noun}" prompts, a procedural glyph
renderer that serves as the dataset, a frozen autoregressive prompt encoder
and the token-surgery transforms used by the conditioning probes.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import CapacityError, ConfigurationError, VocabularyError

NOUNS = ("circle", "square", "triangle", "cross", "star", "ring", "bar", "diamond")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
TEXTURES = ("stripes", "checker", "dots", "noise")

COLOR, TEXTURE = "color", "texture"
SOS, SEM, EOS = "SOS", "SEM", "EOS"
EMPTY = None

SEQ_LEN = 8
TOKEN_DIM = 16

_RGB = {
    "red": (0.9, -0.3, -0.3),
    "green": (-0.3, 0.9, -0.3),
    "blue": (-0.3, -0.3, 0.9),
    "yellow": (0.9, 0.9, -0.3),
    "magenta": (0.9, -0.3, 0.9),
    "cyan": (-0.3, 0.9, 0.9),
}
BACKGROUND = -0.8
_TEX_HI, _TEX_LO = 0.9, 0.0


@dataclass(frozen=True)
class PromptSpec:
    noun_id: int
    attribute_id: int

    @property
    def attribute_kind(self):
        return COLOR if self.attribute_id < len(COLORS) else TEXTURE

    @property
    def words(self):
        return ("a", ATTRIBUTES[self.attribute_id], NOUNS[self.noun_id])

    @property
    def text(self):
        return " ".join(self.words)

    def validate(self):
        if not 0 <= self.noun_id < len(NOUNS):
            raise VocabularyError(f"noun_id {self.noun_id} outside [0, {len(NOUNS)})")
        if not 0 <= self.attribute_id < len(ATTRIBUTES):
            raise VocabularyError(
                f"attribute_id {self.attribute_id} outside [0, {len(ATTRIBUTES)})")
        return self


ATTRIBUTES = COLORS + TEXTURES


def all_prompts():
    return [PromptSpec(n, a) for n in range(len(NOUNS)) for a in range(len(ATTRIBUTES))]


# ---------------------------------------------------------------------------
# renderer

def _glyph_mask(noun, dx, dy):
    r = np.hypot(dx, dy)
    if noun == "circle":
        return r <= 1.0
    if noun == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8
    if noun == "triangle":
        # apex up (image rows grow downward)
        return (dy <= 0.75) & (np.abs(dx) <= 0.55 * (dy + 1.0))
    if noun == "cross":
        arm = 0.32
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= 1.0)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= 1.0))
    if noun == "star":
        theta = np.arctan2(dy, dx)
        return r <= 0.55 + 0.45 * np.cos(5 * (theta + np.pi / 2))
    if noun == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if noun == "bar":
        return (np.abs(dx) <= 1.0) & (np.abs(dy) <= 0.35)
    if noun == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.0
    raise VocabularyError(f"unknown noun {noun!r}")


@lru_cache(maxsize=None)
def _noise_texture(M, N):
    rng = np.random.default_rng(1234)
    return rng.uniform(_TEX_LO, _TEX_HI, size=(M, N))


def _fill(attribute, M, N):
    """Return the 3xMxN fill for an attribute, anchored to image coordinates."""
    rows, cols = np.mgrid[0:M, 0:N]
    if attribute in _RGB:
        rgb = np.asarray(_RGB[attribute])[:, None, None]
        return np.broadcast_to(rgb, (3, M, N)).astype(np.float64)
    if attribute == "stripes":
        pattern = np.where((cols // 2) % 2 == 0, _TEX_HI, _TEX_LO)
    elif attribute == "checker":
        pattern = np.where(((rows // 2) + (cols // 2)) % 2 == 0, _TEX_HI, _TEX_LO)
    elif attribute == "dots":
        pattern = np.where((rows % 3 == 1) & (cols % 3 == 1), _TEX_HI, _TEX_LO)
    elif attribute == "noise":
        pattern = _noise_texture(M, N)
    else:
        raise VocabularyError(f"unknown attribute {attribute!r}")
    return np.broadcast_to(pattern, (3, M, N)).astype(np.float64)


def render_example(p: PromptSpec, jitter_seed: int, M: int = 16, N: int = 16,
                   jitter: float = 1.0) -> np.ndarray:
    """Render the glyph for ``p`` as a float32 array of shape (3, M, N) in [-1, 1].

    Position and scale jitter depend only on ``jitter_seed`` (never on the
    prompt), so two prompts rendered with the same seed share a geometry.
    ``jitter=0`` gives the centred template used by the alignment classifier.
    """
    p.validate()
    mask = glyph_mask(p, jitter_seed, M, N, jitter)
    img = np.full((3, M, N), BACKGROUND)
    fill = _fill(ATTRIBUTES[p.attribute_id], M, N)
    img[:, mask] = fill[:, mask]
    return img.astype(np.float32)


def glyph_mask(p: PromptSpec, jitter_seed: int, M: int = 16, N: int = 16, jitter: float = 1.0):
    """Boolean MxN membership of the glyph, sharing the renderer's geometry."""
    rng = np.random.default_rng(jitter_seed)
    off_y, off_x = rng.uniform(-1.0, 1.0, size=2) * jitter
    scale = 1.0 + 0.1 * rng.uniform(-1.0, 1.0) * jitter
    radius = 0.34 * min(M, N) * scale
    rows, cols = np.mgrid[0:M, 0:N].astype(np.float64)
    return _glyph_mask(NOUNS[p.noun_id], (cols - (N - 1) / 2.0 - off_x) / radius,
                       (rows - (M - 1) / 2.0 - off_y) / radius)


def build_promptset(count: int, seed: int) -> list[PromptSpec]:
    """Sample ``count`` distinct prompts, balanced between colour and texture
    attributes (the two halves differ by at most one)."""
    colour = [p for p in all_prompts() if p.attribute_kind == COLOR]
    texture = [p for p in all_prompts() if p.attribute_kind == TEXTURE]
    if count < 0 or count > len(colour) + len(texture):
        raise CapacityError(f"cannot draw {count} prompts from {len(colour) + len(texture)}")
    n_tex = min(count // 2, len(texture))
    n_col = count - n_tex
    if n_col > len(colour):
        n_col = len(colour)
        n_tex = count - n_col
    rng = np.random.default_rng(seed)
    picked = [colour[i] for i in rng.permutation(len(colour))[:n_col]]
    picked += [texture[i] for i in rng.permutation(len(texture))[:n_tex]]
    order = rng.permutation(len(picked))
    return [picked[i] for i in order]


def export_dataset(directory, prompts, jitter_seeds, M=16, N=16):
    """Write ``img_{i}.f32`` files plus ``labels.csv`` and ``vocab.json``."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "noun_id", "attribute_id", "attribute_kind", "jitter_seed"])
        for i, (p, js) in enumerate(zip(prompts, jitter_seeds)):
            render_example(p, js, M, N).astype("<f4").tofile(
                os.path.join(directory, f"img_{i}.f32"))
            writer.writerow([i, p.noun_id, p.attribute_id, p.attribute_kind, js])
    write_vocabulary(os.path.join(directory, "vocab.json"))


def load_dataset(directory, M=16, N=16):
    prompts, images, seeds = [], [], []
    with open(os.path.join(directory, "labels.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            i = int(row["index"])
            prompts.append(PromptSpec(int(row["noun_id"]), int(row["attribute_id"])))
            seeds.append(int(row["jitter_seed"]))
            img = np.fromfile(os.path.join(directory, f"img_{i}.f32"), dtype="<f4")
            images.append(img.reshape(3, M, N))
    return prompts, np.stack(images) if images else np.zeros((0, 3, M, N), np.float32), seeds


def write_vocabulary(path):
    with open(path, "w") as fh:
        json.dump({"nouns": list(NOUNS), "colors": list(COLORS),
                   "textures": list(TEXTURES), "attributes": list(ATTRIBUTES)}, fh, indent=2)


# ---------------------------------------------------------------------------
# encoder

@dataclass(frozen=True, eq=False)
class TokenSequence:
    """A length-L conditioning sequence with per-position class tags.

    ``kv_scope`` selects which attention side sees these tokens; when it is
    "key" or "value", ``base`` holds the untouched sequence for the other side.
    """
    tokens: np.ndarray
    tags: tuple
    prompt: PromptSpec | None = None
    kv_scope: str = "both"
    base: TokenSequence | None = field(default=None, repr=False)

    @property
    def L(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]

    def indices(self, cls):
        return [i for i, tag in enumerate(self.tags) if tag == cls]

    def key_value(self):
        """(key_tokens, value_tokens) honouring ``kv_scope``."""
        if self.kv_scope == "both" or self.base is None:
            return self.tokens, self.tokens
        if self.kv_scope == "key":
            return self.tokens, self.base.tokens
        if self.kv_scope == "value":
            return self.base.tokens, self.tokens
        raise ConfigurationError(f"unknown kv_scope {self.kv_scope!r}")

    def equals(self, other):
        return (np.array_equal(self.tokens, other.tokens) and self.tags == other.tags
                and self.kv_scope == other.kv_scope)


class PromptEncoder:
    """Frozen encoder: SOS vector, per-word embedding table and a causal tanh
    recurrence whose terminal state pads every EOS position."""

    def __init__(self, seed=0, L=SEQ_LEN, dim=TOKEN_DIM):
        self.L, self.dim, self.seed = L, dim, seed
        rng = np.random.default_rng(seed)
        self.words = ("a",) + ATTRIBUTES + NOUNS
        self.table = {w: v for w, v in zip(self.words, rng.normal(0.0, 0.5, (len(self.words), dim)))}
        self.sos = rng.normal(0.0, 0.5, dim)
        self.A = rng.normal(0.0, 0.6 / np.sqrt(dim), (dim, dim))
        self.B = rng.normal(0.0, 2.0 / np.sqrt(dim), (dim, dim))
        self._check_injective()

    def _terminal(self, embeddings):
        h = np.zeros(self.dim)
        for e in embeddings:
            h = np.tanh(self.A @ h + self.B @ e)
        return h

    def encode(self, p: PromptSpec | None) -> TokenSequence:
        words = () if p is None else p.validate().words
        if 1 + len(words) > self.L:
            raise CapacityError("prompt does not fit the sequence length")
        sem = [self.table[w] for w in words]
        eos = self._terminal([self.sos] + sem)
        rows = [self.sos] + sem + [eos] * (self.L - 1 - len(sem))
        tags = (SOS,) + (SEM,) * len(sem) + (EOS,) * (self.L - 1 - len(sem))
        return TokenSequence(np.asarray(rows, dtype=np.float32), tags, prompt=p)

    def _check_injective(self):
        eos = np.stack([self._terminal([self.sos] + [self.table[w] for w in p.words])
                        for p in all_prompts()] + [self._terminal([self.sos])])
        d = np.linalg.norm(eos[:, None, :] - eos[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        if not d.min() > 0:
            raise VocabularyError("encoder EOS states are not injective over the vocabulary")
        self.min_eos_distance = float(d.min())


@lru_cache(maxsize=None)
def default_encoder():
    return PromptEncoder()


def encode_prompt(p: PromptSpec | None) -> TokenSequence:
    return default_encoder().encode(p)


def null_condition() -> TokenSequence:
    """The empty-prompt encoding used as the unconditional input everywhere."""
    return encode_prompt(EMPTY)


# ---------------------------------------------------------------------------
# surgery

SURGERY_KINDS = ("switch_eos", "zero_class", "random_class", "sos_only", "eos_only", "repeat_sem")


@dataclass(frozen=True)
class SurgerySpec:
    kind: str
    target_class: str = EOS
    repeat_count: int = 1
    kv_scope: str = "both"
    seed: int = 0


def apply_surgery(seq_a: TokenSequence, seq_b: TokenSequence | None,
                  spec: SurgerySpec) -> TokenSequence:
    """Return a new sequence built from ``seq_a``; inputs are never modified."""
    if spec.kind not in SURGERY_KINDS:
        raise ConfigurationError(f"unknown surgery {spec.kind!r}")
    if (spec.kind == "switch_eos") != (seq_b is not None):
        raise ConfigurationError("seq_b is required for switch_eos and only for it")
    if spec.kv_scope not in ("both", "key", "value"):
        raise ConfigurationError(f"unknown kv_scope {spec.kv_scope!r}")
    tokens = seq_a.tokens.copy()
    tags = list(seq_a.tags)
    eos_idx = seq_a.indices(EOS)
    sem_idx = seq_a.indices(SEM)

    if spec.kind == "switch_eos":
        b_eos = seq_b.indices(EOS)
        if not b_eos:
            raise ConfigurationError("seq_b has no EOS token")
        tokens[eos_idx] = seq_b.tokens[b_eos[0]]
    elif spec.kind in ("zero_class", "random_class"):
        idx = seq_a.indices(spec.target_class)
        if spec.kind == "zero_class":
            tokens[idx] = 0.0
        else:
            rng = np.random.default_rng(spec.seed)
            tokens[idx] = rng.standard_normal((len(idx), seq_a.dim))
    elif spec.kind == "sos_only":
        tokens[:] = seq_a.tokens[0]
        tags = [SOS] * seq_a.L
    elif spec.kind == "eos_only":
        if not eos_idx:
            raise ConfigurationError("sequence has no EOS token")
        tokens[1:] = seq_a.tokens[eos_idx[0]]
        tags = [SOS] + [EOS] * (seq_a.L - 1)
    elif spec.kind == "repeat_sem":
        n_sem = len(sem_idx)
        if spec.repeat_count < 1 or 1 + spec.repeat_count * n_sem > seq_a.L:
            raise CapacityError(
                f"{spec.repeat_count} copies of {n_sem} semantic tokens do not fit L={seq_a.L}")
        block = seq_a.tokens[sem_idx]
        eos_vec = seq_a.tokens[eos_idx[0]] if eos_idx else seq_a.tokens[-1]
        tokens = np.empty_like(seq_a.tokens)
        tokens[0] = seq_a.tokens[0]
        used = 1 + spec.repeat_count * n_sem
        tokens[1:used] = np.tile(block, (spec.repeat_count, 1))
        tokens[used:] = eos_vec
        tags = [SOS] + [SEM] * (used - 1) + [EOS] * (seq_a.L - used)

    base = None if spec.kv_scope == "both" else seq_a
    return replace(seq_a, tokens=tokens.astype(np.float32), tags=tuple(tags),
                   kv_scope=spec.kv_scope, base=base)


def switch_eos(seq_a, seq_b, kv_scope="both"):
    return apply_surgery(seq_a, seq_b, SurgerySpec("switch_eos", kv_scope=kv_scope))
