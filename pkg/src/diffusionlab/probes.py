"""Measurement procedures applied to images, attention maps and trajectories."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError, DegenerateError, ParameterError, ShapeError
from .prompts import ATTRIBUTES, EOS, NOUNS, SEM, SOS, PromptSpec, all_prompts, render_example

CANNY_SIGMA, CANNY_LOW, CANNY_HIGH, F1_TOL = 1.0, 0.1, 0.2, 1


# ---------------------------------------------------------------------------
# edges

def _to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=0) if img.ndim == 3 else img


def canny_edges(img, sigma=CANNY_SIGMA, t_low=CANNY_LOW, t_high=CANNY_HIGH):
    """Binary uint8 edge map: channel mean, Gaussian blur, Sobel gradients,
    non-maximum suppression along the quantised direction, then hysteresis
    with 8-connectivity. Thresholds are fractions of the maximum magnitude."""
    if not 0 < t_low < t_high <= 1:
        raise ParameterError("need 0 < t_low < t_high <= 1")
    gray = _to_gray(img)
    smooth = ndimage.gaussian_filter(gray, sigma, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12 * max(1.0, np.abs(gray).max()):
        return np.zeros(gray.shape, dtype=np.uint8)

    # quantise direction to 0/45/90/135 degrees and compare with both neighbours
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (((angle + 22.5) // 45.0) % 4).astype(int)
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    padded = np.pad(mag, 1)
    M, N = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dr, dc) in offsets.items():
        fwd = padded[1 + dr:1 + dr + M, 1 + dc:1 + dc + N]
        bwd = padded[1 - dr:1 - dr + M, 1 - dc:1 - dc + N]
        # strict on one side so a two-pixel plateau keeps a single pixel
        keep |= (sector == s) & (mag > fwd) & (mag >= bwd)
    thin = np.where(keep, mag, 0.0)

    strong = thin >= t_high * peak
    weak = thin >= t_low * peak
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros(gray.shape, dtype=np.uint8)
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    return has_strong[labels].astype(np.uint8)


def edge_f1(a, b, tol_px=F1_TOL):
    """F1 between a reference edge map ``a`` and a candidate ``b``.

    Each edge pixel of ``a`` (raster order) greedily claims the nearest
    unclaimed ``b`` pixel within Chebyshev radius ``tol_px``. Precision is
    matches/|b|, recall matches/|a|. Two empty maps score 1.
    """
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"edge maps differ in shape: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    free = b.copy()
    M, N = a.shape
    ring = sorted(((dr, dc) for dr in range(-tol_px, tol_px + 1)
                   for dc in range(-tol_px, tol_px + 1)),
                  key=lambda o: (max(abs(o[0]), abs(o[1])), abs(o[0]) + abs(o[1]), o))
    matched = 0
    for r, c in zip(*np.nonzero(a)):
        for dr, dc in ring:
            rr, cc = r + dr, c + dc
            if 0 <= rr < M and 0 <= cc < N and free[rr, cc]:
                free[rr, cc] = False
                matched += 1
                break
    if matched == 0:
        return 0.0
    precision, recall = matched / nb, matched / na
    return 2 * precision * recall / (precision + recall)


def upsample_bilinear(img, shape):
    img = np.asarray(img, dtype=np.float64)
    if img.shape == tuple(shape):
        return img
    factors = (shape[0] / img.shape[0], shape[1] / img.shape[1])
    return ndimage.zoom(img, factors, order=1, mode="nearest", grid_mode=True)


def _normalise(m):
    lo, hi = m.min(), m.max()
    return np.zeros_like(m) if hi - lo <= 0 else (m - lo) / (hi - lo)


def attention_token_maps(attn, grid_shape, image_shape=None):
    """(P, L) attention -> (L, M, N) per-token maps, upsampled and scaled to [0, 1]."""
    attn = np.asarray(attn)
    M, N = grid_shape
    maps = attn.T.reshape(-1, M, N)
    out = [_normalise(upsample_bilinear(m, image_shape or (M, N))) for m in maps]
    return np.stack(out)


def relative_f1_curve(traj, sigma=CANNY_SIGMA, t_low=CANNY_LOW, t_high=CANNY_HIGH,
                      tol_px=F1_TOL, tokens=None, item=None):
    """[(t, F1_t / F1_1)] over sampled steps in generation order.

    F1_t compares canny edges of each non-SOS token's attention map at step t
    with the edges of the final image, averaged over those tokens.
    """
    x0 = np.asarray(traj.x0 if item is None else traj.x0[item])
    grid = x0.shape[-2:]
    tags = traj.tags
    if tokens is None:
        tokens = [i for i, tag in enumerate(tags) if tag != SOS]
    final_edges = canny_edges(x0, sigma, t_low, t_high)
    f1s = []
    for rec in traj.steps:
        attn = rec.attention
        if attn is None:
            raise DataError("trajectory has no attention maps")
        attn = attn if item is None else attn[item]
        maps = attention_token_maps(attn, grid)
        scores = [edge_f1(final_edges, canny_edges(maps[k], sigma, t_low, t_high), tol_px)
                  for k in tokens]
        f1s.append((rec.t_eval, float(np.mean(scores))))
    last = f1s[-1][1]
    if last == 0:
        raise DegenerateError("F1 at the final step is zero; relative curve undefined")
    return [(t, f / last) for t, f in f1s]


# ---------------------------------------------------------------------------
# attention statistics

def token_class_weights(attn, tags):
    """Mean attention weight per token within each class (SOS, SEM, EOS)."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.shape[-1] != len(tags):
        raise ShapeError(f"attention has {attn.shape[-1]} tokens, tags {len(tags)}")
    per_token = attn.reshape(-1, attn.shape[-1]).mean(axis=0)
    out = {}
    for cls in (SOS, SEM, EOS):
        idx = [i for i, tag in enumerate(tags) if tag == cls]
        out[cls] = float(per_token[idx].mean()) if idx else 0.0
    return out


def attention_class_weights(traj, tags=None):
    """Per sampled step: {t, SOS, SEM, EOS} class-averaged attention weights."""
    tags = tuple(tags or traj.tags)
    rows = []
    for rec in traj.steps:
        w = token_class_weights(rec.attention, tags)
        rows.append(dict(t=rec.t_eval, **w))
    return rows


def attention_kl(p_map, q_map, smoothing=1e-8):
    """Mean over pixels of KL(P_row || Q_row) after additive smoothing."""
    p = np.asarray(p_map, dtype=np.float64)
    q = np.asarray(q_map, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"attention maps differ in shape: {p.shape} vs {q.shape}")
    p = (p + smoothing) / (p + smoothing).sum(axis=-1, keepdims=True)
    q = (q + smoothing) / (q + smoothing).sum(axis=-1, keepdims=True)
    kl = np.sum(p * (np.log(p) - np.log(q)), axis=-1)
    return float(max(kl.mean(), 0.0))


# ---------------------------------------------------------------------------
# image comparisons

def l1_distance(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def cosine_alignment(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        raise DegenerateError("cosine of two zero vectors is undefined")
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class AlignmentReport:
    shape_accuracy: float
    attribute_accuracy: float

    @property
    def combined(self):
        return 0.5 * (self.shape_accuracy + self.attribute_accuracy)


class TemplateBank:
    """Zero-jitter renders of every (noun, attribute) pair."""

    def __init__(self, M=16, N=16, prompts=None):
        self.prompts = list(prompts if prompts is not None else all_prompts())
        if not self.prompts:
            raise ConfigurationError("template bank is empty")
        self.templates = np.stack([render_example(p, 0, M, N, jitter=0.0)
                                   for p in self.prompts]).astype(np.float64)
        self.nouns = np.array([p.noun_id for p in self.prompts])
        self.attrs = np.array([p.attribute_id for p in self.prompts])

    def classify(self, images):
        """(noun_id, attribute_id) of the globally nearest template (mean L1)."""
        imgs = np.asarray(images, dtype=np.float64)
        single = imgs.ndim == 3
        imgs = imgs[None] if single else imgs
        flat = imgs.reshape(len(imgs), -1)
        tmpl = self.templates.reshape(len(self.templates), -1)
        d = np.abs(flat[:, None, :] - tmpl[None, :, :]).mean(axis=-1)
        best = d.argmin(axis=1)
        out = np.stack([self.nouns[best], self.attrs[best]], axis=1)
        return out[0] if single else out


def prompt_alignment(images, prompts, bank) -> AlignmentReport:
    """Template-classifier agreement with ``prompts`` (batch means)."""
    if bank is None or len(bank.prompts) == 0:
        raise ConfigurationError("template bank is empty")
    if isinstance(prompts, PromptSpec):
        prompts = [prompts]
        images = np.asarray(images)[None]
    pred = bank.classify(images)
    nouns = np.array([p.noun_id for p in prompts])
    attrs = np.array([p.attribute_id for p in prompts])
    return AlignmentReport(float(np.mean(pred[:, 0] == nouns)),
                           float(np.mean(pred[:, 1] == attrs)))


def relative_score(values):
    """(v - min) / (max - min): best maps to 1, worst to 0."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if not hi > lo:
        raise DegenerateError("relative score needs max > min")
    return ((v - lo) / (hi - lo)).tolist()


def guidance_gap_norms(traj):
    """Per step: (t, RMS of the unconditional prediction, RMS of w*(cond - uncond))."""
    rows = []
    for rec in traj.steps:
        if rec.eps_uncond is None:
            raise DataError("trajectory lacks unconditional predictions")
        u = np.asarray(rec.eps_uncond, dtype=np.float64)
        if rec.eps_cond is None:
            if traj.w != 0:
                raise DataError(f"step at t={rec.t_eval} has no conditional prediction")
            gap = np.zeros_like(u)
        else:
            gap = traj.w * (np.asarray(rec.eps_cond, dtype=np.float64) - u)
        axes = tuple(range(u.ndim - 3, u.ndim))
        dim = math.prod(u.shape[-3:])
        rows.append((rec.t_eval, np.sqrt((u ** 2).sum(axis=axes) / dim),
                     np.sqrt((gap ** 2).sum(axis=axes) / dim)))
    return rows


# ---------------------------------------------------------------------------
# exports

def write_pgm(edge_map, path):
    """Binary edge map as an ASCII portable graymap (P2, maxval 1)."""
    e = np.asarray(edge_map, dtype=np.uint8)
    with open(path, "w") as fh:
        fh.write(f"P2\n{e.shape[1]} {e.shape[0]}\n1\n")
        for row in e:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v
