"""Small conditional noise predictor with one cross-attention block.

Per pixel: a linear k x k patch encoder plus learned position and sinusoidal
time embeddings gives the image feature phi; a single-head cross-attention
reads the token sequence (Q from phi, K and V from tokens); the residual sum
goes through a two-layer SiLU head to the three output channels.

With ``qk_norm=tau > 0`` (the default) queries and keys are scaled to unit
length and the logits are ``tau * cos(q, k)``. Plain scaled dot products
(``qk_norm=0``) let the softmax saturate on the prompt-independent tokens
early in training, after which the prompt tokens get no gradient. The
attended values also pass through a learned per-pixel gain, zero at init.

Gradients are derived by hand and checked against central differences.
"""
from __future__ import annotations

import csv
import io
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DataError, FormatError, ParameterError, ShapeError
from .prompts import TokenSequence, null_condition

PARAM_ORDER = ("W_patch", "b_patch", "pos", "gain", "W_time", "b_time",
               "W_Q", "W_K", "W_V", "W_1", "b_1", "W_2", "b_2")

MAGIC = b"DNLB"
FORMAT_VERSION = 1


@dataclass
class DenoiserModel:
    params: dict
    hyper: dict
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.hyper["d"]

    @property
    def n_params(self):
        return sum(v.size for v in self.params.values())

    def astype(self, dtype):
        return DenoiserModel({k: v.astype(dtype) for k, v in self.params.items()},
                             dict(self.hyper), self.step, dict(self.rng_state))

    def copy(self):
        return self.astype(self.params["W_Q"].dtype)

    def predict_noise(self, t, x, tokens, value_tokens=None):
        return predict_noise(self, t, x, tokens, value_tokens)


def default_hyper(**overrides):
    hyper = dict(channels=3, M=16, N=16, d=32, hidden=128, L=8, token_dim=16,
                 time_dim=32, T_train=1000, patch=3, qk_norm=1.0, gain_init=0.0, seed=0)
    hyper.update(overrides)
    return hyper


def init_model(hyper=None, **overrides) -> DenoiserModel:
    """Seeded scaled-uniform initialisation (fan-in scaling per layer)."""
    hyper = default_hyper(**(hyper or {}), **overrides)
    for key in ("channels", "M", "N", "d", "hidden", "L", "token_dim", "time_dim", "patch"):
        if int(hyper[key]) <= 0:
            raise ParameterError(f"{key} must be positive")
    if hyper["patch"] % 2 == 0:
        raise ParameterError("patch size must be odd")
    C, d, H = hyper["channels"], hyper["d"], hyper["hidden"]
    P, td, kd = hyper["M"] * hyper["N"], hyper["time_dim"], hyper["token_dim"]
    fan = hyper["patch"] ** 2 * C
    rng = np.random.default_rng(hyper["seed"])

    def uniform(fan_in, shape, gain=1.0):
        bound = gain * np.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {
        "W_patch": uniform(fan, (fan, d)),
        "b_patch": np.zeros(d),
        "pos": uniform(1, (P, d), gain=0.1),
        "gain": uniform(1, (P, d), gain=hyper["gain_init"]),
        "W_time": uniform(td, (td, d)),
        "b_time": np.zeros(d),
        "W_Q": uniform(d, (d, d)),
        "W_K": uniform(kd, (d, kd)),
        "W_V": uniform(kd, (d, kd)),
        "W_1": uniform(d, (d, H)),
        "b_1": np.zeros(H),
        "W_2": uniform(H, (H, C)),
        "b_2": np.zeros(C),
    }
    return DenoiserModel({k: v.astype(np.float32) for k, v in params.items()}, hyper)


# ---------------------------------------------------------------------------
# forward / backward

def time_embedding(t, dim, T_train=1000, dtype=np.float32):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :] * (1000.0 / T_train)
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def _patches(x, k=3):
    """(B, C, M, N) -> (B, M*N, k*k*C) zero-padded k x k neighbourhoods."""
    B, C, M, N = x.shape
    r = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    cols = [padded[:, :, i:i + M, j:j + N] for i in range(k) for j in range(k)]
    stacked = np.stack(cols, axis=2)  # B, C, k*k, M, N
    return stacked.reshape(B, C * k * k, M * N).transpose(0, 2, 1)


def _token_arrays(tokens, value_tokens, batch, dtype):
    """Resolve a token argument into (B|1, L, dim) key and value arrays."""
    def one(seq):
        if isinstance(seq, TokenSequence):
            return seq.key_value()
        arr = np.asarray(seq)
        return arr, arr

    if isinstance(tokens, TokenSequence):
        k, v = one(tokens)
        k, v = k[None], v[None]
    elif isinstance(tokens, np.ndarray):
        k = v = tokens if tokens.ndim == 3 else tokens[None]
    else:
        pairs = [one(s) for s in tokens]
        k = np.stack([p[0] for p in pairs])
        v = np.stack([p[1] for p in pairs])
    if value_tokens is not None:
        if isinstance(value_tokens, TokenSequence):
            v = value_tokens.tokens[None]
        elif isinstance(value_tokens, np.ndarray):
            v = value_tokens if value_tokens.ndim == 3 else value_tokens[None]
        else:
            v = np.stack([s.tokens for s in value_tokens])
    if k.shape[0] not in (1, batch) or v.shape[0] not in (1, batch):
        raise ShapeError(f"token batch {k.shape[0]} does not match image batch {batch}")
    return k.astype(dtype, copy=False), v.astype(dtype, copy=False)


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def _silu(u):
    s = expit(u)
    return u * s, s


def forward(model, t, x, key_tokens, value_tokens):
    """Batched forward pass. Returns (eps_hat (B,C,M,N), attention (B,P,L), cache)."""
    p = model.params
    hy = model.hyper
    dtype = p["W_Q"].dtype
    B, C, M, N = x.shape
    if key_tokens.shape[-2] != hy["L"] or value_tokens.shape[-2] != hy["L"]:
        raise ShapeError(f"token length {key_tokens.shape[-2]} != trained length {hy['L']}")
    if (C, M, N) != (hy["channels"], hy["M"], hy["N"]):
        raise ShapeError(f"image shape {(C, M, N)} != model shape "
                         f"{(hy['channels'], hy['M'], hy['N'])}")
    x = x.astype(dtype, copy=False)
    t = np.broadcast_to(np.asarray(t), (B,))
    X = _patches(x, hy.get("patch", 3))
    temb_in = time_embedding(t, hy["time_dim"], hy["T_train"], dtype)
    temb = temb_in @ p["W_time"] + p["b_time"]
    ctx = p["b_patch"] + p["pos"][None] + temb[:, None, :]     # (B, P, d) position + time
    phi = X @ p["W_patch"] + ctx

    Q = phi @ p["W_Q"].T
    K = key_tokens @ p["W_K"].T
    V = value_tokens @ p["W_V"].T
    tau = hy.get("qk_norm", 0)
    if tau:
        # unit-length queries and keys: logits stay within [-tau, tau]
        nq = np.sqrt((Q * Q).sum(-1, keepdims=True) + 1e-12)
        nk = np.sqrt((K * K).sum(-1, keepdims=True) + 1e-12)
        Qa, Ka, scale = Q / nq, K / nk, dtype.type(tau)
    else:
        nq = nk = None
        Qa, Ka, scale = Q, K, dtype.type(1.0 / np.sqrt(hy["d"]))
    S = (Qa @ np.swapaxes(Ka, -1, -2)) * scale
    S = S - S.max(axis=-1, keepdims=True)
    E = np.exp(S)
    A = E / E.sum(axis=-1, keepdims=True)
    O = A @ V
    z = phi + O + p["gain"][None] * O     # per-pixel gain on the attended values
    u = z @ p["W_1"] + p["b_1"]
    g, sig = _silu(u)
    y = g @ p["W_2"] + p["b_2"]
    eps = y.transpose(0, 2, 1).reshape(B, C, M, N)
    cache = dict(X=X, temb_in=temb_in, phi=phi, Q=Qa, K=Ka, nq=nq, nk=nk, V=V, A=A, O=O,
                 z=z, u=u, g=g, sig=sig, key_tokens=key_tokens, value_tokens=value_tokens,
                 scale=scale)
    return eps, A, cache


def backward(model, cache, d_eps):
    """Parameter gradients given dLoss/d eps_hat of shape (B, C, M, N)."""
    p = model.params
    B, C = d_eps.shape[:2]
    dy = d_eps.reshape(B, C, -1).transpose(0, 2, 1)
    A, V, K, Q = cache["A"], cache["V"], cache["K"], cache["Q"]
    g, u, sig, z = cache["g"], cache["u"], cache["sig"], cache["z"]
    scale = cache["scale"]
    kt, vt = cache["key_tokens"], cache["value_tokens"]

    grads = {}
    grads["W_2"] = _flat(g).T @ _flat(dy)
    grads["b_2"] = dy.sum(axis=(0, 1))
    dg = dy @ p["W_2"].T
    du = dg * (sig * (1.0 + u * (1.0 - sig)))
    grads["W_1"] = _flat(z).T @ _flat(du)
    grads["b_1"] = du.sum(axis=(0, 1))
    dz = du @ p["W_1"].T

    dphi = dz.copy()
    dO = dz * (1.0 + p["gain"][None])
    grads["gain"] = (dz * cache["O"]).sum(axis=0)
    dA = dO @ np.swapaxes(V, -1, -2)
    dV = np.swapaxes(A, -1, -2) @ dO                          # (B,L,d)
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
    dQ = dS @ K                                               # (B|.,P,d)
    dK = np.swapaxes(dS, -1, -2) @ Q                          # (B,L,d)
    if cache["nq"] is not None:
        # back through the row normalisation; Q and K here are unit vectors
        dQ = (dQ - Q * (dQ * Q).sum(-1, keepdims=True)) / cache["nq"]
        dK = (dK - K * (dK * K).sum(-1, keepdims=True)) / cache["nk"]
    grads["W_Q"] = _flat(dQ).T @ _flat(cache["phi"])
    dphi += dQ @ p["W_Q"]
    kt_b = np.broadcast_to(kt, (dK.shape[0],) + kt.shape[1:])
    vt_b = np.broadcast_to(vt, (dV.shape[0],) + vt.shape[1:])
    grads["W_K"] = _flat(dK).T @ _flat(kt_b)
    grads["W_V"] = _flat(dV).T @ _flat(vt_b)

    grads["W_patch"] = _flat(cache["X"]).T @ _flat(dphi)
    grads["b_patch"] = dphi.sum(axis=(0, 1))
    grads["pos"] = dphi.sum(axis=0)
    dtemb = dphi.sum(axis=1)
    grads["W_time"] = cache["temb_in"].T @ dtemb
    grads["b_time"] = dtemb.sum(axis=0)
    return grads


def predict_noise(model, t, x, tokens, value_tokens=None):
    """Noise prediction and pixel-by-token attention weights.

    ``x`` may be a single (C, M, N) grid or a (B, C, M, N) batch; ``tokens`` a
    TokenSequence, a list of them (one per batch item) or a raw array.
    ``value_tokens`` overrides the value side (key/value substitution probes).
    """
    x = np.asarray(x)
    single = x.ndim == 3
    xb = x[None] if single else x
    dtype = model.params["W_Q"].dtype
    k, v = _token_arrays(tokens, value_tokens, xb.shape[0], dtype)
    eps, attn, _ = forward(model, t, xb, k, v)
    eps = eps.astype(x.dtype, copy=False) if x.dtype.kind == "f" else eps
    if single:
        return eps[0], attn[0]
    if attn.shape[0] != xb.shape[0]:
        attn = np.broadcast_to(attn, (xb.shape[0],) + attn.shape[1:])
    return eps, attn


def loss_and_grads(model, x0, key_tokens, value_tokens, t, noise, alpha_bar):
    """Mean squared noise-prediction error on one batch and its gradients."""
    ab = np.asarray(alpha_bar)[np.asarray(t)].astype(x0.dtype)[:, None, None, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * noise
    eps, _, cache = forward(model, t, x_t, key_tokens, value_tokens)
    diff = eps - noise
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grads = backward(model, cache, (2.0 / diff.size) * diff)
    return loss, grads


# ---------------------------------------------------------------------------
# training

@dataclass
class LossCurve:
    epochs: list = field(default_factory=list)
    mean_loss: list = field(default_factory=list)
    seconds: float = 0.0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_loss"])
            for e, l in zip(self.epochs, self.mean_loss):
                w.writerow([e, repr(float(l))])


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in PARAM_ORDER:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            step = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = (params[k] - step).astype(params[k].dtype)


def train(model, images, tokens, sched, epochs=60, lr=1e-3, cond_dropout_p=0.1, seed=0,
          batch_size=64, null=None, log=None):
    """Fit the noise predictor with classifier-free condition dropout.

    ``images`` is (n, C, M, N); ``tokens`` holds one TokenSequence (or an
    (L, dim) array) per image. Each sample's tokens are replaced by the null
    condition with probability ``cond_dropout_p``. Returns a new model and the
    per-epoch loss curve; the input model is left untouched.
    """
    if not 0.0 <= cond_dropout_p <= 1.0:
        raise ParameterError("cond_dropout_p must lie in [0, 1]")
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise DataError("empty dataset")
    tok = np.stack([s.tokens if isinstance(s, TokenSequence) else np.asarray(s)
                    for s in tokens]).astype(np.float32)
    null_tok = (null or null_condition()).tokens.astype(np.float32)
    model = model.copy()
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr=lr)
    alpha_bar = np.asarray(sched.alpha_bar, dtype=np.float64)
    T = sched.T_train
    curve = LossCurve()
    start = time.perf_counter()
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            b = len(idx)
            t = rng.integers(1, T + 1, size=b)
            noise = rng.standard_normal(images[idx].shape).astype(np.float32)
            drop = rng.random(b) < cond_dropout_p
            ktok = tok[idx].copy()
            ktok[drop] = null_tok
            loss, grads = loss_and_grads(model, images[idx], ktok, ktok, t, noise, alpha_bar)
            opt.update(model.params, grads)
            model.step += 1
            losses.append(loss * b)
        curve.epochs.append(epoch)
        curve.mean_loss.append(float(np.sum(losses) / n))
        if log is not None:
            log(epoch, curve.mean_loss[-1])
    curve.seconds = time.perf_counter() - start
    model.rng_state = rng.bit_generator.state
    return model, curve


# ---------------------------------------------------------------------------
# gradient check

@dataclass
class GradSample:
    x0: np.ndarray
    tokens: np.ndarray
    t: int
    noise: np.ndarray


def make_grad_sample(model, x0, tokens, seed=0, t=None):
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)
    x0 = x0[None] if x0.ndim == 3 else x0
    tok = tokens.tokens if isinstance(tokens, TokenSequence) else np.asarray(tokens)
    tok = np.broadcast_to(tok, (x0.shape[0],) + tok.shape[-2:]).astype(np.float64)
    T = model.hyper["T_train"]
    t = rng.integers(1, T + 1, size=x0.shape[0]) if t is None else np.broadcast_to(t, x0.shape[0])
    return GradSample(x0, tok, np.asarray(t), rng.standard_normal(x0.shape))


def grad_check(model, sample, alpha_bar, probe_count=64, seed=0, h=1e-4):
    """Max relative error between analytic and central-difference gradients
    over ``probe_count`` randomly chosen parameters (all arithmetic float64).

    Returns ``(max_rel_err, records)`` where records hold
    (name, flat_index, analytic, numeric) per probe.
    """
    if probe_count < 1:
        raise ParameterError("probe_count must be >= 1")
    m64 = model.astype(np.float64)
    ab = np.asarray(alpha_bar, dtype=np.float64)

    def loss_of(m):
        return loss_and_grads(m, sample.x0, sample.tokens, sample.tokens, sample.t,
                              sample.noise, ab)

    _, grads = loss_of(m64)
    rng = np.random.default_rng(seed)
    sizes = np.array([m64.params[k].size for k in PARAM_ORDER])
    flat = rng.choice(int(sizes.sum()), size=probe_count, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    records = []
    worst = 0.0
    for f in sorted(flat):
        which = int(np.searchsorted(offsets, f, side="right") - 1)
        name, i = PARAM_ORDER[which], int(f - offsets[which])
        arr = m64.params[name].reshape(-1)
        keep = arr[i]
        arr[i] = keep + h
        lp, _ = loss_of(m64)
        arr[i] = keep - h
        lm, _ = loss_of(m64)
        arr[i] = keep
        numeric = (lp - lm) / (2 * h)
        analytic = float(grads[name].reshape(-1)[i])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
        records.append((name, i, analytic, numeric))
    return worst, records


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   magic "DNLB" | u32 version | u64 step | u32 n | n bytes hyper JSON
#   | u32 n | n bytes RNG-state JSON | u32 tensor count
#   | per tensor: u16 name len, name, u8 ndim, ndim * u32 dims, float32 data

def save_checkpoint(model, path):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, model.step))
    for blob in (json.dumps(model.hyper, sort_keys=True).encode(),
                 json.dumps(model.rng_state, sort_keys=True).encode()):
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    buf.write(struct.pack("<I", len(PARAM_ORDER)))
    for name in PARAM_ORDER:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> DenoiserModel:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a DNLB checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} "
                          f"(this build reads version {FORMAT_VERSION})", 4)
    (step,) = r.unpack("<Q", "step counter")
    blobs = []
    for what in ("hyperparameters", "rng state"):
        (n,) = r.unpack("<I", what)
        at = r.pos
        try:
            blobs.append(json.loads(r.take(n, what).decode()))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt {what} block: {exc}", at) from None
    (count,) = r.unpack("<I", "tensor count")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8", "replace")
        (ndim,) = r.unpack("<B", "tensor rank")
        shape = r.unpack(f"<{ndim}I", "tensor shape")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(nbytes, f"tensor {name}"), dtype="<f4").reshape(
            shape).astype(np.float32)
    missing = set(PARAM_ORDER) - set(params)
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)}", r.pos)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return DenoiserModel(params, blobs[0], step, blobs[1])
