"""The frozen text-conditioned single-person prior.

A segment VAE (decoder maps history + latent to F future frames) paired with
a latent denoiser sampled by a short DDPM chain under classifier-free
guidance, plus the segment-autoregressive rollout loop that slides the
history window after each generated segment.

Parameters are plain frozen dataclasses of arrays; nothing here mutates them,
which is what keeps the prior structurally frozen.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import ConfigError, DimensionError, ProviderError
from .motion import FeatureLayout, HistoryWindow, MotionSegment, update_history
from .tensorcore import (
    F32,
    F64,
    AttentionParams,
    FfnParams,
    Rng,
    ffn_forward,
    layer_norm,
    linear,
    mha_forward,
    seeded_init,
    sinusoidal_embedding,
)

DEFAULT_LATENT_DIM = 64
DEFAULT_TEXT_DIM = 32
DEFAULT_WIDTH = 128
DEFAULT_HEADS = 4
DEFAULT_BLOCKS = 4
DEFAULT_FFN_HIDDEN = 256
DEFAULT_VAE_HIDDEN = 256

StepDeltaProvider = Callable[[np.ndarray, int], Optional["object"]]


@dataclass(frozen=True)
class TextEmbedding:
    """Deterministic text feature; the null embedding drives the unconditional branch."""

    values: np.ndarray
    null_flag: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=F32)
        if v.ndim != 1:
            raise DimensionError("text embedding must be a vector")
        object.__setattr__(self, "values", v)


def null_embedding(dim: int = DEFAULT_TEXT_DIM) -> TextEmbedding:
    return TextEmbedding(np.zeros(dim, dtype=F32), null_flag=True)


def embed_text(text: str, dim: int = DEFAULT_TEXT_DIM) -> TextEmbedding:
    """Hash-bag embedding: case/whitespace normalized tokens, signed buckets, unit norm.

    This is the deterministic reference embedder; a learned encoder can be
    swapped in anywhere a TextEmbedding is accepted.
    """
    tokens = text.lower().split()
    if not tokens:
        return null_embedding(dim)
    v = np.zeros(dim, dtype=F64)
    for tok in tokens:
        digest = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
        h = int.from_bytes(digest, "little")
        sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
        v[h % dim] += sign
    norm = np.linalg.norm(v)
    if norm > 0:
        v = v / norm
    return TextEmbedding(v.astype(F32), null_flag=False)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise variances and the derived cumulative signal coefficients."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=F64)
        if b.ndim != 1 or b.shape[0] < 1:
            raise DimensionError("schedule needs at least one step")
        if np.any(b <= 0) or np.any(b >= 1) or np.any(np.diff(b) <= 0):
            raise ConfigError("noise variances must lie in (0, 1) and strictly increase")
        object.__setattr__(self, "betas", b)

    @property
    def steps(self) -> int:
        return self.betas.shape[0]

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @classmethod
    def linear(cls, steps: int = 10, beta_start: float = 1e-4,
               beta_end: float = 0.2) -> "DiffusionSchedule":
        return cls(np.linspace(beta_start, beta_end, steps))


@dataclass(frozen=True)
class GenerationConfig:
    """Rollout knobs: window sizes, step count, guidance, seed, frame rate."""

    history_len: int = 2
    future_len: int = 8
    steps: int = 10
    guidance_scale: float = 2.0
    seed: int = 0
    fps: float = 10.0

    def __post_init__(self):
        if self.history_len < 1 or self.future_len < 1 or self.steps < 1:
            raise ConfigError("history_len, future_len and steps must all be >= 1")


@dataclass(frozen=True)
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray


def _mlp_forward(x: np.ndarray, p: MlpParams) -> np.ndarray:
    from .tensorcore import gelu

    h = gelu(linear(x, p.w1, p.b1))
    h = gelu(linear(h, p.w2, p.b2))
    return linear(h, p.w3, p.b3)


@dataclass(frozen=True)
class DenoiserBlockParams:
    attn: AttentionParams
    ffn: FfnParams


@dataclass(frozen=True)
class DenoiserParams:
    time_w: np.ndarray
    time_b: np.ndarray
    text_w: np.ndarray
    text_b: np.ndarray
    null_token: np.ndarray
    hist_w: np.ndarray
    hist_b: np.ndarray
    latent_w: np.ndarray
    latent_b: np.ndarray
    blocks: tuple
    final_gain: np.ndarray
    final_offset: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray


@dataclass(frozen=True)
class PriorParams:
    """Frozen weights of the whole prior, with the dimensions they imply."""

    feature_dim: int
    history_len: int
    future_len: int
    latent_dim: int
    text_dim: int
    width: int
    vae_dec: MlpParams
    vae_enc: MlpParams
    denoiser: DenoiserParams

    @property
    def n_blocks(self) -> int:
        return len(self.denoiser.blocks)


def _sinusoidal(value: float, dim: int) -> np.ndarray:
    return sinusoidal_embedding([value], dim)[0]


def _token_positions(n_tokens: int, width: int) -> np.ndarray:
    return sinusoidal_embedding(np.arange(n_tokens), width)


def seeded_prior_params(rng: Rng, feature_dim: Optional[int] = None,
                        history_len: int = 2, future_len: int = 8,
                        latent_dim: int = DEFAULT_LATENT_DIM,
                        text_dim: int = DEFAULT_TEXT_DIM,
                        width: int = DEFAULT_WIDTH, heads: int = DEFAULT_HEADS,
                        n_blocks: int = DEFAULT_BLOCKS,
                        ffn_hidden: int = DEFAULT_FFN_HIDDEN,
                        vae_hidden: int = DEFAULT_VAE_HIDDEN) -> PriorParams:
    """Prior weights from a seed; every tensor gets its own derived stream."""
    d = feature_dim if feature_dim is not None else FeatureLayout().dim

    def u(name, shape):
        return seeded_init(shape, "uniform-fan", rng.child(name))

    def z(shape):
        return np.zeros(shape, dtype=F32)

    dec_in = history_len * d + latent_dim
    enc_in = history_len * d + future_len * d
    vae_dec = MlpParams(u("dec.w1", (dec_in, vae_hidden)), z(vae_hidden),
                        u("dec.w2", (vae_hidden, vae_hidden)), z(vae_hidden),
                        u("dec.w3", (vae_hidden, future_len * d)), z(future_len * d))
    vae_enc = MlpParams(u("enc.w1", (enc_in, vae_hidden)), z(vae_hidden),
                        u("enc.w2", (vae_hidden, vae_hidden)), z(vae_hidden),
                        u("enc.w3", (vae_hidden, 2 * latent_dim)), z(2 * latent_dim))

    blocks = []
    for i in range(n_blocks):
        attn = AttentionParams(
            heads=heads, width=width,
            w_q=u(f"blk{i}.wq", (width, width)), w_k=u(f"blk{i}.wk", (width, width)),
            w_v=u(f"blk{i}.wv", (width, width)), w_o=u(f"blk{i}.wo", (width, width)),
            ln_gain=np.ones(width, dtype=F32), ln_offset=z(width))
        ffn = FfnParams(u(f"blk{i}.ffn.w1", (width, ffn_hidden)), z(ffn_hidden),
                        u(f"blk{i}.ffn.w2", (ffn_hidden, width)), z(width),
                        ln_gain=np.ones(width, dtype=F32), ln_offset=z(width))
        blocks.append(DenoiserBlockParams(attn, ffn))

    denoiser = DenoiserParams(
        time_w=u("time.w", (width, width)), time_b=z(width),
        text_w=u("text.w", (text_dim, width)), text_b=z(width),
        null_token=u("null", (1, width))[0],
        hist_w=u("hist.w", (d, width)), hist_b=z(width),
        latent_w=u("latent.w", (latent_dim, width)), latent_b=z(width),
        blocks=tuple(blocks),
        final_gain=np.ones(width, dtype=F32), final_offset=z(width),
        out_w=u("out.w", (width, latent_dim)), out_b=z(latent_dim))

    return PriorParams(feature_dim=d, history_len=history_len, future_len=future_len,
                       latent_dim=latent_dim, text_dim=text_dim, width=width,
                       vae_dec=vae_dec, vae_enc=vae_enc, denoiser=denoiser)


def decode_segment(m_h: HistoryWindow, z: np.ndarray, params: PriorParams,
                   fps: float = 10.0) -> MotionSegment:
    """VAE decoder: history window plus clean latent to an F x D future segment."""
    z = np.asarray(z, dtype=F32).reshape(-1)
    if len(m_h) != params.history_len or m_h.dim != params.feature_dim:
        raise DimensionError("history window does not match prior dimensions")
    if z.shape[0] != params.latent_dim:
        raise DimensionError(f"latent has dim {z.shape[0]}, expected {params.latent_dim}")
    x = np.concatenate([m_h.frames.reshape(-1), z])[None, :]
    out = _mlp_forward(x, params.vae_dec)[0]
    return MotionSegment(out.reshape(params.future_len, params.feature_dim), fps=fps)


def decode_batch(m_h: HistoryWindow, zs: np.ndarray, params: PriorParams) -> np.ndarray:
    """Decode many latents against one history in a single pass; (N, F, D).

    Numerically identical to row-wise decode_segment; used for cheap
    finite-difference probing of the decoder.
    """
    zs = np.asarray(zs, dtype=F32)
    if zs.ndim != 2 or zs.shape[1] != params.latent_dim:
        raise DimensionError("latent batch must be (N, latent_dim)")
    hist = np.tile(m_h.frames.reshape(1, -1), (zs.shape[0], 1))
    out = _mlp_forward(np.concatenate([hist, zs], axis=1), params.vae_dec)
    return out.reshape(zs.shape[0], params.future_len, params.feature_dim)


def encode_segment(m_h: HistoryWindow, m_f: MotionSegment,
                   params: PriorParams) -> tuple[np.ndarray, np.ndarray]:
    """VAE encoder: returns (mean, log_variance), each of latent dim."""
    if len(m_f) != params.future_len or m_f.dim != params.feature_dim:
        raise DimensionError("future segment does not match prior dimensions")
    if len(m_h) != params.history_len or m_h.dim != params.feature_dim:
        raise DimensionError("history window does not match prior dimensions")
    x = np.concatenate([m_h.frames.reshape(-1), m_f.frames.reshape(-1)])[None, :]
    out = _mlp_forward(x, params.vae_enc)[0]
    return out[: params.latent_dim], out[params.latent_dim:]


def sample_latent(mean: np.ndarray, log_variance: np.ndarray,
                  noise: np.ndarray) -> np.ndarray:
    """Reparameterized draw mean + exp(log_variance / 2) * noise."""
    m = np.asarray(mean, dtype=F64)
    lv = np.asarray(log_variance, dtype=F64)
    return (m + np.exp(0.5 * lv) * np.asarray(noise, dtype=F64)).astype(F32)


def denoiser_tokens(params: PriorParams, z_t: np.ndarray, t: int,
                    m_h: HistoryWindow, w: TextEmbedding) -> np.ndarray:
    """Embedded token sequence [time, text, history x H, latent] of shape (H+3, width)."""
    den = params.denoiser
    time_tok = linear(_sinusoidal(float(t), params.width)[None, :], den.time_w, den.time_b)
    if w.null_flag:
        text_tok = den.null_token[None, :]
    else:
        if w.values.shape[0] != params.text_dim:
            raise DimensionError("text embedding dim does not match prior")
        text_tok = linear(w.values[None, :], den.text_w, den.text_b)
    hist_tok = linear(m_h.frames, den.hist_w, den.hist_b)
    latent_tok = linear(np.asarray(z_t, dtype=F32)[None, :], den.latent_w, den.latent_b)
    tokens = np.vstack([time_tok, text_tok, hist_tok, latent_tok])
    return (tokens.astype(F64) + _token_positions(tokens.shape[0], params.width)).astype(F32)


def predict_clean_latent(params: PriorParams, z_t: np.ndarray, t: int,
                         m_h: HistoryWindow, w: TextEmbedding,
                         deltas=None) -> np.ndarray:
    """One denoiser evaluation: predicts the clean latent from the noisy one.

    deltas, when given, is a ModulationDelta whose per-layer residuals are
    added to the token activations after the matching denoiser block. An
    all-zero residual leaves the output bit-identical to the bare prior.
    """
    layer_map = {}
    if deltas is not None:
        layer_map = dict(deltas.layers)
        for idx in layer_map:
            if not (0 <= idx < params.n_blocks):
                raise ConfigError(f"injection layer {idx} outside denoiser blocks "
                                  f"[0, {params.n_blocks})")
    x = denoiser_tokens(params, z_t, t, m_h, w)
    for i, blk in enumerate(params.denoiser.blocks):
        normed = layer_norm(x, blk.attn.ln_gain, blk.attn.ln_offset)
        x = x + mha_forward(normed, normed, blk.attn)
        x = x + ffn_forward(layer_norm(x, blk.ffn.ln_gain, blk.ffn.ln_offset), blk.ffn)
        if i in layer_map:
            delta = np.asarray(layer_map[i], dtype=F32)
            if delta.shape != x.shape:
                raise DimensionError(f"delta at layer {i} has shape {delta.shape}, "
                                     f"tokens are {x.shape}")
            if delta.any():
                x = x + delta
    final = layer_norm(x, params.denoiser.final_gain, params.denoiser.final_offset)
    return linear(final[-1][None, :], params.denoiser.out_w, params.denoiser.out_b)[0]


def _as_generator(rng: Union[Rng, np.random.Generator], *labels) -> np.random.Generator:
    if isinstance(rng, Rng):
        return rng.generator(*labels)
    return rng


def ddpm_sample(params: Optional[PriorParams], m_h: HistoryWindow, w: TextEmbedding,
                deltas_provider: Optional[StepDeltaProvider], cfg: GenerationConfig,
                rng: Union[Rng, np.random.Generator],
                denoise_fn: Optional[Callable] = None,
                schedule: Optional[DiffusionSchedule] = None,
                latent_dim: Optional[int] = None) -> np.ndarray:
    """Sample one clean segment latent from pure noise.

    Runs cfg.steps iterations of the x0-parameterized DDPM posterior. Each
    step makes exactly two denoiser calls (conditional and unconditional) and
    blends them as z0_u + s * (z0_c - z0_u); s == 1 short-circuits to the
    conditional prediction. Interaction deltas from deltas_provider apply to
    both branches since they carry no text.

    denoise_fn(z_t, t, m_h, w, deltas) overrides the parameterized denoiser,
    which is how tests stub the prediction.
    """
    if denoise_fn is None:
        if params is None:
            raise ConfigError("ddpm_sample needs params or an explicit denoise_fn")
        denoise_fn = lambda z_t, t, h, txt, d: predict_clean_latent(params, z_t, t, h, txt, d)
    if params is not None:
        latent_dim = params.latent_dim
        text_dim = params.text_dim
    else:
        latent_dim = latent_dim if latent_dim is not None else DEFAULT_LATENT_DIM
        text_dim = w.values.shape[0]

    schedule = schedule or DiffusionSchedule.linear(cfg.steps)
    gen = _as_generator(rng, "ddpm", cfg.seed)
    null_w = null_embedding(text_dim)
    alphas = schedule.alphas
    alpha_bars = schedule.alpha_bars
    betas = schedule.betas
    s = cfg.guidance_scale

    z = gen.standard_normal(latent_dim, dtype=F32)
    for t in range(schedule.steps - 1, -1, -1):
        deltas = deltas_provider(z, t) if deltas_provider is not None else None
        z0_cond = np.asarray(denoise_fn(z, t, m_h, w, deltas), dtype=F64)
        z0_uncond = np.asarray(denoise_fn(z, t, m_h, null_w, deltas), dtype=F64)
        if s == 1.0:
            z0 = z0_cond
        else:
            z0 = z0_uncond + s * (z0_cond - z0_uncond)
        abar_t = alpha_bars[t]
        abar_prev = alpha_bars[t - 1] if t > 0 else 1.0
        coef0 = np.sqrt(abar_prev) * betas[t] / (1.0 - abar_t)
        coeft = np.sqrt(alphas[t]) * (1.0 - abar_prev) / (1.0 - abar_t)
        mean = coef0 * z0 + coeft * z.astype(F64)
        if t > 0:
            var = (1.0 - abar_prev) / (1.0 - abar_t) * betas[t]
            noise = gen.standard_normal(latent_dim, dtype=F32).astype(F64)
            z = (mean + np.sqrt(var) * noise).astype(F32)
        else:
            z = mean.astype(F32)
    return z


ProviderFactory = Callable[[int, HistoryWindow], Optional[StepDeltaProvider]]


def rollout(params: PriorParams, text: str, n_segments: int,
            context_providers: Optional[ProviderFactory], cfg: GenerationConfig,
            rng: Union[Rng, np.random.Generator],
            history: Optional[HistoryWindow] = None) -> MotionSegment:
    """Segment-autoregressive generation of n_segments * F frames.

    Before each segment the provider factory is queried with the segment
    index and current history; its failures propagate as ProviderError with
    that index. After each segment the history slides per the window update.
    """
    if history is None:
        history = HistoryWindow(np.zeros((cfg.history_len, params.feature_dim), dtype=F32))
    if len(history) != cfg.history_len:
        raise DimensionError("seed history length does not match config")
    w = embed_text(text, params.text_dim)
    gen = _as_generator(rng, "rollout", cfg.seed)
    chunks = []
    for i in range(n_segments):
        provider = None
        if context_providers is not None:
            try:
                provider = context_providers(i, history)
            except Exception as exc:
                raise ProviderError(i, str(exc)) from exc
        z0 = ddpm_sample(params, history, w, provider, cfg, gen)
        segment = decode_segment(history, z0, params, fps=cfg.fps)
        chunks.append(segment.frames)
        history = update_history(history, segment)
    if chunks:
        frames = np.vstack(chunks)
    else:
        frames = np.zeros((0, params.feature_dim), dtype=F32)
    return MotionSegment(frames, fps=cfg.fps)


@dataclass(frozen=True)
class LossReport:
    rec: float
    latent: float


def losses(m_f_true: MotionSegment, m_f_pred: MotionSegment,
           z_true: np.ndarray, z_pred: np.ndarray) -> LossReport:
    """Mean-squared reconstruction and latent errors (pure functions, no optimizer)."""
    if m_f_true.frames.shape != m_f_pred.frames.shape:
        raise DimensionError("segment shapes differ")
    zt = np.asarray(z_true, dtype=F64)
    zp = np.asarray(z_pred, dtype=F64)
    if zt.shape != zp.shape:
        raise DimensionError("latent shapes differ")
    rec = float(np.mean((m_f_true.frames.astype(F64) - m_f_pred.frames.astype(F64)) ** 2))
    latent = float(np.mean((zt - zp) ** 2))
    return LossReport(rec=rec, latent=latent)
