"""Meta-Interaction adapters: context encoders, modulation blocks, composition.

A module encodes one context source (other agents or the scene) into tokens,
then per injection layer runs a block over the denoiser's embedded tokens:

    h'    = h + SelfAttn(LN(h))
    r     = CrossAttn(LN(h'), c) with a sinusoidal relative-index bias
    gamma, beta = FiLM head applied per token of r
    h_mod = (1 + tanh gamma) * h' + tanh beta
    h_ffn = h_mod + FFN(LN(h_mod))
    delta = gate * (h_ffn - h)

The gate is a per-channel vector, zero at init, so a fresh module leaves the
frozen prior bit-identical. Multiple modules compose by weighted sum with a
per-sample L2 clamp that keeps the fused residual no larger than the
strongest individual branch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError, DimensionError, EmptyInputError
from .scene import EGO_DIMS, EgoVoxelBlock
from .tensorcore import (
    F32,
    F64,
    AttentionParams,
    FfnParams,
    RelBiasParams,
    Rng,
    ffn_forward,
    layer_norm,
    linear,
    matmul,
    mha_forward,
    relative_bias,
    seeded_init,
    sinusoidal_embedding,
)

SCENE_PATCH = 8
SCENE_TOKENS = (EGO_DIMS // SCENE_PATCH) ** 3  # 64


@dataclass(frozen=True)
class ContextTokens:
    """Encoded interaction cues: (T_c, d_c) tokens tagged with their source."""

    tokens: np.ndarray
    source: str = "others"

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=F32)
        if t.ndim != 2 or t.shape[0] < 1:
            raise DimensionError("context tokens must be (T_c >= 1, d_c)")
        if self.source not in ("others", "scene", "dynamic"):
            raise ConfigError(f"unknown context source {self.source!r}")
        object.__setattr__(self, "tokens", t)


@dataclass(frozen=True)
class TcnLayerParams:
    """One causal gated convolution: tanh(filter) * sigmoid(gate), kernel along time."""

    w_filter: np.ndarray  # (kernel, c_in, c_out)
    b_filter: np.ndarray
    w_gate: np.ndarray
    b_gate: np.ndarray


@dataclass(frozen=True)
class TcnParams:
    layers: tuple


@dataclass(frozen=True)
class SceneEncoderParams:
    patch_w: np.ndarray  # (patch_volume, d_c)
    patch_b: np.ndarray
    attn: AttentionParams


@dataclass(frozen=True)
class MimBlockParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    rel_bias: RelBiasParams
    film_w: np.ndarray  # (d, 2d)
    film_b: np.ndarray
    ffn: FfnParams
    gate: np.ndarray  # (d,) per-channel output gate


@dataclass(frozen=True)
class MimParams:
    """One Meta-Interaction module: its encoder and one block per injection layer."""

    module_id: str
    source: str
    encoder: Union[TcnParams, SceneEncoderParams]
    blocks: dict  # injection layer index -> MimBlockParams


@dataclass(frozen=True)
class ModulationDelta:
    """Per-injection-layer token residuals produced by one module (or a composition)."""

    module_id: str
    layers: dict  # layer index -> (T, d) array

    def __post_init__(self):
        clean = {}
        for idx, arr in self.layers.items():
            a = np.asarray(arr, dtype=F32)
            if a.ndim != 2:
                raise DimensionError("delta entries must be (T, d) matrices")
            clean[int(idx)] = a
        object.__setattr__(self, "layers", clean)

    def flat_norm(self) -> float:
        total = 0.0
        for arr in self.layers.values():
            total += float(np.sum(arr.astype(F64) ** 2))
        return float(np.sqrt(total))

    def layer_norms(self) -> dict:
        return {idx: float(np.linalg.norm(arr.astype(F64)))
                for idx, arr in self.layers.items()}


@dataclass(frozen=True)
class CompositionWeights:
    """User-set module coefficients and the clamp stabilizer."""

    alpha: dict
    epsilon: float = 1e-6
    clamp_per_layer: bool = False

    def __post_init__(self):
        if not self.alpha:
            raise ConfigError("composition needs at least one module weight")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


def _causal_conv_gated(x: np.ndarray, layer: TcnLayerParams) -> np.ndarray:
    """Left-padded temporal convolution with gated activation; output (T, c_out)."""
    kernel = layer.w_filter.shape[0]
    t, c_in = x.shape
    padded = np.vstack([np.zeros((kernel - 1, c_in), dtype=F32), x])
    filt = np.zeros((t, layer.w_filter.shape[2]), dtype=F64)
    gate = np.zeros_like(filt)
    for k in range(kernel):
        window = padded[k:k + t]
        filt += matmul(window, layer.w_filter[k]).astype(F64)
        gate += matmul(window, layer.w_gate[k]).astype(F64)
    filt += layer.b_filter.astype(F64)
    gate += layer.b_gate.astype(F64)
    return (np.tanh(filt) * (1.0 / (1.0 + np.exp(-gate)))).astype(F32)


def encode_others(partner_frames: np.ndarray, params: TcnParams) -> ContextTokens:
    """Causal TCN over a window of partner pose features; one token per frame."""
    x = np.asarray(partner_frames, dtype=F32)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError("partner window must be (T >= 1, D)")
    if x.shape[1] != params.layers[0].w_filter.shape[1]:
        raise DimensionError(f"partner feature dim {x.shape[1]} does not match encoder "
                             f"input {params.layers[0].w_filter.shape[1]}")
    for layer in params.layers:
        x = _causal_conv_gated(x, layer)
    return ContextTokens(x, source="others")


def encode_scene(block: EgoVoxelBlock, params: SceneEncoderParams) -> ContextTokens:
    """Patch tokens (4x4x4 patches of 8^3 cells) plus one self-attention layer."""
    occ = block.occupancy
    n = EGO_DIMS // SCENE_PATCH
    patches = occ.reshape(n, SCENE_PATCH, n, SCENE_PATCH, n, SCENE_PATCH)
    patches = patches.transpose(0, 2, 4, 1, 3, 5).reshape(n ** 3, SCENE_PATCH ** 3)
    if params.patch_w.shape[0] != SCENE_PATCH ** 3:
        raise DimensionError("patch embedding does not match patch volume")
    tokens = linear(patches.astype(F32), params.patch_w, params.patch_b)
    pos = sinusoidal_embedding(np.arange(tokens.shape[0]), tokens.shape[1])
    tokens = (tokens.astype(F64) + pos.astype(F64)).astype(F32)
    normed = layer_norm(tokens, params.attn.ln_gain, params.attn.ln_offset)
    tokens = tokens + mha_forward(normed, normed, params.attn)
    return ContextTokens(tokens, source="scene")


def mim_block_forward(h: np.ndarray, c: ContextTokens, params: MimBlockParams) -> np.ndarray:
    """One injection layer's residual; see the module docstring for the chain."""
    h = np.asarray(h, dtype=F32)
    if h.ndim != 2:
        raise DimensionError("ego features must be (T, d)")
    d = h.shape[1]
    if params.self_attn.width != d:
        raise DimensionError(f"block width {params.self_attn.width} != feature dim {d}")

    normed = layer_norm(h, params.self_attn.ln_gain, params.self_attn.ln_offset)
    h_prime = h + mha_forward(normed, normed, params.self_attn)

    bias = relative_bias(h.shape[0], c.tokens.shape[0], params.rel_bias)
    q = layer_norm(h_prime, params.cross_attn.ln_gain, params.cross_attn.ln_offset)
    r = mha_forward(q, c.tokens, params.cross_attn, bias)

    film = linear(r, params.film_w, params.film_b)
    gamma, beta = film[:, :d], film[:, d:]
    h_mod = ((1.0 + np.tanh(gamma.astype(F64))) * h_prime.astype(F64)
             + np.tanh(beta.astype(F64))).astype(F32)
    h_ffn = h_mod + ffn_forward(layer_norm(h_mod, params.ffn.ln_gain, params.ffn.ln_offset),
                                params.ffn)
    return ((h_ffn.astype(F64) - h.astype(F64)) * params.gate.astype(F64)).astype(F32)


def module_deltas(h: np.ndarray, c: ContextTokens, params: MimParams) -> ModulationDelta:
    """Run every injection-layer block of a module over the same ego features."""
    layers = {idx: mim_block_forward(h, c, block)
              for idx, block in sorted(params.blocks.items())}
    return ModulationDelta(module_id=params.module_id, layers=layers)


def compose_deltas(deltas: Sequence[ModulationDelta],
                   w: CompositionWeights) -> ModulationDelta:
    """Weighted sum of module residuals with the per-sample L2 clamp.

    The clamp scale is s = min(1, m / (||total|| + eps)) with m the largest
    unweighted module norm, taken over all layers jointly (set
    clamp_per_layer for the per-layer variant). A single module with weight
    exactly 1 passes through bit-identically.
    """
    if not deltas:
        raise EmptyInputError("no deltas to compose")
    layer_keys = sorted(deltas[0].layers.keys())
    for d in deltas[1:]:
        if sorted(d.layers.keys()) != layer_keys:
            raise DimensionError("deltas do not share an injection layer set")
        for idx in layer_keys:
            if d.layers[idx].shape != deltas[0].layers[idx].shape:
                raise DimensionError(f"delta shapes differ at layer {idx}")
    weights = []
    for d in deltas:
        if d.module_id not in w.alpha:
            raise ConfigError(f"no composition weight for module {d.module_id!r}")
        weights.append(float(w.alpha[d.module_id]))

    if len(deltas) == 1 and weights[0] == 1.0:
        return ModulationDelta(module_id=deltas[0].module_id,
                               layers={k: v.copy() for k, v in deltas[0].layers.items()})

    total = {idx: np.zeros_like(deltas[0].layers[idx], dtype=F64) for idx in layer_keys}
    for d, a in zip(deltas, weights):
        for idx in layer_keys:
            total[idx] += a * d.layers[idx].astype(F64)

    if w.clamp_per_layer:
        scaled = {}
        for idx in layer_keys:
            m = max(d.layer_norms()[idx] for d in deltas)
            norm = float(np.linalg.norm(total[idx]))
            s = min(1.0, m / (norm + w.epsilon))
            scaled[idx] = (s * total[idx]).astype(F32)
    else:
        m = max(d.flat_norm() for d in deltas)
        norm = float(np.sqrt(sum(np.sum(v ** 2) for v in total.values())))
        s = min(1.0, m / (norm + w.epsilon))
        scaled = {idx: (s * total[idx]).astype(F32) for idx in layer_keys}

    module_id = "+".join(d.module_id for d in deltas)
    return ModulationDelta(module_id=module_id, layers=scaled)


def seeded_mim_params(module_id: str, source: str, rng: Rng, feature_dim: int,
                      width: int = 128, heads: int = 4, ffn_hidden: int = 256,
                      injection_layers: Sequence[int] = (0, 1, 2, 3),
                      tcn_layers: int = 3, tcn_kernel: int = 3,
                      zero_gate: bool = True) -> MimParams:
    """Seeded module weights; the output gate starts at zero unless asked otherwise."""
    if source not in ("others", "scene"):
        raise ConfigError("module source must be 'others' or 'scene'")

    def u(name, shape):
        return seeded_init(shape, "uniform-fan", rng.child(module_id, name))

    def zeros(shape):
        return np.zeros(shape, dtype=F32)

    if source == "others":
        layers = []
        c_in = feature_dim
        for i in range(tcn_layers):
            layers.append(TcnLayerParams(
                w_filter=u(f"tcn{i}.wf", (tcn_kernel, c_in, width)),
                b_filter=zeros(width),
                w_gate=u(f"tcn{i}.wg", (tcn_kernel, c_in, width)),
                b_gate=zeros(width)))
            c_in = width
        encoder: Union[TcnParams, SceneEncoderParams] = TcnParams(tuple(layers))
    else:
        encoder = SceneEncoderParams(
            patch_w=u("patch.w", (SCENE_PATCH ** 3, width)), patch_b=zeros(width),
            attn=_seeded_attention(rng.child(module_id, "scene.attn"), width, width, heads))

    blocks = {}
    for idx in injection_layers:
        sub = rng.child(module_id, f"block{idx}")
        blocks[int(idx)] = MimBlockParams(
            self_attn=_seeded_attention(sub.child("self"), width, width, heads),
            cross_attn=_seeded_attention(sub.child("cross"), width, width, heads),
            rel_bias=RelBiasParams(omega=0.25,
                                   w_b=seeded_init((2, heads), "uniform-fan", sub.child("relb"))),
            film_w=seeded_init((width, 2 * width), "uniform-fan", sub.child("film")),
            film_b=zeros(2 * width),
            ffn=FfnParams(seeded_init((width, ffn_hidden), "uniform-fan", sub.child("ffn1")),
                          zeros(ffn_hidden),
                          seeded_init((ffn_hidden, width), "uniform-fan", sub.child("ffn2")),
                          zeros(width),
                          ln_gain=np.ones(width, dtype=F32), ln_offset=zeros(width)),
            gate=zeros(width) if zero_gate else np.ones(width, dtype=F32))
    return MimParams(module_id=module_id, source=source, encoder=encoder, blocks=blocks)


def _seeded_attention(rng: Rng, q_in: int, width: int, heads: int) -> AttentionParams:
    return AttentionParams(
        heads=heads, width=width,
        w_q=seeded_init((q_in, width), "uniform-fan", rng.child("wq")),
        w_k=seeded_init((width, width), "uniform-fan", rng.child("wk")),
        w_v=seeded_init((width, width), "uniform-fan", rng.child("wv")),
        w_o=seeded_init((width, width), "uniform-fan", rng.child("wo")),
        ln_gain=np.ones(width, dtype=F32),
        ln_offset=np.zeros(width, dtype=F32))
