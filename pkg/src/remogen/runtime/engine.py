"""The online generation engine: wires prior, adapters and refinement together.

The engine works in normalized feature space internally and denormalizes at
emission. One tick corresponds to one input frame of wall-clock time:

  segment mode  - buffer F ticks, then sample and emit a whole segment
  fwsr mode     - sample at the segment start, then refine and emit one
                  frame per tick
  slide mode    - re-sample a full segment every tick, keep only frame 0
                  (the latency-heavy baseline)

Text and composition-weight changes are queued and applied at the next
segment boundary, since one denoising pass is conditioned on a single text.
"""
from __future__ import annotations

from contextlib import nullcontext
from functools import lru_cache
from typing import Optional

import numpy as np

from ..errors import ConfigError
from ..fwsr import (
    DynamicContext,
    FwsrParams,
    SensitivityVector,
    refine_latent,
    seeded_fwsr_params,
)
from ..metrics import LatencyRecorder
from ..mim import (
    CompositionWeights,
    MimParams,
    compose_deltas,
    encode_others,
    encode_scene,
    module_deltas,
    seeded_mim_params,
)
from ..motion import (
    FeatureLayout,
    HistoryWindow,
    Normalizer,
    RigidTransform,
    normalize,
    rest_history,
    rotation_about_axis,
    rotation_from_6d,
    update_history,
)
from ..prior import (
    PriorParams,
    ddpm_sample,
    decode_batch,
    decode_segment,
    denoiser_tokens,
    embed_text,
    null_embedding,
    predict_clean_latent,
    seeded_prior_params,
)
from ..scene import VoxelGrid, extract_ego_voxels
from ..tensorcore import F32, Rng
from .codecs import WeightArchive
from .config import EngineConfig
from .weights import flatten_params, rebuild_params

MODULE_SOURCES = {"hhi": "others", "hsi": "scene"}
MODES = ("segment", "fwsr", "slide")


# Templates are structural skeletons for rebuild_params; they depend only on
# the dimensions below and are never mutated, so they can be cached.

@lru_cache(maxsize=32)
def _cached_prior_template(feature_dim, history_len, future_len, latent_dim,
                           text_dim, width, heads, n_blocks, ffn_hidden,
                           vae_hidden) -> PriorParams:
    return seeded_prior_params(Rng(0), feature_dim=feature_dim,
                               history_len=history_len, future_len=future_len,
                               latent_dim=latent_dim, text_dim=text_dim,
                               width=width, heads=heads, n_blocks=n_blocks,
                               ffn_hidden=ffn_hidden, vae_hidden=vae_hidden)


@lru_cache(maxsize=32)
def _cached_mim_template(module_id, source, feature_dim, width, heads, ffn_hidden,
                         injection_layers) -> MimParams:
    return seeded_mim_params(module_id, source, Rng(0), feature_dim=feature_dim,
                             width=width, heads=heads, ffn_hidden=ffn_hidden,
                             injection_layers=injection_layers)


@lru_cache(maxsize=32)
def _cached_fwsr_template(feature_dim, latent_dim, heads, beta_sens) -> FwsrParams:
    return seeded_fwsr_params(Rng(0), feature_dim=feature_dim, latent_dim=latent_dim,
                              heads=heads, beta_sens=beta_sens)


def _prior_template(cfg: EngineConfig, layout: FeatureLayout) -> PriorParams:
    return _cached_prior_template(layout.dim, cfg.history_len, cfg.future_len,
                                  cfg.latent_dim, cfg.text_dim, cfg.width, cfg.heads,
                                  cfg.n_blocks, cfg.ffn_hidden, cfg.vae_hidden)


def _mim_template(cfg: EngineConfig, layout: FeatureLayout, module_id: str,
                  source: str) -> MimParams:
    return _cached_mim_template(module_id, source, layout.dim, cfg.width, cfg.heads,
                                cfg.ffn_hidden, tuple(cfg.injection_layers))


def _fwsr_template(cfg: EngineConfig, layout: FeatureLayout) -> FwsrParams:
    return _cached_fwsr_template(layout.dim, cfg.latent_dim, cfg.heads, cfg.beta_sens)


def init_weights(cfg: EngineConfig, seed: int) -> WeightArchive:
    """A fully seeded random archive with zero-gated adapters.

    Adapters start neutral, so the whole pipeline runs end to end without any
    training while leaving the prior's outputs untouched.
    """
    layout = FeatureLayout(cfg.joints)
    rng = Rng(seed)
    tensors: dict = {}
    prior = seeded_prior_params(rng.child("prior"), feature_dim=layout.dim,
                                history_len=cfg.history_len, future_len=cfg.future_len,
                                latent_dim=cfg.latent_dim, text_dim=cfg.text_dim,
                                width=cfg.width, heads=cfg.heads, n_blocks=cfg.n_blocks,
                                ffn_hidden=cfg.ffn_hidden, vae_hidden=cfg.vae_hidden)
    tensors.update(flatten_params("prior", prior))
    for module_id, source in MODULE_SOURCES.items():
        mim = seeded_mim_params(module_id, source, rng.child("mim", module_id),
                                feature_dim=layout.dim, width=cfg.width, heads=cfg.heads,
                                ffn_hidden=cfg.ffn_hidden,
                                injection_layers=cfg.injection_layers, zero_gate=True)
        tensors.update(flatten_params(f"mim.{module_id}", mim))
    fwsr = seeded_fwsr_params(rng.child("fwsr"), feature_dim=layout.dim,
                              latent_dim=cfg.latent_dim, heads=cfg.heads,
                              beta_sens=cfg.beta_sens, zero_film=True)
    tensors.update(flatten_params("fwsr", fwsr))
    tensors["norm.mean"] = np.zeros(layout.dim, dtype=F32)
    tensors["norm.std"] = np.ones(layout.dim, dtype=F32)
    return WeightArchive(tensors)


class Engine:
    """Stateful streaming generator over one weight archive and config."""

    def __init__(self, archive: WeightArchive, cfg: EngineConfig,
                 mode: Optional[str] = None,
                 recorder: Optional[LatencyRecorder] = None):
        self.cfg = cfg
        self.layout = FeatureLayout(cfg.joints)
        self.mode = mode or ("fwsr" if cfg.fwsr else "segment")
        if self.mode not in MODES:
            raise ConfigError(f"unknown inference mode {self.mode!r}")
        self.recorder = recorder

        names = archive.names()
        self.prior = rebuild_params("prior", _prior_template(cfg, self.layout),
                                    archive.tensors)
        self.mims: dict = {}
        for module_id, source in MODULE_SOURCES.items():
            if any(n.startswith(f"mim.{module_id}.") for n in names):
                template = _mim_template(cfg, self.layout, module_id, source)
                self.mims[module_id] = rebuild_params(f"mim.{module_id}", template,
                                                      archive.tensors)
        self.fwsr_params: Optional[FwsrParams] = None
        if any(n.startswith("fwsr.") for n in names):
            self.fwsr_params = rebuild_params("fwsr", _fwsr_template(cfg, self.layout),
                                              archive.tensors)
        if self.mode == "fwsr" and self.fwsr_params is None:
            raise ConfigError("fwsr mode requested but the archive has no fwsr weights")
        self.normalizer = Normalizer(archive.get("norm.mean"), archive.get("norm.std"))

        self.canonical_to_world = RigidTransform.identity()
        self.scene_grid: Optional[VoxelGrid] = None
        self.gen = Rng(cfg.seed).generator("engine")

        self.text = ""
        self.alpha: dict = dict(cfg.alpha)
        self._pending_text: Optional[str] = None
        self._pending_alpha: Optional[dict] = None

        seed_history = rest_history(cfg.history_len, self.layout, fps=cfg.fps)
        self.history = HistoryWindow(normalize(seed_history.frames, self.normalizer))
        self.partner: list = []
        self.dyn = DynamicContext(cfg.history_len, self.layout.dim)
        self.ticks = 0
        self.frames_emitted = 0
        self._segment: Optional[dict] = None

    # -- state fed from outside ------------------------------------------------

    def set_scene(self, grid: Optional[VoxelGrid]) -> None:
        self.scene_grid = grid

    def set_text(self, text: str) -> None:
        self._pending_text = text

    def set_alpha(self, alpha: dict) -> None:
        unknown = [k for k in alpha if k not in self.mims]
        if unknown:
            raise ConfigError(f"alpha names unknown modules {unknown}")
        self._pending_alpha = dict(alpha)

    def observe_ego(self, pose: np.ndarray) -> None:
        """Teacher-forced ego observation; slides the sampler history."""
        frame = normalize(np.asarray(pose, dtype=F32).reshape(1, -1), self.normalizer)[0]
        self.history = self.history.slide(frame)

    # -- internals ---------------------------------------------------------------

    def _track(self, name: str):
        return self.recorder.track(name) if self.recorder is not None else nullcontext()

    def _apply_pending(self) -> None:
        if self._pending_text is not None:
            self.text = self._pending_text
            self._pending_text = None
        if self._pending_alpha is not None:
            self.alpha = self._pending_alpha
            self._pending_alpha = None

    def _ego_anchor(self) -> RigidTransform:
        """Floor-level yaw frame of the current ego root, in world coordinates."""
        frame = normalize(self.history.frames[-1:], self.normalizer, inverse=True)[0]
        root = frame[self.layout.span("root_translation")]
        rot6 = frame[self.layout.span("rotations_6d")][:6]
        r = rotation_from_6d(rot6)
        yaw = float(np.arctan2(r[1, 0], r[0, 0]))
        local = RigidTransform(rotation_about_axis(np.array([0.0, 0.0, 1.0]), yaw),
                               np.array([root[0], root[1], 0.0], dtype=np.float64))
        world = self.canonical_to_world
        return RigidTransform(world.rotation @ local.rotation,
                              world.rotation @ local.translation + world.translation)

    def _module_context(self, module_id: str):
        params = self.mims[module_id]
        if params.source == "others":
            window = self.partner[-self.cfg.history_len:]
            if not window:
                window = [np.zeros(self.layout.dim, dtype=F32)]
            return encode_others(np.stack(window), params.encoder)
        if self.scene_grid is None:
            return None
        block = extract_ego_voxels(self.scene_grid, self._ego_anchor())
        return encode_scene(block, params.encoder)

    def _delta_provider(self):
        """Per-step composed deltas for the active modules, or None."""
        active = [(mid, a) for mid, a in self.alpha.items() if mid in self.mims]
        contexts = []
        for mid, a in active:
            ctx = self._module_context(mid)
            if ctx is not None:
                contexts.append((mid, a, ctx))
        if not contexts:
            return None
        weights = CompositionWeights(alpha={mid: a for mid, a, _ in contexts})
        null_w = null_embedding(self.cfg.text_dim)

        def provider(z_t, t):
            with self._track("mim"):
                h0 = denoiser_tokens(self.prior, z_t, t, self.history, null_w)
                deltas = [module_deltas(h0, ctx, self.mims[mid])
                          for mid, _, ctx in contexts]
                return compose_deltas(deltas, weights)

        return provider

    def _sample_latent(self) -> np.ndarray:
        provider = self._delta_provider()
        w = embed_text(self.text, self.prior.text_dim)

        def denoise(z_t, t, m_h, txt, deltas):
            with self._track("denoiser"):
                return predict_clean_latent(self.prior, z_t, t, m_h, txt, deltas)

        with self._track("denoise_total"):
            return ddpm_sample(self.prior, self.history, w, provider,
                               self.cfg.generation(), self.gen, denoise_fn=denoise)

    def _decode(self, history: HistoryWindow, z: np.ndarray):
        with self._track("decode"):
            return decode_segment(history, z, self.prior, fps=self.cfg.fps)

    def _sensitivity(self, z0: np.ndarray) -> SensitivityVector:
        """Central-difference decoder sensitivity with all probes decoded in one batch."""
        d_z = self.prior.latent_dim
        h = self.cfg.h_step
        offsets = np.eye(d_z, dtype=np.float64) * h
        probes = np.concatenate([z0.astype(np.float64) + offsets,
                                 z0.astype(np.float64) - offsets]).astype(F32)
        outs = decode_batch(self.history, probes, self.prior).astype(np.float64)
        diff = (outs[:d_z] - outs[d_z:]).reshape(d_z, -1)
        return SensitivityVector((np.linalg.norm(diff, axis=1) / (2.0 * h)).astype(F32))

    def _emit(self, normalized_frame: np.ndarray) -> np.ndarray:
        self.frames_emitted += 1
        return normalize(normalized_frame.reshape(1, -1), self.normalizer, inverse=True)[0]

    # -- the clock ----------------------------------------------------------------

    def tick(self, partner_frame: Optional[np.ndarray] = None) -> list:
        """Advance one input frame; returns denormalized ego frames emitted now."""
        with self._track("pre_post"):
            if partner_frame is not None:
                frame = normalize(np.asarray(partner_frame, dtype=F32).reshape(1, -1),
                                  self.normalizer)[0]
                self.partner.append(frame)
                self.dyn.push(frame)
        phase = self.ticks % self.cfg.future_len
        self.ticks += 1

        if self.mode == "segment":
            if self.ticks % self.cfg.future_len != 0:
                return []
            self._apply_pending()
            z0 = self._sample_latent()
            segment = self._decode(self.history, z0)
            self.history = update_history(self.history, segment)
            return [self._emit(f) for f in segment.frames]

        if self.mode == "slide":
            self._apply_pending()
            z0 = self._sample_latent()
            segment = self._decode(self.history, z0)
            first = segment.frames[0]
            self.history = self.history.slide(first)
            return [self._emit(first)]

        # fwsr mode: mirrors the per-frame refinement loop, spread over ticks
        if phase == 0:
            self._apply_pending()
            self.dyn.mark_segment_start()
            z0 = self._sample_latent()
            initial = self._decode(self.history, z0)
            with self._track("sensitivity"):
                sens = self._sensitivity(z0)
            first = initial.frames[0]
            rolling = self.history.slide(first)
            self._segment = {"z0": z0, "decode_history": rolling, "rolling": rolling,
                             "sens": sens}
            if self.cfg.future_len == 1:
                self.history = rolling
                self._segment = None
            return [self._emit(first)]

        seg = self._segment
        if seg is None:
            raise ConfigError("refinement tick without an active segment")
        with self._track("fwsr_refine"):
            window = self.dyn.window(phase)
            z_ref = refine_latent(seg["z0"], seg["rolling"], window, seg["sens"],
                                  self.fwsr_params)
        with self._track("fwsr_decode"):
            refined = decode_segment(seg["decode_history"], z_ref, self.prior,
                                     fps=self.cfg.fps)
        frame = refined.frames[phase]
        seg["rolling"] = seg["rolling"].slide(frame)
        if phase == self.cfg.future_len - 1:
            self.history = seg["rolling"]
            self._segment = None
        return [self._emit(frame)]

    def run_ticks(self, n_frames: int, partner_frames: Optional[np.ndarray] = None) -> list:
        """Drive enough ticks to emit at least n_frames; returns emitted frames."""
        out: list = []
        i = 0
        while len(out) < n_frames:
            partner = None
            if partner_frames is not None and i < len(partner_frames):
                partner = partner_frames[i]
            out.extend(self.tick(partner))
            i += 1
        return out
