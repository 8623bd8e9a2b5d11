"""Frozen synthetic image generator and the training corpus.

The generator maps a structured latent code (K slots of D reals) to an
image: a hidden affine map takes the flattened latent to pre-activation
parameters, a per-group tanh squash maps those into valid rig-parameter
ranges, the face is rendered with the point renderer, and the result is
composited over a flat background color driven by the last (fine) slot.

Slot wiring mirrors the coarse/medium/fine structure of style-based
generators: rotation and translation read only coarse slots, illumination
and reflectance only medium+fine, shape and expression coarse+medium.  The
hidden map deliberately correlates rows across groups (rotation with
expression/shape, illumination with reflectance), so naive latent steering
entangles semantic groups - the property the rig mapper has to untangle.

``oracle_params`` exposes the exact hidden parameters for EVALUATION ONLY;
training code never touches it (it consumes corpora and images alone).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import softclip_np
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .facemodel import GROUPS, ModelConfig, MorphableModel, build_toy_model, unpack
from .render import Camera, Renderer

CORPUS_MAGIC = b"FRFG"
CORPUS_VERSION = 1


class LatentError(ValueError):
    """Raised for latent codes inconsistent with the generator config."""


@dataclass(frozen=True)
class GeneratorConfig:
    """Latent layout: K slots of dimension D plus the resolution partition."""

    slot_count: int = 6
    slot_dim: int = 32
    max_mix_sources: int = 5
    coarse_slots: tuple = (0, 1)
    medium_slots: tuple = (2, 3)
    fine_slots: tuple = (4, 5)

    def __post_init__(self):
        parts = (*self.coarse_slots, *self.medium_slots, *self.fine_slots)
        if sorted(parts) != list(range(self.slot_count)):
            raise LatentError(
                "coarse/medium/fine must partition the slot indices "
                f"0..{self.slot_count - 1}, got {parts}"
            )
        if self.max_mix_sources < 1:
            raise LatentError("max_mix_sources must be >= 1")

    @property
    def latent_length(self) -> int:
        return self.slot_count * self.slot_dim

    @classmethod
    def paper_scale(cls) -> "GeneratorConfig":
        return cls(slot_count=18, slot_dim=512,
                   coarse_slots=tuple(range(0, 4)),
                   medium_slots=tuple(range(4, 10)),
                   fine_slots=tuple(range(10, 18)))


def check_latent(w, config: GeneratorConfig) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape == (config.latent_length,):
        w = w.reshape(config.slot_count, config.slot_dim)
    if w.shape != (config.slot_count, config.slot_dim):
        raise LatentError(
            f"latent code has shape {w.shape}, expected "
            f"({config.slot_count}, {config.slot_dim})"
        )
    if not np.all(np.isfinite(w)):
        raise LatentError("latent code contains non-finite entries")
    return w


def sample_latent(rng: np.random.Generator,
                  config: GeneratorConfig) -> np.ndarray:
    """Draw one latent code by mixing up to ``max_mix_sources`` base codes.

    The slot axis is split into m contiguous runs at uniformly random cut
    points; each run copies its slots from one independently sampled code.
    """
    K, D = config.slot_count, config.slot_dim
    m = int(rng.integers(1, min(config.max_mix_sources, K) + 1))
    bases = rng.normal(size=(m, K, D))
    w = np.empty((K, D))
    if m == 1:
        w[:] = bases[0]
        return w
    cuts = np.sort(rng.choice(np.arange(1, K), size=m - 1, replace=False))
    bounds = [0, *cuts.tolist(), K]
    for run in range(m):
        w[bounds[run]:bounds[run + 1]] = bases[run, bounds[run]:bounds[run + 1]]
    return w


# slots each parameter group is allowed to read
WIRING = {
    "shape": ("coarse", "medium"),
    "reflectance": ("medium", "fine"),
    "expression": ("coarse", "medium"),
    "illumination": ("medium", "fine"),
    "rotation": ("coarse",),
    "translation": ("coarse",),
}

# squash ranges: parameter = center + scale * tanh(pre-activation)
ROTATION_SCALE = np.array([np.pi / 4, np.pi / 9, np.pi / 18])  # yaw/pitch/roll
TRANSLATION_CENTER = np.array([0.0, 0.0, 2.5])
TRANSLATION_SCALE = np.array([0.15, 0.15, 0.25])
COEFF_SCALE = 2.0          # +-2 sigma for shape/reflectance/expression
SH_DC = 3.5449077018110318  # 2 sqrt(pi): unit irradiance at band 0
PRE_STD = 0.7              # pre-squash std, keeps tanh near its linear zone
ROW_MIX = {"shape": 0.35, "expression": 0.45, "illumination": 0.4,
           "translation": 0.25}


def _squash_tables(mc: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    center = np.zeros(mc.packed_length)
    scale = np.empty(mc.packed_length)
    sl = mc.group_slices
    for g in ("shape", "reflectance", "expression"):
        scale[sl[g]] = COEFF_SCALE
    ill = np.full(27, 0.35)
    ill_center = np.zeros(27)
    ill_center[[0, 9, 18]] = SH_DC * 0.85
    ill[[0, 9, 18]] = SH_DC * 0.25   # global color gain varies the most
    ill[[3, 12, 21]] = 0.8           # then the x (azimuth-like) band-1 term
    center[sl["illumination"]] = ill_center
    scale[sl["illumination"]] = ill
    scale[sl["rotation"]] = ROTATION_SCALE
    center[sl["translation"]] = TRANSLATION_CENTER
    scale[sl["translation"]] = TRANSLATION_SCALE
    return center, scale


def _build_hidden_map(rng: np.random.Generator, mc: ModelConfig,
                      gc: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """The frozen affine latent->pre-activation map with entangled rows."""
    D = gc.slot_dim
    slot_cols = {
        "coarse": np.concatenate([np.arange(s * D, (s + 1) * D)
                                  for s in gc.coarse_slots]),
        "medium": np.concatenate([np.arange(s * D, (s + 1) * D)
                                  for s in gc.medium_slots]),
        "fine": np.concatenate([np.arange(s * D, (s + 1) * D)
                                for s in gc.fine_slots]),
    }
    A = np.zeros((mc.packed_length, gc.latent_length))
    rows = {}
    for g in GROUPS:
        cols = np.concatenate([slot_cols[r] for r in WIRING[g]])
        n = mc.group_dims[g]
        q, _ = np.linalg.qr(rng.normal(size=(cols.size, n)))
        rows[g] = (q.T, cols)
    # cross-group correlation: rotation leaks into shape/expression/translation
    # (shared coarse support) and reflectance into illumination (medium+fine)
    rot_rows, rot_cols = rows["rotation"]
    refl_rows, refl_cols = rows["reflectance"]
    for g, mu in ROW_MIX.items():
        own, cols = rows[g]
        donor_rows, donor_cols = (refl_rows, refl_cols) if g == "illumination" \
            else (rot_rows, rot_cols)
        pos = np.searchsorted(cols, donor_cols)
        mixed = np.sqrt(1.0 - mu * mu) * own
        for i in range(own.shape[0]):
            mixed[i, pos] += mu * donor_rows[i % donor_rows.shape[0]]
        rows[g] = (mixed, cols)
    sl = mc.group_slices
    for g in GROUPS:
        own, cols = rows[g]
        norm = np.linalg.norm(own, axis=1, keepdims=True)
        A[np.ix_(np.arange(sl[g].start, sl[g].stop), cols)] = \
            PRE_STD * own / norm
    sv = np.linalg.svd(A, compute_uv=False)
    if sv.min() < 1e-6:
        raise LatentError("hidden map lost full row rank; adjust mixing")
    b = 0.2 * rng.normal(size=mc.packed_length)
    return A, b


BG_BASE = np.array([0.34, 0.44, 0.58])


@dataclass
class FrozenGenerator:
    """Immutable analytic stand-in for a pretrained image generator."""

    config: GeneratorConfig
    model: MorphableModel
    camera: Camera
    A: np.ndarray               # (f, l) hidden affine map
    b: np.ndarray               # (f,)
    squash_center: np.ndarray   # (f,)
    squash_scale: np.ndarray    # (f,)
    bg_weights: np.ndarray      # (3, D), reads the last fine slot
    bg_bias: np.ndarray         # (3,)
    sigma_px: float = 1.0
    _renderer: Renderer = field(default=None, repr=False)

    def __post_init__(self):
        if self._renderer is None:
            self._renderer = Renderer(self.model, self.camera,
                                      sigma_px=self.sigma_px)
        for arr in (self.A, self.b, self.squash_center, self.squash_scale,
                    self.bg_weights, self.bg_bias):
            arr.setflags(write=False)

    @classmethod
    def build(cls, seed: int, config: GeneratorConfig | None = None,
              model_config: ModelConfig | None = None,
              camera: Camera | None = None,
              sigma_px: float = 1.0) -> "FrozenGenerator":
        config = config if config is not None else GeneratorConfig()
        mc = model_config if model_config is not None else ModelConfig()
        camera = camera if camera is not None else Camera()
        model = build_toy_model(seed, mc)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF5_0F]))
        A, b = _build_hidden_map(rng, mc, config)
        center, scale = _squash_tables(mc)
        bg_w = 0.15 * rng.normal(size=(3, config.slot_dim))
        return cls(config=config, model=model, camera=camera, A=A, b=b,
                   squash_center=center, squash_scale=scale,
                   bg_weights=bg_w, bg_bias=BG_BASE.copy(), sigma_px=sigma_px)

    # -- generation ----------------------------------------------------------

    def _params_from(self, w: np.ndarray) -> np.ndarray:
        pre = self.A @ w.ravel() + self.b
        return self.squash_center + self.squash_scale * np.tanh(pre)

    def background_color(self, w) -> np.ndarray:
        w = check_latent(w, self.config)
        return softclip_np(self.bg_bias + self.bg_weights @ w[-1], 0.0, 1.0, 0.1)

    def generate(self, w) -> np.ndarray:
        """Image (3, H, W) for latent w; deterministic and frozen."""
        return self.generate_frame(w)[0]

    def generate_frame(self, w) -> tuple[np.ndarray, np.ndarray]:
        """(image, oracle landmark positions) for one latent code."""
        w = check_latent(w, self.config)
        out = self._renderer.render(self._params_from(w))
        bg = self.background_color(w)
        image = out.image + (1.0 - out.mask)[None, :, :] * bg[:, None, None]
        return image, out.landmarks

    def render_params(self, packed: np.ndarray, w_background=None) -> np.ndarray:
        """Composite an arbitrary parameter vector like generate() would."""
        out = self._renderer.render(packed)
        bg = (self.background_color(w_background) if w_background is not None
              else self.bg_bias)
        return out.image + (1.0 - out.mask)[None, :, :] * bg[:, None, None]

    @property
    def renderer(self) -> Renderer:
        return self._renderer

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self._config_dict(), sort_keys=True).encode())
        for arr in (self.A, self.b, self.squash_center, self.squash_scale,
                    self.bg_weights, self.bg_bias):
            h.update(np.ascontiguousarray(arr).tobytes())
        for name, arr in sorted(self.model.tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()

    def _config_dict(self) -> dict:
        mc, gc, cam = self.model.config, self.config, self.camera
        return {
            "generator": {
                "slot_count": gc.slot_count, "slot_dim": gc.slot_dim,
                "max_mix_sources": gc.max_mix_sources,
                "coarse_slots": list(gc.coarse_slots),
                "medium_slots": list(gc.medium_slots),
                "fine_slots": list(gc.fine_slots),
            },
            "model": {
                "dim_shape": mc.dim_shape,
                "dim_reflectance": mc.dim_reflectance,
                "dim_expression": mc.dim_expression,
                "vertex_count": mc.vertex_count,
                "landmark_count": mc.landmark_count,
            },
            "camera": {"focal": cam.focal, "cx": cam.cx, "cy": cam.cy,
                       "width": cam.width, "height": cam.height},
            "sigma_px": self.sigma_px,
        }

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> str:
        tensors = {"A": self.A, "b": self.b,
                   "squash_center": self.squash_center,
                   "squash_scale": self.squash_scale,
                   "bg_weights": self.bg_weights, "bg_bias": self.bg_bias}
        tensors.update({f"model.{k}": v for k, v in self.model.tensors().items()})
        return save_checkpoint(path, "generator", self._config_dict(), tensors)

    @classmethod
    def load(cls, path) -> "FrozenGenerator":
        ck = load_checkpoint(path, expect_component="generator")
        return cls.from_checkpoint(ck)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "FrozenGenerator":
        cfg = ck.config
        gc = GeneratorConfig(
            slot_count=cfg["generator"]["slot_count"],
            slot_dim=cfg["generator"]["slot_dim"],
            max_mix_sources=cfg["generator"]["max_mix_sources"],
            coarse_slots=tuple(cfg["generator"]["coarse_slots"]),
            medium_slots=tuple(cfg["generator"]["medium_slots"]),
            fine_slots=tuple(cfg["generator"]["fine_slots"]),
        )
        mc = ModelConfig(**cfg["model"])
        cam = Camera(**cfg["camera"])
        model_t = {k[len("model."):]: v for k, v in ck.tensors.items()
                   if k.startswith("model.")}
        model = MorphableModel.from_tensors(mc, model_t)
        return cls(config=gc, model=model, camera=cam,
                   A=ck.tensors["A"], b=ck.tensors["b"],
                   squash_center=ck.tensors["squash_center"],
                   squash_scale=ck.tensors["squash_scale"],
                   bg_weights=ck.tensors["bg_weights"],
                   bg_bias=ck.tensors["bg_bias"],
                   sigma_px=cfg["sigma_px"])


# -- evaluation-only oracle ---------------------------------------------------
# Training code must never call these: they expose the generator's hidden
# parameters, which exist so edits can be verified quantitatively.


def oracle_params(generator: FrozenGenerator, w):
    """True rig parameters behind generate(w).  EVALUATION ONLY."""
    w = check_latent(w, generator.config)
    return unpack(generator._params_from(w), generator.model.config)


def oracle_pre_squash(generator: FrozenGenerator, w) -> np.ndarray:
    """Pre-activation parameters A w + b.  EVALUATION ONLY."""
    w = check_latent(w, generator.config)
    return generator.A @ w.ravel() + generator.b


# ---------------------------------------------------------------------------
# Corpus file: FRFG header + per-sample records + byte-offset index footer


@dataclass
class TrainingSample:
    latent: np.ndarray      # (K, D) f64
    image: np.ndarray       # (3, H, W) f32 as stored
    landmarks: np.ndarray   # (L, 2) f64


class CorpusError(RuntimeError):
    pass


def build_corpus(path, generator: FrozenGenerator, n_samples: int,
                 seed: int, progress=None) -> str:
    """Generate n samples and stream them to ``path``; returns generator hash.

    Sample i is drawn from an rng seeded by (seed, i), so corpus builds are
    order-independent and bit-reproducible.
    """
    if n_samples < 1:
        raise CorpusError("n_samples must be >= 1")
    gc = generator.config
    cam = generator.camera
    header = {
        "n_samples": n_samples,
        "seed": seed,
        "generator_hash": generator.content_hash(),
        "latent_shape": [gc.slot_count, gc.slot_dim],
        "image_shape": [3, cam.height, cam.width],
        "landmark_count": generator.model.config.landmark_count,
        "config": generator._config_dict(),
    }
    try:
        with open(path, "wb") as fh:
            fh.write(CORPUS_MAGIC)
            fh.write(struct.pack("<I", CORPUS_VERSION))
            raw = json.dumps(header, sort_keys=True).encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            offsets = np.empty(n_samples, dtype=np.uint64)
            for i in range(n_samples):
                rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
                w = sample_latent(rng, gc)
                image, landmarks = generator.generate_frame(w)
                offsets[i] = fh.tell()
                fh.write(w.astype("<f8").tobytes())
                fh.write(image.astype("<f4").tobytes())
                fh.write(landmarks.astype("<f8").tobytes())
                if progress is not None and (i + 1) % 1000 == 0:
                    progress(i + 1, n_samples)
            index_pos = fh.tell()
            fh.write(offsets.tobytes())
            fh.write(struct.pack("<Q", index_pos))
    except OSError as err:
        raise CorpusError(f"writing corpus {path}: {err}") from err
    return header["generator_hash"]


class CorpusReader:
    """Random access over a corpus file; samples are read on demand."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self._fh = open(path, "rb")
        except OSError as err:
            raise CorpusError(f"opening corpus {path}: {err}") from err
        magic = self._fh.read(4)
        if magic != CORPUS_MAGIC:
            raise CorpusError(f"{path}: not a corpus file (bad magic)")
        version = struct.unpack("<I", self._fh.read(4))[0]
        if version != CORPUS_VERSION:
            raise CorpusError(f"{path}: unsupported corpus version {version}")
        hlen = struct.unpack("<I", self._fh.read(4))[0]
        self.header = json.loads(self._fh.read(hlen))
        self._fh.seek(-8, 2)
        index_pos = struct.unpack("<Q", self._fh.read(8))[0]
        self._fh.seek(index_pos)
        n = self.header["n_samples"]
        self.offsets = np.frombuffer(self._fh.read(8 * n), dtype="<u8")
        K, D = self.header["latent_shape"]
        C, H, W = self.header["image_shape"]
        L = self.header["landmark_count"]
        self._sizes = (K * D * 8, C * H * W * 4, L * 2 * 8)
        self._shapes = ((K, D), (C, H, W), (L, 2))

    def __len__(self) -> int:
        return int(self.header["n_samples"])

    @property
    def generator_hash(self) -> str:
        return self.header["generator_hash"]

    def sample(self, i: int) -> TrainingSample:
        if not 0 <= i < len(self):
            raise CorpusError(f"sample index {i} out of range 0..{len(self)-1}")
        self._fh.seek(int(self.offsets[i]))
        nl, ni, nm = self._sizes
        sl, si, sm = self._shapes
        latent = np.frombuffer(self._fh.read(nl), dtype="<f8").reshape(sl)
        image = np.frombuffer(self._fh.read(ni), dtype="<f4").reshape(si)
        lmk = np.frombuffer(self._fh.read(nm), dtype="<f8").reshape(sm)
        return TrainingSample(latent.copy(), image.copy(), lmk.copy())

    def latents(self) -> np.ndarray:
        """All latent codes as one (N, K, D) array."""
        return np.stack([self.sample(i).latent for i in range(len(self))])

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(latents (B,K,D), images (B,H,W,3) f64, landmarks (B,L,2))."""
        ws, imgs, lms = [], [], []
        for i in indices:
            s = self.sample(int(i))
            ws.append(s.latent)
            imgs.append(s.image.astype(np.float64).transpose(1, 2, 0))
            lms.append(s.landmarks)
        return np.stack(ws), np.stack(imgs), np.stack(lms)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
