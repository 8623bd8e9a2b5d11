"""Parametric face model: affine geometry/expression/reflectance models.

The model is a point cloud; geometry is ``mean + shape_basis @ a +
expression_basis @ d``, per-vertex color is ``mean_color + reflectance_basis
@ b`` smoothly clamped into [0, 1].  The semantic parameter vector packs
(shape, reflectance, expression, illumination, rotation, translation) into a
single flat vector of length ``config.packed_length``.

``build_toy_model`` constructs a deterministic procedural head (an ellipsoid
point cloud with smooth low-frequency orthonormal basis fields) that stands
in for a scan-derived model at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GROUPS = ("shape", "reflectance", "expression", "illumination",
          "rotation", "translation")


class ParameterError(ValueError):
    """Raised for coefficient vectors that do not match the model config."""


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the parametric model.

    Defaults are the toy configuration; ``paper_scale`` gives the full-size
    dimensions used for packing checks only.
    """

    dim_shape: int = 8
    dim_reflectance: int = 8
    dim_expression: int = 6
    dim_illumination: int = 27
    vertex_count: int = 642
    landmark_count: int = 16

    def __post_init__(self):
        for name in ("dim_shape", "dim_reflectance", "dim_expression"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.dim_illumination != 27:
            raise ParameterError(
                "dim_illumination must be 27 (three bands of spherical "
                "harmonics per color channel)"
            )
        if not (1 <= self.landmark_count <= self.vertex_count):
            raise ParameterError("landmark_count must be in [1, vertex_count]")

    @property
    def packed_length(self) -> int:
        return (self.dim_shape + self.dim_reflectance + self.dim_expression
                + self.dim_illumination + 3 + 3)

    @property
    def group_dims(self) -> dict[str, int]:
        return {
            "shape": self.dim_shape,
            "reflectance": self.dim_reflectance,
            "expression": self.dim_expression,
            "illumination": self.dim_illumination,
            "rotation": 3,
            "translation": 3,
        }

    @property
    def group_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name in GROUPS:
            n = self.group_dims[name]
            out[name] = slice(start, start + n)
            start += n
        return out

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        return cls(dim_shape=80, dim_reflectance=80, dim_expression=64,
                   vertex_count=53000, landmark_count=66)


@dataclass
class RigParams:
    """Semantic control vector: packing order shape, reflectance, expression,
    illumination, rotation (yaw/pitch/roll, radians), translation."""

    shape: np.ndarray
    reflectance: np.ndarray
    expression: np.ndarray
    illumination: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def copy(self) -> "RigParams":
        return RigParams(*(np.array(getattr(self, g), copy=True) for g in GROUPS))

    @classmethod
    def zeros(cls, config: ModelConfig) -> "RigParams":
        return cls(*(np.zeros(config.group_dims[g]) for g in GROUPS))


def pack(p: RigParams, config: ModelConfig) -> np.ndarray:
    """Flatten a RigParams into the canonical f-vector."""
    parts = []
    for name in GROUPS:
        v = np.asarray(getattr(p, name), dtype=np.float64).ravel()
        want = config.group_dims[name]
        if v.size != want:
            raise ParameterError(f"{name} has length {v.size}, expected {want}")
        parts.append(v)
    return np.concatenate(parts)


def unpack(vec: np.ndarray, config: ModelConfig) -> RigParams:
    vec = np.asarray(vec, dtype=np.float64).ravel()
    if vec.size != config.packed_length:
        raise ParameterError(
            f"packed vector has length {vec.size}, expected {config.packed_length}"
        )
    sl = config.group_slices
    return RigParams(*(vec[sl[name]].copy() for name in GROUPS))


@dataclass
class MorphableModel:
    """Point-cloud face model with orthonormal displacement/color bases."""

    config: ModelConfig
    mean_positions: np.ndarray      # (V, 3)
    shape_basis: np.ndarray         # (3V, dim_shape), orthonormal columns
    expression_basis: np.ndarray    # (3V, dim_expression)
    mean_color: np.ndarray          # (V, 3) in [0, 1]
    reflectance_basis: np.ndarray   # (3V, dim_reflectance)
    mean_normals: np.ndarray        # (V, 3) unit
    landmark_indices: np.ndarray    # (landmark_count,) distinct ints
    prior_stddev: dict = field(default_factory=dict)  # per-group sigma arrays

    def tensors(self) -> dict[str, np.ndarray]:
        """Named-array view used by the checkpoint writer."""
        return {
            "mean_positions": self.mean_positions,
            "shape_basis": self.shape_basis,
            "expression_basis": self.expression_basis,
            "mean_color": self.mean_color,
            "reflectance_basis": self.reflectance_basis,
            "mean_normals": self.mean_normals,
            "landmark_indices": self.landmark_indices.astype(np.float64),
            "sigma_shape": self.prior_stddev["shape"],
            "sigma_reflectance": self.prior_stddev["reflectance"],
            "sigma_expression": self.prior_stddev["expression"],
        }

    @classmethod
    def from_tensors(cls, config: ModelConfig, t: dict) -> "MorphableModel":
        return cls(
            config=config,
            mean_positions=t["mean_positions"],
            shape_basis=t["shape_basis"],
            expression_basis=t["expression_basis"],
            mean_color=t["mean_color"],
            reflectance_basis=t["reflectance_basis"],
            mean_normals=t["mean_normals"],
            landmark_indices=t["landmark_indices"].astype(np.int64),
            prior_stddev={
                "shape": t["sigma_shape"],
                "reflectance": t["sigma_reflectance"],
                "expression": t["sigma_expression"],
            },
        )


def _check_coeff(name: str, c, want: int):
    n = c.value.shape[-1] if isinstance(c, Tensor) else np.asarray(c).shape[-1]
    if n != want:
        raise ParameterError(f"{name} has length {n}, expected {want}")


def assemble_geometry(model: MorphableModel, alpha, delta):
    """Vertex positions mean + E_s a + E_e d; shape (..., V, 3).

    Accepts plain arrays or tape Tensors (differentiable in both
    coefficients); trailing dims are (dim_shape,) / (dim_expression,) with an
    optional shared batch dim.
    """
    cfg = model.config
    _check_coeff("shape coefficients", alpha, cfg.dim_shape)
    _check_coeff("expression coefficients", delta, cfg.dim_expression)
    V = cfg.vertex_count
    if isinstance(alpha, Tensor) or isinstance(delta, Tensor):
        tape = (alpha if isinstance(alpha, Tensor) else delta).tape
        if not isinstance(alpha, Tensor):
            alpha = tape.constant(alpha)
        if not isinstance(delta, Tensor):
            delta = tape.constant(delta)
        flat = ad.affine(model.shape_basis, alpha, np.zeros(3 * V)) + \
            ad.affine(model.expression_basis, delta, np.zeros(3 * V))
        return ad.reshape(flat, (*alpha.shape[:-1], V, 3)) + model.mean_positions
    alpha = np.asarray(alpha, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    flat = alpha @ model.shape_basis.T + delta @ model.expression_basis.T
    return flat.reshape(*alpha.shape[:-1], V, 3) + model.mean_positions


def assemble_reflectance(model: MorphableModel, beta):
    """Per-vertex albedo mean_color + E_r b, smoothly clamped into [0, 1]."""
    cfg = model.config
    _check_coeff("reflectance coefficients", beta, cfg.dim_reflectance)
    V = cfg.vertex_count
    if isinstance(beta, Tensor):
        flat = ad.affine(model.reflectance_basis, beta, np.zeros(3 * V))
        raw = ad.reshape(flat, (*beta.shape[:-1], V, 3)) + model.mean_color
        return ad.softclip(raw, 0.0, 1.0, margin=0.1)
    beta = np.asarray(beta, dtype=np.float64)
    flat = beta @ model.reflectance_basis.T
    raw = flat.reshape(*beta.shape[:-1], V, 3) + model.mean_color
    return ad.softclip_np(raw, 0.0, 1.0, margin=0.1)


# per-group weights for the statistical prior; expression is deliberately
# softer so that training can leave the neutral face more freely
REG_WEIGHTS = {"shape": 1.0, "reflectance": 1.0, "expression": 0.5}


def regularize(packed, config: ModelConfig, prior_stddev: dict,
               weights: dict = REG_WEIGHTS):
    """Sum of w_g * (c_i / sigma_i)^2 over shape/reflectance/expression.

    Pose and illumination are left unregularized.  ``packed`` is a packed
    vector (optionally batched); returns a scalar (summed over the batch).
    """
    sl = config.group_slices
    total = None
    for g in ("shape", "reflectance", "expression"):
        sig = prior_stddev[g]
        w = weights[g]
        if isinstance(packed, Tensor):
            part = packed[(Ellipsis, sl[g])]
            term = ad.sum_of_squares(part * (np.sqrt(w) / sig))
        else:
            c = np.asarray(packed, dtype=np.float64)[..., sl[g]]
            term = w * float(np.sum((c / sig) ** 2))
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# Toy model construction


def _fibonacci_sphere(n: int) -> np.ndarray:
    """Quasi-uniform points on the unit sphere (deterministic)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _poly_features(u: np.ndarray) -> np.ndarray:
    """Nine low-order polynomial fields on unit directions, for smooth bases."""
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    return np.stack([
        np.ones_like(x), x, y, z, x * y, y * z, x * z,
        x * x - y * y, 3.0 * z * z - 1.0,
    ], axis=1)


def _smooth_fields(rng: np.random.Generator, u: np.ndarray, count: int) -> np.ndarray:
    """(3V, count) matrix of random smooth per-vertex 3-vector fields."""
    feats = _poly_features(u)                      # (V, 9)
    coeffs = rng.normal(size=(count, 3, feats.shape[1]))
    cols = np.einsum("vf,kcf->vck", feats, coeffs)  # (V, 3, count)
    return cols.reshape(-1, count)


def _farthest_points(candidates: np.ndarray, positions: np.ndarray,
                     count: int, start: int) -> np.ndarray:
    chosen = [start]
    dist = np.linalg.norm(positions[candidates] - positions[start], axis=1)
    for _ in range(count - 1):
        nxt = candidates[int(np.argmax(dist))]
        chosen.append(int(nxt))
        dist = np.minimum(dist, np.linalg.norm(
            positions[candidates] - positions[nxt], axis=1))
    return np.asarray(chosen, dtype=np.int64)


ELLIPSOID_AXES = np.array([0.52, 0.68, 0.55])


def build_toy_model(seed: int, config: ModelConfig | None = None) -> MorphableModel:
    """Deterministic procedural head standing in for a scan-derived model.

    Base geometry is a Fibonacci-sampled unit sphere stretched into an
    ellipsoid; the shape/expression (jointly) and reflectance bases are
    random smooth low-frequency fields orthonormalized column-wise; landmarks
    are farthest-point spread over camera-facing vertices.
    """
    if config is None:
        config = ModelConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3D_FACE]))
    V = config.vertex_count

    unit = _fibonacci_sphere(V)
    positions = unit * ELLIPSOID_AXES
    normals = unit / ELLIPSOID_AXES  # gradient of the implicit ellipsoid
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    # geometry bases: one joint orthonormalization keeps shape and expression
    # columns mutually orthogonal
    n_geo = config.dim_shape + config.dim_expression
    geo = _smooth_fields(rng, unit, n_geo)
    q_geo, _ = np.linalg.qr(geo)
    shape_basis = np.ascontiguousarray(q_geo[:, :config.dim_shape])
    expression_basis = np.ascontiguousarray(q_geo[:, config.dim_shape:n_geo])

    refl = _smooth_fields(rng, unit, config.dim_reflectance)
    reflectance_basis, _ = np.linalg.qr(refl)

    # skin-like mean color, kept inside the identity region of the clamp
    tone = np.array([0.72, 0.55, 0.45])
    variation = 0.08 * np.stack([
        unit[:, 1], unit[:, 2] * unit[:, 1], -unit[:, 0] * unit[:, 0],
    ], axis=1)
    mean_color = np.clip(tone + variation, 0.15, 0.85)

    front = np.flatnonzero(normals[:, 2] < -0.35)
    if len(front) < config.landmark_count:
        raise ParameterError(
            f"vertex_count {V} leaves only {len(front)} camera-facing "
            f"vertices, fewer than landmark_count {config.landmark_count}"
        )
    start = int(front[np.argmin(normals[front, 2])])
    landmark_indices = _farthest_points(front, positions,
                                        config.landmark_count, start)

    prior = {g: np.ones(config.group_dims[g])
             for g in ("shape", "reflectance", "expression")}
    return MorphableModel(
        config=config,
        mean_positions=positions,
        shape_basis=shape_basis,
        expression_basis=expression_basis,
        mean_color=mean_color,
        reflectance_basis=reflectance_basis,
        mean_normals=normals,
        landmark_indices=landmark_indices,
        prior_stddev=prior,
    )
