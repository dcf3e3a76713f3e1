"""EM registration driver and a point-to-point ICP baseline."""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .assoc import AssocConfig, associate_adaptive, responsibilities_dense
from .geom import RigidTransform, rotation_angle
from .gmmtree import GmmTree, Mixture, ModelConfig, build_tree, fit_flat_mixture
from .mle import DegenerateGeometryError, VirtualPointSet, criterion, solve_mstep

MAX_DEGENERATE_STEPS = 3


@dataclass(frozen=True)
class Variant:
    """``adaptive`` / ``gmmtree`` take a tree depth, ``flat`` a component count."""

    kind: str
    size: int = 3

    KINDS = ("adaptive", "gmmtree", "flat", "icp")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown variant {self.kind!r}")
        if self.size < 1:
            raise ValueError("variant size must be >= 1")

    @property
    def name(self) -> str:
        return {
            "adaptive": f"Adaptive L{self.size}",
            "gmmtree": f"GMM-Tree L{self.size}",
            "flat": f"GMM J={self.size}",
            "icp": "ICP",
        }[self.kind]

    @classmethod
    def parse(cls, text: str) -> Variant:
        """Accepts ``adaptive:3``, ``gmmtree:2``, ``flat:512``, ``icp`` and the display names."""
        t = text.strip().lower().replace(" ", "")
        m = re.fullmatch(r"(adaptive|gmmtree|gmm-tree|flat|gmm)[:l=j]*(\d+)", t)
        if m:
            kind = {"gmm-tree": "gmmtree", "gmm": "flat"}.get(m.group(1), m.group(1))
            return cls(kind, int(m.group(2)))
        if t in ("icp", "icp-pt2pt"):
            return cls("icp", 1)
        raise ValueError(f"cannot parse variant {text!r}")


@dataclass(frozen=True)
class RegistrationConfig:
    variant: Variant = Variant("adaptive", 3)
    lambda_c: float = 0.01
    max_em_iterations: int = 50
    rotation_tol: float = 1e-5
    translation_tol: float = 1e-5
    initial_transform: RigidTransform = field(default_factory=RigidTransform.identity)
    model_config: ModelConfig = ModelConfig()
    deterministic: bool = True
    mstep_iterations: int = 10
    workers: int = 1
    anchor: str = "self"

    def __post_init__(self):
        if self.anchor not in ("model", "self"):
            raise ValueError("anchor must be 'model' or 'self'")
        if self.rotation_tol <= 0 or self.translation_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_em_iterations < 1:
            raise ValueError("max_em_iterations must be >= 1")


@dataclass
class RegistrationResult:
    """``transform`` maps source points into the target frame."""

    transform: RigidTransform
    iterations: int = 0
    converged: bool = False
    criterion_trace: list = field(default_factory=list)
    criterion_before: list = field(default_factory=list)
    model_build_seconds: float = 0.0
    em_seconds: float = 0.0
    eval_counts: list = field(default_factory=list)
    degenerate_steps: int = 0
    status: str = ""

    @property
    def total_seconds(self) -> float:
        return self.model_build_seconds + self.em_seconds


def _points(cloud) -> np.ndarray:
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("expected a non-empty (N, 3) cloud")
    if not np.all(np.isfinite(pts)):
        raise ValueError("cloud has non-finite coordinates")
    return pts


def _diag(pts: np.ndarray) -> float:
    d = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    return d if d > 0 else 1.0


def build_model(target, config: RegistrationConfig):
    """Model of the target cloud for the configured variant."""
    pts = _points(target)
    v = config.variant
    if v.kind in ("adaptive", "gmmtree"):
        return build_tree(pts, replace(config.model_config, max_level=v.size))
    if v.kind == "flat":
        mix, _ = fit_flat_mixture(pts, v.size, config.model_config)
        return mix
    raise ValueError("ICP has no model; use register_icp_pt2pt")


def _converged(delta: RigidTransform, config: RegistrationConfig, diag: float) -> bool:
    return (rotation_angle(delta.rotation) < config.rotation_tol
            and float(np.linalg.norm(delta.translation)) < config.translation_tol * diag)


def make_e_step(model, config: RegistrationConfig, points: np.ndarray):
    """``t -> MomentSet`` for ``points`` under the variant's association rule."""
    kind = config.variant.kind
    if kind in ("adaptive", "gmmtree"):
        if not isinstance(model, GmmTree):
            raise TypeError("tree variants need a GmmTree model")
        assoc_cfg = AssocConfig(
            lambda_c=config.lambda_c if kind == "adaptive" else 0.0,
            max_level=min(config.variant.size, model.max_level),
            deterministic=config.deterministic,
            workers=config.workers,
        )
        return lambda t: associate_adaptive(points, model, t, assoc_cfg)
    return lambda t: responsibilities_dense(points, model, t)


def self_anchors(e_step, model) -> np.ndarray:
    """Per-component centroid of the target's own points under the association rule.

    Components the target never reaches keep their model mean.
    """
    mix = model.mixture if isinstance(model, GmmTree) else model
    m = e_step(None)
    out = mix.means.copy()
    hit = m.m0 > 0
    out[hit] = m.m1[hit] / m.m0[hit, None]
    return out


def register(target, source, config: RegistrationConfig = RegistrationConfig(), model=None) -> RegistrationResult:
    """Align ``source`` to ``target`` by EM over a mixture model of ``target``.

    ``model`` may be a prebuilt tree or mixture matching the variant (then the
    build time is reported as zero).
    """
    if config.variant.kind == "icp":
        return register_icp_pt2pt(target, source, config)
    tgt = _points(target)
    src = _points(source)
    diag = _diag(tgt)

    t0 = time.perf_counter()
    if model is None:
        model = build_model(tgt, config)
    build_s = time.perf_counter() - t0

    if config.variant.kind == "flat" and not isinstance(model, Mixture):
        model = Mixture.from_components(model)
    e_step = make_e_step(model, config, src)
    result = RegistrationResult(config.initial_transform, model_build_seconds=build_s)
    t = config.initial_transform
    degenerate = 0
    t1 = time.perf_counter()
    anchors = None
    if config.anchor == "self":
        anchors = self_anchors(make_e_step(model, config, tgt), model)
    for _ in range(config.max_em_iterations):
        moments = e_step(t)
        result.eval_counts.append(moments.evaluations)
        vps = VirtualPointSet.from_moments(moments, model, anchors)
        result.iterations += 1
        try:
            sol = solve_mstep(vps, max_iterations=config.mstep_iterations)
        except DegenerateGeometryError as exc:
            degenerate += 1
            result.degenerate_steps += 1
            value = criterion(vps)
            result.criterion_before.append(value)
            result.criterion_trace.append(value)
            if degenerate >= MAX_DEGENERATE_STEPS:
                result.status = f"degenerate geometry: {exc}"
                break
            continue
        degenerate = 0
        result.criterion_before.append(sol.criterion_before)
        result.criterion_trace.append(sol.criterion_after)
        t = sol.delta.compose(t)
        if _converged(sol.delta, config, diag):
            result.converged = True
            break
    result.em_seconds = time.perf_counter() - t1
    result.transform = t
    if not result.status:
        result.status = "converged" if result.converged else "max iterations"
    return result


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform taking ``src`` rows onto ``dst`` rows."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cd - r @ cs)


def register_icp_pt2pt(target, source, config: RegistrationConfig = RegistrationConfig()) -> RegistrationResult:
    """Classic ICP: nearest neighbours from a k-d tree, closed-form SVD fit, all pairs kept."""
    tgt = _points(target)
    src = _points(source)
    diag = _diag(tgt)
    t0 = time.perf_counter()
    index = cKDTree(tgt)
    build_s = time.perf_counter() - t0
    result = RegistrationResult(config.initial_transform, model_build_seconds=build_s)
    t = config.initial_transform
    t1 = time.perf_counter()
    for _ in range(config.max_em_iterations):
        moved = t.apply(src)
        dist, idx = index.query(moved)
        result.iterations += 1
        result.eval_counts.append(0)
        before = float(np.mean(dist**2))
        delta = kabsch(moved, tgt[idx])
        after = float(np.mean(((delta.apply(moved)) - tgt[idx]) ** 2))
        result.criterion_before.append(before)
        result.criterion_trace.append(after)
        t = delta.compose(t)
        if _converged(delta, config, diag):
            result.converged = True
            break
    result.em_seconds = time.perf_counter() - t1
    result.transform = t
    result.status = "converged" if result.converged else "max iterations"
    return result
