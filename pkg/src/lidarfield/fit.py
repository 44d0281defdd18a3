"""Fitting a voxel field to posed scans with analytic reverse-mode gradients."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy.special import expit, ndtr

from .beam import BeamProfile, subray_directions
from .field import VoxelGridField
from .render import RangePass, RenderConfig, beam_range_features_batch, ray_interval, render_rays
from .types import LidarScan

log = logging.getLogger(__name__)

_P_EPS = 1e-7


class DivergenceError(RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


# ------------------------------------------------------------------------------------ schedules

def anneal_delta(k, k_max, delta_min: float, delta_max: float) -> float:
    """Geometric decay of the target spread from ``delta_max`` at k=0 to ``delta_min`` at k=k_max."""
    if not 0 < delta_min < delta_max:
        raise ValueError("need 0 < delta_min < delta_max")
    if k_max <= 0 or not 0 <= k <= k_max:
        raise ValueError("need 0 <= k <= k_max and k_max > 0")
    return delta_max * (delta_min / delta_max) ** (k / k_max)


def learning_rate(k, k_max, lr_start, lr_end) -> float:
    if k_max <= 1:
        return lr_start
    return lr_start + (lr_end - lr_start) * k / (k_max - 1)


def gaussian_target_weights(target, delta, boundaries) -> np.ndarray:
    """Mass of N(target, delta²) inside every segment; broadcasts over leading axes."""
    d = np.asarray(delta, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("delta must be positive")
    b = np.asarray(boundaries, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)[..., None]
    cdf = ndtr((b - t) / d[..., None] if d.ndim else (b - t) / d)
    return np.diff(cdf, axis=-1)


# ------------------------------------------------------------------------------------ losses
# each returns (value, gradient w.r.t. the first argument)

def loss_range_coarse(weights, target_weights, near_mask):
    """Per ray 1 − Σ_near w ŵ + Σ_far w², averaged over rays."""
    w = np.atleast_2d(weights)
    wh = np.atleast_2d(target_weights)
    near = np.atleast_2d(near_mask)
    per_ray = 1.0 - np.sum(np.where(near, w * wh, 0.0), axis=1) + np.sum(np.where(near, 0.0, w * w), axis=1)
    n = len(w)
    grad = np.where(near, -wh, 2.0 * w) / n
    return float(per_ray.mean()), grad.reshape(np.shape(weights))


def loss_refine(pred, target):
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_batch(pred, target)
    return float(np.mean(np.abs(target - pred))), np.sign(pred - target) / len(pred)


def loss_intensity(pred, target):
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_batch(pred, target)
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / len(pred)


def loss_bce(prob, labels):
    p = np.asarray(prob, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _check_batch(p, y)
    pc = np.clip(p, _P_EPS, 1.0 - _P_EPS)
    val = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    inside = (p > _P_EPS) & (p < 1.0 - _P_EPS)
    grad = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) / len(p)
    return float(val), grad


def lovasz_gradient(sorted_labels):
    """Jaccard-extension increments for labels sorted by descending error."""
    gt = np.asarray(sorted_labels, dtype=np.float64)
    gts = gt.sum()
    inter = gts - np.cumsum(gt)
    union = gts + np.cumsum(1.0 - gt)
    jac = 1.0 - inter / union
    jac[1:] = jac[1:] - jac[:-1]
    return jac


def loss_lovasz(scores, labels):
    """Binary Lovász hinge on real-valued scores (logits), labels in {0, 1}."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _check_batch(s, y)
    signs = 2.0 * y - 1.0
    errors = 1.0 - s * signs
    order = np.argsort(-errors, kind="stable")
    g = lovasz_gradient(y[order])
    e_sorted = errors[order]
    val = float(np.dot(np.maximum(e_sorted, 0.0), g))
    grad = np.zeros_like(s)
    grad[order] = g * (e_sorted > 0) * -signs[order]
    return val, grad


def loss_mask(prob, labels):
    """BCE on probabilities plus the Lovász hinge on their logits."""
    p = np.asarray(prob, dtype=np.float64)
    v1, g1 = loss_bce(p, labels)
    pc = np.clip(p, _P_EPS, 1.0 - _P_EPS)
    logits = np.log(pc) - np.log1p(-pc)
    v2, g2 = loss_lovasz(logits, labels)
    inside = (p > _P_EPS) & (p < 1.0 - _P_EPS)
    g2 = np.where(inside, g2 / (pc * (1.0 - pc)), 0.0)
    return v1 + v2, g1 + g2


def _check_batch(a, b):
    if a.shape != b.shape:
        raise ValueError("prediction and target shapes differ")
    if a.size == 0:
        raise ValueError("empty batch")


# ------------------------------------------------------------------------------------ classifier

@dataclass
class TwoReturnClassifier:
    """p_s from the subray range spread. ``mode='logistic'`` uses standardized features and a linear
    logit; ``mode='threshold'`` returns 1 when the std exceeds ``std_threshold``."""

    mode: str = "threshold"
    weights: tuple = (0.0, 0.0)
    bias: float = 0.0
    mean: tuple = (0.0, 0.0)
    scale: tuple = (1.0, 1.0)
    std_threshold: float = 0.3

    requires_features = True

    def logits(self, features) -> np.ndarray:
        f = (np.asarray(features, dtype=np.float64).reshape(-1, 2) - np.asarray(self.mean)) / np.asarray(self.scale)
        return f @ np.asarray(self.weights) + self.bias

    def predict_proba(self, features) -> np.ndarray:
        if self.mode == "threshold":
            return (np.asarray(features, dtype=np.float64).reshape(-1, 2)[:, 0] > self.std_threshold).astype(float)
        return expit(self.logits(features))

    def decide(self, features, beam_ids=None) -> np.ndarray:
        return self.predict_proba(features)

    def loss(self, features, labels):
        """BCE + Lovász value and gradient w.r.t. (weights, bias) in logistic mode."""
        f = (np.asarray(features, dtype=np.float64).reshape(-1, 2) - np.asarray(self.mean)) / np.asarray(self.scale)
        p = expit(f @ np.asarray(self.weights) + self.bias)
        val, g_p = loss_mask(p, labels)
        g_logit = g_p * p * (1.0 - p)
        return val, np.concatenate([f.T @ g_logit, [g_logit.sum()]])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        d["mean"] = list(self.mean)
        d["scale"] = list(self.scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TwoReturnClassifier":
        return cls(d.get("mode", "threshold"), tuple(d.get("weights", (0.0, 0.0))), float(d.get("bias", 0.0)),
                   tuple(d.get("mean", (0.0, 0.0))), tuple(d.get("scale", (1.0, 1.0))),
                   float(d.get("std_threshold", 0.3)))


def fit_two_return_classifier(features, labels, iterations: int = 500, lr: float = 0.5) -> TwoReturnClassifier:
    """Logistic regression trained by gradient descent on BCE + Lovász hinge."""
    f = np.asarray(features, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise ValueError("classifier needs at least one positive and one negative label")
    mean = f.mean(axis=0)
    scale = np.where(f.std(axis=0) > 1e-12, f.std(axis=0), 1.0)
    clf = TwoReturnClassifier("logistic", (0.0, 0.0), 0.0, tuple(mean), tuple(scale))
    theta = np.zeros(3)
    for _ in range(iterations):
        _, g = clf.loss(f, y)
        theta -= lr * g
        clf.weights, clf.bias = (float(theta[0]), float(theta[1])), float(theta[2])
    return clf


# ------------------------------------------------------------------------------------ training data

@dataclass
class TrainConfig:
    iterations: int = 4000
    lr_start: float = 0.005
    lr_end: float = 0.0005
    grad_clip: float = 1.0
    lambda_e: float = 50.0
    lambda_d: float = 0.15
    lambda_s: float = 0.15
    delta_min: float = 0.25
    delta_max: float = 1.2
    batch_size: int = 8192
    seed: int = 0
    subrays: int = 37
    gamma0: float = 2e-3
    two_return_supervision: bool = True
    chunk: int = 256
    render: RenderConfig = dc_field(default_factory=RenderConfig)

    def __post_init__(self):
        if isinstance(self.render, dict):
            self.render = RenderConfig.from_dict(self.render)
        for name in ("lr_start", "lr_end", "grad_clip", "batch_size", "chunk", "gamma0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda_e", "lambda_d", "lambda_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 0 < self.delta_min < self.delta_max:
            raise ValueError("need 0 < delta_min < delta_max")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["render"] = self.render.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "render" in d:
            d["render"] = RenderConfig.from_dict(d["render"])
        for k in ("iterations", "batch_size", "seed", "subrays", "chunk"):
            if k in d:
                d[k] = int(d[k])
        return cls(**d)


@dataclass
class TrainingRays:
    """All beams from a set of scans, flattened, as world-frame central rays plus targets."""

    origins: np.ndarray
    dirs: np.ndarray
    drop: np.ndarray
    first_range: np.ndarray
    first_intensity: np.ndarray
    two_return: np.ndarray
    second_range: np.ndarray
    second_intensity: np.ndarray

    def __len__(self):
        return len(self.origins)

    def subset(self, idx) -> "TrainingRays":
        return TrainingRays(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @classmethod
    def from_scans(cls, scans: list[LidarScan]) -> "TrainingRays":
        if not scans:
            raise ValueError("need at least one scan")
        parts = {f: [] for f in cls.__dataclass_fields__}
        for s in scans:
            d = s.world_directions().reshape(-1, 3)
            parts["dirs"].append(d)
            parts["origins"].append(np.broadcast_to(s.pose.translation, d.shape))
            for k in ("drop", "first_range", "first_intensity", "two_return", "second_range", "second_intensity"):
                parts[k].append(getattr(s, k).reshape(-1))
        return cls(*(np.ascontiguousarray(np.concatenate(parts[f])) for f in cls.__dataclass_fields__))


# ------------------------------------------------------------------------------------ loss + gradient

def _chunks(n, size):
    return [(s, min(s + size, n)) for s in range(0, n, size)]


class _ChunkedPass:
    """A RangePass evaluated on fixed-size chunks so results do not depend on the worker count."""

    def __init__(self, field, o, d, near, far, cfg, truncate, chunk, pool):
        self.spans = _chunks(len(o), chunk)

        def run(span):
            s, e = span
            tr = None if truncate is None else truncate[s:e]
            return RangePass(field, o[s:e], d[s:e], near[s:e], far[s:e], cfg, tr, need_cache=True)

        self.parts = list(pool.map(run, self.spans)) if pool else [run(sp) for sp in self.spans]

    def cat(self, name):
        return np.concatenate([getattr(p, name) for p in self.parts]) if self.parts else np.zeros(0)

    def coarse_attr(self, name):
        return np.concatenate([getattr(p.coarse, name) for p in self.parts])

    def backprop(self, field, g_range, g_refl, g_drop, g_coarse_w, pool):
        def run(i):
            s, e = self.spans[i]
            return self.parts[i].backprop(field, g_range[s:e], g_refl[s:e], g_drop[s:e], g_coarse_w[s:e])

        grads = list(pool.map(run, range(len(self.parts)))) if pool else [run(i) for i in range(len(self.parts))]
        total = np.zeros_like(field.params)
        for g in grads:  # fixed order
            total += g
        return total


@dataclass
class LossParts:
    total: float
    range_coarse: float = 0.0
    range_fine: float = 0.0
    intensity: float = 0.0
    drop: float = 0.0
    two_return: float = 0.0
    n_range: int = 0
    n_drop: int = 0


def _intensity_target(cfg: RenderConfig, e, r):
    if not cfg.intensity_falloff:
        return e
    return np.clip(e * (r / cfg.ref_range) ** 2, 0.0, 1.0)


LOSS_TERMS = ("range_coarse", "range_fine", "intensity", "drop")


def total_loss(field: VoxelGridField, batch: TrainingRays, cfg: TrainConfig, k: int = 0, pool=None,
               classifier: Optional[TwoReturnClassifier] = None, features=None, terms=LOSS_TERMS):
    """Weighted loss over a batch and its exact gradient with respect to ``field.params``.

    ``terms`` restricts value and gradient to a subset of :data:`LOSS_TERMS`. The per-term values
    in the returned :class:`LossParts` are always computed in full. ``features``/``classifier``
    add the two-return mask term; its features are treated as constants, so it contributes to
    the value but not to the field gradient.
    """
    use = {t: float(t in terms) for t in LOSS_TERMS}
    rc = cfg.render
    delta = anneal_delta(k, max(cfg.iterations, 1), cfg.delta_min, cfg.delta_max) if cfg.iterations else cfg.delta_max
    o, d = batch.origins, batch.dirs
    near, far, hit = ray_interval(field, o, d, rc.min_range, rc.max_range)
    idx = np.flatnonzero(hit)
    grad = np.zeros_like(field.params)
    parts = LossParts(0.0)
    if len(idx) == 0:
        return 0.0, grad, parts
    o, d, near, far = o[idx], d[idx], near[idx], far[idx]
    sub = batch.subset(idx)
    n = len(idx)

    def in_span(r):
        return np.isfinite(r) & (r > near) & (r < far)

    central = _ChunkedPass(field, o, d, near, far, rc, None, cfg.chunk, pool)

    # range-supervised rays: (pass, row mask, target range, target intensity)
    supervised = []
    single = ~sub.drop & in_span(sub.first_range)
    if cfg.two_return_supervision:
        single &= ~sub.two_return
    supervised.append((central, single, sub.first_range, sub.first_intensity))
    extra_passes = []
    if cfg.two_return_supervision:
        dual = np.flatnonzero(~sub.drop & sub.two_return & in_span(sub.first_range))
        if len(dual):
            profile = BeamProfile.preset(cfg.gamma0, cfg.subrays)
            M = profile.subray_count
            sd = subray_directions(d[dual], profile)
            sd[:, 0] = d[dual]
            est = render_rays(field, np.repeat(o[dual], M, axis=0), sd.reshape(-1, 3), rc)["range"].reshape(-1, M)
            lo_i = np.argmin(np.where(np.isfinite(est), est, np.inf), axis=1)
            hi_i = np.argmax(np.where(np.isfinite(est), est, -np.inf), axis=1)
            rows = np.arange(len(dual))
            d_lo, d_hi = sd[rows, lo_i], sd[rows, hi_i]
            p1 = _ChunkedPass(field, o[dual], d_lo, near[dual], far[dual], rc, None, cfg.chunk, pool)
            supervised.append((p1, np.ones(len(dual), bool), sub.first_range[dual], sub.first_intensity[dual]))
            extra_passes.append(p1)
            ok2 = in_span(sub.second_range)[dual]
            if ok2.any():
                dd = dual[ok2]
                p2 = _ChunkedPass(field, o[dd], d_hi[ok2], near[dd], far[dd], rc,
                                  sub.first_range[dd] + rc.buffer, cfg.chunk, pool)
                supervised.append((p2, np.ones(len(dd), bool), sub.second_range[dd], sub.second_intensity[dd]))
                extra_passes.append(p2)

    n_range = int(sum(m.sum() for _, m, _, _ in supervised))
    upstream = {}
    lc_total = lf_total = le_total = 0.0
    for ps, mask, tr, te in supervised:
        m = len(mask)
        g_c = np.zeros((m, rc.coarse_samples))
        g_r = np.zeros(m)
        g_e = np.zeros(m)
        rows = np.flatnonzero(mask)
        if len(rows) and n_range:
            bnd = ps.coarse_attr("boundaries")[rows]
            mids = ps.coarse_attr("mids")[rows]
            w = ps.coarse_attr("w")[rows]
            wh = gaussian_target_weights(tr[rows], delta, bnd)
            near_m = np.abs(mids - tr[rows][:, None]) <= rc.window
            lc, gc = loss_range_coarse(w, wh, near_m)
            lc_total += lc * len(rows) / n_range
            g_c[rows] = use["range_coarse"] * gc * len(rows) / n_range
            zf = ps.cat("range")[rows]
            ok = np.isfinite(zf)
            lf_total += float(np.sum(np.abs(tr[rows][ok] - zf[ok]))) / n_range
            g_r[rows] = use["range_fine"] * np.where(ok, np.sign(np.where(ok, zf, 0.0) - tr[rows]), 0.0) / n_range
            et = _intensity_target(rc, te[rows], tr[rows])
            e = ps.cat("reflectance")[rows]
            le_total += float(np.sum((e - et) ** 2)) / n_range
            g_e[rows] = use["intensity"] * cfg.lambda_e * 2.0 * (e - et) / n_range
        key = id(ps)
        prev = upstream.get(key)
        if prev is None:
            upstream[key] = [ps, g_r, g_e, np.zeros(m), g_c]
        else:
            prev[1] += g_r
            prev[2] += g_e
            prev[4] += g_c

    pd = central.cat("drop")
    ld, g_pd = loss_mask(pd, sub.drop.astype(float))
    upstream[id(central)][3] = use["drop"] * cfg.lambda_d * g_pd

    ls = 0.0
    if classifier is not None and features is not None and classifier.mode == "logistic":
        ls = classifier.loss(features, batch.two_return)[0]

    total = (use["range_coarse"] * lc_total + use["range_fine"] * lf_total + use["intensity"] * cfg.lambda_e * le_total
             + use["drop"] * cfg.lambda_d * ld + cfg.lambda_s * ls)
    for ps, g_r, g_e, g_d, g_c in upstream.values():
        grad += ps.backprop(field, g_r, g_e, g_d, g_c, pool)
    parts = LossParts(float(total), lc_total, lf_total, le_total, float(ld), float(ls), n_range, n)
    return float(total), grad, parts


# ------------------------------------------------------------------------------------ optimisation

class Adam:
    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grad, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        params -= lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_gradient(grad, limit):
    """Element-wise clamp of every parameter's gradient to [−limit, limit]."""
    return np.clip(grad, -limit, limit)


@dataclass
class FitResult:
    field: VoxelGridField
    loss_curve: list
    parts: list


def fit_field(scans, field: VoxelGridField, cfg: TrainConfig, threads: int = 1, progress_every: int = 0):
    """Fit ``field`` (a copy is returned) to the scans by Adam on the total loss."""
    data = scans if isinstance(scans, TrainingRays) else TrainingRays.from_scans(list(scans))
    if len(data) == 0:
        raise ValueError("no training rays")
    field = field.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(field.params.shape)
    curve, parts = [], []
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for k in range(cfg.iterations):
            idx = rng.integers(0, len(data), size=min(cfg.batch_size, len(data)))
            loss, grad, p = total_loss(field, data.subset(idx), cfg, k, pool)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(k, f"non-finite loss {loss}")
            grad = clip_gradient(grad, cfg.grad_clip)
            opt.step(field.params, grad, learning_rate(k, cfg.iterations, cfg.lr_start, cfg.lr_end))
            curve.append(loss)
            parts.append(p)
            if progress_every and (k % progress_every == 0 or k == cfg.iterations - 1):
                log.info("step %d loss %.5f (coarse %.4f fine %.4f int %.5f drop %.4f)", k, loss,
                         p.range_coarse, p.range_fine, p.intensity, p.drop)
    finally:
        if pool:
            pool.shutdown()
    return FitResult(field, curve, parts)


def two_return_training_features(field, data: TrainingRays, cfg: TrainConfig, max_beams: int = 4096, seed: int = 0):
    """Subray range-spread features and two-return labels for a sample of non-dropped beams."""
    rng = np.random.default_rng(seed)
    pool = np.flatnonzero(~data.drop)
    if len(pool) > max_beams:
        pool = np.sort(rng.choice(pool, max_beams, replace=False))
    profile = BeamProfile.preset(cfg.gamma0, cfg.subrays)
    M = profile.subray_count
    sd = subray_directions(data.dirs[pool], profile)
    est = render_rays(field, np.repeat(data.origins[pool], M, axis=0), sd.reshape(-1, 3), cfg.render)["range"]
    return beam_range_features_batch(est.reshape(-1, M)), data.two_return[pool]
