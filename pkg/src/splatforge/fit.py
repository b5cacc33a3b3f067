"""Per-scene splat optimization against rendered targets.

The loss is w1 * mean-L1 on RGB plus w2 * a per-pixel normal term
(cross-product norm plus w3 * the sign-resolved endpoint distance), averaged
over pixels whose target normal is non-background. Optimization is Adam-style
per parameter group, with scales in log space, opacity in logit space, and
quaternions/normals renormalized after every step.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .gaussians import Camera, Splats
from .rasterizer import RenderOptions, render, render_backward

_BLACK = (0.0, 0.0, 0.0)
_PARAM_FIELDS = ("centers", "scales", "quaternions", "opacities", "colors", "normals")


class FitDivergenceError(RuntimeError):
    """Optimization produced a non-finite loss; names the iteration and group."""


@dataclass(eq=False)
class TrainView:
    """One target: camera, RGB image, optional normal map (zero rows = background)."""

    camera: Camera
    target_rgb: np.ndarray
    target_normal: np.ndarray = None

    def __post_init__(self):
        self.target_rgb = np.ascontiguousarray(self.target_rgb, dtype=np.float64)
        shape = (self.camera.height, self.camera.width, 3)
        if self.target_rgb.shape != shape:
            raise ValueError(f"target_rgb must be {shape}, got {self.target_rgb.shape}")
        if self.target_rgb.min() < 0.0 or self.target_rgb.max() > 1.0:
            raise ValueError("target_rgb values must lie in [0, 1]")
        if self.target_normal is not None:
            self.target_normal = np.ascontiguousarray(self.target_normal, dtype=np.float64)
            if self.target_normal.shape != shape:
                raise ValueError(f"target_normal must be {shape}, got {self.target_normal.shape}")


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings; center_rate=None means 1.6e-4 * scene extent."""

    iterations: int = 500
    center_rate: float = None
    scale_rate: float = 5e-3          # applied in log space
    quat_rate: float = 1e-3
    opacity_rate: float = 5e-2        # applied in logit space
    color_rate: float = 2.5e-3
    normal_rate: float = 1e-3
    w1: float = 1.0
    w2: float = 10.0
    w3: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        rates = (self.scale_rate, self.quat_rate, self.opacity_rate,
                 self.color_rate, self.normal_rate)
        if self.center_rate is not None:
            rates = rates + (self.center_rate,)
        if any(r <= 0 for r in rates):
            raise ValueError("learning rates must be positive")


@dataclass(eq=False)
class LossResult:
    total: float
    rgb_term: float
    normal_term: float
    d_rgb: np.ndarray
    d_normal: np.ndarray              # None when the view has no normal target


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    total: float
    rgb_term: float
    normal_term: float


def loss(rendered_rgb: np.ndarray, rendered_normal, view: TrainView,
         w1: float, w2: float, w3: float) -> LossResult:
    """Scalar loss and exact per-pixel gradients w.r.t. the rendered planes.

    RGB: w1 * mean absolute error over all pixels and channels (L1 subgradient
    at zero is zero). Normals, averaged over valid target pixels: |n x n_hat|
    plus w3 * min(|n - n_hat|, |n + n_hat|), ties and the parallel
    configuration resolving to the minus branch and a zero gradient.
    """
    target = view.target_rgb
    if rendered_rgb.shape != target.shape:
        raise ValueError(f"rendered rgb is {rendered_rgb.shape}, target {target.shape}")
    diff = rendered_rgb - target
    rgb_term = float(np.abs(diff).mean())
    d_rgb = w1 * np.sign(diff) / diff.size

    normal_term = 0.0
    d_normal = None
    if view.target_normal is not None:
        if rendered_normal is None or rendered_normal.shape != target.shape:
            raise ValueError("rendered normal plane missing or mis-sized")
        n = view.target_normal
        valid = np.linalg.norm(n, axis=2) > 0.5
        d_normal = np.zeros_like(rendered_normal)
        count = int(valid.sum())
        if count:
            nh = rendered_normal[valid]
            nt = n[valid]
            cross = np.cross(nt, nh)
            cross_norm = np.linalg.norm(cross, axis=1)
            d_minus = np.linalg.norm(nt - nh, axis=1)
            d_plus = np.linalg.norm(nt + nh, axis=1)
            minus = d_minus <= d_plus
            normal_term = float((cross_norm + w3 * np.where(minus, d_minus, d_plus)).mean())

            grad = np.zeros_like(nh)
            ok = cross_norm > 1e-8
            grad[ok] = np.cross(cross[ok] / cross_norm[ok, None], nt[ok])
            m_ok = minus & (d_minus > 1e-12)
            grad[m_ok] += w3 * (nh[m_ok] - nt[m_ok]) / d_minus[m_ok, None]
            p_ok = ~minus & (d_plus > 1e-12)
            grad[p_ok] += w3 * (nh[p_ok] + nt[p_ok]) / d_plus[p_ok, None]
            d_normal[valid] = w2 * grad / count

    total = w1 * rgb_term + w2 * normal_term
    return LossResult(total, rgb_term, normal_term, d_rgb, d_normal)


def save_history_csv(history, path) -> None:
    """Loss history as CSV: iteration, total, rgb_term, normal_term."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total", "rgb_term", "normal_term"])
        for rec in history:
            writer.writerow([rec.iteration, repr(rec.total),
                             repr(rec.rgb_term), repr(rec.normal_term)])


def _evaluate(splats: Splats, view: TrainView, cfg: FitConfig,
              options: RenderOptions, want_grads: bool):
    """Loss on one view, optionally with raw-parameter gradients."""
    fb = render(splats, view.camera, "rgb", _BLACK, options)
    normal_plane = None
    if view.target_normal is not None:
        normal_plane = render(splats, view.camera, "normal", _BLACK, options).normal
    res = loss(fb.rgb, normal_plane, view, cfg.w1, cfg.w2, cfg.w3)
    if not want_grads:
        return res, None
    grads = render_backward(splats, view.camera, res.d_rgb, "rgb", _BLACK, options)
    total = {f: getattr(grads, "d_" + f) for f in _PARAM_FIELDS}
    if view.target_normal is not None:
        g_n = render_backward(splats, view.camera, res.d_normal, "normal", _BLACK, options)
        for f in _PARAM_FIELDS:
            total[f] = total[f] + getattr(g_n, "d_" + f)
    return res, total


def _renormed(v: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    ok = norm[:, 0] > 1e-12
    out = np.where(ok[:, None], v / np.maximum(norm, 1e-300), fallback)
    return out


def fit_scene(initial: Splats, views, cfg: FitConfig,
              options: RenderOptions = None) -> tuple:
    """Optimize splats against the views (cycled round-robin) on a black
    background; returns (fitted splats, per-iteration loss records)."""
    if not views:
        raise ValueError("fit needs at least one view")
    options = options or RenderOptions()
    n = len(initial)

    centers = initial.centers.copy()
    log_scales = np.log(initial.scales)
    quats = initial.quaternions.copy()
    clipped = np.clip(initial.opacities, 1e-6, 1.0 - 1e-6)
    logits = np.log(clipped / (1.0 - clipped))
    colors = np.clip(initial.colors, 0.0, 1.0)
    normals = initial.normals.copy()

    if cfg.center_rate is None:
        extent = float(np.linalg.norm(centers.max(axis=0) - centers.min(axis=0))) if n else 0.0
        center_rate = 1.6e-4 * (extent if extent > 0 else 1.0)
    else:
        center_rate = cfg.center_rate
    rates = {
        "centers": center_rate, "scales": cfg.scale_rate, "quaternions": cfg.quat_rate,
        "opacities": cfg.opacity_rate, "colors": cfg.color_rate, "normals": cfg.normal_rate,
    }
    moments = {f: (np.zeros_like(v), np.zeros_like(v)) for f, v in
               zip(_PARAM_FIELDS, (centers, log_scales, quats, logits, colors, normals))}

    def current() -> Splats:
        return Splats(centers, np.exp(log_scales), quats, 1.0 / (1.0 + np.exp(-logits)),
                      colors, normals, validate=False)

    def check_finite(splats: Splats, where: str):
        for f in _PARAM_FIELDS:
            if not np.isfinite(getattr(splats, f)).all():
                raise FitDivergenceError(
                    f"fit diverged {where}: parameter group '{f}' is non-finite")

    history = []
    for t in range(1, cfg.iterations + 1):
        view = views[(t - 1) % len(views)]
        splats = current()
        check_finite(splats, f"at iteration {t}")
        res, grads = _evaluate(splats, view, cfg, options, want_grads=True)
        if not np.isfinite(res.total):
            raise FitDivergenceError(f"fit diverged at iteration {t}: loss is non-finite")
        history.append(LossRecord(t, res.total, res.rgb_term, res.normal_term))

        raw = {
            "centers": grads["centers"],
            "scales": grads["scales"] * splats.scales,
            "quaternions": grads["quaternions"],
            "opacities": grads["opacities"] * splats.opacities * (1.0 - splats.opacities),
            "colors": grads["colors"],
            "normals": grads["normals"],
        }
        params = {
            "centers": centers, "scales": log_scales, "quaternions": quats,
            "opacities": logits, "colors": colors, "normals": normals,
        }
        for f in _PARAM_FIELDS:
            m, v = moments[f]
            g = raw[f]
            m += (1.0 - cfg.beta1) * (g - m)
            v += (1.0 - cfg.beta2) * (g * g - v)
            m_hat = m / (1.0 - cfg.beta1 ** t)
            v_hat = v / (1.0 - cfg.beta2 ** t)
            params[f] -= rates[f] * m_hat / (np.sqrt(v_hat) + cfg.eps)

        quats[:] = _renormed(quats, np.array([1.0, 0.0, 0.0, 0.0]))
        normals[:] = _renormed(normals, np.array([0.0, 0.0, 1.0]))
        np.clip(colors, 0.0, 1.0, out=colors)

    final = current()
    check_finite(final, f"after iteration {cfg.iterations}")
    return Splats(final.centers, final.scales, final.quaternions, final.opacities,
                  final.colors, final.normals), history


def gradcheck(splats: Splats, view: TrainView, cfg: FitConfig, samples: int,
              options: RenderOptions = None) -> dict:
    """Central-difference audit of the loss gradient on random components.

    Passing: rel <= 1e-3 or abs <= 1e-6 against h = 1e-4 * max(1, |theta|).
    Color components are reported separately (that path is linear). Sampling
    is drawn from a fixed seed, so reports are reproducible.
    """
    if len(splats) > 50:
        raise ValueError("gradcheck is limited to 50 splats")
    options = options or RenderOptions()
    report = {"n_total": 0, "n_pass": 0, "pass_fraction": 1.0,
              "max_rel": 0.0, "color_max_rel": 0.0}
    if len(splats) == 0 or samples < 1:
        return report

    _, analytic = _evaluate(splats, view, cfg, options, want_grads=True)
    widths = {f: getattr(splats, f).shape[-1] if getattr(splats, f).ndim > 1 else 1
              for f in _PARAM_FIELDS}
    layout = [(f, i, j) for f in _PARAM_FIELDS
              for i in range(len(splats)) for j in range(widths[f])]
    rng = np.random.default_rng(0)
    pick = rng.choice(len(layout), size=min(samples, len(layout)), replace=False)

    def loss_at(field, i, j, value):
        arrays = {f: getattr(splats, f).copy() for f in _PARAM_FIELDS}
        if arrays[field].ndim > 1:
            arrays[field][i, j] = value
        else:
            arrays[field][i] = value
        probe = Splats(validate=False, **arrays)
        return _evaluate(probe, view, cfg, options, want_grads=False)[0].total

    n_pass = 0
    for flat in pick:
        field, i, j = layout[flat]
        base = getattr(splats, field)[i, j] if widths[field] > 1 else getattr(splats, field)[i]
        h = 1e-4 * max(1.0, abs(base))
        fd = (loss_at(field, i, j, base + h) - loss_at(field, i, j, base - h)) / (2.0 * h)
        an = analytic[field][i, j] if widths[field] > 1 else analytic[field][i]
        err = abs(fd - an)
        rel = err / max(abs(fd), abs(an), 1e-300)
        if err <= 1e-6 or rel <= 1e-3:
            n_pass += 1
        if err > 1e-9:
            report["max_rel"] = max(report["max_rel"], rel)
            if field == "colors":
                report["color_max_rel"] = max(report["color_max_rel"], rel)
    report["n_total"] = len(pick)
    report["n_pass"] = n_pass
    report["pass_fraction"] = n_pass / len(pick)
    return report
