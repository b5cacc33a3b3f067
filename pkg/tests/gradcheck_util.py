"""Finite-difference oracle for the rasterizer backward pass.

Central differences with h = 1e-4 * max(1, |theta|) per component. A component
passes at rel <= 1e-3 or abs <= 1e-6; color gradients are additionally tracked
at their own (much tighter) worst relative error, since the blend is linear in
color. Splats are rebuilt with validate=False so perturbed quaternions and
normals need not stay unit.
"""
import numpy as np

from splatforge.gaussians import Splats
from splatforge.rasterizer import render, render_backward

FIELDS = ("centers", "scales", "quaternions", "opacities", "colors", "normals")


def _perturbed(splats, field, i, j, value):
    kw = {f: getattr(splats, f).copy() for f in FIELDS}
    if field == "opacities":
        kw[field][i] = value
    else:
        kw[field][i, j] = value
    return Splats(validate=False, **kw)


def _plane(fb, mode):
    return {"rgb": fb.rgb, "normal": fb.normal, "depth": fb.depth}[mode]


def fd_gradcheck(splats, cam, mode, upstream, background, options, h_rel=1e-4):
    """Compare analytic gradients against central differences.

    Returns dict with n_pass, n_total, worst_rel (over failing-prone fields),
    and color_worst_rel (colors only, 0 when color gradients are exact).
    """
    up_kernel = upstream if mode != "depth" else upstream[:, :, 0]
    grads = render_backward(splats, cam, up_kernel, mode, background, options)
    grad_of = {
        "centers": grads.d_centers, "scales": grads.d_scales,
        "quaternions": grads.d_quaternions, "opacities": grads.d_opacities[:, None],
        "colors": grads.d_colors, "normals": grads.d_normals,
    }

    def loss(s):
        plane = _plane(render(s, cam, mode, background, options), mode)
        if mode == "depth":
            return float((plane * upstream[:, :, 0]).sum())
        return float((plane * upstream).sum())

    n_pass = 0
    n_total = 0
    worst_rel = 0.0
    color_worst = 0.0
    for field in FIELDS:
        theta = getattr(splats, field)
        if field == "opacities":
            theta = theta[:, None]
        for i in range(theta.shape[0]):
            for j in range(theta.shape[1]):
                h = h_rel * max(1.0, abs(theta[i, j]))
                hi = loss(_perturbed(splats, field, i, j, theta[i, j] + h))
                lo = loss(_perturbed(splats, field, i, j, theta[i, j] - h))
                fd = (hi - lo) / (2.0 * h)
                an = grad_of[field][i, j]
                err = abs(fd - an)
                rel = err / max(abs(fd), abs(an), 1e-12)
                ok = err <= 1e-6 or rel <= 1e-3
                n_total += 1
                n_pass += ok
                if not ok:
                    worst_rel = max(worst_rel, rel)
                if field == "colors" and err > 1e-9:
                    color_worst = max(color_worst, rel)
    return {"n_pass": n_pass, "n_total": n_total,
            "worst_rel": worst_rel, "color_worst_rel": color_worst}


def random_scene(rng, n, spread=0.25, sigma_range=(0.04, 0.2), z_offset=2.5,
                 opacity_range=(0.2, 0.9)):
    """Random splat batch centered in front of the origin-facing camera."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    nr = rng.normal(size=(n, 3))
    nr /= np.linalg.norm(nr, axis=1, keepdims=True)
    return Splats(
        rng.normal(size=(n, 3)) * spread + [0.0, 0.0, z_offset],
        rng.uniform(*sigma_range, size=(n, 3)),
        q,
        rng.uniform(*opacity_range, size=n),
        rng.uniform(0.0, 1.0, size=(n, 3)),
        nr,
    )
