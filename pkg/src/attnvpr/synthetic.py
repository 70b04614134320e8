"""Synthetic place-recognition corpus: textured planar scenes seen through
random homographies with occluders.

Each scene is a procedurally textured plane placed at its own planar position.
Views of the scene are perspective warps of the texture (small rotation,
scale, shear, translation and keystone) with one occluding rectangle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import make_rng
from .retrieval import PlaceTag


@dataclass(frozen=True)
class SyntheticView:
    image_id: str
    scene: int
    image: np.ndarray  # H x W x 3 in [0, 1]
    tag: PlaceTag
    homography: np.ndarray  # view pixel -> texture pixel


def _smooth_noise(rng, h, w, cell):
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.random((gh, gw, 3))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x0 + 1] * fx
    bot = grid[y0 + 1][:, x0] * (1 - fx) + grid[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def make_texture(rng: np.random.Generator, h: int, w: int, n_shapes: int = 60) -> np.ndarray:
    tex = 0.5 * _smooth_noise(rng, h, w, 48) + 0.3 * _smooth_noise(rng, h, w, 12)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_shapes):
        color = rng.random(3)
        cy, cx = rng.random() * h, rng.random() * w
        size = 4 + rng.random() * 20
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < size) & (np.abs(xx - cx) < size * (0.5 + rng.random()))
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < size ** 2
        tex[mask] = 0.3 * tex[mask] + 0.7 * color
    tex += 0.04 * rng.standard_normal(tex.shape)
    return np.clip(tex, 0.0, 1.0)


def random_view_homography(rng, view_hw, tex_hw, max_rot_deg=4.0, max_scale=0.06,
                           max_shift=10.0, max_persp=2e-5) -> np.ndarray:
    """Homography taking view pixel coordinates (x, y) into texture coordinates."""
    vh, vw = view_hw
    th, tw = tex_hw
    ang = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
    s = 1.0 + rng.uniform(-max_scale, max_scale)
    c, si = np.cos(ang) * s, np.sin(ang) * s
    to_center = np.array([[1, 0, -vw / 2], [0, 1, -vh / 2], [0, 0, 1.0]])
    rot = np.array([[c, -si, 0], [si, c, 0], [0, 0, 1.0]])
    persp = np.array([[1, 0, 0], [0, 1, 0],
                      [rng.uniform(-max_persp, max_persp), rng.uniform(-max_persp, max_persp), 1]])
    shift = rng.uniform(-max_shift, max_shift, 2)
    to_tex = np.array([[1, 0, tw / 2 + shift[0]], [0, 1, th / 2 + shift[1]], [0, 0, 1.0]])
    return to_tex @ rot @ persp @ to_center


def warp_texture(texture: np.ndarray, H: np.ndarray, view_hw) -> np.ndarray:
    vh, vw = view_hw
    th, tw = texture.shape[:2]
    ys, xs = np.mgrid[0:vh, 0:vw].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    mapped = H @ pts
    u = np.clip(mapped[0] / mapped[2], 0, tw - 1.001)
    v = np.clip(mapped[1] / mapped[2], 0, th - 1.001)
    u0, v0 = u.astype(int), v.astype(int)
    fu, fv = (u - u0)[:, None], (v - v0)[:, None]
    out = (texture[v0, u0] * (1 - fu) * (1 - fv) + texture[v0, u0 + 1] * fu * (1 - fv)
           + texture[v0 + 1, u0] * (1 - fu) * fv + texture[v0 + 1, u0 + 1] * fu * fv)
    return out.reshape(vh, vw, 3)


def occlude(rng, image: np.ndarray, max_frac: float = 0.25) -> np.ndarray:
    h, w = image.shape[:2]
    oh = int(h * rng.uniform(0.15, max_frac * 2))
    ow = int(w * rng.uniform(0.1, max_frac))
    y0 = rng.integers(0, h - oh + 1)
    x0 = rng.integers(0, w - ow + 1)
    out = image.copy()
    out[y0:y0 + oh, x0:x0 + ow] = rng.random(3) * 0.8 + 0.1
    return out


def make_corpus(n_scenes: int = 50, views_per_scene: int = 4, view_hw=(192, 256),
                seed: int = 0, spacing_m: float = 100.0) -> list[SyntheticView]:
    """Scenes laid out ``spacing_m`` apart along the easting axis."""
    vh, vw = view_hw
    tex_hw = (vh + 64, vw + 64)
    views = []
    for s in range(n_scenes):
        rng = make_rng(seed * 100_003 + s)
        texture = make_texture(rng, *tex_hw)
        base_heading = float(rng.uniform(0, 360))
        for v in range(views_per_scene):
            H = random_view_homography(rng, view_hw, tex_hw)
            img = occlude(rng, warp_texture(texture, H, view_hw))
            jitter = rng.uniform(-2.0, 2.0, 2)
            heading = (base_heading + rng.uniform(-10, 10)) % 360.0
            image_id = f"s{s:03d}_v{v}"
            tag = PlaceTag(image_id, spacing_m * s + float(jitter[0]), float(jitter[1]), heading)
            views.append(SyntheticView(image_id, s, img.astype(np.float32), tag, H))
    return views
