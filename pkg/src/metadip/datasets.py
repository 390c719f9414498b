"""Seeded synthetic image sets so experiments run without downloads.

``synthetic_faces`` draws cartoon faces (head, hair, eyes, mouth, shading on a
gradient backdrop). ``synthetic_patches`` draws textured natural-looking
patches (1/f noise fields cut by straight edges). Both are quantized to the
8-bit grid so that writing them to PNG and reading them back is lossless.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .imaging import ImageDataset, save_png

_SUPERSAMPLE = 4


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    s = size * _SUPERSAMPLE
    t = (np.arange(s) + 0.5) / s
    return np.meshgrid(t, t, indexing="ij")


def _downsample(img: np.ndarray, size: int) -> np.ndarray:
    k = _SUPERSAMPLE
    return img.reshape(size, k, size, k, img.shape[2]).mean(axis=(1, 3))


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5) / 255.0


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u**2 + v**2 <= 1.0


def _paint(img, mask, color):
    img[mask] = color


def draw_face(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.clip(0.5 + (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)), 0, 1)
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]

    cy, cx = 0.52 + rng.uniform(-0.05, 0.05), 0.5 + rng.uniform(-0.06, 0.06)
    ry, rx = rng.uniform(0.30, 0.38), rng.uniform(0.22, 0.28)
    tilt = rng.uniform(-0.2, 0.2)
    hair = rng.uniform(0.05, 0.55) * np.array([1.0, rng.uniform(0.6, 0.9), rng.uniform(0.3, 0.7)])
    skin = np.array([rng.uniform(0.55, 0.95), 0, 0])
    skin[1] = skin[0] * rng.uniform(0.7, 0.85)
    skin[2] = skin[0] * rng.uniform(0.55, 0.75)

    _paint(img, _ellipse(yy, xx, cy - 0.06, cx, ry * 1.08, rx * 1.18, tilt), hair)
    _paint(img, (yy > cy + ry * 0.6) & (np.abs(xx - cx) < rx * 0.45), skin * 0.85)  # neck
    face = _ellipse(yy, xx, cy + 0.03, cx, ry * 0.92, rx, tilt)
    _paint(img, face, skin)

    eye_y = cy - ry * 0.12
    eye_dx = rx * rng.uniform(0.35, 0.45)
    eye_r = rx * rng.uniform(0.10, 0.15)
    iris = rng.uniform(0.05, 0.4, 3)
    for sgn in (-1, 1):
        _paint(img, _ellipse(yy, xx, eye_y, cx + sgn * eye_dx, eye_r * 0.7, eye_r * 1.3, tilt), np.full(3, 0.95))
        _paint(img, _ellipse(yy, xx, eye_y, cx + sgn * eye_dx, eye_r * 0.6, eye_r * 0.6), iris)
        _paint(img, _ellipse(yy, xx, eye_y - eye_r * 1.6, cx + sgn * eye_dx, eye_r * 0.3, eye_r * 1.5, tilt), hair)
    _paint(img, _ellipse(yy, xx, cy + ry * 0.12, cx, ry * 0.16, rx * 0.09), skin * 0.8)  # nose
    mouth = np.array([rng.uniform(0.5, 0.8), rng.uniform(0.15, 0.3), rng.uniform(0.2, 0.35)])
    _paint(img, _ellipse(yy, xx, cy + ry * 0.45, cx, ry * 0.07, rx * rng.uniform(0.3, 0.45), tilt), mouth)

    light = rng.uniform(0, 2 * np.pi)
    shade = 1.0 + 0.18 * (np.cos(light) * (xx - cx) + np.sin(light) * (yy - cy)) / 0.5
    img = img * shade[..., None]
    return _quantize(_downsample(img, size))


def _pink_noise(rng: np.random.Generator, n: int, exponent: float) -> np.ndarray:
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.fftfreq(n)[None, :]
    f = np.sqrt(fx**2 + fy**2)
    f[0, 0] = 1.0
    spectrum = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / f**exponent
    spectrum[0, 0] = 0.0
    field = np.real(np.fft.ifft2(spectrum))
    return field / (np.std(field) + 1e-12)


def draw_patch(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = _grid(size)
    n = size * _SUPERSAMPLE
    base = rng.uniform(0.2, 0.8, 3)
    mix = rng.normal(0.0, 1.0, (3, 3)) * 0.06 + np.eye(3) * 0.04
    fields = np.stack([_pink_noise(rng, n, rng.uniform(1.2, 1.8)) for _ in range(3)], axis=-1)
    img = base + fields @ mix.T
    for _ in range(rng.integers(1, 4)):
        angle = rng.uniform(0, 2 * np.pi)
        offset = rng.uniform(-0.3, 0.3)
        side = (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)) > offset
        shift = rng.uniform(-0.3, 0.3, 3)
        img = img + side[..., None] * shift
    lo, hi = img.min(), img.max()
    img = 0.05 + 0.9 * (img - lo) / max(hi - lo, 1e-6)
    return _quantize(_downsample(img, size))


def synthetic_faces(count: int, size: int = 32, seed: int = 0) -> ImageDataset:
    images, names = [], []
    for i in range(count):
        rng = np.random.default_rng([seed, i, 0xFACE])
        images.append(draw_face(rng, size))
        names.append(f"face-{seed}-{i:05d}.png")
    return ImageDataset(images, names, meta={"source": "synthetic-faces", "seed": seed, "size": size})


def synthetic_patches(count: int, size: int = 32, seed: int = 0) -> ImageDataset:
    images, names = [], []
    for i in range(count):
        rng = np.random.default_rng([seed, i, 0xBA7C])
        images.append(draw_patch(rng, size))
        names.append(f"patch-{seed}-{i:05d}.png")
    return ImageDataset(images, names, meta={"source": "synthetic-patches", "seed": seed, "size": size})


GENERATORS = {"synthetic-faces": synthetic_faces, "synthetic-patches": synthetic_patches}


def write_dataset(dataset: ImageDataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for img, name in zip(dataset.images, dataset.names):
        save_png(root / name, img)
    return root
