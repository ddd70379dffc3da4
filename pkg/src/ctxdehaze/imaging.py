"""Image arrays, file I/O, cropping and the PSNR/SSIM quality metrics.

Images at module boundaries are ``H x W x C`` float64 numpy arrays in [0, 1]
with ``C`` in {1, 3}.  Networks work on ``N x C x H x W`` torch tensors; the
``to_tensor`` / ``from_tensor`` helpers convert between the two.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 1.0


class InvalidInput(ValueError):
    """Raised when an operation receives arguments violating its preconditions."""


def check_image(img, name="image"):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise InvalidInput(f"{name}: expected HxWxC with C in {{1,3}}, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidInput(f"{name}: empty image {img.shape}")
    return img


def clamp01(img):
    return np.clip(img, 0.0, 1.0)


def to_luminance(img):
    img = check_image(img)
    if img.shape[2] != 3:
        raise InvalidInput(f"to_luminance needs 3 channels, got {img.shape[2]}")
    r, g, b = LUMA_WEIGHTS
    y = r * img[:, :, 0] + g * img[:, :, 1] + b * img[:, :, 2]
    return clamp01(y)[:, :, None]


def _metric_plane(img):
    img = check_image(img)
    return to_luminance(img) if img.shape[2] == 3 else img


def _same_shape(a, b):
    a = check_image(a, "a")
    b = check_image(b, "b")
    if a.shape != b.shape:
        raise InvalidInput(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """PSNR in dB with peak 1.0, on the luminance channel for RGB input.

    Identical inputs return ``PSNR_CAP_DB`` rather than infinity.
    """
    a, b = _same_shape(a, b)
    ya, yb = _metric_plane(a), _metric_plane(b)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float64):
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(x, y, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Per-window SSIM for NCHW tensors (valid region, stride 1, channels independent).

    Differentiable; used both by the metric and by the SSIM loss.
    """
    if x.shape != y.shape:
        raise InvalidInput(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.shape[-1] < window or x.shape[-2] < window:
        raise InvalidInput(f"image {tuple(x.shape[-2:])} smaller than SSIM window {window}")
    c = x.shape[1]
    w = gaussian_window(window, sigma, x.dtype).to(x.device)
    w = w.expand(c, 1, window, window)

    def filt(t):
        return F.conv2d(t, w, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = filt(x * x) - mu_xx
    var_y = filt(y * y) - mu_yy
    cov = filt(x * y) - mu_xy
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    num = (2.0 * mu_xy + c1) * (2.0 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return num / den


def ssim(a, b):
    """Mean Gaussian-windowed SSIM (11x11, sigma 1.5) on the luminance channel."""
    a, b = _same_shape(a, b)
    ya, yb = _metric_plane(a), _metric_plane(b)
    ta = torch.from_numpy(np.ascontiguousarray(ya.transpose(2, 0, 1)))[None]
    tb = torch.from_numpy(np.ascontiguousarray(yb.transpose(2, 0, 1)))[None]
    with torch.no_grad():
        val = float(ssim_map(ta, tb).mean())
    return max(-1.0, min(1.0, val))


def random_crop(img, size, seed):
    img = check_image(img)
    h, w = img.shape[:2]
    if size < 1 or h < size or w < size:
        raise InvalidInput(f"cannot crop {size}x{size} from {h}x{w}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[top : top + size, left : left + size].copy()


def crop_at(img, top, left, size):
    return img[top : top + size, left : left + size].copy()


# -- tensors -----------------------------------------------------------------

def to_tensor(img, dtype=torch.float32):
    img = check_image(img)
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype)[None]


def from_tensor(t):
    arr = t.detach().to(torch.float64).cpu().numpy()
    if arr.ndim == 4:
        arr = arr[0]
    return clamp01(arr.transpose(1, 2, 0))


# -- files -------------------------------------------------------------------

def load_image(path):
    """Decode an 8-bit PNG/JPEG to an RGB float image via v/255."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def save_image(path, img):
    img = check_image(img)
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if q.shape[2] == 1:
        q = q[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path)


def quantize(img):
    """What ``save_image`` followed by ``load_image`` yields, without touching disk."""
    return np.clip(np.round(check_image(img) * 255.0), 0, 255) / 255.0


# -- reports -----------------------------------------------------------------

@dataclass
class MetricReport:
    label: str = ""
    split: str = "test"
    per_image: list = field(default_factory=list)  # (image_id, psnr_db, ssim)
    failures: list = field(default_factory=list)  # (image_id, message)

    @property
    def psnr_db(self):
        if not self.per_image:
            return float("nan")
        return float(np.mean([r[1] for r in self.per_image]))

    @property
    def ssim(self):
        if not self.per_image:
            return float("nan")
        return float(np.mean([r[2] for r in self.per_image]))

    def add(self, image_id, psnr_db, ssim_val):
        self.per_image.append((str(image_id), float(psnr_db), float(ssim_val)))

    def to_text(self):
        lines = []
        for image_id, p, s in self.per_image:
            lines.append(f"record\tid={image_id}\tpsnr_db={p!r}\tssim={s!r}")
        for image_id, msg in self.failures:
            lines.append(f"failure\tid={image_id}\tmessage={msg}")
        lines.append(
            f"aggregate\tlabel={self.label}\tsplit={self.split}\tcount={len(self.per_image)}"
            f"\tfailures={len(self.failures)}\tpsnr_db={self.psnr_db!r}\tssim={self.ssim!r}"
        )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        rep = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            kind, *pairs = line.split("\t")
            kv = dict(p.split("=", 1) for p in pairs)
            if kind == "record":
                rep.add(kv["id"], float(kv["psnr_db"]), float(kv["ssim"]))
            elif kind == "failure":
                rep.failures.append((kv["id"], kv.get("message", "")))
            elif kind == "aggregate":
                rep.label = kv.get("label", "")
                rep.split = kv.get("split", "test")
        return rep
