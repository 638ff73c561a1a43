#!/usr/bin/env python3
"""Standalone SSIM reference: 8x8 uniform windows, stride 1, population statistics,
K1=0.01, K2=0.03, L=255.

Without arguments, prints the value for the fixed 16x16 pair used by the Rust
unit tests. With `--pairs OUT.json`, writes 50 seeded random image pairs and
their reference scores to OUT.json."""
import json
import sys

import numpy as np

K1, K2, L, WIN = 0.01, 0.03, 255.0, 8


def ssim(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    h, w = a.shape
    wh, ww = min(WIN, h), min(WIN, w)
    vals = []
    for r in range(h - wh + 1):
        for c in range(w - ww + 1):
            x = a[r:r + wh, c:c + ww]
            y = b[r:r + wh, c:c + ww]
            mx, my = x.mean(), y.mean()
            vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
            cov = ((x - mx) * (y - my)).mean()
            vals.append(((2 * mx * my + c1) * (2 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def fixed_pair():
    a = np.array([[(r * 37 + c * 91 + (r * c) % 13) % 256 for c in range(16)] for r in range(16)])
    b = np.array([[min(255, (a[r, c] * 3) // 4 + (r * 5 + c * 11) % 41) for c in range(16)] for r in range(16)])
    return a, b


def random_pairs(n=50, seed=20240611):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        h = int(rng.integers(3, 25))
        w = int(rng.integers(3, 25))
        a = rng.integers(0, 256, size=(h, w))
        if i % 3 == 0:
            b = rng.integers(0, 256, size=(h, w))
        else:
            noise = rng.integers(-40, 41, size=(h, w))
            b = np.clip(a + noise, 0, 255)
        out.append({
            "width": w,
            "height": h,
            "a": bytes(a.astype(np.uint8).ravel().tolist()).hex(),
            "b": bytes(b.astype(np.uint8).ravel().tolist()).hex(),
            "ssim": ssim(a, b),
        })
    return out


if __name__ == "__main__":
    if len(sys.argv) == 3 and sys.argv[1] == "--pairs":
        with open(sys.argv[2], "w") as f:
            json.dump(random_pairs(), f, indent=1)
    else:
        a, b = fixed_pair()
        print(repr(ssim(a, b)))
        print(repr(ssim(a, a)))
