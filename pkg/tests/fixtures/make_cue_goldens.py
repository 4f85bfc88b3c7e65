"""Regenerate the cue golden files for ``cue8.ppm``.

The cues are computed here with plain scalar loops, independent of the
package's vectorised code, and written as JSON (float64, repr-exact).

    python tests/fixtures/make_cue_goldens.py
"""
import json
import math
from pathlib import Path

HERE = Path(__file__).parent
EPS = 1e-3


def make_fixture_bytes() -> bytes:
    # deterministic 8x8 pattern: smooth ramps plus a checker and a hot pixel
    raw = bytearray()
    for y in range(8):
        for x in range(8):
            r = (16 * x + 7 * y + (40 if (x + y) % 2 else 0)) % 256
            g = (200 - 11 * y + 3 * x) % 256
            b = 0 if (x, y) == (2, 5) else (30 + 25 * ((x * y) % 7)) % 256
            raw += bytes([r, g, b])
    return b"P6\n8 8\n255\n" + bytes(raw)


def read_ppm(data: bytes):
    head, rest = data.split(b"255\n", 1)
    w, h = (int(v) for v in head.split()[1:3])
    return [[[rest[(y * w + x) * 3 + c] / 255 for c in range(3)] for x in range(w)] for y in range(h)]


def ci(img):
    out = []
    for row in img:
        orow = []
        for r, g, b in row:
            orow.append([math.exp(-(r + EPS) / (g + EPS)),
                         math.exp(-(g + EPS) / (b + EPS)),
                         math.exp(-(b + EPS) / (r + EPS))])
        out.append(orow)
    return out


def hf(img):
    h, w = len(img), len(img[0])
    detail = [[[0.0] * 3 for _ in range(w)] for _ in range(h)]
    for by in range(0, h, 2):
        for bx in range(0, w, 2):
            for c in range(3):
                a, b = img[by][bx][c], img[by][bx + 1][c]
                cc, d = img[by + 1][bx][c], img[by + 1][bx + 1][c]
                lh = (a - b + cc - d) / 2
                hl = (a + b - cc - d) / 2
                hh = (a - b - cc + d) / 2
                v = (abs(lh) + abs(hl) + abs(hh)) / 3
                for dy in (0, 1):
                    for dx in (0, 1):
                        detail[by + dy][bx + dx][c] = v
    flat = [v for row in detail for px in row for v in px]
    lo, hi = min(flat), max(flat)
    return [[[(v - lo) / (hi - lo) for v in px] for px in row] for row in detail]


def main():
    data = make_fixture_bytes()
    (HERE / "cue8.ppm").write_bytes(data)
    img = read_ppm(data)
    golden = {"eps": EPS, "img": img, "hf": hf(img), "ci": ci(img)}
    (HERE / "cue8_golden.json").write_text(json.dumps(golden))


if __name__ == "__main__":
    main()
