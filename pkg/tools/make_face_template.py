"""Regenerate src/gads/assets/face_template_v1.json.

Frontal face frame: +x toward image right, +y up, +z toward the camera.
Points follow the iBUG 68-landmark ordering and sit on a half-ellipsoid,
with the nose pushed forward and the eye sockets slightly recessed.
"""

import json
import math
from pathlib import Path

AX, AY, AZ = 1.1, 1.45, 0.8


def surface_z(x, y):
    r = 1.0 - (x / AX) ** 2 - (y / AY) ** 2
    return AZ * math.sqrt(max(r, 0.0))


def build():
    pts = []
    for i in range(17):  # jaw
        a = math.pi + math.pi * i / 16
        pts.append((math.cos(a), 0.2 + 1.3 * math.sin(a)))
    for side in (-1, 1):  # brows, image-left first
        xs = [-0.85, -0.7, -0.52, -0.35, -0.2] if side < 0 else [0.2, 0.35, 0.52, 0.7, 0.85]
        for x in xs:
            pts.append((x, 0.72 + 0.08 * math.cos((abs(x) - 0.52) * 3.0)))
    for y in (0.5, 0.33, 0.16, 0.0):  # nose bridge, 30 is the tip
        pts.append((0.0, y))
    for x in (-0.25, -0.13, 0.0, 0.13, 0.25):  # nostrils
        pts.append((x, -0.15 + (0.03 if x == 0.0 else 0.0)))
    left_eye = [(-0.65, 0.45), (-0.53, 0.52), (-0.38, 0.52), (-0.25, 0.45), (-0.38, 0.39), (-0.53, 0.39)]
    right_eye = [(0.25, 0.45), (0.38, 0.52), (0.53, 0.52), (0.65, 0.45), (0.53, 0.39), (0.38, 0.39)]
    pts += left_eye + right_eye
    for k in range(12):  # outer lip, clockwise from the image-left corner
        a = math.pi - 2 * math.pi * k / 12
        pts.append((0.4 * math.cos(a), -0.55 + 0.15 * math.sin(a)))
    for k in range(8):  # inner lip
        a = math.pi - 2 * math.pi * k / 8
        pts.append((0.25 * math.cos(a), -0.55 + 0.06 * math.sin(a)))
    assert len(pts) == 68

    out = []
    for i, (x, y) in enumerate(pts):
        z = surface_z(x, y)
        if 27 <= i <= 30:
            z += 0.1 * (i - 26)
        elif 31 <= i <= 35:
            z += 0.15
        elif 36 <= i <= 47:
            z -= 0.05
        out.append([round(x, 6), round(y, 6), round(z, 6)])
    return out


if __name__ == "__main__":
    dest = Path(__file__).resolve().parents[1] / "src" / "gads" / "assets" / "face_template_v1.json"
    payload = {"version": 1, "convention": "ibug68", "frame": "x right, y up, z toward camera", "points": build()}
    rows = ",\n  ".join(json.dumps(p) for p in payload.pop("points"))
    head = json.dumps(payload)[:-1]
    dest.write_text(f'{head}, "points": [\n  {rows}\n]}}\n')
    print(f"wrote {dest}")
