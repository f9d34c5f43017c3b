"""On-disk artifacts; every text or image file carries the config hash."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo


def to_uint8(img) -> np.ndarray:
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_text(path, text: str) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_png(path, img, config_hash: str = "", scale: int = 1) -> None:
    """8-bit RGB PNG; ``scale`` repeats pixels for viewing."""
    a = to_uint8(img)
    if scale > 1:
        a = np.repeat(np.repeat(a, scale, axis=0), scale, axis=1)
    info = PngInfo()
    if config_hash:
        info.add_text("config_hash", config_hash)
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    Image.fromarray(a, "RGB").save(path, format="PNG", pnginfo=info)


def write_ppm(path, img, config_hash: str = "") -> None:
    """Binary P6 with the hash as a header comment; bit-exact goldens."""
    a = to_uint8(img)
    h, w = a.shape[:2]
    head = "P6\n" + (f"# config_hash={config_hash}\n" if config_hash else "") + f"{w} {h}\n255\n"
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii") + a.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def contact_sheet(rows: list[list[np.ndarray]], pad: int = 1) -> np.ndarray:
    """Tile equally sized images into a grid with a white gutter."""
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    out = np.ones((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3))
    for i, r in enumerate(rows):
        for j, img in enumerate(r):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = img
    return out


def csv_header(config_hash: str) -> str:
    return f"# config_hash={config_hash}"
