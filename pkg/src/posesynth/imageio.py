"""8-bit image files."""

import numpy as np
from PIL import Image


def to_uint8(img):
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_rgb(path, img):
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False)


def write_mask(path, mask):
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(
        path, format="PNG", optimize=False
    )


def read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_gray(path, img):
    Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG", optimize=False)


def read_gray(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
