"""Write the desk-scale training corpus and benchmark set from scikit-image's bundled samples.

The corpus holds ten gray or color natural/texture images; the benchmark set
holds five 120x120 centre crops of images that are not in the corpus.
"""
from pathlib import Path

import numpy as np
from skimage import data as skdata

from image_core import Image, save_png
from settings import config

CORPUS_DIR = Path(config("CORPUS_DIR"))
BENCHMARK_DIR = Path(config("BENCHMARK_DIR"))

CORPUS_IMAGES = [
    "camera",
    "moon",
    "page",
    "text",
    "brick",
    "grass",
    "gravel",
    "coffee",
    "hubble_deep_field",
    "clock",
]
BENCHMARK_IMAGES = ["astronaut", "chelsea", "rocket", "immunohistochemistry", "coins"]
BENCHMARK_CROP = 120


def _to_image(array) -> Image:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError(f"Expected 8-bit sample data, got {array.dtype}")
    if array.ndim == 3:
        array = np.transpose(array[..., :3], (2, 0, 1))
    return Image.from_array(array / 255.0)


def center_crop(img: Image, size: int) -> Image:
    if min(img.shape) < size:
        raise ValueError(f"Image {img.shape} is smaller than the {size}x{size} crop")
    top = (img.height - size) // 2
    left = (img.width - size) // 2
    return Image(img.data[:, top : top + size, left : left + size], img.colorspace)


def pull_sample_images(names, crop=None):
    """{name: Image} for the named scikit-image samples, optionally centre-cropped."""
    images = {}
    for name in names:
        img = _to_image(getattr(skdata, name)())
        images[name] = center_crop(img, crop) if crop else img
    return images


def save_images(images, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [save_png(img, out_dir / f"{name}.png") for name, img in images.items()]


if __name__ == "__main__":
    save_images(pull_sample_images(CORPUS_IMAGES), CORPUS_DIR)
    print("Wrote corpus images to:", CORPUS_DIR)
    save_images(pull_sample_images(BENCHMARK_IMAGES, crop=BENCHMARK_CROP), BENCHMARK_DIR)
    print("Wrote benchmark images to:", BENCHMARK_DIR)
