"""Image directory scanning and preprocessing."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InvalidValue

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


def scan_class_folders(image_dir) -> tuple[list[str], list[tuple[int, Path]]]:
    """List (label, path) pairs from a class-subfolder layout.

    Class indices follow the sorted subfolder names; files sort within each
    class, so the listing order is stable across runs and machines.
    """
    root = Path(image_dir)
    if not root.is_dir():
        raise InvalidValue(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise InvalidValue(f"{root} has no class subfolders")
    class_names = [p.name for p in class_dirs]
    jobs: list[tuple[int, Path]] = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir()
                       if p.suffix.lower() in IMAGE_EXTS)
        jobs.extend((label, p) for p in files)
    if not jobs:
        raise InvalidValue(f"{root} holds no image files")
    return class_names, jobs


def load_image_tensor(path, size: int, mean, std) -> torch.Tensor:
    """Decode, resize to (size, size) bilinear, and normalize to (3, S, S)."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(
        std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())
