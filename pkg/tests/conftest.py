import os

import numpy as np
import pytest

from starnet.image import bicubic_resize, quantize_roundtrip, write_png


def smooth_image(rng, h, w, cells=8):
    """Band-limited random RGB image via bicubic upscale of a coarse grid."""
    small = rng.random((max(2, h // cells), max(2, w // cells), 3))
    return bicubic_resize(small.astype(np.float32), h, w)


def make_triplet(rng, hr_size=64, shift=2, margin=8):
    """Three frames cut from a translating window over one smooth canvas,
    so the middle frame is the true in-between of the outer two."""
    canvas = smooth_image(rng, hr_size + 4 * margin, hr_size + 4 * margin)

    def frame(k):
        r = margin + k * shift
        c = 3 * margin - k * shift
        return np.ascontiguousarray(canvas[r:r + hr_size, c:c + hr_size])

    return [frame(0), frame(1), frame(2)]


def write_sequence(root, rel, frames):
    seq_dir = os.path.join(root, "sequences", rel)
    os.makedirs(seq_dir, exist_ok=True)
    for k, img in enumerate(frames, 1):
        write_png(img, os.path.join(seq_dir, f"im{k}.png"))


def build_dataset(root, count, hr_size=64, seed=0, shift=2):
    """Synthetic triplet corpus on disk; returns (root, list_file)."""
    rng = np.random.default_rng(seed)
    root = str(root)
    entries = []
    for i in range(count):
        rel = os.path.join(f"{i // 10:05d}", f"{i % 10 + 1:04d}")
        write_sequence(root, rel, make_triplet(rng, hr_size, shift))
        entries.append(rel)
    list_file = os.path.join(root, "tri_trainlist.txt")
    with open(list_file, "w") as f:
        f.write("\n".join(entries) + "\n")
    return root, list_file


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_dataset(tmp_path):
    return build_dataset(tmp_path / "data", 4, hr_size=32, seed=1)
