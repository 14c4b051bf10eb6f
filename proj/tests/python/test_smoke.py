import json
import os
import sys

import numpy as np
import pytest

ext_dir = os.environ.get("NERFSIM_EXT_DIR")
if ext_dir:
    sys.path.insert(0, ext_dir)

_nerfsim = pytest.importorskip("_nerfsim")


def test_psnr_ssim_identities():
    rng = np.random.default_rng(3)
    img = rng.random((16, 20, 3))
    assert _nerfsim.psnr(img, img) == 99.0
    assert abs(_nerfsim.ssim(img, img) - 1.0) < 1e-12

    shifted = np.clip(img + 0.1, 0.0, 1.0)
    assert _nerfsim.psnr(img, shifted) < 99.0


def test_psnr_matches_numpy():
    rng = np.random.default_rng(4)
    a = rng.random((8, 8, 3))
    b = rng.random((8, 8, 3))
    mse = float(np.mean((a - b) ** 2))
    assert abs(_nerfsim.psnr(a, b) - 10 * np.log10(1 / mse)) < 1e-9


def test_synth_and_png_roundtrip(tmp_path):
    manifest = _nerfsim.synth(
        str(tmp_path / "ds"), seed=5, width=16, height=12, frames=2, cameras=1
    )
    with open(manifest) as f:
        doc = json.load(f)
    assert doc["width"] == 16 and doc["frames"] == 2
    first = doc["files"][0][0]["rgb"]
    img = _nerfsim.read_png(str(tmp_path / "ds" / first))
    assert img.shape == (12, 16, 3)
    assert 0.0 <= img.min() and img.max() <= 1.0

    out = tmp_path / "copy.png"
    _nerfsim.write_png(str(out), img)
    again = _nerfsim.read_png(str(out))
    assert np.array_equal(img, again)
