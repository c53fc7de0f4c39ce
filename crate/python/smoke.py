"""Smoke test for the dimnerf_py extension.

Build it first, e.g.

    cargo build --release -p dimnerf-py --features extension-module
    cp target/release/libdimnerf_py.so python/dimnerf_py.so
    python3 python/smoke.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import dimnerf_py as dn

TRAIN = """
iterations = 6
batch_rays = 16
consistency_anchors = 4
group_size = 3

[sampling]
coarse = 8
fine = 0

[field]
depth = 2
width = 16

[kernel]
motions = 2
latent_dim = 4
hidden = 8
"""


def main():
    assert dn.consistency_loss([(0, 0, 0), (1, 1, 1)]) == 0.5
    assert dn.consistency_loss([(0.3, 0.2, 0.1)] * 4) == 0.0
    eye = dn.se3_exp_matrix([0.0] * 6)
    assert eye == [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]

    flat = dn.Image(4, 4, [0.25] * 48)
    assert math.isclose(dn.scale_up(flat, 0.5, equalize=False).get(1, 1)[0], 0.5)
    assert dn.psnr(flat, flat) == 99.0 and dn.ssim(flat, flat) == 1.0

    with tempfile.TemporaryDirectory() as tmp:
        n = dn.synth(tmp, seed=1, config_toml="views = 4\nwidth = 24\nheight = 18\n")
        ds = dn.Dataset.load(tmp)
        assert len(ds) == n == 4
        train, held = ds.indices("train"), ds.indices("eval")
        assert ds.image(train[0]).mean() < 50 / 255

        mask = dn.ctp_mask(ds.image(train[0]))
        assert set(mask) <= {0, 1} and len(mask) == 24 * 18

        t = dn.Trainer(ds, TRAIN, seed=5)
        logs = t.step(6)
        assert [row[0] for row in logs] == list(range(6)) and t.iteration == 6
        ck = os.path.join(tmp, "ck.bin")
        t.save(ck)
        again = dn.Trainer.load(ck, ds)
        assert again.iteration == 6

        view = held[0] if held else train[0]
        img = again.render(ds, view)
        assert (img.width, img.height) == (24, 18)
        print(f"render vs clean: {dn.psnr(img, ds.clean(view)):.2f} dB")

        try:
            dn.Dataset.load(os.path.join(tmp, "missing"))
        except dn.DimnerfError as e:
            assert "manifest.toml" in str(e)
        else:
            raise AssertionError("expected DimnerfError")

    print("ok")


if __name__ == "__main__":
    main()
