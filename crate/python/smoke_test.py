"""Smoke test for the eformer_py extension module.

Build and install first:
    pip install --no-build-isolation ./crates/py
"""

import math
import os
import tempfile

import eformer_py as ef


def main():
    clean, noisy = ef.synth_sample("sample_00000", size=32, seed=0)
    assert len(clean) == 32 and len(clean[0]) == 32
    assert all(0.0 <= v <= 1.0 for row in noisy for v in row)

    base = ef.psnr(noisy, clean)
    assert math.isinf(ef.psnr(clean, clean))
    assert ef.rmse(clean, clean) == 0.0
    assert abs(ef.ssim(clean, clean) - 1.0) < 1e-12
    print(f"baseline psnr {base:.3f} dB")

    cfg = ef.ModelConfig(base_channels=4, lewin_depth=1)
    assert cfg.size_multiple() == 16
    model = ef.Eformer(cfg, seed=1)
    print(f"parameters {model.num_parameters()}")

    residual = model.predict(noisy)
    est = model.denoise(noisy, clamp=False)
    worst = max(abs(e + r - x) for er, rr, xr in zip(est, residual, noisy) for e, r, x in zip(er, rr, xr))
    assert worst < 1e-12, worst

    losses = model.fit([(noisy, clean)], steps=3, lr=1e-3, batch_size=1)
    assert len(losses) == 3 and all(math.isfinite(v) for v in losses)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.efmr")
        model.save(path)
        again = ef.Eformer.load(path)
        a, b = model.denoise(noisy), again.denoise(noisy)
        assert max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb)) < 1e-5

        img = os.path.join(d, "x.pgm")
        ef.save_pgm(img, clean)
        back = ef.load_pgm(img)
        assert max(abs(x - y) for ra, rb in zip(clean, back) for x, y in zip(ra, rb)) <= 1 / 65535

    try:
        model.denoise([[0.0] * 24 for _ in range(24)])
    except ValueError as e:
        assert "16" in str(e)
    else:
        raise AssertionError("expected a size error")

    err = ef.gradcheck(seeds=2)
    assert err < ef.GRADCHECK_TOLERANCE, err
    print(f"gradcheck max rel err {err:.2e}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
