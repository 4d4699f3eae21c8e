"""Smoke test for the crsynthnet extension module.

Build first:  pip install --no-build-isolation -e crates/python
Run:          python3 python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import crsynthnet as cs


def check(name, ok):
    print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return ok


def main():
    results = []
    cfg = cs.RunConfig("unused", tiny=True)
    cfg.validate()
    results.append(check("config round trip", cs.RunConfig.from_toml(cfg.to_toml()).hash() == cfg.hash()))

    x = cs.Tensor.uniform([1, 3, 32, 32], seed=1, low=0.0, high=1.0)
    results.append(check("psnr(x, x) is the cap", cs.psnr(x, x) == cs.PSNR_CAP))
    results.append(check("ssim(x, x) = 1", abs(cs.ssim(x, x) - 1.0) < 1e-6))
    a = cs.Tensor([0.0] * 4, [1, 1, 2, 2])
    b = cs.Tensor([0.1] * 4, [1, 1, 2, 2])
    results.append(check("mse 0.01 gives 20 dB", abs(cs.psnr(a, b) - 20.0) < 1e-9))
    feats = [[math.sin(i + j) for j in range(4)] for i in range(20)]
    results.append(check("fid(A, A) = 0", abs(cs.fid(feats, feats)) < 1e-6))

    w = cs.Tensor.uniform([1, 2, 4, 4], seed=3)
    norm = math.sqrt(sum(v * v for v in w.tolist()))
    real = cs.Tensor.uniform([3, 2, 4, 4], seed=4)
    fake = cs.Tensor.uniform([3, 2, 4, 4], seed=5)
    gp = cs.linear_gradient_penalty(w, real, fake)
    results.append(check("linear critic penalty", abs(gp - (norm - 1.0) ** 2) < 1e-5))

    sar1 = cs.Tensor.uniform([1, 2, 64, 64], seed=6)
    sar2 = cs.Tensor.uniform([1, 2, 64, 64], seed=7)
    opt1 = cs.Tensor.uniform([1, 3, 64, 64], seed=8)
    g = cs.Generator(cfg, seed=0)
    y = g.forward(sar1, sar2, opt1)
    results.append(check("generator output shape", y.shape == [1, 3, 64, 64]))
    results.append(check("generator output range", all(-1.0 < v < 1.0 for v in y.tolist())))
    d = cs.Discriminator(cfg, seed=0)
    maps = d.forward(y, sar1, sar2, opt1)
    results.append(check("three critic score maps", len(maps) == 3))
    full = g.num_parameters()
    results.append(check("ablation shrinks generator", cs.Generator(cfg, ablation="No_FusionAtt").num_parameters() < full))

    sched = cs.PlateauScheduler()
    lr = sched.step(20.0, 0.001)
    for _ in range(10):
        lr = sched.step(19.0, lr)
    results.append(check("plateau halves lr", lr == 0.0005))

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp) / "corpus"
        h1 = cs.make_toy_corpus(str(root), n=4, size=64, seed=7)
        h2 = cs.make_toy_corpus(str(root), n=4, size=64, seed=7, force=True)
        results.append(check("toy corpus hash is stable", h1 == h2))
        ev = cs.evaluate(str(root), str(root))
        results.append(check("evaluate(ref, ref)", ev["tiles"] == 4 and ev["psnr"] == cs.PSNR_CAP))
        cfg.manifest = str(root / "manifest.jsonl")
        cfg.epochs = 1
        cfg.batch_size = 2
        out = cs.train(cfg, str(Path(tmp) / "run"))
        results.append(check("one-epoch training run", out["epochs"] == 1 and out["steps"] == 2))

    print(f"{sum(results)}/{len(results)} checks passed")
    raise SystemExit(0 if all(results) else 1)


if __name__ == "__main__":
    main()
