"""Acceptance suite: one PASS/FAIL line per criterion.

Under pytest the lines are shown live and repeated in the terminal summary.
``python tests/test_acceptance.py`` runs the same checks without pytest.
"""
from __future__ import annotations

import functools
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from wnetct import ct_sim, models, spectral
from wnetct import pipeline as P
from wnetct.nn import ops
from wnetct.nn.gradcheck import check_gradients
from wnetct.nn.tensor import Tensor
from wnetct.objectives import (LossConfig, bonferroni, combined_loss, combined_loss_value, friedman_test,
                               network_loss, posthoc_pairwise)


def _print_line(number: int, ok: bool, detail: str) -> None:
    print(f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {detail}", flush=True)


def check_1():
    t = time.perf_counter()
    c = {n: models.spec_param_formula(models.wnet_spec(n)) for n in models.NAMES}
    dt = time.perf_counter() - t
    ok = (c["F"] - c["I"] == 641 and c["II"] == 2 * c["I"] and c["FF"] == 2 * c["F"]
          and c["FI"] == c["IF"] == c["I"] + c["F"])
    # The closed form must agree with the instantiated networks.
    built = all(models.param_count(models.compose(n, 0)) == c[n] for n in models.NAMES)
    return ok and built and dt < 1, (f"F-I={c['F'] - c['I']}, II=2I {c['II'] == 2 * c['I']}, FF=2F {c['FF'] == 2 * c['F']}, "
                                     f"FI=IF=I+F {c['FI'] == c['IF'] == c['I'] + c['F']}, built networks agree {built}, "
                                     f"{dt * 1e3:.2f} ms")


def check_2():
    t = time.perf_counter()
    size = 256
    truth = ct_sim.make_phantom(ct_sim.shepp_logan(), size)
    rec = ct_sim.fbp(ct_sim.radon(truth, ct_sim.parallel_geometry(size, 360)), size)
    m = ct_sim.circle_mask(size)
    err = 100 * np.linalg.norm((rec - truth)[m]) / np.linalg.norm(truth[m])
    g = ct_sim.parallel_geometry(size, 12, oversample=1)
    sino = ct_sim.radon(ct_sim.make_phantom(ct_sim.disk_phantom(0.5), size), g).values
    chord = 2 * np.sqrt(np.clip(0.25 ** 2 - g.offsets ** 2, 0, None))
    chord_err = 100 * np.abs(sino - chord[None]).max() / chord.max()
    dt = time.perf_counter() - t
    return err < 5 and chord_err < 2 and dt < 30, f"FBP NRMSE {err:.2f}% (<5), chord error {chord_err:.2f}% of peak (<2), {dt:.1f}s"


def check_3():
    t = time.perf_counter()
    img = ct_sim.make_phantom(ct_sim.shepp_logan(), 256)
    corr = [ct_sim.central_slice_check(img, a) for a in np.linspace(0, math.pi, 8, endpoint=False)]
    dt = time.perf_counter() - t
    return min(corr) >= 0.99 and dt < 10, f"min correlation over 8 angles {min(corr):.5f} (>=0.99), {dt:.1f}s"


def check_4():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {np.float32: 0.0, np.float64: 0.0}
    parseval, lossless = 0.0, True
    for size in (32, 64, 128, 256):
        for _ in range(20):
            x = rng.random((size, size))
            for dtype in worst:
                xi = x.astype(dtype)
                back, _ = spectral.ifft2(spectral.fft2(xi))
                worst[dtype] = max(worst[dtype], float(np.abs(back - xi).max()))
            s = spectral.fft2(x)
            parseval = max(parseval, abs(np.sum(np.abs(s.values) ** 2) / np.sum(x ** 2) - 1))
            pair = spectral.pack(s)
            lossless &= spectral.unpack(pair).values.tobytes() == s.values.tobytes()
    dt = time.perf_counter() - t
    ok = worst[np.float32] < 1e-5 and worst[np.float64] < 1e-10 and parseval < 1e-4 and lossless and dt < 5
    return ok, (f"round trip f32 {worst[np.float32]:.1e} (<1e-5) f64 {worst[np.float64]:.1e} (<1e-10), "
                f"Parseval {parseval:.1e}, pack/unpack bitwise {lossless}, {dt:.1f}s")


def _gradient_cases():
    rng = np.random.default_rng(5)

    def leaf(*shape, name):
        return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)

    x, w, b = leaf(2, 3, 6, 6, name="x"), leaf(4, 3, 3, 3, name="w"), leaf(4, name="b")
    yield "conv2d", lambda: (ops.conv2d(x, w, b) * Tensor(rng_fixed(0, (2, 4, 6, 6)))).sum(), [x, w, b]
    wt, bt = leaf(3, 2, 2, 2, name="wt"), leaf(2, name="bt")
    yield "conv_transpose2x2", lambda: (ops.conv_transpose2x2(x, wt, bt) ** 2).sum(), [x, wt, bt]
    ws, bs = leaf(2, 3, 2, 2, name="ws"), leaf(2, name="bs")
    yield "conv2x2_stride2", lambda: (ops.conv2x2_stride2(x, ws, bs) ** 2).sum(), [x, ws, bs]
    yield "maxpool2", lambda: (ops.maxpool2(x) * Tensor(rng_fixed(1, (2, 3, 3, 3)))).sum(), [x]
    yield "avgpool2", lambda: (ops.avgpool2(x) ** 2).sum(), [x]
    yield "relu", lambda: (ops.relu(x) * Tensor(rng_fixed(2, x.shape))).sum(), [x]
    z = leaf(2, 1, 6, 6, name="z")
    yield "concat_channels", lambda: (ops.concat_channels(x, z) ** 2).sum(), [x, z]
    g = leaf(1, 1, 16, 16, name="g")
    taps = np.exp(-((np.arange(11) - 5) ** 2) / 4.5)
    yield "gaussian_filter_valid", lambda: (ops.gaussian_filter_valid(g, taps / taps.sum()) ** 2).sum(), [g]
    yield "image_to_spectrum", lambda: (ops.image_to_spectrum(g) * Tensor(rng_fixed(3, (1, 2, 16, 16)))).sum(), [g]
    s = leaf(1, 2, 16, 16, name="s")
    yield "spectrum_to_image", lambda: (ops.spectrum_to_image(s)[0] * Tensor(rng_fixed(4, (1, 1, 16, 16)))).sum(), [s]

    pred = Tensor(np.random.default_rng(6).random((2, 1, 32, 32)), requires_grad=True, name="pred")
    target = np.random.default_rng(7).random((2, 1, 32, 32))
    yield "combined loss (image)", lambda: combined_loss(pred, target, "image"), [pred]
    sp = Tensor(spectral.image_to_channels(pred.data) + 0.01, requires_grad=True, name="spectrum")
    st = spectral.image_to_channels(target)
    yield "combined loss (fourier)", lambda: combined_loss(sp, st, "fourier"), [sp]

    model = models.compose("FI", 0, np.float64, depth=2)
    # Off the identity start: its lanes sit on relu kinks at the exact zeros of real spectra.
    jitter = np.random.default_rng(99)
    for p in model.parameters():
        p.data += 1e-2 * jitter.standard_normal(p.data.shape)
    mx = np.random.default_rng(8).random((2, 1, 16, 16))
    my = np.clip(mx + 0.05 * np.random.default_rng(9).standard_normal(mx.shape), 0, 1)
    fourier_leaves = [p for p in model.parameters() if p.name.startswith("stage0.") and
                      any(k in p.name for k in ("enc0.conv0", "dec0.up", "final"))]
    yield ("micro FI through bridge, full loss",
           lambda: network_loss(model(mx)[1], my, LossConfig()), fourier_leaves)
    leaves = fourier_leaves + [p for p in model.parameters() if p.name.startswith("stage1.final")]
    yield ("micro FI, all stages, K_fourier=1",
           lambda: network_loss(model(mx)[1], my, LossConfig(k_fourier=1.0)), leaves)


def rng_fixed(seed, shape):
    return np.random.default_rng(100 + seed).standard_normal(shape)


def check_5():
    t = time.perf_counter()
    worst, names = 0.0, []
    for name, fn, leaves in _gradient_cases():
        err = max(check_gradients(fn, leaves, h=1e-6, max_entries=20).values())
        worst = max(worst, err)
        names.append(name)
    dt = time.perf_counter() - t
    return worst < 1e-4 and dt < 120, f"{len(names)} gradient checks, worst relative error {worst:.1e} (<1e-4), {dt:.1f}s"


def check_6():
    img = combined_loss_value(0.5, 0.1, "image")
    fou = combined_loss_value(0.5, 0.1, "fourier")
    ok = abs(img - 0.436) <= 1e-9 * 0.436 and abs(fou - 840_000.016) <= 1e-9 * 840_000.016
    return ok, f"image {img!r} (0.436), fourier {fou!r} (840000.016)"


def check_7():
    w, m, v, b1, b2, lr, eps = 1.0, 0.0, 0.0, 0.9, 0.999, 0.1, 1e-8
    hand = []
    for t in range(1, 4):
        g = 2 * w
        m, v = b1 * m + (1 - b1) * g, b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        hand.append(w)
    params = [np.array([1.0])]
    state = P.AdamState.zeros_like(params)
    ours = []
    for t in range(1, 4):
        P.adam_step(params, [2 * params[0]], state, t, P.TrainConfig(lr=lr))
        ours.append(float(params[0][0]))
    dev = max(abs(a - b) for a, b in zip(ours, hand))
    return dev < 1e-9, f"trajectory {[round(x, 10) for x in ours]}, max deviation {dev:.1e} (<1e-9)"


def check_8():
    base = np.arange(10) * 0.001
    res = friedman_test(np.stack([base + 0.9, base + 0.8, base + 0.7]))
    pairs = posthoc_pairwise(np.stack([base + 0.9, base + 0.8, base + 0.7]), ["A", "B", "C"])
    exact = all(pr.corrected_p == min(1.0, pr.raw_p * 3) for pr in pairs) and bonferroni(0.001, 21) == 0.021
    ok = math.isclose(res.chi2, 20.0) and res.df == 2 and abs(res.p_value / 4.5e-5 - 1) < 0.05 and exact
    return ok, f"chi2 {res.chi2:g} df {res.df} p {res.p_value:.3g}; Bonferroni factor C(k,2) exact: {exact}"


def desk_config() -> P.RunConfig:
    return P.RunConfig(networks=["I", "FI"])


def _desk_run(out: Path, evaluate: bool):
    cfg = desk_config()
    t = time.perf_counter()
    dataset = P.build_dataset(cfg.data)
    results = {}
    for spec in cfg.specs():
        name = spec.name
        results[name] = P.train(spec, dataset, cfg.train, cfg.loss, cfg.augment, out / name, cfg.depth)
    report = P.evaluate([r.model for r in results.values()], dataset) if evaluate else None
    return results, report, time.perf_counter() - t


@functools.lru_cache(maxsize=None)
def desk_runs():
    root = Path(tempfile.mkdtemp(prefix="wnetct-acceptance-"))
    first = _desk_run(root / "run1", evaluate=True)
    return root, first


def check_9():
    root, (results, report, dt) = desk_runs()
    summary = report.summary()
    base = summary[P.BASELINE]["ssim"][0]
    gains = {n: summary[n]["ssim"][0] - base for n in results}
    ok = all(g >= 0.02 for g in gains.values())
    order = "FI > I" if summary["FI"]["ssim"][0] > summary["I"]["ssim"][0] else "FI <= I"
    detail = (f"LDCT SSIM {base:.4f}; " + ", ".join(f"{n} {summary[n]['ssim'][0]:.4f} ({g:+.4f})"
                                                     for n, g in gains.items())
              + f" (each >= +0.02); ordering {order} (reported only); {dt / 60:.1f} min")
    return ok, detail


def check_10():
    root, _ = desk_runs()
    second = root / "run2"
    _desk_run(second, evaluate=False)
    same = {n: (root / "run1" / n / "history.csv").read_bytes() == (second / n / "history.csv").read_bytes()
            for n in desk_config().networks}
    return all(same.values()), "history CSVs bitwise identical: " + ", ".join(f"{n} {v}" for n, v in same.items())


CHECKS = {i: globals()[f"check_{i}"] for i in range(1, 11)}


@pytest.mark.parametrize("number", [1, 2, 3, 4, 5, 6, 7, 8])
def test_property_criterion(number, emit):
    ok, detail = CHECKS[number]()
    emit(number, ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_desk_scale_improvement(emit):
    ok, detail = check_9()
    emit(9, ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_desk_scale_reproducible(emit):
    ok, detail = check_10()
    emit(10, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for number in range(1, 11):
        ok, detail = CHECKS[number]()
        _print_line(number, ok, detail)
        failed += not ok
    sys.exit(1 if failed else 0)
