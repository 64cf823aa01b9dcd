"""``wnetct`` command line: simulate, train, eval, enhance, montage, paramcount, selftest.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
``WNETCT_OUTPUT_DIR`` overrides the default output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, ct_sim, models, pipeline, spectral
from .io import ContainerError, read_tensor, write_csv, write_tensor
from .objectives import compare_methods

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
OUTPUT_ENV = "WNETCT_OUTPUT_DIR"
# Published I U-net total; the template here reproduces only the cross-variant identities.
REFERENCE_I_COUNT = 11_690_753

logger = logging.getLogger("wnetct")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _output_dir(arg: str | None, default: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUTPUT_ENV, "wnetct-out")) / default


def _load_config(path) -> pipeline.RunConfig:
    try:
        return pipeline.load_run_config(path)
    except FileNotFoundError as exc:
        raise DataError(f"config not found: {path}") from exc
    except (json.JSONDecodeError, TypeError, ValueError, KeyError) as exc:
        raise DataError(f"invalid config {path}: {exc}") from exc


def _load_dataset(path) -> pipeline.Dataset:
    try:
        return pipeline.load_dataset(path)
    except (FileNotFoundError, ContainerError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load dataset {path}: {exc}") from exc


def _load_model(path) -> models.WNet:
    try:
        return models.load_checkpoint(path)
    except (FileNotFoundError, ContainerError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    data = cfg.data
    if args.no_noise:
        data = replace(data, noiseless=True)
    out = _output_dir(args.out, "dataset")
    try:
        out.mkdir(parents=True, exist_ok=True)
        dataset = pipeline.build_dataset(data)
        pipeline.save_dataset(dataset, out)
    except PermissionError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    sizes = {g: len(dataset.groups[g]) for g in pipeline.GROUPS}
    print(f"wrote {len(dataset.slice_ids)} slices to {out} (phantoms per split: {sizes})")
    return EXIT_OK


def _k_balance(spec, dataset, cfg) -> float | None:
    """Ratio of the MS-SSIM term to the L1 term of the first Fourier stage at initialization."""
    if "fourier" not in spec.domains:
        return None
    from .nn.tensor import no_grad
    from .objectives import l1_loss, ms_ssim, fourier_range, stage_targets

    x, y, _ = dataset.subset("train")
    x, y = x[:cfg.train.batch_size, None].astype(np.float32), y[:cfg.train.batch_size, None].astype(np.float32)
    model = models.compose(spec, np.random.default_rng(cfg.train.seed))
    with no_grad():
        _, stages = model.forward(x)
    idx = stages.domains.index("fourier")
    target = stage_targets(y, stages.domains, spec.shifted, spec.spectrum_scale)[idx]
    out = stages.outputs[idx]
    ms_term = cfg.loss.alpha * cfg.loss.k_fourier * (1 - ms_ssim(out, target, cfg.loss, fourier_range(target)).item())
    l1_term = (1 - cfg.loss.alpha) * l1_loss(out, target).item()
    return ms_term / l1_term if l1_term > 0 else math.inf


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.threads is not None:
        cfg.train = replace(cfg.train, threads=args.threads)
    dataset = _load_dataset(args.data) if args.data else pipeline.build_dataset(cfg.data)
    out = _output_dir(args.out, "runs")
    names = args.network or cfg.networks
    for name in names:
        spec = models.wnet_spec(name, cfg.depth, cfg.shifted, cfg.spectrum_scale, cfg.fourier_init)
        ratio = _k_balance(spec, dataset, cfg)
        if ratio is not None:
            print(f"{name}: Fourier-stage MS-SSIM/L1 term ratio at initialization = {ratio:.4g}")
        result = pipeline.train(spec, dataset, cfg.train, cfg.loss, cfg.augment, out / name)
        last = result.history[-1]
        print(f"{name}: best epoch {result.best_epoch}, final val_ssim {last['val_ssim']:.4f}, "
              f"checkpoint {result.checkpoint.parent}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = _load_dataset(args.data)
    nets = [_load_model(c) for c in args.checkpoints]
    report = pipeline.evaluate(nets, dataset, args.split)
    out = _output_dir(args.out, "eval")
    out.mkdir(parents=True, exist_ok=True)
    meta = {"checkpoints": [str(c) for c in args.checkpoints], "data": str(args.data), "split": args.split}
    write_csv(out / "metrics.csv", report.header, report.rows(), meta)
    stat_rows, text = [], []
    for metric in ("ssim", "psnr_db", "nrmse_pct"):
        res = compare_methods(report, metric)
        stat_rows.append([metric, "friedman", "", "", f"{res.chi2:.6g}", res.df, f"{res.p_value:.6g}", ""])
        text.append(f"{metric}: Friedman chi2={res.chi2:.4g} df={res.df} p={res.p_value:.4g}")
        for pr in res.pairwise:
            stat_rows.append([metric, "wilcoxon", pr.a, pr.b, "", "", f"{pr.raw_p:.6g}", f"{pr.corrected_p:.6g}"])
            text.append(f"  {pr.a} vs {pr.b}: p={pr.raw_p:.4g} corrected={pr.corrected_p:.4g}"
                        f"{' *' if pr.significant else ''}")
    write_csv(out / "stats.csv", ["metric", "test", "a", "b", "chi2", "df", "p", "p_corrected"], stat_rows, meta)
    summary = report.summary()
    lines = [f"{m}: SSIM {s['ssim'][0]:.4f}±{s['ssim'][1]:.4f}  PSNR {s['psnr_db'][0]:.2f}±{s['psnr_db'][1]:.2f} dB  "
             f"NRMSE {s['nrmse_pct'][0]:.2f}±{s['nrmse_pct'][1]:.2f} %" for m, s in summary.items()]
    (out / "stats.txt").write_text("\n".join(lines + [""] + text) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _read_image(path: Path) -> np.ndarray:
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image

            return np.asarray(Image.open(path), dtype=np.float64) / 65535.0
        return read_tensor(path)
    except (OSError, ContainerError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _write_png16(path: Path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def cmd_enhance(args) -> int:
    model = _load_model(args.checkpoint)
    image = _read_image(Path(args.input))
    norm = _load_dataset(args.data).norm if args.data else None
    if image.ndim not in (2, 3) or image.shape[-1] != image.shape[-2]:
        raise DataError(f"expected a square image or stack of square images, got shape {image.shape}")
    side, multiple = image.shape[-1], max(cfg.multiple for _, cfg in model.spec.stages)
    if side % multiple:
        raise DataError(f"image size {side} is not divisible by {multiple} required by {model.name}")
    stack = image[None] if image.ndim == 2 else image
    if norm is not None:
        stack = norm.apply(stack)
    out = model.enhance(stack.astype(model.dtype))
    out = out[0] if image.ndim == 2 else out
    dest = Path(args.output)
    if dest.suffix.lower() == ".png":
        if out.ndim != 2:
            raise DataError("PNG output needs a single image")
        _write_png16(dest, out)
    else:
        write_tensor(dest, norm.invert(out.astype(np.float64)) if norm is not None else out)
    print(f"wrote {dest}")
    return EXIT_OK


def cmd_montage(args) -> int:
    dataset = _load_dataset(args.data)
    try:
        i = dataset.index_of(args.slice)
    except KeyError as exc:
        raise DataError(str(exc)) from exc
    panels = [np.clip(dataset.ldct[i], 0, 1)]
    for c in args.checkpoints:
        panels.append(_load_model(c).enhance(dataset.ldct[i:i + 1])[0])
    panels.append(np.clip(dataset.rdct[i], 0, 1))
    gap = np.ones((panels[0].shape[0], 2))
    row = np.concatenate([p for panel in panels for p in (panel, gap)][:-1], axis=1)
    dest = Path(args.out) if args.out else _output_dir(None, "montage") / f"{args.slice}.png"
    dest.parent.mkdir(parents=True, exist_ok=True)
    _write_png16(dest, row)
    print(f"wrote {dest} (LDCT | {' | '.join(Path(c).name for c in args.checkpoints)} | RDCT)")
    return EXIT_OK


def cmd_paramcount(args) -> int:
    names = args.names or list(models.NAMES)
    for n in names:
        if n not in models.NAMES:
            raise UsageError(f"unknown network {n!r}; choose from {', '.join(models.NAMES)}")
    counts = {n: models.spec_param_formula(models.wnet_spec(n, args.depth)) for n in models.NAMES}
    if args.build:
        for n in names:
            built = models.param_count(models.compose(n, 0, depth=args.depth))
            if built != counts[n]:
                print(f"FAIL {n}: built {built} != closed form {counts[n]}")
                return EXIT_NUMERICAL
    print(f"{'network':<8}{'parameters':>14}")
    for n in names:
        print(f"{n:<8}{counts[n]:>14,}")
    c = counts
    checks = [("count(F) - count(I) = 641", c["F"] - c["I"] == 641),
              ("count(II) = 2 count(I)", c["II"] == 2 * c["I"]),
              ("count(FF) = 2 count(F)", c["FF"] == 2 * c["F"]),
              ("count(FI) = count(IF)", c["FI"] == c["IF"]),
              ("count(FI) = count(I) + count(F)", c["FI"] == c["I"] + c["F"])]
    for label, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'} {label}")
    print(f"INFO reference I U-net total {REFERENCE_I_COUNT:,} vs {c['I']:,} here "
          f"(difference {c['I'] - REFERENCE_I_COUNT:+,}; informational)")
    return EXIT_OK if all(ok for _, ok in checks) else EXIT_NUMERICAL


def _selftest_checks():
    from .nn import ops
    from .nn.gradcheck import check_gradients
    from .nn.tensor import Tensor

    def radon_disk():
        g = ct_sim.parallel_geometry(256, 8, oversample=1)
        sino = ct_sim.radon(ct_sim.make_phantom(ct_sim.disk_phantom(0.5), 256), g).values
        chord = 2 * np.sqrt(np.clip(0.25 ** 2 - g.offsets ** 2, 0, None))
        err = np.abs(sino - chord).max() / 0.5
        return err < 0.02, f"max chord error {err:.3%} of peak"

    def fft_round_trip():
        x = np.random.default_rng(0).standard_normal((64, 64))
        back, _ = spectral.ifft2(spectral.fft2(x))
        pair = spectral.pack(spectral.fft2(x, shifted=True))
        lossless = spectral.pack(spectral.unpack(pair)).data.tobytes() == pair.data.tobytes()
        err = np.abs(back - x).max()
        return err < 1e-10 and lossless, f"max error {err:.2e}, pack/unpack bitwise {lossless}"

    def gradients():
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True, name="x")
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True, name="w")
        up = Tensor(rng.standard_normal((3, 1, 2, 2)), requires_grad=True, name="up")
        r = rng.standard_normal((1, 1, 6, 6))

        def fn():
            h = ops.maxpool2(ops.relu(ops.conv2d(x, w)))
            y = ops.conv_transpose2x2(h, up)
            z, _ = ops.spectrum_to_image(ops.image_to_spectrum(y), True)
            return (z * r).sum()
        err = max(check_gradients(fn, [x, w, up]).values())
        return err < 1e-4, f"max relative error {err:.2e}"

    def adam():
        w = [np.array([1.0])]
        state = pipeline.AdamState.zeros_like(w)
        cfg = pipeline.TrainConfig(lr=0.1)
        pipeline.adam_step(w, [2 * w[0]], state, 1, cfg)
        ok = abs(w[0][0] - (1 - 0.1 * 2 / (2 + 1e-8))) < 1e-12
        return ok, f"w after one step {w[0][0]:.10f}"

    def central_slice():
        img = ct_sim.make_phantom(ct_sim.shepp_logan(), 128)
        corr = min(ct_sim.central_slice_check(img, a) for a in np.arange(8) * math.pi / 8)
        return corr >= 0.99, f"min correlation over 8 angles {corr:.5f}"

    return [("radon disk chord", radon_disk), ("fft round trip", fft_round_trip),
            ("gradient check", gradients), ("adam scalar step", adam), ("central slice", central_slice)]


def cmd_selftest(args) -> int:
    ok_all = True
    for label, check in _selftest_checks():
        ok, detail = check()
        ok_all &= bool(ok)
        print(f"{'PASS' if ok else 'FAIL'} {label}: {detail}")
    return EXIT_OK if ok_all else EXIT_NUMERICAL


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wnetct", description="Dual-domain U-net cascades for low-dose CT enhancement.")
    p.add_argument("--version", action="version", version=f"wnetct {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads; 1 guarantees bitwise reproducibility")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a paired LDCT/RDCT dataset")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--no-noise", action="store_true", help="noiseless acquisition (LDCT equals RDCT)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train the configured networks")
    s.add_argument("config")
    s.add_argument("--data", help="dataset directory (simulated from the config when omitted)")
    s.add_argument("--out")
    s.add_argument("--network", action="append", choices=models.NAMES)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics and statistics on a dataset split")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=pipeline.GROUPS)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("enhance", help="run a checkpoint on an image file (.wnct or 16-bit .png)")
    s.add_argument("checkpoint")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--data", help="dataset whose normalization maps raw attenuation to [0, 1]")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("montage", help="PNG strip: LDCT | networks | RDCT")
    s.add_argument("checkpoints", nargs="*")
    s.add_argument("--data", required=True)
    s.add_argument("--slice", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_montage)

    s = sub.add_parser("paramcount", help="parameter counts and cross-variant identities")
    s.add_argument("names", nargs="*")
    s.add_argument("--depth", type=int, default=4)
    s.add_argument("--build", action="store_true", help="also instantiate each network and count")
    s.set_defaults(func=cmd_paramcount)

    s = sub.add_parser("selftest", help="run the analytic oracles")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("wnetct: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    try:
        with limiter:
            return args.func(args)
    except UsageError as exc:
        print(f"wnetct: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"wnetct: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except pipeline.NumericalError as exc:
        print(f"wnetct: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
