"""Dataset assembly, augmentation, Adam training loop and test-set evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from threadpoolctl import threadpool_limits

from . import ct_sim
from .io import config_hash, read_tensor, write_csv, write_tensor
from .models import WNet, WNetSpec, compose, load_checkpoint, save_checkpoint, wnet_spec
from .nn.tensor import backward, no_grad
from .objectives import LossConfig, MetricReport, network_loss, ssim_metric

logger = logging.getLogger(__name__)

GROUPS = ("train", "val", "test")
HISTORY_HEADER = ["epoch", "train_loss", "val_loss", "val_ssim"]


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


# ---------------------------------------------------------------- configs

@dataclass(frozen=True)
class SplitConfig:
    proportions: tuple[int, int, int] = (5, 2, 3)

    def __post_init__(self):
        if len(self.proportions) != 3 or min(self.proportions) < 0 or sum(self.proportions) == 0:
            raise ValueError("proportions must be three non-negative integers with a positive sum")

    def assign(self, n_phantoms: int) -> dict[str, list[int]]:
        """Contiguous phantom-id blocks; counts follow the proportions with largest-remainder rounding."""
        total = sum(self.proportions)
        exact = [n_phantoms * p / total for p in self.proportions]
        counts = [math.floor(e) for e in exact]
        order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
        for i in order[: n_phantoms - sum(counts)]:
            counts[i] += 1
        groups, start = {}, 0
        for name, c in zip(GROUPS, counts):
            groups[name] = list(range(start, start + c))
            start += c
        return groups


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 4
    lr: float = 1e-3
    lr_fourier: float = 1e-5  # step size for Fourier-stage parameters
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0  # 0: only the best-validation checkpoint
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.lr <= 0 or self.lr_fourier <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ValueError("invalid Adam hyper-parameters")


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    max_shift: int = 16
    max_rotation: float = 10.0
    p_flip_h: float = 0.5
    p_flip_v: float = 0.5


@dataclass(frozen=True)
class AugmentParams:
    dx: int = 0
    dy: int = 0
    angle: float = 0.0
    flip_h: bool = False
    flip_v: bool = False

    @property
    def is_identity(self) -> bool:
        return self.dx == 0 and self.dy == 0 and self.angle == 0.0 and not self.flip_h and not self.flip_v


@dataclass(frozen=True)
class NormalizationConfig:
    """Affine map ``(v - offset) / span`` onto [0, 1]."""

    offset: float = 0.0
    span: float = 1.0

    def __post_init__(self):
        if not self.span > 0:
            raise ValueError("span must be positive (map must be strictly increasing)")

    @classmethod
    def fit(cls, *arrays: np.ndarray) -> NormalizationConfig:
        lo = min(float(a.min()) for a in arrays)
        hi = max(float(a.max()) for a in arrays)
        return cls(lo, hi - lo if hi > lo else 1.0)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.offset) / self.span

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.span + self.offset


@dataclass(frozen=True)
class DataConfig:
    size: int = 64
    n_phantoms: int = 10
    slices_per_phantom: int = 20
    n_angles: int | None = None
    window: str = "ramlak"
    dose: ct_sim.DoseModel = ct_sim.DoseModel(i0_routine=1e6)  # calibrated: LDCT SSIM ~0.82 at 64 px
    attenuation_scale: float = 8.0
    noiseless: bool = False
    seed: int = 0
    split: SplitConfig = SplitConfig()

    def __post_init__(self):
        if self.size < 16 or self.n_phantoms < 1 or self.slices_per_phantom < 1:
            raise ValueError("size >= 16, n_phantoms >= 1 and slices_per_phantom >= 1 are required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dose"] = self.dose.to_dict()
        d["split"] = {"proportions": list(self.split.proportions)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DataConfig:
        d = dict(d)
        if "dose" in d:
            d["dose"] = ct_sim.DoseModel.from_dict(d["dose"])
        if "split" in d:
            d["split"] = SplitConfig(tuple(d["split"]["proportions"]))
        return cls(**d)


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    """Normalized LDCT/RDCT pairs with their phantom membership."""

    ldct: np.ndarray           # (S, H, W), normalized
    rdct: np.ndarray
    slice_ids: list[str]
    phantom_ids: np.ndarray    # (S,)
    groups: dict[str, list[int]]
    norm: NormalizationConfig
    config: DataConfig | None = None

    def __post_init__(self):
        check_split(self.groups)

    def indices(self, group: str) -> np.ndarray:
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        return np.flatnonzero(np.isin(self.phantom_ids, self.groups[group]))

    def subset(self, group: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
        idx = self.indices(group)
        return self.ldct[idx], self.rdct[idx], [self.slice_ids[i] for i in idx]

    def index_of(self, slice_id: str) -> int:
        try:
            return self.slice_ids.index(slice_id)
        except ValueError:
            raise KeyError(f"unknown slice id {slice_id!r}") from None


def check_split(groups: dict[str, list[int]]) -> None:
    seen: dict[int, str] = {}
    for name in GROUPS:
        for pid in groups.get(name, []):
            if pid in seen:
                raise ValueError(f"phantom {pid} appears in both {seen[pid]!r} and {name!r}")
            seen[pid] = name


def build_dataset(config: DataConfig = DataConfig()) -> Dataset:
    """Simulate every slice of every phantom; deterministic given ``config.seed``."""
    geom = ct_sim.parallel_geometry(config.size, config.n_angles)
    root = np.random.SeedSequence(config.seed)
    phantom_seeds = root.spawn(config.n_phantoms)
    ldct, rdct, truth, ids, pids = [], [], [], [], []
    for pid, ss in enumerate(phantom_seeds):
        shape_seed, noise_seed = ss.spawn(2)
        volume = ct_sim.random_abdomen(np.random.default_rng(shape_seed), config.attenuation_scale)
        noise_seeds = noise_seed.generate_state(config.slices_per_phantom)
        for k, spec in enumerate(volume.slices(config.slices_per_phantom)):
            dose = replace(config.dose, rng_seed=int(noise_seeds[k]), noiseless=config.noiseless or config.dose.noiseless)
            lo, hi, gt = ct_sim.make_pair(spec, geom, dose, config.size, config.window)
            ldct.append(lo)
            rdct.append(hi)
            truth.append(gt)
            ids.append(f"p{pid:03d}_s{k:03d}")
            pids.append(pid)
    ldct, rdct = np.stack(ldct), np.stack(rdct)
    # Noise-free attenuation range, so air maps to 0 regardless of noise.
    norm = NormalizationConfig.fit(np.stack(truth))
    return Dataset(norm.apply(ldct), norm.apply(rdct), ids, np.array(pids),
                   config.split.assign(config.n_phantoms), norm, config)


def save_dataset(dataset: Dataset, directory) -> Path:
    """Per-slice tensor files (raw attenuation) plus ``manifest.json``."""
    directory = Path(directory)
    (directory / "slices").mkdir(parents=True, exist_ok=True)
    slices = []
    for i, sid in enumerate(dataset.slice_ids):
        entry = {"id": sid, "phantom": int(dataset.phantom_ids[i])}
        for kind, arr in (("ldct", dataset.ldct), ("rdct", dataset.rdct)):
            rel = f"slices/{sid}_{kind}.wnct"
            write_tensor(directory / rel, dataset.norm.invert(arr[i]).astype(np.float64))
            entry[kind] = rel
        slices.append(entry)
    cfg = dataset.config
    manifest = {
        "format": "wnetct-dataset/1",
        "config": cfg.to_dict() if cfg else None,
        "geometry": ct_sim.parallel_geometry(cfg.size, cfg.n_angles).to_dict() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "normalization": asdict(dataset.norm),
        "split": dataset.groups,
        "slices": slices,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if "normalization" not in manifest:
        raise ValueError("manifest lacks normalization constants")
    norm = NormalizationConfig(**manifest["normalization"])
    ldct, rdct, ids, pids = [], [], [], []
    for entry in manifest["slices"]:
        ldct.append(read_tensor(directory / entry["ldct"]))
        rdct.append(read_tensor(directory / entry["rdct"]))
        ids.append(entry["id"])
        pids.append(entry["phantom"])
    cfg = DataConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    groups = {k: [int(v) for v in manifest["split"][k]] for k in GROUPS}
    return Dataset(norm.apply(np.stack(ldct)), norm.apply(np.stack(rdct)), ids, np.array(pids), groups, norm, cfg)


# ---------------------------------------------------------------- augmentation

def sample_augment(config: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    if not config.enabled:
        return AugmentParams()
    dx, dy = (int(v) for v in rng.integers(-config.max_shift, config.max_shift + 1, size=2))
    angle = float(rng.uniform(-config.max_rotation, config.max_rotation))
    flip_h, flip_v = (bool(v) for v in rng.random(2) < (config.p_flip_h, config.p_flip_v))
    return AugmentParams(dx, dy, angle, flip_h, flip_v)


def apply_augment(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Rotate about the centre and translate (bilinear, zero fill), then reflect."""
    out = np.asarray(image)
    if params.angle != 0.0 or params.dx or params.dy:
        th = math.radians(params.angle)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        centre = (np.array(out.shape) - 1) / 2.0
        # output (r, c) samples input at rot @ ((r, c) - centre - shift) + centre
        shift = np.array([params.dy, params.dx], dtype=float)
        offset = centre - rot @ (centre + shift)
        out = ndimage.affine_transform(out, rot, offset=offset, order=1, mode="constant", cval=0.0)
    if params.flip_h:
        out = out[:, ::-1]
    if params.flip_v:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def augment(pair: tuple[np.ndarray, np.ndarray], config: AugmentConfig, rng: np.random.Generator,
            params: AugmentParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Apply one sampled (or forced) transform identically to both members."""
    if params is None:
        params = sample_augment(config, rng)
    if params.is_identity:
        return pair[0], pair[1]
    return apply_augment(pair[0], params), apply_augment(pair[1], params)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, t: int,
              config: TrainConfig = TrainConfig(), lr: float | None = None) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update, in place. ``t`` counts from 1; ``lr`` overrides ``config.lr``."""
    if t < 1:
        raise ValueError("Adam step index t must be >= 1")
    lr = config.lr if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params, state


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: WNet
    history: list[dict]
    best_epoch: int
    step_losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def _validate(model: WNet, ldct, rdct, loss_cfg: LossConfig, batch_size: int) -> tuple[float, float]:
    if len(ldct) == 0:
        return float("nan"), float("nan")
    losses, ssims = [], []
    with no_grad():
        for sl in _batches(len(ldct), batch_size):
            x, y = ldct[sl][:, None].astype(model.dtype), rdct[sl][:, None].astype(model.dtype)
            out, stages = model.forward(x)
            losses.append(float(network_loss(stages, y, loss_cfg, model.spec.shifted, model.spec.spectrum_scale).data)
                          * len(x))
            pred = np.clip(out.data, 0.0, 1.0)
            ssims.extend(ssim_metric(p[0], t[0]) for p, t in zip(pred, y))
    return float(np.sum(losses) / len(ldct)), float(np.mean(ssims))


def history_rows(history: list[dict]) -> list[list[str]]:
    return [[str(h["epoch"])] + [repr(float(h[k])) for k in HISTORY_HEADER[1:]] for h in history]


def train(spec: WNetSpec | str, dataset: Dataset, train_cfg: TrainConfig = TrainConfig(),
          loss_cfg: LossConfig = LossConfig(), augment_cfg: AugmentConfig = AugmentConfig(),
          out_dir=None, depth: int = 4) -> TrainResult:
    """Minimize the summed per-stage loss; keep the best-validation-SSIM weights.

    With ``train_cfg.threads == 1`` BLAS is pinned to one thread so repeated
    runs are bitwise identical.
    """
    if isinstance(spec, str):
        spec = wnet_spec(spec, depth)
    limiter = threadpool_limits(limits=train_cfg.threads) if train_cfg.threads else nullcontext()
    with limiter:
        return _train(spec, dataset, train_cfg, loss_cfg, augment_cfg, out_dir)


def _train(spec, dataset, cfg, loss_cfg, aug_cfg, out_dir) -> TrainResult:
    dtype = np.dtype(cfg.precision)
    model = compose(spec, np.random.default_rng(cfg.seed), dtype)
    # One Adam state per stage so each domain gets its own step size.
    groups = []
    for (domain, _), stage in zip(spec.stages, model.stages):
        ps = stage.parameters()
        groups.append((ps, AdamState.zeros_like([p.data for p in ps]),
                       cfg.lr_fourier if domain == "fourier" else cfg.lr))
    params = model.parameters()
    tr_x, tr_y, _ = dataset.subset("train")
    va_x, va_y, _ = dataset.subset("val")
    if len(tr_x) == 0:
        raise ValueError("training split is empty")
    side = tr_x.shape[-1]
    for _, ucfg in spec.stages:
        if side % ucfg.multiple:
            raise ValueError(f"slice size {side} is not divisible by {ucfg.multiple}")
    out_dir = Path(out_dir) if out_dir is not None else None
    history, step_losses = [], []
    best = (-math.inf, 0, None)
    t = 0
    for epoch in range(1, cfg.epochs + 1):
        tic = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(tr_x))
        epoch_loss = 0.0
        for sl in _batches(len(order), cfg.batch_size):
            idx = order[sl]
            pairs = [augment((tr_x[i], tr_y[i]), aug_cfg, sample_rng(cfg.seed, epoch, int(i))) for i in idx]
            x = np.stack([p[0] for p in pairs])[:, None].astype(dtype)
            y = np.stack([p[1] for p in pairs])[:, None].astype(dtype)
            _, stages = model.forward(x)
            loss = network_loss(stages, y, loss_cfg, spec.shifted, spec.spectrum_scale)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, step {t + 1}")
            model.zero_grad()
            backward(loss)
            t += 1
            for ps, state, lr in groups:
                adam_step([p.data for p in ps], [p.grad for p in ps], state, t, cfg, lr)
            step_losses.append(value)
            epoch_loss += value * len(idx)
        val_loss, val_ssim = _validate(model, va_x, va_y, loss_cfg, cfg.batch_size)
        history.append({"epoch": epoch, "train_loss": epoch_loss / len(tr_x),
                        "val_loss": val_loss, "val_ssim": val_ssim})
        logger.info("%s epoch %d: train %.5g val %.5g ssim %.4f (%.1fs)", spec.name, epoch,
                    history[-1]["train_loss"], val_loss, val_ssim, time.perf_counter() - tic)
        # No validation data: the latest epoch is the best one.
        score = val_ssim if math.isfinite(val_ssim) else float(epoch)
        if score > best[0]:
            best = (score, epoch, [p.data.copy() for p in params])
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"epoch{epoch:03d}", cfg.seed, {"epoch": epoch})
    for p, saved in zip(params, best[2]):
        p.data[...] = saved
    result = TrainResult(model, history, best[1], step_losses)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(model, out_dir / "best", cfg.seed,
                                            {"epoch": best[1], "train": asdict(cfg)})
        write_csv(out_dir / "history.csv", HISTORY_HEADER, history_rows(history),
                  {"spec": spec.to_dict(), "train": asdict(cfg), "loss": asdict(loss_cfg), "augment": asdict(aug_cfg)})
    return result


# ---------------------------------------------------------------- evaluation

BASELINE = "FBP LDCT"


def evaluate(models, dataset: Dataset, group: str = "test", batch_size: int = 8,
             baseline: bool = True) -> MetricReport:
    """Per-slice metrics against the routine-dose target; outputs clamped to [0, 1].

    ``models`` may be WNet instances or checkpoint directories.
    """
    if isinstance(models, (WNet, str, Path)):
        models = [models]
    loaded = []
    for m in models:
        if isinstance(m, (str, Path)):
            if not (Path(m) / "manifest.json").is_file():
                raise FileNotFoundError(f"missing checkpoint {m}")
            m = load_checkpoint(m)
        loaded.append(m)
    ldct, rdct, ids = dataset.subset(group)
    report = MetricReport()
    if baseline:
        for x, y, sid in zip(ldct, rdct, ids):
            report.add(BASELINE, sid, np.clip(x, 0.0, 1.0), y)
    for model in loaded:
        out = model.enhance(ldct[:, None], batch_size)
        for p, y, sid in zip(out, rdct, ids):
            report.add(model.name, sid, p[0], y)
    return report


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    """Everything needed to reproduce a training run from one file."""

    networks: list[str] = field(default_factory=lambda: ["I", "FI"])
    depth: int = 4
    shifted: bool = True
    spectrum_scale: float = 1.0
    fourier_init: str = "identity"
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    loss: LossConfig = LossConfig()
    augment: AugmentConfig = AugmentConfig()

    def specs(self) -> list[WNetSpec]:
        return [wnet_spec(n, self.depth, self.shifted, self.spectrum_scale, self.fourier_init) for n in self.networks]

    def to_dict(self) -> dict:
        return {"networks": list(self.networks), "depth": self.depth, "shifted": self.shifted,
                "spectrum_scale": self.spectrum_scale, "fourier_init": self.fourier_init, "data": self.data.to_dict(),
                "train": asdict(self.train), "loss": asdict(self.loss), "augment": asdict(self.augment)}

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {"networks", "depth", "shifted", "spectrum_scale", "fourier_init", "data", "train", "loss", "augment"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        loss = dict(d.get("loss", {}))
        if "weights" in loss:
            loss["weights"] = tuple(loss["weights"])
        return cls(networks=list(d.get("networks", ["I", "FI"])), depth=d.get("depth", 4),
                   shifted=d.get("shifted", True), spectrum_scale=d.get("spectrum_scale", 1.0),
                   fourier_init=d.get("fourier_init", "identity"),
                   data=DataConfig.from_dict(d.get("data", {})), train=TrainConfig(**d.get("train", {})),
                   loss=LossConfig(**loss), augment=AugmentConfig(**d.get("augment", {})))

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def load_run_config(path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text()))
