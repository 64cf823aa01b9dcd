"""U-net template and the six single/dual-domain cascades (I, F, II, FF, FI, IF).

A name is read left to right as the stage domains: ``I`` is an image-domain
U-net, ``F`` a U-net on packed 2-channel spectra, and ``FI`` a Fourier stage
followed by an image stage. Domain changes go through fixed, non-trainable
orthonormal FFT bridges. The network input and output are always images.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import ops
from .nn.tensor import Parameter, Tensor, as_tensor, no_grad

logger = logging.getLogger(__name__)

NAMES = ("I", "F", "II", "FF", "FI", "IF")
DOMAINS = {"I": "image", "F": "fourier"}
INITS = ("he", "identity")


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_filters: int = 64
    in_channels: int = 1
    out_channels: int = 1
    convs_per_level: int = 2
    kernel_size: int = 3
    init: str = "he"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if self.init == "identity" and self.in_channels != self.out_channels:
            raise ValueError("identity initialization needs in_channels == out_channels")
        if self.base_filters != 64:
            raise ValueError("base_filters is fixed at 64 (first 3x3 conv and final 1x1 conv)")
        if self.convs_per_level != 2 or self.kernel_size != 3:
            raise ValueError("the template uses two 3x3 convolutions per level")

    def channels(self, level: int) -> int:
        return self.base_filters * 2 ** level

    @property
    def multiple(self) -> int:
        """Input sides must be divisible by this."""
        return 2 ** (self.depth - 1)


def domain_config(domain: str, depth: int = 4, init: str = "he") -> UNetConfig:
    ch = 1 if domain == "image" else 2
    return UNetConfig(depth=depth, in_channels=ch, out_channels=ch, init=init)


@dataclass(frozen=True)
class WNetSpec:
    name: str
    stages: tuple[tuple[str, UNetConfig], ...]
    shifted: bool = True
    spectrum_scale: float = 1.0

    def __post_init__(self):
        if self.name not in NAMES:
            raise ValueError(f"unknown network {self.name!r}; expected one of {NAMES}")
        domains = tuple(DOMAINS[c] for c in self.name)
        if tuple(d for d, _ in self.stages) != domains:
            raise ValueError(f"stage domains {self.stages} do not match name {self.name}")

    @property
    def domains(self) -> tuple[str, ...]:
        return tuple(d for d, _ in self.stages)

    def to_dict(self) -> dict:
        return {"name": self.name, "stages": [[d, asdict(c)] for d, c in self.stages],
                "shifted": self.shifted, "spectrum_scale": self.spectrum_scale}

    @classmethod
    def from_dict(cls, d: dict) -> WNetSpec:
        stages = tuple((dom, UNetConfig(**cfg)) for dom, cfg in d["stages"])
        return cls(d["name"], stages, d.get("shifted", True), d.get("spectrum_scale", 1.0))


def wnet_spec(name: str, depth: int = 4, shifted: bool = True, spectrum_scale: float = 1.0,
              fourier_init: str = "identity") -> WNetSpec:
    """Spec for one of the six variants. Image stages use He initialization;
    Fourier stages use ``fourier_init`` (see :class:`UNet`)."""
    if name not in NAMES:
        raise ValueError(f"unknown network {name!r}; expected one of {NAMES}")
    inits = {"image": "he", "fourier": fourier_init}
    stages = tuple((DOMAINS[c], domain_config(DOMAINS[c], depth, inits[DOMAINS[c]])) for c in name)
    return WNetSpec(name, stages, shifted, spectrum_scale)


def unet_layer_shapes(config: UNetConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """``(name, weight shape, fan_in)`` for every layer, in build order."""
    layers = []
    cin = config.in_channels
    for level in range(config.depth):
        c = config.channels(level)
        layers.append((f"enc{level}.conv0", (c, cin, 3, 3), 9 * cin))
        layers.append((f"enc{level}.conv1", (c, c, 3, 3), 9 * c))
        cin = c
    for level in reversed(range(config.depth - 1)):
        c = config.channels(level)
        layers.append((f"dec{level}.up", (2 * c, c, 2, 2), 4 * 2 * c))
        layers.append((f"dec{level}.conv0", (c, 2 * c, 3, 3), 9 * 2 * c))
        layers.append((f"dec{level}.conv1", (c, c, 3, 3), 9 * c))
    layers.append(("final", (config.out_channels, config.base_filters, 1, 1), config.base_filters))
    return layers


def unet_param_formula(config: UNetConfig) -> int:
    """Closed-form trainable-scalar count: sum of k*k*cin*cout + cout per layer."""
    total = 0
    cin = config.in_channels
    for level in range(config.depth):
        c = 64 * 2 ** level
        total += 9 * cin * c + c + 9 * c * c + c
        cin = c
    for level in range(config.depth - 1):
        c = 64 * 2 ** level
        total += 4 * (2 * c) * c + c        # 2x2 up-convolution from the level below
        total += 9 * (2 * c) * c + c        # after the skip concatenation
        total += 9 * c * c + c
    return total + 64 * config.out_channels + config.out_channels


def spec_param_formula(spec: WNetSpec) -> int:
    return sum(unet_param_formula(cfg) for _, cfg in spec.stages)


class UNet:
    """Encoder/decoder with same-padded double 3x3 convs, max pooling and skip concatenations.

    ``init="he"`` draws every kernel from He-normal with zero biases.
    ``init="identity"`` starts from the same draw, then reserves the first
    ``2 * in_channels`` top-level channels as a pass-through: each input
    channel ``c`` is carried as ``relu(c)`` and ``relu(-c)`` by centre taps
    through the first encoder level and the last decoder level, and the final
    1x1 conv recombines them as ``relu(c) - relu(-c)``. The network then
    starts as an exact identity map; the remaining channels are ordinary He
    draws whose contribution the final layer admits as training proceeds.
    """

    def __init__(self, config: UNetConfig, rng: np.random.Generator, dtype=np.float32, prefix: str = ""):
        self.config = config
        self.params: dict[str, Parameter] = {}
        for name, shape, fan_in in unet_layer_shapes(config):
            out_ch = shape[1] if name.endswith(".up") else shape[0]
            full = prefix + name
            self.params[full + ".weight"] = Parameter(ops.he_normal(shape, fan_in, rng, dtype), full + ".weight")
            self.params[full + ".bias"] = Parameter(np.zeros(out_ch, dtype=dtype), full + ".bias")
        self._prefix = prefix
        if config.init == "identity":
            self._identity_paths()

    def _identity_paths(self) -> None:
        k = self.config.in_channels
        lanes = 2 * k
        w = self._p("enc0.conv0")[0].data
        w[:lanes] = 0
        for c in range(k):
            w[2 * c, c, 1, 1], w[2 * c + 1, c, 1, 1] = 1, -1
        # Skip features come first in the decoder concatenation, so lane j stays at index j.
        relays = ["enc0.conv1"] + (["dec0.conv0", "dec0.conv1"] if self.config.depth > 1 else [])
        for name in relays:
            w = self._p(name)[0].data
            w[:lanes] = 0
            for j in range(lanes):
                w[j, j, 1, 1] = 1
        w = self._p("final")[0].data
        w[...] = 0
        for c in range(k):
            w[c, 2 * c, 0, 0], w[c, 2 * c + 1, 0, 0] = 1, -1

    def _p(self, name: str) -> tuple[Parameter, Parameter]:
        full = self._prefix + name
        return self.params[full + ".weight"], self.params[full + ".bias"]

    def _double_conv(self, x: Tensor, tag: str) -> Tensor:
        x = ops.relu(ops.conv2d(x, *self._p(f"{tag}.conv0")))
        return ops.relu(ops.conv2d(x, *self._p(f"{tag}.conv1")))

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.config
        h, w = x.shape[-2:]
        if h % cfg.multiple or w % cfg.multiple:
            raise ValueError(f"input size {h}x{w} is not divisible by {cfg.multiple} (depth {cfg.depth})")
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        skips = []
        for level in range(cfg.depth):
            if level:
                x = ops.maxpool2(x)
            x = self._double_conv(x, f"enc{level}")
            skips.append(x)
        for level in reversed(range(cfg.depth - 1)):
            up = ops.conv_transpose2x2(x, *self._p(f"dec{level}.up"))
            x = self._double_conv(ops.concat_channels(skips[level], up), f"dec{level}")
        return ops.conv2d(x, *self._p("final"))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())


def build_unet(config: UNetConfig, rng: np.random.Generator, dtype=np.float32) -> UNet:
    return UNet(config, rng, dtype)


@dataclass
class StageOutputs:
    """Per-stage outputs kept for domain-wise loss attachment."""

    domains: list[str] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)
    imag_residual: float = 0.0

    def __len__(self) -> int:
        return len(self.outputs)

    def __iter__(self):
        return iter(zip(self.domains, self.outputs))


class WNet:
    """Cascade of independently initialized U-nets joined by FFT bridges."""

    def __init__(self, spec: WNetSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.stages = [UNet(cfg, rng, dtype, prefix=f"stage{i}.") for i, (_, cfg) in enumerate(spec.stages)]

    @property
    def name(self) -> str:
        return self.spec.name

    def parameters(self) -> list[Parameter]:
        return [p for stage in self.stages for p in stage.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def trace(self) -> list[str]:
        """Ordered op labels of the forward wiring."""
        steps, current = [], "image"
        for domain, _ in self.spec.stages:
            if domain != current:
                steps.append("fft2+pack" if domain == "fourier" else "unpack+ifft2")
                current = domain
            steps.append(f"unet:{domain}")
        if current == "fourier":
            steps.append("unpack+ifft2")
        return steps

    def forward(self, images, clamp: bool = False) -> tuple[Tensor, StageOutputs]:
        """Run the cascade on an ``(N, 1, H, W)`` batch normalized to [0, 1].

        ``clamp=True`` (evaluation) clips the enhanced image to [0, 1].
        """
        x = as_tensor(images)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected an (N, 1, H, W) batch, got {x.shape}")
        if x.shape[2] != x.shape[3]:
            raise ValueError("images must be square")
        x = Tensor(x.data.astype(self.dtype, copy=False)) if not x.requires_grad else x
        spec = self.spec
        record = StageOutputs()
        current = "image"
        for (domain, _), stage in zip(spec.stages, self.stages):
            if domain != current:
                if domain == "fourier":
                    x = ops.image_to_spectrum(x, spec.shifted, spec.spectrum_scale)
                else:
                    x, res = ops.spectrum_to_image(x, spec.shifted, spec.spectrum_scale)
                    record.imag_residual = max(record.imag_residual, res)
                current = domain
            x = stage(x)
            record.domains.append(domain)
            record.outputs.append(x)
        if current == "fourier":
            x, res = ops.spectrum_to_image(x, spec.shifted, spec.spectrum_scale)
            record.imag_residual = max(record.imag_residual, res)
        logger.debug("%s forward: imaginary residual %.3g", spec.name, record.imag_residual)
        if clamp:
            x = Tensor(np.clip(x.data, 0.0, 1.0))
        return x, record

    __call__ = forward

    def enhance(self, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Evaluation-mode inference on ``(N, H, W)`` or ``(N, 1, H, W)`` arrays; output clamped to [0, 1]."""
        arr = np.asarray(images)
        squeeze = arr.ndim == 3
        if squeeze:
            arr = arr[:, None]
        with no_grad():
            outs = [self.forward(arr[i:i + batch_size], clamp=True)[0].data
                    for i in range(0, arr.shape[0], batch_size)]
        out = np.concatenate(outs, axis=0)
        return out[:, 0] if squeeze else out


def compose(spec: WNetSpec | str, rng: np.random.Generator | int = 0, dtype=np.float32, depth: int = 4) -> WNet:
    if isinstance(spec, str):
        spec = wnet_spec(spec, depth=depth)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return WNet(spec, rng, dtype)


def param_count(model) -> int:
    """Exact number of trainable scalars of a built ``UNet``/``WNet``."""
    return int(sum(p.data.size for p in model.parameters()))


def save_checkpoint(model: WNet, directory, seed: int | None = None, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus ``params.wnct`` (all parameters, flattened in manifest order)."""
    from .io import write_tensor

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    for p in model.parameters():
        entries.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        offset += p.data.size
    flat = np.concatenate([p.data.ravel() for p in model.parameters()])
    write_tensor(directory / "params.wnct", flat)
    manifest = {
        "format": "wnct-checkpoint",
        "version": 1,
        "spec": model.spec.to_dict(),
        "dtype": str(model.dtype),
        "seed": seed,
        "n_params": int(offset),
        "tensors": entries,
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(directory) -> WNet:
    from .io import read_tensor

    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    spec = WNetSpec.from_dict(manifest["spec"])
    model = WNet(spec, np.random.default_rng(0), np.dtype(manifest["dtype"]))
    flat = read_tensor(directory / "params.wnct")
    params = model.named_parameters()
    for entry in manifest["tensors"]:
        p = params[entry["name"]]
        n = int(np.prod(entry["shape"]))
        p.data = flat[entry["offset"]:entry["offset"] + n].reshape(entry["shape"]).astype(model.dtype)
        p.zero_grad()
    return model
