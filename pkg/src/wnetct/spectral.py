"""Orthonormal 2D Fourier transforms and the real/imaginary channel packing.

Spectra use ``norm="ortho"`` in both directions, so magnitudes stay on the
scale of the image itself (a constant image ``c`` of side ``N`` has a single
DC coefficient ``c * N``). Network inputs are DC-centered by default.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

IMAG_WARN_THRESHOLD = 1e-3


@dataclass
class Spectrum:
    values: np.ndarray
    shifted: bool = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class ChannelPair:
    """``(..., 2, H, W)`` real array: channel 0 real part, channel 1 imaginary part."""

    data: np.ndarray
    shifted: bool = False


def _check_square(x: np.ndarray) -> None:
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ValueError(f"expected square trailing dims, got shape {x.shape}")


def fft2(image: np.ndarray, shifted: bool = False) -> Spectrum:
    """Orthonormal DFT over the last two axes."""
    image = np.asarray(image)
    _check_square(image)
    values = np.fft.fft2(image, norm="ortho")
    if shifted:
        values = np.fft.fftshift(values, axes=(-2, -1))
    return Spectrum(values, shifted)


def ifft2(spectrum: Spectrum, warn: bool = True) -> tuple[np.ndarray, float]:
    """Inverse of :func:`fft2`; returns ``(real part, max |imag part|)``.

    A large imaginary residual means the spectrum was not Hermitian, which is
    normal for network outputs; it is logged at warning level but not raised.
    """
    values = spectrum.values
    _check_square(values)
    if spectrum.shifted:
        values = np.fft.ifftshift(values, axes=(-2, -1))
    out = np.fft.ifft2(values, norm="ortho")
    residual = float(np.abs(out.imag).max()) if out.size else 0.0
    if warn and residual > IMAG_WARN_THRESHOLD:
        logger.warning("ifft2: imaginary residual %.3g exceeds %.0e", residual, IMAG_WARN_THRESHOLD)
    return out.real, residual


def shift(spectrum: Spectrum) -> Spectrum:
    """Move DC from ``(0, 0)`` to ``(N // 2, N // 2)``."""
    if spectrum.shifted:
        raise ValueError("spectrum is already DC-centered")
    return Spectrum(np.fft.fftshift(spectrum.values, axes=(-2, -1)), True)


def unshift(spectrum: Spectrum) -> Spectrum:
    if not spectrum.shifted:
        raise ValueError("spectrum is not DC-centered")
    return Spectrum(np.fft.ifftshift(spectrum.values, axes=(-2, -1)), False)


def pack(spectrum: Spectrum) -> ChannelPair:
    v = spectrum.values
    data = np.stack([v.real, v.imag], axis=-3)
    return ChannelPair(data, spectrum.shifted)


def unpack(pair: ChannelPair) -> Spectrum:
    data = pair.data
    if data.ndim < 3 or data.shape[-3] != 2:
        raise ValueError(f"expected 2 channels (real, imag), got shape {data.shape}")
    real = np.take(data, 0, axis=-3)
    ctype = np.complex64 if data.dtype == np.float32 else np.complex128
    values = np.empty(real.shape, dtype=ctype)
    values.real = real
    values.imag = np.take(data, 1, axis=-3)
    return Spectrum(values, pair.shifted)


def image_to_channels(images: np.ndarray, shifted: bool = True, scale: float = 1.0) -> np.ndarray:
    """``(N, 1, H, W)`` images to ``(N, 2, H, W)`` packed spectra."""
    return pack(fft2(images[:, 0], shifted=shifted)).data * scale


def channels_to_image(channels: np.ndarray, shifted: bool = True, scale: float = 1.0,
                      warn: bool = True) -> tuple[np.ndarray, float]:
    """``(N, 2, H, W)`` packed spectra to ``(N, 1, H, W)`` real images and the imaginary residual."""
    spec = unpack(ChannelPair(channels / scale, shifted))
    real, residual = ifft2(spec, warn=warn)
    return real[:, None], residual
