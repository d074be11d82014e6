"""Synthetic vibration signals, sliding windows and complex-Morlet CWT images."""

from __future__ import annotations

import json
import math
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft
import torch
import torch.nn.functional as F

from .autodiff import rng

WINDOW_SIZE = 512
WINDOW_STEP = 256
N_SCALES = 128
# cmor1.5-1.0
MORLET_BANDWIDTH = 1.5
MORLET_CENTER = 1.0


@dataclass(frozen=True)
class SignalSpec:
    class_id: int
    condition_id: int
    base_frequency: float
    fault_frequency: float
    impulse_amplitude: float
    noise_sigma: float
    length: int
    sample_rate: float
    seed: int
    resonance_frequency: float = 800.0
    decay: float = 5e-3  # seconds

    def validate(self, window_size: int = WINDOW_SIZE):
        nyquist = self.sample_rate / 2
        for name in ("base_frequency", "fault_frequency", "resonance_frequency"):
            f = getattr(self, name)
            if not 0 < f < nyquist:
                raise ValueError(f"{name}={f} outside (0, {nyquist}) Hz")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.length < window_size:
            raise ValueError(f"length {self.length} shorter than window {window_size}")


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # [scales, time_bins]
    frequencies: np.ndarray = field(default=None)

    @property
    def scales(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def time_bins(self) -> int:
        return self.magnitudes.shape[1]


def generate_signal(spec: SignalSpec) -> np.ndarray:
    """Carrier tone plus a train of decaying resonance bursts plus white noise."""
    spec.validate(min(spec.length, WINDOW_SIZE))
    gen = rng(spec.seed, spec.class_id, spec.condition_id)
    t = np.arange(spec.length) / spec.sample_rate
    phase = gen.uniform(0, 2 * np.pi)
    x = np.sin(2 * np.pi * spec.base_frequency * t + phase)
    if spec.impulse_amplitude != 0:
        period = 1.0 / spec.fault_frequency
        t0 = gen.uniform(0, period)
        onsets = np.arange(t0, t[-1] + period, period)
        # bursts older than 12 decay constants are below 1e-5 of the peak
        horizon = 12 * spec.decay
        for onset in onsets:
            lo = max(int(np.ceil(onset * spec.sample_rate)), 0)
            hi = min(int((onset + horizon) * spec.sample_rate) + 1, spec.length)
            if lo >= hi:
                continue
            dt = t[lo:hi] - onset
            x[lo:hi] += (
                spec.impulse_amplitude
                * np.exp(-dt / spec.decay)
                * np.sin(2 * np.pi * spec.resonance_frequency * dt)
            )
    if spec.noise_sigma > 0:
        x = x + gen.normal(0.0, spec.noise_sigma, size=spec.length)
    return x


def slide_windows(signal: np.ndarray, window_size: int = WINDOW_SIZE, step: int = WINDOW_STEP) -> np.ndarray:
    """Return ``[count, window_size]`` exact slices at offsets 0, step, 2*step, ..."""
    signal = np.asarray(signal)
    if window_size < 1 or step < 1:
        raise ValueError("window_size and step must be positive")
    if signal.shape[0] < window_size:
        raise ValueError(f"signal of length {signal.shape[0]} is shorter than window {window_size}")
    count = (signal.shape[0] - window_size) // step + 1
    offsets = np.arange(count) * step
    return np.stack([signal[o : o + window_size] for o in offsets])


def window_offsets(length: int, window_size: int = WINDOW_SIZE, step: int = WINDOW_STEP) -> np.ndarray:
    if length < window_size:
        raise ValueError("signal shorter than window")
    return np.arange((length - window_size) // step + 1) * step


def morlet(t: np.ndarray, bandwidth: float = MORLET_BANDWIDTH, center: float = MORLET_CENTER) -> np.ndarray:
    return np.exp(-(t**2) / bandwidth) * np.exp(2j * np.pi * center * t) / np.sqrt(np.pi * bandwidth)


def scale_frequencies(n_scales: int, sampling_period: float, center: float = MORLET_CENTER) -> np.ndarray:
    """Pseudo-frequency (Hz) of scales 1..n_scales."""
    return center / (np.arange(1, n_scales + 1) * sampling_period)


def _kernels(length: int, n_scales: int) -> np.ndarray:
    # psi_s[k] = psi(k / s) / s for lags k in [-(L-1), L-1]; L1 normalisation keeps
    # the response peak of a pure tone at the scale of matching pseudo-frequency.
    lags = np.arange(-(length - 1), length)
    scales = np.arange(1, n_scales + 1, dtype=np.float64)[:, None]
    return morlet(lags[None, :] / scales) / scales


@lru_cache(maxsize=8)
def _kernel_spectra(length: int, n_scales: int) -> tuple[int, np.ndarray]:
    kern = _kernels(length, n_scales)  # [S, 2L-1], index j <-> lag j-(L-1)
    # The linear convolution has 3L-2 terms; circular wrap at nfft >= 2L-1 only
    # folds indices >= nfft + L - 1 > 3L - 3 onto the kept range, and those are zero.
    nfft = scipy.fft.next_fast_len(2 * length - 1)
    # correlation with conj(psi) == convolution with conj(psi) reversed
    return nfft, scipy.fft.fft(np.conj(kern[:, ::-1]), nfft, axis=1)


def cwt_magnitudes(windows: np.ndarray, n_scales: int = N_SCALES) -> np.ndarray:
    """Batched |CWT| of ``[..., L]`` windows -> ``[..., n_scales, L]``."""
    x = np.asarray(windows, dtype=np.float64)
    L = x.shape[-1]
    nfft, kspec = _kernel_spectra(L, n_scales)
    full = scipy.fft.ifft(scipy.fft.fft(x, nfft)[..., None, :] * kspec, axis=-1, overwrite_x=True)
    # full[m] = sum_n x[n] conj(kern[2L-2-m+n]); lag n-b gives b = m-(L-1)
    return np.abs(full[..., L - 1 : 2 * L - 1])


def cwt_spectrogram(window: np.ndarray, n_scales: int = N_SCALES, sampling_period: float = 1.0) -> Spectrogram:
    """|CWT| over scales 1..n_scales with zero padding beyond the window edges.

    Row ``s-1`` at shift ``b`` is ``|sum_n x[n] conj(psi_s[n - b])|``.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("window must be a nonempty 1-D sequence")
    if n_scales < 1:
        raise ValueError("n_scales must be at least 1")
    return Spectrogram(cwt_magnitudes(x, n_scales), scale_frequencies(n_scales, sampling_period))


def peak_scale(magnitudes: np.ndarray, center: float = MORLET_CENTER) -> int:
    """Scale (1-based) of maximal time-averaged response.

    Scales at or below ``2 * center`` have pseudo-frequencies at or above
    Nyquist; their sampled kernels alias to low-pass filters and are skipped.
    """
    first = int(math.floor(2 * center)) + 1
    L = magnitudes.shape[1]
    profile = magnitudes[:, L // 4 : L - L // 4].mean(axis=1)
    return first + int(np.argmax(profile[first - 1 :]))


def to_image(spectrogram: Spectrogram | np.ndarray, height: int, width: int) -> np.ndarray:
    """Min-max normalise, bilinear resize and replicate to ``[H, W, 3]`` in [0, 1]."""
    mags = spectrogram.magnitudes if isinstance(spectrogram, Spectrogram) else np.asarray(spectrogram)
    return to_images(mags[None], height, width)[0]


def to_images(mags: np.ndarray, height: int, width: int) -> np.ndarray:
    """Batched :func:`to_image` over ``[N, scales, time]``; constant inputs map to 0.5."""
    if height < 8 or width < 8:
        raise ValueError("image sides must be at least 8")
    mags = np.asarray(mags, dtype=np.float64)
    lo = mags.min(axis=(1, 2), keepdims=True)
    span = mags.max(axis=(1, 2), keepdims=True) - lo
    flat = span[:, 0, 0] <= 0
    norm = (mags - lo) / np.where(span > 0, span, 1.0)
    if norm.shape[1:] != (height, width):
        t = torch.from_numpy(np.ascontiguousarray(norm))[:, None]
        norm = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False, antialias=True)[:, 0]
        norm = np.clip(norm.numpy(), 0.0, 1.0)
    norm[flat] = 0.5
    return np.repeat(norm[..., None], 3, axis=-1)


def window_images(windows: np.ndarray, size: int, n_scales: int = N_SCALES, batch: int = 50) -> np.ndarray:
    windows = np.asarray(windows)
    return np.concatenate(
        [to_images(cwt_magnitudes(windows[i : i + batch], n_scales), size, size) for i in range(0, len(windows), batch)]
    )


# --------------------------------------------------------------------------
# synthetic datasets

SAMPLE_RATE = 12000.0
CONDITION_RPM = (1730, 1750, 1772, 1797)


def class_signal_spec(
    class_id: int,
    condition_id: int,
    n_windows: int = 200,
    noise_sigma: float = 0.6,
    seed: int = 0,
    rpm: tuple[int, ...] = CONDITION_RPM,
    impulse_amplitude: float = 1.0,
) -> SignalSpec:
    """Per-class fault signature; the operating condition rescales shaft-locked rates by RPM.

    Class 0 is healthy (carrier only). Fault class ``k+1`` rings a structural
    resonance in the 250 Hz - 2.8 kHz band, where the CWT scale axis has
    resolution, at a class-specific repetition rate.
    """
    speed = rpm[condition_id % len(rpm)] / max(rpm)
    length = WINDOW_SIZE + (n_windows - 1) * WINDOW_STEP
    carrier = 150.0 * speed
    if class_id == 0:
        return SignalSpec(0, condition_id, carrier, 60.0 * speed, 0.0, noise_sigma, length, SAMPLE_RATE, seed)
    k = class_id - 1
    resonance = 250.0 * 1.75 ** (k % 4) * 1.2 ** (k // 4)
    fault = 70.0 + 30.0 * (k % 4) + 10.0 * (k // 4)
    return SignalSpec(class_id, condition_id, carrier, fault * speed, impulse_amplitude, noise_sigma, length,
                      SAMPLE_RATE, seed, resonance_frequency=resonance, decay=4.0 / resonance)


@dataclass
class WindowSet:
    """Images with labels and operating condition of each window."""

    images: np.ndarray  # [N, H, W, 3]
    labels: np.ndarray
    conditions: np.ndarray
    index: np.ndarray  # window position inside its recording

    def __len__(self):
        return len(self.labels)

    def subset(self, mask) -> WindowSet:
        return WindowSet(self.images[mask], self.labels[mask], self.conditions[mask], self.index[mask])


def synthetic_dataset(
    n_classes: int = 5,
    n_conditions: int = 4,
    n_windows: int = 200,
    image_size: int = 64,
    noise_sigma: float = 0.6,
    seed: int = 0,
    n_scales: int = N_SCALES,
) -> WindowSet:
    images, labels, conditions, index = [], [], [], []
    for cond in range(n_conditions):
        for c in range(n_classes):
            spec = class_signal_spec(c, cond, n_windows, noise_sigma, seed)
            windows = slide_windows(generate_signal(spec))
            images.append(window_images(windows, image_size, n_scales))
            labels += [c] * len(windows)
            conditions += [cond] * len(windows)
            index.extend(range(len(windows)))
    return WindowSet(np.concatenate(images), np.array(labels), np.array(conditions), np.array(index))


# --------------------------------------------------------------------------
# on-disk recordings: <root>/<condition>/<class>/<recording>.f32 (+ meta.json) or .csv


def write_recording(path: Path, signal: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".csv":
        np.savetxt(path, np.asarray(signal, dtype=np.float64), fmt="%.9g")
    else:
        np.asarray(signal, dtype="<f4").tofile(path)


def read_recording(path: Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        return np.loadtxt(path, dtype=np.float64, ndmin=1)
    return np.fromfile(path, dtype="<f4").astype(np.float64)


def load_dataset_dir(root: Path, image_size: int = 64, n_scales: int = N_SCALES,
                     max_windows: int = 200) -> tuple[WindowSet, dict]:
    """Window and transform every recording under ``root``.

    ``meta.json`` at the root carries ``sample_rate`` and ``classes`` (class
    directory names in label order); condition directories sort lexically.
    """
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    sample_rate = float(meta["sample_rate"])
    classes = list(meta["classes"])
    conds = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels, conditions, index = [], [], [], []
    for ci, cond in enumerate(conds):
        for label, cls in enumerate(classes):
            cls_dir = root / cond / cls
            if not cls_dir.is_dir():
                continue
            recs = [r for r in sorted(cls_dir.iterdir()) if r.suffix in (".f32", ".csv")]
            if not recs:
                continue
            windows = np.concatenate([slide_windows(read_recording(r)) for r in recs])[:max_windows]
            images.append(window_images(windows, image_size, n_scales))
            labels += [label] * len(windows)
            conditions += [ci] * len(windows)
            index.extend(range(len(windows)))
    if not images:
        raise ValueError(f"no recordings found under {root}")
    # sample_rate only relabels scales as frequencies; magnitudes depend on scale in samples
    meta = dict(meta, conditions=conds, sample_rate=sample_rate)
    return WindowSet(np.concatenate(images), np.array(labels), np.array(conditions), np.array(index)), meta
