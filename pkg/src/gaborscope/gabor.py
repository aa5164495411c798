"""Trainable Gabor kernel layer.

Each kernel is ``G(t) = exp(-pi (t - u)^2 / |sigma|) * cos(2 pi f t)`` sampled on
a fixed 200-tap grid ``t_k = -1 + k / 100`` (seconds).  The layer correlates a
signal with every kernel of a bank (valid mode), so a 3000-sample epoch gives
2801 activation samples per kernel.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, ops

FS = 100.0
N_TAPS = 200
GRID = -1.0 + np.arange(N_TAPS) / FS
SIGMA_MIN = 1e-3
SPECTRUM_NFFT = 1024

FREQ_RANGES = {"EEG": (0.5, 25.0), "EOG": (0.1, 5.0)}
SIGMA_INIT_RANGE = (0.05, 0.5)


@dataclass(frozen=True)
class GaborParams:
    u: float
    sigma: float
    f: float


def gabor_waveform(p: GaborParams, grid: np.ndarray = GRID) -> np.ndarray:
    """Sample one kernel on ``grid``."""
    return np.exp(-np.pi * (grid - p.u) ** 2 / abs(p.sigma)) * np.cos(2 * np.pi * p.f * grid)


def gabor_partials(u, sigma, f, grid: np.ndarray = GRID):
    """Waveforms and their closed-form partials w.r.t. u, sigma and f.

    Arguments are length-N arrays; each returned array is ``(N, len(grid))``.
    """
    u = np.asarray(u, dtype=np.float64)[:, None]
    sigma = np.asarray(sigma, dtype=np.float64)[:, None]
    f = np.asarray(f, dtype=np.float64)[:, None]
    t = grid[None, :]
    d = t - u
    a = np.abs(sigma)
    env = np.exp(-np.pi * d * d / a)
    cos = np.cos(2 * np.pi * f * t)
    g = env * cos
    dg_du = g * 2 * np.pi * d / a
    dg_dsigma = g * np.pi * d * d * np.sign(sigma) / (sigma * sigma)
    dg_df = -env * 2 * np.pi * t * np.sin(2 * np.pi * f * t)
    return g, dg_du, dg_dsigma, dg_df


def synthesize(u: Tensor, sigma: Tensor, f: Tensor) -> Tensor:
    """Differentiable kernel synthesis: ``(N,)`` parameter vectors to ``(N, 200)`` kernels."""
    g, du, ds, df = gabor_partials(u.data, sigma.data, f.data)
    dtype = u.dtype

    def backward(grad):
        return ((grad * du).sum(axis=1).astype(dtype),
                (grad * ds).sum(axis=1).astype(dtype),
                (grad * df).sum(axis=1).astype(dtype))

    return Tensor._make(g.astype(dtype), (u, sigma, f), backward, "gabor_synthesize")


class GaborBank:
    """A set of kernels sharing one modality, with trainable u, sigma, f vectors."""

    def __init__(self, u, sigma, f, modality: str = "EEG", dtype=np.float64, prefix: str | None = None):
        prefix = prefix or modality.lower() + "_gabor"
        self.modality = modality
        self.prefix = prefix
        self.u = Tensor(np.array(u, dtype=dtype), requires_grad=True, name=f"{prefix}.u")
        self.sigma = Tensor(np.array(sigma, dtype=dtype), requires_grad=True, name=f"{prefix}.sigma")
        self.f = Tensor(np.array(f, dtype=dtype), requires_grad=True, name=f"{prefix}.f")
        if not (len(self.u) == len(self.sigma) == len(self.f)):
            raise ValueError("u, sigma and f must have the same length")
        if np.any(np.abs(self.sigma.data) < SIGMA_MIN):
            raise ValueError(f"|sigma| below guard {SIGMA_MIN}")

    def __len__(self) -> int:
        return len(self.u)

    @property
    def params(self) -> list[GaborParams]:
        return [GaborParams(float(a), float(b), float(c)) for a, b, c in zip(self.u.data, self.sigma.data, self.f.data)]

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.u, self.sigma, self.f)}

    def kernels(self) -> Tensor:
        return synthesize(self.u, self.sigma, self.f)

    def waveforms(self) -> np.ndarray:
        return gabor_partials(self.u.data, self.sigma.data, self.f.data)[0]

    @classmethod
    def from_params(cls, params, modality: str = "EEG", **kw) -> "GaborBank":
        params = list(params)
        return cls([p.u for p in params], [p.sigma for p in params], [p.f for p in params], modality, **kw)


def init_bank(n_kernels: int, modality: str, seed: int, dtype=np.float64) -> GaborBank:
    """Kernels centred at u=0, log-spaced frequencies, random envelope widths."""
    if n_kernels <= 0:
        raise ValueError("n_kernels must be positive")
    lo, hi = FREQ_RANGES[modality]
    f = np.geomspace(lo, hi, n_kernels) if n_kernels > 1 else np.array([lo])
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(*SIGMA_INIT_RANGE, size=n_kernels)
    return GaborBank(np.zeros(n_kernels), sigma, f, modality, dtype=dtype)


def gl_forward(x, bank: GaborBank) -> Tensor:
    """Correlate signals ``(B, T)`` (or one ``(T,)`` signal) with every kernel.

    Returns activations ``(B, T - 199, N)``.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=bank.u.dtype))
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[-1] < N_TAPS:
        raise ValueError(f"input of {x.shape[-1]} samples is shorter than the {N_TAPS}-tap kernel")
    return ops.cross_correlate1d(x, bank.kernels())


def gl_backward(x, bank: GaborBank, grad_out: np.ndarray):
    """Gradients of ``sum(grad_out * gl_forward(x, bank))``.

    Returns ``(d_x, d_u, d_sigma, d_f)``.
    """
    xt = Tensor(np.asarray(x, dtype=bank.u.dtype), requires_grad=True)
    act = gl_forward(xt, bank)
    act.backward(np.asarray(grad_out).reshape(act.shape))
    return xt.grad.reshape(np.shape(x)), bank.u.grad, bank.sigma.grad, bank.f.grad


def guard_sigma_grad(sigma: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Zero sigma gradients that would push a kernel sitting on the guard further towards zero."""
    at_guard = np.abs(sigma) <= SIGMA_MIN * (1 + 1e-9)
    shrinking = np.sign(sigma) * grad > 0
    return np.where(at_guard & shrinking, 0.0, grad).astype(grad.dtype)


def clamp_sigma(sigma_new: np.ndarray, sigma_old: np.ndarray) -> np.ndarray:
    """Keep |sigma| at or above the guard without letting an update flip its sign."""
    sign = np.where(sigma_old >= 0, 1.0, -1.0)
    crossed = (np.abs(sigma_new) < SIGMA_MIN) | (np.sign(sigma_new) != sign)
    return np.where(crossed, sign * SIGMA_MIN, sigma_new).astype(sigma_new.dtype)


# -- export ---------------------------------------------------------------

def magnitude_spectrum(waveforms: np.ndarray, nfft: int = SPECTRUM_NFFT) -> tuple[np.ndarray, np.ndarray]:
    freqs = np.fft.rfftfreq(nfft, d=1.0 / FS)
    return freqs, np.abs(np.fft.rfft(waveforms, n=nfft, axis=-1))


def spectral_peaks(waveforms: np.ndarray) -> np.ndarray:
    """Frequency (Hz) of the largest magnitude bin for each waveform."""
    freqs, mag = magnitude_spectrum(np.atleast_2d(waveforms))
    return freqs[mag.argmax(axis=-1)]


def export_bank(bank: GaborBank, offset: int = 0) -> dict:
    """Waveform and spectrum rows for every kernel of ``bank``.

    Kernel indices start at ``offset`` so EEG and EOG banks can share one table.
    """
    w = bank.waveforms()
    freqs, mag = magnitude_spectrum(w)
    waveform_rows = [(offset + i, float(t), float(v)) for i in range(len(bank)) for t, v in zip(GRID, w[i])]
    spectrum_rows = [(offset + i, float(fr), float(m)) for i in range(len(bank)) for fr, m in zip(freqs, mag[i])]
    params = [{"kernel": offset + i, "modality": bank.modality, "u": p.u, "sigma": p.sigma, "f": p.f,
               "peak_hz": float(pk)} for i, (p, pk) in enumerate(zip(bank.params, freqs[mag.argmax(axis=1)]))]
    return {"waveforms": waveform_rows, "spectra": spectrum_rows, "params": params}


def write_bank_export(banks: list[GaborBank], out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    waveforms, spectra, params = [], [], []
    offset = 0
    for bank in banks:
        e = export_bank(bank, offset)
        waveforms += e["waveforms"]
        spectra += e["spectra"]
        params += e["params"]
        offset += len(bank)
    paths = [out_dir / "kernel_waveforms.csv", out_dir / "kernel_spectra.csv", out_dir / "kernel_params.json"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kernel", "t", "value"])
        w.writerows((k, repr(t), repr(v)) for k, t, v in waveforms)
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kernel", "frequency_hz", "magnitude"])
        w.writerows((k, repr(fr), repr(m)) for k, fr, m in spectra)
    paths[2].write_text(json.dumps(params, indent=2))
    return paths
