"""Single-epoch CNN and multi-epoch bidirectional LSTM scorers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.ops import BatchNormState
from .gabor import N_TAPS, GaborBank, clamp_sigma, guard_sigma_grad, init_bank
from .ingest import EPOCH_SAMPLES
from .stages import N_STAGES

EEG_KERNELS = 32
EOG_KERNELS = 8
MIX_FILTERS = 256
CONV_FILTERS = (64, 128, 128, 256, 256)
CONV_KERNEL = 3
POOL = 3
DENSE = (256, 128)
ZSCORE_MIN_STD = 1e-8

LSTM_HIDDEN = 10
LSTM_LAYERS = 2
CONTEXT = 4
WINDOW = 2 * CONTEXT + 1


def zscore(x: np.ndarray) -> np.ndarray:
    """Per-row standardization; rows with std below 1e-8 become zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    flat = sd < ZSCORE_MIN_STD
    return np.where(flat, 0.0, (x - mu) / np.where(flat, 1.0, sd))


def flatten_size(n_samples: int = EPOCH_SAMPLES) -> int:
    t = n_samples - N_TAPS + 1
    for _ in CONV_FILTERS:
        t //= POOL
    return t * CONV_FILTERS[-1]


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SingleEpochNet:
    """EEG/EOG first layer, mixing layer, five conv blocks and three dense layers.

    ``first_layer="gabor"`` uses trainable Gabor banks; ``"plain_conv_200"``
    swaps them for free 200-tap convolutions with bias.  With ``fold_mixing``
    the kernel-1 mixing layer and the first 3-tap conv, which have no
    nonlinearity between them, are evaluated as one 40->64 conv whose weights
    are the product of both; outputs and gradients are the same as the
    two-layer evaluation at a fraction of the cost.
    """

    def __init__(self, seed: int = 0, dtype=np.float32, first_layer: str = "gabor", dropout: float = 0.5,
                 fold_mixing: bool = True):
        if first_layer not in ("gabor", "plain_conv_200"):
            raise ValueError(f"unknown first layer {first_layer!r}")
        self.dtype = np.dtype(dtype)
        self.first_layer_kind = first_layer
        self.dropout = dropout
        self.fold_mixing = fold_mixing
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}

        def param(name, value):
            p[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

        if first_layer == "gabor":
            self.eeg_bank = init_bank(EEG_KERNELS, "EEG", seed, dtype=self.dtype)
            self.eog_bank = init_bank(EOG_KERNELS, "EOG", seed + 1, dtype=self.dtype)
            p.update(self.eeg_bank.parameters())
            p.update(self.eog_bank.parameters())
        else:
            self.eeg_bank = self.eog_bank = None
            b = 1 / np.sqrt(N_TAPS)
            for name, n in (("eeg_conv", EEG_KERNELS), ("eog_conv", EOG_KERNELS)):
                param(f"{name}.weight", _uniform(rng, b, (n, 1, N_TAPS), self.dtype))
                param(f"{name}.bias", _uniform(rng, b, (n,), self.dtype))
        n_in = EEG_KERNELS + EOG_KERNELS
        b = 1 / np.sqrt(n_in)
        param("mix.weight", _uniform(rng, b, (MIX_FILTERS, n_in, 1), self.dtype))
        param("mix.bias", _uniform(rng, b, (MIX_FILTERS,), self.dtype))
        self.bn: list[BatchNormState] = []
        c = MIX_FILTERS
        for i, o in enumerate(CONV_FILTERS, 1):
            b = 1 / np.sqrt(c * CONV_KERNEL)
            param(f"conv{i}.weight", _uniform(rng, b, (o, c, CONV_KERNEL), self.dtype))
            param(f"conv{i}.bias", _uniform(rng, b, (o,), self.dtype))
            param(f"bn{i}.gamma", np.ones(o))
            param(f"bn{i}.beta", np.zeros(o))
            self.bn.append(BatchNormState(o, dtype=self.dtype))
            c = o
        sizes = (flatten_size(),) + DENSE + (N_STAGES,)
        for i, (a, o) in enumerate(zip(sizes[:-1], sizes[1:]), 1):
            b = 1 / np.sqrt(a)
            param(f"fc{i}.weight", _uniform(rng, b, (a, o), self.dtype))
            param(f"fc{i}.bias", _uniform(rng, b, (o,), self.dtype))
        self.params = p

    # -- bookkeeping ------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, st in enumerate(self.bn, 1):
            out[f"bn{i}.running_mean"] = st.running_mean
            out[f"bn{i}.running_var"] = st.running_var
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for i, st in enumerate(self.bn, 1):
            st.running_mean = np.asarray(buffers[f"bn{i}.running_mean"], dtype=self.dtype).copy()
            st.running_var = np.asarray(buffers[f"bn{i}.running_var"], dtype=self.dtype).copy()

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    @staticmethod
    def expected_param_count(first_layer: str = "gabor") -> int:
        """Parameter count implied by the architecture alone."""
        n_in = EEG_KERNELS + EOG_KERNELS
        first = 3 * n_in if first_layer == "gabor" else (N_TAPS + 1) * n_in
        total = first + MIX_FILTERS * n_in + MIX_FILTERS
        c = MIX_FILTERS
        for o in CONV_FILTERS:
            total += o * c * CONV_KERNEL + o + 2 * o
            c = o
        sizes = (flatten_size(),) + DENSE + (N_STAGES,)
        total += sum(a * o + o for a, o in zip(sizes[:-1], sizes[1:]))
        return total

    def before_step(self) -> None:
        """Stop sigma gradients that would drive a kernel through the guard."""
        for bank in (self.eeg_bank, self.eog_bank):
            if bank is not None and bank.sigma.grad is not None:
                bank.sigma.grad = guard_sigma_grad(bank.sigma.data, bank.sigma.grad)
                self._sigma_prev = getattr(self, "_sigma_prev", {})
                self._sigma_prev[bank.prefix] = bank.sigma.data.copy()

    def after_step(self) -> None:
        for bank in (self.eeg_bank, self.eog_bank):
            if bank is not None and bank.prefix in getattr(self, "_sigma_prev", {}):
                bank.sigma.data = clamp_sigma(bank.sigma.data, self._sigma_prev[bank.prefix])

    # -- forward ----------------------------------------------------------
    def first_layer_weights(self) -> tuple[Tensor, Tensor]:
        """EEG and EOG first-layer filters as ``(N, 200)`` tensors."""
        if self.first_layer_kind == "gabor":
            return self.eeg_bank.kernels(), self.eog_bank.kernels()
        return (ops.reshape(self.params["eeg_conv.weight"], (EEG_KERNELS, N_TAPS)),
                ops.reshape(self.params["eog_conv.weight"], (EOG_KERNELS, N_TAPS)))

    def first_layer(self, eeg, eog) -> Tensor:
        """First-layer activations ``(B, 2801, 40)``: EEG kernels then EOG kernels.

        Inputs are raw ``(B, 3000)`` signals; they are z-scored here.
        """
        eeg = Tensor(zscore(np.atleast_2d(eeg)).astype(self.dtype))
        eog = Tensor(zscore(np.atleast_2d(eog)).astype(self.dtype))
        k_eeg, k_eog = self.first_layer_weights()
        a = ops.cross_correlate1d(eeg, k_eeg)
        b = ops.cross_correlate1d(eog, k_eog)
        if self.first_layer_kind == "plain_conv_200":
            a = ops.add(a, self.params["eeg_conv.bias"])
            b = ops.add(b, self.params["eog_conv.bias"])
        return ops.concat([a, b], axis=2)

    def _mix_and_conv1(self, x: Tensor) -> Tensor:
        p = self.params
        if not self.fold_mixing:
            m = ops.conv1d(x, p["mix.weight"], p["mix.bias"])
            return ops.conv1d(m, p["conv1.weight"], p["conv1.bias"], padding="same")
        n_in = p["mix.weight"].shape[1]
        mix = ops.reshape(p["mix.weight"], (MIX_FILTERS, n_in))
        w = ops.einsum("ock,cj->ojk", p["conv1.weight"], mix)
        beta = ops.einsum("ock,c->ok", p["conv1.weight"], p["mix.bias"])
        # the mixing bias only reaches conv1 where its input is not zero padding
        ones = Tensor(np.ones((1, x.shape[1], 1), dtype=self.dtype))
        edge = ops.conv1d(ones, ops.reshape(beta, (beta.shape[0], 1, CONV_KERNEL)), padding="same")
        return ops.add(ops.add(ops.conv1d(x, w, padding="same"), edge), p["conv1.bias"])

    def head(self, activations, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Everything after the first layer: activations ``(B, T, 40)`` to logits ``(B, 5)``."""
        p = self.params
        x = ops.relu(activations)
        for i in range(1, len(CONV_FILTERS) + 1):
            if i == 1:
                x = self._mix_and_conv1(x)
            else:
                x = ops.conv1d(x, p[f"conv{i}.weight"], p[f"conv{i}.bias"], padding="same")
            x = ops.relu(x)
            x = ops.maxpool1d(x, POOL, POOL)
            x = ops.batchnorm1d(x, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self.bn[i - 1], training)
        x = ops.dropout(x, self.dropout, training, rng)
        x = ops.reshape(x, (x.shape[0], -1))
        x = ops.relu(ops.dense(x, p["fc1.weight"], p["fc1.bias"]))
        x = ops.relu(ops.dense(x, p["fc2.weight"], p["fc2.bias"]))
        return ops.dense(x, p["fc3.weight"], p["fc3.bias"])

    def forward(self, eeg, eog, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.head(self.first_layer(eeg, eog), training, rng)

    def predict_logits(self, eeg, eog, batch_size: int = 32) -> np.ndarray:
        """Eval-mode logits as a ``(B, 5)`` float64 array, evaluated in chunks."""
        eeg, eog = np.atleast_2d(eeg), np.atleast_2d(eog)
        out = [self.forward(eeg[i:i + batch_size], eog[i:i + batch_size]).data
               for i in range(0, len(eeg), batch_size)]
        return np.concatenate(out).astype(np.float64) if out else np.zeros((0, N_STAGES))


class MultiEpochNet:
    """Forward and backward 2-layer LSTMs over a 9-epoch window, then one dense layer."""

    def __init__(self, seed: int = 0, dtype=np.float64, hidden: int = LSTM_HIDDEN, layers: int = LSTM_LAYERS):
        self.dtype = np.dtype(dtype)
        self.hidden = hidden
        self.layers = layers
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}
        b = 1 / np.sqrt(hidden)
        for direction in ("fwd", "bwd"):
            d_in = N_STAGES
            for layer in range(layers):
                for name, shape in (("w_ih", (d_in, 4 * hidden)), ("w_hh", (hidden, 4 * hidden)), ("b", (4 * hidden,))):
                    key = f"lstm_{direction}.{layer}.{name}"
                    p[key] = Tensor(_uniform(rng, b, shape, self.dtype), requires_grad=True, name=key)
                d_in = hidden
        b = 1 / np.sqrt(2 * hidden)
        p["fc.weight"] = Tensor(_uniform(rng, b, (2 * hidden, N_STAGES), self.dtype), requires_grad=True, name="fc.weight")
        p["fc.bias"] = Tensor(_uniform(rng, b, (N_STAGES,), self.dtype), requires_grad=True, name="fc.bias")
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, buffers) -> None:
        pass

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def before_step(self) -> None:
        pass

    def after_step(self) -> None:
        pass

    def _lstm_params(self, direction: str):
        p = self.params
        return [(p[f"lstm_{direction}.{i}.w_ih"], p[f"lstm_{direction}.{i}.w_hh"], p[f"lstm_{direction}.{i}.b"])
                for i in range(self.layers)]

    def forward(self, windows, training: bool = False, rng=None) -> Tensor:
        """``windows`` is ``(B, 9, 5)`` stage probabilities; returns logits ``(B, 5)``."""
        x = windows if isinstance(windows, Tensor) else Tensor(np.asarray(windows, dtype=self.dtype))
        if x.ndim == 2:
            x = ops.reshape(x, (1,) + x.shape)
        if x.shape[1] != WINDOW or x.shape[2] != N_STAGES:
            raise ValueError(f"multi-epoch input must be (B, {WINDOW}, {N_STAGES}), got {x.shape}")
        _, h_fwd = ops.lstm_layer(x, self._lstm_params("fwd"), self.hidden)
        _, h_bwd = ops.lstm_layer(x, self._lstm_params("bwd"), self.hidden, reverse=True)
        h = ops.concat([h_fwd, h_bwd], axis=1)
        return ops.dense(h, self.params["fc.weight"], self.params["fc.bias"])

    def predict_logits(self, windows) -> np.ndarray:
        return self.forward(windows).data.astype(np.float64)


def build_windows(probs: np.ndarray, context: int = CONTEXT) -> np.ndarray:
    """``(E, 5)`` per-epoch probabilities to ``(E, 2*context+1, 5)`` windows.

    Positions before the first or after the last epoch repeat the edge epoch.
    """
    probs = np.asarray(probs)
    e = len(probs)
    idx = np.clip(np.arange(e)[:, None] + np.arange(-context, context + 1)[None, :], 0, e - 1)
    return probs[idx]


@dataclass
class ScoredEpoch:
    index: int
    single_logits: np.ndarray
    multi_logits: np.ndarray
    single_pred: int
    multi_pred: int
    label: int | None = None


def score_recording(single: SingleEpochNet, multi: MultiEpochNet, epochs) -> list[ScoredEpoch]:
    """Score consecutive epochs of one recording with both networks."""
    if not epochs:
        return []
    eeg = np.stack([e.eeg for e in epochs])
    eog = np.stack([e.eog for e in epochs])
    o = single.predict_logits(eeg, eog)
    o_star = multi.predict_logits(build_windows(ops.softmax(o)))
    return [ScoredEpoch(e.index, o[i], o_star[i], int(o[i].argmax()), int(o_star[i].argmax()), int(e.label))
            for i, e in enumerate(epochs)]
