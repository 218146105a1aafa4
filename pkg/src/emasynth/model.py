"""Sequence regressor: stacked unidirectional LSTM with a linear readout.

Forward, exact backpropagation through time, Adam, and an early-stopping
training loop, all in float64 numpy.  Gate order is [input, forget, cell,
output]; each layer carries two bias vectors (input-side and
recurrent-side), so the parameter count of layer l is
4 * (D_l * H + H^2 + 2 H).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateDataError, DomainError, ParseError


@dataclass(frozen=True)
class LstmSpec:
    input_dim: int
    output_dim: int
    hidden: int = 128
    layers: int = 4

    def validate(self):
        if min(self.input_dim, self.output_dim, self.hidden, self.layers) < 1:
            raise ConfigError(f"all LSTM dimensions must be >= 1, got {self}")
        return self

    def layer_input_dim(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.hidden

    def parameter_count(self) -> int:
        total = 0
        for l in range(self.layers):
            d = self.layer_input_dim(l)
            total += 4 * (d * self.hidden + self.hidden**2 + 2 * self.hidden)
        total += self.hidden * self.output_dim + self.output_dim
        return total


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.001
    max_epochs: int = 50
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        return self


class LstmParams:
    """Parameter views over one flat float64 vector."""

    def __init__(self, spec: LstmSpec, flat: np.ndarray):
        spec.validate()
        expected = spec.parameter_count()
        if flat.shape != (expected,):
            raise DomainError(
                f"flat parameter vector has {flat.shape}, expected ({expected},)"
            )
        self.spec = spec
        self.flat = flat
        H = spec.hidden
        self.layers = []
        offset = 0

        def take(shape):
            nonlocal offset
            size = int(np.prod(shape))
            view = self.flat[offset:offset + size].reshape(shape)
            offset += size
            return view

        for l in range(spec.layers):
            d = spec.layer_input_dim(l)
            self.layers.append({
                "W_x": take((4 * H, d)),
                "W_h": take((4 * H, H)),
                "b_ih": take((4 * H,)),
                "b_hh": take((4 * H,)),
            })
        self.W_out = take((spec.output_dim, H))
        self.b_out = take((spec.output_dim,))
        assert offset == expected

    @classmethod
    def zeros(cls, spec: LstmSpec) -> "LstmParams":
        return cls(spec, np.zeros(spec.parameter_count()))

    @classmethod
    def init(cls, spec: LstmSpec, rng: np.random.Generator) -> "LstmParams":
        """Uniform(-k, k) with k = 1/sqrt(fan-in) per tensor."""
        params = cls.zeros(spec)
        H = spec.hidden
        for l, layer in enumerate(params.layers):
            d = spec.layer_input_dim(l)
            layer["W_x"][:] = rng.uniform(-1, 1, layer["W_x"].shape) / np.sqrt(d)
            layer["W_h"][:] = rng.uniform(-1, 1, layer["W_h"].shape) / np.sqrt(H)
            layer["b_ih"][:] = rng.uniform(-1, 1, 4 * H) / np.sqrt(H)
            layer["b_hh"][:] = rng.uniform(-1, 1, 4 * H) / np.sqrt(H)
        params.W_out[:] = rng.uniform(-1, 1, params.W_out.shape) / np.sqrt(H)
        params.b_out[:] = 0.0
        return params

    def copy(self) -> "LstmParams":
        return LstmParams(self.spec, self.flat.copy())


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _forward_cached(params: LstmParams, X: np.ndarray):
    spec = params.spec
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DomainError(
            f"input must be (T, {spec.input_dim}), got {X.shape}"
        )
    T = X.shape[0]
    H = spec.hidden
    caches = []
    inp = X
    for layer in params.layers:
        pre = inp @ layer["W_x"].T + layer["b_ih"] + layer["b_hh"]
        i_g = np.empty((T, H)); f_g = np.empty((T, H))
        g_g = np.empty((T, H)); o_g = np.empty((T, H))
        c_s = np.empty((T, H)); h_s = np.empty((T, H))
        h = np.zeros(H)
        c = np.zeros(H)
        W_h = layer["W_h"]
        for t in range(T):
            z = pre[t] + W_h @ h
            i = _sigmoid(z[:H])
            f = _sigmoid(z[H:2 * H])
            g = np.tanh(z[2 * H:3 * H])
            o = _sigmoid(z[3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
            i_g[t], f_g[t], g_g[t], o_g[t] = i, f, g, o
            c_s[t], h_s[t] = c, h
        caches.append({"input": inp, "i": i_g, "f": f_g, "g": g_g, "o": o_g,
                       "c": c_s, "h": h_s})
        inp = h_s
    Y = inp @ params.W_out.T + params.b_out
    return Y, caches


def forward(params: LstmParams, X: np.ndarray) -> np.ndarray:
    """Run the network over a sequence; (T, input_dim) -> (T, output_dim)."""
    if len(X) == 0:
        return np.zeros((0, params.spec.output_dim))
    Y, _ = _forward_cached(params, X)
    return Y


def backward(params: LstmParams, X: np.ndarray, Y: np.ndarray):
    """Mean-squared-error loss and its exact gradient.

    Returns (loss, grad) with grad flat in the same layout as params.flat.
    The loss is the mean over all T x output_dim entries.
    """
    spec = params.spec
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(X) == 0:
        return 0.0, np.zeros_like(params.flat)
    if Y.shape != (X.shape[0], spec.output_dim):
        raise DomainError(f"target must be (T, {spec.output_dim}), got {Y.shape}")

    Y_hat, caches = _forward_cached(params, X)
    T = X.shape[0]
    H = spec.hidden
    resid = Y_hat - Y
    loss = float(np.mean(resid**2))

    grad = LstmParams.zeros(spec)
    d_out = 2.0 * resid / resid.size
    top_h = caches[-1]["h"]
    grad.W_out[:] = d_out.T @ top_h
    grad.b_out[:] = d_out.sum(axis=0)
    dH = d_out @ params.W_out

    for l in range(spec.layers - 1, -1, -1):
        cache = caches[l]
        layer = params.layers[l]
        g_layer = grad.layers[l]
        i_g, f_g, g_g, o_g = cache["i"], cache["f"], cache["g"], cache["o"]
        c_s, h_s = cache["c"], cache["h"]
        tanh_c = np.tanh(c_s)
        dZ = np.empty((T, 4 * H))
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        W_h = layer["W_h"]
        for t in range(T - 1, -1, -1):
            dh = dH[t] + dh_next
            do = dh * tanh_c[t]
            dc = dh * o_g[t] * (1.0 - tanh_c[t]**2) + dc_next
            di = dc * g_g[t]
            dg = dc * i_g[t]
            c_prev = c_s[t - 1] if t > 0 else np.zeros(H)
            df = dc * c_prev
            dc_next = dc * f_g[t]
            dz = np.concatenate([
                di * i_g[t] * (1.0 - i_g[t]),
                df * f_g[t] * (1.0 - f_g[t]),
                dg * (1.0 - g_g[t]**2),
                do * o_g[t] * (1.0 - o_g[t]),
            ])
            dZ[t] = dz
            dh_next = W_h.T @ dz
        h_prev = np.vstack([np.zeros((1, H)), h_s[:-1]])
        g_layer["W_x"][:] = dZ.T @ cache["input"]
        g_layer["W_h"][:] = dZ.T @ h_prev
        g_layer["b_ih"][:] = dZ.sum(axis=0)
        g_layer["b_hh"][:] = dZ.sum(axis=0)
        dH = dZ @ layer["W_x"]
    return loss, grad.flat


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


def adam_step(flat: np.ndarray, grad: np.ndarray, state: AdamState,
              hyper: TrainHyper) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    state.m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad
    state.v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad**2
    m_hat = state.m / (1.0 - hyper.beta1**state.t)
    v_hat = state.v / (1.0 - hyper.beta2**state.t)
    flat -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)


@dataclass
class Checkpoint:
    spec: LstmSpec
    hyper: TrainHyper
    flat: np.ndarray
    curve: list
    best_epoch: int
    seed: int
    extras: dict = field(default_factory=dict)

    def params(self) -> LstmParams:
        return LstmParams(self.spec, self.flat)


_CKPT_MAGIC = b"ASCK"
_CKPT_VERSION = 1


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "spec": asdict(ckpt.spec),
        "hyper": asdict(ckpt.hyper),
        "curve": ckpt.curve,
        "best_epoch": ckpt.best_epoch,
        "seed": ckpt.seed,
        "extras": ckpt.extras,
        "n_params": int(ckpt.flat.size),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(ckpt.flat, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ParseError("not a checkpoint file", source=path)
    version, blob_len = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", source=path)
    header = json.loads(raw[12:12 + blob_len].decode("utf-8"))
    flat = np.frombuffer(raw, dtype="<f8", offset=12 + blob_len).copy()
    spec = LstmSpec(**header["spec"])
    if flat.size != header["n_params"] or flat.size != spec.parameter_count():
        raise ParseError("checkpoint payload size mismatch", source=path)
    return Checkpoint(
        spec=spec,
        hyper=TrainHyper(**header["hyper"]),
        flat=flat,
        curve=header["curve"],
        best_epoch=header["best_epoch"],
        seed=header["seed"],
        extras=header["extras"],
    )


def _dataset_mse(params: LstmParams, seqs: list) -> float:
    total_se = 0.0
    total_n = 0
    for _, X, Y in seqs:
        pred = forward(params, X)
        total_se += float(np.sum((pred - Y)**2))
        total_n += Y.size
    return total_se / max(total_n, 1)


def data_fingerprint(seqs: list) -> str:
    h = hashlib.sha256()
    for utt_id, X, Y in sorted(seqs, key=lambda s: s[0]):
        h.update(utt_id.encode())
        h.update(np.ascontiguousarray(X, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(Y, dtype="<f8").tobytes())
    return h.hexdigest()


def train(seqs: list, hyper: TrainHyper, spec: LstmSpec,
          extras: dict | None = None, val_seqs: list | None = None) -> Checkpoint:
    """Train on (utterance_id, X, Y) sequences with early stopping.

    A seeded utterance-level validation split is held out (or supplied
    explicitly via val_seqs, e.g. to keep augmented copies out of
    validation); after each epoch the validation MSE is evaluated and the
    best-scoring parameters are kept.  Training stops when validation has
    not improved for `patience` epochs or at max_epochs.  Batch size is one
    utterance (full sequence) per Adam step, with the visit order
    reshuffled every epoch.
    """
    hyper.validate()
    spec.validate()
    if len(seqs) < 2 and val_seqs is None:
        raise DegenerateDataError(
            "need >= 2 training utterances to hold out a validation split"
        )
    rng = np.random.default_rng(hyper.seed)
    if val_seqs is None:
        order = rng.permutation(len(seqs))
        n_val = min(len(seqs) - 1,
                    max(1, int(round(hyper.val_fraction * len(seqs)))))
        val_seqs = [seqs[i] for i in order[:n_val]]
        train_seqs = [seqs[i] for i in order[n_val:]]
    else:
        train_seqs = list(seqs)
        if not train_seqs or not val_seqs:
            raise DegenerateDataError("both train and validation sets must be non-empty")

    params = LstmParams.init(spec, rng)
    state = AdamState.zeros(params.flat.size)

    best_val = np.inf
    best_flat = params.flat.copy()
    best_epoch = 0
    bad_epochs = 0
    curve = []
    for epoch in range(1, hyper.max_epochs + 1):
        visit = rng.permutation(len(train_seqs))
        total_se = 0.0
        total_n = 0
        for idx in visit:
            _, X, Y = train_seqs[idx]
            loss, grad = backward(params, X, Y)
            adam_step(params.flat, grad, state, hyper)
            total_se += loss * Y.size
            total_n += Y.size
        train_mse = total_se / max(total_n, 1)
        val_mse = _dataset_mse(params, val_seqs)
        curve.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse})
        if val_mse < best_val:
            best_val = val_mse
            best_flat = params.flat.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= hyper.patience:
                break
    return Checkpoint(spec=spec, hyper=hyper, flat=best_flat, curve=curve,
                      best_epoch=best_epoch, seed=hyper.seed,
                      extras=dict(extras or {}))
