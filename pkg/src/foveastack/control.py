"""Voltage-to-wavefront control of the deformable plate.

A synthetic 63-electrode device stands in for hardware: each electrode
adds a Gaussian influence bump scaled by a saturating function of its
voltage, with weak coupling to hex neighbors, and the resulting OPD is
reported as an order-4 Zernike fit. On top of that sit the control
models: a linear influence matrix on squared voltages, a dual-branch
decoder network, an encoder network, and the four control strategies.
Networks are small enough that training is plain numpy with explicit
backpropagation and a seeded Adam loop.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import zernike
from .errors import ConfigError

V_MAX = 270.0
N_ELECTRODES = 63

# saturation strength of the synthetic membrane; strong enough that the
# quadratic model visibly degrades at large amplitudes
KAPPA = 2.0

DEVICE_GAIN_UM = 1.2e-4     # OPD per unit of s(V) at an electrode center
COUPLING = 0.15             # fraction of a neighbor's drive that leaks over

K_COEFFS = zernike.num_terms(4)


def saturation(v, v_max: float = V_MAX, kappa: float = KAPPA):
    """Electrode response s(V): quadratic at small V, compressing near
    V_max."""
    v = np.asarray(v, dtype=float)
    return v * v / (1.0 + kappa * (v / v_max) ** 2)


def electrode_layout(aperture_radius: float,
                     count: int = N_ELECTRODES) -> np.ndarray:
    """Hexagonal-lattice electrode centers inside the aperture.

    Rings 0..4 give 61 sites; the remaining electrodes take the
    innermost next-ring sites. Returns (count, 2) mm positions.
    """
    spacing = aperture_radius / 4.6
    sites = []
    for i in range(-8, 9):
        for j in range(-8, 9):
            x = spacing * (i + 0.5 * j)
            y = spacing * (math.sqrt(3) / 2 * j)
            ring = max(abs(i), abs(j), abs(i + j))
            sites.append((ring, math.hypot(x, y),
                          math.atan2(y, x) % (2 * math.pi), x, y))
    sites.sort(key=lambda s: (s[0], s[1], s[2]))
    pts = np.array([(s[3], s[4]) for s in sites[:count]])
    if np.hypot(pts[:, 0], pts[:, 1]).max() >= aperture_radius:
        raise ConfigError("electrode lattice overruns the aperture")
    return pts


@dataclass
class SyntheticDevice:
    """Deterministic hardware stand-in mapping voltages to wavefronts."""

    aperture_radius: float = 5.0
    influence_width: float = None   # mm; defaults to 1.1 lattice spacings
    kappa: float = KAPPA
    coupling: float = COUPLING
    gain: float = DEVICE_GAIN_UM
    max_order: int = 4
    centers: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.influence_width is None:
            self.influence_width = 1.1 * self.aperture_radius / 4.6
        self.centers = electrode_layout(self.aperture_radius)
        self._build_operators()

    def _build_operators(self):
        # fixed sample disk for the Zernike fit
        n = 41
        ax = np.linspace(-1, 1, n) * self.aperture_radius * 0.998
        X, Y = np.meshgrid(ax, ax)
        inside = X ** 2 + Y ** 2 <= (self.aperture_radius * 0.998) ** 2
        self._xy = np.column_stack([X[inside], Y[inside]])
        d2 = ((self._xy[:, None, :] - self.centers[None, :, :]) ** 2).sum(-1)
        G = self.gain * np.exp(-d2 / (2 * self.influence_width ** 2))
        nbr = (((self.centers[:, None] - self.centers[None]) ** 2).sum(-1)
               ** 0.5 < 1.5 * self.aperture_radius / 4.6)
        np.fill_diagonal(nbr, False)
        self._neighbors = nbr / 6.0
        # Zernike-fit operator: pinv of the basis over the sample disk
        u = self._xy[:, 0] / self.aperture_radius
        v = self._xy[:, 1] / self.aperture_radius
        Z = np.column_stack(zernike._eval_terms(u, v, self.max_order))
        self._fit = np.linalg.pinv(Z)
        # W = response_matrix @ s_eff(V)
        self.response_matrix = self._fit @ G

    def apply(self, V) -> zernike.ZernikeExpansion:
        """Wavefront produced by one voltage pattern."""
        w = self.apply_batch(np.asarray(V, float)[None, :])[0]
        return zernike.ZernikeExpansion(w, self.aperture_radius,
                                        self.max_order)

    def apply_batch(self, V: np.ndarray) -> np.ndarray:
        """(n, 63) voltages -> (n, K) coefficients in micrometers."""
        V = np.asarray(V, dtype=float)
        if V.shape[-1] != N_ELECTRODES:
            raise ConfigError(f"expected {N_ELECTRODES} voltages")
        if V.min() < 0 or V.max() > V_MAX:
            raise ConfigError("voltages outside [0, V_max]")
        s = saturation(V, kappa=self.kappa)
        # bilinear cross-coupling: a driven electrode's bump deepens in
        # proportion to its neighbors' mean drive
        s_max = saturation(V_MAX, kappa=self.kappa)
        s_eff = s + self.coupling * s * (s @ self._neighbors.T) / s_max
        return s_eff @ self.response_matrix.T


def device_apply(device: SyntheticDevice, V) -> zernike.ZernikeExpansion:
    return device.apply(V)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    V_train: np.ndarray
    W_train: np.ndarray
    V_test: np.ndarray
    W_test: np.ndarray

    def save(self, path):
        """CSV: 63 voltages then K coefficients per row; a leading
        column marks the split."""
        rows = []
        for tag, V, W in (("train", self.V_train, self.W_train),
                          ("test", self.V_test, self.W_test)):
            for v, w in zip(V, W):
                rows.append([tag] + [f"{x:.12g}" for x in np.r_[v, w]])
        with open(path, "w") as f:
            f.write("\n".join(",".join(r) for r in rows) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        tr, te = [], []
        with open(path) as f:
            for line in f:
                parts = line.strip().split(",")
                if not parts[0]:
                    continue
                (tr if parts[0] == "train" else te).append(
                    [float(x) for x in parts[1:]])
        tr, te = np.asarray(tr), np.asarray(te)
        ne = N_ELECTRODES
        return cls(tr[:, :ne], tr[:, ne:], te[:, :ne], te[:, ne:])


def dataset_generate(device: SyntheticDevice, count: int,
                     seed: int = 0) -> Dataset:
    """Paired (V, W) samples, 80/20 train/test split.

    A quarter of the samples are random voltage patterns with random
    overall amplitude; the rest are random coefficient targets inverted
    through a bootstrap linear model, so the set covers both voltage
    space and the reachable coefficient range.
    """
    if count < 100:
        raise ConfigError("dataset needs at least 100 samples")
    rng = np.random.default_rng(seed)
    # random-V samples add coverage; keeping them a minority limits the
    # one-to-many V | W ambiguity they inject into encoder training
    n_rand = count // 4

    amp = rng.uniform(0.1, 1.0, size=(n_rand, 1))
    V_rand = V_MAX * amp * rng.uniform(0, 1, size=(n_rand, N_ELECTRODES))
    W_rand = device.apply_batch(V_rand)

    # bootstrap linear model for inverse sampling of coefficient targets
    boot_V = V_MAX * rng.uniform(0, 1, size=(256, N_ELECTRODES)) \
        * rng.uniform(0.1, 1.0, size=(256, 1))
    A = fit_linear_arrays(boot_V, device.apply_batch(boot_V))
    lo, hi = W_rand.min(axis=0), W_rand.max(axis=0)
    n_inv = count - n_rand
    targets = rng.uniform(lo, hi, size=(n_inv, len(lo)))
    # one-shot clipped least-squares inverse; the exact constrained
    # solve is not needed here since the measured W is recorded anyway
    u = np.clip(targets @ np.linalg.pinv(A).T, 0.0, V_MAX ** 2)
    V_inv = np.sqrt(u)
    W_inv = device.apply_batch(V_inv)

    V = np.vstack([V_rand, V_inv])
    W = np.vstack([W_rand, W_inv])
    order = rng.permutation(count)
    V, W = V[order], W[order]
    n_train = int(round(count * 0.8))
    return Dataset(V[:n_train], W[:n_train], V[n_train:], W[n_train:])


# ---------------------------------------------------------------------------
# linear model
# ---------------------------------------------------------------------------

def fit_linear_arrays(V: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Least-squares influence matrix A with W = A V^2."""
    U = np.asarray(V, float) ** 2
    if np.linalg.matrix_rank(U) < U.shape[1]:
        warnings.warn("rank-deficient voltage data; using ridge solve")
        lam = 1e-8 * np.trace(U.T @ U) / U.shape[1]
        At = np.linalg.solve(U.T @ U + lam * np.eye(U.shape[1]), U.T @ W)
    else:
        At, *_ = np.linalg.lstsq(U, W, rcond=None)
    return At.T


def fit_linear(dataset: Dataset) -> np.ndarray:
    return fit_linear_arrays(dataset.V_train, dataset.W_train)


def solve_linear(A: np.ndarray, W_target, iters: int = 400):
    """min ||A u - W||^2 over u = V^2 in [0, V_max^2], projected gradient.

    Returns (V, info); info reports the residual of the best feasible
    point when the target is out of range.
    """
    W = np.asarray(W_target, float)
    lam = np.linalg.norm(A, 2) ** 2
    step = 1.0 / (2.0 * lam) if lam > 0 else 1.0
    u = np.clip(np.linalg.lstsq(A, W, rcond=None)[0], 0.0, V_MAX ** 2)
    for _ in range(iters):
        grad = 2.0 * A.T @ (A @ u - W)
        u = np.clip(u - step * grad, 0.0, V_MAX ** 2)
    resid = float(np.linalg.norm(A @ u - W))
    return np.sqrt(u), {"residual": resid}


# ---------------------------------------------------------------------------
# networks (numpy, explicit backprop)
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class _AdamState:
    def __init__(self, params: dict, lr: float, decay: float = 1.0):
        self.lr = lr
        self.decay = decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mh = self.m[k] / (1 - b1 ** self.t)
            vh = self.v[k] / (1 - b2 ** self.t)
            params[k] -= self.lr * mh / (np.sqrt(vh) + eps)

    def end_epoch(self):
        self.lr *= self.decay


@dataclass
class Decoder:
    """Voltage -> coefficients, linear branch on V^2 plus a
    sigmoid-activated residual branch on [V, V^2]."""

    params: dict
    offset: np.ndarray          # subtracted so decoder(0) = 0
    seed: int
    loss_curve: list = field(default_factory=list)

    def _raw(self, vn: np.ndarray):
        p = self.params
        q = vn * vn
        x = np.concatenate([vn, q], axis=-1)
        z = x @ p["W1"].T + p["b1"]
        h = _sigmoid(z)
        out = q @ p["A"].T + h @ p["W2"].T + p["b2"]
        return out, (x, z, h, q)

    def predict(self, V: np.ndarray) -> np.ndarray:
        vn = np.atleast_2d(np.asarray(V, float)) / V_MAX
        out, _ = self._raw(vn)
        out = out - self.offset
        return out[0] if np.asarray(V).ndim == 1 else out

    def __call__(self, V):
        return self.predict(V)

    def input_gradient(self, vn: np.ndarray, W_target: np.ndarray):
        """d/d(vn) of ||decoder(V) - W_target||^2, batched."""
        p = self.params
        out, (x, z, h, q) = self._raw(vn)
        r = 2.0 * (out - self.offset - W_target)
        gh = r @ p["W2"]
        gz = gh * h * (1 - h)
        gx = gz @ p["W1"]
        gq = gx[:, N_ELECTRODES:] + r @ p["A"]
        return gx[:, :N_ELECTRODES] + 2.0 * vn * gq

    def to_dict(self) -> dict:
        return {
            "architecture": "linear(V^2) + sigmoid[V, V^2] residual",
            "hidden": self.params["b1"].shape[0],
            "seed": self.seed,
            "offset": self.offset.tolist(),
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Decoder":
        return cls({k: np.asarray(v) for k, v in d["params"].items()},
                   np.asarray(d["offset"]), d["seed"])


def train_decoder(dataset: Dataset, sigma: float = 0.36, epochs: int = 800,
                  seed: int = 0, hidden: int = 256, lr: float = 2e-3,
                  batch: int = 128) -> Decoder:
    """Fit the dual-branch decoder by minibatch Adam on coefficient MSE.

    Gaussian noise of the given sigma (micrometers) augments the
    coefficient targets, redrawn each epoch. The learning rate decays
    exponentially so late epochs average the augmentation noise out.
    """
    rng = np.random.default_rng(seed)
    k = dataset.W_train.shape[1]
    ne = N_ELECTRODES
    params = {
        "A": rng.normal(scale=0.1, size=(k, ne)),
        "W1": rng.normal(scale=1.0 / math.sqrt(2 * ne), size=(hidden, 2 * ne)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(scale=0.01 / math.sqrt(hidden), size=(k, hidden)),
        "b2": np.zeros(k),
    }
    dec = Decoder(params, np.zeros(k), seed)
    adam = _AdamState(params, lr, decay=(0.05) ** (1.0 / max(epochs, 1)))
    Vn = dataset.V_train / V_MAX
    n = len(Vn)
    for _ in range(epochs):
        order = rng.permutation(n)
        noise = rng.normal(scale=sigma, size=dataset.W_train.shape) \
            if sigma > 0 else 0.0
        W_aug = dataset.W_train + noise
        total = 0.0
        for i in range(0, n, batch):
            idx = order[i:i + batch]
            vn, tgt = Vn[idx], W_aug[idx]
            out, (x, z, h, q) = dec._raw(vn)
            r = out - tgt
            total += float((r ** 2).sum())
            g = 2.0 * r / len(idx)
            gh = g @ params["W2"]
            gz = gh * h * (1 - h)
            grads = {
                "A": g.T @ q,
                "W2": g.T @ h,
                "b2": g.sum(axis=0),
                "W1": gz.T @ x,
                "b1": gz.sum(axis=0),
            }
            adam.step(params, grads)
        adam.end_epoch()
        dec.loss_curve.append(total / n)
    _warn_if_flat(dec.loss_curve, "decoder")
    dec.offset = dec._raw(np.zeros((1, ne)))[0][0]
    return dec


@dataclass
class Encoder:
    """Coefficients -> voltages, two-layer perceptron with a final
    sigmoid scaled to [0, V_max]."""

    params: dict
    w_scale: np.ndarray
    seed: int
    loss_curve: list = field(default_factory=list)

    def _forward(self, W: np.ndarray):
        p = self.params
        x = W / self.w_scale
        z = x @ p["W1"].T + p["b1"]
        h = np.tanh(z)
        z2 = h @ p["W2"].T + p["b2"]
        vn = _sigmoid(z2)
        return vn, (x, h, z2)

    def predict(self, W: np.ndarray) -> np.ndarray:
        vn, _ = self._forward(np.atleast_2d(np.asarray(W, float)))
        out = vn * V_MAX
        return out[0] if np.asarray(W).ndim == 1 else out

    def __call__(self, W):
        return self.predict(W)

    def to_dict(self) -> dict:
        return {
            "architecture": "mlp tanh hidden, sigmoid * V_max",
            "hidden": self.params["b1"].shape[0],
            "seed": self.seed,
            "w_scale": self.w_scale.tolist(),
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Encoder":
        return cls({k: np.asarray(v) for k, v in d["params"].items()},
                   np.asarray(d["w_scale"]), d["seed"])


def train_encoder(dataset: Dataset, epochs: int = 700, seed: int = 0,
                  hidden: int = 256, lr: float = 2e-3, batch: int = 128,
                  sigma: float = 0.0) -> Encoder:
    """Supervised W -> V regression on normalized voltages."""
    rng = np.random.default_rng(seed)
    k = dataset.W_train.shape[1]
    ne = N_ELECTRODES
    w_scale = np.maximum(dataset.W_train.std(axis=0), 1e-6)
    params = {
        "W1": rng.normal(scale=1.0 / math.sqrt(k), size=(hidden, k)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(scale=1.0 / math.sqrt(hidden), size=(ne, hidden)),
        "b2": np.zeros(ne),
    }
    enc = Encoder(params, w_scale, seed)
    adam = _AdamState(params, lr, decay=(0.1) ** (1.0 / max(epochs, 1)))
    tgt_all = dataset.V_train / V_MAX
    n = len(tgt_all)
    for _ in range(epochs):
        order = rng.permutation(n)
        W_in = dataset.W_train + (rng.normal(scale=sigma,
                                             size=dataset.W_train.shape)
                                  if sigma > 0 else 0.0)
        total = 0.0
        for i in range(0, n, batch):
            idx = order[i:i + batch]
            vn, (x, h, z2) = enc._forward(W_in[idx])
            r = vn - tgt_all[idx]
            total += float((r ** 2).sum())
            g = 2.0 * r / len(idx) * vn * (1 - vn)
            gh = g @ params["W2"]
            gz = gh * (1 - h * h)
            grads = {
                "W2": g.T @ h,
                "b2": g.sum(axis=0),
                "W1": gz.T @ x,
                "b1": gz.sum(axis=0),
            }
            adam.step(params, grads)
        adam.end_epoch()
        enc.loss_curve.append(total / n)
    _warn_if_flat(enc.loss_curve, "encoder")
    return enc


def _warn_if_flat(curve: list, name: str):
    n = len(curve)
    tail = max(1, n // 5)
    if n >= 5 and min(curve[-tail:]) >= curve[0]:
        warnings.warn(f"{name} training loss failed to decrease")


# ---------------------------------------------------------------------------
# control strategies
# ---------------------------------------------------------------------------

@dataclass
class ControlModels:
    A: np.ndarray | None = None
    decoder: Decoder | None = None
    encoder: Encoder | None = None

    def save(self, path):
        out = {}
        if self.A is not None:
            out["A"] = self.A.tolist()
        if self.decoder is not None:
            out["decoder"] = self.decoder.to_dict()
        if self.encoder is not None:
            out["encoder"] = self.encoder.to_dict()
        with open(path, "w") as f:
            json.dump(out, f)

    @classmethod
    def load(cls, path) -> "ControlModels":
        with open(path) as f:
            d = json.load(f)
        return cls(
            A=np.asarray(d["A"]) if "A" in d else None,
            decoder=Decoder.from_dict(d["decoder"]) if "decoder" in d else None,
            encoder=Encoder.from_dict(d["encoder"]) if "encoder" in d else None,
        )


STRATEGIES = ("linear", "encoder", "decoder", "encoder+decoder")


def control(W_target, strategy: str, models: ControlModels,
            iters: int = 80, lr: float = 0.02) -> np.ndarray:
    """Voltage pattern for a coefficient target under one strategy.

    Optimization-based strategies run a fixed budget of Adam steps on
    the normalized voltages through the decoder, projected onto the
    box, from zero (decoder) or from the encoder's prediction
    (encoder+decoder).
    """
    W = np.asarray(W_target, float)
    if strategy == "linear":
        if models.A is None:
            raise ConfigError("linear strategy needs a fitted A")
        return solve_linear(models.A, W)[0]
    if strategy == "encoder":
        if models.encoder is None:
            raise ConfigError("encoder strategy needs a trained encoder")
        return models.encoder(W)
    if strategy not in ("decoder", "encoder+decoder"):
        raise ConfigError(f"unknown strategy {strategy!r}")
    if models.decoder is None:
        raise ConfigError(f"{strategy} strategy needs a trained decoder")
    single = W.ndim == 1
    W2 = np.atleast_2d(W)
    if strategy == "encoder+decoder":
        if models.encoder is None:
            raise ConfigError("encoder+decoder needs a trained encoder")
        vn = models.encoder(W2) / V_MAX
    else:
        vn = np.zeros((len(W2), N_ELECTRODES))
    m = np.zeros_like(vn)
    v = np.zeros_like(vn)
    for t in range(1, iters + 1):
        g = models.decoder.input_gradient(vn, W2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        vn = np.clip(vn - lr * mh / (np.sqrt(vh) + 1e-8), 0.0, 1.0)
    V = vn * V_MAX
    return V[0] if single else V


def compare_strategies(device: SyntheticDevice, models: ControlModels,
                       dataset: Dataset, iters: int = 80) -> dict:
    """Per-strategy error table over the test split.

    Reports voltage MSE against the generating pattern, the
    decoder-predicted residual W_r, and the device-measured residual
    W_m (all coefficients and order >= 2 variants).
    """
    W_t, V_t = dataset.W_test, dataset.V_test
    ho = zernike.num_terms(1)   # first order >= 2 coefficient index
    out = {}
    for strat in STRATEGIES:
        V = control(W_t, strat, models, iters=iters) \
            if strat in ("decoder", "encoder+decoder") \
            else np.stack([control(w, strat, models) for w in W_t]) \
            if strat == "linear" else control(W_t, strat, models)
        W_m = device.apply_batch(V)
        entry = {
            "v_mse": float(((V - V_t) ** 2).mean()),
            "w_m_mse": float(((W_m - W_t) ** 2).mean()),
            "w_m_mse_ho": float(((W_m - W_t)[:, ho:] ** 2).mean()),
        }
        if models.decoder is not None:
            W_r = models.decoder(V)
            entry["w_r_mse"] = float(((W_r - W_t) ** 2).mean())
        out[strat] = entry
    wm = {s: out[s]["w_m_mse"] for s in STRATEGIES}
    out["ordering_ok"] = bool(
        wm["encoder+decoder"] <= wm["encoder"] <=
        min(wm["decoder"], wm["linear"]))
    return out


# ---------------------------------------------------------------------------
# grid-interpolated control
# ---------------------------------------------------------------------------

@dataclass
class ControlGrid:
    """Field-anchored control vectors on a g x g grid over the image.

    values holds one vector per anchor, either voltages or Zernike
    coefficients; anchors sit at normalized image positions
    linspace(0, 1, g) in each axis (row = y, column = x).
    """

    values: np.ndarray          # (g, g, D)
    space: str = "voltage"      # voltage | coefficient

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[0] != self.values.shape[1]:
            raise ConfigError("grid values must be (g, g, D)")
        if self.space not in ("voltage", "coefficient"):
            raise ConfigError(f"unknown grid space {self.space!r}")

    def save(self, path):
        with open(path, "w") as f:
            json.dump({"space": self.space,
                       "values": self.values.tolist()}, f)

    @classmethod
    def load(cls, path) -> "ControlGrid":
        with open(path) as f:
            d = json.load(f)
        return cls(np.asarray(d["values"]), d["space"])


def grid_control(grid: ControlGrid, position) -> tuple:
    """Bilinear interpolation of the four anchors around a position.

    position is (x, y) in normalized image coordinates; out-of-range
    queries are clamped to the hull. Returns (vector, clamped).
    """
    x, y = float(position[0]), float(position[1])
    clamped = not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0)
    x, y = min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0)
    g = grid.values.shape[0]
    fx, fy = x * (g - 1), y * (g - 1)
    i0, j0 = min(int(fy), g - 2), min(int(fx), g - 2)
    ty, tx = fy - i0, fx - j0
    v = ((1 - ty) * (1 - tx) * grid.values[i0, j0]
         + (1 - ty) * tx * grid.values[i0, j0 + 1]
         + ty * (1 - tx) * grid.values[i0 + 1, j0]
         + ty * tx * grid.values[i0 + 1, j0 + 1])
    if grid.space == "voltage":
        v = np.clip(v, 0.0, V_MAX)
    return v, clamped


def build_pattern_grid(system, g: int = 9, schedule=None) -> ControlGrid:
    """Per-anchor single-point optimization over a g x g image grid,
    stored as coefficient vectors for interpolation."""
    from . import optimize as opt
    pts = opt.field_grid(system, (g, g))
    values = np.zeros((g, g, K_COEFFS))
    for i in range(g):
        for j in range(g):
            exp, _ = opt.optimize_single(system, pts[i, j], schedule)
            values[i, j] = exp.coeffs
    return ControlGrid(values, "coefficient")
