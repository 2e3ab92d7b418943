"""Network building blocks: dense layers, spectral normalization, and the
conditional generator / projection discriminator pair.

All networks are MLPs over flattened images. Weight matrices are stored
``(out, in)`` so a dense layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

logger = logging.getLogger(__name__)

SN_EPS = 1e-12

_ACTIVATIONS = {
    "relu": T.relu,
    "leaky_relu": T.leaky_relu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "identity": lambda x: x,
}


def _init_dense(rng: np.random.Generator, fan_out: int, fan_in: int) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(fan_in)
    W = Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True)
    return W, b


def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"dense: input {x.shape} does not fit weight {W.shape}")
    out = T.matmul(x, T.transpose(W))
    return out if b is None else T.add_rowvec(out, b)


# ------------------------------------------------------------ spectral norm


@dataclass
class SpectralNormState:
    """Persistent power-iteration state for one weight matrix."""

    u: np.ndarray
    sigma: float = 1.0
    n_power_iterations: int = 1

    @classmethod
    def init(cls, rows: int, rng: np.random.Generator, n_power_iterations: int = 1) -> SpectralNormState:
        u = rng.standard_normal(rows)
        return cls(u / np.linalg.norm(u), 1.0, n_power_iterations)


def _unit(x: np.ndarray) -> np.ndarray | None:
    n = np.linalg.norm(x)
    return None if n < SN_EPS else x / n


def spectral_normalize(W: Tensor, state: SpectralNormState, n_iter: int | None = None,
                       update: bool = True) -> tuple[Tensor, SpectralNormState]:
    """Divide ``W`` by a power-iteration estimate of its top singular value.

    The estimate is a constant for differentiation: gradients reach ``W``
    only through the ``1 / sigma`` scaling.
    """
    if W.ndim != 2:
        W2 = T.reshape(W, (W.shape[0], -1))
    else:
        W2 = W
    Wd = W2.data
    if state.u.shape != (Wd.shape[0],):
        raise DimensionError(f"spectral_normalize: u has shape {state.u.shape}, weight has {Wd.shape[0]} rows")
    steps = state.n_power_iterations if n_iter is None else int(n_iter)
    u = state.u
    v = _unit(Wd.T @ u)
    for _ in range(steps):
        v_new = _unit(Wd.T @ u)
        if v_new is None:
            break
        v = v_new
        u_new = _unit(Wd @ v)
        if u_new is None:
            break
        u = u_new
    sigma = float(u @ Wd @ v) if v is not None else 0.0
    if sigma < SN_EPS:
        logger.error("spectral_normalize: weight has no usable spectrum (sigma=%g); clamping", sigma)
        sigma = SN_EPS
    new_state = SpectralNormState(u, sigma, state.n_power_iterations)
    if update:
        state.u, state.sigma = u, sigma
    W_sn = T.scale(W2, 1.0 / sigma)
    if W.ndim != 2:
        W_sn = T.reshape(W_sn, W.shape)
    return W_sn, (state if update else new_state)


# ------------------------------------------------------------------ modules


class Module:
    """Named parameter store with optional freezing and array round-trips."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.frozen = False

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, arrays: dict[str, np.ndarray]) -> None:
        pass

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.params.items()}
        out.update(self.buffers())
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ContractError(f"{type(self).__name__}: checkpoint lacks parameter '{name}'")
            if arrays[name].shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
        self.load_buffers(arrays)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


class MLP(Module):
    """Plain dense stack; used for the embedding regressor and the FID classifier."""

    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int, rng: np.random.Generator,
                 activation: str = "relu", out_activation: str = "identity"):
        super().__init__()
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation, self.out_activation = activation, out_activation
        widths = (self.in_dim, *self.hidden, self.out_dim)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.params[f"W{i}"], self.params[f"b{i}"] = _init_dense(rng, b, a)
        self.n_layers = len(widths) - 1

    def _flat(self, x: Tensor) -> Tensor:
        if x.ndim != 2:
            x = T.reshape(x, (x.shape[0], -1))
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"MLP expects {self.in_dim} input features, got {x.shape[1]}")
        return x

    def features(self, x: Tensor) -> Tensor:
        """Activations of the last hidden layer."""
        h = self._flat(x)
        act = _ACTIVATIONS[self.activation]
        for i in range(self.n_layers - 1):
            h = act(dense(h, self.params[f"W{i}"], self.params[f"b{i}"]))
        return h

    def forward(self, x: Tensor) -> Tensor:
        i = self.n_layers - 1
        out = dense(self.features(x), self.params[f"W{i}"], self.params[f"b{i}"])
        return _ACTIVATIONS[self.out_activation](out)

    __call__ = forward


class Generator(Module):
    """Conditional MLP generator ``(z, v) -> image`` with a final tanh.

    One instance serves every condition vector, seen or unseen; there are no
    per-category parameters.
    """

    def __init__(self, noise_dim: int, cond_dim: int, image_shape: Sequence[int],
                 rng: np.random.Generator, hidden: Sequence[int] = (128, 256)):
        super().__init__()
        self.noise_dim, self.cond_dim = int(noise_dim), int(cond_dim)
        self.image_shape = tuple(int(s) for s in image_shape)
        self.hidden = tuple(int(h) for h in hidden)
        out = int(np.prod(self.image_shape))
        widths = (self.noise_dim + self.cond_dim, *self.hidden, out)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.params[f"W{i}"], self.params[f"b{i}"] = _init_dense(rng, b, a)
        self.n_layers = len(widths) - 1

    def forward(self, z, v) -> Tensor:
        z, v = T._as_tensor(z), T._as_tensor(v)
        if z.ndim != 2 or z.shape[1] != self.noise_dim:
            raise ContractError(f"generator: noise must be (n, {self.noise_dim}), got {z.shape}")
        if v.ndim != 2 or v.shape != (z.shape[0], self.cond_dim):
            raise ContractError(f"generator: condition must be ({z.shape[0]}, {self.cond_dim}), got {v.shape}")
        h = T.concat([z, v], axis=1)
        for i in range(self.n_layers):
            h = dense(h, self.params[f"W{i}"], self.params[f"b{i}"])
            h = T.relu(h) if i < self.n_layers - 1 else T.tanh(h)
        return T.reshape(h, (z.shape[0], *self.image_shape))

    __call__ = forward


def generator_forward(z, v, params: Generator) -> Tensor:
    return params.forward(z, v)


class Discriminator(Module):
    """Projection discriminator: ``psi(phi(x)) + <v, V phi(x)>``.

    Trunk and head matrices pass through :func:`spectral_normalize` on every
    forward; the projection matrix ``V`` (``cond_dim x feature_dim``) does not.

    ``watch_conditions`` installs rows that must never be scored; each
    forward counts how many of its condition rows match one of them.
    """

    def __init__(self, image_shape: Sequence[int], cond_dim: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (256,), feature_dim: int = 128, spectral_norm: bool = True,
                 slope: float = 0.2, n_power_iterations: int = 1):
        super().__init__()
        self.image_shape = tuple(int(s) for s in image_shape)
        self.in_dim = int(np.prod(self.image_shape))
        self.cond_dim, self.feature_dim = int(cond_dim), int(feature_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.spectral_norm, self.slope = bool(spectral_norm), float(slope)
        widths = (self.in_dim, *self.hidden, self.feature_dim)
        self.n_trunk = len(widths) - 1
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.params[f"W{i}"], self.params[f"b{i}"] = _init_dense(rng, b, a)
        self.params["psi_W"], self.params["psi_b"] = _init_dense(rng, 1, self.feature_dim)
        bound = 1.0 / np.sqrt(self.feature_dim)
        self.params["V"] = Tensor(rng.uniform(-bound, bound, size=(self.cond_dim, self.feature_dim)),
                                  requires_grad=True)
        self.sn: dict[str, SpectralNormState] = {
            name: SpectralNormState.init(self.params[name].shape[0], rng, n_power_iterations)
            for name in self.sn_weight_names()
        }
        self._watched: np.ndarray | None = None
        self.calls = 0
        self.forbidden_hits = 0

    def sn_weight_names(self) -> list[str]:
        return [f"W{i}" for i in range(self.n_trunk)] + ["psi_W"]

    def _weight(self, name: str, update: bool) -> Tensor:
        W = self.params[name]
        if not self.spectral_norm:
            return W
        W_sn, _ = spectral_normalize(W, self.sn[name], update=update)
        return W_sn

    def watch_conditions(self, rows: np.ndarray | None) -> None:
        self._watched = None if rows is None or len(rows) == 0 else np.asarray(rows, dtype=np.float64)

    def _audit(self, v: np.ndarray) -> None:
        self.calls += 1
        if self._watched is None:
            return
        eq = (v[:, None, :] == self._watched[None, :, :]).all(axis=2)
        self.forbidden_hits += int(eq.any(axis=1).sum())

    def features(self, x: Tensor, update_sn: bool = True) -> Tensor:
        x = T._as_tensor(x)
        if x.shape[1:] != self.image_shape and not (x.ndim == 2 and x.shape[1] == self.in_dim):
            raise ContractError(f"discriminator: image shape {x.shape[1:]} != {self.image_shape}")
        h = T.reshape(x, (x.shape[0], self.in_dim)) if x.ndim != 2 else x
        for i in range(self.n_trunk):
            h = T.leaky_relu(dense(h, self._weight(f"W{i}", update_sn), self.params[f"b{i}"]), self.slope)
        return h

    def forward(self, x, v, update_sn: bool = True) -> Tensor:
        """Scores, shape ``(n,)``."""
        x, v = T._as_tensor(x), T._as_tensor(v)
        if v.ndim != 2 or v.shape != (x.shape[0], self.cond_dim):
            raise ContractError(f"discriminator: condition must be ({x.shape[0]}, {self.cond_dim}), got {v.shape}")
        self._audit(v.data)
        h = self.features(x, update_sn)
        psi = T.reshape(dense(h, self._weight("psi_W", update_sn), self.params["psi_b"]), (x.shape[0],))
        proj = T.sum(T.mul(v, T.matmul(h, T.transpose(self.params["V"]))), axis=1)
        return T.add(psi, proj)

    __call__ = forward

    def unconditional(self, x, update_sn: bool = False) -> Tensor:
        """``psi(phi(x))`` alone."""
        h = self.features(x, update_sn)
        return T.reshape(dense(h, self._weight("psi_W", update_sn), self.params["psi_b"]), (h.shape[0],))

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.sn.items():
            out[f"sn.{name}.u"] = st.u.copy()
            out[f"sn.{name}.sigma"] = np.array([st.sigma])
        return out

    def load_buffers(self, arrays: dict[str, np.ndarray]) -> None:
        for name, st in self.sn.items():
            st.u = np.array(arrays[f"sn.{name}.u"], dtype=np.float64)
            st.sigma = float(arrays[f"sn.{name}.sigma"][0])


def discriminator_forward(x, v, params: Discriminator) -> Tensor:
    return params.forward(x, v)
