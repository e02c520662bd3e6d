"""Parameter containers and the network blocks used by the agent policies.

Weights use orthogonal initialization with Tanh activations throughout.
Policy heads start near-deterministic (small gain); value heads use unit
gain. All parameters live in a ``ParamStore`` so optimizers and checkpoints
can treat a policy as a flat list of named tensors.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HIDDEN_GAIN = np.sqrt(2.0)
POLICY_HEAD_GAIN = 0.01
VALUE_HEAD_GAIN = 1.0


def orthogonal_init(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix scaled by ``gain``; rows (or columns) orthonormal."""
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))  # fix the sign ambiguity for determinism
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class ParamStore:
    """Named parameter tensors with gradient slots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        tensor = Tensor(np.array(array, dtype=np.float64), requires_grad=True)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, tensor in self._params.items():
            array = np.asarray(state[name], dtype=np.float64)
            if array.shape != tensor.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {array.shape} vs {tensor.data.shape}")
            tensor.data = array.copy()
            tensor.grad = np.zeros_like(tensor.data)


def global_grad_norm(store: ParamStore) -> float:
    total = 0.0
    for tensor in store.tensors():
        if tensor.grad is not None:
            total += float((tensor.grad**2).sum())
    return float(np.sqrt(total))


class Adam:
    """Adam over one ParamStore, with optional global-norm gradient clipping."""

    def __init__(
        self,
        store: ParamStore,
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        max_grad_norm: float | None = 0.5,
    ):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self._m = {name: np.zeros_like(store[name].data) for name in store.names()}
        self._v = {name: np.zeros_like(store[name].data) for name in store.names()}

    def step(self) -> None:
        if self.lr == 0.0:
            return
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = global_grad_norm(self.store)
            if norm > self.max_grad_norm and norm > 0.0:
                scale = self.max_grad_norm / norm
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for name in self.store.names():
            tensor = self.store[name]
            if tensor.grad is None:
                continue
            g = tensor.grad * scale
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * g * g
            tensor.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self._m.items()},
            "v": {k: v.copy() for k, v in self._v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self._m:
            self._m[name] = np.asarray(state["m"][name], dtype=np.float64).copy()
            self._v[name] = np.asarray(state["v"][name], dtype=np.float64).copy()


class Mlp:
    """Affine + Tanh stack with a linear head."""

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        widths: list[int],
        rng: np.random.Generator,
        head_gain: float = POLICY_HEAD_GAIN,
    ):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self._weights, self._biases = [], []
        last = len(widths) - 2
        for idx, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            gain = head_gain if idx == last else HIDDEN_GAIN
            self._weights.append(store.add(f"{prefix}.w{idx}", orthogonal_init((fan_in, fan_out), gain, rng)))
            self._biases.append(store.add(f"{prefix}.b{idx}", np.zeros((1, fan_out))))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.widths[0]:
            raise ValueError(f"expected input width {self.widths[0]}, got {x.shape[1]}")
        out = x
        last = len(self._weights) - 1
        for idx, (w, b) in enumerate(zip(self._weights, self._biases)):
            out = ad.add(ad.matmul(out, w), b)
            if idx != last:
                out = ad.tanh(out)
        return out


def mlp_forward(params: Mlp, x: Tensor) -> Tensor:
    return params(x)


class GruCell:
    """Gated recurrent cell; candidate state is Tanh-bounded."""

    def __init__(self, store: ParamStore, prefix: str, input_dim: int, hidden_dim: int, rng):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim

        def pair(name, gain=HIDDEN_GAIN):
            w = store.add(f"{prefix}.{name}_x", orthogonal_init((input_dim, hidden_dim), gain, rng))
            u = store.add(f"{prefix}.{name}_h", orthogonal_init((hidden_dim, hidden_dim), gain, rng))
            b = store.add(f"{prefix}.{name}_b", np.zeros((1, hidden_dim)))
            return w, u, b

        self._update = pair("z")
        self._reset = pair("r")
        self._cand = pair("n")

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[1] != self.input_dim or h.shape[1] != self.hidden_dim:
            raise ValueError("gru step shape mismatch")
        wz, uz, bz = self._update
        wr, ur, br = self._reset
        wn, un, bn = self._cand
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, wz), ad.matmul(h, uz)), bz))
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, wr), ad.matmul(h, ur)), br))
        n = ad.tanh(ad.add(ad.add(ad.matmul(x, wn), ad.matmul(ad.mul(r, h), un)), bn))
        one_minus_z = ad.sub(Tensor(np.ones((1, 1))), z)
        return ad.add(ad.mul(one_minus_z, h), ad.mul(z, n))


def gru_step(cell: GruCell, x: Tensor, h: Tensor) -> Tensor:
    return cell.step(x, h)


class Embedding:
    """Learned lookup table for small categorical ids."""

    def __init__(self, store: ParamStore, prefix: str, count: int, dim: int, rng):
        self.table = store.add(f"{prefix}.table", orthogonal_init((count, dim), 1.0, rng))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.gather_rows(self.table, ids)


class ScalarEncoder:
    """Embed a scalar feature through a Tanh-activated linear map."""

    def __init__(self, store: ParamStore, prefix: str, dim: int, rng, scale: float = 1.0):
        self.scale = scale
        self.w = store.add(f"{prefix}.w", orthogonal_init((1, dim), HIDDEN_GAIN, rng))
        self.b = store.add(f"{prefix}.b", np.zeros((1, dim)))

    def __call__(self, values: np.ndarray) -> Tensor:
        x = Tensor(np.asarray(values, dtype=np.float64).reshape(-1, 1) * self.scale)
        return ad.tanh(ad.add(ad.matmul(x, self.w), self.b))


def attention_scores(query: Tensor, keys: Tensor) -> Tensor:
    """Scaled dot-product scores between one query row and n key rows -> (1, n)."""
    d = keys.shape[1]
    return ad.mul(ad.matmul(query, ad.transpose(keys)), Tensor(1.0 / np.sqrt(d)))


def attention_weights(
    query: np.ndarray, keys: np.ndarray, active: np.ndarray | None = None
) -> np.ndarray:
    """Simplex attention weights over active keys (numpy, no gradients).

    Inactive keys receive exactly zero weight; active weights sum to one.
    """
    query = np.asarray(query, dtype=np.float64).reshape(1, -1)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[1] != query.shape[1]:
        raise ValueError("keys must be (n, d) matching the query width")
    active = np.ones(keys.shape[0], dtype=bool) if active is None else np.asarray(active, bool)
    if not active.any():
        raise ValueError("attention needs at least one active key")
    scores = (keys @ query.T).reshape(-1) / np.sqrt(keys.shape[1])
    return masked_softmax(scores, active)


def masked_softmax(scores: np.ndarray, active: np.ndarray) -> np.ndarray:
    shifted = np.where(active, scores - scores[active].max(), -np.inf)
    z = np.where(active, np.exp(shifted), 0.0)
    return z / z.sum()
