"""Dynamic-rank LoRA adapters.

An adapter keeps ``r_max`` rank-1 directions ``(a_i, b_i, w_i)`` next to a
frozen base matrix ``W0`` of shape ``d_out x d_in``.  The update is

    delta_W = (alpha / r_max) * sum_{i active} w_i * outer(b_i, a_i)

``w_i`` is a learnable importance weight.  An l1 penalty on ``w`` is applied
proximally (``soft_shrink_weights``), which produces exact zeros, and
``prune`` retires directions whose ``|w_i|`` fell below a threshold.  The
scale uses ``r_max`` rather than the active count so pruning never rescales
the survivors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, matmul, mul, tile, transpose, add, default_dtype


class AdapterConfigError(ValueError):
    pass


@dataclass
class PruneReport:
    layer: str
    pruned: list[int]
    surviving: int
    max_pruned_abs_w: float
    # upper bound on the operator-norm change of delta_W caused by this prune
    bound: float

    @property
    def n_pruned(self) -> int:
        return len(self.pruned)


class DynLoraAdapter:
    """Rank-1 directions with importance weights over a frozen base matrix."""

    def __init__(self, base: Tensor, a: Tensor, b: Tensor, w: Tensor,
                 active: np.ndarray, alpha: float, name: str = ""):
        r = a.shape[0]
        if b.shape[0] != r or w.shape != (r,) or active.shape != (r,):
            raise AdapterConfigError("a, b, w and active must all have r_max rows")
        if a.shape[1] != base.shape[1] or b.shape[1] != base.shape[0]:
            raise DimensionError(f"adapter factors {a.shape}/{b.shape} do not fit base {base.shape}")
        self.base = base
        self.a = a
        self.b = b
        self.w = w
        self.active = active.astype(bool)
        self.alpha = float(alpha)
        self.name = name

    @property
    def r_max(self) -> int:
        return self.a.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.r_max

    @property
    def d_in(self) -> int:
        return self.base.shape[1]

    @property
    def d_out(self) -> int:
        return self.base.shape[0]

    @property
    def directions(self) -> list[tuple[np.ndarray, np.ndarray, float]]:
        return [(self.a.data[i], self.b.data[i], float(self.w.data[i])) for i in range(self.r_max)]

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.a, self.b, self.w) if p.requires_grad]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def gate(self) -> np.ndarray:
        return self.active.astype(self.w.data.dtype) * self.w.data.dtype.type(self.scale)

    def forward(self, x: Tensor) -> Tensor:
        return forward_adapted(self, x)

    def state(self) -> dict[str, np.ndarray]:
        return {"a": self.a.data, "b": self.b.data, "w": self.w.data,
                "active": self.active.astype(np.uint8)}


def init_adapter(base: Tensor, r_max: int = 8, alpha: float = 16.0, seed: int = 0,
                 name: str = "", train_importance: bool = True) -> DynLoraAdapter:
    """Fresh adapter with a_i ~ N(0, 1/d_in), b_i = 0, w_i = 1, so delta_W starts at zero."""
    if base.ndim != 2:
        raise AdapterConfigError(f"base must be 2-D, got shape {base.shape}")
    if r_max < 1:
        raise AdapterConfigError(f"r_max must be >= 1, got {r_max}")
    d_out, d_in = base.shape
    rng = np.random.default_rng(seed)
    dt = default_dtype()
    a = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(r_max, d_in)).astype(dt), requires_grad=True)
    b = Tensor(np.zeros((r_max, d_out), dtype=dt), requires_grad=True)
    w = Tensor(np.ones(r_max, dtype=dt), requires_grad=train_importance)
    base.requires_grad = False
    return DynLoraAdapter(base, a, b, w, np.ones(r_max, dtype=bool), alpha, name)


def delta_w(adapter: DynLoraAdapter) -> np.ndarray:
    coef = adapter.w.data * adapter.gate()
    return (adapter.b.data.T * coef) @ adapter.a.data


def forward_adapted(adapter: DynLoraAdapter, x: Tensor) -> Tensor:
    """x @ W0^T + scale * sum_i w_i (x . a_i) b_i^T, without materialising delta_W."""
    if x.ndim != 2 or x.shape[1] != adapter.d_in:
        raise DimensionError(f"input {x.shape} does not match adapter d_in={adapter.d_in}")
    base_out = matmul(x, transpose(adapter.base))
    proj = matmul(x, transpose(adapter.a))
    gated = mul(adapter.w, Tensor(adapter.gate()))
    low = matmul(mul(proj, tile(gated, x.shape[0])), adapter.b)
    return add(base_out, low)


def soft_shrink_weights(adapter: DynLoraAdapter, tau) -> int:
    """Proximal l1 step w <- sign(w) * max(|w| - tau, 0) on active weights.

    ``tau`` is a scalar or one threshold per direction.  Returns how many
    active weights this call turned into exact zeros.
    """
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0):
        raise AdapterConfigError(f"shrinkage threshold must be >= 0, got {tau}")
    w = adapter.w.data
    act = adapter.active
    before = act & (w == 0)
    shrunk = np.sign(w) * np.maximum(np.abs(w) - tau, 0)
    w[act] = shrunk.astype(w.dtype)[act]
    return int(np.count_nonzero(act & (w == 0)) - np.count_nonzero(before))


def prune(adapter: DynLoraAdapter, epsilon: float) -> PruneReport:
    """Deactivate active directions with |w_i| <= epsilon and zero their weights."""
    if epsilon < 0:
        raise AdapterConfigError(f"prune threshold must be >= 0, got {epsilon}")
    w = adapter.w.data
    hit = adapter.active & (np.abs(w) <= epsilon)
    idx = np.flatnonzero(hit)
    bound = 0.0
    max_w = 0.0
    if idx.size:
        a64 = adapter.a.data[idx].astype(np.float64)
        b64 = adapter.b.data[idx].astype(np.float64)
        aw = np.abs(w[idx].astype(np.float64))
        bound = adapter.scale * float(np.sum(aw * np.linalg.norm(a64, axis=1) * np.linalg.norm(b64, axis=1)))
        max_w = float(aw.max())
    adapter.active[idx] = False
    w[idx] = 0
    return PruneReport(adapter.name, idx.tolist(), int(adapter.active.sum()), max_w, bound)


def active_rank(adapter: DynLoraAdapter) -> int:
    return int(adapter.active.sum())


def merge(adapter: DynLoraAdapter) -> np.ndarray:
    """W0 + delta_W; the caller installs it as the layer's new base."""
    return adapter.base.data + delta_w(adapter).astype(adapter.base.data.dtype)
