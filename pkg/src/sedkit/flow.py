"""Invertible affine coupling flow for post-hoc embedding calibration.

Each layer passes half the coordinates through unchanged and applies an
elementwise affine map y = x * exp(s) + t to the other half, where s and
t come from a small subnetwork of the pass-through half. Masks alternate
between layers so every coordinate is transformed. The scale and
translate heads are zero-initialized, so a fresh flow is exactly the
identity with zero log-determinant.

Fitting maximizes the likelihood of the embeddings under a standard
Gaussian in latent space; the encoder that produced the embeddings is
never touched.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import DataError, ShapeMismatchError

LOG_2PI = float(np.log(2.0 * np.pi))


class CouplingFlow:
    """Stack of affine coupling layers over a fixed embedding dimension."""

    def __init__(self, dim: int, n_layers: int = 4, hidden: int | None = None,
                 seed: int = 0):
        if n_layers < 2:
            raise DataError("need >= 2 coupling layers so every dim transforms")
        self.dim = dim
        self.n_layers = n_layers
        self.hidden = 2 * dim if hidden is None else hidden
        self.masks: list[np.ndarray] = []
        half = dim // 2
        for layer in range(n_layers):
            mask = np.zeros(dim)
            if layer % 2 == 0:
                mask[:half] = 1.0  # first half passes through
            else:
                mask[half:] = 1.0
            self.masks.append(mask)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for layer in range(n_layers):
            pre = f"f{layer}."
            self.params[pre + "w1"] = Tensor(
                rng.normal(0.0, 0.1, size=(dim, self.hidden)), requires_grad=True)
            self.params[pre + "b1"] = Tensor(np.zeros(self.hidden),
                                             requires_grad=True)
            # zero heads make the fresh flow the exact identity
            self.params[pre + "ws"] = Tensor(np.zeros((self.hidden, dim)),
                                             requires_grad=True)
            self.params[pre + "bs"] = Tensor(np.zeros(dim), requires_grad=True)
            self.params[pre + "wt"] = Tensor(np.zeros((self.hidden, dim)),
                                             requires_grad=True)
            self.params[pre + "bt"] = Tensor(np.zeros(dim), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_names(self) -> list[str]:
        return list(self.params.keys())

    def _subnet(self, masked_x: Tensor, layer: int) -> tuple[Tensor, Tensor]:
        p, pre = self.params, f"f{layer}."
        h = (masked_x @ p[pre + "w1"] + p[pre + "b1"]).tanh()
        return h @ p[pre + "ws"] + p[pre + "bs"], h @ p[pre + "wt"] + p[pre + "bt"]

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Latents z (B, dim) and per-example log |det J| (B,)."""
        log_det = None
        for layer in range(self.n_layers):
            keep = Tensor(self.masks[layer])
            change = Tensor(1.0 - self.masks[layer])
            s, t = self._subnet(x * keep, layer)
            x = x * keep + (x * s.exp() + t) * change
            contrib = (s * change).sum(axis=1)
            log_det = contrib if log_det is None else log_det + contrib
        return x, log_det

    def inverse(self, z: np.ndarray) -> np.ndarray:
        """Exact algebraic inverse of `forward`; plain arrays, no graph."""
        z = np.asarray(z, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise DataError("non-finite input to flow inverse")
        squeeze = z.ndim == 1
        x = np.atleast_2d(z)
        if x.shape[1] != self.dim:
            raise ShapeMismatchError(f"expected dimension {self.dim}")
        with dc.no_grad():
            for layer in reversed(range(self.n_layers)):
                keep = self.masks[layer]
                change = 1.0 - keep
                s, t = self._subnet(Tensor(x * keep), layer)
                x = x * keep + (x - t.data) * np.exp(-s.data) * change
        return x[0] if squeeze else x


def flow_forward(flow: CouplingFlow, x) -> tuple[np.ndarray, np.ndarray]:
    """Latents and log |det J| for plain arrays; (dim,) or (B, dim)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite input to flow forward")
    squeeze = x.ndim == 1
    batch = np.atleast_2d(x)
    if batch.shape[1] != flow.dim:
        raise ShapeMismatchError(f"expected dimension {flow.dim}")
    with dc.no_grad():
        z, log_det = flow.forward(Tensor(batch))
    if squeeze:
        return z.data[0], float(log_det.data[0])
    return z.data, log_det.data


def flow_inverse(flow: CouplingFlow, z) -> np.ndarray:
    return flow.inverse(z)


def flow_nll(flow: CouplingFlow, embeddings) -> Tensor:
    """Mean negative log likelihood under a standard Gaussian latent.

    Differentiable in the flow parameters; `embeddings` is (B, dim) data.
    """
    batch = np.asarray(
        embeddings.data if isinstance(embeddings, Tensor) else embeddings,
        dtype=np.float64,
    )
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise DataError("flow_nll needs a non-empty (B, dim) batch")
    if not np.all(np.isfinite(batch)):
        raise DataError("non-finite input to flow_nll")
    z, log_det = flow.forward(Tensor(batch))
    quad = z.square().sum(axis=1) * 0.5
    const = 0.5 * flow.dim * LOG_2PI
    return (quad + const - log_det).mean()


@dataclass(frozen=True)
class FlowFitConfig:
    lr: float = 1e-3
    epochs: int = 1
    batch: int = 32
    seed: int = 0


def fit_flow(flow: CouplingFlow, embeddings, config: FlowFitConfig) -> CouplingFlow:
    """Maximum-likelihood fit by Adam; the flow is trained in place.

    Keeps the per-epoch snapshot with the lowest full-data NLL (the
    initial state included), so the returned flow's training NLL never
    exceeds the starting value. Zero epochs return the flow unchanged.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != flow.dim:
        raise ShapeMismatchError(f"expected embeddings (N, {flow.dim})")
    if X.shape[0] < 2 * config.batch:
        raise DataError(
            f"need >= {2 * config.batch} embeddings, got {X.shape[0]}"
        )
    if np.allclose(X, X[0]):
        warnings.warn("all embeddings identical; flow fit is degenerate")

    def full_nll() -> float:
        with dc.no_grad():
            return flow_nll_value(flow, X)

    best_nll = full_nll()
    best_state = [p.data.copy() for p in flow.parameters()]
    if config.epochs == 0:
        return flow
    rng = np.random.default_rng(config.seed)
    opt = dc.Adam(flow.parameters())
    for _ in range(config.epochs):
        order = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], config.batch):
            idx = order[start : start + config.batch]
            loss = flow_nll(flow, X[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(config.lr)
        nll = full_nll()
        if nll < best_nll:
            best_nll = nll
            best_state = [p.data.copy() for p in flow.parameters()]
    for p, data in zip(flow.parameters(), best_state):
        p.data = data
    return flow


def flow_nll_value(flow: CouplingFlow, embeddings) -> float:
    with dc.no_grad():
        return flow_nll(flow, embeddings).item()


def flow_score(flow: CouplingFlow, e1, e2, metric: str = "cosine") -> float:
    """Similarity of two embeddings in the calibrated latent space.

    `metric` is "cosine" (default, in [-1, 1]) or "neg_euclidean".
    """
    z1, _ = flow_forward(flow, e1)
    z2, _ = flow_forward(flow, e2)
    if metric == "neg_euclidean":
        return -float(np.linalg.norm(z1 - z2))
    if metric != "cosine":
        raise DataError(f"unknown flow score metric: {metric!r}")
    n1, n2 = np.linalg.norm(z1), np.linalg.norm(z2)
    if n1 == 0.0 or n2 == 0.0:
        warnings.warn("zero-norm latent in flow_score; returning 0")
        return 0.0
    return float(np.dot(z1, z2) / (n1 * n2))
