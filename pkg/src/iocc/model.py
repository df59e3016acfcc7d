"""Trainable heads over frozen embeddings: classifier and projector MLPs.

Both heads are two affine layers with a ReLU between, float64 throughout.
The classifier ends in a row softmax (outputs on the simplex); the projector
output is left unnormalized (cosines are taken inside the losses). Forward
passes return caches; :func:`backward` turns output gradients into parameter
gradients by reverse accumulation, summing over any number of forward passes
(the several augmented views of one iteration).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

PARAM_FIELDS = ("cw1", "cb1", "cw2", "cb2", "pw1", "pb1", "pw2", "pb2")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"IOCCCK01"


@dataclass
class ModelParams:
    """Weights of both heads. Also used as the container for gradients and
    Adam moment accumulators (identical shapes)."""

    cw1: np.ndarray  # (d, h_c)
    cb1: np.ndarray  # (h_c,)
    cw2: np.ndarray  # (h_c, K)
    cb2: np.ndarray  # (K,)
    pw1: np.ndarray  # (d, h_p)
    pb1: np.ndarray  # (h_p,)
    pw2: np.ndarray  # (h_p, D)
    pb2: np.ndarray  # (D,)

    @property
    def d(self) -> int:
        return self.cw1.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.cw2.shape[1]

    @property
    def proj_dim(self) -> int:
        return self.pw2.shape[1]

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{f.name: np.zeros_like(getattr(self, f.name)) for f in fields(self)})

    def copy(self) -> "ModelParams":
        return ModelParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})


ParamGrads = ModelParams


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(
    d: int, n_clusters: int, h_c: int = 128, h_p: int = 128, proj_dim: int = 128, seed: int = 0
) -> ModelParams:
    """Uniform Glorot weights, zero biases."""
    rng = np.random.default_rng(seed)
    return ModelParams(
        cw1=_glorot(rng, d, h_c),
        cb1=np.zeros(h_c),
        cw2=_glorot(rng, h_c, n_clusters),
        cb2=np.zeros(n_clusters),
        pw1=_glorot(rng, d, h_p),
        pb1=np.zeros(h_p),
        pw2=_glorot(rng, h_p, proj_dim),
        pb2=np.zeros(proj_dim),
    )


def init_adam(params: ModelParams) -> AdamState:
    return AdamState(m=params.zeros_like(), v=params.zeros_like())


@dataclass
class ForwardCache:
    """Activations retained for the backward pass of one head on one input."""

    x: np.ndarray
    a1: np.ndarray
    r1: np.ndarray
    p: np.ndarray | None  # softmax output; None for the projector
    activation: str


def _hidden(x: np.ndarray, w1, b1, activation: str):
    a1 = x @ w1 + b1
    if activation == "relu":
        r1 = np.maximum(a1, 0.0)
    elif activation == "identity":
        r1 = a1
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return a1, r1


def classifier_forward(
    params: ModelParams, x: np.ndarray, activation: str = "relu"
) -> tuple[np.ndarray, ForwardCache]:
    """Row-stochastic cluster probabilities: softmax(affine(relu(affine(x))))."""
    if x.ndim != 2 or x.shape[1] != params.d:
        raise ValueError(f"input has shape {x.shape}, expected (*, {params.d})")
    a1, r1 = _hidden(x, params.cw1, params.cb1, activation)
    a2 = r1 @ params.cw2 + params.cb2
    a2 = a2 - a2.max(axis=1, keepdims=True)
    e = np.exp(a2)
    p = e / e.sum(axis=1, keepdims=True)
    return p, ForwardCache(x=x, a1=a1, r1=r1, p=p, activation=activation)


def projector_forward(
    params: ModelParams, x: np.ndarray, activation: str = "relu"
) -> tuple[np.ndarray, ForwardCache]:
    """Projected representations: affine(relu(affine(x))), no normalization."""
    if x.ndim != 2 or x.shape[1] != params.d:
        raise ValueError(f"input has shape {x.shape}, expected (*, {params.d})")
    a1, r1 = _hidden(x, params.pw1, params.pb1, activation)
    z = r1 @ params.pw2 + params.pb2
    return z, ForwardCache(x=x, a1=a1, r1=r1, p=None, activation=activation)


def backward(
    params: ModelParams,
    classifier_passes: list[tuple[ForwardCache, np.ndarray]] = (),
    projector_passes: list[tuple[ForwardCache, np.ndarray]] = (),
) -> ParamGrads:
    """Accumulate parameter gradients over any number of forward passes.

    ``classifier_passes`` pairs each cache with the loss gradient w.r.t. the
    softmax output P; ``projector_passes`` with the gradient w.r.t. Z.
    """
    g = params.zeros_like()
    for cache, dp in classifier_passes:
        if dp.shape != cache.p.shape:
            raise ValueError(f"dP shape {dp.shape} != P shape {cache.p.shape}")
        # softmax backward: dA2_j = P_j * (dP_j - sum_k dP_k P_k)
        da2 = cache.p * (dp - (dp * cache.p).sum(axis=1, keepdims=True))
        g.cw2 += cache.r1.T @ da2
        g.cb2 += da2.sum(axis=0)
        dr1 = da2 @ params.cw2.T
        da1 = dr1 * (cache.a1 > 0) if cache.activation == "relu" else dr1
        g.cw1 += cache.x.T @ da1
        g.cb1 += da1.sum(axis=0)
    for cache, dz in projector_passes:
        if dz.shape != (cache.x.shape[0], params.proj_dim):
            raise ValueError(f"dZ shape {dz.shape} incompatible with cache")
        g.pw2 += cache.r1.T @ dz
        g.pb2 += dz.sum(axis=0)
        dr1 = dz @ params.pw2.T
        da1 = dr1 * (cache.a1 > 0) if cache.activation == "relu" else dr1
        g.pw1 += cache.x.T @ da1
        g.pb1 += da1.sum(axis=0)
    return g


def adam_step(
    params: ModelParams, grads: ParamGrads, state: AdamState, lr: float
) -> tuple[ModelParams, AdamState]:
    """In-place Adam update with bias correction; increments the step counter."""
    state.t += 1
    b1c = 1.0 - state.beta1**state.t
    b2c = 1.0 - state.beta2**state.t
    for name in PARAM_FIELDS:
        g = getattr(grads, name)
        m = getattr(state.m, name)
        v = getattr(state.v, name)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        w = getattr(params, name)
        w -= lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
    return params, state


# --- checkpoint I/O ----------------------------------------------------------


def save_checkpoint(path, params: ModelParams, adam: AdamState, bank=None) -> None:
    """Binary checkpoint: magic, shape header, then raw little-endian float64
    sections (weights, Adam moments, optional center bank)."""
    import struct

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        h_c = params.cw1.shape[1]
        h_p = params.pw1.shape[1]
        has_bank = 1 if bank is not None else 0
        fh.write(
            struct.pack(
                "<QQQQQQQ",
                params.d,
                h_c,
                params.n_clusters,
                h_p,
                params.proj_dim,
                adam.t,
                has_bank,
            )
        )
        fh.write(struct.pack("<ddd", adam.beta1, adam.beta2, adam.eps))
        for holder in (params, adam.m, adam.v):
            for name in PARAM_FIELDS:
                fh.write(np.ascontiguousarray(getattr(holder, name), dtype="<f8").tobytes())
        if bank is not None:
            fh.write(np.ascontiguousarray(bank.C, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(bank.valid, dtype="<u1").tobytes())
            fh.write(np.ascontiguousarray(bank.count_last, dtype="<u8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (params, adam, bank|None)."""
    import struct

    from .centers import CenterBank

    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an IOCCCK01 checkpoint")
    off = 8
    d, h_c, K, h_p, D, t, has_bank = struct.unpack_from("<QQQQQQQ", buf, off)
    off += 56
    beta1, beta2, eps = struct.unpack_from("<ddd", buf, off)
    off += 24

    shapes = {
        "cw1": (d, h_c),
        "cb1": (h_c,),
        "cw2": (h_c, K),
        "cb2": (K,),
        "pw1": (d, h_p),
        "pb1": (h_p,),
        "pw2": (h_p, D),
        "pb2": (D,),
    }

    def read_params():
        nonlocal off
        arrays = {}
        for name, shape in shapes.items():
            count = int(np.prod(shape))
            arrays[name] = (
                np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            )
            off += 8 * count
        return ModelParams(**arrays)

    params = read_params()
    m = read_params()
    v = read_params()
    adam = AdamState(m=m, v=v, t=int(t), beta1=beta1, beta2=beta2, eps=eps)
    bank = None
    if has_bank:
        C = np.frombuffer(buf, dtype="<f8", count=K * D, offset=off).reshape(K, D).copy()
        off += 8 * K * D
        valid = np.frombuffer(buf, dtype="<u1", count=K, offset=off).astype(bool)
        off += K
        count_last = np.frombuffer(buf, dtype="<u8", count=K, offset=off).astype(np.int64)
        bank = CenterBank(C=C, valid=valid, count_last=count_last)
    return params, adam, bank
