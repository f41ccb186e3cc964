"""Cross-correlated attention, its symmetric self-attention form and the non-local baseline.

All three work on positional matrices: an M x N x C feature map flattened to
(M*N) x C, one row per spatial site in row-major order. Learned maps are stored
as K x C (C x K for the output map) and applied as ``q @ W.T``.
"""
import enum
import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .error_handler import ConfigurationError, DimensionError
from .tensor_core import (Tensor, add, concat, matmul, matmul_relu, relu, reshape, scale,
                          transpose2d)

logger = logging.getLogger(__name__)

WEIGHT_NAMES = ('W_f', 'W_g', 'W_h', 'W_w', 'W_alpha')


class AttentionKind(enum.Enum):
    CROSS_CORRELATED = 'cross_correlated'
    SYMMETRIC_SELF = 'symmetric_self'
    NON_LOCAL = 'non_local'


@dataclass
class AttentionWeights:
    """Weights of one attention unit, bound to an M x N x C input"""
    W_f: Tensor
    W_g: Tensor
    W_h: Tensor
    W_w: Tensor
    W_alpha: Tensor
    bound_M: int
    bound_N: int
    bound_C: int
    bound_K: int

    @property
    def sites(self) -> int:
        return self.bound_M * self.bound_N

    def tensors(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in WEIGHT_NAMES}

    def check_input(self, q: Tensor, label: str = 'q') -> None:
        expected = (self.sites, self.bound_C)
        if q.shape != expected:
            raise DimensionError(
                f"attention input {label} has shape {q.shape}, unit is bound to {expected} "
                f"(M={self.bound_M}, N={self.bound_N}, C={self.bound_C})")

    @classmethod
    def from_tensors(cls, tensors: Dict[str, Tensor], M: int, N: int) -> 'AttentionWeights':
        K, C = tensors['W_f'].shape
        weights = cls(**{name: tensors[name] for name in WEIGHT_NAMES},
                      bound_M=M, bound_N=N, bound_C=C, bound_K=K)
        weights.validate()
        return weights

    def validate(self) -> None:
        K, C, MN = self.bound_K, self.bound_C, self.sites
        expected = {'W_f': (K, C), 'W_g': (K, C), 'W_h': (K, C), 'W_w': (C, K), 'W_alpha': (2 * MN, MN)}
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise DimensionError(f"{name} has shape {actual}, expected {shape}")


def default_k(channels: int) -> int:
    if channels % 8:
        raise ConfigurationError(f"K = C/8 needs C divisible by 8, got C={channels}")
    return channels // 8


def init_attention_weights(M: int, N: int, C: int, K: Optional[int] = None,
                           rng: Optional[np.random.Generator] = None,
                           requires_grad: bool = True) -> AttentionWeights:
    """Uniform init in +/- sqrt(1/fan_in) per matrix"""
    rng = rng if rng is not None else np.random.default_rng(0)
    K = K or default_k(C)
    MN = M * N
    shapes = {'W_f': (K, C), 'W_g': (K, C), 'W_h': (K, C), 'W_w': (C, K), 'W_alpha': (2 * MN, MN)}
    fan_in = {'W_f': C, 'W_g': C, 'W_h': C, 'W_w': K, 'W_alpha': 2 * MN}
    tensors = {}
    for name in WEIGHT_NAMES:
        bound = np.sqrt(1.0 / fan_in[name])
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=shapes[name]), requires_grad=requires_grad, name=name)
    return AttentionWeights.from_tensors(tensors, M, N)


def zero_attention_weights(M: int, N: int, C: int, K: Optional[int] = None) -> AttentionWeights:
    K = K or default_k(C)
    MN = M * N
    return AttentionWeights(
        W_f=Tensor(np.zeros((K, C))), W_g=Tensor(np.zeros((K, C))), W_h=Tensor(np.zeros((K, C))),
        W_w=Tensor(np.zeros((C, K))), W_alpha=Tensor(np.zeros((2 * MN, MN))),
        bound_M=M, bound_N=N, bound_C=C, bound_K=K)


def to_positional(Q: Tensor) -> Tensor:
    """M x N x C → (M*N) x C, row i = Q[m, n] with i = m*N + n"""
    if Q.ndim != 3:
        raise DimensionError(f"to_positional expects an M x N x C map, got shape {Q.shape}")
    M, N, C = Q.shape
    return reshape(Q, (M * N, C))


def from_positional(q: Tensor, M: int, N: int) -> Tensor:
    return reshape(q, (M, N, q.shape[1]))


def attention_map(q: Tensor, q_prime: Tensor, w: AttentionWeights) -> Tensor:
    """A = relu([A', A'^T] W_alpha) with A' = g(q) f(q')^T"""
    w.check_input(q, 'q')
    w.check_input(q_prime, "q'")
    g = matmul_relu(q, transpose2d(w.W_g))
    f = matmul_relu(q_prime, transpose2d(w.W_f))
    correlation = matmul(g, transpose2d(f))
    stacked = concat([correlation, transpose2d(correlation)], axis=1)
    return matmul_relu(stacked, w.W_alpha)


def _reweight(A: Tensor, q: Tensor, w: AttentionWeights) -> Tensor:
    # the outer relu is kept as written even though h is already nonnegative
    h = relu(matmul_relu(q, transpose2d(w.W_h)))
    y = scale(matmul(A, h), 1.0 / w.sites)
    return add(matmul_relu(y, transpose2d(w.W_w)), q)


def cca_forward(q: Tensor, q_prime: Tensor, w: AttentionWeights) -> Tensor:
    """Cross-correlated attention of q against q'; residual output has q's shape"""
    A = attention_map(q, q_prime, w)
    return _reweight(A, q, w)


def ssa_forward(q: Tensor, w: AttentionWeights) -> Tensor:
    return cca_forward(q, q, w)


def nonlocal_forward(q: Tensor, w: AttentionWeights) -> Tensor:
    """Non-local self-attention: the correlation map used directly, W_alpha unused"""
    w.check_input(q, 'q')
    g = matmul_relu(q, transpose2d(w.W_g))
    f = matmul_relu(q, transpose2d(w.W_f))
    A = matmul(g, transpose2d(f))
    return _reweight(A, q, w)


def attend(kind: AttentionKind, q: Tensor, w: AttentionWeights, q_prime: Optional[Tensor] = None) -> Tensor:
    if kind is AttentionKind.CROSS_CORRELATED:
        if q_prime is None:
            raise ConfigurationError("cross-correlated attention needs a second feature map")
        return cca_forward(q, q_prime, w)
    if q_prime is not None:
        raise ConfigurationError(f"{kind.value} attention takes exactly one feature map")
    if kind is AttentionKind.SYMMETRIC_SELF:
        return ssa_forward(q, w)
    return nonlocal_forward(q, w)
