"""Embedding table, sign-aligned perturbation and pairwise product views."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence

import numpy as np

from . import autodiff as ad


@dataclass
class EmbeddingTable:
    """All field tables stacked in one [sum(s_i), d] matrix.

    Field ``i`` owns rows ``offsets[i] : offsets[i] + vocab_sizes[i]``; a
    local index ``x`` of field ``i`` lives at row ``offsets[i] + x``.
    """

    weight: np.ndarray
    vocab_sizes: List[int]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    @property
    def field_count(self) -> int:
        return len(self.vocab_sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.vocab_sizes)[:-1]]).astype(np.int64)

    @classmethod
    def init(cls, vocab_sizes: Sequence[int], dim: int, rng: np.random.Generator, std: float = 0.01):
        w = rng.normal(0.0, std, size=(int(np.sum(vocab_sizes)), dim))
        return cls(w, list(vocab_sizes))

    def field_matrix(self, i: int) -> np.ndarray:
        """E_i as a [d, s_i] matrix (columns are token vectors)."""
        lo = self.offsets[i]
        return self.weight[lo : lo + self.vocab_sizes[i]].T

    def global_rows(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim != 2 or indices.shape[1] != self.field_count:
            raise ad.ContractError(f"expected [B, {self.field_count}] indices, got {indices.shape}")
        if (indices < 0).any() or (indices >= np.asarray(self.vocab_sizes)).any():
            raise ad.ContractError("field index out of range")
        return indices + self.offsets[None, :]


def lookup(table: EmbeddingTable, table_var: ad.Var, indices: np.ndarray) -> ad.Var:
    """Differentiable gather of one batch: [B, f] field indices -> [B, f*d]."""
    return ad.embedding_lookup(table_var, table.global_rows(indices))


def draw_noise(shape: tuple, field_count: int, dim: int, rng: np.random.Generator, shared_across_fields: bool = False) -> np.ndarray:
    """U(0, 1) noise for a [B, f*d] embedding batch.

    With ``shared_across_fields`` one d-vector per instance is drawn and
    tiled over the fields.
    """
    if shared_across_fields:
        base = rng.random((shape[0], dim))
        return np.tile(base, (1, field_count))
    return rng.random(shape)


def perturb(e: ad.Var, noise: np.ndarray) -> ad.Var:
    """E' = E + noise * sign(E); noise is a constant, sign(0) = 0."""
    push = e.tape.constant(noise * np.sign(e.value))
    return e + push


@lru_cache(maxsize=32)
def pair_layout(field_count: int, dim: int):
    """Column indices for the ordered pairs (i, j), i <= j, in row-major order.

    Returns (left, right, pairs, plan_left, plan_right, block_sum) where
    ``left``/``right`` index columns of the flattened [B, f*d] batch and
    ``block_sum`` [P*d, P] sums each pair's d-block.
    """
    pairs = [(i, j) for i in range(field_count) for j in range(i, field_count)]
    k = np.arange(dim)
    left = np.concatenate([i * dim + k for i, _ in pairs])
    right = np.concatenate([j * dim + k for _, j in pairs])
    width = field_count * dim
    block_sum = np.kron(np.eye(len(pairs)), np.ones((dim, 1)))
    return (
        left,
        right,
        pairs,
        ad._ScatterPlan(left, width),
        ad._ScatterPlan(right, width),
        block_sum,
    )


def pair_count(field_count: int) -> int:
    return field_count * (field_count + 1) // 2


def products(e: ad.Var, field_count: int, dim: int):
    """Element-wise (S_EP, [B, P*d]) and inner (S_IP, [B, P]) pair products.

    The inner product of a pair is computed as the sum of its element-wise
    block, so the two views agree exactly.
    """
    if e.value.ndim != 2 or e.shape[1] != field_count * dim:
        raise ad.DimensionError(f"products: cannot view {e.shape} as [B, {field_count}, {dim}]")
    left, right, _, pl, pr, block_sum = pair_layout(field_count, dim)
    ep = ad.pair_products(e, left, right, pl, pr)
    ip = ep @ e.tape.constant(block_sum)
    return ep, ip
