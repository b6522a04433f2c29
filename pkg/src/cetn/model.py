"""CETN and simMHN forward graphs, parameter initialisation and checkpoints.

Three semantic spaces are modelled, each by a Key-Value Block (a value MLP
and a scalar key MLP):

* ``main`` sees the flattened embeddings E,
* ``ep`` sees the element-wise pair products of the perturbed embeddings,
* ``ip`` sees the inner pair products of the perturbed embeddings.

The auxiliary value outputs receive the main value vector through a
through connection, and the fused logit is ``sum_i K_i (W.V_i + b)``.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .embedding import EmbeddingTable, draw_noise, lookup, pair_count, perturb, products

log = logging.getLogger(__name__)

SPACES = ("main", "ep", "ip")
ABLATIONS = ("A", "CL", "COS", "K", "P", "T")
ACTIVATIONS = ("leaky_relu", "relu", "tanh", "sigmoid", "none")

CETN_ACTIVATIONS = ("leaky_relu", "relu", "tanh")
SIMMHN_ACTIVATIONS = ("leaky_relu", "leaky_relu", "leaky_relu")


class NumericError(ArithmeticError):
    """A forward activation became NaN or infinite."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: Tuple[int, ...]
    output_dim: int
    hidden_activation: str = "leaky_relu"
    output_activation: str = "none"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"MLP dims must be >= 1: {dims}")
        for act in (self.hidden_activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def layer_dims(self) -> List[Tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)


@dataclass(frozen=True)
class KeyValueBlock:
    space: str
    mlp_k: MlpSpec
    mlp_v: MlpSpec


@dataclass(frozen=True)
class ModelVariant:
    kind: str = "cetn"  # or "simmhn"
    ablations: FrozenSet[str] = frozenset()

    def __post_init__(self):
        if self.kind not in ("cetn", "simmhn"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablations {sorted(bad)}")
        if self.ablations and self.kind != "cetn":
            raise ValueError("ablations only apply to CETN")
        object.__setattr__(self, "ablations", frozenset(self.ablations))

    @property
    def label(self) -> str:
        if self.kind == "simmhn":
            return "simMHN"
        return "CETN" + "".join(f"(-{a})" for a in ABLATIONS if a in self.ablations)


@dataclass
class ModelConfig:
    kind: str = "cetn"
    ablations: Tuple[str, ...] = ()
    embedding_dim: int = 20
    value_dim: int = 64
    hidden_dims: Tuple[int, ...] = (400, 400, 400)
    # value-MLP hidden activations for (main, ep, ip); None picks the variant default
    activations: Optional[Tuple[str, str, str]] = None
    key_activation: str = "leaky_relu"
    perturb: bool = True
    # deterministic stand-in for the noise when rng is None: "off" or "mean" (E + 0.5 sign(E))
    eval_perturbation: str = "mean"
    noise_shared_across_fields: bool = False
    shared_fusion: bool = True
    embedding_std: float = 0.01

    @property
    def variant(self) -> ModelVariant:
        return ModelVariant(self.kind, frozenset(self.ablations))


@dataclass
class SpaceOutput:
    K: Optional[ad.Var]  # [B, 1]; None when keys are ablated
    V: ad.Var  # [B, d_v] after the through connection
    raw: ad.Var  # [B, d_v] value-MLP output before the through connection


def through_connect(deep: ad.Var, shallow: ad.Var) -> ad.Var:
    """Element-wise ``deep + shallow``; shapes must match exactly."""
    if deep.shape != shallow.shape:
        raise ad.DimensionError(f"through_connect: shapes {deep.shape} and {shallow.shape} differ")
    return ad.add(deep, shallow)


def mlp_forward(x: ad.Var, spec: MlpSpec, params: Dict[str, ad.Var], prefix: str) -> ad.Var:
    h = x
    n = len(spec.layer_dims)
    for layer in range(n):
        act = spec.hidden_activation if layer < n - 1 else spec.output_activation
        h = ad.dense(h, params[f"{prefix}.W{layer}"], params[f"{prefix}.b{layer}"], act)
        if not np.isfinite(h.value).all():
            raise NumericError(f"non-finite activation in {prefix} layer {layer}")
    return h


class CETN:
    """Parameter container plus the forward graph of CETN or simMHN."""

    def __init__(self, config: ModelConfig, vocab_sizes: Sequence[int]):
        self.config = config
        self.variant = config.variant
        self.vocab_sizes = [int(s) for s in vocab_sizes]
        self.field_count = len(self.vocab_sizes)
        self.params: Dict[str, np.ndarray] = {}
        self.blocks = self._blocks()

    # -- structure ---------------------------------------------------------

    @property
    def is_simmhn(self) -> bool:
        return self.variant.kind == "simmhn"

    @property
    def value_dim(self) -> int:
        return 1 if self.is_simmhn else self.config.value_dim

    @property
    def value_activations(self) -> Tuple[str, str, str]:
        if "A" in self.variant.ablations:
            return ("relu", "relu", "relu")
        if self.config.activations is not None:
            return tuple(self.config.activations)
        return SIMMHN_ACTIVATIONS if self.is_simmhn else CETN_ACTIVATIONS

    def space_widths(self) -> Tuple[int, int, int]:
        f, d = self.field_count, self.config.embedding_dim
        if "P" in self.variant.ablations:
            return (f * d, f * d, f * d)
        p = pair_count(f)
        return (f * d, p * d, p)

    def _blocks(self) -> List[KeyValueBlock]:
        hidden = tuple(int(h) for h in self.config.hidden_dims)
        blocks = []
        for space, width, act in zip(SPACES, self.space_widths(), self.value_activations):
            k = MlpSpec(width, hidden, 1, self.config.key_activation, "leaky_relu")
            v = MlpSpec(width, hidden, self.value_dim, act, "none")
            blocks.append(KeyValueBlock(space, k, v))
        return blocks

    def fusion_names(self) -> List[str]:
        if self.is_simmhn:
            return []
        if self.config.shared_fusion:
            return ["fusion.W", "fusion.b"]
        return [f"fusion.{s}.{p}" for s in SPACES for p in ("W", "b")]

    # -- parameters --------------------------------------------------------

    def init_params(self, seed: int) -> Dict[str, np.ndarray]:
        """Glorot-uniform weights, zero biases, N(0, std^2) embeddings."""
        rng = np.random.default_rng(seed)
        params = {"embedding": EmbeddingTable.init(self.vocab_sizes, self.config.embedding_dim, rng, self.config.embedding_std).weight}
        for block in self.blocks:
            for tag, spec in (("k", block.mlp_k), ("v", block.mlp_v)):
                for layer, (i, o) in enumerate(spec.layer_dims):
                    bound = np.sqrt(6.0 / (i + o))
                    params[f"{block.space}.{tag}.W{layer}"] = rng.uniform(-bound, bound, size=(i, o))
                    params[f"{block.space}.{tag}.b{layer}"] = np.zeros(o)
        for name in self.fusion_names():
            if name.endswith("W"):
                bound = np.sqrt(6.0 / (self.value_dim + 1))
                params[name] = rng.uniform(-bound, bound, size=(self.value_dim, 1))
            else:
                params[name] = np.zeros(1)
        self.params = params
        return params

    def dense_param_count(self) -> int:
        """Closed-form count of all non-embedding parameters."""
        mlps = sum(b.mlp_k.param_count + b.mlp_v.param_count for b in self.blocks)
        if self.is_simmhn:
            return mlps
        heads = 1 if self.config.shared_fusion else len(SPACES)
        return mlps + heads * (self.value_dim + 1)

    @property
    def table(self) -> EmbeddingTable:
        return EmbeddingTable(self.params["embedding"], self.vocab_sizes)

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        tape: ad.Tape,
        indices: np.ndarray,
        rng: Optional[np.random.Generator] = None,
        params: Optional[Dict[str, ad.Var]] = None,
    ):
        """Build the graph for one batch.

        ``rng`` drives the perturbation noise; pass ``None`` for the
        deterministic (evaluation) graph, where ``config.eval_perturbation``
        decides between no shift and the noise mean. Returns ``(logit [B], spaces, params)``
        where ``params`` maps names to the leaf Vars on ``tape``.
        """
        if params is None:
            params = {k: tape.var(v, name=k) for k, v in self.params.items()}
        e = lookup(self.table, params["embedding"], indices)
        if self.is_simmhn:
            logit, spaces = self._forward_simmhn(e, params)
        else:
            logit, spaces = self._forward_cetn(e, params, rng)
        return logit, spaces, params

    def space_inputs(self, e: ad.Var, rng: Optional[np.random.Generator]) -> List[ad.Var]:
        f, d = self.field_count, self.config.embedding_dim
        if "P" in self.variant.ablations:
            return [e, e, e]
        aux = e
        if self.config.perturb and not self.is_simmhn:
            if rng is not None:
                aux = perturb(e, draw_noise(e.shape, f, d, rng, self.config.noise_shared_across_fields))
            elif self.config.eval_perturbation == "mean":
                aux = perturb(e, np.full(e.shape, 0.5))
        s_ep, s_ip = products(aux, f, d)
        return [e, s_ep, s_ip]

    def _keys_and_values(self, inputs, params):
        keys, values = [], []
        for block, x in zip(self.blocks, inputs):
            values.append(mlp_forward(x, block.mlp_v, params, f"{block.space}.v"))
            if "K" in self.variant.ablations:
                keys.append(None)
            else:
                keys.append(mlp_forward(x, block.mlp_k, params, f"{block.space}.k"))
        return keys, values

    def _forward_cetn(self, e, params, rng):
        keys, raw = self._keys_and_values(self.space_inputs(e, rng), params)
        main = raw[0]
        finals = [main]
        for r in raw[1:]:
            finals.append(r if "T" in self.variant.ablations else through_connect(r, main))
        spaces = [SpaceOutput(k, v, r) for k, v, r in zip(keys, finals, raw)]
        terms = []
        for space, out in zip(SPACES, spaces):
            if self.config.shared_fusion:
                w, b = params["fusion.W"], params["fusion.b"]
            else:
                w, b = params[f"fusion.{space}.W"], params[f"fusion.{space}.b"]
            proj = ad.add(out.V @ w, b)
            terms.append(proj if out.K is None else ad.mul(out.K, proj))
        logit = ad.reshape(terms[0] + terms[1] + terms[2], (len(e.value),))
        return logit, spaces

    def _forward_simmhn(self, e, params):
        keys, raw = self._keys_and_values(self.space_inputs(e, None), params)
        spaces = [SpaceOutput(k, v, v) for k, v in zip(keys, raw)]
        terms = [v if k is None else ad.mul(k, v) for k, v in zip(keys, raw)]
        logit = ad.reshape(terms[0] + terms[1] + terms[2], (len(e.value),))
        return logit, spaces

    def predict(self, indices: np.ndarray, chunk: int = 20000) -> np.ndarray:
        """Click probabilities from the deterministic (noise-free) graph."""
        out = []
        for lo in range(0, len(indices), chunk):
            tape = ad.Tape()
            params = {k: tape.constant(v) for k, v in self.params.items()}
            logit, _, _ = self.forward(tape, indices[lo : lo + chunk], None, params)
            out.append(ad._sigmoid(logit.value))
            tape.release()
        return np.concatenate(out) if out else np.zeros(0)

    # -- checkpoints -------------------------------------------------------

    def header(self) -> dict:
        cfg = asdict(self.config)
        cfg["ablations"] = sorted(self.variant.ablations)
        return {
            "format": "cetn-checkpoint",
            "version": 1,
            "variant": {"kind": self.variant.kind, "ablations": sorted(self.variant.ablations), "label": self.variant.label},
            "model": cfg,
            "vocab_sizes": self.vocab_sizes,
            "embedding_dim": self.config.embedding_dim,
        }

    def save(self, path, extra: Optional[dict] = None) -> None:
        save_checkpoint(path, self.params, {**self.header(), **(extra or {})})

    @classmethod
    def load(cls, path) -> Tuple["CETN", dict]:
        header, params = load_checkpoint(path)
        m = dict(header["model"])
        for key in ("ablations", "hidden_dims"):
            m[key] = tuple(m[key])
        if m.get("activations") is not None:
            m["activations"] = tuple(m["activations"])
        model = cls(ModelConfig(**m), header["vocab_sizes"])
        expected = set(model.init_params(0))
        if set(params) != expected:
            raise ValueError(f"{path}: checkpoint tensors do not match the recorded model")
        model.params = params
        return model, header


# checkpoint layout: b"CETNCKPT", uint64 LE header length, UTF-8 JSON header,
# then every tensor as little-endian float64 in header["tensors"] order.
_MAGIC = b"CETNCKPT"


def save_checkpoint(path, params: Dict[str, np.ndarray], header: dict) -> None:
    tensors, offset = [], 0
    for name, arr in params.items():
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    head = json.dumps({**header, "tensors": tensors}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a CETN checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        flat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    params = {}
    for t in header.pop("tensors"):
        size = int(np.prod(t["shape"], dtype=np.int64))
        params[t["name"]] = flat[t["offset"] : t["offset"] + size].reshape(t["shape"]).copy()
    return header, params
