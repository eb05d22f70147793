"""Edge/node message-passing network producing per-edge tour logits.

Layer ``l`` (all sums over the full node set, scaled by 1/sqrt(n)):

    out_i  = sum_k MLP1(e_ik) / sqrt(n)          in_i = sum_k MLP2(e_ki) / sqrt(n)
    v_i    = [in_i, out_i, h_i]
    cand   = MLP3([e_ij, v_i, v_j])
    e_ij  <- e_ij * sigmoid(a * A) + B * cand_ij
    h_i   <- MLP4(v_i)

The decoder maps final edge embeddings to two logits per edge.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Mlp, Tensor, matmul, parameter
from .instances import Seed, TspInstance, make_rng
from .loss import edge_probabilities


@dataclass(frozen=True)
class GnnConfig:
    d: int = 64
    layers: int = 16
    symmetric: bool = True
    coord_input: bool = True
    a: float = 10.0
    noise_scale: float = 0.0

    @classmethod
    def for_kind(cls, kind: str, **kw) -> "GnnConfig":
        euclid = kind == "euclidean"
        kw.setdefault("symmetric", euclid)
        kw.setdefault("coord_input", euclid)
        kw.setdefault("noise_scale", 0.0 if euclid else 0.1)
        return cls(**kw)


class EncoderLayer:
    def __init__(self, d: int, rng: np.random.Generator):
        self.mlp1 = Mlp(d, d, d, rng)
        self.mlp2 = Mlp(d, d, d, rng)
        self.mlp3 = Mlp(7 * d, d, d, rng)
        self.mlp4 = Mlp(3 * d, d, d, rng)
        # near-identity start: sigmoid(10 * 0.5) ~ 0.993 keeps e^l, candidate branch off
        self.A = parameter(np.full(d, 0.5))
        self.B = parameter(np.zeros(d))

    def named_parameters(self, prefix: str):
        out = []
        for name in ("mlp1", "mlp2", "mlp3", "mlp4"):
            out += getattr(self, name).named_parameters(f"{prefix}{name}.")
        out += [(prefix + "A", self.A), (prefix + "B", self.B)]
        return out


class GnnModel:
    def __init__(self, config: GnnConfig, seed: Seed = 0):
        self.config = config
        d = config.d
        rng = make_rng(seed)
        if config.coord_input:
            self.W1 = parameter(dc.uniform_init(rng, (2, d), 2))
            self.b1 = parameter(dc.uniform_init(rng, (d,), 2))
        else:
            self.h0 = parameter(dc.uniform_init(rng, (d,), 1))
        self.W2 = parameter(dc.uniform_init(rng, (d,), 1))
        self.b2 = parameter(dc.uniform_init(rng, (d,), 1))
        self.layers = [EncoderLayer(d, rng) for _ in range(config.layers)]
        self.decoder = Mlp(d, d, 2, rng)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        if self.config.coord_input:
            out = [("embed.W1", self.W1), ("embed.b1", self.b1)]
        else:
            out = [("embed.h0", self.h0)]
        out += [("embed.W2", self.W2), ("embed.b2", self.b2)]
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"layers.{i}.")
        out += self.decoder.named_parameters("decoder.")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def save(self, path) -> None:
        dc.save_tensors(path, [(k, p.data) for k, p in self.named_parameters()], asdict(self.config))

    @classmethod
    def load(cls, path) -> "GnnModel":
        config, tensors = dc.load_tensors(path)
        model = cls(GnnConfig(**config))
        params = dict(model.named_parameters())
        if set(params) != set(tensors):
            raise ValueError(f"{path}: tensor names do not match the model layout")
        for name, p in params.items():
            if tensors[name].shape != p.data.shape:
                raise ValueError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {p.data.shape}")
            p.data[...] = tensors[name]
        return model


@dataclass
class EmbeddingState:
    h: Tensor  # (B, n, d)
    e: Tensor  # (B, n, n, d)


def normalize_adjacency(weights) -> np.ndarray:
    """``c_ij / sqrt(sum_kl c_kl^2 / n)``; also accepts a (B, n, n) stack."""
    c = np.asarray(weights, dtype=np.float64)
    n = c.shape[-1]
    scale = np.sqrt((c**2).sum(axis=(-2, -1), keepdims=True) / n)
    if np.any(scale == 0.0):
        raise ValueError("cannot normalise an all-zero cost matrix")
    return c / scale


def stack_instances(instances: Sequence[TspInstance], coord_input: bool):
    n = instances[0].n
    if any(inst.n != n for inst in instances):
        raise ValueError("all instances in a batch must have the same size")
    costs = np.stack([inst.weights for inst in instances])
    coords = None
    if coord_input:
        if any(inst.coords is None for inst in instances):
            raise ValueError("model expects node coordinates but an instance has none")
        coords = np.stack([inst.coords for inst in instances])
    return costs, coords


def init_embeddings(model: GnnModel, costs: np.ndarray, coords: Optional[np.ndarray]) -> EmbeddingState:
    b, n, _ = costs.shape
    d = model.config.d
    if model.config.coord_input:
        if coords is None:
            raise ValueError("model expects node coordinates")
        h = matmul(Tensor(coords), model.W1) + model.b1
    else:
        h = model.h0.reshape(1, 1, d) + Tensor(np.zeros((b, n, 1)))
    norm = normalize_adjacency(costs)
    e = Tensor(norm[..., None]) * model.W2 + model.b2
    return EmbeddingState(h, e)


def gnn_layer(state: EmbeddingState, layer: EncoderLayer, a: float) -> EmbeddingState:
    h, e = state.h, state.e
    b, n, _, d = e.shape
    inv = 1.0 / math.sqrt(n)
    out_state = layer.mlp1(e).sum(axis=2).scale(inv)
    in_state = layer.mlp2(e).sum(axis=1).scale(inv)
    vertex = dc.concat([in_state, out_state, h], axis=-1)

    # MLP3 on [e_ij, v_i, v_j]: the first affine map is split by input block
    # so the (n, n, 7d) concatenation is never materialised.
    W = layer.mlp3.W1
    pre = (matmul(e, W[:d])
           + matmul(vertex, W[d:4 * d]).reshape(b, n, 1, d)
           + matmul(vertex, W[4 * d:]).reshape(b, 1, n, d)
           + layer.mlp3.b1)
    cand = layer.mlp3.output(pre.relu())

    gate = layer.A.scale(a).sigmoid()
    e_next = e * gate + layer.B * cand
    h_next = layer.mlp4(vertex)
    return EmbeddingState(h_next, e_next)


def decode_logits(state: EmbeddingState, model: GnnModel, symmetric: Optional[bool] = None) -> Tensor:
    """Per-edge logits of shape (B, n, n, 2); diagonal handled by the probability mask."""
    if symmetric is None:
        symmetric = model.config.symmetric
    logits = model.decoder(state.e)
    if symmetric:
        logits = (logits + logits.transpose(0, 2, 1, 3)).scale(0.5)
    return logits


def encode(model: GnnModel, costs: np.ndarray, coords: Optional[np.ndarray]) -> EmbeddingState:
    state = init_embeddings(model, costs, coords)
    for layer in model.layers:
        state = gnn_layer(state, layer, model.config.a)
    return state


def forward_batch(model: GnnModel, costs: np.ndarray, coords: Optional[np.ndarray],
                  noise_scale: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Relaxed solutions (B, n, n) for a batch."""
    logits = decode_logits(encode(model, costs, coords), model)
    return edge_probabilities(logits, noise_scale, rng)


def forward(inst: TspInstance, model: GnnModel, noise_scale: float = 0.0, seed: Seed = 0) -> np.ndarray:
    costs, coords = stack_instances([inst], model.config.coord_input)
    rng = make_rng(seed) if noise_scale > 0 else None
    return forward_batch(model, costs, coords, noise_scale, rng).data[0]
