"""The hardware-conditioned latency regressor and its init modulator.

The regressor f(arch, v; theta) is an architecture encoder (a 4-layer GCN
over the cell op-graph, or a 2-layer MLP over the flat layerwise encoding), a
2-layer MLP device encoder over the embedding v, and a 3-layer MLP header on
the concatenated embeddings producing one scalar in the standardized latency
scale of v.

The modulator g(v; phi) emits one scale per header weight and one shift per
header bias; theta_0 = (W * z_w, b + z_b) is the device-conditioned
initialization that the inner adaptation loop starts from. g's output layer
starts at zero weights with biases fixed at (1, 0), so a freshly initialized
modulator reproduces theta exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import archspace as asp
from . import nnet
from .archspace import Architecture, CellArchitecture, LayerwiseArchitecture
from .embedding import DeviceEmbedding
from .nnet import ParamSet, Tensor
from .seeds import rng_for


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    space: str
    arch_hidden: int = 100
    gcn_layers: int = 4
    device_input_dim: int = 10
    device_hidden: int = 100
    header_hidden: int = 200
    modulator_hidden: int = 100
    layerwise_encoding: str = "compact"
    arch_input_dim: int | None = None  # derived from the space when None
    alpha_init: float = 1e-2

    def resolved_input_dim(self) -> int:
        if self.arch_input_dim is not None:
            return self.arch_input_dim
        if self.space == "cell":
            return asp.CELL_FEATURE_DIM
        return asp.layerwise_encoding_dim(self.layerwise_encoding)

    def header_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        h = self.header_hidden
        cat = self.arch_hidden + self.device_hidden
        return [("head.w0", (cat, h)), ("head.w1", (h, h)), ("head.w2", (h, 1)),
                ("head.b0", (h,)), ("head.b1", (h,)), ("head.b2", (1,))]

    def header_param_counts(self) -> tuple[int, int]:
        """(weight count, bias count), recomputed from shapes."""
        nw = nb = 0
        for name, shape in self.header_shapes():
            n = int(np.prod(shape))
            if ".w" in name:
                nw += n
            else:
                nb += n
        return nw, nb

    def manifest(self) -> dict:
        return {
            "space": self.space,
            "arch_input_dim": self.resolved_input_dim(),
            "arch_hidden": self.arch_hidden,
            "gcn_layers": self.gcn_layers,
            "device_input_dim": self.device_input_dim,
            "device_hidden": self.device_hidden,
            "header_hidden": self.header_hidden,
            "modulator_hidden": self.modulator_hidden,
            "layerwise_encoding": self.layerwise_encoding,
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "ModelConfig":
        return cls(space=manifest["space"],
                   arch_hidden=manifest["arch_hidden"],
                   gcn_layers=manifest["gcn_layers"],
                   device_input_dim=manifest["device_input_dim"],
                   device_hidden=manifest["device_hidden"],
                   header_hidden=manifest["header_hidden"],
                   modulator_hidden=manifest["modulator_hidden"],
                   layerwise_encoding=manifest["layerwise_encoding"],
                   arch_input_dim=manifest["arch_input_dim"])


NORMALIZED_CELL_ADJACENCY = nnet.normalize_adjacency(asp.CELL_ADJACENCY)

INNER_GROUPS = ("arch_encoder", "device_encoder", "header_weights", "header_biases")


def init_params(config: ModelConfig, seed: int) -> ParamSet:
    """Fresh parameters; modulator output layer starts as the identity."""
    rng = rng_for(seed, "model_init")

    def glorot(shape):
        fan_in, fan_out = shape[0], shape[-1]
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)

    ps = ParamSet()
    in_dim = config.resolved_input_dim()
    if config.space == "cell":
        dims = [in_dim] + [config.arch_hidden] * config.gcn_layers
        for i in range(config.gcn_layers):
            ps.add(f"arch.gcn{i}", glorot((dims[i], dims[i + 1])), "arch_encoder")
    else:
        ps.add("arch.w0", glorot((in_dim, config.arch_hidden)), "arch_encoder")
        ps.add("arch.b0", np.zeros(config.arch_hidden), "arch_encoder")
        ps.add("arch.w1", glorot((config.arch_hidden, config.arch_hidden)), "arch_encoder")
        ps.add("arch.b1", np.zeros(config.arch_hidden), "arch_encoder")
    ps.add("dev.w0", glorot((config.device_input_dim, config.device_hidden)), "device_encoder")
    ps.add("dev.b0", np.zeros(config.device_hidden), "device_encoder")
    ps.add("dev.w1", glorot((config.device_hidden, config.device_hidden)), "device_encoder")
    ps.add("dev.b1", np.zeros(config.device_hidden), "device_encoder")
    for name, shape in config.header_shapes():
        group = "header_weights" if ".w" in name else "header_biases"
        ps.add(name, glorot(shape) if ".w" in name else np.zeros(shape), group)

    nw, nb = config.header_param_counts()
    ps.add("mod.w0", glorot((config.device_input_dim, config.modulator_hidden)), "modulator")
    ps.add("mod.b0", np.zeros(config.modulator_hidden), "modulator")
    ps.add("mod.w1", np.zeros((config.modulator_hidden, nw + nb)), "modulator")
    ps.add("mod.b1", np.concatenate([np.ones(nw), np.zeros(nb)]), "modulator")

    for name in list(ps.names()):
        if ps.group(name) in INNER_GROUPS:
            ps.add(f"alpha.{name}", np.full(ps[name].shape, config.alpha_init), "alpha")
    return ps


def inner_param_names(config: ModelConfig, scope: str = "all") -> list[str]:
    """Parameters the inner adaptation loop updates."""
    if scope == "all":
        groups = INNER_GROUPS
    elif scope == "header":
        groups = ("header_weights", "header_biases")
    else:
        raise ModelError(f"unknown inner scope {scope!r}")
    names = []
    if config.space == "cell":
        arch = [f"arch.gcn{i}" for i in range(config.gcn_layers)]
    else:
        arch = ["arch.w0", "arch.b0", "arch.w1", "arch.b1"]
    by_group = {
        "arch_encoder": arch,
        "device_encoder": ["dev.w0", "dev.b0", "dev.w1", "dev.b1"],
        "header_weights": ["head.w0", "head.w1", "head.w2"],
        "header_biases": ["head.b0", "head.b1", "head.b2"],
    }
    for g in groups:
        names.extend(by_group[g])
    return names


# ---------------------------------------------------------------------------
# Encoding batches


def encode_batch(config: ModelConfig, archs: Sequence[Architecture]) -> np.ndarray:
    """Stack encoder inputs: (B, nodes, feats) for cells, (B, D) for layerwise."""
    if not archs:
        raise ModelError("empty architecture batch")
    if config.space == "cell":
        if not all(isinstance(a, CellArchitecture) for a in archs):
            raise ModelError("cell model got non-cell architectures")
        return np.stack([asp.encode_cell(a).features for a in archs])
    if not all(isinstance(a, LayerwiseArchitecture) for a in archs):
        raise ModelError("layerwise model got non-layerwise architectures")
    dim = config.resolved_input_dim()
    return np.stack([asp.encode_layerwise(a, mode=config.layerwise_encoding,
                                          input_dim=dim) for a in archs])


# ---------------------------------------------------------------------------
# Forward passes


def _mlp2(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = nnet.relu(nnet.add(nnet.matmul(x, params[f"{prefix}.w0"]), params[f"{prefix}.b0"]))
    return nnet.relu(nnet.add(nnet.matmul(h, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))


def encode_device(config: ModelConfig, params: Mapping[str, Tensor], v_h) -> Tensor:
    v = v_h if isinstance(v_h, Tensor) else nnet.constant(np.asarray(v_h, dtype=float))
    if v.shape != (config.device_input_dim,):
        raise ModelError(f"device embedding shape {v.shape}, expected "
                         f"({config.device_input_dim},)")
    return _mlp2(nnet.reshape(v, (1, config.device_input_dim)), params, "dev")


def forward(config: ModelConfig, params: Mapping[str, Tensor],
            arch_inputs, v_h) -> Tensor:
    """Predicted latencies (standardized scale), shape (B,)."""
    x = arch_inputs if isinstance(arch_inputs, Tensor) else nnet.constant(arch_inputs)
    if config.space == "cell":
        if x.ndim != 3 or x.shape[-1] != config.resolved_input_dim():
            raise ModelError(f"cell features shaped {x.shape}, expected "
                             f"(B, {asp.CELL_GRAPH_NODES}, {config.resolved_input_dim()})")
        h = x
        for i in range(config.gcn_layers):
            h = nnet.gcn_layer(h, NORMALIZED_CELL_ADJACENCY, params[f"arch.gcn{i}"])
        arch_emb = nnet.tmean(h, axis=1)
    else:
        if x.ndim != 2 or x.shape[-1] != config.resolved_input_dim():
            raise ModelError(f"layerwise encoding shaped {x.shape}, expected "
                             f"(B, {config.resolved_input_dim()})")
        arch_emb = _mlp2(x, params, "arch")
    n = arch_emb.shape[0]
    dev_emb = nnet.broadcast_to(encode_device(config, params, v_h),
                                (n, config.device_hidden))
    h = nnet.concat([arch_emb, dev_emb], axis=1)
    h = nnet.relu(nnet.add(nnet.matmul(h, params["head.w0"]), params["head.b0"]))
    h = nnet.relu(nnet.add(nnet.matmul(h, params["head.w1"]), params["head.b1"]))
    out = nnet.add(nnet.matmul(h, params["head.w2"]), params["head.b2"])
    return nnet.reshape(out, (n,))


def modulator_output_batch(config: ModelConfig, params: Mapping[str, Tensor],
                           v_batch) -> Tensor:
    """z vectors for a stack of device embeddings, shape (B, Nw + Nb)."""
    v = v_batch if isinstance(v_batch, Tensor) else nnet.constant(np.asarray(v_batch, dtype=float))
    if v.ndim != 2 or v.shape[1] != config.device_input_dim:
        raise ModelError(f"modulator input shaped {v.shape}, expected "
                         f"(B, {config.device_input_dim})")
    h = nnet.relu(nnet.add(nnet.matmul(v, params["mod.w0"]), params["mod.b0"]))
    return nnet.add(nnet.matmul(h, params["mod.w1"]), params["mod.b1"])


def modulator_output(config: ModelConfig, params: Mapping[str, Tensor], v_h) -> Tensor:
    v = v_h if isinstance(v_h, Tensor) else nnet.constant(np.asarray(v_h, dtype=float))
    z = modulator_output_batch(config, params, nnet.reshape(v, (1, config.device_input_dim)))
    nw, nb = config.header_param_counts()
    return nnet.reshape(z, (nw + nb,))


def apply_modulation(config: ModelConfig, params: Mapping[str, Tensor],
                     z: Tensor) -> dict[str, Tensor]:
    """theta_0 from a modulator output vector: weights scaled, biases shifted;
    encoder parameters pass through unmodulated."""
    nw, nb = config.header_param_counts()
    if z.shape != (nw + nb,):
        raise ModelError(f"modulator output {z.shape} vs header params {nw}+{nb}")
    out = {name: params[name] for name in params
           if not name.startswith(("mod.", "alpha."))}
    w_off, b_off = 0, nw
    for name, shape in config.header_shapes():
        n = int(np.prod(shape))
        if ".w" in name:
            z_slice = nnet.reshape(nnet.narrow(z, 0, w_off, n), shape)
            out[name] = nnet.mul(params[name], z_slice)
            w_off += n
        else:
            z_slice = nnet.reshape(nnet.narrow(z, 0, b_off, n), shape)
            out[name] = nnet.add(params[name], z_slice)
            b_off += n
    return out


def modulate(config: ModelConfig, params: Mapping[str, Tensor], v_h) -> dict[str, Tensor]:
    """Device-conditioned initialization from one embedding."""
    return apply_modulation(config, params, modulator_output(config, params, v_h))


def predict_standardized(config: ModelConfig, params: Mapping[str, Tensor],
                         archs: Sequence[Architecture], v_h) -> np.ndarray:
    return forward(config, params, encode_batch(config, archs), v_h).data


def predict_latency_ms(config: ModelConfig, params: Mapping[str, Tensor],
                       archs: Sequence[Architecture],
                       embedding: DeviceEmbedding) -> np.ndarray:
    """Map standardized predictions back through the embedding anchors."""
    if embedding.raw_max <= embedding.raw_min:
        raise ModelError("embedding lacks usable raw_min/raw_max anchors")
    std = predict_standardized(config, params, archs, embedding.values)
    return embedding.destandardize(std)


def save_checkpoint(path, config: ModelConfig, params: ParamSet) -> None:
    nnet.save_params(path, params, extra_manifest={"model": config.manifest()})


def load_checkpoint(path, expect_config: ModelConfig | None = None):
    arrays, manifest = nnet.load_params(path)
    config = ModelConfig.from_manifest(manifest["model"])
    if expect_config is not None and config.manifest() != expect_config.manifest():
        raise ModelError(f"checkpoint model {config.manifest()} does not match "
                         f"expected {expect_config.manifest()}")
    params = init_params(config, seed=0)
    params.load_values(arrays)
    return config, params
