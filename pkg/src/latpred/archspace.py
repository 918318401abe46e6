"""Architecture search spaces, encodings, MAC counts, and reference sets.

Two spaces are supported:

* ``cell`` — a 4-node / 6-edge cell DAG where every edge carries one of five
  operations. The macro network stacks a stem, three stages of five identical
  cells (16/32/64 channels), residual reduction blocks between stages, and an
  average-pool + linear classifier.
* ``layerwise`` — a fixed 22-position macro network where every position
  chooses one of nine mobile-conv candidate blocks (kernel 3/5, expansion
  1/3/6, optional 2-group convs, or skip).

Everything here is a pure function of the architecture value; encodings are
bit-identical across calls and processes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .seeds import rng_for

CELL_OPS = ("zeroize", "skip", "conv1x1", "conv3x3", "avgpool3x3")
# Fixed edge order of the cell DAG (source, target); persisted in file headers.
CELL_EDGES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
# Edge index pairs (a, b) where edge a's output feeds edge b; the unit of
# pairwise op-op interaction in the device simulator.
CELL_EDGE_PAIRS = ((0, 2), (0, 4), (1, 5), (2, 5))
CELL_SPACE_SIZE = len(CELL_OPS) ** len(CELL_EDGES)  # 15625

LAYERWISE_CANDIDATES = (
    "k3_e1", "k3_e1_g2", "k3_e3", "k3_e6",
    "k5_e1", "k5_e1_g2", "k5_e3", "k5_e6",
    "skip",
)
# (kernel, expansion, groups) per non-skip candidate, parsed from the names.
_LW_ATTRS = {
    "k3_e1": (3, 1, 1), "k3_e1_g2": (3, 1, 2), "k3_e3": (3, 3, 1), "k3_e6": (3, 6, 1),
    "k5_e1": (5, 1, 1), "k5_e1_g2": (5, 1, 2), "k5_e3": (5, 3, 1), "k5_e6": (5, 6, 1),
}
LAYERWISE_POSITIONS = 22
LAYERWISE_SKIP = LAYERWISE_CANDIDATES.index("skip")

# Macro skeleton of the layerwise space: (c_in, c_out, input resolution,
# stride) per searchable position, 224x224 input, stem with 16 channels.
_LW_SKELETON: list[tuple[int, int, int, int]] = []
_LW_STAGES: list[int] = []


def _build_lw_skeleton():
    spec = [  # (n_blocks, c_out, first_stride)
        (1, 16, 1), (4, 24, 2), (4, 32, 2), (4, 64, 2),
        (4, 112, 1), (4, 184, 2), (1, 352, 1),
    ]
    c_in, res = 16, 112
    for stage, (n_blocks, c_out, first_stride) in enumerate(spec):
        for i in range(n_blocks):
            stride = first_stride if i == 0 else 1
            _LW_SKELETON.append((c_in, c_out, res, stride))
            _LW_STAGES.append(stage)
            res //= stride
            c_in = c_out


_build_lw_skeleton()
LAYERWISE_STAGE_OF_POSITION = tuple(_LW_STAGES)
LAYERWISE_N_STAGES = LAYERWISE_STAGE_OF_POSITION[-1] + 1

CELL_STAGES = 3
CELLS_PER_STAGE = 5


class SpaceError(ValueError):
    """Invalid architecture value or space mismatch."""


@dataclass(frozen=True)
class CellArchitecture:
    """One cell: an op index per edge, in the fixed CELL_EDGES order."""

    edge_ops: tuple[int, ...]

    def __post_init__(self):
        ops = tuple(int(o) for o in self.edge_ops)
        object.__setattr__(self, "edge_ops", ops)
        if len(ops) != len(CELL_EDGES):
            raise SpaceError(f"cell needs {len(CELL_EDGES)} edge ops, got {len(ops)}")
        if any(o < 0 or o >= len(CELL_OPS) for o in ops):
            raise SpaceError(f"edge op out of range: {ops}")

    @property
    def space(self) -> str:
        return "cell"

    @property
    def ops(self) -> tuple[int, ...]:
        return self.edge_ops


@dataclass(frozen=True)
class LayerwiseArchitecture:
    """One block choice per searchable position."""

    block_choices: tuple[int, ...]

    def __post_init__(self):
        ops = tuple(int(o) for o in self.block_choices)
        object.__setattr__(self, "block_choices", ops)
        if len(ops) != LAYERWISE_POSITIONS:
            raise SpaceError(f"layerwise needs {LAYERWISE_POSITIONS} choices, got {len(ops)}")
        if any(o < 0 or o >= len(LAYERWISE_CANDIDATES) for o in ops):
            raise SpaceError(f"block choice out of range: {ops}")

    @property
    def space(self) -> str:
        return "layerwise"

    @property
    def ops(self) -> tuple[int, ...]:
        return self.block_choices


Architecture = CellArchitecture | LayerwiseArchitecture


def arch_to_obj(a: Architecture) -> dict:
    return {"space": a.space, "ops": list(a.ops)}


def arch_from_obj(obj: dict) -> Architecture:
    space = obj.get("space")
    ops = obj.get("ops")
    if space == "cell":
        return CellArchitecture(tuple(ops))
    if space == "layerwise":
        return LayerwiseArchitecture(tuple(ops))
    raise SpaceError(f"unknown space {space!r}")


def arch_key(a: Architecture) -> str:
    """Canonical serialization, the basis for all table keys."""
    return json.dumps(arch_to_obj(a), sort_keys=True, separators=(",", ":"))


def arch_hash(a: Architecture) -> str:
    """sha256 hex digest of :func:`arch_key`; the fixed table-key hash."""
    return hashlib.sha256(arch_key(a).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Encodings

# Node order of the unrolled cell op-graph: a dedicated input node, one node
# per edge (CELL_EDGES order), and a dedicated output node.
CELL_GRAPH_NODES = 2 + len(CELL_EDGES)
# Feature columns: [input, output] markers then one column per op, final
# column reserved (padding) to make the width 8.
CELL_FEATURE_DIM = 8
_COL_INPUT, _COL_OUTPUT = 0, 1
_COL_OP0 = 2


def _cell_adjacency() -> np.ndarray:
    adj = np.zeros((CELL_GRAPH_NODES, CELL_GRAPH_NODES))
    n_in, n_out = 0, CELL_GRAPH_NODES - 1
    for i, (src, dst) in enumerate(CELL_EDGES):
        node = 1 + i
        if src == 0:
            adj[n_in, node] = 1.0
        if dst == 3:
            adj[node, n_out] = 1.0
        for j, (src2, _) in enumerate(CELL_EDGES):
            if src2 == CELL_EDGES[i][1]:
                adj[node, 1 + j] = 1.0
    return adj


CELL_ADJACENCY = _cell_adjacency()
CELL_ADJACENCY.setflags(write=False)


class CellEncoding(NamedTuple):
    features: np.ndarray  # (nodes, CELL_FEATURE_DIM) one-hot rows
    adjacency: np.ndarray  # (nodes, nodes) upper-triangular 0/1


def encode_cell(a: CellArchitecture) -> CellEncoding:
    """One-hot node features plus the fixed op-graph adjacency."""
    if not isinstance(a, CellArchitecture):
        raise SpaceError(f"expected a cell architecture, got {type(a).__name__}")
    feats = np.zeros((CELL_GRAPH_NODES, CELL_FEATURE_DIM))
    feats[0, _COL_INPUT] = 1.0
    feats[-1, _COL_OUTPUT] = 1.0
    for i, op in enumerate(a.edge_ops):
        feats[1 + i, _COL_OP0 + op] = 1.0
    return CellEncoding(feats, CELL_ADJACENCY.copy())


# Compact layerwise column map, 6 columns per position:
#   [skip, kernel==5, expansion==1, expansion==3, expansion==6, groups==2]
# All-zero kernels never occur: a non-skip candidate always sets exactly one
# expansion column, so the map is bijective over the 9 candidates.
LAYERWISE_COMPACT_COLS = 6
LAYERWISE_ONEHOT_COLS = len(LAYERWISE_CANDIDATES)


def _compact_row(choice: int) -> np.ndarray:
    row = np.zeros(LAYERWISE_COMPACT_COLS)
    name = LAYERWISE_CANDIDATES[choice]
    if name == "skip":
        row[0] = 1.0
        return row
    k, e, g = _LW_ATTRS[name]
    row[1] = 1.0 if k == 5 else 0.0
    row[2 + (0 if e == 1 else 1 if e == 3 else 2)] = 1.0
    row[5] = 1.0 if g == 2 else 0.0
    return row


_COMPACT_ROWS = np.stack([_compact_row(c) for c in range(len(LAYERWISE_CANDIDATES))])


def encode_layerwise(a: LayerwiseArchitecture, mode: str = "compact",
                     input_dim: int | None = None) -> np.ndarray:
    """Flat encoding of a layerwise architecture.

    ``mode="onehot"`` gives the canonical 22x9 = 198-wide one-hot vector;
    ``mode="compact"`` gives the 22x6 = 132-wide attribute encoding described
    above. If ``input_dim`` exceeds the natural length the vector is
    zero-padded; a smaller ``input_dim`` would be lossy and is rejected.
    """
    if not isinstance(a, LayerwiseArchitecture):
        raise SpaceError(f"expected a layerwise architecture, got {type(a).__name__}")
    if mode == "onehot":
        vec = np.zeros(LAYERWISE_POSITIONS * LAYERWISE_ONEHOT_COLS)
        for i, c in enumerate(a.block_choices):
            vec[i * LAYERWISE_ONEHOT_COLS + c] = 1.0
    elif mode == "compact":
        vec = _COMPACT_ROWS[list(a.block_choices)].reshape(-1)
    else:
        raise SpaceError(f"unknown layerwise encoding mode {mode!r}")
    if input_dim is not None:
        if input_dim < vec.size:
            raise SpaceError(
                f"configured input dim {input_dim} is smaller than the "
                f"{mode} encoding length {vec.size}")
        vec = np.pad(vec, (0, input_dim - vec.size))
    return vec


def decode_layerwise(vec: np.ndarray, mode: str = "compact") -> LayerwiseArchitecture:
    """Inverse of :func:`encode_layerwise` (inverse lookup per position)."""
    vec = np.asarray(vec, dtype=float)
    cols = LAYERWISE_ONEHOT_COLS if mode == "onehot" else LAYERWISE_COMPACT_COLS
    rows = vec[: LAYERWISE_POSITIONS * cols].reshape(LAYERWISE_POSITIONS, cols)
    choices = []
    table = np.eye(LAYERWISE_ONEHOT_COLS) if mode == "onehot" else _COMPACT_ROWS
    for row in rows:
        matches = np.where((table == row).all(axis=1))[0]
        if len(matches) != 1:
            raise SpaceError(f"row {row} does not match any candidate")
        choices.append(int(matches[0]))
    return LayerwiseArchitecture(tuple(choices))


def layerwise_encoding_dim(mode: str) -> int:
    if mode == "onehot":
        return LAYERWISE_POSITIONS * LAYERWISE_ONEHOT_COLS
    if mode == "compact":
        return LAYERWISE_POSITIONS * LAYERWISE_COMPACT_COLS
    raise SpaceError(f"unknown layerwise encoding mode {mode!r}")


# ---------------------------------------------------------------------------
# MAC counting


def count_macs(a: CellArchitecture, image_size: int = 32,
               channels: tuple[int, int, int] = (16, 32, 64),
               num_classes: int = 10) -> int:
    """Analytic multiply-accumulate count of the full cell-space network.

    Convolutions contribute k^2 * C_in * C_out * H * W; pooling, skip, and
    zeroize contribute nothing, and batch-norm/activation costs are ignored
    (coarse FLOPs-proxy convention).
    """
    if image_size <= 0:
        raise SpaceError("image_size must be positive")
    total = 9 * 3 * channels[0] * image_size * image_size  # stem conv3x3
    for s, c in enumerate(channels):
        h = image_size // (2 ** s)
        per_cell = 0
        for op in a.edge_ops:
            name = CELL_OPS[op]
            if name == "conv1x1":
                per_cell += c * c * h * h
            elif name == "conv3x3":
                per_cell += 9 * c * c * h * h
        total += CELLS_PER_STAGE * per_cell
        if s + 1 < len(channels):
            c_next = channels[s + 1]
            h_next = image_size // (2 ** (s + 1))
            total += 9 * c * c_next * h_next * h_next  # conv3x3 stride 2
            total += 9 * c_next * c_next * h_next * h_next
            total += c * c_next * h_next * h_next  # 1x1 shortcut
    total += channels[-1] * num_classes
    return total


def count_macs_layerwise(a: LayerwiseArchitecture, num_classes: int = 1000) -> int:
    """MAC count of a layerwise architecture over the fixed macro skeleton.

    Each chosen block is a mobile inverted-bottleneck: two (possibly grouped)
    1x1 convs around a depthwise k x k conv; skip contributes nothing.
    """
    total = 9 * 3 * 16 * 112 * 112  # stem conv3x3 stride 2 on 224 input
    for pos, choice in enumerate(a.block_choices):
        name = LAYERWISE_CANDIDATES[choice]
        c_in, c_out, res, stride = _LW_SKELETON[pos]
        if name == "skip":
            continue
        k, e, g = _LW_ATTRS[name]
        mid = c_in * e
        res_out = res // stride
        total += c_in * mid * res * res // g
        total += k * k * mid * res_out * res_out
        total += mid * c_out * res_out * res_out // g
    total += 352 * 1504 * 7 * 7  # final 1x1 conv
    total += 1504 * num_classes
    return total


def arch_macs(a: Architecture) -> int:
    return count_macs(a) if isinstance(a, CellArchitecture) else count_macs_layerwise(a)


# ---------------------------------------------------------------------------
# Structure summaries used by the device simulator and layer-wise baseline


def op_stage_counts(a: Architecture) -> np.ndarray:
    """(n_ops, n_stages) matrix of op-instance counts over the macro network."""
    if isinstance(a, CellArchitecture):
        counts = np.zeros((len(CELL_OPS), CELL_STAGES))
        for op in a.edge_ops:
            counts[op, :] += CELLS_PER_STAGE
        return counts
    counts = np.zeros((len(LAYERWISE_CANDIDATES), LAYERWISE_N_STAGES))
    for pos, choice in enumerate(a.block_choices):
        counts[choice, LAYERWISE_STAGE_OF_POSITION[pos]] += 1
    return counts


def adjacent_op_pairs(a: Architecture) -> list[tuple[int, int, int]]:
    """(op_a, op_b, stage) for each producer/consumer op pair.

    For cells the four DAG-adjacent edge pairs repeat in every cell of every
    stage; for layerwise networks consecutive positions are adjacent.
    """
    if isinstance(a, CellArchitecture):
        pairs = []
        for s in range(CELL_STAGES):
            for ea, eb in CELL_EDGE_PAIRS:
                pairs.append((a.edge_ops[ea], a.edge_ops[eb], s))
        return pairs
    return [
        (a.block_choices[i], a.block_choices[i + 1], LAYERWISE_STAGE_OF_POSITION[i + 1])
        for i in range(LAYERWISE_POSITIONS - 1)
    ]


def adjacent_pair_multiplicity(a: Architecture) -> int:
    """How many times each cell-stage pair entry repeats in the macro net."""
    return CELLS_PER_STAGE if isinstance(a, CellArchitecture) else 1


# ---------------------------------------------------------------------------
# Enumeration and sampling


def enumerate_cells() -> Iterator[CellArchitecture]:
    """All cell architectures in lexicographic edge-op order."""
    for idx in range(CELL_SPACE_SIZE):
        yield cell_from_index(idx)


def cell_from_index(idx: int) -> CellArchitecture:
    ops = []
    for _ in range(len(CELL_EDGES)):
        ops.append(idx % len(CELL_OPS))
        idx //= len(CELL_OPS)
    return CellArchitecture(tuple(ops))


def cell_to_index(a: CellArchitecture) -> int:
    idx = 0
    for op in reversed(a.edge_ops):
        idx = idx * len(CELL_OPS) + op
    return idx


def space_size(space: str) -> int:
    if space == "cell":
        return CELL_SPACE_SIZE
    if space == "layerwise":
        return len(LAYERWISE_CANDIDATES) ** LAYERWISE_POSITIONS
    raise SpaceError(f"unknown space {space!r}")


def sample_architectures(space: str, n: int, seed: int) -> list[Architecture]:
    """n distinct architectures drawn uniformly, reproducible under seed."""
    if n < 1:
        raise SpaceError("n must be >= 1")
    if n > space_size(space):
        raise SpaceError(f"cannot draw {n} distinct architectures from a "
                         f"space of {space_size(space)}")
    rng = rng_for(seed, "arch_sample", space)
    if space == "cell":
        idxs = rng.choice(CELL_SPACE_SIZE, size=n, replace=False)
        return [cell_from_index(int(i)) for i in idxs]
    seen: set[tuple[int, ...]] = set()
    out: list[Architecture] = []
    while len(out) < n:
        ops = tuple(int(x) for x in
                    rng.integers(0, len(LAYERWISE_CANDIDATES), size=LAYERWISE_POSITIONS))
        if ops not in seen:
            seen.add(ops)
            out.append(LayerwiseArchitecture(ops))
    return out


# ---------------------------------------------------------------------------
# Reference sets and architecture files


@dataclass(frozen=True)
class ReferenceSet:
    """The fixed architectures whose latencies fingerprint a device."""

    space: str
    architectures: tuple[Architecture, ...]

    @property
    def d(self) -> int:
        return len(self.architectures)

    def __post_init__(self):
        if any(a.space != self.space for a in self.architectures):
            raise SpaceError("reference set mixes spaces")


DEFAULT_REFSET_SIZE = 10
MIN_MAC_SPAN = 3.0


def default_reference_set(space: str, seed: int, d: int = DEFAULT_REFSET_SIZE,
                          max_attempts: int = 1000) -> ReferenceSet:
    """Random reference set whose MAC counts span at least MIN_MAC_SPAN x.

    The span rejection keeps the reference latencies spread over a wide
    range, which the downstream min-max standardization relies on.
    """
    for attempt in range(max_attempts):
        archs = sample_architectures(space, d, seed=rng_for(seed, "refset", attempt)
                                     .integers(0, 2 ** 31))
        macs = [arch_macs(a) for a in archs]
        if max(macs) >= MIN_MAC_SPAN * min(macs):
            return ReferenceSet(space, tuple(archs))
    raise SpaceError(f"no reference set with MAC span >= {MIN_MAC_SPAN} found "
                     f"in {max_attempts} attempts")


class ParseError(ValueError):
    """Malformed architecture/reference-set file; message carries the line."""


def save_reference_set(path, refset: ReferenceSet) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"d": refset.d, "space": refset.space,
                             "edge_order": list(map(list, CELL_EDGES))}) + "\n")
        for a in refset.architectures:
            fh.write(json.dumps(arch_to_obj(a)) + "\n")


def load_reference_set(path) -> ReferenceSet:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty reference-set file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:1: bad header: {e}") from e
    if "d" not in header or "space" not in header:
        raise ParseError(f"{path}:1: header must carry 'd' and 'space'")
    archs = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            archs.append(arch_from_obj(json.loads(line)))
        except (json.JSONDecodeError, SpaceError, TypeError) as e:
            raise ParseError(f"{path}:{ln}: {e}") from e
    rs = ReferenceSet(header["space"], tuple(archs))
    if rs.d != header["d"]:
        raise ParseError(f"{path}: header d={header['d']} but {rs.d} architectures")
    return rs


def save_architectures(path, archs: Iterable[Architecture]) -> None:
    with open(path, "w") as fh:
        for a in archs:
            fh.write(json.dumps(arch_to_obj(a)) + "\n")


def load_architectures(path) -> list[Architecture]:
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(arch_from_obj(json.loads(line)))
            except (json.JSONDecodeError, SpaceError, TypeError) as e:
                raise ParseError(f"{path}:{ln}: {e}") from e
    return out
