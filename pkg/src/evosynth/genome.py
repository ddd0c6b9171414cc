"""Masked-network data model: layered weights plus two-level binary masks
(cluster level and synapse level), with serialization and lineage checks.

Genomes are immutable values: weight and mask arrays are frozen after
construction, and every mutation produces a new genome.

File format (version 1), all integers little-endian:

    offset 0   magic            8 bytes  b"EVOGENOM"
    offset 8   format version   u32      currently 1
    offset 12  header length    u32      byte length of the header block
    offset 16  header           UTF-8 JSON: id, parent id, generation,
                                input shape, layer specs, weighted layer
                                indices and shapes
    ...        weight payload   raw float64, C order, one block per
                                weighted layer in index order
    ...        synapse masks    bit-packed (8 masks/byte, big-endian bit
                                order), one padded block per weighted layer
    ...        cluster masks    bit-packed, same scheme
    last 4     checksum         CRC-32 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    GenomeChecksumError,
    GenomeMagicError,
    GenomeParseError,
    GenomeTruncatedError,
    GenomeVersionError,
)
from .numerics import WEIGHTED_KINDS, LayerSpec, kernel_count, network_shapes

MAGIC = b"EVOGENOM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ClusterIndex:
    """Address of one synaptic cluster: a convolution output channel or a
    fully-connected output neuron's weight row."""

    layer: int
    kernel: int


@dataclass(frozen=True, eq=False)
class NetworkGenome:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    weights: dict[int, np.ndarray]
    synapse_mask: dict[int, np.ndarray]
    cluster_mask: dict[int, np.ndarray]
    generation: int
    genome_id: str
    parent_id: str | None = None

    def __post_init__(self):
        weighted = {i for i, l in enumerate(self.layers) if l.kind in WEIGHTED_KINDS}
        for name, mapping in (
            ("weights", self.weights),
            ("synapse_mask", self.synapse_mask),
            ("cluster_mask", self.cluster_mask),
        ):
            if set(mapping) != weighted:
                raise ValueError(f"{name} keys {sorted(mapping)} != weighted layers {sorted(weighted)}")
        for i in weighted:
            spec_shape = self.layers[i].kernel_shape
            if self.weights[i].shape != spec_shape:
                raise ValueError(f"layer {i}: weight shape {self.weights[i].shape} != {spec_shape}")
            if self.synapse_mask[i].shape != spec_shape:
                raise ValueError(f"layer {i}: synapse mask shape mismatch")
            if self.cluster_mask[i].shape != (kernel_count(self.layers[i]),):
                raise ValueError(f"layer {i}: cluster mask shape mismatch")
        for mapping in (self.weights, self.synapse_mask, self.cluster_mask):
            for arr in mapping.values():
                arr.flags.writeable = False

    @property
    def weighted_layers(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.layers) if l.kind in WEIGHTED_KINDS)

    def with_weights(self, new_weights: dict[int, np.ndarray]) -> "NetworkGenome":
        """Same individual, new weight values (the training result)."""
        return replace(self, weights={i: np.array(w, dtype=np.float64) for i, w in new_weights.items()})


def derive_genome_id(parent_id: str | None, generation: int, seed: int) -> str:
    """Deterministic identifier so whole runs are reproducible byte for byte."""
    tag = f"{parent_id or 'root'}|{generation}|{seed}"
    return hashlib.sha256(tag.encode("ascii")).hexdigest()[:16]


def dense_genome(
    layers: tuple[LayerSpec, ...],
    input_shape: tuple[int, ...],
    weights: dict[int, np.ndarray],
    genome_id: str,
) -> NetworkGenome:
    """Generation-1 ancestor: every cluster and synapse live."""
    network_shapes(tuple(layers), tuple(input_shape))
    smask = {}
    cmask = {}
    for i, layer in enumerate(layers):
        if layer.kind in WEIGHTED_KINDS:
            smask[i] = np.ones(layer.kernel_shape, dtype=np.uint8)
            cmask[i] = np.ones(kernel_count(layer), dtype=np.uint8)
    return NetworkGenome(
        layers=tuple(layers),
        input_shape=tuple(input_shape),
        weights={i: np.array(w, dtype=np.float64) for i, w in weights.items()},
        synapse_mask=smask,
        cluster_mask=cmask,
        generation=1,
        genome_id=genome_id,
        parent_id=None,
    )


def offspring_genome(
    parent: NetworkGenome,
    synapse_mask: dict[int, np.ndarray],
    cluster_mask: dict[int, np.ndarray],
    genome_id: str,
) -> NetworkGenome:
    """Child of `parent` with the given masks; surviving synapses inherit the
    parent's weights, dead ones are zeroed."""
    weights = {i: parent.weights[i] * synapse_mask[i] for i in parent.weights}
    return NetworkGenome(
        layers=parent.layers,
        input_shape=parent.input_shape,
        weights=weights,
        synapse_mask={i: np.array(m, dtype=np.uint8) for i, m in synapse_mask.items()},
        cluster_mask={i: np.array(m, dtype=np.uint8) for i, m in cluster_mask.items()},
        generation=parent.generation + 1,
        genome_id=genome_id,
        parent_id=parent.genome_id,
    )


def genomes_equal(a: NetworkGenome, b: NetworkGenome) -> bool:
    """Full structural comparison: specs, ids, generation, bit-exact weights
    and masks."""
    if (
        a.layers != b.layers
        or a.input_shape != b.input_shape
        or a.generation != b.generation
        or a.genome_id != b.genome_id
        or a.parent_id != b.parent_id
    ):
        return False
    for mapping_a, mapping_b in (
        (a.weights, b.weights),
        (a.synapse_mask, b.synapse_mask),
        (a.cluster_mask, b.cluster_mask),
    ):
        if set(mapping_a) != set(mapping_b):
            return False
        for i in mapping_a:
            if mapping_a[i].tobytes() != mapping_b[i].tobytes():
                return False
    return True


def count_live_synapses(genome: NetworkGenome) -> int:
    return int(sum(int(m.sum()) for m in genome.synapse_mask.values()))


def count_live_clusters(genome: NetworkGenome) -> int:
    return int(sum(int(m.sum()) for m in genome.cluster_mask.values()))


def live_synapses_per_layer(genome: NetworkGenome) -> dict[int, int]:
    return {i: int(m.sum()) for i, m in genome.synapse_mask.items()}


def live_clusters_per_layer(genome: NetworkGenome) -> dict[int, int]:
    return {i: int(m.sum()) for i, m in genome.cluster_mask.items()}


def validate(genome: NetworkGenome, parent: NetworkGenome | None = None) -> list[str]:
    """Every violated invariant, not just the first. Empty list means ok."""
    violations = []
    for i in genome.weighted_layers:
        smask = genome.synapse_mask[i]
        cmask = genome.cluster_mask[i]
        for mask, what in ((smask, "synapse"), (cmask, "cluster")):
            bad = set(np.unique(mask)) - {0, 1}
            if bad:
                violations.append(f"layer {i}: non-binary {what} mask values {sorted(bad)}")
        if not np.all(np.isfinite(genome.weights[i])):
            violations.append(f"layer {i}: non-finite weights")
        flat = smask.reshape(smask.shape[0], -1)
        for k in range(flat.shape[0]):
            if cmask[k] == 0 and flat[k].any():
                idx = int(np.argmax(flat[k] > 0))
                violations.append(
                    f"layer {i} kernel {k}: live synapse at index {idx} inside dead cluster"
                )
    if parent is not None:
        if genome.parent_id != parent.genome_id:
            violations.append(
                f"parent id {genome.parent_id!r} does not match parent genome {parent.genome_id!r}"
            )
        if genome.generation != parent.generation + 1:
            violations.append(
                f"generation {genome.generation} is not parent's {parent.generation} + 1"
            )
        for i in genome.weighted_layers:
            extra = (genome.synapse_mask[i] > parent.synapse_mask[i]).sum()
            if extra:
                violations.append(
                    f"layer {i}: {int(extra)} synapses live in offspring but dead in parent"
                )
            extra_c = (genome.cluster_mask[i] > parent.cluster_mask[i]).sum()
            if extra_c:
                violations.append(
                    f"layer {i}: {int(extra_c)} clusters live in offspring but dead in parent"
                )
        if count_live_synapses(genome) > count_live_synapses(parent):
            violations.append("offspring has more live synapses than its parent")
    return violations


# ---------------------------------------------------------------------------
# serialization

def _pack_mask(mask: np.ndarray) -> bytes:
    return np.packbits(mask.reshape(-1).astype(np.uint8)).tobytes()


def _unpack_mask(raw: bytes, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=count)
    return bits.reshape(shape).astype(np.uint8)


def _packed_len(shape: tuple[int, ...]) -> int:
    return (int(np.prod(shape)) + 7) // 8


def save_genome(genome: NetworkGenome, path) -> None:
    header = {
        "genome_id": genome.genome_id,
        "parent_id": genome.parent_id,
        "generation": genome.generation,
        "input_shape": list(genome.input_shape),
        "layers": [
            {
                "kind": l.kind,
                "kernel_shape": list(l.kernel_shape),
                "stride": l.stride,
                "padding": l.padding,
            }
            for l in genome.layers
        ],
    }
    blob = bytearray()
    blob += MAGIC
    blob += FORMAT_VERSION.to_bytes(4, "little")
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += len(header_bytes).to_bytes(4, "little")
    blob += header_bytes
    for i in genome.weighted_layers:
        blob += np.ascontiguousarray(genome.weights[i], dtype="<f8").tobytes()
    for i in genome.weighted_layers:
        blob += _pack_mask(genome.synapse_mask[i])
    for i in genome.weighted_layers:
        blob += _pack_mask(genome.cluster_mask[i])
    blob += (zlib.crc32(bytes(blob)) & 0xFFFFFFFF).to_bytes(4, "little")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_genome(path) -> NetworkGenome:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:8] != MAGIC:
        raise GenomeMagicError(f"bad magic bytes, expected {MAGIC!r}", offset=0)
    if len(raw) < 12:
        raise GenomeTruncatedError(expected=16, actual=len(raw), offset=len(raw))
    version = int.from_bytes(raw[8:12], "little")
    if version != FORMAT_VERSION:
        raise GenomeVersionError(f"unsupported format version {version}", offset=8)
    if len(raw) < 16:
        raise GenomeTruncatedError(expected=16, actual=len(raw), offset=len(raw))
    header_len = int.from_bytes(raw[12:16], "little")
    if len(raw) < 16 + header_len:
        raise GenomeTruncatedError(expected=16 + header_len, actual=len(raw), offset=len(raw))
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
        layers = tuple(
            LayerSpec(
                kind=l["kind"],
                kernel_shape=tuple(l["kernel_shape"]),
                stride=l["stride"],
                padding=l["padding"],
            )
            for l in header["layers"]
        )
        input_shape = tuple(header["input_shape"])
        generation = int(header["generation"])
        genome_id = str(header["genome_id"])
        parent_id = header["parent_id"]
    except (KeyError, ValueError, TypeError) as exc:
        raise GenomeParseError(f"malformed header: {exc}", offset=16) from None

    weighted = [i for i, l in enumerate(layers) if l.kind in WEIGHTED_KINDS]
    shapes = [layers[i].kernel_shape for i in weighted]
    weight_bytes = sum(int(np.prod(s)) * 8 for s in shapes)
    smask_bytes = sum(_packed_len(s) for s in shapes)
    cmask_bytes = sum(_packed_len((s[0],)) for s in shapes)
    expected = 16 + header_len + weight_bytes + smask_bytes + cmask_bytes + 4
    if len(raw) != expected:
        raise GenomeTruncatedError(expected=expected, actual=len(raw), offset=len(raw))
    stored_crc = int.from_bytes(raw[-4:], "little")
    if stored_crc != (zlib.crc32(raw[:-4]) & 0xFFFFFFFF):
        raise GenomeChecksumError("checksum mismatch", offset=len(raw) - 4)

    pos = 16 + header_len
    weights = {}
    for i, shape in zip(weighted, shapes):
        nbytes = int(np.prod(shape)) * 8
        weights[i] = np.frombuffer(raw[pos : pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
    smask = {}
    for i, shape in zip(weighted, shapes):
        nbytes = _packed_len(shape)
        smask[i] = _unpack_mask(raw[pos : pos + nbytes], shape)
        pos += nbytes
    cmask = {}
    for i, shape in zip(weighted, shapes):
        nbytes = _packed_len((shape[0],))
        cmask[i] = _unpack_mask(raw[pos : pos + nbytes], (shape[0],))
        pos += nbytes
    return NetworkGenome(
        layers=layers,
        input_shape=input_shape,
        weights=weights,
        synapse_mask=smask,
        cluster_mask=cmask,
        generation=generation,
        genome_id=genome_id,
        parent_id=parent_id,
    )
