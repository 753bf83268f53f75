"""Cell and synapse tables -> layer partition and connectivity masks.

The excitatory population of one cortical column is split into four
hypothesized layers. Inter-layer masks ``inter[k]`` have shape
(n_post, n_pre) for A->B, B->C, C->D; intra-layer masks are square with a
zero diagonal; ``inhibitory[k]`` counts incoming inhibitory partners for
each neuron of layer k.
"""

from __future__ import annotations

import csv
import hashlib
import io
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

COLUMN_SOURCE = "allen_v1_column_types_slanted_ref"

CELL_COLUMNS = ["cell_id", "broad_type", "cell_type", "x_um", "y_um", "z_um", "cell_type_source"]
SYNAPSE_COLUMNS = ["pre_id", "post_id", "syn_count", "total_size_um3"]

BROAD_TYPES = ("excitatory", "inhibitory", "nonneuronal")
# spellings used by the upstream annotation tables
BROAD_TYPE_ALIASES = {
    "excitatory": "excitatory", "excitatory_neuron": "excitatory",
    "inhibitory": "inhibitory", "inhibitory_neuron": "inhibitory",
    "nonneuronal": "nonneuronal", "nonneuron": "nonneuronal", "non-neuronal": "nonneuronal",
}

# neurons per cortical cell type in the column export
CELL_TYPE_COUNTS = {
    "23P": 349, "4P": 266, "5P-ET": 38, "5P-IT": 137, "5P-NP": 10, "6P-CT": 143, "6P-IT": 192,
    "6P-U": 28, "BC": 59, "BPC": 33, "MC": 41, "NGC": 17, "WM-P": 20,
}
EXCITATORY_TYPES = ("23P", "4P", "5P-ET", "5P-IT", "5P-NP", "6P-CT", "6P-IT", "6P-U", "WM-P")
INHIBITORY_TYPES = ("BC", "BPC", "MC", "NGC")
CELL_TYPE_BROAD = {**{t: "excitatory" for t in EXCITATORY_TYPES}, **{t: "inhibitory" for t in INHIBITORY_TYPES}}

LAYER_NAMES = ("A", "B", "C", "D")
LAYER_TYPES = {
    "A": ("4P",),
    "B": ("23P",),
    "C": ("5P-ET", "5P-IT", "5P-NP"),
    "D": ("6P-CT", "6P-IT", "6P-U", "WM-P"),
}
TYPE_TO_LAYER = {t: layer for layer, types in LAYER_TYPES.items() for t in types}
COLUMN_LAYER_SIZES = (266, 349, 185, 383)


class ConnectomeError(ValueError):
    pass


class ConnectomeWarning(UserWarning):
    pass


class FormatError(ValueError):
    """Binary container has the wrong magic bytes, version or layout."""


@dataclass(frozen=True)
class CellRecord:
    cell_id: int
    broad_type: str
    cell_type: str
    position: Tuple[float, float, float]
    source: str


@dataclass(frozen=True)
class SynapseEdge:
    pre_id: int
    post_id: int
    syn_count: int
    total_size: float


@dataclass
class LayerPartition:
    order: Tuple[str, ...]
    neuron_ids: Dict[str, List[int]]
    cell_types: Dict[str, Tuple[str, ...]] = field(default_factory=lambda: dict(LAYER_TYPES))

    @property
    def sizes(self) -> Tuple[int, ...]:
        return tuple(len(self.neuron_ids[name]) for name in self.order)


@dataclass
class ConnectivityMasks:
    layer_sizes: Tuple[int, ...]
    inter: List[np.ndarray]
    intra: List[np.ndarray]
    inhibitory: List[np.ndarray]

    def digest(self) -> str:
        h = hashlib.sha256()
        for m in self.inter + self.intra:
            h.update(struct.pack("<II", *m.shape))
            h.update(np.packbits(m.astype(bool)).tobytes())
        for counts in self.inhibitory:
            h.update(np.asarray(counts, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    def named_masks(self) -> Dict[str, np.ndarray]:
        out = {}
        for k, m in enumerate(self.inter, start=1):
            out[f"inter_{LAYER_NAMES[k - 1]}{LAYER_NAMES[k]}"] = m
        for k, m in enumerate(self.intra):
            out[f"intra_{LAYER_NAMES[k]}"] = m
        return out

    @classmethod
    def dense(cls, layer_sizes: Sequence[int], inhibitory: Optional[Sequence[np.ndarray]] = None) -> "ConnectivityMasks":
        """All-ones masks for the given widths (no biological constraint)."""
        sizes = tuple(int(n) for n in layer_sizes)
        inter = [np.ones((sizes[k], sizes[k - 1]), dtype=np.uint8) for k in range(1, len(sizes))]
        intra = [np.ones((n, n), dtype=np.uint8) for n in sizes]
        inhib = list(inhibitory) if inhibitory is not None else [np.zeros(n, dtype=np.int64) for n in sizes]
        return cls(sizes, inter, intra, inhib)


@dataclass
class ConnectomePackage:
    cells: List[CellRecord]
    partition: LayerPartition
    count: np.ndarray
    size: np.ndarray
    index: Dict[int, int]
    masks: ConnectivityMasks


# -- loading -----------------------------------------------------------------

def _read_rows(path, required: Sequence[str], what: str):
    text = Path(path).read_text()
    if not text.strip():
        warnings.warn(f"{what} file {path} is empty", ConnectomeWarning, stacklevel=3)
        return []
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in required if c not in (reader.fieldnames or [])]
    if missing:
        raise ConnectomeError(f"{path}: missing column(s) {', '.join(missing)}")
    # header is line 1
    return [(line, row) for line, row in enumerate(reader, start=2)]


def normalize_broad_type(value: str) -> Optional[str]:
    return BROAD_TYPE_ALIASES.get(value.strip().lower())


def load_cells(path) -> List[CellRecord]:
    """Parse ``cells.csv``; every malformed row is reported with its line number."""
    cells, errors, seen = [], [], set()
    for line, row in _read_rows(path, CELL_COLUMNS, "cells"):
        try:
            cell_id = int(row["cell_id"])
            broad = normalize_broad_type(row["broad_type"])
            if broad is None:
                raise ValueError(f"unknown broad_type {row['broad_type']!r}")
            ctype = row["cell_type"].strip()
            expected = CELL_TYPE_BROAD.get(ctype)
            if expected is not None and expected != broad:
                raise ValueError(f"cell_type {ctype} is {expected} but broad_type says {broad}")
            pos = (float(row["x_um"]), float(row["y_um"]), float(row["z_um"]))
        except (TypeError, ValueError) as exc:
            errors.append(f"line {line}: {exc}")
            continue
        if cell_id in seen:
            errors.append(f"line {line}: duplicate cell_id {cell_id}")
            continue
        seen.add(cell_id)
        cells.append(CellRecord(cell_id, broad, ctype, pos, row["cell_type_source"].strip()))
    if errors:
        raise ConnectomeError(f"{path}: {len(errors)} malformed row(s)\n" + "\n".join(errors))
    return cells


def load_synapses(path) -> List[SynapseEdge]:
    edges, errors = [], []
    for line, row in _read_rows(path, SYNAPSE_COLUMNS, "synapses"):
        try:
            edge = SynapseEdge(int(row["pre_id"]), int(row["post_id"]), int(row["syn_count"]),
                               float(row["total_size_um3"]))
            if edge.syn_count < 1:
                raise ValueError(f"syn_count must be >= 1, got {edge.syn_count}")
            if not edge.total_size > 0:
                raise ValueError(f"total_size_um3 must be > 0, got {edge.total_size}")
        except (TypeError, ValueError) as exc:
            errors.append(f"line {line}: {exc}")
            continue
        edges.append(edge)
    if errors:
        raise ConnectomeError(f"{path}: {len(errors)} malformed row(s)\n" + "\n".join(errors))
    return edges


def select_column(cells: Iterable[CellRecord], source_tag: str = COLUMN_SOURCE) -> List[CellRecord]:
    kept = [c for c in cells if c.source == source_tag]
    if not kept:
        raise ConnectomeError(f"no cells with cell_type_source {source_tag!r}; is this the right export?")
    return kept


def partition_layers(cells: Iterable[CellRecord]) -> LayerPartition:
    """Assign excitatory cells to layers A-D; neurons ordered by ascending id."""
    layers: Dict[str, List[int]] = {name: [] for name in LAYER_NAMES}
    for c in cells:
        if c.broad_type != "excitatory":
            continue
        layer = TYPE_TO_LAYER.get(c.cell_type)
        if layer is None:
            raise ConnectomeError(f"cell {c.cell_id}: excitatory cell_type {c.cell_type!r} has no layer assignment")
        layers[layer].append(c.cell_id)
    for name in LAYER_NAMES:
        layers[name].sort()
        if not layers[name]:
            warnings.warn(f"layer {name} is empty", ConnectomeWarning, stacklevel=2)
    return LayerPartition(LAYER_NAMES, layers)


def build_adjacency(edges: Iterable[SynapseEdge], id_index: Dict[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Dense (post, pre) synapse-count and synapse-size matrices; duplicate pairs are summed."""
    n = len(id_index)
    count = np.zeros((n, n), dtype=np.int64)
    size = np.zeros((n, n), dtype=np.float64)
    for e in edges:
        for cid in (e.pre_id, e.post_id):
            if cid not in id_index:
                raise ConnectomeError(f"synapse references unknown cell id {cid}")
        i, j = id_index[e.post_id], id_index[e.pre_id]
        count[i, j] += e.syn_count
        size[i, j] += e.total_size
    return count, size


def derive_masks(count: np.ndarray, id_index: Dict[int, int], partition: LayerPartition,
                 cells: Sequence[CellRecord], inhibitory_multiplicity: bool = False) -> ConnectivityMasks:
    """Binary masks from synapse counts, plus incoming-inhibition counts.

    ``inhibitory_multiplicity`` switches the inhibition count from distinct
    inhibitory partners to total inhibitory synapses. Skip-layer pathways
    (e.g. A->C) are not represented.
    """
    rows = [np.array([id_index[c] for c in partition.neuron_ids[name]], dtype=np.int64) for name in partition.order]
    inhib_cols = np.array(sorted(id_index[c.cell_id] for c in cells if c.broad_type == "inhibitory"), dtype=np.int64)

    inter = [(count[np.ix_(rows[k], rows[k - 1])] > 0).astype(np.uint8) for k in range(1, len(rows))]
    intra = []
    for r in rows:
        m = (count[np.ix_(r, r)] > 0).astype(np.uint8)
        np.fill_diagonal(m, 0)
        intra.append(m)
    inhibitory = []
    for r in rows:
        block = count[np.ix_(r, inhib_cols)]
        inhibitory.append(block.sum(axis=1) if inhibitory_multiplicity else (block > 0).sum(axis=1))
    return ConnectivityMasks(partition.sizes, inter, intra, [np.asarray(v, dtype=np.int64) for v in inhibitory])


def load_connectome(cells_path, synapses_path, source_tag: str = COLUMN_SOURCE,
                    inhibitory_multiplicity: bool = False) -> ConnectomePackage:
    cells = select_column(load_cells(cells_path), source_tag)
    partition = partition_layers(cells)
    index = {c.cell_id: i for i, c in enumerate(sorted(cells, key=lambda c: c.cell_id))}
    count, size = build_adjacency(load_synapses(synapses_path), index)
    masks = derive_masks(count, index, partition, cells, inhibitory_multiplicity)
    return ConnectomePackage(cells, partition, count, size, index, masks)


# -- synthetic fixtures ------------------------------------------------------

_LAYER_CYCLE = {"A": ("4P",), "B": ("23P",), "C": ("5P-IT", "5P-ET", "5P-NP"), "D": ("6P-IT", "6P-CT", "6P-U", "WM-P")}


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def generate_synthetic_connectome(layer_sizes: Sequence[int], density: float, inhib_count: int, rng,
                                  out_dir, n_offcolumn: int = 0, n_nonneuronal: int = 0,
                                  cell_types: Optional[Dict[str, Sequence[str]]] = None) -> ConnectivityMasks:
    """Write ``cells.csv``/``synapses.csv`` with i.i.d. Bernoulli(density) wiring.

    Returns the ground-truth masks in ascending-id order. File rows are
    shuffled and some edges are split across two rows so that readers must
    sort and aggregate. ``cell_types`` optionally fixes the per-layer list of
    cell types (one entry per neuron).
    """
    if not 0 < density <= 1:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gen = rng.generator if hasattr(rng, "generator") else rng
    sizes = [int(n) for n in layer_sizes]
    n_total = sum(sizes) + inhib_count + n_offcolumn + n_nonneuronal
    ids = np.sort(gen.choice(np.arange(10**14, 10**14 + 50 * n_total + 1000), size=n_total, replace=False))
    ids = gen.permutation(ids)

    cells, cursor = [], 0
    layer_ids: List[np.ndarray] = []
    for name, n in zip(LAYER_NAMES, sizes):
        chunk = np.sort(ids[cursor:cursor + n])
        cursor += n
        layer_ids.append(chunk)
        types = list(cell_types[name]) if cell_types else [_LAYER_CYCLE[name][i % len(_LAYER_CYCLE[name])] for i in range(n)]
        for cid, ctype in zip(chunk, gen.permutation(types)):
            cells.append((int(cid), "excitatory", ctype))
    inhib_ids = np.sort(ids[cursor:cursor + inhib_count])
    cursor += inhib_count
    inh_types = list(cell_types["inhibitory"]) if cell_types and "inhibitory" in cell_types else \
        [INHIBITORY_TYPES[i % 4] for i in range(inhib_count)]
    for cid, ctype in zip(inhib_ids, inh_types):
        cells.append((int(cid), "inhibitory", ctype))
    for cid in ids[cursor:cursor + n_nonneuronal]:
        cells.append((int(cid), "nonneuronal", "astrocyte"))
    cursor += n_nonneuronal
    offcolumn = ids[cursor:cursor + n_offcolumn]

    def bern(shape):
        return (gen.random(shape) < density).astype(np.uint8)

    inter = [bern((sizes[k], sizes[k - 1])) for k in range(1, 4)]
    intra = []
    for n in sizes:
        m = bern((n, n))
        np.fill_diagonal(m, 0)
        intra.append(m)
    inhib_adj = [bern((n, inhib_count)) for n in sizes]

    edges = []

    def emit(post_ids, pre_ids, mask):
        for i, j in zip(*np.nonzero(mask)):
            edges.append((int(pre_ids[j]), int(post_ids[i])))

    for k in range(1, 4):
        emit(layer_ids[k], layer_ids[k - 1], inter[k - 1])
    for k in range(4):
        emit(layer_ids[k], layer_ids[k], intra[k])
        emit(layer_ids[k], inhib_ids, inhib_adj[k])
    # skip-layer and inhibitory-target edges exist in tissue but carry no mask entry
    if sizes[0] and sizes[2]:
        emit(layer_ids[2], layer_ids[0], bern((sizes[2], sizes[0])))
    if inhib_count and sizes[1]:
        emit(inhib_ids, layer_ids[1], bern((inhib_count, sizes[1])))

    rows = []
    for pre, post in edges:
        count = int(gen.integers(1, 6))
        sz = float(np.round(gen.uniform(0.05, 3.0), 6))
        if count > 1 and gen.random() < 0.25:
            first = int(gen.integers(1, count))
            rows.append((pre, post, first, round(sz / 2, 6)))
            rows.append((pre, post, count - first, round(sz / 2, 6)))
        else:
            rows.append((pre, post, count, sz))
    rows = [rows[i] for i in gen.permutation(len(rows))]

    cell_rows = []
    for cid, broad, ctype in cells:
        x, y, z = gen.uniform(0, 100, 3)
        cell_rows.append((cid, broad, ctype, f"{x:.2f}", f"{y:.2f}", f"{z:.2f}", COLUMN_SOURCE))
    for cid in offcolumn:
        cell_rows.append((int(cid), "excitatory", "23P", "0.00", "0.00", "0.00", "aibs_metamodel_celltypes_v661"))
    cell_rows = [cell_rows[i] for i in gen.permutation(len(cell_rows))]
    _write_csv(out_dir / "cells.csv", CELL_COLUMNS, cell_rows)
    _write_csv(out_dir / "synapses.csv", SYNAPSE_COLUMNS, rows)

    inhibitory = [m.sum(axis=1).astype(np.int64) for m in inhib_adj]
    return ConnectivityMasks(tuple(sizes), inter, intra, inhibitory)


def census_shaped_connectome(rng, out_dir, density: float = 0.05) -> ConnectivityMasks:
    """Synthetic export whose cell-type census matches the column's Table-1 counts."""
    cell_types = {name: [t for t in types for _ in range(CELL_TYPE_COUNTS[t])] for name, types in LAYER_TYPES.items()}
    cell_types["inhibitory"] = [t for t in INHIBITORY_TYPES for _ in range(CELL_TYPE_COUNTS[t])]
    sizes = [len(cell_types[name]) for name in LAYER_NAMES]
    return generate_synthetic_connectome(sizes, density, len(cell_types["inhibitory"]), rng, out_dir,
                                         n_offcolumn=40, n_nonneuronal=25, cell_types=cell_types)


# -- reporting and export ----------------------------------------------------

def mask_report(masks: ConnectivityMasks) -> dict:
    report = {"layer_sizes": list(masks.layer_sizes), "density": {}, "layers": {}}
    for name, m in masks.named_masks().items():
        if name.startswith("intra_"):
            n = m.shape[0]
            possible = n * (n - 1)
        else:
            possible = m.size
        density = float(m.sum() / possible) if possible else 0.0
        report["density"][name] = density
        if m.size and not m.any():
            warnings.warn(f"mask {name} is empty (layer disconnected)", ConnectomeWarning, stacklevel=2)
    for name, counts in zip(LAYER_NAMES, masks.inhibitory):
        counts = np.asarray(counts)
        report["layers"][name] = {
            "size": int(counts.size),
            "inhibitory_max": int(counts.max()) if counts.size else 0,
            "inhibitory_mean": float(counts.mean()) if counts.size else 0.0,
            "inhibitory_histogram": np.bincount(counts).tolist() if counts.size else [],
        }
    return report


MASK_MAGIC = b"BNIC"
MASK_VERSION = 1


def save_masks(masks: ConnectivityMasks, path) -> None:
    """Bit-packed binary container: magic, u16 version, then one record per mask."""
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC + struct.pack("<H", MASK_VERSION))
        for name, m in masks.named_masks().items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<II", *m.shape))
            fh.write(np.packbits(m.astype(bool).reshape(-1)).tobytes())


def load_masks(path) -> Dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MASK_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {blob[:4]!r}, expected {MASK_MAGIC!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != MASK_VERSION:
        raise FormatError(f"{path}: unsupported mask container version {version}")
    pos, out = 6, {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            nbytes = (rows * cols + 7) // 8
            if pos + nbytes > len(blob):
                raise FormatError(f"{path}: truncated payload for mask {name}")
            bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=pos))
            out[name] = bits[:rows * cols].reshape(rows, cols)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated container ({exc})") from exc
    return out


def save_masks_csv(masks: ConnectivityMasks, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, m in masks.named_masks().items():
        p = out_dir / f"{name}.csv"
        np.savetxt(p, m, fmt="%d", delimiter=",")
        written.append(p)
    for name, counts in zip(LAYER_NAMES, masks.inhibitory):
        p = out_dir / f"inhibitory_{name}.csv"
        np.savetxt(p, np.asarray(counts)[None, :], fmt="%d", delimiter=",")
        written.append(p)
    return written


def save_package(masks: ConnectivityMasks, path) -> None:
    """Everything the model needs (masks and inhibition counts) in one npz."""
    arrays = {f"mask_{k}": v for k, v in masks.named_masks().items()}
    arrays.update({f"inhibitory_{n}": np.asarray(v) for n, v in zip(LAYER_NAMES, masks.inhibitory)})
    arrays["layer_sizes"] = np.asarray(masks.layer_sizes)
    np.savez_compressed(path, **arrays)


def load_package(path) -> ConnectivityMasks:
    with np.load(path) as z:
        sizes = tuple(int(n) for n in z["layer_sizes"])
        inter = [z[f"mask_inter_{LAYER_NAMES[k - 1]}{LAYER_NAMES[k]}"] for k in range(1, len(sizes))]
        intra = [z[f"mask_intra_{n}"] for n in LAYER_NAMES[:len(sizes)]]
        inhib = [z[f"inhibitory_{n}"].astype(np.int64) for n in LAYER_NAMES[:len(sizes)]]
    return ConnectivityMasks(sizes, inter, intra, inhib)
