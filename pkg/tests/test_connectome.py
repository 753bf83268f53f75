import csv
import warnings

import numpy as np
import pytest

from bionic import connectome as cx
from bionic.core import RngStream


def write_cells(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cx.CELL_COLUMNS)
        w.writerows(rows)


def write_synapses(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cx.SYNAPSE_COLUMNS)
        w.writerows(rows)


def cell_row(cid, ctype, broad=None, source=cx.COLUMN_SOURCE):
    broad = broad or cx.CELL_TYPE_BROAD[ctype]
    return (cid, broad, ctype, 1.0, 2.0, 3.0, source)


@pytest.fixture
def table1_cells(tmp_path):
    path = tmp_path / "cells.csv"
    write_cells(path, [cell_row(100 + i, t) for i, t in enumerate(cx.CELL_TYPE_COUNTS)])
    return path


def test_load_cells_table1_fixture(table1_cells):
    cells = cx.load_cells(table1_cells)
    assert len(cells) == 13
    excitatory_types = {c.cell_type for c in cells if c.broad_type == "excitatory"}
    assert len(excitatory_types) == 9
    assert {c.cell_type for c in cells if c.broad_type == "inhibitory"} == {"BC", "BPC", "MC", "NGC"}


def test_load_cells_empty_file_warns(tmp_path):
    path = tmp_path / "cells.csv"
    path.write_text("")
    with pytest.warns(cx.ConnectomeWarning, match="empty"):
        assert cx.load_cells(path) == []


def test_load_cells_unknown_broad_type_names_row(tmp_path):
    path = tmp_path / "cells.csv"
    write_cells(path, [cell_row(1, "23P"), (2, "glia", "astro", 0, 0, 0, cx.COLUMN_SOURCE)])
    with pytest.raises(cx.ConnectomeError, match="line 3: unknown broad_type 'glia'"):
        cx.load_cells(path)


def test_load_cells_rejects_duplicates_missing_columns_and_inconsistent_types(tmp_path):
    dup = tmp_path / "dup.csv"
    write_cells(dup, [cell_row(1, "23P"), cell_row(1, "4P")])
    with pytest.raises(cx.ConnectomeError, match="duplicate cell_id 1"):
        cx.load_cells(dup)
    missing = tmp_path / "missing.csv"
    missing.write_text("cell_id,broad_type\n1,excitatory\n")
    with pytest.raises(cx.ConnectomeError, match="missing column"):
        cx.load_cells(missing)
    bad = tmp_path / "bad.csv"
    write_cells(bad, [cell_row(1, "BC", broad="excitatory")])
    with pytest.raises(cx.ConnectomeError, match="BC is inhibitory"):
        cx.load_cells(bad)


def test_load_cells_accepts_upstream_broad_type_spelling(tmp_path):
    path = tmp_path / "cells.csv"
    write_cells(path, [cell_row(1, "23P", broad="excitatory_neuron"), cell_row(2, "BC", broad="inhibitory_neuron")])
    assert [c.broad_type for c in cx.load_cells(path)] == ["excitatory", "inhibitory"]


def test_select_column(tmp_path):
    path = tmp_path / "cells.csv"
    write_cells(path, [cell_row(1, "23P"), cell_row(2, "23P", source="other_source"), cell_row(3, "4P")])
    cells = cx.load_cells(path)
    assert [c.cell_id for c in cx.select_column(cells)] == [1, 3]
    column_only = cx.select_column(cells)
    assert cx.select_column(column_only) == column_only
    with pytest.raises(cx.ConnectomeError, match="no cells"):
        cx.select_column(cells, "nonexistent")


def test_partition_layer_assignment_and_order(tmp_path):
    path = tmp_path / "cells.csv"
    write_cells(path, [cell_row(9, "5P-IT"), cell_row(5, "4P"), cell_row(3, "4P"), cell_row(7, "BC"),
                       cell_row(8, "6P-U"), cell_row(4, "23P"), cell_row(6, "WM-P")])
    part = cx.partition_layers(cx.load_cells(path))
    assert part.neuron_ids == {"A": [3, 5], "B": [4], "C": [9], "D": [6, 8]}


def test_partition_only_23p_warns():
    cells = [cx.CellRecord(i, "excitatory", "23P", (0, 0, 0), cx.COLUMN_SOURCE) for i in range(3)]
    with pytest.warns(cx.ConnectomeWarning):
        part = cx.partition_layers(cells)
    assert part.sizes == (0, 3, 0, 0)


def test_partition_rejects_unmapped_excitatory_type():
    cells = [cx.CellRecord(1, "excitatory", "3P-X", (0, 0, 0), cx.COLUMN_SOURCE)]
    with pytest.raises(cx.ConnectomeError, match="3P-X"):
        cx.partition_layers(cells)


def test_build_adjacency_sums_duplicate_rows():
    edges = [cx.SynapseEdge(1, 2, 2, 0.5), cx.SynapseEdge(1, 2, 3, 0.25)]
    count, size = cx.build_adjacency(edges, {1: 0, 2: 1})
    assert count[1, 0] == 5 and size[1, 0] == 0.75
    assert count.sum() == 5


def test_build_adjacency_empty_and_unknown():
    count, size = cx.build_adjacency([], {1: 0, 2: 1})
    assert not count.any() and not size.any()
    with pytest.raises(cx.ConnectomeError, match="unknown cell id 99"):
        cx.build_adjacency([cx.SynapseEdge(99, 1, 1, 1.0)], {1: 0})


def test_single_synapse_gives_single_mask_entry(tmp_path):
    write_cells(tmp_path / "cells.csv", [cell_row(1, "4P"), cell_row(2, "4P"), cell_row(3, "23P"), cell_row(4, "23P")])
    write_synapses(tmp_path / "synapses.csv", [(2, 3, 4, 1.0)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", cx.ConnectomeWarning)
        pkg = cx.load_connectome(tmp_path / "cells.csv", tmp_path / "synapses.csv")
    m1 = pkg.masks.inter[0]
    assert m1.shape == (2, 2) and m1.sum() == 1 and m1[0, 1] == 1
    assert all(not v.any() for v in pkg.masks.inhibitory)


def test_self_edge_keeps_zero_diagonal_and_inhibitory_counts(tmp_path):
    write_cells(tmp_path / "cells.csv", [cell_row(1, "23P"), cell_row(2, "23P"), cell_row(3, "BC"), cell_row(4, "MC")])
    write_synapses(tmp_path / "synapses.csv", [(1, 1, 3, 1.0), (1, 2, 1, 1.0), (3, 2, 7, 1.0), (4, 2, 1, 1.0),
                                               (3, 1, 2, 1.0)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", cx.ConnectomeWarning)
        pkg = cx.load_connectome(tmp_path / "cells.csv", tmp_path / "synapses.csv")
        multi = cx.load_connectome(tmp_path / "cells.csv", tmp_path / "synapses.csv", inhibitory_multiplicity=True)
    intra_b = pkg.masks.intra[1]
    assert intra_b[0, 0] == 0 and intra_b[1, 0] == 1
    np.testing.assert_array_equal(pkg.masks.inhibitory[1], [1, 2])
    np.testing.assert_array_equal(multi.masks.inhibitory[1], [2, 8])


def test_inhibitory_counts_ignore_excitatory_edges(tmp_path):
    rng = RngStream(3, "connectome")
    truth = cx.generate_synthetic_connectome((4, 5, 3, 6), 0.5, 5, rng, tmp_path)
    pkg = cx.load_connectome(tmp_path / "cells.csv", tmp_path / "synapses.csv")
    rows = list(csv.reader(open(tmp_path / "synapses.csv")))
    inhib_ids = {c.cell_id for c in pkg.cells if c.broad_type == "inhibitory"}
    kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) in inhib_ids]
    write_synapses(tmp_path / "synapses.csv", kept[1:])
    reduced = cx.load_connectome(tmp_path / "cells.csv", tmp_path / "synapses.csv")
    for a, b, t in zip(pkg.masks.inhibitory, reduced.masks.inhibitory, truth.inhibitory):
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, t)


def test_synthetic_full_density_is_all_ones(tmp_path):
    truth = cx.generate_synthetic_connectome((4, 5, 3, 6), 1.0, 2, RngStream(0, "connectome"), tmp_path)
    pkg = cx.load_connectome(tmp_path / "cells.csv", tmp_path / "synapses.csv")
    for m in pkg.masks.inter:
        assert m.all()
    for m in pkg.masks.intra:
        np.testing.assert_array_equal(m, 1 - np.eye(m.shape[0], dtype=np.uint8))
    assert pkg.masks.layer_sizes == truth.layer_sizes == (4, 5, 3, 6)


def test_synthetic_density_statistics(tmp_path):
    truth = cx.generate_synthetic_connectome((100, 100, 1, 1), 0.2, 0, RngStream(1, "connectome"), tmp_path)
    assert abs(truth.inter[0].mean() - 0.2) <= 0.02


def test_synthetic_same_seed_same_files(tmp_path):
    for sub in ("a", "b"):
        cx.generate_synthetic_connectome((4, 5, 3, 6), 0.4, 3, RngStream(7, "connectome"), tmp_path / sub,
                                         n_offcolumn=3, n_nonneuronal=2)
    for name in ("cells.csv", "synapses.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_round_trip_and_row_order_invariance(tmp_path):
    truth = cx.generate_synthetic_connectome((6, 7, 5, 8), 0.3, 4, RngStream(11, "connectome"), tmp_path,
                                             n_offcolumn=5, n_nonneuronal=3)
    pkg = cx.load_connectome(tmp_path / "cells.csv", tmp_path / "synapses.csv")
    for got, want in zip(pkg.masks.inter + pkg.masks.intra, truth.inter + truth.intra):
        np.testing.assert_array_equal(got, want)
    # reverse both files' row order
    for name in ("cells.csv", "synapses.csv"):
        lines = (tmp_path / name).read_text().splitlines()
        (tmp_path / name).write_text("\n".join([lines[0]] + lines[1:][::-1]) + "\n")
    again = cx.load_connectome(tmp_path / "cells.csv", tmp_path / "synapses.csv")
    assert again.masks.digest() == pkg.masks.digest()


def test_size_matrix_cooccurs_with_counts(tmp_path):
    cx.generate_synthetic_connectome((4, 5, 3, 6), 0.5, 3, RngStream(2, "connectome"), tmp_path)
    pkg = cx.load_connectome(tmp_path / "cells.csv", tmp_path / "synapses.csv")
    np.testing.assert_array_equal(pkg.count > 0, pkg.size > 0)


def test_mask_report(tmp_path):
    dense = cx.ConnectivityMasks.dense((3, 4, 2, 5))
    rep = cx.mask_report(dense)
    assert rep["density"]["inter_AB"] == 1.0
    empty = cx.ConnectivityMasks((2, 2, 2, 2), [np.zeros((2, 2), np.uint8)] * 3,
                                 [np.zeros((2, 2), np.uint8)] * 4, [np.array([0, 3])] * 4)
    with pytest.warns(cx.ConnectomeWarning, match="disconnected"):
        rep = cx.mask_report(empty)
    assert rep["density"]["inter_AB"] == 0.0
    assert rep["layers"]["A"]["inhibitory_histogram"] == [1, 0, 0, 1]


def test_mask_container_round_trip_and_bad_magic(tmp_path):
    truth = cx.generate_synthetic_connectome((5, 9, 3, 7), 0.3, 2, RngStream(5, "connectome"), tmp_path)
    cx.save_masks(truth, tmp_path / "masks.bnic")
    loaded = cx.load_masks(tmp_path / "masks.bnic")
    for name, m in truth.named_masks().items():
        np.testing.assert_array_equal(loaded[name], m)
    blob = (tmp_path / "masks.bnic").read_bytes()
    assert blob[:4] == b"BNIC"
    (tmp_path / "bad.bnic").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(cx.FormatError, match="magic"):
        cx.load_masks(tmp_path / "bad.bnic")
    (tmp_path / "short.bnic").write_bytes(blob[:-3])
    with pytest.raises(cx.FormatError, match="truncated"):
        cx.load_masks(tmp_path / "short.bnic")


def test_package_and_csv_export(tmp_path):
    truth = cx.generate_synthetic_connectome((3, 4, 2, 5), 0.5, 2, RngStream(6, "connectome"), tmp_path)
    cx.save_package(truth, tmp_path / "pkg.npz")
    back = cx.load_package(tmp_path / "pkg.npz")
    assert back.digest() == truth.digest()
    files = cx.save_masks_csv(truth, tmp_path / "csv")
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "csv" / "inter_AB.csv", delimiter=",", ndmin=2),
                                  truth.inter[0])
    assert len(files) == 11


def test_census_shaped_export_sizes(tmp_path):
    cx.census_shaped_connectome(RngStream(0, "connectome"), tmp_path)
    cells = cx.select_column(cx.load_cells(tmp_path / "cells.csv"))
    census = {}
    for c in cells:
        census[c.cell_type] = census.get(c.cell_type, 0) + 1
    assert {t: census[t] for t in cx.CELL_TYPE_COUNTS} == cx.CELL_TYPE_COUNTS
    part = cx.partition_layers(cells)
    assert part.sizes == cx.COLUMN_LAYER_SIZES
