import json

import numpy as np
import pytest

from dualgraph.errors import DomainError
from dualgraph.ingest import load_expression, load_labels, load_ppi
from dualgraph.kmeans import kmeans
from dualgraph.metrics import ari
from dualgraph.synthbench import SynthSpec, block_densities, generate, module_of_genes, write


def test_labels_balanced():
    for spec in (SynthSpec(), SynthSpec(n_cells=103, n_clusters=4, seed=2)):
        _, labels, _ = generate(spec)
        counts = np.bincount(labels.labels)
        assert len(counts) == spec.n_clusters
        assert counts.max() - counts.min() <= 1


def test_ppi_blocks_denser_inside():
    spec = SynthSpec(seed=4)
    _, _, net = generate(spec)
    intra, inter = block_densities(net, spec)
    assert intra > inter
    assert intra == pytest.approx(spec.p_intra, abs=0.05)


def test_modules_partition_genes():
    spec = SynthSpec(n_genes=31, n_modules=4, signature_size=5)
    m = module_of_genes(spec)
    assert len(m) == 31 and set(m.tolist()) == {0, 1, 2, 3}


def test_deterministic():
    a = generate(SynthSpec(seed=9))
    b = generate(SynthSpec(seed=9))
    assert np.array_equal(a[0].values, b[0].values)
    assert np.array_equal(a[1].labels, b[1].labels)
    assert a[2].edges == b[2].edges
    assert not np.array_equal(a[0].values, generate(SynthSpec(seed=10))[0].values)


def test_nonnegative_and_signatures_shifted():
    spec = SynthSpec(noise=0.5)
    x, labels, _ = generate(spec)
    assert x.values.min() >= 0
    means = np.array([x.values[labels.labels == c].mean(axis=0) for c in range(spec.n_clusters)])
    # each cluster has exactly signature_size genes near high_mean
    assert ((means > 2.5).sum(axis=1) == spec.signature_size).all()


def test_noiseless_is_trivially_separable():
    spec = SynthSpec(noise=0.0, n_cells=60)
    x, labels, _ = generate(spec)
    for c in range(spec.n_clusters):
        rows = x.values[labels.labels == c]
        assert (rows == rows[0]).all()
    _, pred = kmeans(x.values, spec.n_clusters, seed=0)
    assert ari(labels, pred) == 1.0


def test_overlap_shares_signature_genes():
    spec = SynthSpec(noise=0.0, overlap=0.5, n_cells=40)
    x, labels, _ = generate(spec)
    high = [set(np.flatnonzero(x.values[labels.labels == c][0] > 2).tolist()) for c in range(4)]
    assert any(len(high[a] & high[b]) == 15 for a in range(4) for b in range(4) if a != b)


def test_invalid_specs():
    with pytest.raises(DomainError):
        SynthSpec(n_clusters=7, n_modules=6)
    with pytest.raises(DomainError):
        SynthSpec(signature_size=60)
    with pytest.raises(DomainError):
        SynthSpec(p_intra=1.5)
    with pytest.raises(DomainError):
        SynthSpec(overlap=1.0)


def test_write_round_trip(tmp_path):
    spec = SynthSpec(n_cells=50, seed=1)
    paths = write(spec, tmp_path)
    x, labels, net = generate(spec)
    back = load_expression(paths["expression"])
    assert back.cell_ids == x.cell_ids and back.gene_symbols == x.gene_symbols
    assert np.array_equal(back.values, x.values)
    lab = load_labels(paths["labels"], back.cell_ids)
    assert np.array_equal(lab.labels, labels.labels)
    ppi = load_ppi(paths["ppi"], score_threshold=0)
    assert ppi.edges == net.edges
    assert json.loads(paths["spec"].read_text())["seed"] == 1
