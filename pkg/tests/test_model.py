import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualgraph import model as M
from dualgraph.errors import DomainError, NonFiniteError
from oracles import gat_manual


def T(a):
    return torch.tensor(a, dtype=torch.float64)


def toy(n=8, genes=6, d=5, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, genes))
    g = rng.random((n, d))
    adj = np.eye(n, dtype=bool)
    for i in range(n):
        adj[i, (i + 1) % n] = adj[(i + 1) % n, i] = True
    return M.ModelInputs.build(x, g, adj)


def cfg(**kw):
    base = dict(n_clusters=2, encoder_dims=(4, 3, 2), pretrain_epochs=5, train_epochs=20, dtype="float64",
                silhouette_eval_interval=5, target_refresh_interval=5)
    base.update(kw)
    return M.ModelConfig(**base)


# ------------------------------------------------------------------ config


def test_config_validation():
    with pytest.raises(DomainError):
        M.ModelConfig(lam=1.5)
    with pytest.raises(DomainError):
        M.ModelConfig(n_clusters=1)
    with pytest.raises(DomainError):
        M.ModelConfig(ablation="no_attention")
    with pytest.raises(DomainError):
        M.ModelConfig(encoder_dims=(4, 0))
    assert M.ModelConfig(ablation="no_genemap", lam=0.3).effective_lam == 1.0
    assert M.ModelConfig().bottleneck == 64


def test_inputs_need_self_loops():
    with pytest.raises(DomainError):
        M.ModelInputs.build(np.ones((2, 3)), np.ones((2, 2)), np.array([[False, True], [True, True]]))
    with pytest.raises(DomainError):
        M.ModelInputs.build(np.ones((2, 3)), np.ones((3, 2)), np.eye(2, dtype=bool))


# ------------------------------------------------------------------ forward


def test_parameter_layout_per_ablation():
    full = M.init_params(6, 5, cfg())
    assert "cell_enc.2.attn" in full and "gene_dec.2.w" in full
    assert full["cell_dec.0.w"].shape == (4, 3)  # fused 2 + 2 -> 3
    no_gat = M.init_params(6, 5, cfg(ablation="no_gat"))
    assert "cell_enc.0.b" in no_gat and not any(n.endswith(".attn") for n in no_gat)
    no_gm = M.init_params(6, 5, cfg(ablation="no_genemap"))
    assert not any(n.startswith("gene_") for n in no_gm)
    assert no_gm["cell_dec.0.w"].shape == (2, 3)


def test_encoder_shapes_and_zero_propagation():
    data = toy()
    params = M.init_params(6, 5, cfg())
    out = M.forward(params, data)
    assert out["z_cell"].shape == (8, 2) and out["z_gene"].shape == (8, 2)
    assert out["z_f"].shape == (8, 4) and out["x_rec"].shape == (8, 6) and out["g_rec"].shape == (8, 5)
    z = M.ModelInputs(torch.zeros(8, 6, dtype=torch.float64), torch.zeros(8, 5, dtype=torch.float64), data.adj)
    assert torch.all(M.encode_cells(z.x, z.adj, params) == 0)
    assert torch.all(M.encode_genes(z.g, params) == 0)
    assert torch.all(M.forward(params, z)["z_f"] == 0)
    # decoders have zero biases at init, so zero code decodes to zero
    assert torch.all(M.decode_cells(torch.zeros(3, 4, dtype=torch.float64), params) == 0)


def test_two_cell_manual_cell_encoder():
    x = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    adj = [[True, True], [True, True]]
    params = {
        "cell_enc.0.w": T([[1.0, 0.5], [-0.5, 1.0], [0.2, 0.2]]),
        "cell_enc.0.attn": T([0.1, -0.2, 0.3, 0.4]),
        "cell_enc.1.w": T([[0.7], [-0.3]]),
        "cell_enc.1.attn": T([0.5, -0.5]),
    }
    got = M.encode_cells(T(x), torch.tensor(adj), params)
    h = gat_manual(x, adj, params["cell_enc.0.w"].tolist(), params["cell_enc.0.attn"].tolist())
    h = gat_manual(h, adj, params["cell_enc.1.w"].tolist(), params["cell_enc.1.attn"].tolist())
    assert np.allclose(got.numpy(), h, atol=1e-12)


def test_two_cell_manual_gene_encoder_and_decoder():
    g = [[1.0, 2.0], [0.0, -1.0]]
    params = {
        "gene_enc.0.w": T([[1.0, -1.0], [0.5, 0.5]]),
        "gene_enc.0.b": T([0.1, -0.1]),
        "cell_dec.0.w": T([[2.0], [1.0]]),
        "cell_dec.0.b": T([0.0]),
        "cell_dec.1.w": T([[1.0, -1.0]]),
        "cell_dec.1.b": T([0.5, 0.5]),
    }
    z = M.encode_genes(T(g), params)
    manual = [[max(0.0, 1.0 + 1.0 + 0.1), max(0.0, -1.0 + 1.0 - 0.1)], [max(0.0, -0.5 + 0.1), max(0.0, -0.5 - 0.1)]]
    assert np.allclose(z.numpy(), manual)
    dec = M.decode_cells(T([[1.0, -3.0], [0.5, 0.5]]), params)
    # layer 0: relu(2*1 - 3) = 0 and relu(1 + 0.5) = 1.5; layer 1 (identity): h*[1,-1] + 0.5
    assert np.allclose(dec.numpy(), [[0.5, 0.5], [2.0, -1.0]])


def test_fuse():
    a, b = T([[1.0, 0.0]]), T([[2.0, 3.0]])
    assert M.fuse(a, b).tolist() == [[1.0, 0.0, 2.0, 3.0]]
    assert M.fuse(T([[-2.0, 1.0]]), b).tolist() == [[0.0, 1.0, 2.0, 3.0]]
    assert M.fuse(T([[-2.0, 1.0]]), None).tolist() == [[0.0, 1.0]]
    with pytest.raises(DomainError):
        M.fuse(T([[1.0]]), T([[1.0], [2.0]]))


# ------------------------------------------------------------------ losses


def test_reconstruction_losses():
    x = T([[1.0, 2.0], [3.0, -1.0]])
    assert M.loss_cell(x, x).item() == pytest.approx(0.0, abs=1e-15)
    assert M.loss_cell(x, -x).item() == pytest.approx(2.0, abs=1e-15)
    assert M.loss_cell(x, T([[-2.0, 1.0], [1.0, 3.0]])).item() == pytest.approx(1.0, abs=1e-15)
    # a zero row counts as similarity 0
    assert M.loss_cell(T([[0.0, 0.0], [1.0, 1.0]]), T([[1.0, 1.0], [1.0, 1.0]])).item() == pytest.approx(0.5)
    assert M.loss_gene(T([[1.0, 2.0]]), T([[2.0, 4.0]])).item() == 1.5
    g, h = T([[1.0, -2.0], [0.5, 3.0]]), T([[0.0, 1.0], [2.0, 2.0]])
    assert M.loss_gene(3 * g, 3 * h).item() == pytest.approx(3 * M.loss_gene(g, h).item())


def test_ssl_weighting():
    assert M.loss_ssl(0.2, 0.4, 0.5) == pytest.approx(0.6)
    assert M.loss_ssl(0.2, 0.4, 1.0) == 0.4
    assert M.loss_ssl(0.2, 0.4, 0.0) == 0.8


def test_soft_assignment_examples():
    q = M.soft_assign(T([[0.0, 0.0]]), T([[0.0, 0.0], [1.0, 0.0]]))
    assert q[0].tolist() == pytest.approx([2 / 3, 1 / 3], abs=1e-15)
    q = M.soft_assign(T([[0.0, 0.0]]), T([[1.0, 0.0], [-1.0, 0.0]]))
    assert q[0].tolist() == [0.5, 0.5]
    c = T([[1.0, 0.0], [-0.5, math.sqrt(3) / 2], [-0.5, -math.sqrt(3) / 2]])
    assert M.soft_assign(T([[0.0, 0.0]]), c)[0].tolist() == pytest.approx([1 / 3] * 3, abs=1e-15)


def test_target_distribution_examples():
    p = M.target_distribution(T([[0.8, 0.2], [0.6, 0.4]]))
    assert p.numpy() == pytest.approx(np.array([[0.8727, 0.1273], [0.4909, 0.5091]]), abs=1e-4)
    u = torch.full((5, 4), 0.25, dtype=torch.float64)
    assert torch.equal(M.target_distribution(u), u)
    onehot = T([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    assert torch.equal(M.target_distribution(onehot), onehot)


def test_target_sharpens_with_equal_column_mass():
    q = T([[0.7, 0.3], [0.3, 0.7], [0.55, 0.45], [0.45, 0.55]])
    p = M.target_distribution(q)
    assert torch.all(p.max(dim=1).values >= q.max(dim=1).values)


def test_kl_examples():
    assert M.kl_loss(T([[1.0, 0.0]]), T([[0.5, 0.5]])).item() == pytest.approx(math.log(2), abs=1e-15)
    q = T([[0.2, 0.8], [0.6, 0.4]])
    assert M.kl_loss(q, q).item() == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(4), size=3)
    q = rng.dirichlet(np.ones(4), size=3)
    assert M.kl_loss(T(p), T(q)).item() >= 0.0


def test_hard_labels_lowest_index_tie():
    assert M.hard_labels(np.array([[0.5, 0.5], [0.2, 0.8], [0.4, 0.4]])).tolist() == [0, 1, 0]


# ------------------------------------------------------------------ training


def test_pretrain_lowers_loss_and_lambda_one_freezes_gene_decoder():
    data = toy(n=12)
    state = M.pretrain(data, cfg(pretrain_epochs=60, lr_pretrain=0.01))
    assert state.losses[-1]["L_ssl"] <= state.losses[0]["L_ssl"]
    c = cfg(pretrain_epochs=20, lr_pretrain=0.01, lam=1.0)
    init = M.init_params(6, 5, c)
    before = {n: p.detach().clone() for n, p in init.items()}
    after = M.pretrain(data, c, params=init).params
    for n in before:
        if n.startswith("gene_dec."):
            assert torch.equal(after[n], before[n]), n
    assert not torch.equal(after["cell_dec.0.w"], before["cell_dec.0.w"])


def test_non_finite_input_aborts_with_epoch():
    data = toy()
    g = data.g.clone()
    g[0, 0] = float("nan")
    with pytest.raises(NonFiniteError, match="epoch 1"):
        M.pretrain(M.ModelInputs(data.x, g, data.adj), cfg())


def test_fit_deterministic_and_rows_normalized():
    data = toy(n=10)
    r1 = M.fit(data, cfg(seed=3))
    r2 = M.fit(data, cfg(seed=3))
    assert np.array_equal(r1.labels, r2.labels)
    assert np.array_equal(r1.z_f, r2.z_f)
    assert np.allclose(r1.q.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(r1.p.sum(axis=1), 1.0, atol=1e-9)
    assert r1.silhouette >= max(s for _, s in r1.evaluations)
    assert np.array_equal(r1.labels, M.hard_labels(r1.q))


@pytest.mark.parametrize("ablation", M.ABLATIONS)
def test_fit_runs_for_every_ablation(ablation):
    r = M.fit(toy(n=10), cfg(ablation=ablation))
    assert r.ablation == ablation
    assert r.z_f.shape == (10, 2 if ablation == "no_genemap" else 4)


def test_patience_plateau_at_third_evaluation(monkeypatch):
    scores = iter([0.1, 0.2, 0.3] + [0.3] * 100)
    monkeypatch.setattr(M, "_safe_silhouette", lambda z, labels: next(scores))
    r = M.fit(toy(), cfg(train_epochs=100, silhouette_eval_interval=1, patience=5))
    assert len(r.evaluations) == 8
    assert r.best_epoch == 2
    assert r.stopped_epoch == 7


def test_small_gains_do_not_reset_patience(monkeypatch):
    scores = iter([0.5 + 1e-4 * i for i in range(100)])
    monkeypatch.setattr(M, "_safe_silhouette", lambda z, labels: next(scores))
    r = M.fit(toy(), cfg(train_epochs=100, silhouette_eval_interval=1, patience=5, min_delta=1e-3))
    # best snapshot still tracks the strict improvements
    assert len(r.evaluations) == 6 and r.best_epoch == 5


def test_single_cluster_scores_minus_one():
    assert M._safe_silhouette(np.zeros((4, 2)), np.zeros(4, dtype=int)) == -1.0
