import csv

import numpy as np
import pytest

from opbn.data import gen_twofactor_synthetic
from opbn.errors import ContractError, DataError
from opbn.evaluation import (evaluate_model, export_embeddings, fit_probe, mask_report,
                             recombine_latents, triplet_pred_error, triplet_pred_error_by_query)
from opbn.model import MaskPosterior, ObjectiveConfig, TripletBatch
from opbn.oracle import OracleConfig, Query, sample_triplets
from opbn.trainer import Trainable, rng_stream


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

def test_logistic_probe_perfectly_separable():
    rng = np.random.default_rng(0)
    z = np.vstack([rng.normal(-4, 0.3, (80, 3)), rng.normal(4, 0.3, (80, 3))])
    y = np.repeat([0.0, 1.0], 80)
    res = fit_probe(z, y, "logistic-classification", np.arange(0, 120), np.arange(120, 160))
    assert res.metric == 0.0


def test_logistic_probe_matches_sklearn_direction():
    # independent oracle: scikit-learn logistic regression on the same split
    sklearn_lm = pytest.importorskip("sklearn.linear_model")
    rng = np.random.default_rng(1)
    z = rng.normal(0, 1, (400, 5))
    w = np.array([2.0, -1.0, 0.5, 0.0, 1.5])
    y = (z @ w + 0.3 * rng.normal(size=400) > 0).astype(float)
    tr, te = np.arange(0, 300), np.arange(300, 400)
    ours = fit_probe(z, y, "logistic-classification", tr, te)
    ref = sklearn_lm.LogisticRegression(C=1e6, max_iter=2000).fit(z[tr], y[tr])
    ref_err = 100.0 * float(np.mean(ref.predict(z[te]) != y[te]))
    assert abs(ours.metric - ref_err) <= 3.0


def test_logistic_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(2)
    z = rng.normal(0, 1, (600, 4))
    y = rng.integers(0, 2, 600).astype(float)  # labels independent of z
    tr, te = np.arange(0, 400), np.arange(400, 600)
    res = fit_probe(z, y, "logistic-classification", tr, te)
    n_te = te.size
    # binomial 3 sigma around 50%
    assert abs(res.metric - 50.0) < 300.0 * np.sqrt(0.25 / n_te)


def test_ridge_probe_exact_linear_targets():
    rng = np.random.default_rng(3)
    z = rng.normal(0, 4.0, (1800, 6))
    y = z @ rng.normal(0, 1, 6) + 0.4
    res = fit_probe(z, y, "ridge-regression", np.arange(0, 1400), np.arange(1400, 1800))
    assert res.metric < 1e-6


def test_ridge_probe_matches_normal_equations():
    rng = np.random.default_rng(4)
    z = rng.normal(0, 2.0, (500, 4))
    y = z @ np.array([1.0, -2.0, 0.3, 0.8]) + 0.1 * rng.normal(size=500)
    tr, te = np.arange(0, 350), np.arange(350, 500)
    ours = fit_probe(z, y, "ridge-regression", tr, te)
    zc, n = z[tr], tr.size
    blk = np.block([[zc.T @ zc + 1e-3 * np.eye(4), zc.T @ np.ones((n, 1))],
                    [np.ones((1, n)) @ zc, np.array([[float(n)]])]])
    sol = np.linalg.solve(blk, np.concatenate([zc.T @ y[tr], [y[tr].sum()]]))
    pred = z[te] @ sol[:4] + sol[4]
    ref_rmsd = float(np.sqrt(np.mean((pred - y[te]) ** 2)))
    assert abs(ours.metric - ref_rmsd) < 1e-6
    np.testing.assert_allclose(ours.weights, sol[:4], atol=1e-6)


def test_probe_rejects_overlapping_split():
    z = np.zeros((10, 2))
    with pytest.raises(ContractError):
        fit_probe(z, np.arange(10.0), "ridge-regression", np.arange(6), np.arange(5, 10))


def test_probe_rejects_single_class():
    rng = np.random.default_rng(5)
    with pytest.raises(DataError):
        fit_probe(rng.normal(size=(20, 2)), np.zeros(20), "logistic-classification",
                  np.arange(10), np.arange(10, 20))


# ---------------------------------------------------------------------------
# triplet prediction
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def oracle_world():
    bundle = gen_twofactor_synthetic(80, 8, np.random.default_rng(6))
    queries = [Query("identity", "identity"), Query("azimuth", "scalar", "azimuth")]
    trips = sample_triplets(bundle.meta, queries, 150, OracleConfig(), rng_stream(0, "oracle"))
    batch = TripletBatch.from_triplets(trips, [q.name for q in queries])
    return bundle, queries, batch


class _FixedEmbeddingModel:
    """Stand-in whose 'embedding' is a fixed per-row vector (not a function
    of pixels): replayed metadata or pure noise."""

    def __init__(self, vals):
        self.variant = "metricl"
        self.embedder = type("E", (), {"embed": lambda _self, x, v=vals: v})()


def test_triplet_error_zero_for_oracle_replay(oracle_world):
    bundle, queries, batch = oracle_world
    # distances from the label column reproduce identity answers exactly;
    # the label coordinate dwarfs any azimuth contribution
    only_id = TripletBatch(*[a[batch.query_idx == 0] for a in
                             (batch.query_idx, batch.i, batch.j, batch.l)])
    vals = np.stack([bundle.meta["label"] * 1e6, bundle.meta["azimuth"]], axis=1)
    err = triplet_pred_error(_FixedEmbeddingModel(vals), bundle, only_id,
                             [q.name for q in queries])
    assert err == 0.0


def test_triplet_error_random_embeddings_near_chance(oracle_world):
    bundle, queries, batch = oracle_world
    vals = np.random.default_rng(123).standard_normal((bundle.n, 4))
    err = triplet_pred_error(_FixedEmbeddingModel(vals), bundle, batch,
                             [q.name for q in queries])
    n = len(batch)
    assert abs(err - 50.0) < 300.0 * np.sqrt(0.25 / n)


def test_triplet_error_by_query_keys(oracle_world):
    bundle, queries, batch = oracle_world
    t = Trainable.build("metricl", bundle.dim, 4, [8], [], seed=7)
    by_q = triplet_pred_error_by_query(t, bundle, batch, [q.name for q in queries])
    assert set(by_q) == {"identity", "azimuth"}
    for v in by_q.values():
        assert 0.0 <= v <= 100.0


def test_triplet_error_empty_corpus_rejected(oracle_world):
    bundle, queries, _ = oracle_world
    t = Trainable.build("metricl", bundle.dim, 4, [8], [], seed=7)
    with pytest.raises(DataError):
        triplet_pred_error(t, bundle, TripletBatch.empty(), [])


def test_triplet_error_repeated_evaluation_identical(oracle_world):
    bundle, queries, batch = oracle_world
    t = Trainable.build("opbn-masked", bundle.dim, 4, [8], [q.name for q in queries], seed=8)
    names = [q.name for q in queries]
    assert triplet_pred_error(t, bundle, batch, names) == triplet_pred_error(t, bundle, batch, names)


# ---------------------------------------------------------------------------
# masks, recombination, export
# ---------------------------------------------------------------------------

def test_mask_report_identical_masks_full_overlap():
    masks = MaskPosterior(["a", "b"], np.tile(np.array([3.0, -3.0, 3.0, -3.0]), (2, 1)),
                          np.full((2, 4), -2.0))
    rep = mask_report(masks)
    assert rep.overlap[0, 1] == 1.0
    assert rep.cosine[0, 1] > 0.99


def test_mask_report_disjoint_active_sets():
    mu = np.array([[4.0, 4.0, -4.0, -4.0], [-4.0, -4.0, 4.0, 4.0]])
    rep = mask_report(MaskPosterior(["a", "b"], mu, np.full((2, 4), -2.0)))
    assert rep.overlap[0, 1] == 0.0
    np.testing.assert_array_equal(rep.active[0], [0, 1])
    np.testing.assert_array_equal(rep.active[1], [2, 3])


def test_mask_report_initialization_all_active():
    rep = mask_report(MaskPosterior.init(["a"], 5))
    np.testing.assert_array_equal(rep.active[0], np.arange(5))  # 0.5 > 0.2
    assert "a" in rep.format_table()


def test_recombine_identity_when_images_equal(oracle_world):
    bundle, queries, _ = oracle_world
    names = [q.name for q in queries]
    t = Trainable.build("opbn-masked", bundle.dim, 4, [8], names, seed=9)
    x = bundle.x[5].astype(np.float64)
    out = recombine_latents(t.model, t.masks, x, x, "identity", "azimuth", t.obj_cfg)
    recon = t.model.decode_mean(t.model.encode(x[None, :]).mean, t.obj_cfg.decoder_family)[0]
    np.testing.assert_allclose(out, recon, rtol=1e-12)


def test_recombine_role_swap_differs(oracle_world):
    bundle, queries, _ = oracle_world
    names = [q.name for q in queries]
    t = Trainable.build("opbn-masked", bundle.dim, 4, [8], names, seed=10)
    # make the masks disjoint so the roles matter
    t.masks.mu[...] = np.array([[4.0, 4.0, -4.0, -4.0], [-4.0, -4.0, 4.0, 4.0]])
    xa = bundle.x[0].astype(np.float64)
    xb = bundle.x[1].astype(np.float64)
    ab = recombine_latents(t.model, t.masks, xa, xb, "identity", "azimuth", t.obj_cfg)
    ba = recombine_latents(t.model, t.masks, xb, xa, "identity", "azimuth", t.obj_cfg)
    assert np.abs(ab - ba).max() > 1e-8


def test_recombine_requires_masks(oracle_world):
    bundle, queries, _ = oracle_world
    t = Trainable.build("opbn", bundle.dim, 4, [8], [], seed=11)
    x = bundle.x[0].astype(np.float64)
    with pytest.raises(ContractError):
        recombine_latents(t.model, None, x, x, "identity", "azimuth", t.obj_cfg)


def test_export_embeddings_columns(tmp_path, oracle_world):
    bundle, queries, _ = oracle_world
    t = Trainable.build("opbn", bundle.dim, 4, [8], [], seed=12)
    z = t.model.encode(bundle.x.astype(np.float64)).mean
    header = export_embeddings(bundle, z, tmp_path / "full.csv")
    assert header[-4:] == ["z0", "z1", "z2", "z3"]
    mask = np.array([0.9, 0.1, 0.5, 0.05])
    header2 = export_embeddings(bundle, z, tmp_path / "masked.csv", mask=mask)
    assert header2[-2:] == ["z0", "z2"]
    with open(tmp_path / "full.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == bundle.n


def test_evaluate_model_report_fields(oracle_world):
    bundle, queries, batch = oracle_world
    names = [q.name for q in queries]
    test_bundle = gen_twofactor_synthetic(40, 8, np.random.default_rng(13), split="test")
    held = TripletBatch.from_triplets(
        sample_triplets(test_bundle.meta, queries, 50, OracleConfig(), rng_stream(1, "oracle")),
        names)
    t = Trainable.build("opbn-masked", bundle.dim, 4, [8], names, seed=14)
    rep = evaluate_model(t, bundle, test_bundle, held, names, setting="identity+azimuth")
    assert rep.classification_error is not None and 0 <= rep.classification_error <= 100
    assert rep.azimuth_rmsd is not None and rep.azimuth_rmsd >= 0
    assert rep.elevation_rmsd is not None
    assert rep.angle_rmsd is None  # two-factor data has no angle column
    assert rep.triplet_error is not None
