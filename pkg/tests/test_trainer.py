import numpy as np
import pytest

from opbn.data import gen_twofactor_synthetic
from opbn.errors import ContractError, DataError
from opbn.model import ObjectiveConfig, TripletBatch
from opbn.oracle import OracleConfig, Query, sample_triplets
from opbn.trainer import (Trainable, TrainConfig, load_checkpoint, make_minibatch, resume_train,
                          rng_stream, save_checkpoint, train)


def corpus_of(bundle, queries, k, seed=0):
    trips = sample_triplets(bundle.meta, queries, k, OracleConfig(), rng_stream(seed, "oracle"))
    return TripletBatch.from_triplets(trips, [q.name for q in queries])


@pytest.fixture(scope="module")
def small_setup():
    bundle = gen_twofactor_synthetic(60, 8, np.random.default_rng(42))
    queries = [Query("identity", "identity"), Query("azimuth", "scalar", "azimuth")]
    corpus = corpus_of(bundle, queries, 40)
    return bundle, queries, corpus


def test_rng_stream_reproducible_and_independent():
    a = rng_stream(7, "batch", 3).standard_normal(5)
    b = rng_stream(7, "batch", 3).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    c = rng_stream(7, "z_noise", 3).standard_normal(5)
    d = rng_stream(7, "batch", 4).standard_normal(5)
    assert not np.allclose(a, c)
    assert not np.allclose(a, d)


def test_make_minibatch_plain_uniform_when_no_triplets():
    mb = make_minibatch(50, TripletBatch.empty(), 8, 0, rng_stream(0, "batch"))
    assert mb.size == 8
    assert len(mb.triplets) == 0
    assert np.unique(mb.indices).size == 8


def test_make_minibatch_union_dominates():
    # 2 triplets over 6 distinct points with n_batch=4: the union wins
    corpus = TripletBatch(np.zeros(2, dtype=np.intp), np.array([0, 10]),
                          np.array([1, 11]), np.array([2, 12]))
    mb = make_minibatch(20, corpus, 4, 2, rng_stream(1, "batch"))
    assert mb.size == 6
    np.testing.assert_array_equal(np.sort(mb.indices), [0, 1, 2, 10, 11, 12])


def test_make_minibatch_remap_round_trip(small_setup):
    bundle, queries, corpus = small_setup
    mb = make_minibatch(bundle.n, corpus, 16, 10, rng_stream(2, "batch"))
    # mapping batch-local triplet indices back through mb.indices recovers a
    # subset of the corpus triplets
    originals = {(int(q), int(i), int(j), int(l))
                 for q, i, j, l in zip(corpus.query_idx, corpus.i, corpus.j, corpus.l)}
    for q, i, j, l in zip(mb.triplets.query_idx, mb.triplets.i, mb.triplets.j, mb.triplets.l):
        back = (int(q), int(mb.indices[i]), int(mb.indices[j]), int(mb.indices[l]))
        assert back in originals


def test_make_minibatch_covers_every_triplet(small_setup):
    bundle, queries, corpus = small_setup
    for step in range(20):
        mb = make_minibatch(bundle.n, corpus, 12, 6, rng_stream(3, "batch", step))
        if len(mb.triplets):
            assert int(max(mb.triplets.i.max(), mb.triplets.j.max(), mb.triplets.l.max())) < mb.size


def test_make_minibatch_requires_corpus_for_kbatch():
    with pytest.raises(ContractError):
        make_minibatch(10, TripletBatch.empty(), 4, 2, rng_stream(0, "batch"))


def test_train_zero_steps_leaves_params_unchanged(small_setup):
    bundle, queries, corpus = small_setup
    t = Trainable.build("opbn", bundle.dim, 4, [8], [q.name for q in queries], seed=1)
    before = [a.copy() for a in t.param_arrays()]
    train(t, bundle, corpus, TrainConfig(steps=0, seed=1))
    for a, b in zip(before, t.param_arrays()):
        np.testing.assert_array_equal(a, b)


def test_train_same_seed_identical_metrics(small_setup):
    bundle, queries, corpus = small_setup
    logs = []
    for _ in range(2):
        t = Trainable.build("opbn-masked", bundle.dim, 4, [8], [q.name for q in queries], seed=3)
        res = train(t, bundle, corpus, TrainConfig(steps=12, n_batch=8, k_batch=6, seed=3,
                                                   eval_every=4))
        logs.append(res.metrics)
    assert logs[0] == logs[1]


def test_train_objective_improves_on_twofactor(small_setup):
    bundle, queries, corpus = small_setup
    t = Trainable.build("opbn", bundle.dim, 4, [16], [q.name for q in queries], seed=4)
    res = train(t, bundle, corpus, TrainConfig(steps=500, n_batch=16, k_batch=8, seed=4,
                                               eval_every=499, lr=3e-3))
    assert res.metrics[-1]["elbo"] > res.metrics[0]["elbo"]


@pytest.mark.parametrize("variant", ["vae", "metricl"])
def test_train_other_variants_run(small_setup, variant):
    bundle, queries, corpus = small_setup
    t = Trainable.build(variant, bundle.dim, 4, [8], [q.name for q in queries], seed=5)
    res = train(t, bundle, corpus, TrainConfig(steps=10, n_batch=8, k_batch=4, seed=5,
                                               eval_every=5))
    assert res.final_step == 10


def test_checkpoint_save_load_save_identical_bytes(tmp_path, small_setup):
    bundle, queries, corpus = small_setup
    t = Trainable.build("opbn-masked", bundle.dim, 4, [8], [q.name for q in queries], seed=6)
    cfg = TrainConfig(steps=5, n_batch=8, k_batch=4, seed=6)
    train(t, bundle, corpus, cfg, out_dir=tmp_path / "run", config_hash="abc")
    final = tmp_path / "run" / "final"
    loaded, extra = load_checkpoint(final)
    save_checkpoint(tmp_path / "again", loaded, extra["optimizer"],
                    extra["manifest"]["step"], cfg, "abc")
    for f in sorted(final.iterdir()):
        twin = tmp_path / "again" / f.name
        assert twin.exists(), f.name
        assert f.read_bytes() == twin.read_bytes(), f.name


def test_checkpoint_config_hash_mismatch(tmp_path, small_setup):
    bundle, queries, corpus = small_setup
    t = Trainable.build("vae", bundle.dim, 4, [8], [], seed=7)
    train(t, bundle, TripletBatch.empty(), TrainConfig(steps=2, seed=7, k_batch=0),
          out_dir=tmp_path, config_hash="right")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "final", expected_config_hash="wrong")


def test_checkpoint_missing_manifest_names_train(tmp_path):
    with pytest.raises(DataError, match="train"):
        load_checkpoint(tmp_path / "nowhere")


def test_resume_matches_uninterrupted_trajectory(tmp_path, small_setup):
    bundle, queries, corpus = small_setup
    names = [q.name for q in queries]
    full_cfg = TrainConfig(steps=14, n_batch=8, k_batch=6, seed=8, eval_every=1)
    t_full = Trainable.build("opbn-masked", bundle.dim, 4, [8], names, seed=8)
    train(t_full, bundle, corpus, full_cfg)

    half_cfg = TrainConfig(steps=7, n_batch=8, k_batch=6, seed=8, eval_every=1)
    t_half = Trainable.build("opbn-masked", bundle.dim, 4, [8], names, seed=8)
    train(t_half, bundle, corpus, half_cfg, out_dir=tmp_path, config_hash="h")
    resumed, _ = resume_train(tmp_path / "final", bundle, corpus, full_cfg, config_hash="h")

    for a, b in zip(t_full.param_arrays(), resumed.param_arrays()):
        np.testing.assert_array_equal(a, b)


def test_metrics_csv_written(tmp_path, small_setup):
    bundle, queries, corpus = small_setup
    t = Trainable.build("opbn", bundle.dim, 4, [8], [q.name for q in queries], seed=9)
    train(t, bundle, corpus, TrainConfig(steps=6, n_batch=8, k_batch=4, seed=9, eval_every=2),
          out_dir=tmp_path)
    text = (tmp_path / "metrics.csv").read_text()
    assert text.splitlines()[0] == "step,elbo,kl,recon,triplet,mask_kl"
    assert len(text.splitlines()) >= 3
