"""Scratch: probe A5/A6/A7/A9 scales before freezing acceptance params."""
import sys
import time

import numpy as np

from opbn.data import (angle_difference_deg, estimate_shading_direction, gen_perturbed_mnist,
                       gen_twofactor_synthetic, write_idx_images, write_idx_labels)
from opbn.evaluation import fit_probe, recombine_latents, triplet_pred_error
from opbn.model import ObjectiveConfig, TripletBatch
from opbn.oracle import OracleConfig, Query, inject_noise, sample_triplets
from opbn.trainer import Trainable, TrainConfig, rng_stream, train

mode = sys.argv[1]
t0 = time.time()

TWOFACTOR_QUERIES = [Query("identity", "identity"), Query("azimuth", "scalar", "azimuth")]
NAMES2 = [q.name for q in TWOFACTOR_QUERIES]


def twofactor_world(n_train=3000, n_test=500, k=10000, seed=0):
    tr = gen_twofactor_synthetic(n_train, 16, rng_stream(seed, "data", 0))
    te = gen_twofactor_synthetic(n_test, 16, rng_stream(seed, "data", 1), split="test")
    corp = TripletBatch.from_triplets(
        sample_triplets(tr.meta, TWOFACTOR_QUERIES, k, OracleConfig(), rng_stream(seed, "oracle", 0)), NAMES2)
    held = TripletBatch.from_triplets(
        sample_triplets(te.meta, TWOFACTOR_QUERIES, 2000, OracleConfig(), rng_stream(seed, "oracle", 1)), NAMES2)
    return tr, te, corp, held


def fit(variant, tr, corp, seed, steps, tw=4.0, k_batch=256, latent=8, hidden=(96,), queries=NAMES2):
    obj = ObjectiveConfig(likelihood="ber", decoder_family="bernoulli", triplet_weight=tw)
    t = Trainable.build(variant, tr.dim, latent, list(hidden), queries, seed=seed, obj_cfg=obj)
    cfg = TrainConfig(n_batch=64, k_batch=k_batch, steps=steps, lr=1e-3, seed=seed,
                      eval_every=0, triplet_weight=tw)
    train(t, tr, corp, cfg)
    return t


if mode == "a9":
    tr, te, corp, held = twofactor_world()
    t = fit("opbn-masked", tr, corp, 0, 5000)
    rng = rng_stream(0, "eval", 9)
    wins = 0
    for _ in range(100):
        a, b = rng.choice(te.n, 2, replace=False)
        img = recombine_latents(t.model, t.masks, te.x[a].astype(np.float64),
                                te.x[b].astype(np.float64), "identity", "azimuth", t.obj_cfg)
        ang = estimate_shading_direction(img[None, :], 16)[0]
        ang_a = estimate_shading_direction(te.x[a][None, :].astype(np.float64), 16)[0]
        ang_b = estimate_shading_direction(te.x[b][None, :].astype(np.float64), 16)[0]
        if angle_difference_deg(ang, ang_a) < angle_difference_deg(ang, ang_b):
            wins += 1
    print(f"a9 wins {wins}/100  ({time.time()-t0:.0f}s)")

elif mode == "a6":
    steps = int(sys.argv[2]) if len(sys.argv) > 2 else 1500
    for seed in (0, 1, 2):
        tr, te, corp_big, held = twofactor_world(seed=seed)
        corp_small = TripletBatch.from_triplets(
            sample_triplets(tr.meta, TWOFACTOR_QUERIES, 100, OracleConfig(),
                            rng_stream(seed, "oracle", 2)), NAMES2)
        errs = {}
        for label, corp in (("100", corp_small), ("10000", corp_big)):
            t = fit("opbn-masked", tr, corp, seed, steps, k_batch=min(256, len(corp)))
            errs[label] = triplet_pred_error(t, te, held, NAMES2)
        print(f"seed {seed}: err100={errs['100']:.1f} err10000={errs['10000']:.1f} "
              f"gap={errs['100'] - errs['10000']:.1f}  ({time.time()-t0:.0f}s)")

elif mode == "a7":
    steps = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
    variants = sys.argv[3].split(",") if len(sys.argv) > 3 else ["opbn-masked", "metricl"]
    tw = float(sys.argv[4]) if len(sys.argv) > 4 else 4.0
    k_per_query = int(sys.argv[5]) if len(sys.argv) > 5 else 1000
    tr = gen_twofactor_synthetic(2000, 16, rng_stream(0, "data", 0))
    te = gen_twofactor_synthetic(500, 16, rng_stream(0, "data", 1), split="test")
    base = sample_triplets(tr.meta, TWOFACTOR_QUERIES, k_per_query, OracleConfig(),
                           rng_stream(0, "oracle", 0))
    for eps in (0.0, 0.2, 0.4):
        noisy = TripletBatch.from_triplets(
            inject_noise(base, eps, rng_stream(0, "oracle", 5)), NAMES2)
        probes = {}
        for variant in variants:
            t = fit(variant, tr, noisy, 0, steps, tw=tw, k_batch=128, queries=NAMES2)
            if variant == "metricl":
                z_tr = t.embedder.embed(tr.x.astype(np.float64))
                z_te = t.embedder.embed(te.x.astype(np.float64))
            else:
                z_tr = t.model.encode(tr.x.astype(np.float64)).mean
                z_te = t.model.encode(te.x.astype(np.float64)).mean
            z = np.vstack([z_tr, z_te])
            y = np.concatenate([tr.meta["label"], te.meta["label"]])
            res = fit_probe(z, y, "logistic-classification",
                            np.arange(tr.n), tr.n + np.arange(te.n))
            probes[variant] = res.metric
        print(f"eps={eps}: " + " ".join(f"{k}={v:.2f}%" for k, v in probes.items())
              + f" ({time.time()-t0:.0f}s)")

elif mode == "a5":
    from sklearn.datasets import load_digits
    steps = int(sys.argv[2]) if len(sys.argv) > 2 else 4000
    digits = load_digits()
    up = np.kron(digits.images / 16.0, np.ones((2, 2)))  # 8x8 -> 16x16
    imgs = np.clip(np.round(up * 255.0), 0, 255).astype(np.uint8)
    write_idx_images("/tmp/digits_imgs.idx", imgs)
    write_idx_labels("/tmp/digits_labs.idx", digits.target.astype(np.uint8))
    angles = [9.0, 18.0, 27.0, 36.0]
    full = gen_perturbed_mnist("/tmp/digits_imgs.idx", "/tmp/digits_labs.idx", per_class=50,
                               angles=angles, rng=rng_stream(0, "data", 0))
    # split by trajectory: 40 train + 10 test per class
    traj = full.meta["trajectory"]
    from opbn.cli import split_by_trajectory
    tr, te = split_by_trajectory(full, 0.2, rng_stream(0, "data", 1))
    print("digit bundles", tr.n, te.n)
    queries = [Query("trajectory", "trajectory"), Query("angle", "scalar", "angle"),
               Query("identity", "identity")]
    names = [q.name for q in queries]
    corp = TripletBatch.from_triplets(
        sample_triplets(tr.meta, queries, 6667, OracleConfig(), rng_stream(0, "oracle", 0)), names)
    held = TripletBatch.from_triplets(
        sample_triplets(te.meta, queries, 1500, OracleConfig(), rng_stream(0, "oracle", 1)), names)
    errs = {}
    for variant in ("opbn-masked", "vae"):
        t = fit(variant, tr, corp, 0, steps, tw=4.0, latent=10, hidden=(96,), queries=names)
        errs[variant] = triplet_pred_error(t, te, held, names)
        print(f"{variant}: heldout triplet error {errs[variant]:.2f}%  ({time.time()-t0:.0f}s)")
    print(f"gap = {errs['vae'] - errs['opbn-masked']:.1f} points")
