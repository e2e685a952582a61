"""Scratch: tune A4 (two-factor, masked vs unmasked) before freezing acceptance params."""
import sys
import time

import numpy as np

from opbn.data import gen_twofactor_synthetic
from opbn.evaluation import mask_report, triplet_pred_error_by_query
from opbn.model import ObjectiveConfig, TripletBatch
from opbn.oracle import OracleConfig, Query, sample_triplets
from opbn.trainer import Trainable, TrainConfig, rng_stream, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
k_batch = int(sys.argv[2]) if len(sys.argv) > 2 else 256
lr = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3
latent = int(sys.argv[4]) if len(sys.argv) > 4 else 12
hidden = [int(v) for v in (sys.argv[5].split(",") if len(sys.argv) > 5 else ["64"])]
tw = float(sys.argv[6]) if len(sys.argv) > 6 else 1.0

t0 = time.time()
train_b = gen_twofactor_synthetic(3000, 16, rng_stream(0, "data", 0))
test_b = gen_twofactor_synthetic(500, 16, rng_stream(0, "data", 1), split="test")
queries = [Query("identity", "identity"), Query("azimuth", "scalar", "azimuth")]
names = [q.name for q in queries]
corpus = TripletBatch.from_triplets(
    sample_triplets(train_b.meta, queries, 10000, OracleConfig(), rng_stream(0, "oracle", 0)), names)
held = TripletBatch.from_triplets(
    sample_triplets(test_b.meta, queries, 2000, OracleConfig(), rng_stream(0, "oracle", 1)), names)
print(f"data+triplets: {time.time()-t0:.1f}s, corpus {len(corpus)}")

for variant in ("opbn-masked", "opbn"):
    t1 = time.time()
    obj = ObjectiveConfig(likelihood="ber", decoder_family="bernoulli", triplet_weight=tw)
    t = Trainable.build(variant, train_b.dim, latent, hidden, names, seed=0, obj_cfg=obj)
    cfg = TrainConfig(n_batch=64, k_batch=k_batch, steps=steps, lr=lr, seed=0,
                      eval_every=max(1, steps // 4), triplet_weight=tw)
    res = train(t, train_b, corpus, cfg)
    errs = triplet_pred_error_by_query(t, test_b, held, names)
    dt = time.time() - t1
    print(f"{variant}: {dt:.0f}s  heldout errors {errs}")
    for row in res.metrics:
        print("   ", {k: round(v, 1) for k, v in row.items()})
    if variant == "opbn-masked":
        rep = mask_report(t.masks)
        print("   mask cosine", round(float(rep.cosine[0, 1]), 3),
              "overlap", round(float(rep.overlap[0, 1]), 3))
        print("   masks:\n", np.round(rep.values, 2))
print(f"total {time.time()-t0:.0f}s")
