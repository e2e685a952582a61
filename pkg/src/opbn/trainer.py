"""Doubly stochastic training loop: joint minibatches of datapoints and
triplets, reparametrized Monte-Carlo noise, optimization, checkpointing,
and CSV metrics logging.

Randomness comes from counter-based Philox streams keyed by
(seed, purpose, step), so batching, z-noise and mask-noise are independently
reproducible and training resumes from a checkpoint bit-exactly.
"""

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetBundle
from .errors import ContractError, DataError, NonFiniteError, TrainingError
from .model import (EncoderDecoder, MaskPosterior, MetricEmbedder, ObjectiveConfig,
                    TripletBatch, elbo_objective, metricl_loss)
from .numerics import ParamLayout, flatten, global_norm_clip, make_optimizer, unflatten_into

METRICS_HEADER = ("step", "elbo", "kl", "recon", "triplet", "mask_kl")

VARIANTS = ("vae", "opbn", "opbn-masked", "metricl")


def rng_stream(seed: int, purpose: str, step: int = 0) -> np.random.Generator:
    """Independent reproducible stream keyed by (seed, purpose, step)."""
    digest = hashlib.blake2s(purpose.encode("utf-8"), digest_size=8).digest()
    key = [np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(int.from_bytes(digest, "little"))]
    return np.random.Generator(np.random.Philox(counter=[step, 0, 0, 0], key=key))


@dataclass
class TrainConfig:
    n_batch: int = 64
    k_batch: int = 64
    mc_samples: int = 1
    steps: int = 1000
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 50
    checkpoint_every: int = 0       # 0 = final checkpoint only
    grad_clip: float | None = 100.0
    triplet_weight: float = 1.0

    def __post_init__(self):
        if self.n_batch < 1:
            raise ValueError("n_batch must be >= 1")
        if self.k_batch < 0:
            raise ValueError("k_batch must be >= 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


@dataclass
class MiniBatch:
    indices: np.ndarray          # dataset rows to encode, deterministic order
    triplets: TripletBatch       # batch-local indices

    @property
    def size(self) -> int:
        return self.indices.size


def make_minibatch(n_data: int, corpus: TripletBatch, n_batch: int, k_batch: int,
                   rng: np.random.Generator) -> MiniBatch:
    """Sample k_batch triplets uniformly, then build the datapoint set as the
    union of their referenced rows topped up with uniformly sampled extras to
    at least n_batch rows. Triplets are remapped to batch-local indices, so
    every triplet is resolvable by construction."""
    k_total = len(corpus)
    if k_batch > 0 and k_total == 0:
        raise ContractError("k_batch > 0 but the triplet corpus is empty")
    if k_batch > 0:
        picks = rng.choice(k_total, size=k_batch, replace=k_batch > k_total)
        picks.sort()
        sub = TripletBatch(corpus.query_idx[picks], corpus.i[picks], corpus.j[picks], corpus.l[picks])
        referenced = np.unique(np.concatenate([sub.i, sub.j, sub.l]))
    else:
        sub = TripletBatch.empty()
        referenced = np.zeros(0, dtype=np.intp)
    extra_count = max(0, n_batch - referenced.size)
    if extra_count:
        pool = np.setdiff1d(np.arange(n_data), referenced)
        extras = np.sort(rng.choice(pool, size=min(extra_count, pool.size), replace=False))
        indices = np.concatenate([referenced, extras]).astype(np.intp)
    else:
        indices = referenced.astype(np.intp)
    if len(sub):
        local = np.empty(n_data, dtype=np.intp)
        local[indices] = np.arange(indices.size)
        triplets = TripletBatch(sub.query_idx, local[sub.i], local[sub.j], local[sub.l])
    else:
        triplets = TripletBatch.empty()
    return MiniBatch(indices, triplets)


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    final_step: int = 0
    checkpoint_dir: str | None = None


class Trainable:
    """A model variant plus its parameter list and minimization objective."""

    def __init__(self, variant: str, model: EncoderDecoder | None = None,
                 masks: MaskPosterior | None = None,
                 embedder: MetricEmbedder | None = None,
                 obj_cfg: ObjectiveConfig | None = None):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        self.variant = variant
        self.model = model
        self.masks = masks
        self.embedder = embedder
        self.obj_cfg = obj_cfg or ObjectiveConfig()
        if variant == "opbn-masked" and masks is None:
            raise ContractError("opbn-masked needs a MaskPosterior")
        self.obj_cfg.masked = variant == "opbn-masked"

    @classmethod
    def build(cls, variant: str, data_dim: int, latent_dim: int, hidden: list[int],
              queries: list[str], seed: int, obj_cfg: ObjectiveConfig | None = None) -> "Trainable":
        rng = rng_stream(seed, "init")
        if variant == "metricl":
            return cls(variant, embedder=MetricEmbedder.build(data_dim, latent_dim, hidden, rng),
                       obj_cfg=obj_cfg)
        model = EncoderDecoder.build(data_dim, latent_dim, hidden, rng)
        masks = MaskPosterior.init(queries, latent_dim) if variant == "opbn-masked" else None
        return cls(variant, model=model, masks=masks, obj_cfg=obj_cfg)

    def param_arrays(self) -> list[np.ndarray]:
        if self.variant == "metricl":
            return self.embedder.param_arrays()
        arrays = self.model.param_arrays()
        if self.masks is not None:
            arrays = arrays + self.masks.param_arrays()
        return arrays

    def param_names(self) -> list[str]:
        if self.variant == "metricl":
            return self.embedder.param_names()
        names = self.model.param_names()
        if self.masks is not None:
            names = names + self.masks.param_names()
        return names

    def layout(self) -> ParamLayout:
        return ParamLayout.of(self.param_names(), self.param_arrays())

    def loss_and_grads(self, x: np.ndarray, triplets: TripletBatch, scale_n: float,
                       scale_k: float, eps_z: np.ndarray | None,
                       eps_mask: np.ndarray | None) -> tuple[float, dict, list[np.ndarray]]:
        """Minimization view: (loss, components, gradient arrays of the loss)."""
        if self.variant == "metricl":
            res = metricl_loss(self.embedder, x, triplets)
            return res.value, res.components, res.grads
        trip = triplets if self.variant in ("opbn", "opbn-masked") else TripletBatch.empty()
        res = elbo_objective(self.model, self.masks, x, trip, scale_n, scale_k,
                             eps_z, eps_mask, self.obj_cfg)
        return -res.value, res.components, [-g for g in res.grads]


def train(trainable: Trainable, bundle: DatasetBundle, corpus: TripletBatch,
          cfg: TrainConfig, out_dir=None, config_hash: str = "",
          start_step: int = 0, opt=None) -> TrainResult:
    """Run optimizer steps from start_step to cfg.steps.

    Logs objective components every eval_every steps, writes checkpoints
    under out_dir, and aborts on a non-finite objective after dumping the
    last good parameters. Because every stream is keyed by (seed, step),
    calling this with start_step from a loaded checkpoint reproduces the
    uninterrupted trajectory exactly.
    """
    x_all = bundle.x.astype(np.float64)
    n = x_all.shape[0]
    k_total = len(corpus)
    params = trainable.param_arrays()
    layout = trainable.layout()
    if opt is None:
        opt = make_optimizer(cfg.optimizer, cfg.lr)
    result = TrainResult()
    out_dir = Path(out_dir) if out_dir is not None else None
    use_triplets = trainable.variant != "vae" and cfg.k_batch > 0 and k_total > 0

    for step in range(start_step, cfg.steps):
        mb = make_minibatch(n, corpus if use_triplets else TripletBatch.empty(),
                            cfg.n_batch, cfg.k_batch if use_triplets else 0,
                            rng_stream(cfg.seed, "batch", step))
        x = x_all[mb.indices]
        eps_z = eps_mask = None
        if trainable.variant != "metricl":
            eps_z = rng_stream(cfg.seed, "z_noise", step).standard_normal(
                (cfg.mc_samples, mb.size, trainable.model.latent_dim))
        if trainable.masks is not None:
            eps_mask = rng_stream(cfg.seed, "mask_noise", step).standard_normal(
                trainable.masks.mu.shape)
        trainable.obj_cfg.mc_samples = cfg.mc_samples
        trainable.obj_cfg.triplet_weight = cfg.triplet_weight
        scale_n = n / mb.size
        scale_k = (k_total / len(mb.triplets)) if len(mb.triplets) else 0.0
        try:
            loss, comps, grad_arrays = trainable.loss_and_grads(
                x, mb.triplets, scale_n, scale_k, eps_z, eps_mask)
            if not np.isfinite(loss):
                raise NonFiniteError(f"objective is {loss}")
            flat_params = flatten(params)
            flat_grads = flatten(grad_arrays)
            if cfg.grad_clip is not None:
                flat_grads = global_norm_clip(flat_grads, cfg.grad_clip)
            opt.step(flat_params, flat_grads, layout)
            unflatten_into(flat_params, params)
        except NonFiniteError as exc:
            if out_dir is not None:
                save_checkpoint(out_dir / "last_good", trainable, opt, step, cfg, config_hash)
            raise TrainingError(f"aborted at step {step}: {exc}") from exc
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps - 1):
            result.metrics.append({
                "step": step, "elbo": comps.get("elbo", -comps.get("loss", 0.0)),
                "kl": comps.get("kl", 0.0), "recon": comps.get("recon", 0.0),
                "triplet": comps.get("triplet", 0.0), "mask_kl": comps.get("mask_kl", 0.0)})
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"step{step + 1:06d}", trainable, opt, step + 1, cfg, config_hash)
    result.final_step = cfg.steps
    if out_dir is not None:
        final_dir = out_dir / "final"
        save_checkpoint(final_dir, trainable, opt, cfg.steps, cfg, config_hash)
        result.checkpoint_dir = str(final_dir)
        write_metrics_csv(out_dir / "metrics.csv", result.metrics)
    return result


def resume_train(checkpoint_dir, bundle: DatasetBundle, corpus: TripletBatch,
                 cfg: TrainConfig, out_dir=None, config_hash: str = "") -> tuple[Trainable, TrainResult]:
    """Load a checkpoint and continue to cfg.steps on the identical trajectory."""
    trainable, extra = load_checkpoint(checkpoint_dir, expected_config_hash=config_hash or None)
    result = train(trainable, bundle, corpus, cfg, out_dir=out_dir, config_hash=config_hash,
                   start_step=extra["manifest"]["step"], opt=extra["optimizer"])
    return trainable, result


def write_metrics_csv(path, metrics: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in metrics:
            writer.writerow([row["step"]] + [repr(float(row[k])) for k in METRICS_HEADER[1:]])


# ---------------------------------------------------------------------------
# Checkpoints: manifest.json + one little-endian float64 blob per array
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(directory, trainable: Trainable, opt, step: int,
                    cfg: TrainConfig, config_hash: str = "") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in zip(trainable.param_names(), trainable.param_arrays()):
        fname = name.replace(".", "_") + ".bin"
        arr.astype("<f8").tofile(directory / fname)
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    opt_entries = []
    for key, arr in opt.state_arrays().items():
        fname = f"opt_{key}.bin"
        np.asarray(arr, dtype="<f8").tofile(directory / fname)
        opt_entries.append({"name": key, "shape": [int(arr.size)], "file": fname})
    manifest = {
        "format": "opbn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "variant": trainable.variant,
        "step": int(step),
        "seed": int(cfg.seed),
        "config_hash": config_hash,
        "optimizer": {"algorithm": opt.algorithm, "lr": opt.lr, "t": int(opt.t)},
        "likelihood": trainable.obj_cfg.likelihood,
        "decoder_family": trainable.obj_cfg.decoder_family,
        "dims": _dims_of(trainable),
        "queries": trainable.masks.queries if trainable.masks is not None else [],
        "arrays": entries,
        "optimizer_arrays": opt_entries,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def _dims_of(trainable: Trainable) -> dict:
    if trainable.variant == "metricl":
        net = trainable.embedder.net
        return {"data_dim": net.in_dim, "latent_dim": net.out_dim,
                "hidden": [lay.w.shape[0] for lay in net.layers[:-1]]}
    return {"data_dim": trainable.model.data_dim, "latent_dim": trainable.model.latent_dim,
            "hidden": [lay.w.shape[0] for lay in trainable.model.encoder.layers[:-1]]}


def load_checkpoint(directory, expected_config_hash: str | None = None) -> tuple[Trainable, dict]:
    """Rebuild the trainable (and optimizer moments) from a checkpoint
    directory; raises on a bad manifest or a config-hash mismatch."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{directory}: no manifest.json (run `train` first)")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "opbn-checkpoint" or manifest.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{directory}: unsupported checkpoint manifest "
                        f"({manifest.get('format')} v{manifest.get('version')})")
    if expected_config_hash is not None and manifest["config_hash"] != expected_config_hash:
        raise DataError(f"{directory}: checkpoint config hash {manifest['config_hash']!r} "
                        f"does not match requested {expected_config_hash!r}")
    dims = manifest["dims"]
    obj_cfg = ObjectiveConfig(likelihood=manifest["likelihood"],
                              decoder_family=manifest["decoder_family"])
    trainable = Trainable.build(manifest["variant"], dims["data_dim"], dims["latent_dim"],
                                list(dims["hidden"]), list(manifest["queries"]),
                                seed=manifest["seed"], obj_cfg=obj_cfg)
    arrays = dict(zip(trainable.param_names(), trainable.param_arrays()))
    for entry in manifest["arrays"]:
        target = arrays[entry["name"]]
        blob = np.fromfile(directory / entry["file"], dtype="<f8")
        if blob.size != target.size:
            raise DataError(f"{entry['file']}: expected {target.size} values, found {blob.size}")
        target[...] = blob.reshape(entry["shape"])
    opt = make_optimizer(manifest["optimizer"]["algorithm"], manifest["optimizer"]["lr"])
    opt_arrays = {entry["name"]: np.fromfile(directory / entry["file"], dtype="<f8")
                  for entry in manifest["optimizer_arrays"]}
    if opt_arrays and next(iter(opt_arrays.values())).size:
        opt.load_state(manifest["optimizer"]["t"], opt_arrays)
    return trainable, {"manifest": manifest, "optimizer": opt}
