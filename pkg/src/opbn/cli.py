"""Command-line entry point tying the pieces into reproducible runs.

Configuration is a JSON object with flat dotted keys; every hyperparameter
lives there so runs are self-documenting. Unknown keys are rejected, each
value is validated against its constraint, and a hash of the resolved config
is stamped into every artifact a command writes.
"""

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from .data import (DatasetBundle, gen_perturbed_mnist, gen_twofactor_synthetic, load_bundle,
                   load_yale, save_bundle, write_pgm)
from .errors import ConfigError, DataError
from .model import ObjectiveConfig, TripletBatch, elbo_objective
from .numerics import grad_check
from .oracle import OracleConfig, Query, read_triplets, sample_triplets, write_triplets
from .trainer import Trainable, TrainConfig, load_checkpoint, rng_stream, train

COMMANDS = ("gen-data", "gen-triplets", "train", "eval", "sample", "recombine",
            "report-masks", "gradcheck")

QUERY_TABLE = {
    "identity": Query("identity", "identity"),
    "azimuth": Query("azimuth", "scalar", "azimuth"),
    "elevation": Query("elevation", "scalar", "elevation"),
    "angle": Query("angle", "scalar", "angle"),
    "trajectory": Query("trajectory", "trajectory"),
}


def _in_range(lo, hi):
    def check(key, v):
        if not (lo <= v <= hi):
            raise ConfigError(f"{key} must be in [{lo},{hi}], got {v}")
    return check


def _positive(key, v):
    if v <= 0:
        raise ConfigError(f"{key} must be positive, got {v}")


def _nonneg(key, v):
    if v < 0:
        raise ConfigError(f"{key} must be >= 0, got {v}")


def _choice(*options):
    def check(key, v):
        if v not in options:
            raise ConfigError(f"{key} must be one of {options}, got {v!r}")
    return check


def _query_list(key, v):
    for name in v:
        if name not in QUERY_TABLE:
            raise ConfigError(f"{key}: unknown query {name!r}, choose from {sorted(QUERY_TABLE)}")
    if len(set(v)) != len(v):
        raise ConfigError(f"{key} has duplicate queries")


def _any(key, v):
    return None


# key -> (type, default, validator); type "list-int"/"list-str" for JSON lists
SCHEMA = {
    "dataset.kind": (str, "twofactor", _choice("twofactor", "digits", "yale")),
    "dataset.n_train": (int, 3000, _positive),
    "dataset.n_test": (int, 500, _positive),
    "dataset.image_size": (int, 16, _positive),
    "dataset.images": (str, "", _any),
    "dataset.labels": (str, "", _any),
    "dataset.per_class": (int, 30, _positive),
    "dataset.angles": ("list-float", [9.0, 18.0, 27.0, 36.0, 45.0], _any),
    "dataset.test_fraction": (float, 0.2, _in_range(0.01, 0.9)),
    "dataset.dir": (str, "", _any),
    "dataset.test_count": (int, 300, _positive),
    "oracle.queries": ("list-str", ["identity"], _query_list),
    "oracle.k_per_query": (int, 10000, _positive),
    "oracle.k_heldout_per_query": (int, 2000, _positive),
    "oracle.noise": (float, 0.0, _in_range(0.0, 1.0)),
    "oracle.stochastic_temp": (float, 0.0, _nonneg),
    "model.variant": (str, "opbn-masked", _choice("vae", "opbn", "opbn-masked", "metricl")),
    "model.likelihood": (str, "ber", _choice("ber", "tber")),
    "model.decoder_family": (str, "bernoulli", _choice("bernoulli", "gaussian")),
    "model.latent_dim": (int, 12, _positive),
    "model.hidden": ("list-int", [64], _any),
    "train.n_batch": (int, 64, _positive),
    "train.k_batch": (int, 128, _nonneg),
    "train.steps": (int, 2000, _positive),
    "train.lr": (float, 1e-3, _positive),
    "train.optimizer": (str, "adam", _choice("adam", "rmsprop-momentum")),
    "train.mc_samples": (int, 1, _positive),
    "train.eval_every": (int, 50, _positive),
    "train.checkpoint_every": (int, 0, _nonneg),
    "train.grad_clip": (float, 100.0, _nonneg),
    "train.triplet_weight": (float, 1.0, _positive),
    "sample.count": (int, 16, _positive),
    "recombine.a": (int, 0, _nonneg),
    "recombine.b": (int, 1, _nonneg),
    "recombine.query_a": (str, "azimuth", _any),
    "recombine.query_b": (str, "identity", _any),
    "seed": (int, 0, _nonneg),
}


def _coerce(key: str, value):
    typ = SCHEMA[key][0]
    try:
        if typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            return str(value)
        if typ == "list-int":
            return [int(v) for v in value]
        if typ == "list-float":
            return [float(v) for v in value]
        if typ == "list-str":
            return [str(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ}") from None
    raise ConfigError(f"{key}: unhandled type {typ}")


def parse_config(path: str | None, overrides: list[str] | None = None,
                 seed: int | None = None) -> dict:
    """Resolve file values + `--set key=value` overrides against the schema.

    Unknown keys are rejected; every value is validated. Flag overrides win
    over file values; --seed wins over both.
    """
    cfg = {key: spec[1] for key, spec in SCHEMA.items()}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} does not exist")
        with open(p, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
        for key, value in raw.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, text = item.partition("=")
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        cfg[key] = _coerce(key, value)
    if seed is not None:
        cfg["seed"] = int(seed)
    for key, value in cfg.items():
        SCHEMA[key][2](key, value)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _queries(cfg: dict) -> list[Query]:
    return [QUERY_TABLE[name] for name in cfg["oracle.queries"]]


def _paths(out: Path) -> dict[str, Path]:
    return {
        "train_bundle": out / "data" / "train",
        "test_bundle": out / "data" / "test",
        "triplets_train": out / "triplets" / "train.csv",
        "triplets_heldout": out / "triplets" / "heldout.csv",
        "run": out / "run",
        "checkpoint": out / "run" / "final",
        "eval": out / "eval" / "report.csv",
    }


def _write_manifest(out: Path, command: str, cfg: dict, artifacts: list[Path], started: float) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "artifacts": sorted(str(p.relative_to(out)) for p in artifacts),
        "code_version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(out / f"manifest_{command.replace('-', '_')}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DataError(f"{path} is missing; run `{producer}` first")
    return path


def _cmd_gen_data(cfg: dict, out: Path) -> list[Path]:
    kind = cfg["dataset.kind"]
    paths = _paths(out)
    if kind == "twofactor":
        train_b = gen_twofactor_synthetic(cfg["dataset.n_train"], cfg["dataset.image_size"],
                                          rng_stream(cfg["seed"], "data", 0), split="train")
        test_b = gen_twofactor_synthetic(cfg["dataset.n_test"], cfg["dataset.image_size"],
                                         rng_stream(cfg["seed"], "data", 1), split="test")
    elif kind == "digits":
        for key in ("dataset.images", "dataset.labels"):
            if not cfg[key]:
                raise ConfigError(f"{key} must point to an IDX file for dataset.kind=digits")
        bundle = gen_perturbed_mnist(cfg["dataset.images"], cfg["dataset.labels"],
                                     cfg["dataset.per_class"], cfg["dataset.angles"],
                                     rng_stream(cfg["seed"], "data", 0))
        train_b, test_b = split_by_trajectory(bundle, cfg["dataset.test_fraction"],
                                              rng_stream(cfg["seed"], "data", 1))
    else:
        if not cfg["dataset.dir"]:
            raise ConfigError("dataset.dir must point to the PGM directory for dataset.kind=yale")
        train_b, test_b = load_yale(cfg["dataset.dir"], cfg["dataset.image_size"],
                                    cfg["dataset.test_count"], cfg["seed"])
    save_bundle(train_b, paths["train_bundle"])
    save_bundle(test_b, paths["test_bundle"])
    return [paths["train_bundle"] / "bundle.bin", paths["train_bundle"] / "meta.csv",
            paths["test_bundle"] / "bundle.bin", paths["test_bundle"] / "meta.csv"]


def split_by_trajectory(bundle: DatasetBundle, test_fraction: float,
                        rng: np.random.Generator) -> tuple[DatasetBundle, DatasetBundle]:
    """Split rows so no trajectory straddles the train/test boundary."""
    traj = bundle.meta["trajectory"]
    ids = np.unique(traj[~np.isnan(traj)])
    order = rng.permutation(ids.size)
    n_test = max(1, int(round(ids.size * test_fraction)))
    test_tr = set(ids[order[:n_test]].tolist())
    is_test = np.array([t in test_tr for t in traj])

    def pick(sel, split):
        meta = {c: bundle.meta[c][sel].copy() for c in bundle.meta}
        meta["id"] = np.arange(int(sel.sum()), dtype=np.float64)
        return DatasetBundle(bundle.x[sel], meta, split=split, image_size=bundle.image_size)

    return pick(~is_test, "train"), pick(is_test, "test")


def _cmd_gen_triplets(cfg: dict, out: Path) -> list[Path]:
    paths = _paths(out)
    _require(paths["train_bundle"] / "bundle.bin", "gen-data")
    train_b = load_bundle(paths["train_bundle"])
    test_b = load_bundle(paths["test_bundle"])
    queries = _queries(cfg)
    temp = cfg["oracle.stochastic_temp"] or None
    ocfg = OracleConfig(noise=cfg["oracle.noise"], seed=cfg["seed"], stochastic_temp=temp)
    train_trip = sample_triplets(train_b.meta, queries, cfg["oracle.k_per_query"],
                                 ocfg, rng_stream(cfg["seed"], "oracle", 0))
    clean = OracleConfig(noise=0.0, seed=cfg["seed"], stochastic_temp=temp)
    held = sample_triplets(test_b.meta, queries, cfg["oracle.k_heldout_per_query"],
                           clean, rng_stream(cfg["seed"], "oracle", 1))
    paths["triplets_train"].parent.mkdir(parents=True, exist_ok=True)
    write_triplets(paths["triplets_train"], train_trip)
    write_triplets(paths["triplets_heldout"], held)
    return [paths["triplets_train"], paths["triplets_heldout"]]


def _load_corpus(path: Path, queries: list[str]) -> TripletBatch:
    return TripletBatch.from_triplets(read_triplets(path), queries)


def _cmd_train(cfg: dict, out: Path) -> list[Path]:
    paths = _paths(out)
    train_b = load_bundle(_require(paths["train_bundle"] / "bundle.bin", "gen-data").parent)
    names = cfg["oracle.queries"]
    variant = cfg["model.variant"]
    if variant == "vae":
        corpus = TripletBatch.empty()
    else:
        corpus = _load_corpus(_require(paths["triplets_train"], "gen-triplets"), names)
    obj_cfg = ObjectiveConfig(likelihood=cfg["model.likelihood"],
                              decoder_family=cfg["model.decoder_family"],
                              mc_samples=cfg["train.mc_samples"],
                              triplet_weight=cfg["train.triplet_weight"])
    trainable = Trainable.build(variant, train_b.dim, cfg["model.latent_dim"],
                                cfg["model.hidden"], names, cfg["seed"], obj_cfg)
    tcfg = TrainConfig(
        n_batch=cfg["train.n_batch"], k_batch=cfg["train.k_batch"],
        mc_samples=cfg["train.mc_samples"], steps=cfg["train.steps"],
        optimizer=cfg["train.optimizer"], lr=cfg["train.lr"], seed=cfg["seed"],
        eval_every=cfg["train.eval_every"], checkpoint_every=cfg["train.checkpoint_every"],
        grad_clip=cfg["train.grad_clip"] or None, triplet_weight=cfg["train.triplet_weight"])
    result = train(trainable, train_b, corpus, tcfg, out_dir=paths["run"],
                   config_hash=config_hash(cfg))
    arts = [paths["run"] / "metrics.csv"]
    arts += sorted(Path(result.checkpoint_dir).glob("*"))
    return arts


def _cmd_eval(cfg: dict, out: Path) -> list[Path]:
    paths = _paths(out)
    _require(paths["checkpoint"] / "manifest.json", "train")
    trainable, _ = load_checkpoint(paths["checkpoint"])
    train_b = load_bundle(paths["train_bundle"])
    test_b = load_bundle(paths["test_bundle"])
    names = cfg["oracle.queries"]
    held = _load_corpus(_require(paths["triplets_heldout"], "gen-triplets"), names)
    report = ev.evaluate_model(trainable, train_b, test_b, held, names,
                               setting="+".join(names), config_hash=config_hash(cfg),
                               seed=cfg["seed"])
    paths["eval"].parent.mkdir(parents=True, exist_ok=True)
    ev.write_eval_reports(paths["eval"], [report])
    print(ev.format_eval_table([report]))
    return [paths["eval"]]


def _cmd_sample(cfg: dict, out: Path) -> list[Path]:
    paths = _paths(out)
    _require(paths["checkpoint"] / "manifest.json", "train")
    trainable, _ = load_checkpoint(paths["checkpoint"])
    if trainable.variant == "metricl":
        raise DataError("metricl has no generative path to sample from")
    rng = rng_stream(cfg["seed"], "eval", 0)
    z = rng.standard_normal((cfg["sample.count"], trainable.model.latent_dim))
    imgs = trainable.model.decode_mean(z, trainable.obj_cfg.decoder_family)
    side = int(round(np.sqrt(imgs.shape[1])))
    sample_dir = out / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k, row in enumerate(imgs):
        p = sample_dir / f"sample_{k:03d}.pgm"
        write_pgm(p, row.reshape(side, side))
        written.append(p)
    return written


def _cmd_recombine(cfg: dict, out: Path) -> list[Path]:
    paths = _paths(out)
    _require(paths["checkpoint"] / "manifest.json", "train")
    trainable, _ = load_checkpoint(paths["checkpoint"])
    if trainable.masks is None:
        raise DataError("recombine needs an opbn-masked checkpoint")
    bundle = load_bundle(paths["train_bundle"])
    a, b = cfg["recombine.a"], cfg["recombine.b"]
    img = ev.recombine_latents(trainable.model, trainable.masks, bundle.x[a].astype(np.float64),
                               bundle.x[b].astype(np.float64), cfg["recombine.query_b"],
                               cfg["recombine.query_a"], trainable.obj_cfg)
    side = int(round(np.sqrt(img.size)))
    rec_dir = out / "recombine"
    rec_dir.mkdir(parents=True, exist_ok=True)
    p = rec_dir / f"recombined_{a}_{b}.pgm"
    write_pgm(p, img.reshape(side, side))
    return [p]


def _cmd_report_masks(cfg: dict, out: Path) -> list[Path]:
    paths = _paths(out)
    _require(paths["checkpoint"] / "manifest.json", "train")
    trainable, _ = load_checkpoint(paths["checkpoint"])
    if trainable.masks is None:
        raise DataError("report-masks needs an opbn-masked checkpoint")
    report = ev.mask_report(trainable.masks)
    print(report.format_table())
    mask_dir = out / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    p = mask_dir / "masks.csv"
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query," + ",".join(f"z{h}" for h in range(report.values.shape[1])) + "\n")
        for name, row in zip(report.queries, report.values):
            fh.write(name + "," + ",".join(repr(float(v)) for v in row) + "\n")
    return [p]


def _cmd_gradcheck(cfg: dict, out: Path) -> list[Path]:
    """Full-objective gradient check on a tiny frozen-noise instance."""
    report = run_tiny_gradcheck(seed=cfg["seed"])
    print(report.describe())
    if not report.ok:
        raise DataError(f"gradient check failed: max rel err {report.max_rel_err:.3e}")
    return []


def run_tiny_gradcheck(seed: int = 0, data_dim: int = 6, latent_dim: int = 3,
                       n_points: int = 8, n_triplets: int = 10, tol: float = 1e-4):
    """The desk-size correctness gate: masked joint objective vs central
    finite differences with frozen noise."""
    rng = rng_stream(seed, "init", 7)
    trainable = Trainable.build("opbn-masked", data_dim, latent_dim, [5], ["q0", "q1"], seed)
    x = rng.uniform(0.05, 0.95, size=(n_points, data_dim))
    q_idx = rng.integers(0, 2, size=n_triplets).astype(np.intp)
    ijl = np.array([rng.choice(n_points, 3, replace=False) for _ in range(n_triplets)], dtype=np.intp)
    trip = TripletBatch(q_idx, ijl[:, 0], ijl[:, 1], ijl[:, 2])
    eps_z = rng.standard_normal((1, n_points, latent_dim))
    eps_m = rng.standard_normal((2, latent_dim))
    arrays = trainable.param_arrays()
    layout = trainable.layout()
    from .numerics import flatten, unflatten_into

    def loss_fn(flat):
        unflatten_into(flat, arrays)
        res = elbo_objective(trainable.model, trainable.masks, x, trip, 1.25, 0.8,
                             eps_z, eps_m, trainable.obj_cfg)
        return res.value, flatten(res.grads)

    return grad_check(loss_fn, flatten(arrays), h=1e-5, tol=tol, layout=layout)


HANDLERS = {
    "gen-data": _cmd_gen_data,
    "gen-triplets": _cmd_gen_triplets,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sample": _cmd_sample,
    "recombine": _cmd_recombine,
    "report-masks": _cmd_report_masks,
    "gradcheck": _cmd_gradcheck,
}


def run_command(command: str, cfg: dict, out: Path) -> int:
    started = time.time()
    out.mkdir(parents=True, exist_ok=True)
    artifacts = HANDLERS[command](cfg, out)
    _write_manifest(out, command, cfg, artifacts, started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opbn",
                                     description="oracle-informed generative modeling runs")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="JSON config with flat dotted keys")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config value (repeatable)")
    parser.add_argument("--out", default="runs/default", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.overrides, args.seed)
        return run_command(args.command, cfg, Path(args.out))
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
