"""Simulated oracles that answer triplet queries from dataset metadata,
corpus sampling with tie resampling, label-noise injection, and the CSV
triplet-file format (`query,i,j,l`, 0-based indices).

A triplet (query, i, j, l) asserts that j is more similar to i than l is,
under that query's comparison rule.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError

MAX_RESAMPLE_ATTEMPTS = 10**6

QUERY_KINDS = ("identity", "scalar", "trajectory")


@dataclass(frozen=True)
class Query:
    """A registered oracle question.

    kind "identity" compares the integer `label` column, "trajectory" the
    `trajectory` column, and "scalar" compares absolute differences of the
    named continuous attribute (azimuth, elevation, angle, ...).
    """

    name: str
    kind: str
    attribute: str | None = None

    def __post_init__(self):
        if self.kind not in QUERY_KINDS:
            raise ValueError(f"unknown query kind {self.kind!r}")
        if self.kind == "scalar" and not self.attribute:
            raise ValueError("scalar queries need an attribute column name")


@dataclass(frozen=True)
class Triplet:
    query: str
    i: int
    j: int
    l: int


@dataclass
class OracleConfig:
    """noise is the fraction of answers flipped after sampling (Appendix-style
    corruption); stochastic_temp switches the scalar comparator to a softmax
    answer model with that temperature (None = deterministic)."""

    noise: float = 0.0
    tie_policy: str = "resample"
    seed: int = 0
    stochastic_temp: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must be in [0,1], got {self.noise}")
        if self.tie_policy != "resample":
            raise ValueError(f"unsupported tie policy {self.tie_policy!r}")


def _column(meta: dict[str, np.ndarray], name: str, indices) -> np.ndarray:
    if name not in meta:
        raise DataError(f"metadata has no column {name!r}")
    vals = np.asarray(meta[name], dtype=np.float64)[indices]
    if np.isnan(vals).any():
        raise DataError(f"column {name!r} is missing values at queried rows")
    return vals


def answer_identity(meta: dict[str, np.ndarray], i: int, j: int, l: int,
                    column: str = "label") -> tuple[int, int, int] | None:
    """Order (i,j,l) by label match; None signals a tie (both or neither match)."""
    li, lj, ll = _column(meta, column, [i, j, l])
    match_j = li == lj
    match_l = li == ll
    if match_j == match_l:
        return None
    return (i, j, l) if match_j else (i, l, j)


def answer_scalar(meta: dict[str, np.ndarray], attribute: str, i: int, j: int, l: int) -> tuple[int, int, int] | None:
    """Order by absolute attribute distance to i; None on an exact tie."""
    ai, aj, al = _column(meta, attribute, [i, j, l])
    dj, dl = abs(ai - aj), abs(ai - al)
    if dj == dl:
        return None
    return (i, j, l) if dj < dl else (i, l, j)


def answer(query: Query, meta: dict[str, np.ndarray], i: int, j: int, l: int,
           rng: np.random.Generator | None = None,
           stochastic_temp: float | None = None) -> tuple[int, int, int] | None:
    """Dispatch to the query's comparator. With stochastic_temp set, scalar
    queries answer (i,j,l) with probability sigmoid((d_l - d_j)/temp)."""
    if query.kind == "identity":
        return answer_identity(meta, i, j, l, column="label")
    if query.kind == "trajectory":
        return answer_identity(meta, i, j, l, column="trajectory")
    if stochastic_temp is not None:
        if rng is None:
            raise ContractError("stochastic answering needs an rng")
        ai, aj, al = _column(meta, query.attribute, [i, j, l])
        p_jl = 1.0 / (1.0 + np.exp(-(abs(ai - al) - abs(ai - aj)) / stochastic_temp))
        return (i, j, l) if rng.random() < p_jl else (i, l, j)
    return answer_scalar(meta, query.attribute, i, j, l)


def _vectorized_answers(query: Query, meta: dict[str, np.ndarray],
                        idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch comparator: idx is (M,3). Returns (keep mask, swap mask); rows
    with ties are dropped (resampled by the caller)."""
    i, j, l = idx[:, 0], idx[:, 1], idx[:, 2]
    if query.kind in ("identity", "trajectory"):
        col = "label" if query.kind == "identity" else "trajectory"
        vals_i = _column(meta, col, i)
        match_j = vals_i == _column(meta, col, j)
        match_l = vals_i == _column(meta, col, l)
        keep = match_j != match_l
        return keep, match_l & keep
    ai = _column(meta, query.attribute, i)
    dj = np.abs(ai - _column(meta, query.attribute, j))
    dl = np.abs(ai - _column(meta, query.attribute, l))
    keep = dj != dl
    return keep, (dj > dl) & keep


def sample_triplets(meta: dict[str, np.ndarray], queries: list[Query], k_per_query: int,
                    config: OracleConfig, rng: np.random.Generator) -> list[Triplet]:
    """Draw exactly k_per_query answered triplets per query.

    Index triples are uniform over distinct (i,j,l); ties are resampled.
    Aborts if a query cannot be answered within MAX_RESAMPLE_ATTEMPTS draws
    (e.g. an identity query on single-class data).
    """
    if k_per_query < 1:
        raise ValueError("k_per_query must be >= 1")
    n = len(np.asarray(meta["id"]))
    if n < 3:
        raise DataError("need at least 3 datapoints to form triplets")
    out: list[Triplet] = []
    for query in queries:
        collected: list[Triplet] = []
        attempts = 0
        while len(collected) < k_per_query:
            want = max(1024, k_per_query - len(collected))
            if attempts + want > MAX_RESAMPLE_ATTEMPTS:
                want = MAX_RESAMPLE_ATTEMPTS - attempts
                if want <= 0:
                    raise ContractError(
                        f"query {query.name!r}: no answerable triplets after "
                        f"{MAX_RESAMPLE_ATTEMPTS} draws (got {len(collected)}/{k_per_query})")
            idx = rng.integers(0, n, size=(want, 3))
            attempts += want
            distinct = (idx[:, 0] != idx[:, 1]) & (idx[:, 0] != idx[:, 2]) & (idx[:, 1] != idx[:, 2])
            idx = idx[distinct]
            if config.stochastic_temp is not None and query.kind == "scalar":
                for row in idx:
                    t = answer(query, meta, int(row[0]), int(row[1]), int(row[2]),
                               rng=rng, stochastic_temp=config.stochastic_temp)
                    collected.append(Triplet(query.name, *t))
                    if len(collected) == k_per_query:
                        break
                continue
            keep, swap = _vectorized_answers(query, meta, idx)
            for row, sw in zip(idx[keep], swap[keep]):
                i, j, l = int(row[0]), int(row[1]), int(row[2])
                collected.append(Triplet(query.name, i, l, j) if sw else Triplet(query.name, i, j, l))
                if len(collected) == k_per_query:
                    break
        out.extend(collected)
    if config.noise > 0.0:
        out = inject_noise(out, config.noise, rng)
    return out


def inject_noise(triplets: list[Triplet], eps: float, rng: np.random.Generator) -> list[Triplet]:
    """Independently swap (j,l) of each triplet with probability eps."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must be in [0,1], got {eps}")
    flips = rng.random(len(triplets)) < eps
    return [Triplet(t.query, t.i, t.l, t.j) if f else t for t, f in zip(triplets, flips)]


def write_triplets(path, triplets: list[Triplet]) -> None:
    """CSV with header query,i,j,l; UTF-8, LF line endings, 0-based indices."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query", "i", "j", "l"])
        for t in triplets:
            writer.writerow([t.query, t.i, t.j, t.l])


def read_triplets(path) -> list[Triplet]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["query", "i", "j", "l"]:
            raise DataError(f"{path}: expected header query,i,j,l, got {header}")
        return [Triplet(q, int(i), int(j), int(l)) for q, i, j, l in reader]
