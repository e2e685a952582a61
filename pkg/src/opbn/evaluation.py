"""Evaluation harness: linear probes on frozen latents, held-out triplet
prediction, mask reports, latent recombination, and embedding export.

Probes consume posterior means (never samples) and are trained with the
package optimizer; probe metrics are computed strictly on held-out rows.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetBundle
from .errors import ContractError, DataError, ShapeError
from .model import EncoderDecoder, MaskPosterior, ObjectiveConfig, TripletBatch, triplet_distance
from .numerics import Adam
from .trainer import Trainable

PROBE_KINDS = ("logistic-classification", "ridge-regression")
MASK_THRESHOLD = 0.2


@dataclass
class ProbeResult:
    kind: str
    weights: np.ndarray
    bias: np.ndarray
    metric: float                 # classification error % or RMSD
    steps_run: int
    grad_norm: float


def _check_split(train_idx: np.ndarray, test_idx: np.ndarray, n: int) -> None:
    train_idx = np.asarray(train_idx)
    test_idx = np.asarray(test_idx)
    if np.intersect1d(train_idx, test_idx).size:
        raise ContractError("train and test index sets overlap")
    if train_idx.size == 0 or test_idx.size == 0:
        raise ContractError("both probe splits must be nonempty")
    if max(train_idx.max(), test_idx.max()) >= n:
        raise ShapeError("split index outside the latent matrix")


def fit_probe(latents: np.ndarray, targets: np.ndarray, kind: str,
              train_idx: np.ndarray, test_idx: np.ndarray,
              l2: float = 1e-3, lr: float = 0.05, max_steps: int = 5000,
              grad_tol: float = 1e-5) -> ProbeResult:
    """Fit a linear probe on latents[train_idx] and score on latents[test_idx].

    logistic-classification: softmax regression, returns test error in %.
    ridge-regression: 0.5*||Zw + b - y||^2 + l2/2*||w||^2 (bias unpenalized),
    returns test RMSD. Both run Adam until the gradient norm drops below
    grad_tol or max_steps is hit. Features are standardized internally with
    the penalty mapped back so the objective is unchanged.
    """
    if kind not in PROBE_KINDS:
        raise ValueError(f"kind must be one of {PROBE_KINDS}")
    z = np.asarray(latents, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    _check_split(train_idx, test_idx, z.shape[0])
    z_tr, z_te = z[train_idx], z[test_idx]
    y_tr, y_te = y[train_idx], y[test_idx]
    mu = z_tr.mean(axis=0)
    sd = z_tr.std(axis=0)
    sd[sd < 1e-12] = 1.0
    s_tr = (z_tr - mu) / sd

    if kind == "logistic-classification":
        classes = np.unique(y_tr)
        if classes.size < 2:
            raise DataError("probe target has a single class")
        onehot = (y_tr[:, None] == classes[None, :]).astype(np.float64)
        w = np.zeros((z.shape[1], classes.size))
        b = np.zeros(classes.size)
        opt = Adam(lr=lr)
        steps, gnorm = 0, np.inf
        for steps in range(1, max_steps + 1):
            logits = s_tr @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g_logits = p - onehot
            gw = s_tr.T @ g_logits
            gb = g_logits.sum(axis=0)
            flat = np.concatenate([w.ravel(), b])
            gflat = np.concatenate([gw.ravel(), gb])
            gnorm = float(np.linalg.norm(gflat))
            if gnorm < grad_tol:
                break
            opt.step(flat, gflat)
            w = flat[:w.size].reshape(w.shape)
            b = flat[w.size:]
        pred = classes[np.argmax(((z_te - mu) / sd) @ w + b, axis=1)]
        err = 100.0 * float(np.mean(pred != y_te))
        return ProbeResult(kind, w / sd[:, None], b - (mu / sd) @ w, err, steps, gnorm)

    # ridge: optimize in standardized coordinates, penalize the original-space
    # weights w_orig = w_std / sd so the objective is exactly the stated one
    w = np.zeros(z.shape[1])
    b = np.array([y_tr.mean()])
    opt = Adam(lr=lr)
    steps, gnorm = 0, np.inf
    for steps in range(1, max_steps + 1):
        resid = s_tr @ w + b[0] - y_tr
        gw = s_tr.T @ resid + l2 * w / sd**2
        gb = np.array([resid.sum()])
        gflat = np.concatenate([gw, gb])
        gnorm = float(np.linalg.norm(gflat))
        if gnorm < grad_tol:
            break
        flat = np.concatenate([w, b])
        opt.step(flat, gflat)
        w = flat[:-1]
        b = flat[-1:]
    pred = ((z_te - mu) / sd) @ w + b[0]
    rmsd = float(np.sqrt(np.mean((pred - y_te) ** 2)))
    return ProbeResult(kind, w / sd, np.array([b[0] - (mu / sd) @ w]), rmsd, steps, gnorm)


# ---------------------------------------------------------------------------
# Triplet prediction
# ---------------------------------------------------------------------------

def _model_distances(trainable: Trainable, bundle: DatasetBundle,
                     triplets: TripletBatch, queries: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """(D_ij, D_il) per triplet under the model's native distance: masked or
    unmasked symmetric KL on posteriors, or squared Euclidean on embeddings."""
    x = bundle.x.astype(np.float64)
    if trainable.variant == "metricl":
        e = trainable.embedder.embed(x)
        d_ij = np.sum((e[triplets.i] - e[triplets.j]) ** 2, axis=1)
        d_il = np.sum((e[triplets.i] - e[triplets.l]) ** 2, axis=1)
        return d_ij, d_il
    q = trainable.model.encode(x)
    qi, qj, ql = q[triplets.i], q[triplets.j], q[triplets.l]
    if trainable.masks is not None:
        m = trainable.masks.mask_mean()
        lookup = {name: k for k, name in enumerate(trainable.masks.queries)}
        rows = np.array([lookup[queries[qk]] for qk in triplets.query_idx])
        mask_rows = m[rows]
        return triplet_distance(qi, qj, mask_rows), triplet_distance(qi, ql, mask_rows)
    return triplet_distance(qi, qj), triplet_distance(qi, ql)


def triplet_pred_error(trainable: Trainable, bundle: DatasetBundle,
                       triplets: TripletBatch, queries: list[str]) -> float:
    """Percent of held-out triplets where the model distance orders (j, l)
    the wrong way; exact ties count half."""
    if not len(triplets):
        raise DataError("empty held-out triplet set")
    d_ij, d_il = _model_distances(trainable, bundle, triplets, queries)
    wrong = np.where(d_ij == d_il, 0.5, (d_ij > d_il).astype(np.float64))
    return 100.0 * float(wrong.mean())


def triplet_pred_error_by_query(trainable: Trainable, bundle: DatasetBundle,
                                triplets: TripletBatch, queries: list[str]) -> dict[str, float]:
    if not len(triplets):
        return {}
    d_ij, d_il = _model_distances(trainable, bundle, triplets, queries)
    wrong = np.where(d_ij == d_il, 0.5, (d_ij > d_il).astype(np.float64))
    out = {}
    for k, name in enumerate(queries):
        sel = triplets.query_idx == k
        if sel.any():
            out[name] = 100.0 * float(wrong[sel].mean())
    return out


# ---------------------------------------------------------------------------
# Mask reports and latent recombination
# ---------------------------------------------------------------------------

@dataclass
class MaskReport:
    queries: list[str]
    values: np.ndarray                      # (Q, H) posterior-mean masks
    threshold: float
    active: list[np.ndarray] = field(default_factory=list)
    overlap: np.ndarray | None = None       # |A n B| / min(|A|, |B|)
    cosine: np.ndarray | None = None

    def format_table(self) -> str:
        lines = ["query      " + " ".join(f"z{h:<4d}" for h in range(self.values.shape[1]))]
        for name, row in zip(self.queries, self.values):
            lines.append(f"{name:<10s} " + " ".join(f"{v:.3f}" for v in row))
        lines.append(f"active dims (m > {self.threshold}): " +
                     "; ".join(f"{n}: {list(a)}" for n, a in zip(self.queries, self.active)))
        return "\n".join(lines)


def mask_report(masks: MaskPosterior, threshold: float = MASK_THRESHOLD) -> MaskReport:
    """Posterior-mean mask table plus pairwise active-set overlap and cosine."""
    values = masks.mask_mean()
    active = [np.flatnonzero(row > threshold) for row in values]
    q = len(masks.queries)
    overlap = np.zeros((q, q))
    cosine = np.zeros((q, q))
    for a in range(q):
        for b in range(q):
            inter = np.intersect1d(active[a], active[b]).size
            m = min(active[a].size, active[b].size)
            overlap[a, b] = inter / m if m else 0.0
            na, nb = np.linalg.norm(values[a]), np.linalg.norm(values[b])
            cosine[a, b] = float(values[a] @ values[b] / (na * nb)) if na and nb else 0.0
    return MaskReport(list(masks.queries), values, threshold, active, overlap, cosine)


def recombine_latents(model: EncoderDecoder, masks: MaskPosterior,
                      x_a: np.ndarray, x_b: np.ndarray,
                      query_take_from_b: str, query_take_from_a: str, cfg: ObjectiveConfig,
                      threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Decode a latent spliced from two images' posterior means.

    Dimensions active for query_take_from_b come from B's encoding, those
    active only for query_take_from_a from A's, the rest are averaged.
    Returns the decoded expected image, shape (D,).
    """
    if masks is None:
        raise ContractError("recombination needs trained masks")
    qa = model.encode(np.atleast_2d(x_a))
    qb = model.encode(np.atleast_2d(x_b))
    m = masks.mask_mean()
    act_b = m[masks.query_index(query_take_from_b)] > threshold
    act_a_only = (m[masks.query_index(query_take_from_a)] > threshold) & ~act_b
    z = 0.5 * (qa.mean[0] + qb.mean[0])
    z = np.where(act_b, qb.mean[0], z)
    z = np.where(act_a_only, qa.mean[0], z)
    return model.decode_mean(z[None, :], cfg.decoder_family)[0]


def export_embeddings(bundle: DatasetBundle, latents: np.ndarray, path,
                      mask: np.ndarray | None = None,
                      threshold: float = MASK_THRESHOLD) -> list[str]:
    """Write a CSV of (masked-subspace) latent means plus metadata columns
    for external plotting. Returns the column names written."""
    z = np.asarray(latents, dtype=np.float64)
    if z.shape[0] != bundle.n:
        raise ShapeError(f"{z.shape[0]} latent rows vs {bundle.n} dataset rows")
    keep = np.arange(z.shape[1]) if mask is None else np.flatnonzero(np.asarray(mask) > threshold)
    meta_cols = [c for c in ("label", "azimuth", "elevation", "trajectory", "angle")
                 if bundle.has_column(c)]
    header = ["id"] + meta_cols + [f"z{h}" for h in keep]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for k in range(bundle.n):
            row = [int(bundle.meta["id"][k])]
            row += [repr(float(bundle.meta[c][k])) for c in meta_cols]
            row += [repr(float(v)) for v in z[k, keep]]
            writer.writerow(row)
    return header


# ---------------------------------------------------------------------------
# Full report over the paper-style metric set
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    model: str
    setting: str
    classification_error: float | None
    azimuth_rmsd: float | None
    elevation_rmsd: float | None
    angle_rmsd: float | None
    triplet_error: float | None
    config_hash: str = ""
    seed: int = 0

    def rows(self) -> list:
        return [self.model, self.setting, self.classification_error, self.azimuth_rmsd,
                self.elevation_rmsd, self.angle_rmsd, self.triplet_error,
                self.config_hash, self.seed]


EVAL_HEADER = ("model", "setting", "classification_error", "azimuth_rmsd",
               "elevation_rmsd", "angle_rmsd", "triplet_error", "config_hash", "seed")


def latent_representation(trainable: Trainable, bundle: DatasetBundle) -> np.ndarray:
    """Posterior means (generative variants) or embeddings (metricl)."""
    x = bundle.x.astype(np.float64)
    if trainable.variant == "metricl":
        return trainable.embedder.embed(x)
    return trainable.model.encode(x).mean


def evaluate_model(trainable: Trainable, train_bundle: DatasetBundle,
                   test_bundle: DatasetBundle, heldout: TripletBatch,
                   queries: list[str], setting: str = "", config_hash: str = "",
                   seed: int = 0) -> EvalReport:
    """Probe metrics on held-out rows plus held-out triplet prediction.

    Probes are fit on the training bundle's representations and scored on the
    test bundle's; the two bundles are disjoint by construction.
    """
    z_tr = latent_representation(trainable, train_bundle)
    z_te = latent_representation(trainable, test_bundle)
    z = np.vstack([z_tr, z_te])
    tr_idx = np.arange(z_tr.shape[0])
    te_idx = z_tr.shape[0] + np.arange(z_te.shape[0])

    def stacked(col):
        return np.concatenate([train_bundle.meta[col], test_bundle.meta[col]])

    cls_err = az = el = ang = None
    if train_bundle.has_column("label") and test_bundle.has_column("label"):
        cls_err = fit_probe(z, stacked("label"), "logistic-classification", tr_idx, te_idx).metric
    for col, slot in (("azimuth", "az"), ("elevation", "el"), ("angle", "ang")):
        if train_bundle.has_column(col) and test_bundle.has_column(col):
            val = fit_probe(z, stacked(col), "ridge-regression", tr_idx, te_idx).metric
            if slot == "az":
                az = val
            elif slot == "el":
                el = val
            else:
                ang = val
    trip = triplet_pred_error(trainable, test_bundle, heldout, queries) if len(heldout) else None
    return EvalReport(trainable.variant, setting, cls_err, az, el, ang, trip, config_hash, seed)


def write_eval_reports(path, reports: list[EvalReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVAL_HEADER)
        for rep in reports:
            writer.writerow(["" if v is None else v for v in rep.rows()])


def format_eval_table(reports: list[EvalReport]) -> str:
    lines = [" | ".join(f"{h:>20s}" for h in EVAL_HEADER[:7])]
    for rep in reports:
        cells = []
        for v in rep.rows()[:7]:
            if v is None:
                cells.append(f"{'-':>20s}")
            elif isinstance(v, float):
                cells.append(f"{v:>20.2f}")
            else:
                cells.append(f"{str(v):>20s}")
        lines.append(" | ".join(cells))
    return "\n".join(lines)
