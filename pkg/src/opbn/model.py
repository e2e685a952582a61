"""The probabilistic models: VAE encoder/decoder, Bernoulli triplet
likelihoods over posteriors (plain and truncated), masked latent distances
with per-query mask posteriors, the joint objective over observations and
triplets, and the discriminative metric-learning baseline.

All objectives return (value, components, gradients). The joint objective is
an evidence lower bound to be MAXIMIZED; gradients are of that value, laid
out parallel to param_arrays(). The metric baseline returns a loss to be
minimized.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import distributions as dist
from .distributions import DiagGaussian
from .errors import ContractError, ShapeError
from .numerics import Mlp, MlpTape

LIKELIHOODS = ("ber", "tber")
DECODER_FAMILIES = ("bernoulli", "gaussian")


@dataclass
class ObjectiveConfig:
    likelihood: str = "ber"
    masked: bool = False
    mc_samples: int = 1           # L, reparametrized draws per datapoint
    decoder_family: str = "bernoulli"
    triplet_weight: float = 1.0

    def __post_init__(self):
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
        if self.decoder_family not in DECODER_FAMILIES:
            raise ValueError(f"decoder_family must be one of {DECODER_FAMILIES}")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


@dataclass
class TripletBatch:
    """Triplets as index arrays (query index plus i, j, l rows)."""

    query_idx: np.ndarray
    i: np.ndarray
    j: np.ndarray
    l: np.ndarray

    @classmethod
    def empty(cls) -> "TripletBatch":
        z = np.zeros(0, dtype=np.intp)
        return cls(z, z.copy(), z.copy(), z.copy())

    @classmethod
    def from_triplets(cls, triplets, queries: list[str],
                      index_map: dict[int, int] | None = None) -> "TripletBatch":
        lookup = {name: k for k, name in enumerate(queries)}
        remap = (lambda v: index_map[v]) if index_map is not None else (lambda v: v)
        q = np.array([lookup[t.query] for t in triplets], dtype=np.intp)
        i = np.array([remap(t.i) for t in triplets], dtype=np.intp)
        j = np.array([remap(t.j) for t in triplets], dtype=np.intp)
        l = np.array([remap(t.l) for t in triplets], dtype=np.intp)
        return cls(q, i, j, l)

    def __len__(self) -> int:
        return self.i.size


class EncoderDecoder:
    """Encoder x -> (mean, log_std) of q(z|x); decoder z -> 2*data_dim outputs.

    The decoder always emits 2D values: under the gaussian family they are
    (mean, log_std) of p(x|z); under bernoulli the first D are logits and the
    second half is unused, which keeps one architecture across families.
    """

    def __init__(self, encoder: Mlp, decoder: Mlp, latent_dim: int, data_dim: int):
        if encoder.out_dim != 2 * latent_dim:
            raise ShapeError(f"encoder must emit 2H={2 * latent_dim}, emits {encoder.out_dim}")
        if decoder.out_dim != 2 * data_dim or decoder.in_dim != latent_dim:
            raise ShapeError("decoder must map H -> 2D")
        self.encoder = encoder
        self.decoder = decoder
        self.latent_dim = latent_dim
        self.data_dim = data_dim

    @classmethod
    def build(cls, data_dim: int, latent_dim: int, hidden: list[int],
              rng: np.random.Generator) -> "EncoderDecoder":
        encoder = Mlp.build([data_dim, *hidden, 2 * latent_dim], rng)
        decoder = Mlp.build([latent_dim, *reversed(hidden), 2 * data_dim], rng)
        return cls(encoder, decoder, latent_dim, data_dim)

    def encode(self, x: np.ndarray) -> DiagGaussian:
        q, _, _ = self.encode_with_tape(x)
        return q

    def encode_with_tape(self, x: np.ndarray) -> tuple[DiagGaussian, MlpTape, np.ndarray]:
        """Returns the posterior, the forward tape, and the clamp gate (1
        where log_std was inside its range, 0 where clipped)."""
        out, tape = self.encoder.forward(x)
        h = self.latent_dim
        raw_ls = out[:, h:]
        gate = ((raw_ls > dist.LOG_STD_MIN) & (raw_ls < dist.LOG_STD_MAX)).astype(np.float64)
        return DiagGaussian(out[:, :h], raw_ls), tape, gate

    def decode(self, z: np.ndarray) -> tuple[np.ndarray, MlpTape]:
        return self.decoder.forward(z)

    def decode_mean(self, z: np.ndarray, family: str) -> np.ndarray:
        """Expected observation under p(x|z): sigmoid(logits) or the mean head."""
        out, _ = self.decoder.forward(np.atleast_2d(z))
        d = self.data_dim
        return expit(out[:, :d]) if family == "bernoulli" else out[:, :d]

    def param_arrays(self) -> list[np.ndarray]:
        return self.encoder.param_arrays() + self.decoder.param_arrays()

    def param_names(self) -> list[str]:
        return self.encoder.param_names("encoder") + self.decoder.param_names("decoder")


class MaskPosterior:
    """Per-query variational Gaussian over pre-sigmoid mask logits b.

    The mask value is m = sigmoid(b); the prior is b ~ N(0,1). Logits start
    at mean 0 (m = 0.5) with log_std -2 so early triplet gradients are not
    drowned in mask noise.
    """

    def __init__(self, queries: list[str], mu: np.ndarray, log_std: np.ndarray):
        self.queries = list(queries)
        self.mu = np.asarray(mu, dtype=np.float64)
        self.log_std = np.asarray(log_std, dtype=np.float64)
        if self.mu.shape != (len(queries),) + self.mu.shape[1:] or self.mu.shape != self.log_std.shape:
            raise ShapeError("mask mu/log_std must be (n_queries, H)")

    @classmethod
    def init(cls, queries: list[str], latent_dim: int) -> "MaskPosterior":
        q = len(queries)
        return cls(queries, np.zeros((q, latent_dim)), np.full((q, latent_dim), -2.0))

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[1]

    def query_index(self, name: str) -> int:
        try:
            return self.queries.index(name)
        except ValueError:
            raise ContractError(f"query {name!r} is not registered with these masks") from None

    def mask_mean(self) -> np.ndarray:
        """Posterior-mean masks sigmoid(mu), shape (Q, H); used at evaluation."""
        return expit(self.mu)

    def sample(self, eps: np.ndarray) -> np.ndarray:
        """One reparametrized mask per query: sigmoid(mu + exp(log_std)*eps)."""
        return expit(self.mu + np.exp(self.log_std) * eps)

    def kl(self) -> float:
        return float(dist.kl_to_std_normal(DiagGaussian(self.mu, self.log_std)).sum())

    def param_arrays(self) -> list[np.ndarray]:
        return [self.mu, self.log_std]

    def param_names(self) -> list[str]:
        return ["masks.mu", "masks.log_std"]


# ---------------------------------------------------------------------------
# Likelihood pieces
# ---------------------------------------------------------------------------

def decode_loglik(model: EncoderDecoder, z: np.ndarray, x: np.ndarray, family: str = "bernoulli") -> np.ndarray:
    """Per-row log p(x|z) under the chosen decoder family."""
    out, _ = model.decode(np.atleast_2d(z))
    vals, _ = _loglik_and_grad(out, np.atleast_2d(np.asarray(x, dtype=np.float64)), family)
    return vals


def _loglik_and_grad(dec_out: np.ndarray, x: np.ndarray, family: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-row log-likelihood and its gradient w.r.t. the decoder outputs."""
    d = x.shape[1]
    if dec_out.shape != (x.shape[0], 2 * d):
        raise ShapeError(f"decoder output {dec_out.shape} does not match data dim {d}")
    grad = np.zeros_like(dec_out)
    if family == "bernoulli":
        logits = dec_out[:, :d]
        vals = np.sum(x * logits - np.logaddexp(0.0, logits), axis=1)
        grad[:, :d] = x - expit(logits)
        return vals, grad
    mu, ls = dec_out[:, :d], dec_out[:, d:]
    inv_var = np.exp(-2.0 * ls)
    resid = x - mu
    vals = np.sum(-0.5 * np.log(2.0 * np.pi) - ls - 0.5 * resid**2 * inv_var, axis=1)
    grad[:, :d] = resid * inv_var
    grad[:, d:] = -1.0 + resid**2 * inv_var
    return vals, grad


def triplet_distance(qa: DiagGaussian, qb: DiagGaussian, mask: np.ndarray | None = None) -> np.ndarray:
    """Masked latent distance D = sum_h m_h D^h; mask omitted means all ones."""
    per_dim = dist.sym_kl_per_dim(qa, qb)
    if mask is not None:
        per_dim = per_dim * mask
    return per_dim.sum(axis=-1)


def triplet_loglik(qi: DiagGaussian, qj: DiagGaussian, ql: DiagGaussian,
                   cfg: ObjectiveConfig, mask: np.ndarray | None = None) -> np.ndarray:
    """log p(t) for ordered triplets under the chosen likelihood.

    BER: log[ e^{-D_ij} / (e^{-D_ij} + e^{-D_il}) ], computed stably as
    -log(1 + e^{D_ij - D_il}). TBER flattens to 0 once the constraint holds
    with probability >= 1/2, contributing zero gradient on that plateau.
    """
    u = triplet_distance(qi, qj, mask) - triplet_distance(qi, ql, mask)
    ber = -np.logaddexp(0.0, u)
    if cfg.likelihood == "tber":
        return np.where(u <= 0.0, 0.0, ber)
    return ber


# ---------------------------------------------------------------------------
# Joint objective (value + exact gradients)
# ---------------------------------------------------------------------------

@dataclass
class ObjectiveValue:
    value: float
    components: dict[str, float]
    grads: list[np.ndarray] = field(repr=False, default_factory=list)


def elbo_objective(model: EncoderDecoder, masks: MaskPosterior | None,
                   x: np.ndarray, triplets: TripletBatch,
                   scale_n: float, scale_k: float,
                   eps_z: np.ndarray, eps_mask: np.ndarray | None,
                   cfg: ObjectiveConfig) -> ObjectiveValue:
    """Evidence lower bound over a joint minibatch, with exact gradients.

    value = scale_n * sum_n [ -KL(q_n || N(0,1)) + (1/L) sum_l log p(x_n|z_nl) ]
          + scale_k * w_t * sum_k log p(t_k)  [ - KL of mask posteriors if masked ]

    eps_z has shape (L, B, H) and is the frozen unit-normal noise for the
    reparametrized z samples; eps_mask (Q, H) likewise for the single mask
    sample shared by all of a query's triplets this step. Triplet distances
    are computed from posterior parameters, not samples.
    """
    x = np.asarray(x, dtype=np.float64)
    b, h = x.shape[0], model.latent_dim
    L = cfg.mc_samples
    if eps_z.shape != (L, b, h):
        raise ShapeError(f"eps_z must be (L={L}, B={b}, H={h}), got {eps_z.shape}")
    if len(triplets) and max(triplets.i.max(), triplets.j.max(), triplets.l.max()) >= b:
        raise ContractError("triplet references a row outside the encoded batch")
    if cfg.masked and masks is None:
        raise ContractError("cfg.masked requires a MaskPosterior")

    q, enc_tape, gate = model.encode_with_tape(x)
    g_mu = np.zeros((b, h))
    g_ls = np.zeros((b, h))

    # prior term: -KL(q || N(0,1)) per row
    kl_rows = dist.kl_to_std_normal(q)
    kl_d_mu, kl_d_ls = dist.kl_to_std_normal_grad(q)
    g_mu -= scale_n * kl_d_mu
    g_ls -= scale_n * kl_d_ls

    # reconstruction term, averaged over L reparametrized samples
    std = q.std
    recon_rows = np.zeros(b)
    dec_grad_acc: list[tuple[np.ndarray, np.ndarray]] | None = None
    for s in range(L):
        z = q.mean + std * eps_z[s]
        dec_out, dec_tape = model.decoder.forward(z)
        vals, d_out = _loglik_and_grad(dec_out, x, cfg.decoder_family)
        recon_rows += vals / L
        layer_grads, dz = model.decoder.backward(dec_tape, (scale_n / L) * d_out)
        if dec_grad_acc is None:
            dec_grad_acc = layer_grads
        else:
            dec_grad_acc = [(gw + lw, gb + lb) for (gw, gb), (lw, lb) in zip(dec_grad_acc, layer_grads)]
        g_mu += dz
        g_ls += dz * std * eps_z[s]

    # triplet term
    trip_sum = 0.0
    mask_kl = 0.0
    mask_grads = [np.zeros(0), np.zeros(0)]
    if masks is not None and cfg.masked:
        if eps_mask is None or eps_mask.shape != masks.mu.shape:
            raise ShapeError("eps_mask must match (n_queries, H)")
        m_all = masks.sample(eps_mask)
        mask_kl = masks.kl()
        d_mask_mu = -masks.mu.copy()
        d_mask_ls = -(np.exp(2.0 * masks.log_std) - 1.0)
        mask_grads = [d_mask_mu, d_mask_ls]
    if len(triplets):
        qi, qj, ql = q[triplets.i], q[triplets.j], q[triplets.l]
        dh_ij = dist.sym_kl_per_dim(qi, qj)
        dh_il = dist.sym_kl_per_dim(qi, ql)
        if masks is not None and cfg.masked:
            m_rows = m_all[triplets.query_idx]
            u = np.sum(m_rows * (dh_ij - dh_il), axis=1)
        else:
            m_rows = None
            u = np.sum(dh_ij - dh_il, axis=1)
        lp = -np.logaddexp(0.0, u)
        live = np.ones_like(u)
        if cfg.likelihood == "tber":
            live = (u > 0.0).astype(np.float64)
            lp = np.where(u <= 0.0, 0.0, lp)
        trip_sum = float(lp.sum())
        w = scale_k * cfg.triplet_weight
        d_u = -expit(u) * live * w                   # d(value)/du per triplet
        up = d_u[:, None] * (m_rows if m_rows is not None else 1.0)
        # pair (i, j): contributes +D_ij to u
        _accumulate_pair_grads(q, triplets.i, triplets.j, up, g_mu, g_ls)
        # pair (i, l): contributes -D_il to u
        _accumulate_pair_grads(q, triplets.i, triplets.l, -up, g_mu, g_ls)
        if m_rows is not None:
            d_m = d_u[:, None] * (dh_ij - dh_il)     # (T, H)
            d_m_per_q = np.zeros_like(masks.mu)
            np.add.at(d_m_per_q, triplets.query_idx, d_m)
            d_b = d_m_per_q * m_all * (1.0 - m_all)
            mask_grads[0] += d_b
            mask_grads[1] += d_b * np.exp(masks.log_std) * eps_mask

    # encoder backward with the full upstream gradient (log_std gated by clamp)
    upstream = np.concatenate([g_mu, g_ls * gate], axis=1)
    enc_layer_grads, _ = model.encoder.backward(enc_tape, upstream)

    value = scale_n * float(-kl_rows.sum() + recon_rows.sum()) \
        + scale_k * cfg.triplet_weight * trip_sum - (mask_kl if cfg.masked else 0.0)
    components = {
        "elbo": value,
        "kl": scale_n * float(kl_rows.sum()),
        "recon": scale_n * float(recon_rows.sum()),
        "triplet": scale_k * cfg.triplet_weight * trip_sum,
        "mask_kl": float(mask_kl),
    }
    grads: list[np.ndarray] = []
    for gw, gb in enc_layer_grads:
        grads.extend([gw, gb])
    for gw, gb in dec_grad_acc:
        grads.extend([gw, gb])
    if masks is not None and cfg.masked:
        grads.extend(mask_grads)
    return ObjectiveValue(value, components, grads)


def _accumulate_pair_grads(q: DiagGaussian, rows_a: np.ndarray, rows_b: np.ndarray,
                           upstream: np.ndarray, g_mu: np.ndarray, g_ls: np.ndarray) -> None:
    """Scatter-add gradients of sum_h upstream_h * D^h(q_a, q_b) into the
    per-row encoder-output buffers."""
    qa, qb = q[rows_a], q[rows_b]
    d_mu_a, d_ls_a, d_mu_b, d_ls_b = dist.sym_kl_per_dim_grad(qa, qb)
    np.add.at(g_mu, rows_a, upstream * d_mu_a)
    np.add.at(g_ls, rows_a, upstream * d_ls_a)
    np.add.at(g_mu, rows_b, upstream * d_mu_b)
    np.add.at(g_ls, rows_b, upstream * d_ls_b)


def elbo_vae(model: EncoderDecoder, x: np.ndarray, eps_z: np.ndarray,
             cfg: ObjectiveConfig) -> ObjectiveValue:
    """Plain VAE bound: the joint objective with no triplets and unit scales."""
    return elbo_objective(model, None, x, TripletBatch.empty(), 1.0, 0.0, eps_z, None, cfg)


# ---------------------------------------------------------------------------
# Metric-learning baseline (no generative path)
# ---------------------------------------------------------------------------

class MetricEmbedder:
    """Deterministic embedding net x -> e, trained only on triplets."""

    def __init__(self, net: Mlp):
        self.net = net

    @classmethod
    def build(cls, data_dim: int, embed_dim: int, hidden: list[int],
              rng: np.random.Generator) -> "MetricEmbedder":
        return cls(Mlp.build([data_dim, *hidden, embed_dim], rng))

    def embed(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.net.forward(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return out

    def param_arrays(self) -> list[np.ndarray]:
        return self.net.param_arrays()

    def param_names(self) -> list[str]:
        return self.net.param_names("embedder")


def metricl_loss(embedder: MetricEmbedder, x: np.ndarray,
                 triplets: TripletBatch) -> ObjectiveValue:
    """Softmax-of-negative-distance triplet loss with squared Euclidean d.

    loss = sum_k -log[ e^{-d_ij} / (e^{-d_ij} + e^{-d_il}) ]; the only
    difference from the generative model's likelihood is the distance.
    Returns the loss (to minimize) and its gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    e, tape = embedder.net.forward(x)
    ei, ej, el = e[triplets.i], e[triplets.j], e[triplets.l]
    diff_j = ei - ej
    diff_l = ei - el
    u = np.sum(diff_j**2, axis=1) - np.sum(diff_l**2, axis=1)
    losses = np.logaddexp(0.0, u)
    s = expit(u)[:, None]
    g_e = np.zeros_like(e)
    np.add.at(g_e, triplets.i, s * 2.0 * (diff_j - diff_l))
    np.add.at(g_e, triplets.j, s * -2.0 * diff_j)
    np.add.at(g_e, triplets.l, s * 2.0 * diff_l)
    layer_grads, _ = embedder.net.backward(tape, g_e)
    grads: list[np.ndarray] = []
    for gw, gb in layer_grads:
        grads.extend([gw, gb])
    value = float(losses.sum())
    return ObjectiveValue(value, {"loss": value, "triplet": -value}, grads)
