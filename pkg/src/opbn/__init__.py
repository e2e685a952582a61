"""Joint generative modeling of observations and oracle triplet constraints.

A diagonal-Gaussian latent-variable model (encoder/decoder MLPs trained by
reparametrized variational inference) is coupled to a Bernoulli likelihood
over similarity triplets whose distance is a per-dimension symmetric KL
between posteriors, optionally gated by learned per-query masks that carve
the latent space into semantic subspaces.
"""

__version__ = "0.1.0"

from .data import DatasetBundle, gen_perturbed_mnist, gen_twofactor_synthetic, load_bundle, load_yale, save_bundle
from .distributions import DiagGaussian, js_mc_estimate, kl_to_std_normal, sample_reparam, sym_kl_per_dim
from .model import (EncoderDecoder, MaskPosterior, MetricEmbedder, ObjectiveConfig, TripletBatch,
                    decode_loglik, elbo_objective, elbo_vae, metricl_loss, triplet_distance, triplet_loglik)
from .numerics import Adam, GradCheckReport, Mlp, ParamLayout, RmsPropMomentum, flatten, grad_check, unflatten_into
from .oracle import OracleConfig, Query, Triplet, inject_noise, read_triplets, sample_triplets, write_triplets
from .trainer import Trainable, TrainConfig, load_checkpoint, make_minibatch, resume_train, rng_stream, save_checkpoint, train
from .evaluation import (EvalReport, evaluate_model, export_embeddings, fit_probe, mask_report,
                         recombine_latents, triplet_pred_error, triplet_pred_error_by_query)
