"""Distributed Bayesian matrix factorization with staged, limited-communication
MCMC over a grid-partitioned sparse matrix."""

from .aggregate import (AggregationInput, ep_parametric_aggregate,
                        eigenvalue_correction, gaussian_product, pp_aggregate_row)
from .approx import (Clustering, GmmPosterior, PosteriorSet, RowPosterior,
                     fit_dominant_mode, fit_gmm, fit_moment_matching,
                     lambda_means, pool_gmm)
from .data import (GroundTruth, PartitionPlan, SparseMatrix, load_triplets,
                   order_matrix, partition, save_triplets, simulate,
                   split_random, split_structured)
from .errors import (ArtifactError, DbmfError, NumericalError, PipelineError,
                     TripletParseError, ValidationError)
from .evaluate import (MetricReport, align_latent_dimensions, rmse,
                       rmse_by_frequency, subset_mean_correlations, wts)
from .pipeline import (CostModel, FactorizationResult, RunConfig, build_plan,
                       cost_model_eval, run_ep, run_full, run_pp)
from .sampler import (GibbsConfig, HyperState, NormalWishartPrior, RowPriorSet,
                      SampleChain, SidePrior, chain_posterior_mean,
                      gibbs_run, gmm_component_assign, log_likelihood, predict,
                      sample_hyper_normal_wishart, sample_row_conditional)

__version__ = "0.1.0"
