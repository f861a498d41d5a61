"""Training-free architecture scoring from the empirical Fisher spectrum."""

from .errors import (EncodingError, FimnasError, GraphValidationError,
                     NonFiniteError, ProbabilityError, SearchError,
                     SelectionError, ShapeError, SpaceError, TableError,
                     UndefinedMetricError)
from .evolve import Candidate, SearchConfig, SearchResult, evolve
from .fim import (DecileVector, FimConfig, FimSpectrum, ProbVector,
                  SampleFactor, ScoreBreakdown, assemble_fim,
                  build_for_scoring, empirical_spectrum, fim_spectrum,
                  make_batch, multinomial_cov_factor, sample_factor,
                  sample_factors, score_network, spectrum_deciles,
                  vkdnw_entropy, vkdnw_single)
from .graphs import (ComputationGraph, GraphNode, count_flops,
                     linear_softmax_graph, parameter_count,
                     trainable_layer_count, validate_graph)
from .metrics import (EvalPair, kendall_tau_b, ndcg, ndcg_mean,
                      permutation_pvalue, spearman_rho)
from .netcore import (InitConfig, InputBatch, NetworkInstance, ParamSelection,
                      SamplingPolicy, accuracy, build_network, cross_entropy,
                      forward, logit_jacobian, random_input_batch,
                      select_params, train_steps)
from .ranking import (PROXY_NAMES, RankVector, ScoreTable,
                      aggregate_nonlinear, compute_proxy, rank_from_scores)
from .space import (ArchEncoding, CanonicalGraph, MICRO3, NB201_TOY,
                    SpaceSpec, canonicalize, decode, enumerate_space,
                    format_encoding, get_space, mutate, parse_encoding,
                    random_encoding, register_space)
from .tables import (AccuracyTable, MetricReport, eval_report,
                     ingest_accuracy_table, ingest_score_table, report_csv,
                     report_markdown, serialize_accuracy_table,
                     write_score_table)

__version__ = "0.1.0"
