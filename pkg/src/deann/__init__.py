"""KDE estimation from approximate nearest neighbors plus random sampling.

Public surface: kernels, dataset handling, batched distances, the
nearest-neighbor layer, the estimators, theory formulas / error metrics,
synthetic data, and the experiment harness behind the `deann` CLI.
"""

from .analysis import (
    BandwidthRegimes,
    ErrorReport,
    NoBandwidthError,
    PowerLawFit,
    domination_delta,
    dominated_sample_size,
    fit_bandwidth,
    fit_power_law,
    knn_rank_profile,
    median_rule_bandwidth,
    power_law_bandwidth_regimes,
    relative_error,
    rs_sample_size,
)
from .ann import (
    AnnIndex,
    BruteForceIndex,
    IvfAnnIndex,
    IvfIndex,
    NeighborList,
    brute_force_knn,
    ivf_build,
    ivf_query,
    load_ivf_index,
    recall,
    save_ivf_index,
)
from .data import Dataset, DatasetFormatError, PermutedDataset, Splits, load, permute, save, split
from .distance import DistanceMatrix, NormConsistencyError, batch_sqdist, sqdist, window_sqdist
from .estimators import BatchKde, Estimate, RspState, deann, deann_batch, naive_kde, rs_kde, rsp_kde
from .harness import ExperimentSpec, GridSearchOutcome, ResultRow, average_recall, evaluate, grid_search, ground_truth
from .kernels import KernelFamily, KernelSpec, kernel_from_distance, kernel_pair
from .synth import gaussian_mixture, mixture_queries, planted_query, power_law_planted

__version__ = "0.1.0"
