"""Observables: TICA, free-energy surfaces, MSMs and rates, structural alignment."""

from .export import read_table, write_fes, write_matrix, write_table
from .fes import (FESGrid, boltzmann_bin_probabilities, common_edges, fes_from_probabilities,
                  fes_metrics, free_energy_surface)
from .msm import (KMeansResult, MSMModel, PosteriorSummary, assign, bayesian_msm, count_matrix,
                  kmeans, largest_connected_set, mfpt, mfpt_vector, msm_estimate, pcca_two_state,
                  stationary_distribution)
from .rates import ArrheniusFit, RateEstimate, arrhenius_fit, two_state_rates
from .structure import Alignment, kabsch_align, local_rmsd, rmsd
from .tica import (TICAModel, default_features, pairwise_distance_features, solve_tica, tica_fit,
                   tica_project, tica_transform)

__all__ = [
    "Alignment", "ArrheniusFit", "FESGrid", "KMeansResult", "MSMModel", "PosteriorSummary",
    "RateEstimate", "TICAModel", "arrhenius_fit", "assign", "bayesian_msm",
    "boltzmann_bin_probabilities", "common_edges", "count_matrix", "default_features",
    "fes_from_probabilities", "fes_metrics", "free_energy_surface", "kabsch_align", "kmeans",
    "largest_connected_set", "local_rmsd", "mfpt", "mfpt_vector", "msm_estimate",
    "pairwise_distance_features", "pcca_two_state", "read_table", "rmsd", "solve_tica",
    "stationary_distribution", "tica_fit", "tica_project", "tica_transform", "two_state_rates",
    "write_fes", "write_matrix", "write_table",
]
