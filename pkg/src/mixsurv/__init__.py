"""Multimodal latent-mixture survival modelling with subgroup treatment effects."""
from .dataio import Cohort, CohortPreprocessor, PreprocessSpec, SimulationConfig, load_cohort, simulate_cohort, split_cohort
from .estimator import MixtureSurvival

__all__ = ["Cohort", "CohortPreprocessor", "PreprocessSpec", "SimulationConfig", "load_cohort",
           "simulate_cohort", "split_cohort", "MixtureSurvival"]
__version__ = "0.1.0"
