"""Learned first- and second-order scores with denoising uncertainty and Ozaki sampling."""

from .distributions import GaussianMixture, LogisticMixture, NoisyDistribution
from .errors import DivergenceError
from .models import ScoreModelPair, eval_s1, eval_s2
from .samplers import SamplerConfig, run_chains
from .training import TrainConfig, train
from .uq import PosteriorSummary, denoise_with_uq

__version__ = "0.1.0"
