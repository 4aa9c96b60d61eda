"""Adversarially regularized variational RNN built on a small numpy autodiff engine.

Submodules:

``autodiff``       tape-based reverse-mode differentiation over float64 arrays
``nn``             dense layers, GRU/LSTM cells, RMSProp, clipping, parameter store
``distributions``  diagonal Gaussian and Bernoulli helpers
``vrnn``           the sequence model: prior, proposal, emission, unrolls, ELBO
``adversarial``    the weight-clipped recurrent critic and its two update steps
``training``       the alternating loop, evaluation and the importance-weighted bound
``data``           LGSSM and sine generators, the Kalman oracle, ``seqdata v1`` I/O
``checkpoint``     the ``avrnn-ckpt v1`` tensor container
``config``, ``cli`` the ``avrnn`` command
"""

from .adversarial import AdvConfig, Critic
from .data import LgssmParams, SequenceDataset, gen_lgssm, gen_sine, kalman_loglik, load_dataset, save_dataset
from .training import MetricsRecord, TrainConfig, evaluate, iwae_bound, run_training
from .vrnn import ModelBundle, VrnnConfig, elbo, generate, reconstruction_loss, unroll_inference

__version__ = "0.1.0"

__all__ = [
    "AdvConfig",
    "Critic",
    "LgssmParams",
    "MetricsRecord",
    "ModelBundle",
    "SequenceDataset",
    "TrainConfig",
    "VrnnConfig",
    "elbo",
    "evaluate",
    "gen_lgssm",
    "gen_sine",
    "generate",
    "iwae_bound",
    "kalman_loglik",
    "load_dataset",
    "reconstruction_loss",
    "run_training",
    "save_dataset",
    "unroll_inference",
]
