"""Mixture density networks for multimodal scientific regression.

The public surface, by module:

``diffcore``   reverse-mode autodiff on float64 arrays
``nn``         MLP / GRU backbones and initialisation
``mdn``        mixture head, stable NLL, sampling, :class:`Model`
``optim``      AdamW, schedules, gradient clipping, training loops, ensembles
``dynamics``   ODE integrators, the four benchmark generators, rollouts
``metrics``    test NLL, ground-truth posterior, MMD sweeps, report rows
``persist``    checkpoint and dataset files
``config``     run configuration; ``cli`` the ``mdnkit`` command
"""

__version__ = "0.1.0"

from . import kernels
from .config import RunConfig, load_config, preset
from .diffcore import Tensor
from .dynamics import Dataset, gen_gravity, gen_inverse_sine, gen_lorenz, gen_saddle_node, rollout
from .mdn import Model, build_model, mdn_nll, mdn_sample, transform_head
from .metrics import mmd_squared, mmd_sweep, test_nll, true_inverse_density
from .optim import AdamW, LrSchedule, TrainConfig, train, train_ensemble
from .persist import load_checkpoint, load_dataset, save_checkpoint, save_dataset

__all__ = [
    "__version__", "kernels", "Tensor", "RunConfig", "load_config", "preset", "Dataset", "gen_gravity",
    "gen_inverse_sine", "gen_lorenz", "gen_saddle_node", "rollout", "Model", "build_model", "mdn_nll",
    "mdn_sample", "transform_head", "mmd_squared", "mmd_sweep", "test_nll", "true_inverse_density", "AdamW",
    "LrSchedule", "TrainConfig", "train", "train_ensemble", "load_checkpoint", "load_dataset",
    "save_checkpoint", "save_dataset",
]
