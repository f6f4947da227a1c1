"""Optimization stack and the synthetic task.

The training loop lives in :mod:`banlab.train.loop`; it is not imported here
because it depends on :mod:`banlab.model`, which itself uses these primitives.
"""

from banlab.train.loss import bce_loss
from banlab.train.optim import AdamaxState, Schedule, adamax_step, clip_gradients, global_norm, lr_at
from banlab.train.regularize import WeightNormParam, dropout, weight_norm_apply

__all__ = [
    "AdamaxState", "Schedule", "WeightNormParam", "adamax_step", "bce_loss", "clip_gradients",
    "dropout", "global_norm", "lr_at", "weight_norm_apply",
]
