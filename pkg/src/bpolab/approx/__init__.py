from .nets import ParamNet, symlog, symexp, symexp_grad, flatten, unflatten, global_norm
from .optim import OptimizerState, PolyakState, adam_step, polyak_update, save_params, load_params
from .policies import CategoricalPolicy, GaussianPolicy, QNet

__all__ = [
    "ParamNet", "symlog", "symexp", "symexp_grad", "flatten", "unflatten", "global_norm",
    "OptimizerState", "PolyakState", "adam_step", "polyak_update", "save_params", "load_params",
    "CategoricalPolicy", "GaussianPolicy", "QNet",
]
