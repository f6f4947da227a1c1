from banlab.model.analysis import (
    ablate_eval,
    ablation_sweep,
    attention_entropy,
    evaluate,
    mean_entropies,
    phrase_localization_loss,
    predict,
)
from banlab.model.checkpoint import load_tensors, save_tensors
from banlab.model.counter import (
    ConfigurationError,
    CounterEmbedding,
    CounterPlugin,
    ThresholdCounter,
    ZeroCounter,
    column_max,
    select_top,
)
from banlab.model.gru import GruParams, gru_encode
from banlab.model.stack import (
    BanModel,
    BanStackConfig,
    ForwardOutput,
    forward,
    init_params,
    residual_step,
    residual_step_with_counter,
)

__all__ = [
    "BanModel", "BanStackConfig", "ConfigurationError", "CounterEmbedding", "CounterPlugin",
    "ForwardOutput", "GruParams", "ThresholdCounter", "ZeroCounter", "ablate_eval", "ablation_sweep",
    "attention_entropy", "column_max", "evaluate", "forward", "gru_encode", "init_params",
    "load_tensors", "mean_entropies", "phrase_localization_loss", "predict", "residual_step",
    "residual_step_with_counter", "save_tensors", "select_top",
]
