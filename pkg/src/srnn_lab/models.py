"""Name -> model module lookup. Each module exposes init_params/forward/backward/param_count/save/load."""
from __future__ import annotations

from . import baseline, srnn

MODELS = {"srnn": srnn, "rnn": baseline, "vanilla": baseline}


def get(name: str):
    try:
        return MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


def module_for(params):
    if isinstance(params, srnn.SrnnParams):
        return srnn
    if isinstance(params, baseline.VanillaParams):
        return baseline
    raise TypeError(f"not a model parameter set: {type(params).__name__}")


def load_any(path):
    """Load a checkpoint of either model, dispatching on its magic string."""
    from . import checkpoint

    magic, _, _ = checkpoint.load(path)
    if magic == srnn.MAGIC:
        return srnn.load(path)
    if magic == baseline.MAGIC:
        return baseline.load(path)
    raise checkpoint.CheckpointError(f"{path}: unknown magic {magic!r}")
