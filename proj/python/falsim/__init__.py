"""Python access to the fal transformer-variant toolkit.

Configs are plain dicts with the same keys as the YAML run config. Model
configs omit nothing: missing keys take the run defaults (L=2, H=64, 4 heads,
vocab 256, seq_len 64).
"""

import json

from . import _core
from ._core import (
    CheckpointError,
    ConfigError,
    Model as _Model,
    VerificationError,
    linear_cka,
    load,
    run_cli,
    variants,
)

__version__ = _core.__version__

__all__ = [
    "CheckpointError",
    "ConfigError",
    "VerificationError",
    "build_model",
    "config_hash",
    "expected_reductions",
    "linear_cka",
    "load",
    "model_config",
    "parameter_count",
    "run_cli",
    "simulate",
    "step_time",
    "train",
    "variants",
]


def _dump(cfg):
    return json.dumps(cfg or {})


def model_config(cfg=None):
    """Fully populated, validated model config."""
    return json.loads(_core._normalize_model(_dump(cfg)))


def parameter_count(cfg=None):
    return _core._parameter_count(_dump(cfg))


def expected_reductions(cfg=None):
    """Forward all-reduce count per step under tensor parallelism."""
    return _core._expected_reductions(_dump(cfg))


def config_hash(run_cfg=None):
    return _core._config_hash(_dump(run_cfg))


def build_model(cfg=None):
    return _Model(_dump(cfg))


def _config(self):
    return json.loads(self._config)


_Model.config = property(_config)


def simulate(cfg=None, shards=2, batch=2, seed=0):
    """One verified tensor-parallel training step.

    Raises VerificationError when the sharded logits or gradients diverge
    from the single-device reference.
    """
    return _core._simulate(_dump(cfg), shards, batch, seed)


def step_time(cfg=None, hardware=None, batch=8, kind="train"):
    """Analytical step-time breakdown in seconds."""
    return _core._step_time(_dump(cfg), _dump(hardware), batch, kind)


def train(run_cfg=None):
    """Trains per run_cfg (sections model, train, data).

    Returns (model, history, unigram_ppl).
    """
    return _core._train(_dump(run_cfg))
