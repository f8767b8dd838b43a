"""In-context identification of nonlinear dynamical systems.

A meta-model (encoder-decoder Transformer with a probabilistic output head)
is trained across randomly sampled Wiener-Hammerstein systems so that, given
a context record of input/output data from an unseen system, it predicts the
response to a fresh input sequence without any gradient-based adaptation.
"""

__version__ = "0.1.0"

from .config import RunConfig, build_run_config, load_run_config  # noqa: E402
from .datagen import (  # noqa: E402
    DatasetSample,
    Minibatch,
    StreamConfig,
    TestSet,
    make_batch,
    read_testset,
    stream_batches,
    write_testset,
)
from .evaluation import EvalReport, evaluate, export_traces  # noqa: E402
from .model import MetaModel, ModelConfig, PredDist  # noqa: E402
from .training import TrainConfig, fine_tune, gaussian_nll, train  # noqa: E402
from .wh import (  # noqa: E402
    SignalSpec,
    WhClassConfig,
    WhSystem,
    sample_wh,
    simulate,
    standardization_check,
)

__all__ = [
    "RunConfig",
    "build_run_config",
    "load_run_config",
    "DatasetSample",
    "Minibatch",
    "StreamConfig",
    "TestSet",
    "make_batch",
    "read_testset",
    "stream_batches",
    "write_testset",
    "EvalReport",
    "evaluate",
    "export_traces",
    "MetaModel",
    "ModelConfig",
    "PredDist",
    "TrainConfig",
    "fine_tune",
    "gaussian_nll",
    "train",
    "SignalSpec",
    "WhClassConfig",
    "WhSystem",
    "sample_wh",
    "simulate",
    "standardization_check",
    "__version__",
]
