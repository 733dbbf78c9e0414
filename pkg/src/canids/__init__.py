"""CAN bus intrusion detection with deterministic and Bayesian classifiers."""

__version__ = "0.1.0"

from .frames import CanFrame, ClassLabel, FrameFlag, SynthProfile, synth_capture
from .features import FeatureWindow, WindowConfig, encode_frame, split_dataset, window_stream
from .models import Mode, ModelSpec, ModelState, forward, init_model, predict_classes
from .training import Adam, EpochMetrics, TrainConfig, categorical_accuracy, train
from .uncertainty import PredictiveSummary, TriagePolicy, mc_predict, triage_decide
from .variational import GaussianVariationalParam, PriorSpec, elbo_mc, kl_analytic

__all__ = [
    "CanFrame",
    "ClassLabel",
    "FrameFlag",
    "SynthProfile",
    "synth_capture",
    "FeatureWindow",
    "WindowConfig",
    "encode_frame",
    "split_dataset",
    "window_stream",
    "Mode",
    "ModelSpec",
    "ModelState",
    "forward",
    "init_model",
    "predict_classes",
    "Adam",
    "EpochMetrics",
    "TrainConfig",
    "categorical_accuracy",
    "train",
    "PredictiveSummary",
    "TriagePolicy",
    "mc_predict",
    "triage_decide",
    "GaussianVariationalParam",
    "PriorSpec",
    "elbo_mc",
    "kl_analytic",
]
