"""One-stage temporal action detection on pre-extracted clip features."""
from .core import (ActionInstance, ConfigError, DataError, Detection, Interval, NumericError, TadError,
                   VideoAnnotation, tiou)
from .estimator import TemporalActionDetector
from .evaluation import EvalConfig, EvalResult, evaluate
from .inference import Detector, FusionStage, PostConfig, Suppressor, nms, nmw
from .network import BackboneConfig, HeadConfig, HeadKind, ModelConfig, NeckConfig, NeckOperator, NeckVariant, TADNet
from .synthdata import SynthSpec, generate
from .trainer import OptimConfig, train

__version__ = "0.1.0"
