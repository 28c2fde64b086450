"""Hidden-unit amplitude (LHUC) adaptation and speaker-adaptive training on numpy."""

from .adapter import (
    AdaptConfig,
    Metrics,
    adapt,
    evaluate,
    factorised_experiment,
    interpolate,
    one_shot_apply,
    pseudo_label,
    two_pass_adapt,
)
from .estimators import LHUCClassifier, LHUCRegressor
from .model import (
    REPARAM_KINDS,
    SI_CLUSTER,
    EffectiveScale,
    LhucTransform,
    NetworkParams,
    TransformBank,
    backward,
    forward,
    reparam,
)
from .synth import BumpSpec, ClusterTaskSpec, FrameDataset, MixtureBumpSpec, gen_bump, gen_multicluster
from .trainer import NewbobConfig, SatConfig, TrainConfig, assign_routes, train_sat, train_si

__version__ = "0.1.0"
