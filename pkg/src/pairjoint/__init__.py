"""Explicit pairwise joint distributions from masked language model conditionals."""

__version__ = "0.1.0"

from .core import (
    ConditionalTable,
    DegenerateConditioningError,
    InputError,
    JointTable,
    MarginalVector,
    METHODS,
    NumericalError,
    PairRecord,
    PairjointError,
    Vocabulary,
    kl_divergence,
    log_normalize,
    logsumexp,
    row_conditionals,
)
from .constructions import (
    AGConfig,
    AGTrace,
    ag_joint,
    ag_objective,
    derive_joint,
    hcb_joint,
    hcb_pivot,
    mlm_joint,
    mrf_joint,
)
from .compat import (
    CompatReport,
    DeterministicSampler,
    SyntheticInstance,
    check_compatibility,
    gen_synthetic,
    synthetic_record,
    unfaithful_mrf_fixture,
)
from .metrics import (
    ExampleScores,
    MetricsReport,
    aggregate,
    distance_analysis,
    score_example,
)

__all__ = [
    "AGConfig",
    "AGTrace",
    "CompatReport",
    "ConditionalTable",
    "DegenerateConditioningError",
    "DeterministicSampler",
    "ExampleScores",
    "InputError",
    "JointTable",
    "METHODS",
    "MarginalVector",
    "MetricsReport",
    "NumericalError",
    "PairRecord",
    "PairjointError",
    "SyntheticInstance",
    "Vocabulary",
    "ag_joint",
    "ag_objective",
    "aggregate",
    "check_compatibility",
    "derive_joint",
    "distance_analysis",
    "gen_synthetic",
    "hcb_joint",
    "hcb_pivot",
    "kl_divergence",
    "log_normalize",
    "logsumexp",
    "mlm_joint",
    "mrf_joint",
    "row_conditionals",
    "score_example",
    "synthetic_record",
    "unfaithful_mrf_fixture",
]
