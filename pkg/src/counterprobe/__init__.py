"""counterprobe: sandboxed counterfactual interrogation of decision models.

An affected party hit by an adverse algorithmic decision opens a session
against the pinned model version, runs regulator-defined input
perturbations under strict budgets, and exports an appeal-grade evidence
package. Regulators get unannounced probe tooling and a tamper-evident
audit trail; organizations get parity and anomaly monitoring.
"""

from .audit import AuditLedger
from .clock import FixedClock, SystemClock
from .divergence import (
    Criterion,
    Direction,
    DivergenceConfig,
    DivergenceReport,
    Finding,
    QueryResult,
    assess_pattern,
    assess_single,
    compile_report,
    estimate_noise_floor,
)
from .host import (
    AdverseDecision,
    FixtureModel,
    JitterModel,
    Label,
    LinearModel,
    ModelRegistry,
    ReferencePopulation,
    ScoreOutcome,
    ThresholdPolicy,
    TunedLinearModel,
    VersionResolution,
    percentile_of,
)
from .perturbations import (
    REMOVED,
    ClassOrigin,
    FeatureKind,
    HypothesisDirection,
    InstanceStatus,
    PerturbationClass,
    PerturbationInstance,
    PerturbationRegistry,
    apply_instance,
    inverse,
)
from .records import Domain, FeatureRecord
from .sessions import (
    EvidencePackage,
    InterrogationSession,
    RequesterLedger,
    SessionManager,
    SessionState,
)

__version__ = "0.1.0"

__all__ = [
    "AdverseDecision",
    "AuditLedger",
    "ClassOrigin",
    "Criterion",
    "Direction",
    "DivergenceConfig",
    "DivergenceReport",
    "Domain",
    "EvidencePackage",
    "FeatureKind",
    "FeatureRecord",
    "Finding",
    "FixedClock",
    "FixtureModel",
    "HypothesisDirection",
    "InstanceStatus",
    "InterrogationSession",
    "JitterModel",
    "Label",
    "LinearModel",
    "ModelRegistry",
    "PerturbationClass",
    "PerturbationInstance",
    "PerturbationRegistry",
    "QueryResult",
    "REMOVED",
    "ReferencePopulation",
    "RequesterLedger",
    "ScoreOutcome",
    "SessionManager",
    "SessionState",
    "SystemClock",
    "ThresholdPolicy",
    "TunedLinearModel",
    "VersionResolution",
    "apply_instance",
    "assess_pattern",
    "assess_single",
    "compile_report",
    "estimate_noise_floor",
    "inverse",
    "percentile_of",
]
