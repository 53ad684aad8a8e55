from .metrics import ImageTooSmallError, ZeroReferenceVarianceError, msssim, score_all, uqi, vif
from .dlg import OPTIMIZERS, AttackResult, AttackTarget, dlg_attack, infer_gradient, infer_label, matching_objective, victim_update
from .sweep import (
    SOURCES,
    AttackReportRow,
    RoundArtifact,
    RunArtifacts,
    ScoreTable,
    random_baseline,
    recovery_pairs,
    score_attack_sweep,
    select_victims,
    uplink_learning_rate,
)
