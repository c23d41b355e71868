"""Training orchestration: initial training, mining + retraining, pipelines."""

from .inference import decode, head_mode, infer_logits, predict_mask
from .loop import (EpochRecord, PatchSampler, TrainConfig, TrainHistory, fit, mine_and_retrain,
                   mine_errors, predict_regions, train)
from .pipelines import (PipelineResult, StageResult, cascade_predictor, combined_predictor, evaluate_arms,
                        mine_combined, run_cascade, run_combined, run_control, run_lesion_stage,
                        run_liver_stage)

__all__ = [
    "EpochRecord", "PatchSampler", "PipelineResult", "StageResult", "TrainConfig", "TrainHistory",
    "cascade_predictor", "combined_predictor", "decode", "evaluate_arms", "fit", "head_mode",
    "infer_logits", "mine_and_retrain", "mine_combined", "mine_errors", "predict_mask",
    "predict_regions", "run_cascade", "run_combined", "run_control", "run_lesion_stage",
    "run_liver_stage", "train",
]
