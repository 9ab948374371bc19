"""aptdiff: adaptive personalized training for a toy conditional diffusion model."""

__version__ = "0.1.0"

_LAZY_IMPORTS = {
    "make_schedule": "aptdiff.schedule",
    "q_sample": "aptdiff.schedule",
    "predict_x0": "aptdiff.schedule",
    "sample_step": "aptdiff.schedule",
    "cfg_combine": "aptdiff.schedule",
    "NetConfig": "aptdiff.tinynet",
    "TinyUNet": "aptdiff.tinynet",
    "build_net": "aptdiff.tinynet",
    "Vocabulary": "aptdiff.cond",
    "build_pair": "aptdiff.cond",
    "make_corpus": "aptdiff.corpus",
    "make_reference_set": "aptdiff.corpus",
    "load_reference_set": "aptdiff.corpus",
    "BinMap": "aptdiff.indicator",
    "IndicatorState": "aptdiff.indicator",
    "compute_gamma": "aptdiff.indicator",
    "ema_update": "aptdiff.indicator",
    "RegWeights": "aptdiff.regularizers",
    "stat_losses": "aptdiff.regularizers",
    "attn_align_loss": "aptdiff.regularizers",
    "total_loss": "aptdiff.regularizers",
    "AugmentPolicy": "aptdiff.augment",
    "maybe_augment": "aptdiff.augment",
    "Checkpoint": "aptdiff.checkpoint",
    "CheckpointStore": "aptdiff.checkpoint",
    "ExperimentConfig": "aptdiff.config",
    "AptConfig": "aptdiff.config",
    "resolve_config": "aptdiff.config",
    "pretrain": "aptdiff.trainer",
    "personalize": "aptdiff.trainer",
    "Personalizer": "aptdiff.trainer",
    "delta_noise": "aptdiff.diagnostics",
    "gamma_report": "aptdiff.diagnostics",
    "sample": "aptdiff.diagnostics",
    "run_ablation_suite": "aptdiff.ablation",
}


def __getattr__(name: str):
    if name in _LAZY_IMPORTS:
        import importlib

        module = importlib.import_module(_LAZY_IMPORTS[name])
        return getattr(module, name)
    raise AttributeError(f"module 'aptdiff' has no attribute {name}")


__all__ = [*_LAZY_IMPORTS]
