"""Treatment-gated concept bottleneck toolkit for immunotherapy response
prediction: a small reverse-mode autodiff core, the gated bottleneck model
with pathway / alignment / auxiliary side objectives, synthetic cohort data,
leave-one-group-out evaluation protocols, and biomarker baselines."""

__version__ = "0.1.0"
