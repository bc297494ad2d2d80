"""BERT-like encoder with quantizer sites, calibration, QAT and diagnostics."""

from .model import CLS_ID, PAD_ID, SEP_ID, Encoder, EncoderConfig, EncoderError, activation_sites, \
    weight_sites
from .qconfig import ABLATION_GROUPS, MP_POLICIES, ConfigError, QuantConfig, SiteSettings, \
    assign_mixed_precision, leave_one_out_ablation, promoted_fraction, revert_mixed_precision
from .sim import NotCalibratedError, QuantState, accuracy, calibrate, forward_quantized, plan_peg, \
    predict_logits, site_errors
from .synthetic import attention_mass_on_token, inject_outlier_model, make_cooccurrence_task, \
    train_task_model
from .train import Adam, fit, qat_train_step, train_step, warmup_linear_decay
