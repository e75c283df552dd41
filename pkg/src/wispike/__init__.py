"""Spiking neural networks for WiFi CSI human action recognition, written on numpy."""

from .csi_data import (CompositeLabel, CsiSample, DatasetManifest, SyntheticActionSpec, activity_density,
                       compose_multi_action, generate_benchmark, normalize_mean_subtract, read_csi_file,
                       read_manifest, synthesize_sample, write_csi_file)
from .layers import ModelConfig, build_model, default_model_config, voting_forward
from .objective import LossConfig, hybrid_loss, mse_loss, supcon_loss
from .spike_engine import LifParams, SurrogateSpec, encode_constant_rate, if_step, lif_step, surrogate_grad
from .telemetry import compare_energy, count_dynamic, count_static, firing_rate
from .training import TrainConfig, evaluate, load_config, train

__version__ = "0.1.0"
