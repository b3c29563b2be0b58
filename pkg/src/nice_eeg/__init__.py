"""Contrastive EEG-to-image decoding with zero-shot concept recognition."""
from .data_io import EEGEpochSet, FeatureBank, PairedDataset, SynthSpec, synth_generate
from .encoders import EncoderParams, HyperParams, encode, init_params, load_checkpoint, save_checkpoint
from .contrastive import TrainConfig, info_nce, train
from .zeroshot import TemplateBank, build_templates, classify, topk_accuracy

__version__ = "0.1.0"
