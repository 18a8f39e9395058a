"""Neuron-aware masked fine-tuning on a toy multimodal translation suite."""

from .autodiff import Graph, Tape, Tensor, backward, forward, register_tap
from .evalreport import corpus_bleu, evaluate
from .maskedft import FinetuneConfig, GradientMaskSet, ablation_mode_masks, finetune, masked_update
from .model import Model, ModelConfig, NeuronId, forward_it, init_model, list_neurons
from .neuronscore import (ScoreMatrix, build_score_matrix, exact_ablation, layer_relevance,
                          neuron_awareness, select_layers)
from .partition import NeuronPartition, build_partition
from .synthtask import make_languages, make_tasks, render_text, sample_dataset

__version__ = "0.1.0"
