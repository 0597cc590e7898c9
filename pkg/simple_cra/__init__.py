from .arch import ArchDescriptor, LayerSpec, build_resnet, build_toy
from .attention import AttentionTrace, CraConfig, cra_forward, extract_attentions, se_forward
from .cost import ablation_table, count_flops, count_params, emit_table
from .data import LabeledDataset, augment, load_cifar10, synth_dataset
from .model import Model, load_checkpoint, materialize, save_checkpoint
from .tensor import ComputationGraph, Tensor, backward, finite_diff_grad, tensor_create
from .train import TrainConfig, gradcheck, train
