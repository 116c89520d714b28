"""kermod: kernel-modulated ConvNet training.

Freeze a network's convolution weights and train tiny per-layer MLP
modulators (plus normalization affines and the classifier) instead. Task
specializations serialize to compact, bit-exact delta files applied over
the shared frozen base.
"""

from .autodiff import Tensor, conv2d, cross_entropy, matmul, precision
from .data import DatasetSplit, load_cifar10_binary, synth_task
from .delta import (KmDelta, apply_delta, check_delta, export_delta,
                    memory_report, read_delta, write_delta)
from .modulator import (InitSpec, KernelModulator, KernelShape, init_modulator,
                        modulate, modulator_param_count)
from .net import (MASK_ALL, MASK_BL, MASK_KM, Network, NetworkSpec,
                  ParamGroupMask, build_network, count_params)
from .norm import (NormLayer, batch_norm, fold_norm_into_conv, group_norm,
                   implicit_modulation_check, norm_forward)
from .train import (RunResult, TrainConfig, recovered_accuracy_ratio,
                    run_ablation, train)

__version__ = "0.1.0"
