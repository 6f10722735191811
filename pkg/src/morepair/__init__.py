"""Multi-objective fine-tuning for program repair, desk scale.

A from-scratch float64 autograd engine drives a toy decoder-only transformer
whose frozen base weights can be NF4-quantized while low-rank adapters train.
The trainer combines a code-only loss with a weighted guidance+code loss;
the harness compiles and tests candidate patches and reports TOP-k repair
rates.
"""

from .autograd import Tape, Tensor
from .dataprep import RepairExample, RenderedPair
from .errors import (CorruptCheckpointError, EnvironmentFailure, ValidationError)
from .evalharness import (BenchmarkProblem, CandidateOutcome, EvalReport,
                          ToolchainProfile, evaluate, load_benchmark,
                          run_candidate, top_k)
from .infer import GenerationResult, SamplingConfig, extract_patch, generate
from .model import (ModelConfig, ModelWeights, forward_logits, init_weights,
                    quantize_base, trainable_fraction)
from .quant import (LoraAdapter, Nf4Codebook, QuantizedTensor, build_nf4_codebook,
                    double_dequant, quantize_nf4, quantized_linear_forward)
from .train import (LossBreakdown, TrainConfig, Trainer, load_checkpoint,
                    save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor",
    "RepairExample", "RenderedPair",
    "ValidationError", "EnvironmentFailure", "CorruptCheckpointError",
    "BenchmarkProblem", "CandidateOutcome", "EvalReport", "ToolchainProfile",
    "evaluate", "load_benchmark", "run_candidate", "top_k",
    "GenerationResult", "SamplingConfig", "extract_patch", "generate",
    "ModelConfig", "ModelWeights", "forward_logits", "init_weights",
    "quantize_base", "trainable_fraction",
    "LoraAdapter", "Nf4Codebook", "QuantizedTensor", "build_nf4_codebook",
    "double_dequant", "quantize_nf4", "quantized_linear_forward",
    "LossBreakdown", "TrainConfig", "Trainer", "load_checkpoint", "save_checkpoint",
    "__version__",
]
