"""Post-training quantization with closed-form linear block compensation."""
from .compensation import CompensationModule, insert_sequential, solve_blockdiagonal, solve_dense
from .modelfile import load_model, save_model
from .netgraph import ArchConfig, BlockNetwork, Mode, build_network, forward
from .pipeline import (DatasetConfig, EvalReport, FinetuneConfig, TrainConfig, compensate_model, evaluate, finetune,
                       make_dataset, quantize_model, sample_calibration, train_toy)
from .quantizer import QuantParams, QuantScheme, dequantize, fake_quant, fit_minmax, fit_percentile, quantize
from .sizing import model_size

__version__ = "0.1.0"
